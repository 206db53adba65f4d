"""Stage-2 consumers of the pretrained model: behavior-deviation scores,
quantile-based merchant risk aggregation, and the hybrid fraud scorer that
fuses transaction context, a TextCNN-style encoding of the recent window,
the cached profile embedding, and a deviation feature."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .evaluation import candidate_ids
from .kernels import adam_update
from .tokenizer import PAD_ID

SURPRISAL_CLIP = 30.0
SIGMA_FLOOR = 1e-9


@dataclass
class DeviationScore:
    user_id: str
    candidate: object          # token id or merchant id
    delta: float
    mu: float
    sigma: float
    degenerate: bool = False

    def to_json(self):
        return {"user": self.user_id, "merchant": self.candidate,
                "delta": self.delta, "mu": self.mu, "sigma": self.sigma,
                "flag": self.degenerate}


@dataclass
class MerchantRiskScore:
    merchant_id: str
    r_m: float
    q: float
    n_users: int
    median: float
    iqr: float
    flagged: bool = False

    def to_json(self):
        return {"merchant": self.merchant_id, "r_m": self.r_m, "q": self.q,
                "n_users": self.n_users, "median": self.median,
                "iqr": self.iqr, "flagged": self.flagged}


def standardized_deviation(dist, index, user_id="", candidate=None):
    """Z-score of one entry against the distribution's own mean/std.

    Population standard deviation; a near-uniform distribution (sigma
    below floor) yields delta 0 with the degenerate flag set.
    """
    dist = np.asarray(dist, dtype=np.float64)
    mu = float(dist.mean())
    sigma = float(dist.std())
    if sigma < SIGMA_FLOOR:
        return DeviationScore(user_id=user_id, candidate=candidate,
                              delta=0.0, mu=mu, sigma=sigma, degenerate=True)
    return DeviationScore(user_id=user_id, candidate=candidate,
                          delta=(float(dist[index]) - mu) / sigma,
                          mu=mu, sigma=sigma)


def surprisal(prob):
    """-log p, clipped; the per-transaction deviation feature."""
    p = float(prob)
    if p <= 0 or not np.isfinite(p):
        return SURPRISAL_CLIP
    return float(min(-np.log(p), SURPRISAL_CLIP))


def category_index(vocab, category_attr):
    """Per-retained-token index of one attribute's value.

    Returns (values, idx) with idx[i] the value index of retained token i.
    """
    names = vocab.schema.names
    if category_attr not in names:
        raise ConfigError(f"attribute {category_attr!r} not in the vocabulary schema")
    pos = names.index(category_attr)
    values = list(vocab.schema.values[category_attr])
    lut = {v: i for i, v in enumerate(values)}
    idx = np.array([lut[tok.values[pos]] for tok in vocab.tokens], dtype=np.int64)
    return values, idx


def category_marginals(probs_row, vocab, category_attr):
    """Collapse candidate-token probabilities by one attribute's value.

    Returns (values, marginal); the UNK/PAD/PROFILE share is dropped.
    """
    from .tokenizer import NUM_RESERVED

    values, idx = category_index(vocab, category_attr)
    marg = np.bincount(idx, weights=np.asarray(probs_row, dtype=np.float64)[NUM_RESERVED:],
                       minlength=len(values))
    return values, marg


def deviation(model, prefix_ids, candidate, vocab, profile=None, mode="merchant",
              category_attr="merchant_category", user_id=""):
    """Deviation of one candidate under the model's next-token distribution.

    mode "token": candidate is a token id, scored against the candidate-token
    distribution. mode "merchant": candidate is a value of `category_attr`
    and token probabilities are marginalized by that attribute first.
    """
    prefix_ids = np.asarray(prefix_ids)
    if prefix_ids.size == 0:
        raise ConfigError("deviation requires a nonempty prefix")
    probs, _ = model.predict_probs(prefix_ids[None, :], [profile or {}])
    row = probs[0, -1]
    if mode == "token":
        cands = candidate_ids(len(vocab))
        dist = row[cands]
        index = int(np.where(cands == int(candidate))[0][0])
    elif mode == "merchant":
        values, dist = category_marginals(row, vocab, category_attr)
        index = values.index(candidate)
    else:
        raise ConfigError(f"unknown deviation mode {mode!r}")
    return standardized_deviation(dist, index, user_id=user_id, candidate=candidate)


def merchant_risk(deviations, q=0.05, threshold=-1.0):
    """Quantile risk score per merchant from (merchant, user, delta) rows.

    Multiple interactions of one user with one merchant average into a
    single delta. R_m is the element-interpolated q-quantile of the
    per-user deltas; merchants with R_m <= threshold are flagged
    (lower-tail convention: strongly negative deviation = behavior
    unusually unlikely for the merchant's users).
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {q}")
    per_pair = {}
    for item in deviations:
        if isinstance(item, DeviationScore):
            merchant, user, delta = item.candidate, item.user_id, item.delta
        else:
            merchant, user, delta = item
        per_pair.setdefault(merchant, {}).setdefault(user, []).append(float(delta))
    out = []
    for merchant in sorted(per_pair):
        vals = np.array([np.mean(v) for v in per_pair[merchant].values()])
        r_m = float(np.quantile(vals, q))
        out.append(MerchantRiskScore(
            merchant_id=merchant, r_m=r_m, q=q, n_users=len(vals),
            median=float(np.median(vals)),
            iqr=float(np.quantile(vals, 0.75) - np.quantile(vals, 0.25)),
            flagged=r_m <= threshold,
        ))
    flagged = {s.merchant_id for s in out if s.flagged}
    return out, flagged


def write_deviations(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_json()) + "\n")


def write_risk(scores, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({s.merchant_id: s.to_json() for s in scores}, fh, indent=2)


# --- hybrid scorer (g_phi) ----------------------------------------------


@dataclass
class ScorerConfig:
    schema_values: dict          # context attr -> value tuple
    vocab_size: int
    profile_dim: int             # d of the cached e_u
    ctx_dim: int = 8
    token_dim: int = 8
    conv_widths: tuple = (2, 3, 5)
    conv_filters: int = 8
    hidden: int = 32
    window: int = 100
    use_profile: bool = True     # ablation switch: e_u feature
    use_deviation: bool = True   # ablation switch: delta feature

    def __post_init__(self):
        self.schema_values = {k: tuple(v) for k, v in self.schema_values.items()}
        if isinstance(self.conv_widths, list):
            self.conv_widths = tuple(self.conv_widths)

    def feature_dim(self):
        return (len(self.schema_values) * self.ctx_dim
                + len(self.conv_widths) * self.conv_filters
                + self.profile_dim + 2)  # delta + window fill


@dataclass
class ScoringSamples:
    """Feature rows for scorer training/evaluation."""

    ctx: np.ndarray        # [N, n_attrs] value indices
    recent: np.ndarray     # [N, W] token ids, 0-padded on the left
    rec_len: np.ndarray    # [N]
    e_u: np.ndarray        # [N, d]
    delta: np.ndarray      # [N]
    labels: np.ndarray     # [N]
    user_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ScoringSamples(self.ctx[idx], self.recent[idx], self.rec_len[idx],
                              self.e_u[idx], self.delta[idx], self.labels[idx],
                              [self.user_ids[i] for i in idx] if self.user_ids else [])


class HybridScorer:
    """Two-layer perceptron over fused features with a sigmoid head."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        p = {}

        def param(name, arr):
            p[name] = ad.tensor(arr, requires_grad=True, dtype=np.float32)

        for attr in c.schema_values:
            param(f"ctx.{attr}", rng.standard_normal((len(c.schema_values[attr]) + 1, c.ctx_dim)) * 0.05)
        param("tok_emb", rng.standard_normal((c.vocab_size, c.token_dim)) * 0.05)
        for w in c.conv_widths:
            param(f"conv{w}.w", rng.standard_normal((w * c.token_dim, c.conv_filters)) * 0.1)
            param(f"conv{w}.b", np.zeros(c.conv_filters))
        param("mlp.w1", rng.standard_normal((c.feature_dim(), c.hidden)) * 0.1)
        param("mlp.b1", np.zeros(c.hidden))
        param("mlp.w2", rng.standard_normal((c.hidden, 1)) * 0.1)
        param("mlp.b2", np.zeros(1))
        self.params = p

    def named_params(self):
        return self.params.items()

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def features(self, samples):
        """Assemble the fused feature tensor [N, feature_dim]."""
        c = self.config
        N, W = samples.recent.shape
        parts = []
        for a, attr in enumerate(c.schema_values):
            parts.append(ad.embedding(self.params[f"ctx.{attr}"], samples.ctx[:, a]))

        present = (samples.recent != PAD_ID).astype(np.float32)[:, :, None]
        emb = ad.mul(ad.embedding(self.params["tok_emb"], samples.recent),
                     ad.tensor(present))
        for w in c.conv_widths:
            shifted = []
            for k in range(w - 1, -1, -1):  # causal taps: t-k .. t
                if k == 0:
                    shifted.append(emb)
                else:
                    pad = ad.tensor(np.zeros((N, k, c.token_dim), dtype=np.float32))
                    shifted.append(ad.concat([pad, emb[:, :W - k, :]], axis=1))
            stacked = ad.concat(shifted, axis=2)
            conv = ad.relu(ad.add(ad.matmul(stacked, self.params[f"conv{w}.w"]),
                                  self.params[f"conv{w}.b"]))
            parts.append(ad.tmax(conv, axis=1))

        if c.use_profile:
            parts.append(ad.tensor(samples.e_u.astype(np.float32)))
        else:
            parts.append(ad.tensor(np.zeros_like(samples.e_u, dtype=np.float32)))
        delta = samples.delta.astype(np.float32)[:, None]
        if not c.use_deviation:
            delta = np.zeros_like(delta)
        parts.append(ad.tensor(delta))
        fill = (samples.rec_len / max(c.window, 1)).astype(np.float32)[:, None]
        parts.append(ad.tensor(fill))
        return ad.concat(parts, axis=1)

    def logits(self, samples):
        f = self.features(samples)
        h = ad.relu(ad.add(ad.matmul(f, self.params["mlp.w1"]), self.params["mlp.b1"]))
        out = ad.add(ad.matmul(h, self.params["mlp.w2"]), self.params["mlp.b2"])
        return ad.reshape(out, (len(samples),))

    def scores(self, samples):
        """Fraud probabilities in (0, 1), graph-free."""
        with ad.no_grad():
            z = self.logits(samples)
            return 1.0 / (1.0 + np.exp(-z.data))

    def save(self, path):
        arrays = {name: t.data for name, t in self.params.items()}
        cfg = {
            "schema_values": {k: list(v) for k, v in self.config.schema_values.items()},
            "vocab_size": self.config.vocab_size,
            "profile_dim": self.config.profile_dim,
            "ctx_dim": self.config.ctx_dim,
            "token_dim": self.config.token_dim,
            "conv_widths": list(self.config.conv_widths),
            "conv_filters": self.config.conv_filters,
            "hidden": self.config.hidden,
            "window": self.config.window,
            "use_profile": self.config.use_profile,
            "use_deviation": self.config.use_deviation,
        }
        np.savez(path, __config__=json.dumps(cfg), **arrays)

    @classmethod
    def load(cls, path):
        data = np.load(path, allow_pickle=False)
        cfg = json.loads(str(data["__config__"]))
        cfg["schema_values"] = {k: tuple(v) for k, v in cfg["schema_values"].items()}
        scorer = cls(ScorerConfig(**cfg), seed=0)
        for name, t in scorer.params.items():
            t.data = data[name].astype(np.float32)
        return scorer


def train_scorer(samples, config, epochs=4, batch_size=256, lr=3e-3, seed=0):
    """Fit g_phi with Adam on binary cross-entropy; returns the scorer."""
    scorer = HybridScorer(config, seed=seed)
    rng = np.random.default_rng(seed)
    state = {}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), batch_size):
            batch = samples.subset(order[lo:lo + batch_size])
            loss = ad.bce_with_logits(scorer.logits(batch), batch.labels.astype(np.float32))
            scorer.zero_grads()
            loss.backward()
            step += 1
            for name, p in scorer.named_params():
                if p.grad is None:
                    continue
                if name not in state:
                    state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
                m, v = state[name]
                adam_update(p.data, np.ascontiguousarray(p.grad), m, v,
                            lr, 0.9, 0.999, 1e-8, step)
            scorer.zero_grads()
    return scorer


def build_scoring_samples(model, data, vocab, region="train", window=100,
                          batch_size=64):
    """Offline feature extraction: one sample per labeled event position.

    delta is the exact surprisal of the observed token under the model's
    per-position predictions (one forward per user covers all positions).
    """
    from .training import _context_limit, _spans

    limit = _context_limit(model.config)
    spans = _spans(data, region)
    rows = {"ctx": [], "recent": [], "rec_len": [], "e_u": [], "delta": [],
            "labels": [], "user_ids": []}
    names = vocab.schema.names

    for start in range(0, len(data.user_ids), batch_size):
        idxs = range(start, min(start + batch_size, len(data.user_ids)))
        idxs = [i for i in idxs if spans[i][1] > max(spans[i][0], 1)]
        if not idxs:
            continue
        width = min(limit, max(len(data.seqs[i]) for i in idxs))
        ids = np.zeros((len(idxs), width), dtype=np.int64)
        offs = []
        for r, i in enumerate(idxs):
            seq = data.seqs[i][-width:] if len(data.seqs[i]) > width else data.seqs[i]
            off = len(data.seqs[i]) - len(seq)
            ids[r, :len(seq)] = seq
            offs.append(off)
        probs, e_us = model.predict_probs(ids, [data.profiles[i] for i in idxs])

        for r, i in enumerate(idxs):
            uid = data.user_ids[i]
            seq = data.seqs[i]
            labels = data.labels[i]
            lo, hi = spans[i]
            off = offs[r]
            for t in range(max(lo, off + 1, 1), hi):
                row_idx = (t - off) if model.config.profile_mode == "first_token" else (t - off - 1)
                p_obs = probs[r, row_idx, seq[t]]
                recent = seq[max(0, t - window):t]
                rows["ctx"].append(data.ctx_idx[i][t])
                rec = np.zeros(window, dtype=np.int64)
                rec[window - len(recent):] = recent
                rows["recent"].append(rec)
                rows["rec_len"].append(len(recent))
                rows["e_u"].append(e_us[r])
                rows["delta"].append(surprisal(p_obs))
                rows["labels"].append(labels[t])
                rows["user_ids"].append(uid)

    if not rows["labels"]:
        raise ConfigError(f"no labeled positions in region {region!r}")
    return ScoringSamples(
        ctx=np.asarray(rows["ctx"], dtype=np.int64),
        recent=np.stack(rows["recent"]),
        rec_len=np.asarray(rows["rec_len"], dtype=np.int64),
        e_u=np.stack(rows["e_u"]),
        delta=np.asarray(rows["delta"], dtype=np.float64),
        labels=np.asarray(rows["labels"], dtype=np.int64),
        user_ids=rows["user_ids"],
    )


def merchant_deviation_rows(model, data, vocab, region="test", mode="merchant",
                            category_attr="merchant_category", batch_size=64):
    """Deviation scores for every counterparty interaction in a region.

    One batched forward per user window yields all per-position
    distributions; each event with a counterparty contributes one
    DeviationScore keyed by that merchant.
    """
    from .training import _context_limit, _spans

    limit = _context_limit(model.config)
    spans = _spans(data, region)
    if mode == "merchant":
        _, cat_idx = category_index(vocab, category_attr)
        n_cats = len(vocab.schema.values[category_attr])
        names = vocab.schema.names
        cat_pos = names.index(category_attr)
    cands = candidate_ids(data.vocab_size)
    from .tokenizer import NUM_RESERVED

    out = []
    for start in range(0, len(data.user_ids), batch_size):
        idxs = [i for i in range(start, min(start + batch_size, len(data.user_ids)))
                if spans[i][1] > max(spans[i][0], 1)]
        if not idxs:
            continue
        width = min(limit, max(len(data.seqs[i]) for i in idxs))
        ids = np.zeros((len(idxs), width), dtype=np.int64)
        offs = []
        for r, i in enumerate(idxs):
            seq = data.seqs[i][-width:] if len(data.seqs[i]) > width else data.seqs[i]
            ids[r, :len(seq)] = seq
            offs.append(len(data.seqs[i]) - len(seq))
        probs, _ = model.predict_probs(ids, [data.profiles[i] for i in idxs])

        for r, i in enumerate(idxs):
            uid = data.user_ids[i]
            lo, hi = spans[i]
            off = offs[r]
            for t in range(max(lo, off + 1, 1), hi):
                cp = data.merchants[i][t]
                if cp is None:
                    continue
                row_idx = (t - off) if model.config.profile_mode == "first_token" else (t - off - 1)
                row = probs[r, row_idx]
                if mode == "merchant":
                    marg = np.bincount(cat_idx, weights=row[NUM_RESERVED:].astype(np.float64),
                                       minlength=n_cats)
                    index = int(data.ctx_idx[i][t, cat_pos]) - 1
                    if index < 0:
                        continue
                    score = standardized_deviation(marg, index, user_id=uid, candidate=cp)
                else:
                    dist = row[cands]
                    index = int(np.where(cands == data.seqs[i][t])[0][0])
                    score = standardized_deviation(dist, index, user_id=uid, candidate=cp)
                out.append(score)
    return out
