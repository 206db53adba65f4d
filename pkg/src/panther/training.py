"""Training: generative next-token loss, distance-softmax contrastive loss
over profile embeddings, their weighted combination, Adam with global-norm
clipping, and the pretrain / fine-tune loops with best-validation
checkpointing."""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation, kernels
from .errors import ConfigError, VocabMismatchError
from .model import Model, load_checkpoint, load_compatible, save_checkpoint
from .tokenizer import encode


@dataclass
class LossWeights:
    lam: float = 0.1             # weight on the contrastive term
    temperature: float = 0.1     # distance-softmax temperature
    cl_stop_gradient: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("loss mixing weight must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("contrastive temperature must be positive")


@dataclass
class PositivePairPolicy:
    """Which profile pairs count as positives: every rule must hold.

    A rule is either "exact" or an integer maximum bucket distance for
    ordinal attributes encoded as integer strings.
    """

    rules: dict = field(default_factory=lambda: {"region": "exact", "age_bucket": 1})

    def pair_mask(self, profiles):
        B = len(profiles)
        mask = np.ones((B, B), dtype=bool)
        for attr, rule in self.rules.items():
            vals = [p.get(attr) if p else None for p in profiles]
            ok = np.zeros((B, B), dtype=bool)
            if rule == "exact":
                for i in range(B):
                    for j in range(B):
                        ok[i, j] = vals[i] is not None and vals[i] == vals[j]
            else:
                nums = []
                for v in vals:
                    try:
                        nums.append(int(v))
                    except (TypeError, ValueError):
                        nums.append(None)
                for i in range(B):
                    for j in range(B):
                        ok[i, j] = (
                            nums[i] is not None and nums[j] is not None
                            and abs(nums[i] - nums[j]) <= int(rule)
                        )
            mask &= ok
        np.fill_diagonal(mask, False)
        return mask


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 1
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.epochs + 1, 1) < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("training hyperparameters must be positive")


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, named_params):
        """One update over all params with gradients; returns the grad norm."""
        grads = [(n, p) for n, p in named_params if p.grad is not None]
        if not grads:
            return 0.0
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in grads)
        norm = float(np.sqrt(sq))
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        self.t += 1
        for name, p in grads:
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            g = np.ascontiguousarray(p.grad * p.data.dtype.type(scale))
            kernels.adam_update(p.data, g, self.m[name], self.v[name],
                                self.lr, self.beta1, self.beta2, self.eps, self.t)
        return norm


@dataclass
class Batch:
    ids: np.ndarray        # [B, T], 0-padded
    lengths: np.ndarray    # [B]
    profiles: list
    user_ids: list


def generative_loss(model, batch):
    """Mean next-token negative log-likelihood over non-pad positions.

    Returns (loss, e_u) so callers can reuse the profile embeddings.
    """
    ids = batch.ids
    B, T = ids.shape
    if T < 2 and model.config.profile_mode != "first_token":
        raise ConfigError("sequences must have at least 2 events")
    logits, e_u, _ = model.forward(ids, batch.profiles)
    if model.config.profile_mode == "first_token":
        use = logits[:, :-1, :]
        targets = ids
        valid = np.arange(T)[None, :] < batch.lengths[:, None]
    else:
        use = logits[:, :-1, :]
        targets = ids[:, 1:]
        valid = (np.arange(T - 1)[None, :] + 1) < batch.lengths[:, None]
    if not valid.any():
        raise ConfigError("batch contains no unpadded target positions")
    loss = ad.cross_entropy(use, targets, mask=valid.astype(use.dtype))
    return loss, e_u


def contrastive_loss(e_u, pos_mask, temperature):
    """Distance-softmax loss over ordered positive pairs.

    Each term is -log( exp(-d_ij/t) / sum_{k != i} exp(-d_ik/t) ) with the
    denominator over all in-batch non-self rows; the result is the mean
    over ordered positive pairs. Returns (loss, n_pairs).
    """
    if temperature <= 0:
        raise ConfigError("contrastive temperature must be positive")
    B = e_u.shape[0]
    n_pairs = int(pos_mask.sum())
    if n_pairs == 0:
        return ad.tensor(np.zeros(()), dtype=e_u.dtype), 0
    dist = ad.pairwise_distance(e_u)
    sim = ad.mul(dist, -1.0 / temperature)
    diag = np.zeros((B, B), dtype=e_u.data.dtype)
    np.fill_diagonal(diag, -1e9)
    lse = ad.logsumexp(ad.add(sim, ad.tensor(diag, dtype=e_u.dtype)), axis=1, keepdims=True)
    terms = ad.sub(lse, sim)
    picked = ad.mul(terms, ad.tensor(pos_mask.astype(e_u.data.dtype), dtype=e_u.dtype))
    return ad.mul(ad.tsum(picked), 1.0 / n_pairs), n_pairs


def combined_step(model, batch, weights, policy, adam, dump_dir="."):
    """One optimizer step on (1-lam)*generative + lam*contrastive."""
    lam = weights.lam
    l_cl = None
    n_pairs = 0
    if lam == 0.0:
        loss, _ = generative_loss(model, batch)
        l_gen = loss
    else:
        pos_mask = policy.pair_mask(batch.profiles)
        if lam == 1.0:
            e_u = model.profile_embedding(batch.profiles)
            l_gen = None
            l_cl, n_pairs = contrastive_loss(
                e_u.detach() if weights.cl_stop_gradient else e_u,
                pos_mask, weights.temperature)
            loss = l_cl
        else:
            l_gen, e_u = generative_loss(model, batch)
            l_cl, n_pairs = contrastive_loss(
                e_u.detach() if weights.cl_stop_gradient else e_u,
                pos_mask, weights.temperature)
            loss = ad.add(ad.mul(l_gen, 1.0 - lam), ad.mul(l_cl, lam))

    total = loss.item()
    if not np.isfinite(total):
        dump = {
            "user_ids": batch.user_ids,
            "lengths": batch.lengths.tolist(),
            "l_gen": None if l_gen is None else l_gen.item(),
            "l_cl": None if l_cl is None else l_cl.item(),
        }
        path = f"{dump_dir}/nan_batch_dump.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dump, fh, indent=2)
        raise FloatingPointError(f"non-finite loss; offending batch dumped to {path}")

    model.zero_grads()
    loss.backward()
    grad_norm = adam.step(model.named_params())
    model.zero_grads()
    return {
        "l_total": total,
        "l_gen": l_gen.item() if l_gen is not None else 0.0,
        "l_cl": l_cl.item() if l_cl is not None else 0.0,
        "n_pos_pairs": n_pairs,
        "cl_skipped": 1 if (lam > 0 and n_pairs == 0) else 0,
        "grad_norm": grad_norm,
    }


@dataclass
class TrainData:
    """Encoded corpus: per-user id arrays, split cuts, and the event-level
    side information downstream scoring needs (labels, context value
    indices, counterparty ids)."""

    user_ids: list
    seqs: list
    profiles: list
    cuts: dict
    vocab_hash: str
    vocab_size: int
    labels: list = field(default_factory=list)      # [T] ints, -1 = unlabeled
    ctx_idx: list = field(default_factory=list)     # [T, n_attrs] value indices
    merchants: list = field(default_factory=list)   # [T] counterparty ids
    timestamps: list = field(default_factory=list)  # [T] event times


def prepare_data(users, vocab, split):
    names = vocab.schema.names
    val_index = {n: {v: i + 1 for i, v in enumerate(vocab.schema.values[n])} for n in names}
    user_ids, seqs, profiles, labels, ctx_idx, merchants = [], [], [], [], [], []
    timestamps = []
    for u in users:
        ts = encode(u, vocab)
        user_ids.append(u.user_id)
        seqs.append(ts.ids.astype(np.int64))
        timestamps.append(ts.timestamps)
        profiles.append(dict(u.profile))
        labels.append(np.array(
            [-1 if ev.label is None else int(ev.label) for ev in u.events], dtype=np.int64))
        ctx = np.zeros((len(u.events), len(names)), dtype=np.int64)
        for t, ev in enumerate(u.events):
            for a, n in enumerate(names):
                ctx[t, a] = val_index[n].get(ev.attributes.get(n), 0)
        ctx_idx.append(ctx)
        merchants.append([ev.counterparty_id for ev in u.events])
    return TrainData(user_ids=user_ids, seqs=seqs, profiles=profiles,
                     cuts=dict(split.cuts), vocab_hash=vocab.content_hash(),
                     vocab_size=len(vocab), labels=labels, ctx_idx=ctx_idx,
                     merchants=merchants, timestamps=timestamps)


def make_batch(data, idxs, limit):
    """Assemble a padded training batch from users' train-region tokens."""
    rows = []
    for i in idxs:
        c1, _ = data.cuts[data.user_ids[i]]
        rows.append(data.seqs[i][:c1][-limit:])
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for r, row in enumerate(rows):
        ids[r, :len(row)] = row
        lengths[r] = len(row)
    return Batch(ids=ids, lengths=lengths,
                 profiles=[data.profiles[i] for i in idxs],
                 user_ids=[data.user_ids[i] for i in idxs])


def _context_limit(config):
    return config.max_len if config.profile_mode != "first_token" else config.max_len - 1


def _spans(data, region):
    out = []
    for uid, seq in zip(data.user_ids, data.seqs):
        c1, c2 = data.cuts[uid]
        if region == "validation":
            out.append((c1, c2))
        elif region == "test":
            out.append((c2, len(seq)))
        else:
            out.append((0, c1))
    return out


def evaluate(model, data, region="validation", hr_ks=(1, 5, 10), ndcg_ks=(5, 10),
             last_only=False):
    spans = _spans(data, region)
    return evaluation.rank_eval(model, data.seqs, data.profiles, spans,
                                data.vocab_size, hr_ks=hr_ks, ndcg_ks=ndcg_ks,
                                last_only=last_only)


def train(data, model_config, train_config, weights=None, policy=None,
          log_path=None, ckpt_path=None, model=None, adam=None):
    """Pretraining loop; returns (model, history).

    Per epoch: shuffled user batches through combined_step, then a
    validation ranking report. The best-HR@1 parameter snapshot is what
    the returned model (and saved checkpoint) carries.
    """
    weights = weights or LossWeights(lam=0.0)
    policy = policy or PositivePairPolicy()
    if model is None:
        model = Model(model_config, seed=train_config.seed)
    adam = adam or Adam(train_config.lr, train_config.betas, train_config.eps,
                        train_config.clip_norm)
    rng = np.random.default_rng(train_config.seed)
    limit = _context_limit(model.config)
    trainable = [i for i, uid in enumerate(data.user_ids) if data.cuts[uid][0] >= 2]
    if not trainable:
        raise ConfigError("no users with at least 2 training events")
    has_val = any(c2 > c1 for c1, c2 in (data.cuts[u] for u in data.user_ids))

    history = []
    best_hr1 = -1.0
    best_snapshot = None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(train_config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(trainable)
            sums = {"l_gen": 0.0, "l_cl": 0.0, "cl_skipped": 0}
            n_batches = 0
            for lo in range(0, len(order), train_config.batch_size):
                idxs = order[lo:lo + train_config.batch_size]
                rep = combined_step(model, make_batch(data, idxs, limit), weights, policy, adam)
                sums["l_gen"] += rep["l_gen"]
                sums["l_cl"] += rep["l_cl"]
                sums["cl_skipped"] += rep["cl_skipped"]
                n_batches += 1
            row = {
                "epoch": epoch,
                "l_gen": sums["l_gen"] / n_batches,
                "l_cl": sums["l_cl"] / n_batches,
                "cl_skipped_batches": sums["cl_skipped"],
            }
            if has_val:
                rep = evaluate(model, data, "validation")
                row.update({"hr1": rep.hr[1], "hr5": rep.hr[5], "hr10": rep.hr[10]})
                if rep.hr[1] > best_hr1:
                    best_hr1 = rep.hr[1]
                    best_snapshot = {n: p.data.copy() for n, p in model.named_params()}
            row["wall_clock_s"] = time.perf_counter() - t0
            history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if best_snapshot is not None:
        for n, p in model.named_params():
            p.data = best_snapshot[n]
    if ckpt_path:
        save_checkpoint(model, ckpt_path, vocab_hash=data.vocab_hash)
    return model, history


def fine_tune(ckpt_path, data, train_config, weights=None, policy=None,
              reinit_embeddings=False, log_path=None, ckpt_out=None):
    """Warm-start from a checkpoint and continue training on new data.

    The checkpoint's vocabulary hash must match the corpus unless
    `reinit_embeddings` remaps the token table from scratch.
    """
    donor, vocab_hash = load_checkpoint(ckpt_path)
    if vocab_hash != data.vocab_hash and not reinit_embeddings:
        raise VocabMismatchError(
            f"checkpoint vocabulary {vocab_hash} does not match corpus "
            f"{data.vocab_hash}; pass reinit_embeddings to remap"
        )
    config = donor.config
    if config.vocab_size != data.vocab_size:
        config.vocab_size = data.vocab_size
    model = Model(config, seed=train_config.seed)
    copied = load_compatible(model, ckpt_path)
    if reinit_embeddings and vocab_hash != data.vocab_hash and "tok_emb" in copied:
        fresh = Model(config, seed=train_config.seed)
        model.params["tok_emb"].data = fresh.params["tok_emb"].data.copy()
    if train_config.epochs == 0:
        if ckpt_out:
            save_checkpoint(model, ckpt_out, vocab_hash=data.vocab_hash)
        return model, []
    return train(data, config, train_config, weights=weights, policy=policy,
                 log_path=log_path, ckpt_path=ckpt_out, model=model)


def lambda_sweep(data, model_config, train_config, lambdas=(0.1, 0.2, 0.4, 0.8),
                 temperature=0.1, policy=None):
    """Train one model per mixing weight and report the three HR metrics."""
    rows = []
    for lam in lambdas:
        model, _ = train(data, model_config, train_config,
                         weights=LossWeights(lam=lam, temperature=temperature),
                         policy=policy)
        rep = evaluate(model, data, "test")
        rows.append({"lambda": lam, "hr1": rep.hr[1], "hr5": rep.hr[5], "hr10": rep.hr[10]})
    return rows
