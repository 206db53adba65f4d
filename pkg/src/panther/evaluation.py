"""Full-ranking next-token evaluation (HR@K, NDCG@K) and top-share recall.

Every candidate token is scored at every held-out position (no sampled
negatives). Ranks break ties deterministically by ascending token id, so
reports are invariant under any strictly monotone transform of scores.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .tokenizer import PAD_ID, PROFILE_ID

HR_KS = (1, 5, 10, 50)
NDCG_KS = (5, 10)
RECALL_LEVELS = (0.0001, 0.001, 0.01)


@dataclass
class RankingReport:
    hr: dict
    ndcg: dict
    n_positions: int
    protocol: str = "full-ranking"

    def to_json(self):
        return {
            "protocol": self.protocol,
            "n_positions": self.n_positions,
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)


@dataclass
class RecallAtTopReport:
    recall: dict          # p -> float or None
    flags: dict = field(default_factory=dict)
    n_positives: int = 0
    n_total: int = 0

    def to_json(self):
        return {
            "recall": {f"{100 * p:g}%": v for p, v in self.recall.items()},
            "flags": self.flags,
            "n_positives": self.n_positives,
            "n_total": self.n_total,
        }


def candidate_ids(vocab_size):
    """All scoreable token ids: everything except padding and the profile slot."""
    ids = np.arange(vocab_size)
    return ids[(ids != PAD_ID) & (ids != PROFILE_ID)]


def ranks_from_scores(rows, targets, cands):
    """1-based rank of each target among candidate scores.

    rows: [N, V] scores over the full id space; targets: [N] target ids;
    cands: candidate id subset. Descending scores, ties broken by
    ascending id.
    """
    sub = rows[:, cands]
    tgt_scores = np.take_along_axis(rows, targets[:, None], axis=1)
    higher = (sub > tgt_scores).sum(axis=1)
    tied_before = ((sub == tgt_scores) & (cands[None, :] < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def report_from_ranks(ranks, hr_ks=HR_KS, ndcg_ks=NDCG_KS):
    if len(ranks) == 0:
        raise ConfigError("no evaluation positions")
    ranks = np.asarray(ranks)
    hr = {k: float((ranks <= k).mean()) for k in hr_ks}
    ndcg = {
        k: float(((ranks <= k) / np.log2(ranks + 1)).mean())
        for k in ndcg_ks
    }
    return RankingReport(hr=hr, ndcg=ndcg, n_positions=int(len(ranks)))


def _context_limit(config):
    return config.max_len if config.profile_mode != "first_token" else config.max_len - 1


def _logit_row_for_target(config, t):
    """Output row holding the distribution for target position t."""
    return t if config.profile_mode == "first_token" else t - 1


def collect_eval_rows(model, seqs, profiles, spans, batch_size=64):
    """Score rows and targets for held-out positions.

    seqs: list of id arrays (full user sequences); spans: per-user (lo, hi)
    target index ranges. Positions are conditioned on the full available
    prefix, truncated to the model's context limit. Yields (rows, targets)
    blocks.
    """
    limit = _context_limit(model.config)
    jobs = []  # (seq index, window start, window ids length, targets in window)
    for idx, (ids, (lo, hi)) in enumerate(zip(seqs, spans)):
        if model.config.profile_mode != "first_token":
            lo = max(lo, 1)  # position 0 has no prefix without a profile token
        t = lo
        while t < hi:
            hi_chunk = min(hi, t + max(limit // 2, 1))
            start = max(0, hi_chunk - limit)
            jobs.append((idx, start, hi_chunk - start, t, hi_chunk))
            t = hi_chunk
    jobs.sort(key=lambda j: j[2])
    for b0 in range(0, len(jobs), batch_size):
        chunk = jobs[b0:b0 + batch_size]
        width = max(j[2] for j in chunk)
        ids_mat = np.zeros((len(chunk), width), dtype=np.int64)
        profs = []
        for row, (idx, start, n, _, _) in enumerate(chunk):
            ids_mat[row, :n] = seqs[idx][start:start + n]
            profs.append(profiles[idx])
        with ad.no_grad():
            logits, _, _ = model.forward(ids_mat, profs)
        rows_out = []
        tgts_out = []
        for row, (idx, start, n, tlo, thi) in enumerate(chunk):
            for t in range(tlo, thi):
                rows_out.append(logits.data[row, _logit_row_for_target(model.config, t - start)])
                tgts_out.append(seqs[idx][t])
        yield np.stack(rows_out), np.asarray(tgts_out)


def rank_eval(model, seqs, profiles, spans, vocab_size, hr_ks=HR_KS, ndcg_ks=NDCG_KS,
              last_only=False, batch_size=64):
    """Full-ranking report over the given per-user target spans."""
    if last_only:
        spans = [(max(hi - 1, lo), hi) for lo, hi in spans]
    cands = candidate_ids(vocab_size)
    all_ranks = []
    for rows, targets in collect_eval_rows(model, seqs, profiles, spans, batch_size):
        all_ranks.append(ranks_from_scores(rows, targets, cands))
    if not all_ranks:
        raise ConfigError("no evaluation positions")
    return report_from_ranks(np.concatenate(all_ranks), hr_ks, ndcg_ks)


def recall_at_top(scored, levels=RECALL_LEVELS):
    """Recall among the top ceil(p*N) scores for each share p.

    `scored` is a sequence of (score, label) pairs; ties keep input order.
    Zero positives yields recall None with a flag rather than 0.
    """
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([int(l) for _, l in scored])
    n = len(scores)
    if n == 0 or n < 1.0 / min(levels):
        raise ConfigError(
            f"need at least {int(np.ceil(1.0 / min(levels)))} items for the "
            f"smallest share {min(levels)}, got {n}"
        )
    order = np.argsort(-scores, kind="stable")
    n_pos = int(labels.sum())
    recall = {}
    flags = {}
    for p in levels:
        k = int(np.ceil(p * n))
        if n_pos == 0:
            recall[p] = None
            flags["zero_positives"] = True
        else:
            recall[p] = float(labels[order[:k]].sum() / n_pos)
    return RecallAtTopReport(recall=recall, flags=flags, n_positives=n_pos, n_total=n)
