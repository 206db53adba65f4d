"""Operational path: offline cache builds, a warm in-memory reader over a
memory-mapped binary table, and the scoring front-end.

The hot path assembles features purely from cached state (profile
embedding, recent token window, shortlist-based deviation) — it never runs
the sequence model. Cache files are keyed by a stable user-id hash,
index-sorted, little-endian, and byte-deterministic for a fixed corpus
and checkpoint.
"""

import hashlib
import json
import mmap
import os
import socket
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .downstream import SURPRISAL_CLIP, ScoringSamples, surprisal
from .errors import ConfigError, VocabMismatchError
from .evaluation import candidate_ids

CACHE_MAGIC = b"PNTC"
CACHE_VERSION = 1
DEFAULT_SHORTLIST = 50
DEFAULT_WINDOW = 100


def _user_hash(user_id):
    return int.from_bytes(hashlib.sha256(user_id.encode()).digest()[:8], "little")


@dataclass
class CacheEntry:
    user_id: str
    e_u: np.ndarray
    shortlist_ids: np.ndarray
    shortlist_probs: np.ndarray
    window: np.ndarray
    last_updated: int

    def shortlist_prob(self, token_id):
        hit = np.where(self.shortlist_ids == token_id)[0]
        return float(self.shortlist_probs[hit[0]]) if len(hit) else None


def build_cache_entries(model, data, top_n=DEFAULT_SHORTLIST, window=DEFAULT_WINDOW,
                        batch_size=64):
    """One entry per user: profile embedding, top-n next-token shortlist at
    the final prefix position, and the recent token window."""
    from .training import _context_limit

    limit = _context_limit(model.config)
    cands = candidate_ids(data.vocab_size)
    entries = []
    order = list(range(len(data.user_ids)))
    order.sort(key=lambda i: len(data.seqs[i]))
    for start in range(0, len(order), batch_size):
        idxs = [i for i in order[start:start + batch_size] if len(data.seqs[i]) >= 1]
        if not idxs:
            continue
        width = min(limit, max(len(data.seqs[i]) for i in idxs))
        ids = np.zeros((len(idxs), width), dtype=np.int64)
        lengths = []
        for r, i in enumerate(idxs):
            seq = data.seqs[i][-width:]
            ids[r, :len(seq)] = seq
            lengths.append(len(seq))
        probs, e_us = model.predict_probs(ids, [data.profiles[i] for i in idxs])
        for r, i in enumerate(idxs):
            final_row = lengths[r] if model.config.profile_mode == "first_token" else lengths[r] - 1
            row = probs[r, final_row]
            sub = row[cands]
            top = np.lexsort((cands, -sub))[:top_n]
            ts = int(data.timestamps[i][-1]) if len(data.timestamps[i]) else 0
            entries.append(CacheEntry(
                user_id=data.user_ids[i],
                e_u=e_us[r].astype(np.float32),
                shortlist_ids=cands[top].astype(np.uint32),
                shortlist_probs=sub[top].astype(np.float32),
                window=data.seqs[i][-window:].astype(np.uint32),
                last_updated=int(ts),
            ))
    entries.sort(key=lambda e: (_user_hash(e.user_id), e.user_id))
    return entries


def write_cache(entries, path, d, checkpoint_hash="", top_n=DEFAULT_SHORTLIST,
                window=DEFAULT_WINDOW):
    header = json.dumps({
        "d": d, "top_n": top_n, "window": window,
        "checkpoint_hash": checkpoint_hash, "count": len(entries),
    }, sort_keys=True).encode()
    blobs = []
    for e in entries:
        uid = e.user_id.encode()
        blob = struct.pack("<H", len(uid)) + uid
        blob += struct.pack("<qHH", e.last_updated, len(e.window), len(e.shortlist_ids))
        blob += e.e_u.astype("<f4").tobytes()
        blob += e.shortlist_ids.astype("<u4").tobytes()
        blob += e.shortlist_probs.astype("<f4").tobytes()
        blob += e.window.astype("<u4").tobytes()
        blobs.append(blob)
    index_size = 16 * len(entries)
    base = 4 + 8 + len(header) + index_size
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(header)))
        fh.write(header)
        offset = base
        for e, blob in zip(entries, blobs):
            fh.write(struct.pack("<QQ", _user_hash(e.user_id), offset))
            offset += len(blob)
        for blob in blobs:
            fh.write(blob)


def checkpoint_file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def build_cache_file(model, data, path, checkpoint_vocab_hash=None,
                     checkpoint_hash="", top_n=DEFAULT_SHORTLIST,
                     window=DEFAULT_WINDOW):
    """Full offline build: validate vocab compatibility, score every user,
    write the binary table. Deterministic for a fixed corpus+checkpoint."""
    if checkpoint_vocab_hash is not None and checkpoint_vocab_hash != data.vocab_hash:
        raise VocabMismatchError(
            f"checkpoint vocabulary {checkpoint_vocab_hash} does not match "
            f"corpus {data.vocab_hash}"
        )
    entries = build_cache_entries(model, data, top_n=top_n, window=window)
    write_cache(entries, path, d=model.config.d, checkpoint_hash=checkpoint_hash,
                top_n=top_n, window=window)
    return len(entries)


class CacheReader:
    """Memory-mapped cache with an O(1)-expected warm dict of entries."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        self._mm = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ)
        if self._mm[:4] != CACHE_MAGIC:
            raise ConfigError(f"{path} is not a cache file")
        version, hlen = struct.unpack_from("<II", self._mm, 4)
        if version != CACHE_VERSION:
            raise ConfigError(f"unsupported cache version {version}")
        self.header = json.loads(self._mm[12:12 + hlen])
        self.d = self.header["d"]
        count = self.header["count"]
        idx_off = 12 + hlen
        raw = np.frombuffer(self._mm, dtype="<u8", count=2 * count, offset=idx_off)
        self._hashes = np.ascontiguousarray(raw[0::2])
        self._offsets = np.ascontiguousarray(raw[1::2])
        self._warm = None

    def __len__(self):
        return len(self._hashes)

    def _parse(self, offset):
        mm = self._mm
        (n_uid,) = struct.unpack_from("<H", mm, offset)
        offset += 2
        uid = mm[offset:offset + n_uid].decode()
        offset += n_uid
        ts, n_win, n_short = struct.unpack_from("<qHH", mm, offset)
        offset += 12
        e_u = np.frombuffer(mm, dtype="<f4", count=self.d, offset=offset)
        offset += 4 * self.d
        sids = np.frombuffer(mm, dtype="<u4", count=n_short, offset=offset)
        offset += 4 * n_short
        sprobs = np.frombuffer(mm, dtype="<f4", count=n_short, offset=offset)
        offset += 4 * n_short
        window = np.frombuffer(mm, dtype="<u4", count=n_win, offset=offset)
        return CacheEntry(user_id=uid, e_u=e_u, shortlist_ids=sids,
                          shortlist_probs=sprobs, window=window, last_updated=ts)

    def warm(self):
        """Materialize every entry into a dict for O(1) lookups."""
        self._warm = {}
        for off in self._offsets:
            e = self._parse(int(off))
            self._warm[e.user_id] = e
        return self

    def get(self, user_id):
        if self._warm is not None:
            return self._warm.get(user_id)
        h = _user_hash(user_id)
        lo = int(np.searchsorted(self._hashes, h, side="left"))
        while lo < len(self._hashes) and self._hashes[lo] == h:
            e = self._parse(int(self._offsets[lo]))
            if e.user_id == user_id:
                return e
            lo += 1
        return None

    def close(self):
        self._mm.close()
        self._fh.close()


@dataclass
class ScoringService:
    """Everything the hot path needs, loaded once."""

    cache: CacheReader
    scorer: object
    vocab: object
    fallback_model: object = None
    stats: dict = field(default_factory=lambda: {"requests": 0, "hits": 0, "fallbacks": 0})

    def score(self, request):
        """Score one event dict: {"user_id", "attrs", "deadline_us"?}.

        Cache hit: features come purely from cached state plus the request
        context; no sequence-model forward. Miss: zero-profile cold path,
        flagged (a fallback model is used only when the request explicitly
        allows the slow path).
        """
        t0 = time.perf_counter()
        cfg = self.scorer.config
        uid = request["user_id"]
        attrs = request.get("attrs", {})
        entry = self.cache.get(uid)
        if entry is None and self.fallback_model is not None and request.get("allow_slow"):
            entry = self._fallback_entry(uid, attrs)
            self.stats["fallbacks"] += 1

        names = list(cfg.schema_values)
        ctx = np.zeros((1, len(names)), dtype=np.int64)
        for a, name in enumerate(names):
            vals = cfg.schema_values[name]
            v = attrs.get(name)
            ctx[0, a] = vals.index(v) + 1 if v in vals else 0

        try:
            token_id = self.vocab.id_of(self.vocab.schema.tuple_of(attrs))
        except Exception:
            token_id = 1  # unknown tuple

        window = np.zeros((1, cfg.window), dtype=np.int64)
        if entry is not None:
            win = entry.window[-cfg.window:]
            window[0, cfg.window - len(win):] = win
            rec_len = len(win)
            e_u = entry.e_u[None, :].astype(np.float32)
            p = entry.shortlist_prob(token_id)
            delta = surprisal(p) if p is not None else SURPRISAL_CLIP
            cold = False
            self.stats["hits"] += 1
        else:
            rec_len = 0
            e_u = np.zeros((1, cfg.profile_dim), dtype=np.float32)
            delta = SURPRISAL_CLIP
            cold = True

        samples = ScoringSamples(
            ctx=ctx, recent=window, rec_len=np.array([rec_len]),
            e_u=e_u, delta=np.array([delta]), labels=np.zeros(1, dtype=np.int64),
        )
        score = float(self.scorer.scores(samples)[0])
        elapsed_us = (time.perf_counter() - t0) * 1e6
        self.stats["requests"] += 1
        response = {
            "score": score,
            "latency_us": elapsed_us,
            "cache_hit": not cold,
            "cold_start": cold,
            "features": {"delta": delta, "window_fill": rec_len / max(cfg.window, 1)},
        }
        deadline = request.get("deadline_us")
        if deadline is not None and elapsed_us > deadline:
            response["timeout"] = True
        return response

    def _fallback_entry(self, uid, attrs):
        # off-hot-path backfill for explicitly-allowed slow requests
        e_u = self.fallback_model.profile_embedding([{}]).data[0]
        return CacheEntry(user_id=uid, e_u=e_u.astype(np.float32),
                          shortlist_ids=np.array([], dtype=np.uint32),
                          shortlist_probs=np.array([], dtype=np.float32),
                          window=np.array([], dtype=np.uint32), last_updated=0)


def bench_latency(service, n=10_000, seed=0):
    """Warm-cache latency benchmark over synthesized hit requests.

    Returns percentile latencies plus the number of sequence-model
    forwards observed during the run (must be zero on the hot path).
    """
    users = list(service.cache._warm or {})
    if not users:
        raise ConfigError("warm the cache before benchmarking")
    rng = np.random.default_rng(seed)
    schema = service.vocab.schema
    attr_choices = [schema.values[n_] for n_ in schema.names]
    requests = []
    for _ in range(n):
        uid = users[int(rng.integers(len(users)))]
        attrs = {name: vals[int(rng.integers(len(vals)))]
                 for name, vals in zip(schema.names, attr_choices)}
        requests.append({"user_id": uid, "attrs": attrs})
    forwards_before = model_mod.forward_calls
    lat = np.empty(n)
    for i, req in enumerate(requests):
        t0 = time.perf_counter()
        service.score(req)
        lat[i] = (time.perf_counter() - t0) * 1e6
    forwards = model_mod.forward_calls - forwards_before
    return {
        "n": n,
        "p50_us": float(np.percentile(lat, 50)),
        "p99_us": float(np.percentile(lat, 99)),
        "max_us": float(lat.max()),
        "model_forwards": int(forwards),
        "hit_rate": service.stats["hits"] / max(service.stats["requests"], 1),
    }


def serve(service, socket_path, max_requests=None):
    """Line-delimited JSON request/response loop over a local socket."""
    if os.path.exists(socket_path):
        os.unlink(socket_path)
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(socket_path)
    srv.listen(8)
    served = 0
    try:
        while max_requests is None or served < max_requests:
            conn, _ = srv.accept()
            with conn:
                fh = conn.makefile("rwb")
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        request = json.loads(line)
                        response = service.score(request)
                    except Exception as err:  # report, keep serving
                        response = {"error": str(err)}
                    fh.write(json.dumps(response).encode() + b"\n")
                    fh.flush()
                    served += 1
                    if max_requests is not None and served >= max_requests:
                        break
    finally:
        srv.close()
        if os.path.exists(socket_path):
            os.unlink(socket_path)
