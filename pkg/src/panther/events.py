"""Event data model, JSON-lines IO, synthetic corpora, chronological splits.

The synthetic generator plants periodic motifs (short token sequences
recurring at a fixed period), fills the gaps with Zipf-distributed
background draws from the user's demographic cluster, and injects rare
fraud events drawn from *other* clusters' regions — behavior that is
common globally but unusual for the user, so single-event context alone
cannot separate it.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .tokenizer import AttributeSchema


@dataclass
class RawEvent:
    user_id: str
    timestamp: int
    attributes: dict
    label: int = None
    counterparty_id: str = None


@dataclass
class UserRecord:
    user_id: str
    events: list
    profile: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    """Per-user chronological cut indices: [0,c1) train, [c1,c2) val, [c2,L) test."""

    users: list
    cuts: dict
    skipped: list

    def cut_for(self, user_id):
        return self.cuts[user_id]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"cuts": {u: list(c) for u, c in self.cuts.items()},
                       "skipped": self.skipped}, fh)

    @classmethod
    def load(cls, path, users):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        cuts = {u: tuple(c) for u, c in doc["cuts"].items()}
        return cls(users=users, cuts=cuts, skipped=doc["skipped"])


@dataclass
class Motif:
    """A short token sequence recurring every `period` events.

    Each scheduled occurrence is independently dropped with probability
    `jitter` (its slots fall back to background draws). `phase` is the
    first start position.
    """

    tokens: list
    period: int
    jitter: float = 0.0
    phase: int = 0


@dataclass
class SyntheticSpec:
    num_users: int
    cardinalities: dict
    fraud_rate: float
    num_clusters: int
    seed: int
    motifs: list = None                    # explicit library; None = auto per cluster
    events_per_user: tuple = (80, 160)
    zipf_exponent: float = 1.1
    motifs_per_cluster: int = 2
    motif_length: int = 3
    motif_periods: tuple = (3, 7)
    motif_jitter: float = 0.05
    merchant_attribute: str = "merchant_category"
    merchants_per_category: int = 3
    num_fraud_merchants: int = 2
    start_ts: int = 1_600_000_000

    def validate(self):
        if self.num_users < 1:
            raise ConfigError("num_users must be >= 1")
        if not 0.0 <= self.fraud_rate <= 1.0:
            raise ConfigError("fraud_rate must lie in [0, 1]")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")
        for name, card in self.cardinalities.items():
            if card < 1:
                raise ConfigError(f"cardinality of {name!r} must be >= 1")
        product = 1
        for card in self.cardinalities.values():
            product *= card
        if product > 1_000_000:
            raise ConfigError("attribute product space too large to enumerate")
        need = self.num_clusters * self.motifs_per_cluster * self.motif_length
        if self.motifs is None and product < need:
            raise ConfigError(
                f"attribute product space ({product}) smaller than the "
                f"motif vocabulary needs ({need})"
            )
        return self

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        motifs = doc.pop("motifs", None)
        if motifs is not None:
            motifs = [Motif(tokens=[tuple(t) for t in m["tokens"]],
                            period=m["period"], jitter=m.get("jitter", 0.0))
                      for m in motifs]
        spec = cls(motifs=motifs, **doc)
        if isinstance(spec.events_per_user, list):
            spec.events_per_user = tuple(spec.events_per_user)
        if isinstance(spec.motif_periods, list):
            spec.motif_periods = tuple(spec.motif_periods)
        return spec.validate()


def _abbrev(name):
    return "".join(part[0] for part in name.split("_"))


def synthetic_schema(spec):
    """The attribute schema implied by a synthetic spec's cardinalities."""
    names = tuple(spec.cardinalities)
    values = {
        name: tuple(f"{_abbrev(name)}{i}" for i in range(card))
        for name, card in spec.cardinalities.items()
    }
    return AttributeSchema(names=names, values=values)


PROFILE_SCHEMA = ("age_bucket", "region")


def _enumerate_product(schema):
    tuples = [()]
    for name in schema.names:
        tuples = [t + (v,) for t in tuples for v in schema.values[name]]
    return tuples


def _cluster_regions(tuples, num_clusters, rng):
    """Partition the tuple space into per-cluster Zipf-ranked regions."""
    order = rng.permutation(len(tuples))
    regions = [[] for _ in range(num_clusters)]
    for rank, idx in enumerate(order):
        regions[rank % num_clusters].append(tuples[idx])
    return regions


def _auto_motifs(spec, regions):
    """Per-cluster motifs from the top of each cluster's region ranking.

    A cluster's motifs share one period. Occurrences keep at least one
    background slot between them (length <= period-1, starts spaced by
    length+1); back-to-back repeats would make rotated n-grams as frequent
    as the motif itself and the pattern unrecoverable.
    """
    per_cluster = []
    for c, region in enumerate(regions):
        period = spec.motif_periods[c % len(spec.motif_periods)]
        length = max(1, min(spec.motif_length, period - 1))
        n_fit = max(1, min(spec.motifs_per_cluster, period // (length + 1)))
        motifs = []
        for i in range(n_fit):
            lo = i * length
            tokens = region[lo:lo + length]
            if len(tokens) < length:
                raise ConfigError("cluster region too small for its motif library")
            motifs.append(Motif(tokens=tokens, period=period,
                                jitter=spec.motif_jitter, phase=i * (length + 1)))
        per_cluster.append(motifs)
    return per_cluster


def generate_synthetic(spec):
    """Deterministically synthesize a labeled corpus from `spec`.

    Returns (users, meta) where meta records cluster assignments, motif
    libraries, and fraud merchant ids for downstream analysis.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    schema = synthetic_schema(spec)
    tuples = _enumerate_product(schema)
    regions = _cluster_regions(tuples, spec.num_clusters, rng)

    if spec.motifs is None:
        cluster_motifs = _auto_motifs(spec, regions)
    else:
        cluster_motifs = [
            [m for i, m in enumerate(spec.motifs) if i % spec.num_clusters == c]
            for c in range(spec.num_clusters)
        ]

    # Zipf weights over each cluster's region ranking.
    zipf = []
    for region in regions:
        w = np.arange(1, len(region) + 1, dtype=np.float64) ** (-spec.zipf_exponent)
        zipf.append(w / w.sum())

    # Out-of-cluster pools: what fraud against a user of cluster c draws from.
    fraud_pools = []
    for c in range(spec.num_clusters):
        pool = []
        for oc in range(spec.num_clusters):
            if oc == c and spec.num_clusters > 1:
                continue
            pool.extend(t for m in cluster_motifs[oc] for t in m.tokens)
            pool.extend(regions[oc][:10])
        fraud_pools.append(pool)

    cat_attr = spec.merchant_attribute if spec.merchant_attribute in schema.names else None
    merchants = {}
    if cat_attr is not None:
        for val in schema.values[cat_attr]:
            merchants[val] = [f"M_{val}_{k}" for k in range(spec.merchants_per_category)]
    fraud_merchants = [f"M_fraud_{k}" for k in range(spec.num_fraud_merchants)]

    users = []
    assignments = {}
    lo, hi = spec.events_per_user
    for u in range(spec.num_users):
        user_id = f"u{u:05d}"
        cluster = u % spec.num_clusters
        assignments[user_id] = cluster
        age_center = 1 + (cluster * 2) % 7
        profile = {
            "age_bucket": str(int(np.clip(age_center + rng.integers(-1, 2), 0, 9))),
            "region": f"reg{cluster}",
        }

        n = int(rng.integers(lo, hi + 1))
        slots = [None] * n
        for motif in cluster_motifs[cluster]:
            length = len(motif.tokens)
            start = motif.phase
            while start + length <= n:
                if all(slots[start + j] is None for j in range(length)):
                    if motif.jitter <= 0 or rng.random() >= motif.jitter:
                        for j, tok in enumerate(motif.tokens):
                            slots[start + j] = tok
                start += motif.period

        events = []
        ts = spec.start_ts + u * 977
        for i in range(n):
            ts += int(rng.integers(60, 3600))
            is_fraud = spec.fraud_rate > 0 and rng.random() < spec.fraud_rate
            if is_fraud:
                pool = fraud_pools[cluster]
                tup = pool[int(rng.integers(len(pool)))]
                cp = fraud_merchants[int(rng.integers(len(fraud_merchants)))] if fraud_merchants else None
            else:
                tup = slots[i]
                if tup is None:
                    region = regions[cluster]
                    tup = region[int(rng.choice(len(region), p=zipf[cluster]))]
                cp = None
                if cat_attr is not None:
                    cat = tup[schema.names.index(cat_attr)]
                    pool = merchants[cat]
                    cp = pool[int(rng.integers(len(pool)))]
            attrs = dict(zip(schema.names, tup))
            events.append(RawEvent(user_id=user_id, timestamp=ts, attributes=attrs,
                                   label=1 if is_fraud else 0, counterparty_id=cp))
        users.append(UserRecord(user_id=user_id, events=events, profile=profile))

    meta = {
        "clusters": assignments,
        "fraud_merchants": fraud_merchants,
        "motifs": [
            [{"tokens": [list(t) for t in m.tokens], "period": m.period,
              "jitter": m.jitter, "phase": m.phase}
             for m in ms]
            for ms in cluster_motifs
        ],
    }
    return users, meta


def chronological_split(users, ratios):
    """Cut each user's ordered events at floor(L*r1) and floor(L*(r1+r2)).

    Users with fewer than 3 events go entirely to train and are listed in
    the skip report.
    """
    r1, r2, r3 = ratios
    if min(r1, r2, r3) <= 0:
        raise ConfigError("split ratios must be positive")
    if abs((r1 + r2 + r3) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {r1 + r2 + r3}")
    cuts = {}
    skipped = []
    for user in users:
        length = len(user.events)
        if length < 3:
            cuts[user.user_id] = (length, length)
            skipped.append(user.user_id)
            continue
        c1 = int(np.floor(length * r1))
        c2 = int(np.floor(length * (r1 + r2)))
        cuts[user.user_id] = (c1, c2)
    return DatasetSplit(users=list(users), cuts=cuts, skipped=skipped)


def load_events(path, schema):
    """Read events.jsonl, group by user, and time-sort each user's events."""
    by_user = {}
    order = []
    known = set(schema.names)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                user_id = doc["user_id"]
                ts = int(doc["ts"])
                attrs = doc["attrs"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ParseError(f"line {lineno}: malformed event record ({err})") from err
            for name in attrs:
                if name not in known:
                    raise ParseError(
                        f"line {lineno}: attribute {name!r} is not in the schema"
                    )
            ev = RawEvent(user_id=user_id, timestamp=ts, attributes=dict(attrs),
                          label=doc.get("label"), counterparty_id=doc.get("cp"))
            if user_id not in by_user:
                by_user[user_id] = []
                order.append(user_id)
            by_user[user_id].append(ev)
    users = []
    for user_id in order:
        evs = sorted(by_user[user_id], key=lambda e: e.timestamp)
        users.append(UserRecord(user_id=user_id, events=evs))
    return users


def write_events(users, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in users:
            for ev in user.events:
                doc = {"user_id": ev.user_id, "ts": ev.timestamp, "attrs": ev.attributes}
                if ev.label is not None:
                    doc["label"] = ev.label
                if ev.counterparty_id is not None:
                    doc["cp"] = ev.counterparty_id
                fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def load_profiles(path):
    profiles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                profiles[doc["user_id"]] = dict(doc["profile"])
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise ParseError(f"line {lineno}: malformed profile record ({err})") from err
    return profiles


def write_profiles(users, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in users:
            doc = {"user_id": user.user_id, "profile": user.profile}
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def attach_profiles(users, profiles):
    for user in users:
        user.profile = dict(profiles.get(user.user_id, {}))
    return users
