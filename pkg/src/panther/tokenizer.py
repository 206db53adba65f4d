"""Structured tokenization of event attribute tuples.

Each event is a tuple of categorical attribute values drawn from a
declared schema; the vocabulary keeps the most frequent tuples up to a
cap and folds the long tail into a single unknown token. Ids 0/1/2 are
reserved for padding, unknown, and the profile slot.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError

PAD_ID = 0
UNK_ID = 1
PROFILE_ID = 2
NUM_RESERVED = 3

PAD_MARKER = "[PAD]"
UNK_MARKER = "[UNK]"
PROFILE_MARKER = "[PROFILE]"


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute names with their categorical value sets."""

    names: tuple
    values: dict

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("schema attribute names must be unique")
        for name in self.names:
            vals = self.values.get(name)
            if not vals:
                raise ConfigError(f"schema attribute {name!r} has an empty value set")

    @property
    def arity(self):
        return len(self.names)

    def product_size(self):
        n = 1
        for name in self.names:
            n *= len(self.values[name])
        return n

    def tuple_of(self, attrs, where=""):
        """Extract this schema's value tuple from an event attribute map."""
        out = []
        for name in self.names:
            if name not in attrs:
                raise ParseError(f"missing attribute {name!r}{where}")
            val = attrs[name]
            if val not in self._value_sets()[name]:
                raise ParseError(f"unknown value {val!r} for attribute {name!r}{where}")
            out.append(val)
        return tuple(out)

    def _value_sets(self):
        cache = getattr(self, "_sets", None)
        if cache is None:
            cache = {n: frozenset(v) for n, v in self.values.items()}
            object.__setattr__(self, "_sets", cache)
        return cache

    def to_json(self):
        return [{"name": n, "values": list(self.values[n])} for n in self.names]

    @classmethod
    def from_json(cls, obj):
        names = tuple(entry["name"] for entry in obj)
        values = {entry["name"]: tuple(entry["values"]) for entry in obj}
        return cls(names=names, values=values)


@dataclass(frozen=True)
class StructuredToken:
    """One attribute-value tuple; canonical form joins values with underscores."""

    values: tuple

    def canonical(self):
        return "_".join(self.values)


@dataclass
class Vocab:
    """Frequency-ranked retained tokens plus the reserved id block."""

    schema: AttributeSchema
    tokens: list
    freqs: list
    coverage: float
    cap: int
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {t.values: NUM_RESERVED + i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return NUM_RESERVED + len(self.tokens)

    def id_of(self, values):
        return self._index.get(tuple(values), UNK_ID)

    def decode(self, token_id):
        """Token for a retained id; marker strings for reserved ids."""
        if not 0 <= token_id < len(self):
            raise ValueError(f"token id {token_id} out of range for vocab of {len(self)}")
        if token_id == PAD_ID:
            return PAD_MARKER
        if token_id == UNK_ID:
            return UNK_MARKER
        if token_id == PROFILE_ID:
            return PROFILE_MARKER
        return self.tokens[token_id - NUM_RESERVED]

    def compression_ratio(self):
        return self.schema.product_size() / len(self)

    def content_hash(self):
        payload = json.dumps(
            {"schema": self.schema.to_json(), "tokens": [list(t.values) for t in self.tokens]},
            separators=(",", ":"),
        ).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def save(self, path):
        doc = {
            "schema": self.schema.to_json(),
            "tokens": [
                {"tuple": list(t.values), "freq": f} for t, f in zip(self.tokens, self.freqs)
            ],
            "coverage": self.coverage,
            "cap": self.cap,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        schema = AttributeSchema.from_json(doc["schema"])
        tokens = [StructuredToken(tuple(e["tuple"])) for e in doc["tokens"]]
        freqs = [e["freq"] for e in doc["tokens"]]
        return cls(schema=schema, tokens=tokens, freqs=freqs,
                   coverage=doc["coverage"], cap=doc.get("cap", len(tokens)))


@dataclass
class TokenSequence:
    """A user's encoded event stream, ids aligned 1:1 with timestamps."""

    user_id: str
    ids: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_vocab(users, schema, cap):
    """Count attribute tuples over training events and retain the top `cap`.

    Ties at the cap boundary break toward the lexicographically smaller
    canonical string, so the result is deterministic.
    """
    if cap < 1:
        raise ConfigError(f"vocabulary cap must be >= 1, got {cap}")
    counts = {}
    total = 0
    for user in users:
        for ev in user.events:
            tup = schema.tuple_of(ev.attributes, where=f" (user {user.user_id})")
            counts[tup] = counts.get(tup, 0) + 1
            total += 1
    if total == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], "_".join(kv[0])))
    kept = ranked[:cap]
    covered = sum(freq for _, freq in kept)
    return Vocab(
        schema=schema,
        tokens=[StructuredToken(values) for values, _ in kept],
        freqs=[freq for _, freq in kept],
        coverage=covered / total,
        cap=cap,
    )


def encode(user, vocab):
    """Map a user's events to token ids, unknown tuples to the UNK sink."""
    ids = np.empty(len(user.events), dtype=np.int32)
    ts = np.empty(len(user.events), dtype=np.int64)
    for i, ev in enumerate(user.events):
        tup = vocab.schema.tuple_of(ev.attributes, where=f" (user {user.user_id})")
        ids[i] = vocab.id_of(tup)
        ts[i] = ev.timestamp
    return TokenSequence(user_id=user.user_id, ids=ids, timestamps=ts)


def decode(token_id, vocab):
    return vocab.decode(token_id)
