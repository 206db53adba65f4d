"""The sequence model: causal self-attention blocks run in parallel with a
sequence-pattern branch (multi-scale causal depthwise convolutions feeding
cross-attention onto a learnable prototype bank), plus a profile encoder
whose output conditions the sequence as a first token or as an additive
per-position encoding.

Parameters live in an insertion-ordered dict; checkpoints serialize the
raw float32 blocks in that declaration order behind a JSON header.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import flops
from .errors import ConfigError

CHECKPOINT_MAGIC = b"PNTH"
CHECKPOINT_VERSION = 1

# instrumentation: serving asserts this never moves on the hot path
forward_calls = 0


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 32
    layers: int = 2
    heads: int = 2
    prototypes: int = 64
    conv_branches: tuple = ((3, 1), (3, 2), (3, 4), (3, 7))
    max_len: int = 128
    profile_mode: str = "none"  # none | first_token | positional
    sprm_enabled: bool = True
    sprm_causal: bool = True
    profile_replaces_positions: bool = False
    ffn_mult: int = 2
    profile_attrs: tuple = ()
    profile_values: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.conv_branches, list):
            self.conv_branches = tuple(tuple(b) for b in self.conv_branches)
        if isinstance(self.profile_attrs, list):
            self.profile_attrs = tuple(self.profile_attrs)
        self.profile_values = {k: tuple(v) for k, v in self.profile_values.items()}
        if self.d % self.heads != 0:
            raise ConfigError("embedding dim must be divisible by head count")
        if self.d % len(self.conv_branches) != 0:
            raise ConfigError("embedding dim must be divisible by the branch count")
        if self.prototypes < 1:
            raise ConfigError("prototype count must be >= 1")
        if self.profile_mode not in ("none", "first_token", "positional"):
            raise ConfigError(f"unknown profile_mode {self.profile_mode!r}")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def _init(rng, shape, scale=0.02):
    return rng.standard_normal(shape) * scale


class Model:
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config
        p = {}

        def param(name, arr):
            p[name] = ad.tensor(arr, requires_grad=True, dtype=dtype)

        param("tok_emb", _init(rng, (c.vocab_size, c.d)))
        param("pos_emb", _init(rng, (c.max_len + 1, c.d)))
        dk = c.d // c.heads
        width = c.d // len(c.conv_branches)
        for i in range(c.layers):
            for nm in ("wq", "wk", "wv", "wo"):
                param(f"layer{i}.attn.{nm}", _init(rng, (c.d, c.d)))
            for b, (w, _r) in enumerate(c.conv_branches):
                param(f"layer{i}.sprm.conv{b}", _init(rng, (w, width)))
            param(f"layer{i}.sprm.proto", _init(rng, (c.prototypes, c.d)))
            param(f"layer{i}.sprm.wq", _init(rng, (c.d, dk)))
            param(f"layer{i}.sprm.wk", _init(rng, (c.d, dk)))
            param(f"layer{i}.sprm.wv", _init(rng, (c.d, c.d)))
            param(f"layer{i}.ln1.g", np.ones(c.d))
            param(f"layer{i}.ln1.b", np.zeros(c.d))
            param(f"layer{i}.ln2.g", np.ones(c.d))
            param(f"layer{i}.ln2.b", np.zeros(c.d))
            param(f"layer{i}.ffn.w1", _init(rng, (c.d, c.ffn_mult * c.d)))
            param(f"layer{i}.ffn.b1", np.zeros(c.ffn_mult * c.d))
            param(f"layer{i}.ffn.w2", _init(rng, (c.ffn_mult * c.d, c.d)))
            param(f"layer{i}.ffn.b2", np.zeros(c.d))
        for attr in c.profile_attrs:
            n_vals = len(c.profile_values[attr])
            param(f"profile.{attr}.emb", _init(rng, (n_vals + 1, c.d)))
        if c.profile_attrs:
            param("profile.fusion_w", _init(rng, (len(c.profile_attrs) * c.d, c.d)))
            param("profile.fusion_b", np.zeros(c.d))
        self.params = p

    # --- parameter plumbing -------------------------------------------------

    def named_params(self):
        return self.params.items()

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def sprm_param_count(self):
        return sum(t.size for n, t in self.params.items() if ".sprm." in n)

    # --- profile ------------------------------------------------------------

    def profile_indices(self, profiles):
        """Integer ids per profile attribute; 0 is the unknown/missing row."""
        c = self.config
        out = {}
        for attr in c.profile_attrs:
            vals = c.profile_values[attr]
            idx = np.zeros(len(profiles), dtype=np.int64)
            for i, prof in enumerate(profiles):
                v = prof.get(attr) if prof else None
                idx[i] = vals.index(v) + 1 if v in vals else 0
            out[attr] = idx
        return out

    def profile_embedding(self, profiles):
        """e_u for a batch of profile dicts: [B, d]."""
        B = len(profiles)
        c = self.config
        if not c.profile_attrs:
            return ad.tensor(np.zeros((B, c.d)), dtype=self.dtype)
        idx = self.profile_indices(profiles)
        parts = [ad.embedding(self.params[f"profile.{a}.emb"], idx[a]) for a in c.profile_attrs]
        fused = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return ad.add(ad.matmul(fused, self.params["profile.fusion_w"]),
                      self.params["profile.fusion_b"])

    # --- blocks -------------------------------------------------------------

    def _self_attention(self, h, i, causal_bias):
        p = self.params
        c = self.config
        B, T, d = h.shape
        dk = d // c.heads
        q = ad.matmul(h, p[f"layer{i}.attn.wq"])
        k = ad.matmul(h, p[f"layer{i}.attn.wk"])
        v = ad.matmul(h, p[f"layer{i}.attn.wv"])

        def heads(x):
            return ad.transpose(ad.reshape(x, (B, T, c.heads, dk)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        scores = ad.add(scores, causal_bias)
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, d))
        return ad.matmul(out, p[f"layer{i}.attn.wo"])

    def _sprm(self, h, i, aux=None, proto_kv=None):
        """Pattern branch: per-branch causal dilated convs, concat, then
        cross-attention with the prototype bank as keys/values."""
        p = self.params
        c = self.config
        B, T, d = h.shape
        width = d // len(c.conv_branches)
        dk = c.d // c.heads
        parts = []
        for b, (w, r) in enumerate(c.conv_branches):
            xs = h[:, :, b * width:(b + 1) * width]
            kern = p[f"layer{i}.sprm.conv{b}"]
            if self.config.sprm_causal:
                parts.append(ad.conv1d_depthwise(xs, kern, dilation=r))
            else:
                # centered read realized by shifting the causal output left
                shift = ((w - 1) * r) // 2
                pad = ad.tensor(np.zeros((B, shift, width)), dtype=self.dtype)
                ext = ad.concat([xs, pad], axis=1)
                parts.append(ad.conv1d_depthwise(ext, kern, dilation=r)[:, shift:, :])
        hp = ad.concat(parts, axis=2)
        if proto_kv is None:
            k = ad.matmul(p[f"layer{i}.sprm.proto"], p[f"layer{i}.sprm.wk"])
            v = ad.matmul(p[f"layer{i}.sprm.proto"], p[f"layer{i}.sprm.wv"])
        else:
            k, v = proto_kv
        q = ad.matmul(hp, p[f"layer{i}.sprm.wq"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / np.sqrt(dk))
        weights = ad.softmax(scores, axis=-1)  # [B, T, m]
        if aux is not None:
            aux.append(weights.data.copy())
        return ad.matmul(weights, v)

    def _block(self, h, i, causal_bias, aux=None, proto_kv=None):
        p = self.params
        with flops.scope("attn"):
            attn_out = self._self_attention(h, i, causal_bias)
        s = ad.add(h, attn_out)
        if self.config.sprm_enabled:
            with flops.scope("sprm"):
                sprm_out = self._sprm(h, i, aux=aux, proto_kv=proto_kv)
            s = ad.add(s, sprm_out)
        a = ad.layer_norm(s, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        f = ad.matmul(ad.relu(ad.add(ad.matmul(a, p[f"layer{i}.ffn.w1"]),
                                     p[f"layer{i}.ffn.b1"])), p[f"layer{i}.ffn.w2"])
        f = ad.add(f, p[f"layer{i}.ffn.b2"])
        return ad.layer_norm(ad.add(a, f), p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])

    # --- full forward ---------------------------------------------------

    def forward(self, ids, profiles=None, collect_aux=False, e_u=None):
        """Per-position next-token logits.

        ids: [B, T] int array (0 = padding). Row t of the output scores the
        token *following* input position t. With profile_mode
        "first_token" the output has T+1 rows and row 0 predicts ids[:, 0].
        Returns (logits, e_u, aux).
        """
        global forward_calls
        forward_calls += 1
        c = self.config
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        limit = c.max_len if c.profile_mode != "first_token" else c.max_len - 1
        if T > limit:
            raise ConfigError(
                f"sequence length {T} exceeds the model limit {limit}; truncate upstream"
            )
        if profiles is None:
            profiles = [{} for _ in range(B)]
        if e_u is None:
            e_u = self.profile_embedding(profiles)

        x = ad.embedding(self.params["tok_emb"], ids)
        if c.profile_mode == "first_token":
            x = ad.concat([ad.reshape(e_u, (B, 1, c.d)), x], axis=1)
            T = T + 1
        if c.profile_mode == "positional":
            x = ad.add(x, ad.reshape(e_u, (B, 1, c.d)))
        if not (c.profile_mode == "positional" and c.profile_replaces_positions):
            x = ad.add(x, self.params["pos_emb"][:T])

        bias = np.zeros((T, T), dtype=self.dtype)
        bias[np.triu_indices(T, k=1)] = -1e9
        causal_bias = ad.tensor(bias, dtype=self.dtype)

        aux = [] if collect_aux else None
        for i in range(c.layers):
            x = self._block(x, i, causal_bias, aux=aux)

        logits = ad.matmul(x, ad.transpose(self.params["tok_emb"], (1, 0)))
        return logits, e_u, aux

    def predict_probs(self, ids, profiles=None):
        """Next-token distributions (rows sum to 1) without building a graph."""
        with ad.no_grad():
            logits, e_u, _ = self.forward(ids, profiles)
            probs = ad.softmax(logits, axis=-1)
        return probs.data, e_u.data


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model, path, vocab_hash=""):
    header = json.dumps({"config": model.config.to_json(), "vocab_hash": vocab_hash}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, t in model.named_params():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, vocab_hash)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file (magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        config = ModelConfig.from_json(header["config"])
        model = Model(config, seed=0, dtype=dtype)
        for name, t in model.named_params():
            raw = fh.read(t.size * 4)
            if len(raw) != t.size * 4:
                raise ConfigError(f"checkpoint truncated at parameter {name}")
            t.data = np.frombuffer(raw, dtype="<f4").reshape(t.shape).astype(dtype)
        trailing = fh.read(1)
        if trailing:
            raise ConfigError("checkpoint has trailing bytes")
    return model, header["vocab_hash"]


def load_compatible(model, path):
    """Copy shape-compatible parameters from a checkpoint into `model`.

    Returns the names that were initialized (the fine-tune warm start).
    """
    donor, _ = load_checkpoint(path, dtype=model.dtype)
    copied = []
    for name, t in model.named_params():
        src = donor.params.get(name)
        if src is not None and src.shape == t.shape:
            t.data = src.data.copy()
            copied.append(name)
    return copied
