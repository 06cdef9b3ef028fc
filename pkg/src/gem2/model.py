"""GEM-2: multi-track Optimus blocks with many-body axial attention.

Representations of order m are dense tensors with m atom axes followed by a
channel axis, e.g. ``Z2[i, j, :]`` for the atom pair (i, j). Tracks 1..M are
updated by every block; the order M+1 representation is embedded once and
used as static key/value context by the top track.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConfigMismatchError, InputError, ShapeError
from .featurize import FeaturizerConfig
from .tensor import Parameter, Tensor

LOGIT_SCALES = ("none", "inverse_sqrt_head_dim")


def _as_tuple(value, n, name):
    if isinstance(value, (int, float)):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise ConfigError(f"{name} needs {n} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``hidden`` and ``dropout`` list one entry per embedded order (1..M+1, or
    1..M when no order M+1 features exist); ``heads`` one entry per updated
    order 1..M. ``input_widths`` are the feature widths of X1, X2, X3.
    """

    num_blocks: int = 12
    max_order: int = 2
    hidden: tuple = (256, 256, 256)
    heads: tuple = (8, 8)
    dropout: tuple = (0.05, 0.05, 0.05)
    ffn_expansion: int = 4
    logit_scale: str = "inverse_sqrt_head_dim"
    activation: str = "gelu"
    long_range_level: Optional[int] = None
    outer_width: int = 32
    input_widths: tuple = field(default_factory=lambda: FeaturizerConfig().widths)

    def __post_init__(self):
        M = self.max_order
        if not 1 <= M <= 3:
            raise ConfigError(f"max_order must be 1, 2 or 3, got {M}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be non-negative")
        if len(self.input_widths) < M:
            raise ConfigError(f"max_order {M} needs at least {M} input feature widths")
        n_embed = self.num_embedded
        for name, n in (("hidden", n_embed), ("dropout", n_embed), ("heads", M), ("input_widths", len(self.input_widths))):
            object.__setattr__(self, name, _as_tuple(getattr(self, name), n, name))
        for m, (c, h) in enumerate(zip(self.hidden, self.heads), 1):
            if c % h:
                raise ConfigError(f"hidden size {c} of order {m} not divisible by {h} heads")
        for p in self.dropout:
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate {p} outside [0, 1)")
        if self.logit_scale not in LOGIT_SCALES:
            raise ConfigError(f"logit_scale must be one of {LOGIT_SCALES}")
        if self.long_range_level is not None and self.long_range_level < 1:
            raise ConfigError("long_range_level must be >= 1")
        if self.hidden[0] < 2:
            raise ConfigError("hidden size of order 1 must be at least 2")

    @property
    def num_embedded(self):
        return min(self.max_order + 1, len(self.input_widths))

    @property
    def has_context(self):
        return self.num_embedded == self.max_order + 1

    @classmethod
    def make(cls, hidden=256, heads=8, dropout=0.0, max_order=2, input_widths=None, **kw):
        """Build a config from scalar per-order values."""
        widths = tuple(input_widths) if input_widths is not None else FeaturizerConfig().widths
        n_embed = min(max_order + 1, len(widths))
        return cls(
            max_order=max_order,
            hidden=_as_tuple(hidden, n_embed, "hidden"),
            heads=_as_tuple(heads, max_order, "heads"),
            dropout=_as_tuple(dropout, n_embed, "dropout"),
            input_widths=widths,
            **kw,
        )

    @classmethod
    def quantum_preset(cls, **kw):
        return cls.make(hidden=256, dropout=0.05, num_blocks=12, **kw)

    @classmethod
    def drug_preset(cls, **kw):
        return cls.make(hidden=128, dropout=0.2, num_blocks=12, **kw)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --- parameter containers -----------------------------------------------------------

class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigMismatchError(
                f"parameter names differ (missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]})"
            )
        for name, p in own.items():
            p.assign(state[name])

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _walk(name, value):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


class Linear(Module):
    def __init__(self, c_in, c_out, rng):
        bound = math.sqrt(6.0 / (c_in + c_out))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c):
        self.gain = Parameter(np.ones(c))
        self.offset = Parameter(np.zeros(c))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.offset)


class FeedForward(Module):
    """Pre-norm two-layer MLP applied to every body independently."""

    def __init__(self, c, expansion, act, rng):
        self.norm = LayerNorm(c)
        self.up = Linear(c, c * expansion, rng)
        self.down = Linear(c * expansion, c, rng)
        self.act = act

    def __call__(self, z):
        return self.down(T.activation(self.up(self.norm(z)), self.act))


class AxialAttention(Module):
    """Multi-head attention along one atom axis of an order-m tensor.

    Keys and values for the pair (query index i, key index j) add a
    projection of the (m+1)-body that has j inserted right after i on the
    attended axis, when a higher-order tensor is supplied.
    """

    def __init__(self, c, c_high, heads, logit_scale, rng):
        if c % heads:
            raise ShapeError(f"width {c} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(c // heads) if logit_scale == "inverse_sqrt_head_dim" else None
        self.norm = LayerNorm(c)
        self.query = Linear(c, c, rng)
        self.key = Linear(c, c, rng)
        self.value = Linear(c, c, rng)
        if c_high is not None:
            self.norm_high = LayerNorm(c_high)
            self.key_high = Linear(c_high, c, rng)
            self.value_high = Linear(c_high, c, rng)
        self.out = Linear(c, c, rng)

    @property
    def has_high(self):
        return hasattr(self, "key_high")

    def __call__(self, z, z_high, axis, mask=None, trace=None, trace_key=None):
        m = z.ndim - 1
        if not 1 <= axis <= m:
            raise ShapeError(f"axis {axis} out of range for an order-{m} tensor")
        if z_high is not None:
            if not self.has_high:
                raise ShapeError("this attention has no higher-order projections")
            if z_high.ndim != m + 2:
                raise ShapeError(f"higher-order tensor must have {m + 1} atom axes, got shape {z_high.shape}")
        h = self.heads
        x = T.moveaxis(self.norm(z), axis - 1, m - 1)
        split = x.shape[:-1] + (h, x.shape[-1] // h)
        q = T.reshape(self.query(x), split)
        k = T.reshape(self.key(x), split)
        v = T.reshape(self.value(x), split)
        r = q.ndim - 3  # leading "rest" axes
        rest = tuple(range(r))
        # (rest, h, i, d) @ (rest, h, d, j) -> (rest, h, i, j)
        logits = T.matmul(T.permute(q, rest + (r + 1, r, r + 2)), T.permute(k, rest + (r + 1, r + 2, r)))
        if z_high is not None:
            y = T.moveaxis(self.norm_high(z_high), (axis - 1, axis), (m - 1, m))
            split_high = y.shape[:-1] + (h, x.shape[-1] // h)
            # (rest, i, h, j, d) layout for both higher-order projections
            kh = T.permute(T.reshape(self.key_high(y), split_high), rest + (r, r + 2, r + 1, r + 3))
            vh = T.permute(T.reshape(self.value_high(y), split_high), rest + (r, r + 2, r + 1, r + 3))
            extra = T.matmul(kh, T.expand_dims(q, -1))  # (rest, i, h, j, 1)
            logits = logits + T.permute(T.reshape(extra, extra.shape[:-1]), rest + (r + 1, r, r + 2))
        if self.scale is not None:
            logits = logits * self.scale
        alpha = T.softmax_axis(logits, -1, mask)
        if trace is not None:
            trace[trace_key] = alpha.data
        # (rest, h, i, j) @ (rest, h, j, d) -> (rest, h, i, d) -> (rest, i, h, d)
        o = T.permute(T.matmul(alpha, T.permute(v, rest + (r + 1, r, r + 2))), rest + (r + 1, r, r + 2))
        if z_high is not None:
            a_rows = T.expand_dims(T.permute(alpha, rest + (r + 1, r, r + 2)), -2)  # (rest, i, h, 1, j)
            o = o + T.reshape(T.matmul(a_rows, vh), o.shape)
        o = T.reshape(o, o.shape[:-2] + (x.shape[-1],))
        return T.moveaxis(self.out(o), m - 1, axis - 1)

    def export(self):
        """Plain-array copy of the weights, for reference implementations."""
        return {name: p.data.copy() for name, p in self.named_parameters()}


class OuterProduct(Module):
    """Low2High for order 2: flattened outer product of two atom projections."""

    def __init__(self, c_low, c_outer, c_out, rng):
        self.norm = LayerNorm(c_low)
        self.left = Linear(c_low, c_outer, rng)
        self.right = Linear(c_low, c_outer, rng)
        self.out = Linear(c_outer * c_outer, c_out, rng)

    def __call__(self, z1):
        x = self.norm(z1)
        a, b = self.left(x), self.right(x)
        outer = T.einsum("ip,jq->ijpq", a, b)
        flat = T.reshape(outer, outer.shape[:-2] + (a.shape[-1] * b.shape[-1],))
        return self.out(flat)


class ElementwiseAdd(Module):
    """Low2High for order m > 2: sum over dropped index positions, then Linear(act(.))."""

    def __init__(self, order, c_low, c_out, act, rng):
        self.order = order
        self.norm = LayerNorm(c_low)
        self.drops = [Linear(c_low, c_out, rng) for _ in range(order)]
        self.out = Linear(c_out, c_out, rng)
        self.act = act

    def __call__(self, z_low):
        if z_low.ndim != self.order:
            raise ShapeError(f"expected an order-{self.order - 1} tensor, got shape {z_low.shape}")
        x = self.norm(z_low)
        total = None
        for k, proj in enumerate(self.drops):
            term = T.expand_dims(proj(x), k)
            total = term if total is None else total + term
        return self.out(T.activation(total, self.act))


@dataclass
class RepresentationSet:
    z: list
    ctx: Optional[Tensor]
    atom_mask: np.ndarray


class _Dropper:
    """Hands out per-call dropout seeds from one generator."""

    def __init__(self, training, rng):
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, x, p):
        if not self.training or p == 0.0:
            return x
        return T.dropout(x, p, True, int(self.rng.integers(2**63)))


class OptimusTrack(Module):
    def __init__(self, order, config, rng):
        c = config.hidden[order - 1]
        has_high = order < config.max_order or config.has_context
        c_high = config.hidden[order] if has_high else None
        self.order = order
        self.p = config.dropout[order - 1]
        if order == 1:
            self.low2high = None
        elif order == 2:
            self.low2high = OuterProduct(config.hidden[0], config.outer_width, c, rng)
        else:
            self.low2high = ElementwiseAdd(order, config.hidden[order - 2], c, config.activation, rng)
        self.attention = [
            AxialAttention(c, c_high, config.heads[order - 1], config.logit_scale, rng) for _ in range(order)
        ]
        self.ffn = FeedForward(c, config.ffn_expansion, config.activation, rng)

    def __call__(self, z_low, z, z_high, mask, drop, trace=None, block=None):
        out = z
        if self.low2high is not None:
            out = out + drop(self.low2high(z_low), self.p)
        for axis, attn in enumerate(self.attention, 1):
            out = out + drop(attn(out, z_high, axis, mask, trace, (block, self.order, axis)), self.p)
        return out + drop(self.ffn(out), self.p)


class OptimusBlock(Module):
    def __init__(self, config, rng):
        self.tracks = [OptimusTrack(m, config, rng) for m in range(1, config.max_order + 1)]

    def __call__(self, reps, mask, drop, trace=None, block=None):
        M = len(self.tracks)
        updated = []
        low = None
        for m, track in enumerate(self.tracks, 1):
            z_high = reps.z[m] if m < M else reps.ctx
            low = track(low, reps.z[m - 1], z_high, mask, drop, trace, block)
            updated.append(low)
        return RepresentationSet(updated, reps.ctx, reps.atom_mask)


def attention_mask(atom_mask, topo_dist, level=None):
    """Boolean (query atom, key atom) mask, or None when nothing is masked."""
    valid = np.asarray(atom_mask, dtype=bool)
    if level is None and valid.all():
        return None
    n = valid.size
    mask = np.broadcast_to(valid[None, :], (n, n)).copy()
    if level is not None:
        mask &= (np.asarray(topo_dist) <= level) | ~valid[:, None]
    return mask


class GEM2(Module):
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.embed = [Linear(w, c, rng) for w, c in zip(config.input_widths, config.hidden)]
        self.embed_norm = [LayerNorm(c) for c in config.hidden]
        self.blocks = [OptimusBlock(config, rng) for _ in range(config.num_blocks)]
        c1 = config.hidden[0]
        self.head = [Linear(c1, c1, rng), Linear(c1, c1 // 2, rng), Linear(c1 // 2, 1, rng)]

    def embed_features(self, features, training=False, rng=None, drop=None):
        cfg = self.config
        drop = drop or _Dropper(training, rng)
        xs = (features.x1, features.x2, features.x3)
        z = []
        for m in range(1, cfg.num_embedded + 1):
            x = Tensor(xs[m - 1])
            if x.shape[-1] != cfg.input_widths[m - 1]:
                raise ConfigError(
                    f"order-{m} features have width {x.shape[-1]}, model expects {cfg.input_widths[m - 1]}"
                )
            z.append(self.embed_norm[m - 1](drop(self.embed[m - 1](x), cfg.dropout[m - 1])))
        ctx = z.pop() if cfg.has_context else None
        return RepresentationSet(z, ctx, np.asarray(features.atom_mask, dtype=bool))

    def forward(self, features, training=False, rng=None, trace=None):
        """Scalar prediction (shape ``(1,)``) for one molecule."""
        drop = _Dropper(training, rng)
        reps = self.embed_features(features, training, drop=drop)
        mask = attention_mask(reps.atom_mask, features.topo_dist, self.config.long_range_level)
        for b, block in enumerate(self.blocks):
            reps = block(reps, mask, drop, trace, b)
        pool_mask = None if reps.atom_mask.all() else reps.atom_mask
        h = T.mean_pool_axis(reps.z[0], 0, pool_mask)
        act = self.config.activation
        h = T.activation(self.head[0](h), act)
        h = T.activation(self.head[1](h), act)
        return self.head[2](h)

    __call__ = forward

    def representations(self, features):
        """Inference-mode representations after the last block."""
        with T.no_grad():
            drop = _Dropper(False, None)
            reps = self.embed_features(features, drop=drop)
            mask = attention_mask(reps.atom_mask, features.topo_dist, self.config.long_range_level)
            for block in self.blocks:
                reps = block(reps, mask, drop)
        return reps


def attention_weights(model, features, query_body, block, axis):
    """Attention row of the order-len(query_body) track for one query body.

    ``block`` and atom indices are 0-based; ``axis`` is 1-based. Returns
    ``{"per_head": (heads, N), "mean": (N,)}``.
    """
    cfg = model.config
    query_body = tuple(int(i) for i in query_body)
    m = len(query_body)
    n = features.num_atoms
    if not 1 <= m <= cfg.max_order:
        raise InputError(f"query body of order {m}; model tracks orders 1..{cfg.max_order}")
    if not 0 <= block < cfg.num_blocks:
        raise InputError(f"block {block} out of range [0, {cfg.num_blocks})")
    if not 1 <= axis <= m:
        raise InputError(f"axis {axis} out of range [1, {m}]")
    bad = [i for i in query_body if not 0 <= i < n]
    if bad:
        raise InputError(f"atom indices {bad} out of range for {n} atoms")
    trace = {}
    with T.no_grad():
        model.forward(features, training=False, trace=trace)
    alpha = trace[(block, m, axis)]
    rest = tuple(q for pos, q in enumerate(query_body) if pos != axis - 1)
    per_head = alpha[rest][:, query_body[axis - 1], :]
    return {"per_head": per_head, "mean": per_head.mean(axis=0)}


# --- checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GEM2CK\0"
CHECKPOINT_VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model, features=None, extra=None):
    """Layout: magic, u16 version, u32 length + canonical JSON config echo,
    u32 tensor count, then per tensor: u16 name length, utf-8 name,
    u32 ndim, u64 dims, little-endian float64 data."""
    echo = {"model": model.config.to_dict(), "features": (features or FeaturizerConfig()).to_dict()}
    if extra:
        echo["extra"] = extra
    blob = canonical_json(echo).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def config_diff(expected, found, prefix=""):
    """Field-by-field differences between two JSON-like dicts."""
    diffs = []
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key), found.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            diffs.extend(config_diff(a, b, f"{prefix}{key}."))
        elif a != b:
            diffs.append((prefix + key, a, b))
    return diffs


def read_checkpoint(path):
    """Return ``(config_echo, {name: array})``."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a GEM2 checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        echo = json.loads(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * size)
            if len(buf) != 8 * size:
                raise InputError(f"{path}: truncated tensor {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return echo, state


def load_checkpoint(path, expected_model=None, expected_features=None, overrides=None):
    """Rebuild the model stored at ``path``.

    If expected configs are given they must match the stored echo field by
    field, else :class:`ConfigMismatchError` lists every differing field.
    ``overrides`` replaces model fields that do not affect parameter shapes
    (e.g. ``long_range_level``) after validation.
    """
    echo, state = read_checkpoint(path)
    diffs = []
    if expected_model is not None:
        diffs += config_diff(expected_model.to_dict(), echo["model"], "model.")
    if expected_features is not None:
        diffs += config_diff(expected_features.to_dict(), echo["features"], "features.")
    if diffs:
        lines = "\n".join(f"  {k}: expected {a!r}, checkpoint has {b!r}" for k, a, b in diffs)
        raise ConfigMismatchError(f"checkpoint config mismatch:\n{lines}", diffs)
    config = ModelConfig.from_dict(echo["model"])
    if overrides:
        config = config.replace(**overrides)
    model = GEM2(config)
    model.load_state_dict(state)
    return model, FeaturizerConfig.from_dict(echo["features"]), echo
