"""Brute-force references used to check the vectorised model.

Nothing here is fast. The attention references use explicit Python loops
and scalar accumulation on purpose so they share no code path with
:mod:`gem2.model`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

FULL_ATTENTION_MAX_TOKENS = 125


@dataclass(frozen=True)
class MessageSet:
    order: int
    bodies: frozenset

    def __contains__(self, body):
        return tuple(body) in self.bodies

    def __len__(self):
        return len(self.bodies)

    def __iter__(self):
        return iter(sorted(self.bodies))


def aggred_message(k, target, n):
    """Bodies whose messages reach ``target`` after axial attention on axes 1..k.

    Evaluated by the defining recursion (union over the k-th index of the
    k-1 result), not the closed form. Indices are 0-based.
    """
    target = tuple(int(i) for i in target)
    m = len(target)
    if not 0 <= k <= m:
        raise InputError(f"k={k} outside [0, {m}]")
    if k == 0:
        return MessageSet(m, frozenset({target}))
    bodies = set()
    for ik in range(n):
        bodies |= aggred_message(k - 1, target[: k - 1] + (ik,) + target[k:], n).bodies
    return MessageSet(m, frozenset(bodies))


# --- scalar-loop attention ------------------------------------------------------------

def _layer_norm_vec(v, gain, offset, eps=1e-5):
    c = len(v)
    mu = 0.0
    for x in v:
        mu += x
    mu /= c
    var = 0.0
    for x in v:
        var += (x - mu) * (x - mu)
    var /= c
    r = 1.0 / math.sqrt(var + eps)
    return [(v[i] - mu) * r * gain[i] + offset[i] for i in range(c)]


def _affine(v, w, b):
    out = []
    for j in range(len(b)):
        acc = b[j]
        for i in range(len(v)):
            acc += v[i] * w[i][j]
        out.append(acc)
    return out


def _bodies(n, order):
    return itertools.product(range(n), repeat=order)


def naive_axial_attention(z, z_high, axis, params, heads, scale=None, mask=None):
    """Axial attention on 1-based ``axis`` by explicit index loops.

    ``params`` uses the names from ``AxialAttention.export()``. ``z_high``
    may be None for the plain (no higher-order key/value) formulation.
    ``mask[i][j]`` False excludes key atom j for query atom i.
    """
    z = np.asarray(z)
    n = z.shape[0]
    m = z.ndim - 1
    c = z.shape[-1]
    d = c // heads
    p = {k: v.tolist() for k, v in params.items()}
    a = axis - 1

    normed = {b: _layer_norm_vec(z[b].tolist(), p["norm.gain"], p["norm.offset"]) for b in _bodies(n, m)}
    q = {b: _affine(v, p["query.weight"], p["query.bias"]) for b, v in normed.items()}
    k = {b: _affine(v, p["key.weight"], p["key.bias"]) for b, v in normed.items()}
    v_ = {b: _affine(v, p["value.weight"], p["value.bias"]) for b, v in normed.items()}
    kh = vh = None
    if z_high is not None:
        z_high = np.asarray(z_high)
        kh, vh = {}, {}
        for b in _bodies(n, m + 1):
            y = _layer_norm_vec(z_high[b].tolist(), p["norm_high.gain"], p["norm_high.offset"])
            kh[b] = _affine(y, p["key_high.weight"], p["key_high.bias"])
            vh[b] = _affine(y, p["value_high.weight"], p["value_high.bias"])

    out = np.zeros_like(z, dtype=np.float64)
    for body in _bodies(n, m):
        i = body[a]
        keys, vals, allowed = [], [], []
        for j in range(n):
            kb = body[:a] + (j,) + body[a + 1 :]
            kj, vj = list(k[kb]), list(v_[kb])
            if kh is not None:
                hb = body[: a + 1] + (j,) + body[a + 1 :]
                kj = [kj[t] + kh[hb][t] for t in range(c)]
                vj = [vj[t] + vh[hb][t] for t in range(c)]
            keys.append(kj)
            vals.append(vj)
            allowed.append(True if mask is None else bool(mask[i][j]))
        concat = []
        for h in range(heads):
            lo = h * d
            logits = []
            for j in range(n):
                s = 0.0
                for t in range(lo, lo + d):
                    s += q[body][t] * keys[j][t]
                logits.append(s * scale if scale is not None else s)
            top = max(logits[j] for j in range(n) if allowed[j])
            weights = [math.exp(logits[j] - top) if allowed[j] else 0.0 for j in range(n)]
            total = 0.0
            for w in weights:
                total += w
            for t in range(lo, lo + d):
                acc = 0.0
                for j in range(n):
                    acc += weights[j] / total * vals[j][t]
                concat.append(acc)
        out[body] = _affine(concat, p["out.weight"], p["out.bias"])
    return out


def naive_attention_weights(z, z_high, axis, params, heads, body, scale=None):
    """Per-head softmax row for one query body, computed by loops."""
    z = np.asarray(z)
    n, c = z.shape[0], z.shape[-1]
    d = c // heads
    p = {k: v.tolist() for k, v in params.items()}
    a = axis - 1
    body = tuple(body)

    def proj(b, name):
        return _affine(_layer_norm_vec(z[b].tolist(), p["norm.gain"], p["norm.offset"]), p[f"{name}.weight"], p[f"{name}.bias"])

    q = proj(body, "query")
    rows = []
    for h in range(heads):
        logits = []
        for j in range(n):
            kb = body[:a] + (j,) + body[a + 1 :]
            kj = proj(kb, "key")
            if z_high is not None:
                hb = body[: a + 1] + (j,) + body[a + 1 :]
                y = _layer_norm_vec(np.asarray(z_high)[hb].tolist(), p["norm_high.gain"], p["norm_high.offset"])
                kj = [x + y_ for x, y_ in zip(kj, _affine(y, p["key_high.weight"], p["key_high.bias"]))]
            s = sum(q[t] * kj[t] for t in range(h * d, (h + 1) * d))
            logits.append(s * scale if scale is not None else s)
        top = max(logits)
        e = [math.exp(x - top) for x in logits]
        rows.append([x / sum(e) for x in e])
    return np.array(rows)


def naive_elementwise_add(z_low, params, act):
    """Order-m Low2High by index enumeration: sum of per-position projections of
    the (m-1)-bodies with one index dropped, then ``out(act(.))``."""
    z_low = np.asarray(z_low)
    n = z_low.shape[0]
    order = z_low.ndim
    p = {k: v.tolist() for k, v in params.items()}
    normed = {b: _layer_norm_vec(z_low[b].tolist(), p["norm.gain"], p["norm.offset"]) for b in _bodies(n, order - 1)}
    c_out = len(p["out.bias"])
    out = np.zeros((n,) * order + (c_out,))
    for body in _bodies(n, order):
        acc = [0.0] * c_out
        for k in range(order):
            dropped = body[:k] + body[k + 1 :]
            term = _affine(normed[dropped], p[f"drops.{k}.weight"], p[f"drops.{k}.bias"])
            acc = [x + y for x, y in zip(acc, term)]
        out[body] = _affine([act(x) for x in acc], p["out.weight"], p["out.bias"])
    return out


def full_attention_reference(z, params, heads, scale=None, max_tokens=FULL_ATTENTION_MAX_TOKENS):
    """Single-shot attention over all N^m bodies flattened into tokens.

    Uses the same projection names as the axial attention (higher-order
    terms ignored). Not expected to equal stacked axial attention.
    """
    z = np.asarray(z)
    tokens = int(np.prod(z.shape[:-1]))
    if tokens > max_tokens:
        raise InputError(f"full attention over {tokens} tokens exceeds the guard of {max_tokens}")
    c = z.shape[-1]
    x = z.reshape(tokens, c)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    x = (x - mu) / np.sqrt(var + 1e-5) * params["norm.gain"] + params["norm.offset"]
    d = c // heads
    q = (x @ params["query.weight"] + params["query.bias"]).reshape(tokens, heads, d)
    k = (x @ params["key.weight"] + params["key.bias"]).reshape(tokens, heads, d)
    v = (x @ params["value.weight"] + params["value.bias"]).reshape(tokens, heads, d)
    logits = np.einsum("ihd,jhd->hij", q, k)
    if scale is not None:
        logits = logits * scale
    logits -= logits.max(-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(-1, keepdims=True)
    o = np.einsum("hij,jhd->ihd", w, v).reshape(tokens, c)
    return (o @ params["out.weight"] + params["out.bias"]).reshape(z.shape)


# --- perturbation probes ----------------------------------------------------------------

def jacobian_sparsity(fn, x, threshold=1e-9, step=1e-4):
    """``dep[out_idx + in_idx]`` is True iff a central-difference perturbation of
    input element ``in_idx`` moves output element ``out_idx`` by more than ``threshold``."""
    x = np.array(x, dtype=np.float64)
    base = np.asarray(fn(x))
    dep = np.zeros(base.shape + x.shape, dtype=bool)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        delta = np.abs(np.asarray(fn(xp)) - np.asarray(fn(xm)))
        dep[(Ellipsis,) + idx] = delta > threshold
    return dep


def body_dependence(dep, order):
    """Collapse element-level sparsity to (output body, input body) level.

    ``dep`` has shape out_body + (c_out,) + in_body + (c_in,)."""
    axes = (order,) + (2 * order + 1,)
    return dep.any(axis=axes)


def numerical_gradient(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (f(xp) - f(xm)) / (2 * step)
    return grad


def count_ops(kind, n, m, c):
    """Query-key multiply-accumulates of one attention pass.

    ``axial`` stacks attention over all m axes: m * N^(m+1) * c.
    ``full`` attends over all N^m bodies at once: N^(2m) * c.
    Aggregating values costs the same count again in both kernels.
    """
    if min(n, m, c) < 1:
        raise InputError("count_ops parameters must be >= 1")
    if kind == "axial":
        return m * n ** (m + 1) * c
    if kind == "full":
        return n ** (2 * m) * c
    raise InputError(f"unknown kernel kind {kind!r}")
