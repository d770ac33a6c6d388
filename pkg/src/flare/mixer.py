"""FLARE token mixing: encode N tokens onto M latent queries, decode back.

Shapes follow the convention Q: (H, M, D), K and V: (..., H, N, D). The fused
path only ever holds M x N score blocks per head. The materialized path and
:func:`communication_matrix` exist for verification.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InvalidValueError
from .resmlp import ResMLPConfig, resmlp_forward, subtree
from .tensor import _make, as_tensor, linear, unbroadcast


def _softmax_(s):
    """In-place row softmax over the last axis; returns ``s``."""
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ----------------------------------------------------------------------------
# heads
# ----------------------------------------------------------------------------

def head_split(x, n_heads):
    """(..., N, C) -> (..., H, N, D); head h holds columns [h*D, (h+1)*D)."""
    x = as_tensor(x)
    c = x.shape[-1]
    if n_heads < 1 or c % n_heads:
        raise ConfigError(f"feature width {c} is not divisible by {n_heads} heads")
    d = c // n_heads
    lead, n = x.shape[:-2], x.shape[-2]
    out = np.ascontiguousarray(np.swapaxes(x.data.reshape(*lead, n, n_heads, d), -3, -2))

    def backward(g):
        return (np.swapaxes(g, -3, -2).reshape(x.shape),)

    return _make(out, "head_split", (x,), backward)


def head_merge(y):
    """(..., H, N, D) -> (..., N, H*D); inverse of :func:`head_split`."""
    y = as_tensor(y)
    *lead, h, n, d = y.shape
    out = np.ascontiguousarray(np.swapaxes(y.data, -3, -2)).reshape(*lead, n, h * d)

    def backward(g):
        return (np.ascontiguousarray(np.swapaxes(g.reshape(*lead, n, h, d), -3, -2)),)

    return _make(out, "head_merge", (y,), backward)


def _check_qkv(q, k, v):
    if q.ndim != 3 or k.ndim < 3:
        raise DimensionError(f"expected q (H, M, D) and k (..., H, N, D), got {q.shape}, {k.shape}")
    if k.shape != v.shape:
        raise DimensionError(f"k and v shapes differ: {k.shape} vs {v.shape}")
    if k.shape[-3] != q.shape[0] or k.shape[-1] != q.shape[-1]:
        raise DimensionError(f"q {q.shape} does not conform with k {k.shape}")


# ----------------------------------------------------------------------------
# fused mixer
# ----------------------------------------------------------------------------

def flare_mix_fused(q, k, v):
    """Y_h = softmax(K_h Q_h^T) (softmax(Q_h K_h^T) V_h), unit score scale.

    Two SDPA-style passes, each stabilized per row. Memory is O(N*M) per head;
    no N x N array is ever formed.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    qd, kd, vd = q.data, k.data, v.data

    p_enc = _softmax_(np.matmul(qd, _swap(kd)))    # (..., H, M, N)
    z = np.matmul(p_enc, vd)                       # (..., H, M, D)
    p_dec = _softmax_(np.matmul(kd, _swap(qd)))    # (..., H, N, M)
    y = np.matmul(p_dec, z)                        # (..., H, N, D)

    def backward(g):
        dz = np.matmul(_swap(p_dec), g)
        ds = np.matmul(g, _swap(z))
        ds -= (ds * p_dec).sum(axis=-1, keepdims=True)
        ds *= p_dec
        dk = np.matmul(ds, qd)
        dq = np.matmul(_swap(ds), kd)
        del ds
        dv = np.matmul(_swap(p_enc), dz)
        ds = np.matmul(dz, _swap(vd))
        ds -= (ds * p_enc).sum(axis=-1, keepdims=True)
        ds *= p_enc
        dq += np.matmul(ds, kd)
        dk += np.matmul(_swap(ds), qd)
        return unbroadcast(dq, q.shape), dk, dv

    return _make(y, "flare_mix", (q, k, v), backward)


# ----------------------------------------------------------------------------
# materialized mixer (verification path)
# ----------------------------------------------------------------------------

@dataclass
class MixerTrace:
    """Per-head encode/decode weights and latent sequence."""
    w_encode: np.ndarray   # (..., H, M, N), rows sum to 1
    w_decode: np.ndarray   # (..., H, N, M), rows sum to 1
    z: np.ndarray          # (..., H, M, D)


def exp_scores(q, k):
    """A = exp(Q K^T - max) with one scalar shift per score matrix.

    A single shift cancels under both row and column normalization, so the
    encode and decode weights built from A are exact softmaxes.
    """
    s = np.matmul(q, _swap(k))
    s -= s.max(axis=(-2, -1), keepdims=True)
    a = np.exp(s, out=s)
    if (a.sum(axis=-1) == 0).any() or (a.sum(axis=-2) == 0).any():
        raise InvalidValueError("score range too wide: a row or column of exp(scores) underflowed")
    return a


def flare_mix_materialized(q, k, v):
    """Same output as :func:`flare_mix_fused`, built from explicit weights.

    Returns ``(y, trace)`` as plain arrays.
    """
    q, k, v = (np.asarray(t.data if hasattr(t, "data") else t) for t in (q, k, v))
    _check_qkv(q, k, v)
    a = exp_scores(q, k)
    w_encode = a / a.sum(axis=-1, keepdims=True)
    w_decode = _swap(a / a.sum(axis=-2, keepdims=True)).copy()
    z = np.matmul(w_encode, v)
    y = np.matmul(w_decode, z)
    return y, MixerTrace(w_encode=w_encode, w_decode=w_decode, z=z)


def communication_matrix(q_h, k_h):
    """Explicit N x N row-stochastic W_h = W_decode W_encode (test sizes only)."""
    a = exp_scores(np.asarray(q_h), np.asarray(k_h))
    w_encode = a / a.sum(axis=-1, keepdims=True)
    w_decode = (a / a.sum(axis=-2, keepdims=True)).T
    return w_decode @ w_encode


# ----------------------------------------------------------------------------
# vanilla attention baseline
# ----------------------------------------------------------------------------

_CHUNK_ELEMS = 1 << 24


def vanilla_attention(q, k, v, scale):
    """softmax(Q_h K_h^T / scale) V_h per head; O(N^2) compute.

    Score rows are processed in chunks so peak memory stays bounded; the
    backward pass recomputes each chunk's probabilities.
    """
    if scale <= 0:
        raise InvalidValueError("attention scale must be positive")
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    n = q.shape[-2]
    heads = int(np.prod(q.shape[:-2], dtype=np.int64))
    rows = max(1, min(n, _CHUNK_ELEMS // max(1, heads * n)))
    inv = 1.0 / scale

    def probs(lo, hi):
        s = np.matmul(qd[..., lo:hi, :], _swap(kd))
        s *= inv
        return _softmax_(s)

    y = np.empty_like(vd)
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        y[..., lo:hi, :] = np.matmul(probs(lo, hi), vd)

    def backward(g):
        dq = np.empty_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        for lo in range(0, n, rows):
            hi = min(n, lo + rows)
            p = probs(lo, hi)
            gc = g[..., lo:hi, :]
            dv += np.matmul(_swap(p), gc)
            dp = np.matmul(gc, _swap(vd))
            dp -= (gc * y[..., lo:hi, :]).sum(axis=-1, keepdims=True)
            dp *= p
            dp *= inv
            dq[..., lo:hi, :] = np.matmul(dp, kd)
            dk += np.matmul(_swap(dp), qd[..., lo:hi, :])
        return dq, dk, dv

    return _make(y, "vanilla_attention", (q, k, v), backward)


# ----------------------------------------------------------------------------
# full FLARE layer
# ----------------------------------------------------------------------------

def kv_config(c, n_layers):
    return ResMLPConfig(c, c, c, n_layers, input_residual=True, output_residual=True)


def flare_keys(x, params, n_heads, kv_layers):
    """Per-head keys (..., H, N, D) from the key ResMLP."""
    cfg = kv_config(x.shape[-1], kv_layers)
    return head_split(resmlp_forward(x, cfg, subtree(params, "key")), n_heads)


def flare_layer_forward(x, params, n_heads, kv_layers=3):
    """Key/value ResMLPs, fused multi-head mix, head merge, output linear.

    ``params`` holds ``latent`` (M, C), ``key.*``, ``value.*`` and
    ``out.weight``/``out.bias``.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    latent = params["latent"]
    if latent.shape[-1] != c:
        raise ConfigError(f"latent queries have width {latent.shape[-1]}, input has {c}")
    cfg = kv_config(c, kv_layers)
    k = head_split(resmlp_forward(x, cfg, subtree(params, "key")), n_heads)
    v = head_split(resmlp_forward(x, cfg, subtree(params, "value")), n_heads)
    q = head_split(latent, n_heads)
    y = head_merge(flare_mix_fused(q, k, v))
    return linear(y, params["out.weight"], params["out.bias"])
