"""Numpy building blocks with explicit forward caches and backward passes.

Everything works on float64 arrays with arbitrary leading batch dimensions;
weight gradients are summed over those dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
import math

import numpy as np

LN_EPS = 1e-5


class StaleCacheError(RuntimeError):
    """A backward pass was given a cache from different parameters or inputs."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def inverse_sigmoid(p, eps: float = 1e-5):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def positional_encoding(xy, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding of points in [0,1]^2, unit norm per point.

    ``d // 4`` frequencies per axis; leftover dimensions stay zero.
    """
    xy = np.asarray(xy, dtype=np.float64)
    nf = d // 4
    freqs = math.pi * 2.0 ** np.arange(nf)
    out = np.zeros(xy.shape[:-1] + (d,))
    if nf == 0:
        return out
    ax = xy[..., 0:1] * freqs
    ay = xy[..., 1:2] * freqs
    out[..., 0:nf] = np.sin(ax)
    out[..., nf:2 * nf] = np.cos(ax)
    out[..., 2 * nf:3 * nf] = np.sin(ay)
    out[..., 3 * nf:4 * nf] = np.cos(ay)
    return out / math.sqrt(2 * nf)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _wgrad(x, dy):
    return _flat(x).T @ _flat(dy)


# ---------------------------------------------------------------------------
# parameter containers


def param_items(obj, prefix: str = ""):
    """Yield ``(dotted_name, array)`` for every ndarray inside a param tree."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            if f.metadata.get("param", True):
                yield from param_items(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from param_items(v, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from param_items(v, f"{prefix}.{k}" if prefix else str(k))


def zeros_like_tree(obj):
    if isinstance(obj, np.ndarray):
        return np.zeros_like(obj)
    if is_dataclass(obj):
        kw = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            kw[f.name] = zeros_like_tree(v) if f.metadata.get("param", True) else v
        return type(obj)(**kw)
    if isinstance(obj, list):
        return [zeros_like_tree(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(zeros_like_tree(v) for v in obj)
    return obj


def copy_tree(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if is_dataclass(obj):
        return type(obj)(**{f.name: copy_tree(getattr(obj, f.name)) for f in fields(obj)})
    if isinstance(obj, list):
        return [copy_tree(v) for v in obj]
    return obj


def _uniform(rng, shape, d):
    lim = 1.0 / math.sqrt(d)
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class DecoderLayerParams:
    """Cross-attention block: attention projections, two norms, FFN."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d: int, d_ff: int, rng: np.random.Generator) -> "DecoderLayerParams":
        return cls(
            wq=_uniform(rng, (d, d), d),
            wk=_uniform(rng, (d, d), d),
            wv=_uniform(rng, (d, d), d),
            wo=_uniform(rng, (d, d), d),
            ln1_g=np.ones(d),
            ln1_b=np.zeros(d),
            ln2_g=np.ones(d),
            ln2_b=np.zeros(d),
            w1=_uniform(rng, (d, d_ff), d),
            b1=np.zeros(d_ff),
            w2=_uniform(rng, (d_ff, d), d_ff),
            b2=np.zeros(d),
        )

    @property
    def d(self) -> int:
        return self.wq.shape[0]


# ---------------------------------------------------------------------------
# layer norm


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


# ---------------------------------------------------------------------------
# cross attention


@dataclass
class AttnCache:
    xq: np.ndarray
    feats: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    ctx: np.ndarray


def cross_attention(x, feats, p: DecoderLayerParams, query_pos=None):
    """Single-head attention of rows of ``x`` over rows of ``feats``.

    ``x`` is (..., K, d), ``feats`` (..., P, d) with matching leading dims.
    ``query_pos`` is added to the attending rows before the query projection
    only. Returns ``(out, weights, cache)``; weight rows sum to one.
    """
    d = x.shape[-1]
    if feats.shape[-1] != d or p.wq.shape != (d, d):
        raise ValueError(f"dimension mismatch: x {x.shape}, feats {feats.shape}, wq {p.wq.shape}")
    xq = x if query_pos is None else x + query_pos
    q = xq @ p.wq
    k = feats @ p.wk
    v = feats @ p.wv
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    w = softmax(scores)
    ctx = w @ v
    out = ctx @ p.wo
    return out, w, AttnCache(xq, feats, q, k, v, w, ctx)


def cross_attention_backward(dout, c: AttnCache, p: DecoderLayerParams, g: DecoderLayerParams):
    """Accumulate weight grads into ``g``; return (d x, d feats)."""
    d = c.q.shape[-1]
    g.wo += _wgrad(c.ctx, dout)
    dctx = dout @ p.wo.T
    dw = dctx @ np.swapaxes(c.v, -1, -2)
    dv = np.swapaxes(c.weights, -1, -2) @ dctx
    ds = c.weights * (dw - (dw * c.weights).sum(axis=-1, keepdims=True))
    ds /= math.sqrt(d)
    dq = ds @ c.k
    dk = np.swapaxes(ds, -1, -2) @ c.q
    g.wq += _wgrad(c.xq, dq)
    g.wk += _wgrad(c.feats, dk)
    g.wv += _wgrad(c.feats, dv)
    dx = dq @ p.wq.T
    dfeats = dk @ p.wk.T + dv @ p.wv.T
    return dx, dfeats


# ---------------------------------------------------------------------------
# decoder layer: post-norm residual attention then post-norm residual FFN


@dataclass
class LayerCache:
    attn: AttnCache
    ln1: tuple
    a: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    ln2: tuple
    weights: np.ndarray = field(repr=False, default=None)


def decoder_layer(x, feats, p: DecoderLayerParams, query_pos=None):
    att, w, ac = cross_attention(x, feats, p, query_pos)
    a, ln1 = layer_norm(x + att, p.ln1_g, p.ln1_b)
    h_pre = a @ p.w1 + p.b1
    h = np.maximum(h_pre, 0.0)
    f = h @ p.w2 + p.b2
    out, ln2 = layer_norm(a + f, p.ln2_g, p.ln2_b)
    return out, LayerCache(ac, ln1, a, h_pre, h, ln2, w)


def decoder_layer_backward(dout, c: LayerCache, p: DecoderLayerParams, g: DecoderLayerParams):
    """Return (d x, d feats); parameter gradients accumulate into ``g``."""
    dres2, dg2, db2 = layer_norm_backward(dout, c.ln2)
    g.ln2_g += dg2
    g.ln2_b += db2
    da = dres2.copy()
    g.w2 += _wgrad(c.h, dres2)
    g.b2 += _flat(dres2).sum(axis=0)
    dh = (dres2 @ p.w2.T) * (c.h_pre > 0)
    g.w1 += _wgrad(c.a, dh)
    g.b1 += _flat(dh).sum(axis=0)
    da += dh @ p.w1.T
    dres1, dg1, db1 = layer_norm_backward(da, c.ln1)
    g.ln1_g += dg1
    g.ln1_b += db1
    dx_attn, dfeats = cross_attention_backward(dres1, c.attn, p, g)
    return dres1 + dx_attn, dfeats
