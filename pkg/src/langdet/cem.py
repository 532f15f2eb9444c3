"""Category extraction: two class-decoder layers over image features,
dot-product scoring against the original embeddings, and TopK selection.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .losses import AslConfig, asymmetric_loss_arrays, clamp_prob
from .nn import (
    DecoderLayerParams,
    StaleCacheError,
    _uniform,
    cross_attention,
    decoder_layer,
    decoder_layer_backward,
    param_items,
    sigmoid,
    zeros_like_tree,
)

N_LAYERS = 2


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class CemParams:
    layers: list[DecoderLayerParams]
    score_proj: np.ndarray
    bias: np.ndarray
    version: int = field(default=0, metadata={"param": False})

    def __post_init__(self):
        if len(self.layers) != N_LAYERS:
            raise ValueError(f"expected {N_LAYERS} class-decoder layers, got {len(self.layers)}")

    @classmethod
    def init(cls, K: int, d: int, rng: np.random.Generator, d_ff: int | None = None) -> "CemParams":
        d_ff = d_ff or 2 * d
        layers = [DecoderLayerParams.init(d, d_ff, rng) for _ in range(N_LAYERS)]
        return cls(layers, _uniform(rng, (d, d), d), np.zeros(K))


@dataclass
class CemCache:
    params_id: int
    version: int
    E: np.ndarray
    layer_caches: list
    E2: np.ndarray
    z: np.ndarray
    scores: np.ndarray
    batched: bool


def _as_array(E):
    return np.asarray(getattr(E, "rows", E), dtype=np.float64)


def cem_forward(E, feats, params: CemParams, return_cache: bool = False):
    """Scores for every category and the image-aware embeddings.

    ``E`` is (K, d) or an EmbeddingTable; ``feats`` is (P, d) or (B, P, d).
    Returns ``(scores, E2)`` shaped (K,)/(K, d), or with a leading batch axis,
    plus the cache when ``return_cache``.
    """
    E = _as_array(E)
    feats = np.asarray(feats, dtype=np.float64)
    batched = feats.ndim == 3
    F = feats if batched else feats[None]
    K, d = E.shape
    if F.shape[-1] != d:
        raise ValueError(f"feature dim {F.shape[-1]} != embedding dim {d}")
    if params.bias.shape != (K,):
        raise ValueError(f"bias has shape {params.bias.shape}, expected ({K},)")
    x = np.broadcast_to(E, (F.shape[0], K, d))
    caches = []
    for lp in params.layers:
        x, c = decoder_layer(x, F, lp)
        caches.append(c)
    z = x @ params.score_proj
    logits = (z * E).sum(axis=-1) / math.sqrt(d) + params.bias
    s = sigmoid(logits)
    scores, E2 = (s, x) if batched else (s[0], x[0])
    if not return_cache:
        return scores, E2
    cache = CemCache(id(params), params.version, E, caches, x, z, s, batched)
    return scores, E2, cache


def cem_attention_weights(E, feats, params: CemParams) -> list[np.ndarray]:
    """Attention maps of both layers, for inspection and invariant checks."""
    E = _as_array(E)
    F = np.asarray(feats, dtype=np.float64)
    x = np.broadcast_to(E, F.shape[:-2] + E.shape)
    maps = []
    for lp in params.layers:
        _, w, _ = cross_attention(x, F, lp)
        maps.append(w)
        x, _ = decoder_layer(x, F, lp)
    return maps


def cem_backward(dscores, cache: CemCache, params: CemParams, dE2=None):
    """Reverse-mode gradients through scoring and both decoder layers.

    ``dscores`` is d(loss)/d(scores) shaped like the forward scores; ``dE2``
    optionally adds a gradient arriving at the image-aware embeddings.
    Returns ``(grads: CemParams, dE: (K, d), dfeats)``.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("CEM cache does not belong to the current parameters")
    ds = np.asarray(dscores, dtype=np.float64)
    if not cache.batched:
        ds = ds[None]
        if dE2 is not None:
            dE2 = np.asarray(dE2)[None]
    E = cache.E
    K, d = E.shape
    g = zeros_like_tree(params)
    s = cache.scores
    dlogit = ds * s * (1.0 - s)
    g.bias += dlogit.sum(axis=0)
    dz = dlogit[..., None] * E / math.sqrt(d)
    dE = (dlogit[..., None] * cache.z).sum(axis=0) / math.sqrt(d)
    g.score_proj += cache.E2.reshape(-1, d).T @ dz.reshape(-1, d)
    dx = dz @ params.score_proj.T
    if dE2 is not None:
        dx = dx + dE2
    dF = np.zeros(cache.layer_caches[0].attn.feats.shape)
    for lp, lg, lc in zip(reversed(params.layers), reversed(g.layers), reversed(cache.layer_caches)):
        dx, df = decoder_layer_backward(dx, lc, lp, lg)
        dF += df
    dE += dx.sum(axis=0)
    if not cache.batched:
        dF = dF[0]
    return g, dE, dF


def topk_select(scores, top_k: int) -> list[int]:
    """Ids of the ``top_k`` highest scores, descending; ties go to lower ids."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    return [int(i) for i in order[:top_k]]


def training_category_set(gt_classes, scores, top_k: int, allowed=None) -> list[int]:
    """Ground-truth classes first (ascending), then the best other categories.

    ``allowed`` (K,) 0/1 ranks out-of-scope categories after every in-scope
    one, so fill slots come from the sample's own taxonomy while it lasts.
    """
    gt = sorted({int(c) for c in gt_classes})
    if len(gt) > top_k:
        raise ConfigError(f"{len(gt)} ground-truth classes exceed top_k={top_k}; raise top_k")
    s = np.asarray(scores, dtype=np.float64)
    K = len(s)
    n_fill = min(top_k, K) - len(gt)
    if n_fill <= 0:
        return gt
    cand = np.ones(K, dtype=bool)
    cand[gt] = False
    ids = np.flatnonzero(cand)
    tier = np.zeros(K) if allowed is None else (np.asarray(allowed) <= 0).astype(float)
    order = np.lexsort((ids, -s[ids], tier[ids]))
    return gt + [int(ids[i]) for i in order[:n_fill]]


def multi_hot(classes, K: int) -> np.ndarray:
    t = np.zeros(K)
    t[list(classes)] = 1.0
    return t


class SGD:
    """Plain SGD with heavy-ball momentum over named parameter arrays."""

    def __init__(self, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.state: dict[str, np.ndarray] = {}

    def step(self, params, grads, skip=()):
        pairs = [(n, p, gr) for (n, p), (_, gr) in zip(param_items(params), param_items(grads))
                 if not any(n.startswith(s) for s in skip)]
        scale = 1.0
        if self.clip_norm:
            total = math.sqrt(sum(float((gr * gr).sum()) for _, _, gr in pairs))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for name, p, gr in pairs:
            buf = self.state.get(name)
            if buf is None:
                buf = self.state[name] = np.zeros_like(p)
            buf *= self.momentum
            buf += scale * gr
            p -= self.lr * buf


class Adam:
    """Adam with bias correction; same interface as :class:`SGD`."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, skip=()):
        pairs = [(n, p, gr) for (n, p), (_, gr) in zip(param_items(params), param_items(grads))
                 if not any(n.startswith(s) for s in skip)]
        scale = 1.0
        if self.clip_norm:
            total = math.sqrt(sum(float((gr * gr).sum()) for _, _, gr in pairs))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p, gr in pairs:
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            g = scale * gr
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cem_loss_and_grads(E, feats, targets, params: CemParams, cfg: AslConfig = AslConfig(),
                       mu_asl: float = 1.0, mask=None):
    """Mean (over the batch) asymmetric loss of CEM scores, with gradients."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    targets = np.asarray(targets, dtype=np.float64).reshape(feats.shape[0], -1)
    scores, _, cache = cem_forward(E, feats, params, return_cache=True)
    if targets.shape != scores.shape:
        raise ValueError(f"targets {targets.shape} do not match scores {scores.shape}")
    sc = clamp_prob(scores)
    val, grad = asymmetric_loss_arrays(sc, targets, cfg, mu_asl, mask)
    grad = grad * ((scores > 1e-7) & (scores < 1 - 1e-7))
    B = feats.shape[0]
    loss = float(val.sum()) / B
    grads, dE, _ = cem_backward(grad / B, cache, params)
    return loss, grads, dE


def cem_train_step(E, feats, targets, params: CemParams, opt: SGD,
                   cfg: AslConfig = AslConfig(), mu_asl: float = 1.0, mask=None,
                   learnable_embeddings: bool = False) -> float:
    """One momentum-SGD step on the mean asymmetric loss; returns the loss.

    Updates ``params`` in place, and ``E`` too when it is a learnable array.
    """
    loss, grads, dE = cem_loss_and_grads(E, feats, targets, params, cfg, mu_asl, mask)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite CEM loss {loss}")
    opt.step(params, grads)
    params.version += 1
    rows = getattr(E, "rows", E)
    if learnable_embeddings and getattr(E, "learnable", True):
        opt.step({"embeddings": rows}, {"embeddings": dE})
    return loss
