"""Class-assigned queries, the one-layer toy decoder and the prediction head.

Each query carries one category; its score is the matchability of that
category alone, computed as a scaled dot product between the projected
decoder output and the category's language embedding. Boxes refine the
query's reference box in logit space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .cem import cem_forward, topk_select
from .geometry import Box
from .nn import (
    DecoderLayerParams,
    StaleCacheError,
    _flat,
    _uniform,
    _wgrad,
    decoder_layer,
    inverse_sigmoid,
    positional_encoding,
    sigmoid,
    zeros_like_tree,
)

REF_EPS = 1e-5


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Query:
    class_id: int
    content: np.ndarray
    reference: Box


@dataclass
class QuerySet:
    """``top_k * n_per_class`` queries grouped contiguously by category."""

    category_ids: list[int]
    class_ids: np.ndarray
    contents: np.ndarray
    refs: np.ndarray
    n_per_class: int

    @property
    def top_k(self) -> int:
        return len(self.category_ids)

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def queries(self) -> list[Query]:
        return [Query(int(c), self.contents[j], Box.from_array(self.refs[j]))
                for j, c in enumerate(self.class_ids)]


@dataclass
class HeadParams:
    cls_w: np.ndarray
    cls_b: np.ndarray
    box_w1: np.ndarray
    box_b1: np.ndarray
    box_w2: np.ndarray
    box_b2: np.ndarray
    box_w3: np.ndarray
    box_b3: np.ndarray
    decoder: DecoderLayerParams
    version: int = field(default=0, metadata={"param": False})

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, d_ff: int | None = None) -> "HeadParams":
        return cls(
            cls_w=_uniform(rng, (d, d), d),
            cls_b=np.zeros(d),
            box_w1=_uniform(rng, (d, d), d),
            box_b1=np.zeros(d),
            box_w2=_uniform(rng, (d, d), d),
            box_b2=np.zeros(d),
            box_w3=_uniform(rng, (d, 4), d),
            box_b3=np.zeros(4),
            decoder=DecoderLayerParams.init(d, d_ff or 2 * d, rng),
        )


def grid_references(top_k: int, n_per_class: int, size: float = 0.2) -> np.ndarray:
    """Reference boxes: the same per-class lattice repeated for each category."""
    side = math.ceil(math.sqrt(n_per_class))
    cells = [((c + 0.5) / side, (r + 0.5) / side) for r in range(side) for c in range(side)]
    one = np.array([[x, y, size, size] for x, y in cells[:n_per_class]])
    return np.tile(one, (top_k, 1))


def assign_queries(category_ids, E, base_content, refs, n_per_class: int) -> QuerySet:
    """Query j gets category ``category_ids[j // n_per_class]`` and content
    ``base_content + E[category]``. ``E`` may be the raw table or the CEM's
    image-aware rows."""
    cats = [int(c) for c in category_ids]
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    if len(refs) != len(cats) * n_per_class:
        raise ValueError(f"{len(refs)} references for {len(cats)} categories x {n_per_class} queries")
    rows = np.asarray(getattr(E, "rows", E), dtype=np.float64)
    class_ids = np.repeat(np.asarray(cats, dtype=np.int64), n_per_class)
    contents = np.asarray(base_content, dtype=np.float64) + rows[class_ids]
    return QuerySet(cats, class_ids, contents.reshape(len(class_ids), -1), refs, n_per_class)


def toy_decoder(qs, feats, p: HeadParams, return_cache: bool = False):
    """One class-decoder layer with query contents attending over ``feats``.

    The reference centre's positional encoding joins the attention query
    projection, so each query looks near its own reference box.
    ``qs`` is a QuerySet or a ``(contents, refs)`` pair of arrays.
    """
    contents, refs = (qs.contents, qs.refs) if isinstance(qs, QuerySet) else qs
    contents = np.asarray(contents, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    qpos = positional_encoding(np.asarray(refs)[..., :2], contents.shape[-1])
    out, cache = decoder_layer(contents, feats, p.decoder, query_pos=qpos)
    return (out, cache) if return_cache else out


@dataclass
class HeadCache:
    params_id: int
    version: int
    qd: np.ndarray
    pcls: np.ndarray
    emb: np.ndarray
    scores: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    boxes: np.ndarray
    all_classes: bool


def _box_branch(qd, refs, p: HeadParams):
    h1 = np.maximum(qd @ p.box_w1 + p.box_b1, 0.0)
    h2 = np.maximum(h1 @ p.box_w2 + p.box_b2, 0.0)
    pbox = h2 @ p.box_w3 + p.box_b3
    return h1, h2, sigmoid(pbox + inverse_sigmoid(refs, REF_EPS))


def _check_finite(name, arr):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        lead = tuple(int(i) for i in idx[:-1]) or (int(idx[0]),)
        raise NumericError(f"non-finite {name} at query index {lead[0] if len(lead) == 1 else lead}")


def head_predict(qd, assigned_embeddings, refs, p: HeadParams, bias, return_cache: bool = False):
    """Per-query matchability score and refined box.

    ``qd`` (..., Q, d) decoder output; ``assigned_embeddings`` (..., Q, d) the
    language embedding of each query's category; ``bias`` (..., Q) that
    category's bias. Returns ``(scores, boxes)`` and optionally the cache.
    """
    qd = np.asarray(qd, dtype=np.float64)
    emb = np.asarray(assigned_embeddings, dtype=np.float64)
    d = qd.shape[-1]
    pcls = qd @ p.cls_w + p.cls_b
    logits = (pcls * emb).sum(axis=-1) / math.sqrt(d) + np.asarray(bias, dtype=np.float64)
    _check_finite("class logit", logits[..., None])
    scores = sigmoid(logits)
    h1, h2, boxes = _box_branch(qd, np.asarray(refs, dtype=np.float64), p)
    _check_finite("box", boxes)
    if not return_cache:
        return scores, boxes
    return scores, boxes, HeadCache(id(p), p.version, qd, pcls, emb, scores, h1, h2, boxes, False)


def head_predict_all(qd, E, refs, p: HeadParams, bias, return_cache: bool = False):
    """K-way variant: every query scores every category (standard matching)."""
    qd = np.asarray(qd, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    d = qd.shape[-1]
    pcls = qd @ p.cls_w + p.cls_b
    logits = pcls @ E.T / math.sqrt(d) + bias
    _check_finite("class logit", logits)
    scores = sigmoid(logits)
    h1, h2, boxes = _box_branch(qd, np.asarray(refs, dtype=np.float64), p)
    _check_finite("box", boxes)
    if not return_cache:
        return scores, boxes
    return scores, boxes, HeadCache(id(p), p.version, qd, pcls, E, scores, h1, h2, boxes, True)


def head_backward(dscores, dboxes, cache: HeadCache, p: HeadParams):
    """Returns ``(grads, d qd, d embeddings, d bias)``.

    For the per-query head the embedding and bias gradients are per query
    (..., Q, d) and (..., Q); for the K-way head they are (K, d) and (K,).
    """
    if cache.params_id != id(p) or cache.version != p.version:
        raise StaleCacheError("head cache does not belong to the current parameters")
    g = zeros_like_tree(p)
    d = cache.qd.shape[-1]
    s = cache.scores
    dlogit = np.asarray(dscores, dtype=np.float64) * s * (1.0 - s)
    if cache.all_classes:
        dpcls = dlogit @ cache.emb / math.sqrt(d)
        demb = _flat(dlogit).T @ _flat(cache.pcls) / math.sqrt(d)
        dbias = _flat(dlogit).sum(axis=0)
    else:
        dpcls = dlogit[..., None] * cache.emb / math.sqrt(d)
        demb = dlogit[..., None] * cache.pcls / math.sqrt(d)
        dbias = dlogit
    g.cls_w += _wgrad(cache.qd, dpcls)
    g.cls_b += _flat(dpcls).sum(axis=0)
    dqd = dpcls @ p.cls_w.T

    b = cache.boxes
    dpbox = np.asarray(dboxes, dtype=np.float64) * b * (1.0 - b)
    g.box_w3 += _wgrad(cache.h2, dpbox)
    g.box_b3 += _flat(dpbox).sum(axis=0)
    dh2 = (dpbox @ p.box_w3.T) * (cache.h2 > 0)
    g.box_w2 += _wgrad(cache.h1, dh2)
    g.box_b2 += _flat(dh2).sum(axis=0)
    dh1 = (dh2 @ p.box_w2.T) * (cache.h1 > 0)
    g.box_w1 += _wgrad(cache.qd, dh1)
    g.box_b1 += _flat(dh1).sum(axis=0)
    dqd += dh1 @ p.box_w1.T
    return g, dqd, demb, dbias


# ---------------------------------------------------------------------------
# inference pipelines


@dataclass(frozen=True)
class Detection:
    category_id: int
    score: float
    box: tuple

    def to_record(self, names=None) -> dict:
        cat = names[self.category_id] if names is not None else self.category_id
        return {"category": cat, "score": self.score, "box": list(self.box)}


def _sort_detections(dets):
    return sorted(dets, key=lambda t: (-t.score, t.category_id, t.box))


def predict_queries(model, feats, category_ids, n_per_class: int, use_cem: bool = True):
    """Run the head for one image on a given category list.

    Returns ``(class_ids, scores, boxes)``; for a K-way model ``scores`` is
    (Q, K) and ``class_ids`` the query's assigned category.
    """
    feats = np.asarray(feats, dtype=np.float64)
    E = model.embeddings
    if use_cem:
        _, E2 = cem_forward(E, feats, model.cem)
    else:
        E2 = E
    refs = grid_references(len(category_ids), n_per_class)
    qs = assign_queries(category_ids, E2, model.base_content, refs, n_per_class)
    qd = toy_decoder(qs, feats, model.head)
    if getattr(model, "mode", "group") == "standard_merged":
        scores, boxes = head_predict_all(qd, E, refs, model.head, model.cem.bias)
    else:
        scores, boxes = head_predict(qd, E[qs.class_ids], refs, model.head, model.cem.bias[qs.class_ids])
    return qs.class_ids, scores, boxes


def _collect(model, class_ids, scores, boxes, score_threshold, allowed=None):
    dets = []
    for j in range(len(class_ids)):
        if scores.ndim == 2:
            row = scores[j] if allowed is None else np.where(allowed, scores[j], -np.inf)
            cat = int(np.argmax(row))
            sc = float(scores[j, cat])
        else:
            cat, sc = int(class_ids[j]), float(scores[j])
        if sc > score_threshold:
            dets.append(Detection(cat, sc, tuple(float(x) for x in boxes[j])))
    return _sort_detections(dets)


def detect(model, feats, top_k: int, n_per_class: int, score_threshold: float = 0.3,
           use_cem: bool = True) -> list[Detection]:
    """CEM picks TopK categories, their queries predict, low scores drop out.

    With ``use_cem=False`` the category extraction is bypassed entirely:
    every category gets queries built from the raw embedding table.
    """
    if use_cem:
        scores, _ = cem_forward(model.embeddings, feats, model.cem)
        cats = topk_select(scores, top_k)
    else:
        cats = list(range(model.embeddings.shape[0]))
    cls, sc, bx = predict_queries(model, feats, cats, n_per_class, use_cem=use_cem)
    return _collect(model, cls, sc, bx, score_threshold)


def detect_with_categories(model, feats, category_ids, n_per_class: int,
                           score_threshold: float = 0.3, top_k: int | None = None) -> list[Detection]:
    """Language-aware mode: the caller names the categories to look for."""
    K = model.embeddings.shape[0]
    cats = [int(c) for c in category_ids]
    for c in cats:
        if not 0 <= c < K:
            raise KeyError(f"unknown category id {c}")
    if top_k is not None and len(cats) > top_k:
        raise ValueError(f"{len(cats)} categories exceed top_k={top_k}")
    if not cats:
        return []
    cls, sc, bx = predict_queries(model, feats, cats, n_per_class)
    allowed = np.zeros(K, dtype=bool)
    allowed[cats] = True
    return _collect(model, cls, sc, bx, score_threshold, allowed)
