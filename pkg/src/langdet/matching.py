"""Exact assignment, standard and class-grouped bipartite matching.

The assignment solver is backed by the compiled ``langdet._hungarian``
kernel when it is importable; otherwise the pure-Python twin in
``langdet._hungarian_py`` is used. Set ``LANGDET_PURE_PYTHON=1`` to force
the fallback. Both follow the same arithmetic and return identical pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import os

import numpy as np

from . import _hungarian_py
from .geometry import MatchWeights, box_cost_arrays, pairwise_box_cost
from .losses import FocalConfig, binary_focal_arrays

log = logging.getLogger(__name__)

try:
    if os.environ.get("LANGDET_PURE_PYTHON"):
        raise ImportError("pure-Python solver forced")
    from . import _hungarian as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"

__all__ = [
    "BACKEND",
    "MatchWeights",
    "InfeasibleAssignment",
    "Assignment",
    "ClassGroup",
    "GroupedMatch",
    "MatchResult",
    "PairLossGrad",
    "hungarian",
    "build_cost_standard",
    "match_standard",
    "partition_by_class",
    "match_group",
    "training_loss",
    "training_loss_standard",
]


class InfeasibleAssignment(ValueError):
    """More rows than columns: not every ground truth can be covered."""


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float = 0.0

    @property
    def gt_indices(self) -> list[int]:
        return [i for i, _ in self.pairs]

    @property
    def query_indices(self) -> list[int]:
        return [j for _, j in self.pairs]


def _solve_rows(cost: np.ndarray, backend: str | None) -> np.ndarray:
    n, m = cost.shape
    out = np.zeros(n, dtype=np.intp)
    use = backend or BACKEND
    if use == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled solver not built; reinstall the package or use backend='python'")
        _compiled.solve(np.ascontiguousarray(cost, dtype=np.float64), out)
    elif use == "python":
        _hungarian_py.solve(cost.tolist(), out)
    else:
        raise ValueError(f"unknown backend {use!r}")
    return out


def hungarian(cost, backend: str | None = None) -> Assignment:
    """Minimum-cost one-to-one assignment of every row to a distinct column.

    Rows are ground truths, columns queries. Requires ``rows <= cols``.
    Deterministic: equal-cost alternatives resolve toward lower column
    indices in the order the augmenting sweeps visit them.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if n > m:
        raise InfeasibleAssignment(f"{n} rows cannot be assigned to {m} columns")
    if n == 0:
        return Assignment([], 0.0)
    cols = _solve_rows(cost, backend)
    pairs = [(i, int(cols[i])) for i in range(n)]
    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs, total)


def _hungarian_partial(cost: np.ndarray) -> tuple[Assignment, list[int]]:
    """Assignment tolerant of rows > cols: unassigned rows are returned."""
    n, m = cost.shape
    if n <= m:
        return hungarian(cost), []
    if m == 0:
        return Assignment([], 0.0), list(range(n))
    t = hungarian(cost.T)
    pairs = sorted((i, j) for j, i in t.pairs)
    taken = {i for i, _ in pairs}
    return Assignment(pairs, t.total_cost), [i for i in range(n) if i not in taken]


# ---------------------------------------------------------------------------
# standard matching over K-way per-class sigmoid scores


def build_cost_standard(probs, boxes, gt_classes, gt_boxes,
                        w: MatchWeights = MatchWeights(), cfg: FocalConfig = FocalConfig()) -> np.ndarray:
    """(M, N) matching cost: focal classification term plus box cost.

    ``probs`` is (N, K) per-class sigmoid scores, ``boxes`` (N, 4) center form.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if probs.ndim != 2:
        raise ValueError("probs must be (N, K)")
    k = probs.shape[1]
    if len(gt_classes) and (gt_classes.min() < 0 or gt_classes.max() >= k):
        raise IndexError(f"gt class out of range for K={k}")
    if len(gt_classes) == 0:
        return np.zeros((0, len(probs)))
    picked = probs[:, gt_classes].T  # (M, N)
    cls_cost, _ = binary_focal_arrays(picked, 1, cfg)
    return w.mu_cls * cls_cost + pairwise_box_cost(boxes, gt_boxes, w)


def match_standard(probs, boxes, gt_classes, gt_boxes,
                   w: MatchWeights = MatchWeights(), cfg: FocalConfig = FocalConfig()) -> Assignment:
    return hungarian(build_cost_standard(probs, boxes, gt_classes, gt_boxes, w, cfg))


# ---------------------------------------------------------------------------
# group matching over class-assigned queries


@dataclass
class ClassGroup:
    class_id: int
    gt_indices: list[int]
    query_indices: list[int]


@dataclass
class GroupedMatch:
    class_id: int
    gt_indices: list[int]
    query_indices: list[int]
    assignment: Assignment
    overflow: list[int] = field(default_factory=list)


@dataclass
class MatchResult:
    groups: list[GroupedMatch]
    orphaned: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return sorted(p for g in self.groups for p in g.assignment.pairs)

    @property
    def total_cost(self) -> float:
        return sum(g.assignment.total_cost for g in self.groups)


def _query_classes(queries) -> np.ndarray:
    return np.asarray(getattr(queries, "class_ids", queries), dtype=np.int64)


def partition_by_class(queries, gt_classes) -> tuple[list[ClassGroup], list[int]]:
    """Split queries and ground truths into per-class groups.

    ``queries`` is a QuerySet or a sequence of per-query class ids. Groups are
    ordered by first appearance of the class in the query list. Ground truths
    whose class has no query are returned separately as orphans.
    """
    qc = _query_classes(queries)
    gt_classes = [int(c) for c in gt_classes]
    order: list[int] = []
    by_class: dict[int, list[int]] = {}
    for j, c in enumerate(qc.tolist()):
        if c not in by_class:
            by_class[c] = []
            order.append(c)
        by_class[c].append(j)
    gts_by_class: dict[int, list[int]] = {c: [] for c in order}
    orphaned = []
    for i, c in enumerate(gt_classes):
        if c in gts_by_class:
            gts_by_class[c].append(i)
        else:
            orphaned.append(i)
    groups = [ClassGroup(c, gts_by_class[c], by_class[c]) for c in order]
    return groups, orphaned


def match_group(queries, probs, boxes, gt_classes, gt_boxes,
                w: MatchWeights = MatchWeights(), cfg: FocalConfig = FocalConfig()) -> MatchResult:
    """Hungarian matching restricted to each class's own queries.

    ``probs`` holds one matchability score per query (for its assigned class).
    A group with more ground truths than queries matches as many as it can at
    minimum cost and lists the rest in ``overflow`` (also added to orphans).
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    qc = _query_classes(queries)
    groups, orphaned = partition_by_class(qc, gt_classes)
    if orphaned:
        log.debug("%d ground truths have no query group: %s", len(orphaned), orphaned)
    match_cost, _ = binary_focal_arrays(probs, 1, cfg)
    out = []
    for g in groups:
        qi = np.asarray(g.query_indices, dtype=np.int64)
        gi = np.asarray(g.gt_indices, dtype=np.int64)
        if len(gi) == 0:
            out.append(GroupedMatch(g.class_id, g.gt_indices, g.query_indices, Assignment([], 0.0)))
            continue
        cost = w.mu_cls * match_cost[qi][None, :] + pairwise_box_cost(boxes[qi], gt_boxes[gi], w)
        local, over = _hungarian_partial(cost)
        pairs = [(int(gi[a]), int(qi[b])) for a, b in local.pairs]
        overflow = [int(gi[a]) for a in over]
        if overflow:
            log.warning("class %d: %d ground truths exceed %d queries; %d left unmatched",
                        g.class_id, len(gi), len(qi), len(overflow))
            orphaned.extend(overflow)
        out.append(GroupedMatch(g.class_id, g.gt_indices, g.query_indices,
                                Assignment(pairs, local.total_cost), overflow))
    gt_classes = [int(c) for c in gt_classes]
    for gm in out:
        for i, j in gm.assignment.pairs:
            assert gt_classes[i] == gm.class_id and qc[j] == gm.class_id, "match crossed class groups"
    return MatchResult(out, sorted(orphaned))


@dataclass
class PairLossGrad:
    """Loss value with gradients w.r.t. query probabilities and boxes."""

    value: float
    grad_probs: np.ndarray
    grad_boxes: np.ndarray


def training_loss(matches: MatchResult, probs, boxes, gt_boxes,
                  w: MatchWeights = MatchWeights(), cfg: FocalConfig = FocalConfig(),
                  supervise_negatives: bool = True) -> PairLossGrad:
    """Matched pairs pay matchability focal (target 1) plus box cost;
    unmatched queries pay focal with target 0 when ``supervise_negatives``."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pairs = [p for g in matches for p in g.assignment.pairs]
    target = np.zeros(len(probs))
    weight = np.full(len(probs), 1.0 if supervise_negatives else 0.0)
    gi = np.array([i for i, _ in pairs], dtype=np.int64)
    qi = np.array([j for _, j in pairs], dtype=np.int64)
    target[qi] = 1.0
    weight[qi] = 1.0
    fv, fg = binary_focal_arrays(probs, target, cfg)
    value = w.mu_cls * float((fv * weight).sum())
    grad_probs = w.mu_cls * fg * weight
    grad_boxes = np.zeros_like(boxes)
    if len(pairs):
        bc, bg = box_cost_arrays(boxes[qi], gt_boxes[gi], w)
        value += float(bc.sum())
        grad_boxes[qi] = bg
    return PairLossGrad(value, grad_probs, grad_boxes)


def training_loss_standard(assignment: Assignment, probs, boxes, gt_classes, gt_boxes,
                           w: MatchWeights = MatchWeights(), cfg: FocalConfig = FocalConfig(),
                           class_mask=None, supervise_negatives: bool = True) -> PairLossGrad:
    """Sigmoid focal loss over all K classes of every query plus matched box cost.

    ``class_mask`` (K,) limits which classes receive negative supervision.
    """
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, k = probs.shape
    target = np.zeros((n, k))
    weight = np.ones((n, k)) if supervise_negatives else np.zeros((n, k))
    if class_mask is not None:
        weight = weight * np.asarray(class_mask, dtype=np.float64)[None, :]
    gi = np.array(assignment.gt_indices, dtype=np.int64)
    qi = np.array(assignment.query_indices, dtype=np.int64)
    if len(qi):
        cls = np.asarray(gt_classes, dtype=np.int64)[gi]
        target[qi, cls] = 1.0
        if not supervise_negatives:
            weight[qi] = 1.0 if class_mask is None else np.asarray(class_mask, dtype=np.float64)
        weight[qi, cls] = 1.0
    fv, fg = binary_focal_arrays(probs, target, cfg)
    value = w.mu_cls * float((fv * weight).sum())
    grad_probs = w.mu_cls * fg * weight
    grad_boxes = np.zeros_like(boxes)
    if len(qi):
        bc, bg = box_cost_arrays(boxes[qi], gt_boxes[gi], w)
        value += float(bc.sum())
        grad_boxes[qi] = bg
    return PairLossGrad(value, grad_probs, grad_boxes)
