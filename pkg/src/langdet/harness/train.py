"""Joint training of CEM, toy decoder and head on synthetic scenes."""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np

from ..cem import SGD, Adam, cem_forward, multi_hot, topk_select, training_category_set
from ..head import grid_references
from ..losses import asymmetric_loss_arrays, clamp_prob, EPS
from ..matching import match_group, match_standard, training_loss, training_loss_standard
from ..model import Model, backward, forward
from .config import BenchConfig
from .data import Benchmark, features_for, generate_datasets
from .evaluate import evaluate_model

log = logging.getLogger(__name__)

MONITOR_SCENES = 64


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``model`` holds the last finite parameters."""

    def __init__(self, msg, model, step):
        super().__init__(msg)
        self.model = model
        self.step = step


class SupervisionLeak(AssertionError):
    pass


@dataclass
class Prepared:
    bench: Benchmark
    train_feats: np.ndarray
    test_feats: np.ndarray
    masks: np.ndarray  # (n_datasets, K) taxonomy masks


def prepare(cfg: BenchConfig, bench: Benchmark | None = None) -> Prepared:
    bench = bench or generate_datasets(cfg)
    rows = bench.table.rows
    masks = np.stack([bench.labelspace.taxonomy_mask(i) for i in range(len(bench.labelspace.datasets))])
    return Prepared(bench, features_for(bench.train, rows, cfg.noise_sigma),
                    features_for(bench.test, rows, cfg.noise_sigma), masks)


def _jitter_refs(cfg, scene, cats, rng):
    refs = grid_references(len(cats), cfg.n_per_class)
    for gi, c in enumerate(cats):
        boxes = [b for cc, b in scene.objects if cc == c]
        for k, b in enumerate(boxes[:cfg.n_per_class]):
            j = np.asarray(b) * (1.0 + rng.uniform(-0.1, 0.1, size=4))
            j[:2] = np.clip(j[:2], 0.0, 1.0)
            j[2:] = np.clip(j[2:], 1e-3, 1.0)
            refs[gi * cfg.n_per_class + k] = j
    return refs


def select_categories(cfg: BenchConfig, scene, scores, mask) -> list[int]:
    allowed = mask if cfg.matching_mode == "group" else None
    if cfg.teacher_forcing:
        return training_category_set(scene.classes, scores, cfg.top_k, allowed)
    if allowed is not None:
        scores = np.where(allowed > 0, scores, scores - 2.0)
    return topk_select(scores, cfg.top_k)


def batch_loss_and_grads(model: Model, feats, scenes, cfg: BenchConfig, masks, rng=None,
                         categories=None, refs=None):
    """Loss of a batch and its gradient tree.

    Category lists and reference boxes are chosen here unless given, so the
    same call can be replayed with fixed choices for gradient checks.
    Returns ``(loss, grads, (categories, refs))``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    B = len(scenes)
    if categories is None:
        pre, _ = cem_forward(model.embeddings, feats, model.cem)
        categories = [select_categories(cfg, s, pre[b], masks[s.dataset_id]) for b, s in enumerate(scenes)]
    if refs is None:
        if cfg.ref_policy == "jitter":
            rng = rng or np.random.default_rng(0)
            refs = np.stack([_jitter_refs(cfg, s, c, rng) for s, c in zip(scenes, categories)])
        else:
            refs = np.broadcast_to(grid_references(len(categories[0]), cfg.n_per_class),
                                   (B, len(categories[0]) * cfg.n_per_class, 4))
    fw = forward(model, feats, np.asarray(categories), refs, cfg.n_per_class)

    K = model.K
    targets = np.stack([multi_hot(s.classes, K) for s in scenes])
    for b, s in enumerate(scenes):
        if np.any(targets[b] * (1.0 - masks[s.dataset_id])):
            raise SupervisionLeak(f"scene {s.image_id} has positives outside dataset {s.dataset_id}")
    if cfg.matching_mode == "group":
        asl_mask = masks[[s.dataset_id for s in scenes]]
    else:
        asl_mask = None
    S = fw.cat_scores
    asl_v, asl_g = asymmetric_loss_arrays(clamp_prob(S), targets, cfg.asl, cfg.mu_asl, asl_mask)
    asl_g = asl_g * ((S > EPS) & (S < 1 - EPS))
    total = float(asl_v.sum())

    dscores = np.zeros_like(fw.scores)
    dboxes = np.zeros_like(fw.boxes)
    w, fc = cfg.weights, cfg.focal
    for b, s in enumerate(scenes):
        sc = fw.scores[b]
        p = clamp_prob(sc)
        live = (sc > EPS) & (sc < 1 - EPS)
        if cfg.matching_mode == "group":
            m = match_group(fw.class_ids[b], p, fw.boxes[b], s.gt_classes, s.gt_boxes, w, fc)
            lg = training_loss(m, p, fw.boxes[b], s.gt_boxes, w, fc, cfg.supervise_negatives)
        else:
            a = match_standard(p, fw.boxes[b], s.gt_classes, s.gt_boxes, w, fc)
            lg = training_loss_standard(a, p, fw.boxes[b], s.gt_classes, s.gt_boxes, w, fc,
                                        None, cfg.supervise_negatives)
        total += lg.value
        dscores[b] = lg.grad_probs * live
        dboxes[b] = lg.grad_boxes
    grads = backward(model, fw, asl_g / B, dscores / B, dboxes / B)
    return total / B, grads, (categories, refs)


def monitor_loss(model, prep: Prepared, cfg: BenchConfig) -> float:
    n = min(MONITOR_SCENES, len(prep.bench.train))
    loss, _, _ = batch_loss_and_grads(model, prep.train_feats[:n], prep.bench.train[:n], cfg, prep.masks,
                                      rng=np.random.default_rng([cfg.seed, 3]))
    return loss


def train_model(cfg: BenchConfig, prep: Prepared, progress=None):
    """Returns ``(model, loss_curve, steps)``; the curve starts at the initial loss."""
    bench = prep.bench
    model = Model.init(bench.table.rows, seed=cfg.seed, learnable_embeddings=cfg.learnable_embeddings,
                       mode=cfg.matching_mode)
    if cfg.optimizer == "adam":
        opt = Adam(cfg.lr, clip_norm=cfg.clip_norm or None)
    else:
        opt = SGD(cfg.lr, cfg.momentum, cfg.clip_norm or None)
    rng = np.random.default_rng([cfg.seed, 2])
    skip = () if cfg.learnable_embeddings else ("embeddings",)
    curve = [monitor_loss(model, prep, cfg)]
    steps = 0
    n = len(bench.train)
    for epoch in range(cfg.epochs):
        if cfg.max_steps and steps >= cfg.max_steps:
            break
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps and steps >= cfg.max_steps:
                break
            idx = perm[start:start + cfg.batch_size]
            loss, grads, _ = batch_loss_and_grads(model, prep.train_feats[idx], [bench.train[i] for i in idx],
                                                  cfg, prep.masks, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {steps}", model, steps)
            opt.step(model, grads, skip=skip)
            model.bump()
            steps += 1
        curve.append(monitor_loss(model, prep, cfg))
        if progress:
            progress(epoch, steps, curve[-1])
        log.info("epoch %d step %d monitor loss %.5f", epoch, steps, curve[-1])
    return model, curve, steps


def build_report(cfg: BenchConfig, model, prep: Prepared, curve, steps) -> dict:
    bench = prep.bench
    ev = evaluate_model(model, prep.test_feats, bench.test, bench.labelspace, cfg.top_k,
                        cfg.n_per_class, cfg.score_threshold)
    return {
        "config": cfg.to_dict(),
        "steps": steps,
        "loss_curve": curve,
        "aliased_classes": [bench.labelspace.names[c] for g in bench.aliases for c in g],
        "eval": ev,
    }


def run_train(cfg: BenchConfig, bench: Benchmark | None = None, progress=None):
    """Train from scratch under ``cfg``; returns ``(model, report, prepared)``."""
    cfg.validate()
    prep = prepare(cfg, bench)
    model, curve, steps = train_model(cfg, prep, progress)
    return model, build_report(cfg, model, prep, curve, steps), prep
