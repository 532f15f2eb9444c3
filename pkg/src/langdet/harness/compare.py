"""Group matching against standard matching over the naively merged label space."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import BenchConfig
from .data import generate_datasets
from .train import run_train


def _mean(vals):
    vals = [v for v in vals if v == v]
    return float(np.mean(vals)) if vals else None


def compare_modes(cfg: BenchConfig, progress=None):
    """Train both modes on one generated benchmark and diff their per-class AP.

    Aliased duplicates stay distinct competing classes in the merged mode.
    Returns ``(report, {mode: model})``.
    """
    cfg.validate()
    bench = generate_datasets(cfg)
    names = bench.labelspace.names
    aliased = sorted(names[c] for c in bench.aliased_ids)
    runs, models = {}, {}
    for mode in ("group", "standard_merged"):
        mcfg = replace(cfg, matching_mode=mode)
        cb = (lambda e, s, l, m=mode: progress(m, e, s, l)) if progress else None
        model, report, _ = run_train(mcfg, bench, cb)
        runs[mode] = report
        models[mode] = model
    g = runs["group"]["eval"]["per_class_ap"]
    s = runs["standard_merged"]["eval"]["per_class_ap"]
    per_class = []
    for name in sorted(set(g) | set(s)):
        a, b = g.get(name), s.get(name)
        per_class.append({
            "class": name,
            "aliased": name in aliased,
            "group_ap": a,
            "standard_ap": b,
            "delta": None if a is None or b is None else a - b,
        })
    summary = {}
    for mode, ap in (("group", g), ("standard_merged", s)):
        summary[mode] = {
            "seed": runs[mode]["config"]["seed"],
            "mean_ap": runs[mode]["eval"]["mean_ap"],
            "aliased_mean_ap": _mean(ap[n] for n in aliased if n in ap),
            "exclusive_mean_ap": _mean(v for n, v in ap.items() if n not in aliased),
            "multilabel_recall": runs[mode]["eval"]["multilabel_recall"],
        }
    delta = summary["group"]["mean_ap"] - summary["standard_merged"]["mean_ap"]
    report = {
        "configs": {m: r["config"] for m, r in runs.items()},
        "aliased_classes": aliased,
        "summary": summary,
        "delta_mean_ap": delta,
        "delta_aliased_mean_ap": (None if not aliased else
                                  summary["group"]["aliased_mean_ap"] - summary["standard_merged"]["aliased_mean_ap"]),
        "per_class": per_class,
        "runs": runs,
    }
    return report, models
