"""Command line entry point: ``langdet {gen,train,eval,compare,detect}``.

Every subcommand writes into ``--out`` (or reads from ``--run``). Reports are
deterministic for a fixed config; wall-clock time goes to ``timing.json`` so
that ``report.json`` stays byte-identical across reruns.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
from pathlib import Path
import sys
import time

import numpy as np

from ..cem import ConfigError as CemConfigError
from ..head import detect, detect_with_categories
from ..labelspace import EmbeddingLoadError, LabelSpace, RegistrationError, load_embeddings, save_embeddings
from ..model import CheckpointError, load_checkpoint, save_checkpoint
from .compare import compare_modes
from .config import MATCHING_MODES, OPTIMIZERS, REF_POLICIES, BenchConfig, ConfigError
from .data import generate_datasets, read_scenes, synthesize_features, write_scenes
from .evaluate import evaluate_model
from .train import TrainingDiverged, run_train

log = logging.getLogger("langdet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# (flag, BenchConfig field, type)
CONFIG_FLAGS = [
    ("--seed", "seed", int),
    ("--n-datasets", "n_datasets", int),
    ("--classes-per-dataset", "classes_per_dataset", int),
    ("--alias-fraction", "alias_fraction", float),
    ("--images-per-dataset", "images_per_dataset", int),
    ("--eval-images-per-dataset", "eval_images_per_dataset", int),
    ("--grid", "grid", int),
    ("--d", "d", int),
    ("--topk", "top_k", int),
    ("--queries-per-class", "n_per_class", int),
    ("--max-objects", "max_objects", int),
    ("--epochs", "epochs", int),
    ("--max-steps", "max_steps", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--optimizer", "optimizer", str),
    ("--mu-asl", "mu_asl", float),
    ("--matching-mode", "matching_mode", str),
    ("--ref-policy", "ref_policy", str),
    ("--noise-sigma", "noise_sigma", float),
]
CHOICES = {"matching_mode": MATCHING_MODES, "optimizer": OPTIMIZERS, "ref_policy": REF_POLICIES}


def _clean(obj):
    """NaN becomes null so the output is strict JSON."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _add_config_flags(p):
    for flag, field, typ in CONFIG_FLAGS:
        p.add_argument(flag, dest=field, type=typ, default=None, choices=CHOICES.get(field))
    p.add_argument("--no-negatives", dest="supervise_negatives", action="store_false", default=None,
                   help="drop the 0-target focal term on unmatched queries")
    p.add_argument("--config", type=Path, help="JSON config; explicit flags override it")


def config_from_args(args) -> BenchConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(args.config.read_text())
        base = base.get("config", base)
    for _, field, _ in CONFIG_FLAGS:
        v = getattr(args, field, None)
        if v is not None:
            base[field] = v
    if getattr(args, "supervise_negatives", None) is False:
        base["supervise_negatives"] = False
    return BenchConfig.from_dict(base).validate()


def _write_benchmark(out: Path, bench) -> None:
    write_json(out / "labelspace.json", bench.labelspace.to_json())
    save_embeddings(bench.table, out / "embeddings.txt")
    write_scenes(bench.train, out / "train.jsonl")
    write_scenes(bench.test, out / "test.jsonl")
    write_json(out / "aliases.json", [[bench.labelspace.names[c] for c in g] for g in bench.aliases])


def _per_class_rows(report, labelspace, aliased):
    rows = []
    for name, ap in report["eval"]["per_class_ap"].items():
        gid = labelspace.lookup(name)
        ds = sorted(labelspace.categories[gid].source_datasets)
        rows.append([name, ";".join(labelspace.datasets[i].name for i in ds), int(name in aliased),
                     "" if ap is None or ap != ap else repr(float(ap))])
    return rows


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _progress(epoch, steps, loss):
    log.info("epoch %d  step %d  monitor loss %.4f", epoch, steps, loss)


def cmd_gen(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = generate_datasets(cfg)
    _write_benchmark(out, bench)
    write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(bench.train)} train and {len(bench.test)} test scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    bench = generate_datasets(cfg)
    _write_benchmark(out, bench)
    write_json(out / "config.json", cfg.to_dict())
    try:
        model, report, prep = run_train(cfg, bench, _progress)
    except TrainingDiverged as exc:
        save_checkpoint(exc.model, out / "last_good.ckpt")
        print(f"training diverged at step {exc.step}; last finite parameters in {out / 'last_good.ckpt'}",
              file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(model, out / "model.ckpt")
    write_json(out / "report.json", report)
    names = {bench.labelspace.names[c] for c in bench.aliased_ids}
    _write_csv(out / "per_class.csv", ["class", "dataset", "aliased", "ap"],
               _per_class_rows(report, bench.labelspace, names))
    write_json(out / "timing.json", {"train_seconds": time.perf_counter() - t0, "steps": report["steps"]})
    ev = report["eval"]
    print(f"recall {ev['multilabel_recall']:.4f}  precision {ev['multilabel_precision']:.4f}  "
          f"mAP@0.5 {ev['mean_ap']:.4f}  ({report['steps']} steps)")
    return EXIT_OK


def _load_run(run: Path):
    cfg = BenchConfig.from_dict(json.loads((run / "config.json").read_text())).validate()
    ls = LabelSpace.from_json(json.loads((run / "labelspace.json").read_text()))
    table = load_embeddings(run / "embeddings.txt", ls, expected_d=cfg.d)
    ckpt = run / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"{run} has no model.ckpt; run `langdet train` first")
    return cfg, ls, table, load_checkpoint(ckpt)


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg, ls, table, model = _load_run(run)
    scenes = read_scenes(args.scenes or run / "test.jsonl")
    feats = np.stack([synthesize_features(s, table.rows, cfg.noise_sigma) for s in scenes])
    top_k = args.topk or cfg.top_k
    ev = evaluate_model(model, feats, scenes, ls, top_k, cfg.n_per_class, args.threshold,
                        use_cem=not args.no_cem)
    out = Path(args.out) if args.out else run / "eval.json"
    write_json(out, ev)
    print(f"recall {ev['multilabel_recall']:.4f}  mAP@0.5 {ev['mean_ap']:.4f}  -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report, models = compare_modes(cfg, lambda m, e, s, l: log.info("[%s] epoch %d step %d loss %.4f", m, e, s, l))
    for mode, model in models.items():
        save_checkpoint(model, out / f"{mode}.ckpt")
    write_json(out / "report.json", report)
    _write_csv(out / "per_class.csv", ["class", "aliased", "group_ap", "standard_ap", "delta"],
               [[r["class"], int(r["aliased"])] + ["" if r[k] is None else repr(float(r[k]))
                                                   for k in ("group_ap", "standard_ap", "delta")]
                for r in report["per_class"]])
    write_json(out / "timing.json", {"compare_seconds": time.perf_counter() - t0})
    s = report["summary"]
    for mode in ("group", "standard_merged"):
        al = s[mode]["aliased_mean_ap"]
        print(f"{mode:16s} mAP {s[mode]['mean_ap']:.4f}  aliased mAP {'n/a' if al is None else f'{al:.4f}'}")
    return EXIT_OK


def cmd_detect(args) -> int:
    run = Path(args.run)
    cfg, ls, table, model = _load_run(run)
    scenes = read_scenes(args.scenes or run / "test.jsonl")
    cats = None
    if args.categories:
        try:
            cats = [ls.lookup(c) for c in args.categories.split(",") if c.strip()]
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for s in scenes:
            f = synthesize_features(s, table.rows, cfg.noise_sigma)
            if cats is None:
                dets = detect(model, f, cfg.top_k, cfg.n_per_class, args.threshold)
            else:
                dets = detect_with_categories(model, f, cats, cfg.n_per_class, args.threshold)
            for det in dets:
                rec = {"image_id": s.image_id, **det.to_record(ls.names)}
                sink.write(json.dumps(rec) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="langdet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="write synthetic taxonomies, embeddings and scenes")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="generate data, train, evaluate, checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a scene file")
    p.add_argument("--run", required=True, help="directory written by `train`")
    p.add_argument("--scenes", help="JSON-lines scenes (default: the run's test split)")
    p.add_argument("--topk", type=int)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--no-cem", action="store_true", help="query every category, bypassing CEM")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="group vs standard matching on one benchmark")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect", help="emit detections as JSON lines")
    p.add_argument("--run", required=True)
    p.add_argument("--scenes")
    p.add_argument("--categories", help="comma-separated names: language-aware mode")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CemConfigError, RegistrationError, EmbeddingLoadError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
