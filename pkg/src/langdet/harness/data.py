"""Synthetic multi-dataset scenes with deliberately conflicting taxonomies.

Every dataset names its own classes. A fraction of concepts is shared
across datasets under different names ("aliases"), whose embeddings are
forced to be nearly parallel, the way a text encoder would embed
"football" and "soccer". Scenes carrying an aliased concept may also show an
object of another dataset's exclusive class that this dataset never labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from ..labelspace import EmbeddingTable, LabelSpace, alias_embedding, synth_embedding
from ..nn import positional_encoding
from .config import BenchConfig, ConfigError

ALIAS_COSINE = 0.97
MAX_COSINE = 0.5
MIN_SIDE, MAX_SIDE = 0.15, 0.45


@dataclass
class Scene:
    image_id: int
    dataset_id: int
    objects: list  # (global category id, [cx, cy, w, h])
    grid: tuple
    noise_seed: int
    distractors: list = field(default_factory=list)

    @property
    def classes(self) -> list[int]:
        return sorted({c for c, _ in self.objects})

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=np.int64)

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.array([b for _, b in self.objects], dtype=np.float64).reshape(-1, 4)

    def to_json(self) -> str:
        obj = {
            "image_id": self.image_id,
            "dataset_id": self.dataset_id,
            "grid": list(self.grid),
            "noise_seed": self.noise_seed,
            "objects": [{"category": c, "box": [float(x) for x in b]} for c, b in self.objects],
            "distractors": [{"category": c, "box": [float(x) for x in b]} for c, b in self.distractors],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        o = json.loads(line)
        return cls(
            o["image_id"], o["dataset_id"],
            [(x["category"], list(x["box"])) for x in o["objects"]],
            tuple(o["grid"]), o["noise_seed"],
            [(x["category"], list(x["box"])) for x in o.get("distractors", [])],
        )


@dataclass
class Benchmark:
    labelspace: LabelSpace
    table: EmbeddingTable
    aliases: list  # groups of global ids naming one concept
    train: list[Scene]
    test: list[Scene]

    @property
    def aliased_ids(self) -> set[int]:
        return {c for g in self.aliases for c in g}

    def exclusive_ids(self, dataset_id: int) -> list[int]:
        al = self.aliased_ids
        return [c for c in self.labelspace.datasets[dataset_id].global_ids if c not in al]


def class_name(dataset_id: int, local: int) -> str:
    return f"d{dataset_id} class {local}"


def build_taxonomies(cfg: BenchConfig):
    """Label space, appearance embeddings and alias groups for ``cfg``."""
    n_alias = int(round(cfg.alias_fraction * cfg.classes_per_dataset))
    ls = LabelSpace()
    for i in range(cfg.n_datasets):
        ls.register_dataset(f"synth{i}", [class_name(i, j) for j in range(cfg.classes_per_dataset)])
    aliases = [[ls.lookup(class_name(i, a)) for i in range(cfg.n_datasets)] for a in range(n_alias)]
    group_of = {c: gi for gi, g in enumerate(aliases) for c in g}

    rows: dict[int, np.ndarray] = {}

    def clashes(v, gid):
        for other, u in rows.items():
            same = gid in group_of and group_of.get(other) == group_of[gid]
            if not same and abs(float(u @ v)) >= MAX_COSINE:
                return True
        return False

    for gid, name in enumerate(ls.names):
        grp = group_of.get(gid)
        base = rows.get(aliases[grp][0]) if grp is not None else None
        for salt in range(1000):
            if base is not None:
                v = alias_embedding(base, f"{name}#{salt}", cfg.seed, ALIAS_COSINE)
            else:
                v = synth_embedding(name, cfg.d, cfg.seed, salt=str(salt) if salt else "")
            if not clashes(v, gid):
                break
        else:
            raise ConfigError(f"cannot place {ls.K} well-separated embeddings in d={cfg.d}")
        rows[gid] = v
    table = EmbeddingTable(np.stack([rows[i] for i in range(ls.K)]), ls.names, cfg.learnable_embeddings)
    return ls, table, aliases


def _sample_box(rng, grid):
    H, W = grid
    while True:
        w, h = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = [float(cx), float(cy), float(w), float(h)]
        if cell_mask(box, grid).any():
            return box


def _sample_scene(rng, cfg, bench_ls, dataset_id, image_id, aliased, exclusive_other):
    classes = bench_ls.datasets[dataset_id].global_ids
    n_obj = int(rng.integers(1, cfg.max_objects_eff + 1))
    objects = []
    counts: dict[int, int] = {}
    while len(objects) < n_obj:
        c = int(classes[rng.integers(len(classes))])
        if counts.get(c, 0) >= cfg.n_per_class:
            continue
        counts[c] = counts.get(c, 0) + 1
        objects.append((c, _sample_box(rng, (cfg.grid, cfg.grid))))
    distractors = []
    if exclusive_other and any(c in aliased for c, _ in objects) and rng.random() < cfg.distractor_prob:
        c = int(exclusive_other[rng.integers(len(exclusive_other))])
        distractors.append((c, _sample_box(rng, (cfg.grid, cfg.grid))))
    seed = int(rng.integers(2**31 - 1))
    return Scene(image_id, dataset_id, objects, (cfg.grid, cfg.grid), seed, distractors)


def generate_datasets(cfg: BenchConfig) -> Benchmark:
    """Deterministic taxonomies plus train/test scenes for ``cfg``."""
    cfg.validate()
    if cfg.max_objects_eff > cfg.classes_per_dataset * cfg.n_per_class:
        raise ConfigError("max_objects cannot be placed under the per-class query limit")
    ls, table, aliases = build_taxonomies(cfg)
    aliased = {c for g in aliases for c in g}
    rng = np.random.default_rng([cfg.seed, 1])
    splits = []
    image_id = 0
    for n_img in (cfg.images_per_dataset, cfg.eval_images_per_dataset):
        scenes = []
        for ds in range(cfg.n_datasets):
            others = [c for o in range(cfg.n_datasets) if o != ds
                      for c in ls.datasets[o].global_ids if c not in aliased]
            for _ in range(n_img):
                scenes.append(_sample_scene(rng, cfg, ls, ds, image_id, aliased, others))
                image_id += 1
        splits.append(scenes)
    return Benchmark(ls, table, aliases, splits[0], splits[1])


# ---------------------------------------------------------------------------
# features


def cell_centers(grid) -> np.ndarray:
    """(H*W, 2) cell centres, row-major (y outer, x inner)."""
    H, W = grid
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def cell_mask(box, grid) -> np.ndarray:
    c = cell_centers(grid)
    cx, cy, w, h = box
    return (np.abs(c[:, 0] - cx) <= w / 2) & (np.abs(c[:, 1] - cy) <= h / 2)


def positional_grid(grid, d: int) -> np.ndarray:
    return positional_encoding(cell_centers(grid), d)


def object_field(scene: Scene, appearance: np.ndarray) -> np.ndarray:
    """Sum of embeddings of every object (labeled or not) covering each cell."""
    d = appearance.shape[1]
    out = np.zeros((scene.grid[0] * scene.grid[1], d))
    for c, box in list(scene.objects) + list(scene.distractors):
        out[cell_mask(box, scene.grid)] += appearance[c]
    return out


def feature_noise(scene: Scene, d: int, sigma: float) -> np.ndarray:
    rng = np.random.default_rng(scene.noise_seed)
    return rng.normal(0.0, sigma, size=(scene.grid[0] * scene.grid[1], d))


def synthesize_features(scene: Scene, appearance, sigma: float = 0.05) -> np.ndarray:
    """Image features: object embeddings + positional encoding + noise."""
    appearance = np.asarray(getattr(appearance, "rows", appearance), dtype=np.float64)
    d = appearance.shape[1]
    return object_field(scene, appearance) + positional_grid(scene.grid, d) + feature_noise(scene, d, sigma)


def features_for(scenes, appearance, sigma: float) -> np.ndarray:
    return np.stack([synthesize_features(s, appearance, sigma) for s in scenes])


# ---------------------------------------------------------------------------
# files


def write_scenes(scenes, path) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in scenes))


def read_scenes(path) -> list[Scene]:
    return [Scene.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
