"""Unified label space over several datasets and its embedding table.

Categories are deduplicated by exact normalized name only: two datasets that
both say "person" share one entry, while "football" and "soccer" stay apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
from pathlib import Path

import numpy as np


class RegistrationError(ValueError):
    pass


class EmbeddingLoadError(ValueError):
    pass


def normalize_name(name: str) -> str:
    return " ".join(str(name).strip().lower().split())


@dataclass
class CategoryEntry:
    global_id: int
    name: str
    source_datasets: set = field(default_factory=set)
    embedding_row: int = -1


@dataclass
class DatasetDescriptor:
    dataset_id: int
    name: str
    local_classes: list[str]
    local_to_global: dict[int, int]

    @property
    def global_ids(self) -> list[int]:
        return [self.local_to_global[i] for i in range(len(self.local_classes))]


@dataclass
class EmbeddingTable:
    rows: np.ndarray
    names: list[str]
    learnable: bool = True

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.names):
            raise ValueError(f"rows {self.rows.shape} do not match {len(self.names)} names")
        if not np.isfinite(self.rows).all():
            raise ValueError("embedding rows must be finite")

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


class LabelSpace:
    """Registry of datasets and the global categories they reference."""

    def __init__(self):
        self.categories: list[CategoryEntry] = []
        self.datasets: list[DatasetDescriptor] = []
        self._by_name: dict[str, int] = {}

    @property
    def K(self) -> int:
        return len(self.categories)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    def register_dataset(self, name: str, class_names) -> DatasetDescriptor:
        names = [normalize_name(c) for c in class_names]
        if not names:
            raise RegistrationError(f"dataset {name!r} has no classes")
        if any(not n for n in names):
            raise RegistrationError(f"dataset {name!r} has an empty class name")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise RegistrationError(f"dataset {name!r} repeats class names: {dupes}")
        ds_id = len(self.datasets)
        mapping = {}
        for local, n in enumerate(names):
            gid = self._by_name.get(n)
            if gid is None:
                gid = len(self.categories)
                self.categories.append(CategoryEntry(gid, n, set(), gid))
                self._by_name[n] = gid
            self.categories[gid].source_datasets.add(ds_id)
            mapping[local] = gid
        desc = DatasetDescriptor(ds_id, name, names, mapping)
        self.datasets.append(desc)
        return desc

    def lookup(self, name: str) -> int:
        key = normalize_name(name)
        if key not in self._by_name:
            raise KeyError(f"unknown category: {key}")
        return self._by_name[key]

    def taxonomy_mask(self, dataset_id: int) -> np.ndarray:
        mask = np.zeros(self.K)
        mask[self.datasets[dataset_id].global_ids] = 1.0
        return mask

    def to_json(self) -> dict:
        return {"datasets": [{"name": d.name, "classes": d.local_classes} for d in self.datasets]}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSpace":
        ls = cls()
        for d in obj["datasets"]:
            ls.register_dataset(d["name"], d["classes"])
        return ls


def _name_seed(name: str, d: int, seed: int, salt: str = "") -> int:
    digest = hashlib.sha256(f"{seed}|{d}|{normalize_name(name)}|{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def synth_embedding(name: str, d: int, seed: int = 0, salt: str = "") -> np.ndarray:
    """Deterministic unit vector standing in for a text encoder's output."""
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    v = np.random.default_rng(_name_seed(name, d, seed, salt)).standard_normal(d)
    return v / np.linalg.norm(v)


def alias_embedding(base: np.ndarray, name: str, seed: int = 0, cosine: float = 0.97) -> np.ndarray:
    """Unit vector whose cosine with ``base`` is exactly ``cosine``."""
    base = base / np.linalg.norm(base)
    r = synth_embedding(name, len(base), seed, salt="alias")
    r = r - (r @ base) * base
    r /= np.linalg.norm(r)
    return cosine * base + np.sqrt(1.0 - cosine**2) * r


def save_embeddings(table: EmbeddingTable, path) -> None:
    lines = [f"{table.K} {table.d}"]
    for name, row in zip(table.names, table.rows):
        lines.append(" ".join([name] + [repr(float(x)) for x in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_embedding_file(path) -> tuple[int, dict[str, np.ndarray]]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise EmbeddingLoadError(f"{path}: empty embedding file")
    try:
        k, d = (int(x) for x in text[0].split())
    except ValueError as exc:
        raise EmbeddingLoadError(f"{path}: bad header {text[0]!r}") from exc
    vecs = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < d + 1:
            raise ValueError(f"{path}:{lineno}: expected {d} values, line has {len(parts) - 1} fields")
        name = normalize_name(" ".join(parts[:-d]))
        vecs[name] = np.array([float(x) for x in parts[-d:]], dtype=np.float64)
    if len(vecs) != k:
        raise EmbeddingLoadError(f"{path}: header says {k} rows, found {len(vecs)}")
    return d, vecs


def load_embeddings(path, labelspace: LabelSpace, learnable: bool = True,
                    expected_d: int | None = None) -> EmbeddingTable:
    """Attach file rows to registered categories in global-id order."""
    d, vecs = read_embedding_file(path)
    if expected_d is not None and d != expected_d:
        raise ValueError(f"{path}: embedding dimension {d} does not match model dimension {expected_d}")
    rows = []
    for name in labelspace.names:
        if name not in vecs:
            raise EmbeddingLoadError(f"embedding missing for category: {name}")
        v = vecs[name]
        if v.shape != (d,):
            raise ValueError(f"embedding for {name} has dimension {v.shape[0]}, expected {d}")
        rows.append(v)
    return EmbeddingTable(np.stack(rows), labelspace.names, learnable)
