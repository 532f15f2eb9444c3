"""Trainable detector bundle, its batched forward/backward and checkpoints.

Checkpoint layout (all integers little-endian):

    magic   b"LDCKPT1\\n"
    u64     manifest length, then UTF-8 JSON {"meta": {...}, "tensors": [[name, shape], ...]}
    repeat  u64 byte length, then the tensor as little-endian float64, C order

Tensors appear in manifest order, which is the parameter-tree order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
import struct

import numpy as np

from .cem import CemParams, cem_backward, cem_forward
from .head import HeadParams, head_backward, head_predict, head_predict_all, toy_decoder
from .nn import (
    decoder_layer_backward,
    param_items,
    zeros_like_tree,
)

MAGIC = b"LDCKPT1\n"
MODES = ("group", "standard_merged")


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    embeddings: np.ndarray
    cem: CemParams
    head: HeadParams
    base_content: np.ndarray
    learnable_embeddings: bool = field(default=True, metadata={"param": False})
    mode: str = field(default="group", metadata={"param": False})

    @classmethod
    def init(cls, embeddings, seed: int, learnable_embeddings: bool = True,
             mode: str = "group", d_ff: int | None = None) -> "Model":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        E = np.array(getattr(embeddings, "rows", embeddings), dtype=np.float64)
        K, d = E.shape
        rng = np.random.default_rng(seed)
        cem = CemParams.init(K, d, rng, d_ff)
        head = HeadParams.init(d, rng, d_ff)
        return cls(E, cem, head, np.zeros(d), learnable_embeddings, mode)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def named_params(self):
        return list(param_items(self))

    def bump(self):
        self.cem.version += 1
        self.head.version += 1


# ---------------------------------------------------------------------------
# batched training forward / backward


@dataclass
class Forward:
    cat_scores: np.ndarray  # (B, K) CEM scores
    scores: np.ndarray      # (B, Q) matchability, or (B, Q, K) for the K-way head
    boxes: np.ndarray       # (B, Q, 4)
    class_ids: np.ndarray   # (B, Q)
    cem_cache: object
    dec_cache: object
    head_cache: object


def forward(model: Model, feats, categories, refs, n_per_class: int) -> Forward:
    """Full network on a batch with fixed per-sample category lists.

    ``feats`` (B, P, d); ``categories`` (B, T) ids; ``refs`` (B, T*N, 4).
    """
    feats = np.asarray(feats, dtype=np.float64)
    cats = np.asarray(categories, dtype=np.int64)
    refs = np.asarray(refs, dtype=np.float64)
    B = feats.shape[0]
    E = model.embeddings
    S, E2, cem_cache = cem_forward(E, feats, model.cem, return_cache=True)
    class_ids = np.repeat(cats, n_per_class, axis=1)
    contents = model.base_content + E2[np.arange(B)[:, None], class_ids]
    qd, dec_cache = toy_decoder((contents, refs), feats, model.head, return_cache=True)
    if model.mode == "standard_merged":
        scores, boxes, hc = head_predict_all(qd, E, refs, model.head, model.cem.bias, return_cache=True)
    else:
        scores, boxes, hc = head_predict(qd, E[class_ids], refs, model.head,
                                         model.cem.bias[class_ids], return_cache=True)
    return Forward(S, scores, boxes, class_ids, cem_cache, dec_cache, hc)


def backward(model: Model, fw: Forward, d_cat_scores, d_scores, d_boxes) -> Model:
    """Gradients of a scalar loss given its derivatives at the three outputs."""
    hg, dqd, demb, dbias = head_backward(d_scores, d_boxes, fw.head_cache, model.head)
    dcontents, _ = decoder_layer_backward(dqd, fw.dec_cache, model.head.decoder, hg.decoder)
    B, Q = fw.class_ids.shape
    K, d = model.embeddings.shape
    dE2 = np.zeros((B, K, d))
    bidx = np.broadcast_to(np.arange(B)[:, None], (B, Q))
    np.add.at(dE2, (bidx, fw.class_ids), dcontents)
    cg, dE, _ = cem_backward(d_cat_scores, fw.cem_cache, model.cem, dE2)
    if model.mode == "standard_merged":
        dE += demb
        cg.bias += dbias
    else:
        np.add.at(dE, fw.class_ids.reshape(-1), demb.reshape(-1, d))
        np.add.at(cg.bias, fw.class_ids.reshape(-1), dbias.reshape(-1))
    g = zeros_like_tree(model)
    g.embeddings = dE if model.learnable_embeddings else np.zeros_like(dE)
    g.cem = cg
    g.head = hg
    g.base_content = dcontents.reshape(-1, d).sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# checkpoints


def _meta(model: Model) -> dict:
    return {"learnable_embeddings": model.learnable_embeddings, "mode": model.mode}


def checkpoint_bytes(model: Model) -> bytes:
    items = model.named_params()
    manifest = {"meta": _meta(model), "tensors": [[n, list(a.shape)] for n, a in items]}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(mbytes)), mbytes]
    for _, a in items:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    (mlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    manifest = json.loads(data[off:off + mlen].decode())
    off += mlen
    tensors = {}
    for name, shape in manifest["tensors"]:
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if n != expected:
            raise CheckpointError(f"tensor {name}: {n} bytes, shape {shape} needs {expected}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shape)
        off += n
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after last tensor")
    return manifest, tensors


def load_checkpoint(path) -> Model:
    manifest, tensors = read_checkpoint(Path(path).read_bytes())
    try:
        E = tensors["embeddings"]
        d_ff = tensors["cem.layers.0.w1"].shape[1]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc}") from exc
    meta = manifest.get("meta", {})
    model = Model.init(E, seed=0, learnable_embeddings=meta.get("learnable_embeddings", True),
                       mode=meta.get("mode", "group"), d_ff=d_ff)
    names = [n for n, _ in model.named_params()]
    if sorted(names) != sorted(tensors):
        missing = sorted(set(names) - set(tensors))
        extra = sorted(set(tensors) - set(names))
        raise CheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, arr in model.named_params():
        if arr.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    return model
