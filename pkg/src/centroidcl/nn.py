"""Network components: shared backbone, per-task heads, per-task merging maps,
frozen snapshots, and per-task normalization statistics.

A model is a shared feature extractor (two affine+relu blocks, optionally with
per-feature normalization) plus, per task, an embedding head and, when space
merging is enabled, small scale/translate (or affine) maps that move the task's
embedding space into the shared one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

MERGING_VARIANTS = ("scale_translate", "linear", "offset", "none")

_MAGIC = b"CCLMODEL"
_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 16
    backbone_hidden: int = 64
    feature_dim: int = 64
    embedding_dim: int = 128
    head_hidden: int | None = None      # defaults to embedding_dim
    proj_hidden: int | None = None      # defaults to embedding_dim // 2 (small nets)
    normalize: bool = True
    merging_variant: str = "scale_translate"
    shared_projection: bool = True      # one map for both centroids and embeddings

    def __post_init__(self):
        if self.head_hidden is None:
            self.head_hidden = self.embedding_dim
        if self.proj_hidden is None:
            self.proj_hidden = self.embedding_dim
        if self.merging_variant not in MERGING_VARIANTS:
            raise ValueError(
                f"unknown merging variant {self.merging_variant!r}, "
                f"expected one of {MERGING_VARIANTS}")
        for name in ("input_dim", "backbone_hidden", "feature_dim",
                     "embedding_dim", "head_hidden", "proj_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class Affine:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_dim)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]

    def copy_into(self, other: "Affine") -> None:
        other.weight.values = self.weight.values.copy()
        other.bias.values = self.bias.values.copy()


class FeatureNorm:
    """Per-feature standardization with running statistics.

    Training normalizes by the current batch's statistics (differentiable) and
    updates the running mean/variance by exponential moving average; evaluation
    normalizes by stored statistics, either the running ones or a per-task
    record applied by the owning model.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, dim: int):
        self.dim = dim
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eval_stats: tuple[np.ndarray, np.ndarray] | None = None
        self._eps_const = Tensor(np.full(dim, self.EPS))

    def __call__(self, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        if train:
            mu = ad.mean_reduce(x, axis=0)
            centered = ad.sub(x, mu)
            var = ad.mean_reduce(ad.mul(centered, centered), axis=0)
            inv = ad.exp(ad.scale(ad.log(ad.add(var, self._eps_const)), -0.5))
            if update_stats:
                m = self.MOMENTUM
                self.running_mean = (1 - m) * self.running_mean + m * mu.values
                self.running_var = (1 - m) * self.running_var + m * var.values
            return ad.mul(centered, inv)
        mean, var = self.eval_stats if self.eval_stats is not None else (
            self.running_mean, self.running_var)
        inv = 1.0 / np.sqrt(var + self.EPS)
        return ad.mul(ad.sub(x, Tensor(mean)), Tensor(inv))

    def capture(self) -> tuple[np.ndarray, np.ndarray]:
        return self.running_mean.copy(), self.running_var.copy()


class TwoAffine:
    """Two affine layers with a relu between them."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.first = Affine(in_dim, hidden, rng)
        self.second = Affine(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(ad.relu(self.first(x)))

    def parameters(self, prefix: str):
        return self.first.parameters(f"{prefix}.first") + self.second.parameters(f"{prefix}.second")

    def copy_into(self, other: "TwoAffine") -> None:
        self.first.copy_into(other.first)
        self.second.copy_into(other.second)


class Backbone:
    """Shared feature extractor: two affine blocks with relu (and optional norm)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.blocks = [
            Affine(config.input_dim, config.backbone_hidden, rng),
            Affine(config.backbone_hidden, config.feature_dim, rng),
        ]
        self.norms = (
            [FeatureNorm(config.backbone_hidden), FeatureNorm(config.feature_dim)]
            if config.normalize else [])

    def __call__(self, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        out = x
        for i, block in enumerate(self.blocks):
            out = block(out)
            if self.norms:
                out = self.norms[i](out, train, update_stats)
            out = ad.relu(out)
        return out

    def parameters(self):
        params = []
        for i, block in enumerate(self.blocks):
            params += block.parameters(f"backbone.block{i}")
        return params


class ScaleTranslate:
    """v * sigmoid(s(v)) + t(v), with s and t small two-affine networks."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.scale_net = TwoAffine(dim, hidden, dim, rng)
        self.translate_net = TwoAffine(dim, hidden, dim, rng)

    def __call__(self, v: Tensor) -> Tensor:
        gate = ad.sigmoid(self.scale_net(v))
        return ad.add(ad.mul(v, gate), self.translate_net(v))

    def parameters(self, prefix: str):
        return (self.scale_net.parameters(f"{prefix}.scale") +
                self.translate_net.parameters(f"{prefix}.translate"))

    def copy_into(self, other: "ScaleTranslate") -> None:
        self.scale_net.copy_into(other.scale_net)
        self.translate_net.copy_into(other.translate_net)


class LinearMap:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.affine = Affine(dim, dim, rng)

    def __call__(self, v: Tensor) -> Tensor:
        return self.affine(v)

    def parameters(self, prefix: str):
        return self.affine.parameters(f"{prefix}.affine")

    def copy_into(self, other: "LinearMap") -> None:
        self.affine.copy_into(other.affine)


class OffsetMap:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.affine = Affine(dim, dim, rng)

    def __call__(self, v: Tensor) -> Tensor:
        return ad.add(v, self.affine(v))

    def parameters(self, prefix: str):
        return self.affine.parameters(f"{prefix}.affine")

    def copy_into(self, other: "OffsetMap") -> None:
        self.affine.copy_into(other.affine)


_PROJECTION_TYPES = {
    "scale_translate": ScaleTranslate,
    "linear": LinearMap,
    "offset": OffsetMap,
}


class MultiHeadModel:
    """Shared backbone plus per-task heads, merging maps, and norm records."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.backbone = Backbone(config, self.rng)
        self.heads: dict[int, TwoAffine] = {}
        self.embed_proj: dict[int, object] = {}
        self.centroid_proj: dict[int, object] = {}
        self.norm_records: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
        self.frozen = False

    # -- construction -----------------------------------------------------

    def add_task(self, task_id: int, with_projection: bool = False) -> None:
        if self.frozen:
            raise RuntimeError("cannot add tasks to a frozen snapshot")
        if task_id in self.heads:
            raise ValueError(f"task {task_id} already has a head")
        cfg = self.config
        self.heads[task_id] = TwoAffine(cfg.feature_dim, cfg.head_hidden,
                                        cfg.embedding_dim, self.rng)
        if with_projection and cfg.merging_variant != "none":
            proj_type = _PROJECTION_TYPES[cfg.merging_variant]
            proj = proj_type(cfg.embedding_dim, cfg.proj_hidden, self.rng)
            self.embed_proj[task_id] = proj
            self.centroid_proj[task_id] = (
                proj if cfg.shared_projection
                else proj_type(cfg.embedding_dim, cfg.proj_hidden, self.rng))

    def task_ids(self) -> list[int]:
        return sorted(self.heads)

    # -- forward passes ----------------------------------------------------

    def features(self, x, train: bool = False) -> Tensor:
        update = train and not self.frozen
        return self.backbone(as_tensor(x), train, update)

    def embed_features(self, feats: Tensor, task_id: int) -> Tensor:
        head = self.heads.get(task_id)
        if head is None:
            raise KeyError(f"no head for task {task_id}")
        return head(feats)

    def embed(self, x, task_id: int, train: bool = False) -> Tensor:
        return self.embed_features(self.features(x, train), task_id)

    def project(self, v: Tensor, task_id: int, path: str = "embedding") -> Tensor:
        variant = self.config.merging_variant
        if variant == "none":
            return v
        table = self.embed_proj if path == "embedding" else self.centroid_proj
        proj = table.get(task_id)
        if proj is None:
            raise KeyError(f"no merging map for task {task_id}")
        return proj(v)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = self.backbone.parameters()
        for tid in self.task_ids():
            params += self.heads[tid].parameters(f"head{tid}")
            if tid in self.embed_proj:
                params += self.embed_proj[tid].parameters(f"proj{tid}.embed")
                if self.centroid_proj[tid] is not self.embed_proj[tid]:
                    params += self.centroid_proj[tid].parameters(f"proj{tid}.centroid")
        return params

    def parameter_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    # -- snapshots ------------------------------------------------------------

    def snapshot(self) -> "MultiHeadModel":
        """Deep frozen copy: constant outputs for fixed input, no stat updates."""
        if not self.heads:
            raise ValueError("snapshot requires at least one head")
        clone = MultiHeadModel(self.config, seed=0)
        for i, block in enumerate(self.backbone.blocks):
            block.copy_into(clone.backbone.blocks[i])
        for i, norm in enumerate(self.backbone.norms):
            clone.backbone.norms[i].running_mean = norm.running_mean.copy()
            clone.backbone.norms[i].running_var = norm.running_var.copy()
            if norm.eval_stats is not None:
                clone.backbone.norms[i].eval_stats = (
                    norm.eval_stats[0].copy(), norm.eval_stats[1].copy())
        for tid in self.task_ids():
            clone.add_task(tid, with_projection=tid in self.embed_proj)
            self.heads[tid].copy_into(clone.heads[tid])
            if tid in self.embed_proj:
                self.embed_proj[tid].copy_into(clone.embed_proj[tid])
                if self.centroid_proj[tid] is not self.embed_proj[tid]:
                    self.centroid_proj[tid].copy_into(clone.centroid_proj[tid])
        clone.norm_records = {
            tid: [(m.copy(), v.copy()) for m, v in recs]
            for tid, recs in self.norm_records.items()}
        clone.frozen = True
        for t in clone.parameter_tensors():
            t.requires_grad = False
        return clone

    # -- per-task normalization statistics -------------------------------------

    def capture_norm_stats(self, task_id: int) -> None:
        if task_id in self.norm_records:
            raise ValueError(f"statistics for task {task_id} already captured")
        self.norm_records[task_id] = [n.capture() for n in self.backbone.norms]

    def apply_norm_stats(self, task_id: int) -> None:
        if not self.backbone.norms:
            return
        record = self.norm_records.get(task_id)
        if record is None:
            raise KeyError(f"no captured statistics for task {task_id}")
        for norm, stats in zip(self.backbone.norms, record):
            norm.eval_stats = stats

    def reset_eval_stats(self) -> None:
        for norm in self.backbone.norms:
            norm.eval_stats = None

    # -- serialization -----------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        cfg = self.config
        parts = [_MAGIC, struct.pack("<I", _FORMAT_VERSION)]
        parts.append(struct.pack(
            "<6I3BxI",
            cfg.input_dim, cfg.backbone_hidden, cfg.feature_dim,
            cfg.embedding_dim, cfg.head_hidden, cfg.proj_hidden,
            int(cfg.normalize), int(cfg.shared_projection),
            MERGING_VARIANTS.index(cfg.merging_variant),
            len(self.heads)))
        proj_tasks = sorted(self.embed_proj)
        parts.append(struct.pack(f"<{len(self.heads)}I", *self.task_ids()))
        parts.append(struct.pack("<I", len(proj_tasks)))
        parts.append(struct.pack(f"<{len(proj_tasks)}I", *proj_tasks))
        for _, tensor in self.parameters():
            parts.append(_pack_array(tensor.values))
        norm_arrays: list[np.ndarray] = []
        for norm in self.backbone.norms:
            norm_arrays += [norm.running_mean, norm.running_var]
        parts.append(struct.pack("<I", len(self.backbone.norms)))
        for arr in norm_arrays:
            parts.append(_pack_array(arr))
        parts.append(struct.pack("<I", len(self.norm_records)))
        for tid in sorted(self.norm_records):
            parts.append(struct.pack("<I", tid))
            for mean, var in self.norm_records[tid]:
                parts.append(_pack_array(mean))
                parts.append(_pack_array(var))
        return b"".join(parts)

    @classmethod
    def load(cls, path: str) -> "MultiHeadModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MultiHeadModel":
        reader = _Reader(blob)
        if reader.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a model checkpoint: bad magic string")
        (version,) = reader.unpack("<I")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (in_dim, hidden, feat, emb, head_hidden, proj_hidden,
         normalize, shared, variant_code, n_tasks) = reader.unpack("<6I3BxI")
        config = ModelConfig(
            input_dim=in_dim, backbone_hidden=hidden, feature_dim=feat,
            embedding_dim=emb, head_hidden=head_hidden, proj_hidden=proj_hidden,
            normalize=bool(normalize), merging_variant=MERGING_VARIANTS[variant_code],
            shared_projection=bool(shared))
        model = cls(config, seed=0)
        task_ids = reader.unpack(f"<{n_tasks}I")
        (n_proj,) = reader.unpack("<I")
        proj_tasks = set(reader.unpack(f"<{n_proj}I"))
        for tid in task_ids:
            model.add_task(tid, with_projection=tid in proj_tasks)
        for _, tensor in model.parameters():
            arr = reader.read_array()
            if arr.shape != tensor.values.shape:
                raise ValueError(
                    f"checkpoint block shape {arr.shape} does not match {tensor.values.shape}")
            tensor.values = arr
            tensor.grad = np.zeros_like(arr)
        (n_norms,) = reader.unpack("<I")
        if n_norms != len(model.backbone.norms):
            raise ValueError("checkpoint norm layer count mismatch")
        for norm in model.backbone.norms:
            norm.running_mean = reader.read_array()
            norm.running_var = reader.read_array()
        (n_records,) = reader.unpack("<I")
        for _ in range(n_records):
            (tid,) = reader.unpack("<I")
            record = []
            for _ in range(len(model.backbone.norms)):
                mean = reader.read_array()
                var = reader.read_array()
                record.append((mean, var))
            model.norm_records[tid] = record
        return model


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    dims = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return dims + arr.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int) -> bytes:
        chunk = self.blob[self.pos:self.pos + n]
        if len(chunk) != n:
            raise ValueError("truncated checkpoint")
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def read_array(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.read(8 * count), dtype=np.float64).copy()
        return data.reshape(shape)
