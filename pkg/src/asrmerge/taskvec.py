"""Task-vector arithmetic over full checkpoints and linear LoRA adapter merging.

A task vector is the elementwise difference between a fine-tuned checkpoint
and the base checkpoint it started from.  Adding a scaled task vector to
another checkpoint derived from the same base transfers what the first
fine-tune learned:

    tv      = theta_ft - theta_base
    merged  = theta_target + lam * tv

All arithmetic runs in float64.  Merged tensors are tagged ``F32`` for
storage unless another dtype is requested.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from asrmerge.checkpoint_io import TensorMap, Tensor, read_checkpoint, write_checkpoint

# Provenance constants from the original training setup; recorded, not used.
TRAINING_HYPERPARAMETERS = {
    "lora_rank": 32,
    "lora_alpha": 64,
    "lora_dropout": 0.05,
    "lora_target_modules": ("q_proj", "v_proj"),
    "batch_size_tiny": 4,
    "batch_size_large": 32,
    "learning_rate": 5e-5,
    "max_epochs": 30,
    "early_stopping_patience_large": 3,
    "early_stopping_patience_tiny": 5,
    "gradient_accumulation": 1,
}
DEFAULT_TARGET_MODULES = "q_proj,v_proj"
MERGED_DTYPE = "F32"


class MergeError(ValueError):
    """Incompatible inputs to a merge or task-vector operation."""


class MergeMode(str, enum.Enum):
    PER_MATRIX = "PER_MATRIX"
    DELTA_SPACE = "DELTA_SPACE"


class NamePolicy(str, enum.Enum):
    STRICT = "STRICT"
    INTERSECTION = "INTERSECTION"


@dataclass(frozen=True)
class MergeSpec:
    lam: float
    mode: MergeMode = MergeMode.PER_MATRIX
    name_policy: NamePolicy = NamePolicy.STRICT
    bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "mode", MergeMode(self.mode))
        object.__setattr__(self, "name_policy", NamePolicy(self.name_policy))
        lo, hi = self.bounds
        if not math.isfinite(self.lam) or not lo <= self.lam <= hi:
            raise MergeError(f"lambda {self.lam!r} outside bounds [{lo}, {hi}]")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, separators=(",", ":")).encode()).hexdigest()[:16]


def fingerprint(tmap: Mapping[str, Tensor], names: Iterable[str] | None = None) -> str:
    """Hash of a checkpoint's (name, shape, dtype) index.

    Returned as ``"<structure>-<dtypes>"`` so callers can compare only the
    structural half (names and shapes) when storage dtypes legitimately differ.
    """
    names = sorted(tmap if names is None else names)
    structure = _digest([[n, list(tmap[n].shape)] for n in names])
    dtypes = _digest([tmap[n].dtype for n in names])
    return f"{structure}-{dtypes}"


def structural_part(fp: str) -> str:
    return fp.split("-", 1)[0]


@dataclass(frozen=True, eq=False)
class TaskVector:
    deltas: TensorMap
    base_fingerprint: str

    def __post_init__(self):
        if structural_part(fingerprint(self.deltas)) != structural_part(self.base_fingerprint):
            raise MergeError("task vector deltas do not match the structure of their base fingerprint")

    def names(self) -> list[str]:
        return list(self.deltas)

    def l2_norm(self) -> float:
        total = math.fsum(float(np.dot(t.values.ravel(), t.values.ravel())) for t in self.deltas.values())
        return math.sqrt(total)

    def to_tensormap(self) -> TensorMap:
        return self.deltas.with_metadata(format="task_vector", base_fingerprint=self.base_fingerprint)

    @classmethod
    def from_tensormap(cls, tmap: TensorMap) -> TaskVector:
        if tmap.metadata.get("format") != "task_vector" or "base_fingerprint" not in tmap.metadata:
            raise MergeError(f"{tmap.provenance or 'tensor map'} is not a task vector file")
        return cls(tmap, tmap.metadata["base_fingerprint"])

    def save(self, path: str | Path) -> None:
        write_checkpoint(self.to_tensormap(), path)

    @classmethod
    def load(cls, path: str | Path) -> TaskVector:
        return cls.from_tensormap(read_checkpoint(path))


def _check_names(left: Mapping, right: Mapping, policy: NamePolicy, what: str) -> list[str]:
    """Names to operate on; shape mismatches on shared names are always fatal."""
    lk, rk = set(left), set(right)
    if policy is NamePolicy.STRICT and lk != rk:
        only_l = sorted(lk - rk)
        only_r = sorted(rk - lk)
        first = (only_l or only_r)[0]
        raise MergeError(
            f"{what}: tensor name sets differ under STRICT policy "
            f"(first offending tensor {first!r}; {len(only_l)} only on left, {len(only_r)} only on right)"
        )
    common = sorted(lk & rk)
    for name in common:
        if left[name].shape != right[name].shape:
            raise MergeError(
                f"{what}: shape mismatch for tensor {name!r}: {left[name].shape} vs {right[name].shape}"
            )
    return common


def compute_task_vector(
    theta_ft: TensorMap,
    theta_base: TensorMap,
    name_policy: NamePolicy = NamePolicy.STRICT,
    dtype: str = MERGED_DTYPE,
) -> TaskVector:
    """Return ``theta_ft - theta_base`` bound to the base checkpoint's fingerprint."""
    names = _check_names(theta_ft, theta_base, NamePolicy(name_policy), "compute_task_vector")
    deltas = {n: Tensor(theta_ft[n].values - theta_base[n].values, dtype) for n in names}
    return TaskVector(TensorMap(deltas), fingerprint(theta_base, names))


def apply_task_vector(
    theta_target: TensorMap,
    tv: TaskVector,
    lam: float,
    name_policy: NamePolicy = NamePolicy.STRICT,
    dtype: str | None = MERGED_DTYPE,
) -> TensorMap:
    """Return ``theta_target + lam * tv``.

    Under ``INTERSECTION`` tensors missing from the task vector pass through
    unchanged and task-vector entries missing from the target are ignored.
    ``dtype=None`` keeps each target tensor's storage dtype.
    """
    lam = float(lam)
    if not math.isfinite(lam):
        raise MergeError(f"lambda must be finite, got {lam!r}")
    names = set(_check_names(theta_target, tv.deltas, NamePolicy(name_policy), "apply_task_vector"))
    out = {}
    for name, t in theta_target.items():
        if name in names:
            values = t.values + lam * tv.deltas[name].values
        else:
            values = t.values
        out[name] = Tensor(values, dtype or t.dtype)
    return TensorMap(out, theta_target.metadata)


def combine_task_vectors(terms: Sequence[tuple[TaskVector, float]]) -> TaskVector:
    """Weighted sum of task vectors that share a base fingerprint."""
    if not terms:
        raise MergeError("combine_task_vectors needs at least one term")
    first = terms[0][0]
    for tv, _ in terms[1:]:
        if tv.base_fingerprint != first.base_fingerprint:
            raise MergeError("task vectors were derived from different base checkpoints")
        _check_names(first.deltas, tv.deltas, NamePolicy.STRICT, "combine_task_vectors")
    out = {}
    for name in first.deltas:
        acc = np.zeros(first.deltas[name].shape)
        for tv, w in terms:
            acc = acc + float(w) * tv.deltas[name].values
        out[name] = Tensor(acc, first.deltas[name].dtype)
    return TaskVector(TensorMap(out), first.base_fingerprint)


# --------------------------------------------------------------------------- LoRA


@dataclass(frozen=True, eq=False)
class LoraLayer:
    A: np.ndarray  # r x k
    B: np.ndarray  # d x r

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        B = np.array(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2:
            raise MergeError("LoRA factors must be matrices")
        A.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def delta_shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank factor pairs keyed by layer id.

    The effective update for a layer is ``(alpha / rank) * B @ A``; factors
    are stored unscaled.
    """

    layers: Mapping[str, LoraLayer]
    rank: int
    alpha: float
    target_modules: str = DEFAULT_TARGET_MODULES

    def __post_init__(self):
        if self.rank <= 0 or not self.alpha > 0:
            raise MergeError(f"rank and alpha must be positive (rank={self.rank}, alpha={self.alpha})")
        layers = {k: self.layers[k] for k in sorted(self.layers)}
        for lid, layer in layers.items():
            if layer.A.shape[0] != self.rank or layer.B.shape[1] != self.rank:
                raise MergeError(
                    f"layer {lid!r}: factors A{layer.A.shape} B{layer.B.shape} inconsistent with rank {self.rank}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def module_names(self) -> set[str]:
        return {m.strip() for m in self.target_modules.split(",") if m.strip()}

    def to_tensormap(self, dtype: str = MERGED_DTYPE) -> TensorMap:
        entries = {}
        for lid, layer in self.layers.items():
            entries[f"{lid}.lora_A"] = Tensor(layer.A, dtype)
            entries[f"{lid}.lora_B"] = Tensor(layer.B, dtype)
        meta = {
            "format": "lora",
            "rank": str(self.rank),
            "alpha": repr(float(self.alpha)),
            "target_modules": self.target_modules,
        }
        return TensorMap(entries, meta)

    @classmethod
    def from_tensormap(cls, tmap: TensorMap) -> LoraAdapter:
        meta = tmap.metadata
        if meta.get("format") != "lora" or "rank" not in meta or "alpha" not in meta:
            raise MergeError(f"{tmap.provenance or 'tensor map'} is not a LoRA adapter file")
        ids = sorted({n.rsplit(".", 1)[0] for n in tmap})
        layers = {}
        for lid in ids:
            a, b = f"{lid}.lora_A", f"{lid}.lora_B"
            if a not in tmap or b not in tmap:
                raise MergeError(f"layer {lid!r} is missing its lora_A or lora_B tensor")
            layers[lid] = LoraLayer(tmap[a].values, tmap[b].values)
        return cls(layers, int(meta["rank"]), float(meta["alpha"]), meta.get("target_modules", DEFAULT_TARGET_MODULES))

    def save(self, path: str | Path) -> None:
        write_checkpoint(self.to_tensormap(), path)

    @classmethod
    def load(cls, path: str | Path) -> LoraAdapter:
        return cls.from_tensormap(read_checkpoint(path))


def _check_adapter_pair(t: LoraAdapter, s: LoraAdapter) -> None:
    if set(t.layers) != set(s.layers):
        diff = sorted(set(t.layers) ^ set(s.layers))
        raise MergeError(f"adapters target different layers (first offending layer {diff[0]!r})")
    if t.rank != s.rank:
        raise MergeError(f"rank mismatch: {t.rank} vs {s.rank}")
    if t.alpha != s.alpha:
        raise MergeError(f"alpha mismatch: {t.alpha} vs {s.alpha}")
    for lid in t.layers:
        lt, ls = t.layers[lid], s.layers[lid]
        if lt.A.shape != ls.A.shape or lt.B.shape != ls.B.shape:
            raise MergeError(f"layer {lid!r}: factor shapes differ between adapters")


def merge_lora(adapter_t: LoraAdapter, adapter_s: LoraAdapter, spec: MergeSpec) -> LoraAdapter:
    """Scale the support adapter's factors by lambda and add them to the target's.

    Only ``PER_MATRIX`` yields low-rank factors.  ``DELTA_SPACE`` merges have
    no factor representation; use :func:`merge_lora_deltas` or
    :func:`materialize_lora_merge` for them.
    """
    if spec.mode is not MergeMode.PER_MATRIX:
        raise MergeError("DELTA_SPACE merges cannot be returned as low-rank factors")
    _check_adapter_pair(adapter_t, adapter_s)
    lam = spec.lam
    layers = {
        lid: LoraLayer(lt.A + lam * adapter_s.layers[lid].A, lt.B + lam * adapter_s.layers[lid].B)
        for lid, lt in adapter_t.layers.items()
    }
    return LoraAdapter(layers, adapter_t.rank, adapter_t.alpha, adapter_t.target_modules)


def lora_deltas(adapter: LoraAdapter) -> dict[str, np.ndarray]:
    return {lid: adapter.scaling * (layer.B @ layer.A) for lid, layer in adapter.layers.items()}


def merge_lora_deltas(adapter_t: LoraAdapter, adapter_s: LoraAdapter, spec: MergeSpec) -> dict[str, np.ndarray]:
    """Dense per-layer updates of the merged adapter pair, for either mode."""
    _check_adapter_pair(adapter_t, adapter_s)
    if spec.mode is MergeMode.PER_MATRIX:
        return lora_deltas(merge_lora(adapter_t, adapter_s, spec))
    dt, ds = lora_deltas(adapter_t), lora_deltas(adapter_s)
    return {lid: dt[lid] + spec.lam * ds[lid] for lid in dt}


def resolve_layer(layer_id: str, theta_base: Mapping, target_modules: str = DEFAULT_TARGET_MODULES) -> str:
    """Base tensor name a LoRA layer attaches to (``<id>.weight``, else ``<id>``)."""
    modules = {m.strip() for m in target_modules.split(",") if m.strip()}
    if layer_id.rsplit(".", 1)[-1] not in modules:
        raise MergeError(f"layer {layer_id!r} does not match target modules {target_modules!r}")
    for candidate in (f"{layer_id}.weight", layer_id):
        if candidate in theta_base:
            return candidate
    raise MergeError(f"layer {layer_id!r} does not resolve to any base tensor")


def _apply_dense(
    deltas: Mapping[str, np.ndarray], theta_base: TensorMap, target_modules: str, dtype: str | None
) -> TensorMap:
    resolved = {}
    for lid, delta in deltas.items():
        name = resolve_layer(lid, theta_base, target_modules)
        if theta_base[name].shape != delta.shape:
            raise MergeError(f"layer {lid!r}: update shape {delta.shape} != base tensor {theta_base[name].shape}")
        resolved[name] = delta
    out = {}
    for name, t in theta_base.items():
        if name in resolved:
            out[name] = Tensor(t.values + resolved[name], dtype or t.dtype)
        else:
            out[name] = t
    return TensorMap(out, theta_base.metadata)


def materialize_lora(adapter: LoraAdapter, theta_base: TensorMap, dtype: str | None = MERGED_DTYPE) -> TensorMap:
    """Fold ``(alpha/rank) * B @ A`` into each resolved base tensor.

    Tensors the adapter does not touch are passed through untouched.
    """
    return _apply_dense(lora_deltas(adapter), theta_base, adapter.target_modules, dtype)


def materialize_lora_merge(
    adapter_t: LoraAdapter,
    adapter_s: LoraAdapter,
    spec: MergeSpec,
    theta_base: TensorMap,
    dtype: str | None = MERGED_DTYPE,
) -> TensorMap:
    return _apply_dense(merge_lora_deltas(adapter_t, adapter_s, spec), theta_base, adapter_t.target_modules, dtype)
