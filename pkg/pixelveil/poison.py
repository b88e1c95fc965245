"""Trigger embedding for single images and datasets, plus the opaque patch baseline"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .data_io import ImageTensor, LabeledDataset
from .errors import (
    DataError,
    DimensionMismatchError,
    ManifestError,
    PatchBoundsError,
    PlanError,
    ValidationError,
)
from .trigger import TriggerTensor

logger = logging.getLogger(__name__)

PLAN_VERSION = 1


@dataclass(frozen=True)
class PatchSpec:
    """Opaque rectangular patch (BadNets-style baseline)"""
    width: int
    height: int
    color: Tuple[int, ...]
    anchor: Tuple[int, int] = (0, 0)   # (row, col) of the top-left corner

    def __post_init__(self):
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))
        if self.width < 1 or self.height < 1:
            raise ValidationError("patch width and height must be positive")
        if any(not 0 <= c <= 255 for c in self.color):
            raise ValidationError(f"patch color must lie in [0, 255], got {self.color}")

    @classmethod
    def bottom_right(cls, size: int, color: Tuple[int, ...], image_h: int,
                     image_w: int, inset: int = 0) -> "PatchSpec":
        return cls(width=size, height=size, color=color,
                   anchor=(image_h - size - inset, image_w - size - inset))

    def check_fits(self, shape: Tuple[int, int, int]) -> None:
        h, w, c = shape
        row, col = self.anchor
        if row < 0 or col < 0 or row + self.height > h or col + self.width > w:
            raise PatchBoundsError(
                f"{self.height}x{self.width} patch at {self.anchor} exceeds {h}x{w} image"
            )
        if len(self.color) not in (1, c):
            raise PatchBoundsError(f"patch color has {len(self.color)} channels, image has {c}")

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "color": list(self.color), "anchor": list(self.anchor)}


@dataclass(frozen=True)
class PoisonPlan:
    """Which records are poisoned (p_i = 1) and relabeled to the target class"""
    target_class: int
    poison_rate: float
    poisoned_indices: Tuple[int, ...]
    selection_seed: int
    dataset_size: int

    def __post_init__(self):
        indices = tuple(sorted(int(i) for i in self.poisoned_indices))
        object.__setattr__(self, "poisoned_indices", indices)
        if not 0.0 <= self.poison_rate <= 1.0:
            raise PlanError(f"poison rate must lie in [0, 1], got {self.poison_rate}")
        if len(set(indices)) != len(indices):
            raise PlanError("poisoned indices must be unique")
        if len(indices) != planned_count(self.dataset_size, self.poison_rate):
            raise PlanError(
                f"{len(indices)} poisoned indices, rate {self.poison_rate} over "
                f"{self.dataset_size} records requires {planned_count(self.dataset_size, self.poison_rate)}"
            )
        if indices and (indices[0] < 0 or indices[-1] >= self.dataset_size):
            raise PlanError(f"poisoned index out of range for dataset of {self.dataset_size}")

    @property
    def mask(self) -> np.ndarray:
        """Boolean ground truth, True where the record is poisoned"""
        mask = np.zeros(self.dataset_size, dtype=bool)
        mask[list(self.poisoned_indices)] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_VERSION,
            "target_class": self.target_class,
            "poison_rate": self.poison_rate,
            "selection_seed": self.selection_seed,
            "dataset_size": self.dataset_size,
            "poisoned_indices": list(self.poisoned_indices),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoisonPlan":
        for name in ("target_class", "poison_rate", "selection_seed",
                     "dataset_size", "poisoned_indices"):
            if name not in data:
                raise ManifestError(f"poison manifest is missing field '{name}'", field=name)
        return cls(
            target_class=int(data["target_class"]),
            poison_rate=float(data["poison_rate"]),
            poisoned_indices=tuple(data["poisoned_indices"]),
            selection_seed=int(data["selection_seed"]),
            dataset_size=int(data["dataset_size"]),
        )


Trigger = Union[TriggerTensor, PatchSpec, np.ndarray]


def planned_count(dataset_size: int, poison_rate: float) -> int:
    """round(rate * size), halves rounded up"""
    return int(np.floor(poison_rate * dataset_size + 0.5))


def make_plan(dataset_size: int, poison_rate: float, target_class: int,
              selection_seed: int) -> PoisonPlan:
    """Draw round(rate * size) indices uniformly without replacement from a seeded generator"""
    if not 0.0 <= poison_rate <= 1.0:
        raise PlanError(f"poison rate must lie in [0, 1], got {poison_rate}")
    count = planned_count(dataset_size, poison_rate)
    rng = np.random.default_rng(selection_seed)
    indices = rng.choice(dataset_size, size=count, replace=False) if count else []
    return PoisonPlan(target_class=target_class, poison_rate=poison_rate,
                      poisoned_indices=tuple(int(i) for i in indices),
                      selection_seed=selection_seed, dataset_size=dataset_size)


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _perturbation(trigger: Union[TriggerTensor, np.ndarray]) -> np.ndarray:
    values = trigger.values if isinstance(trigger, TriggerTensor) else np.asarray(trigger)
    return _round_half_away(values).astype(np.int16)


def embed_batch(images: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Poison an (N,H,W,C) uint8 batch; returns a new array"""
    if isinstance(trigger, PatchSpec):
        trigger.check_fits(images.shape[1:])
        out = images.copy()
        row, col = trigger.anchor
        out[:, row:row + trigger.height, col:col + trigger.width, :] = np.asarray(
            trigger.color, dtype=np.uint8)
        return out

    delta = _perturbation(trigger)
    if delta.shape != images.shape[1:]:
        raise DimensionMismatchError(
            f"trigger shape {delta.shape} does not match image shape {images.shape[1:]}"
        )
    # saturating addition in 8-bit intensity space
    return np.clip(images.astype(np.int16) + delta, 0, 255).astype(np.uint8)


def poison_image(image: ImageTensor, trigger: Trigger) -> ImageTensor:
    """clamp(x + round(T), 0, 255) per cell; pixels outside the trigger support are untouched"""
    return ImageTensor(embed_batch(image.pixels[np.newaxis], trigger)[0])


def apply_patch(image: ImageTensor, patch: PatchSpec) -> ImageTensor:
    """Overwrite the patch rectangle with the patch color"""
    return poison_image(image, patch)


def poison_dataset(dataset: LabeledDataset, trigger: Trigger,
                   plan: PoisonPlan) -> Tuple[LabeledDataset, PoisonPlan]:
    """Replace planned records by poisoned, relabeled versions; order and size are preserved"""
    if plan.dataset_size != len(dataset):
        raise PlanError(
            f"plan was drawn for {plan.dataset_size} records, dataset has {len(dataset)}"
        )
    if not 0 <= plan.target_class < dataset.num_classes:
        raise PlanError(
            f"target class {plan.target_class} outside [0, {dataset.num_classes})"
        )
    if not plan.poisoned_indices:
        return dataset, plan

    idx = np.asarray(plan.poisoned_indices, dtype=np.int64)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[idx] = embed_batch(dataset.images[idx], trigger)
    labels[idx] = plan.target_class

    logger.info("Poisoned %d of %d records (target class %d)",
                len(idx), len(dataset), plan.target_class)
    return dataset.replace(images=images, labels=labels), plan


def poison_all_test(dataset: LabeledDataset, trigger: Trigger,
                    target_class: int) -> LabeledDataset:
    """Every image poisoned; labels set to the target (the ASR reference label)"""
    if len(dataset) == 0:
        return dataset
    images = embed_batch(dataset.images, trigger)
    labels = np.full(len(dataset), target_class, dtype=np.int64)
    return dataset.replace(images=images, labels=labels)


def residual_map(clean: ImageTensor, poisoned: ImageTensor, gain: float = 10.0) -> ImageTensor:
    """Amplified |poisoned - clean| for visual inspection"""
    if clean.shape != poisoned.shape:
        raise DimensionMismatchError(f"{clean.shape} vs {poisoned.shape}")
    diff = np.abs(poisoned.pixels.astype(np.int16) - clean.pixels.astype(np.int16))
    return ImageTensor(np.clip(diff * gain, 0, 255).astype(np.uint8))


def save_plan(plan: PoisonPlan, path: Union[str, Path],
              trigger_manifest: Optional[str] = None,
              trigger_kind: str = "dispersed",
              patch: Optional[PatchSpec] = None) -> None:
    """Write the poison manifest: enough to rebuild the poisoned set bit-exactly"""
    data = plan.to_dict()
    data["trigger_kind"] = trigger_kind
    data["trigger_manifest"] = trigger_manifest
    if patch is not None:
        data["patch"] = patch.to_dict()
    try:
        Path(path).write_text(json.dumps(data, indent=2) + "\n")
    except OSError as e:
        raise DataError(f"cannot write poison manifest {path}: {e}") from e


@dataclass(frozen=True)
class PoisonManifest:
    plan: PoisonPlan
    trigger_kind: str = "dispersed"
    trigger_manifest: Optional[str] = None
    patch: Optional[PatchSpec] = field(default=None)


def load_plan(path: Union[str, Path]) -> PoisonManifest:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read poison manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed poison manifest {path}: {e}") from e
    patch = None
    if data.get("patch"):
        p = data["patch"]
        patch = PatchSpec(width=p["width"], height=p["height"],
                          color=tuple(p["color"]), anchor=tuple(p["anchor"]))
    return PoisonManifest(plan=PoisonPlan.from_dict(data),
                          trigger_kind=data.get("trigger_kind", "dispersed"),
                          trigger_manifest=data.get("trigger_manifest"),
                          patch=patch)
