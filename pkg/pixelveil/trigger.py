"""Dispersed-pixel trigger: layout, keyed generation, manifests"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from .data_io import NormStats
from .errors import (
    ChannelMismatchError,
    DataError,
    InfeasibleLayoutError,
    InvalidSpecError,
    ManifestError,
)
from .keystream import KEY_BYTES, KeyStream, random_key

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

MANIFEST_FIELDS = (
    "seed", "m", "reps_h", "reps_v", "margin",
    "symmetry", "channels", "image_h", "image_w",
)


class Symmetry(str, Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    BOTH = "both"
    NONE = "none"

    @property
    def mirrors_h(self) -> bool:
        return self in (Symmetry.HORIZONTAL, Symmetry.BOTH)

    @property
    def mirrors_v(self) -> bool:
        return self in (Symmetry.VERTICAL, Symmetry.BOTH)

    @property
    def factor(self) -> int:
        return (2 if self.mirrors_h else 1) * (2 if self.mirrors_v else 1)


@dataclass(frozen=True)
class Layout:
    """Realized trigger region inside the image grid"""
    base_h: int      # T_H, independent columns per channel
    base_v: int      # T_V, independent rows per channel
    top: int
    left: int
    height: int
    width: int
    channels: int
    symmetry_factor: int

    @property
    def m_effective(self) -> int:
        return self.height * self.width * self.channels

    @property
    def base_count(self) -> int:
        return self.base_h * self.base_v * self.channels

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.height)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.width)


@dataclass(frozen=True)
class TriggerSpec:
    """Generative recipe of a dispersed trigger; the realized tensor is always regenerated"""
    seed: bytes
    magnitude_m: float
    reps_h: int = 4
    reps_v: int = 4
    margin: int = 4
    symmetry: Symmetry = Symmetry.HORIZONTAL
    channels: int = 1
    image_h: int = 28
    image_w: int = 28

    def __post_init__(self):
        if isinstance(self.seed, str):
            object.__setattr__(self, "seed", _parse_seed(self.seed))
        object.__setattr__(self, "symmetry", Symmetry(self.symmetry))
        object.__setattr__(self, "magnitude_m", float(self.magnitude_m))
        if len(self.seed) != KEY_BYTES:
            raise InvalidSpecError(f"seed must be {KEY_BYTES * 8} bits, got {len(self.seed) * 8}")
        if not 0 < self.magnitude_m <= 255:
            raise InvalidSpecError(f"magnitude m must lie in (0, 255], got {self.magnitude_m}")
        if self.reps_h < 1 or self.reps_v < 1:
            raise InvalidSpecError("repetitions must be positive")
        if self.margin < 0:
            raise InvalidSpecError("margin must be non-negative")
        if self.channels < 1 or self.image_h < 1 or self.image_w < 1:
            raise InvalidSpecError("image dimensions and channels must be positive")
        compute_layout(self)

    @property
    def seed_hex(self) -> str:
        return self.seed.hex()

    @classmethod
    def flat(cls, m: float, count: int, seed: Union[bytes, str]) -> "TriggerSpec":
        """One-row layout whose `count` cells are all independently drawn"""
        return cls(seed=seed, magnitude_m=m, reps_h=1, reps_v=1, margin=0,
                   symmetry=Symmetry.NONE, channels=1, image_h=1, image_w=count)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed_hex,
            "m": self.magnitude_m,
            "reps_h": self.reps_h,
            "reps_v": self.reps_v,
            "margin": self.margin,
            "symmetry": self.symmetry.value,
            "channels": self.channels,
            "image_h": self.image_h,
            "image_w": self.image_w,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TriggerSpec":
        for name in MANIFEST_FIELDS:
            if name not in data:
                raise ManifestError(f"trigger manifest is missing field '{name}'", field=name)
        version = data.get("format_version", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version}", field="format_version")
        try:
            return cls(
                seed=_parse_seed(data["seed"]),
                magnitude_m=float(data["m"]),
                reps_h=int(data["reps_h"]),
                reps_v=int(data["reps_v"]),
                margin=int(data["margin"]),
                symmetry=Symmetry(data["symmetry"]),
                channels=int(data["channels"]),
                image_h=int(data["image_h"]),
                image_w=int(data["image_w"]),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidSpecError):
                raise
            raise ManifestError(f"malformed trigger manifest: {e}") from e


@dataclass(frozen=True, eq=False)
class TriggerTensor:
    """Full-image signed perturbation with values in {-m, 0, +m}"""
    spec: TriggerSpec
    layout: Layout
    values: np.ndarray        # (H, W, C) float64, zero outside the layout rectangle
    base_signs: np.ndarray    # (C, T_V, T_H) int8 draws in scan order

    @property
    def m_effective(self) -> int:
        return self.layout.m_effective

    @property
    def base_count(self) -> int:
        return self.layout.base_count

    @property
    def magnitude(self) -> float:
        return self.spec.magnitude_m

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriggerTensor):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


def _parse_seed(seed: Union[str, bytes]) -> bytes:
    if isinstance(seed, bytes):
        return seed
    text = str(seed).strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    if len(text) != KEY_BYTES * 2:
        raise InvalidSpecError(f"seed must be {KEY_BYTES * 2} hex characters, got {len(text)}")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise InvalidSpecError("seed must be hexadecimal") from None


def random_seed_hex() -> str:
    return random_key().hex()


def compute_layout(spec: TriggerSpec) -> Layout:
    """
    Largest centered region of repeated (and mirrored) base cells that keeps
    every margin at least `spec.margin` pixels.
    """
    symmetry = Symmetry(spec.symmetry)
    unit_w = spec.reps_h * (2 if symmetry.mirrors_h else 1)
    unit_h = spec.reps_v * (2 if symmetry.mirrors_v else 1)
    avail_w = spec.image_w - 2 * spec.margin
    avail_h = spec.image_h - 2 * spec.margin

    base_h = avail_w // unit_w if avail_w > 0 else 0
    base_v = avail_h // unit_h if avail_h > 0 else 0
    if base_h < 1 or base_v < 1:
        raise InfeasibleLayoutError(
            f"no feasible layout for {spec.image_h}x{spec.image_w} image with margin "
            f"{spec.margin}, reps {spec.reps_h}x{spec.reps_v}, symmetry {symmetry.value}"
        )

    width = base_h * unit_w
    height = base_v * unit_h
    # the odd slack pixel goes to the left/top
    left = (spec.image_w - width + 1) // 2
    top = (spec.image_h - height + 1) // 2
    return Layout(base_h=base_h, base_v=base_v, top=top, left=left,
                  height=height, width=width, channels=spec.channels,
                  symmetry_factor=symmetry.factor)


def generate_trigger(spec: TriggerSpec) -> TriggerTensor:
    """Realize a spec: keyed signs, repeated, mirrored, scaled by m, placed per layout"""
    layout = compute_layout(spec)

    stream = KeyStream(spec.seed)
    base = stream.read_signs(layout.base_count).reshape(
        layout.channels, layout.base_v, layout.base_h)

    block = np.repeat(np.repeat(base, spec.reps_v, axis=1), spec.reps_h, axis=2)
    if spec.symmetry.mirrors_h:
        block = np.concatenate([block, block[:, :, ::-1]], axis=2)
    if spec.symmetry.mirrors_v:
        block = np.concatenate([block, block[:, ::-1, :]], axis=1)

    values = np.zeros((spec.image_h, spec.image_w, spec.channels), dtype=np.float64)
    values[layout.rows, layout.cols, :] = block.transpose(1, 2, 0) * spec.magnitude_m
    values.setflags(write=False)
    base.setflags(write=False)

    logger.debug("Generated trigger: T_H=%d T_V=%d M=%d", layout.base_h,
                 layout.base_v, layout.m_effective)
    return TriggerTensor(spec=spec, layout=layout, values=values, base_signs=base)


def trigger_flip_invariant(trigger: TriggerTensor, axis: str = "horizontal") -> bool:
    """Whether whole-image mirroring along `axis` leaves the tensor unchanged"""
    flip_axis = 1 if axis == "horizontal" else 0
    return bool(np.array_equal(trigger.values, np.flip(trigger.values, axis=flip_axis)))


def unnormalize_trigger(trigger: TriggerTensor, stats: NormStats) -> np.ndarray:
    """Per-channel affine map value*sigma + mu over every cell, margins included"""
    if stats.channels != trigger.values.shape[2]:
        raise ChannelMismatchError(
            f"trigger has {trigger.values.shape[2]} channels, stats have {stats.channels}"
        )
    return trigger.values * np.asarray(stats.stddev) + np.asarray(stats.mean)


def save_trigger(spec: TriggerSpec, path: Union[str, Path]) -> None:
    try:
        Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    except OSError as e:
        raise DataError(f"cannot write trigger manifest {path}: {e}") from e


def load_trigger(path: Union[str, Path]) -> TriggerSpec:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read trigger manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed trigger manifest {path}: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"malformed trigger manifest {path}: expected an object")
    return TriggerSpec.from_dict(data)
