"""Dataset and image ingestion from bit-exact file formats (IDX, binary NetPBM)"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    CountMismatchError,
    DataError,
    EmptyDatasetError,
    InvalidChannelsError,
    MagicMismatchError,
    TruncatedPayloadError,
    TruncatedRasterError,
    UnsupportedMaxvalError,
    UnsupportedVariantError,
    ValidationError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES_RGB_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801

# Floor applied to per-channel stddev so constant datasets stay usable
MIN_STDDEV = 1e-6

VALID_CHANNELS = (1, 3)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An H×W×C raster of 8-bit intensities (row-major, channel-interleaved)"""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = self.pixels
        if pixels.ndim == 2:
            pixels = pixels[:, :, np.newaxis]
        if pixels.ndim != 3:
            raise ValidationError(f"image must be H×W×C, got shape {pixels.shape}")
        if pixels.shape[2] not in VALID_CHANNELS:
            raise InvalidChannelsError(
                f"channels must be one of {VALID_CHANNELS}, got {pixels.shape[2]}"
            )
        pixels = _as_uint8(pixels)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation in intensity units"""
    mean: Tuple[float, ...]
    stddev: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "stddev", tuple(float(v) for v in self.stddev))
        if len(self.mean) != len(self.stddev):
            raise ValidationError("mean and stddev must have one entry per channel")
        if any(not s > 0 for s in self.stddev):
            raise ValidationError(f"stddev must be strictly positive, got {self.stddev}")

    @property
    def channels(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "stddev": list(self.stddev)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(mean=tuple(data["mean"]), stddev=tuple(data["stddev"]))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Ordered image+label collection backed by one (N,H,W,C) uint8 array"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        images = self.images
        if images.ndim == 3:
            images = images[..., np.newaxis]
        if images.ndim != 4:
            raise ValidationError(f"images must be N×H×W×C, got shape {images.shape}")
        if images.shape[3] not in VALID_CHANNELS:
            raise InvalidChannelsError(
                f"channels must be one of {VALID_CHANNELS}, got {images.shape[3]}"
            )
        images = _as_uint8(images)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(images):
            raise CountMismatchError(
                f"{len(images)} images but {len(labels)} labels"
            )
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> Tuple[ImageTensor, int]:
        return ImageTensor(self.images[index]), int(self.labels[index])

    def __iter__(self) -> Iterator[Tuple[ImageTensor, int]]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        """Records at `indices`, in the given order"""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def take(self, count: int) -> "LabeledDataset":
        """First `count` records"""
        return LabeledDataset(self.images[:count], self.labels[:count], self.num_classes, self.name)

    def replace(self, images: Optional[np.ndarray] = None,
                labels: Optional[np.ndarray] = None) -> "LabeledDataset":
        return LabeledDataset(
            self.images if images is None else images,
            self.labels if labels is None else labels,
            self.num_classes,
            self.name,
        )

    @classmethod
    def from_images(cls, images: Sequence[ImageTensor], labels: Sequence[int],
                    num_classes: int) -> "LabeledDataset":
        if images:
            shapes = {img.shape for img in images}
            if len(shapes) != 1:
                raise ValidationError(f"all images must share dimensions, got {sorted(shapes)}")
            stacked = np.stack([img.pixels for img in images])
        else:
            stacked = np.zeros((0, 1, 1, 1), dtype=np.uint8)
        return cls(stacked, np.asarray(labels, dtype=np.int64), num_classes)


def _as_uint8(array: np.ndarray) -> np.ndarray:
    if array.dtype == np.uint8:
        return np.ascontiguousarray(array)
    if array.size and (array.min() < 0 or array.max() > 255):
        raise ValidationError("intensities must lie in [0, 255]")
    if not np.all(np.equal(np.mod(array, 1), 0)):
        raise ValidationError("intensities must be integers")
    return np.ascontiguousarray(array, dtype=np.uint8)


def _open(path: Path, mode: str) -> BinaryIO:
    try:
        if path.suffix == ".gz":
            return gzip.open(path, mode)
        return open(path, mode)
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from e


def _read_exact(f: BinaryIO, count: int, what: str, path: Path) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise TruncatedPayloadError(
            f"{path}: truncated {what} (expected {count} bytes, got {len(data)})"
        )
    return data


def load_idx_dataset(image_path: PathLike, label_path: PathLike,
                     num_classes: Optional[int] = None) -> LabeledDataset:
    """
    Load an image/label pair of IDX files (optionally gzipped).

    Args:
        image_path: IDX file with magic 0x00000803 (N×H×W) or 0x00000804 (N×H×W×C)
        label_path: IDX file with magic 0x00000801
        num_classes: Class count; inferred as max(label)+1 (at least 1) when omitted

    Returns:
        LabeledDataset preserving file order
    """
    image_path, label_path = Path(image_path), Path(label_path)

    with _open(image_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "header", image_path))[0]
        if magic == IDX_IMAGES_MAGIC:
            count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "header", image_path))
            channels = 1
        elif magic == IDX_IMAGES_RGB_MAGIC:
            count, rows, cols, channels = struct.unpack(
                ">IIII", _read_exact(f, 16, "header", image_path))
        else:
            raise MagicMismatchError(
                f"{image_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}"
            )
        payload = _read_exact(f, count * rows * cols * channels, "image payload", image_path)

    with _open(label_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "header", label_path))[0]
        if magic != IDX_LABELS_MAGIC:
            raise MagicMismatchError(
                f"{label_path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}"
            )
        label_count = struct.unpack(">I", _read_exact(f, 4, "header", label_path))[0]
        label_payload = _read_exact(f, label_count, "label payload", label_path)

    if label_count != count:
        raise CountMismatchError(
            f"{image_path} holds {count} images but {label_path} holds {label_count} labels"
        )

    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols, channels).copy()
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if count else 1

    logger.info("Loaded %d records (%dx%dx%d) from %s", count, rows, cols, channels, image_path)
    return LabeledDataset(images, labels, num_classes, name=image_path.name)


def save_idx_dataset(dataset: LabeledDataset, image_path: PathLike,
                     label_path: PathLike) -> None:
    """Write a dataset as IDX image/label files (gzipped when the suffix is .gz)"""
    image_path, label_path = Path(image_path), Path(label_path)
    n, rows, cols, channels = dataset.images.shape
    if dataset.labels.size and dataset.labels.max() > 255:
        raise ValidationError("IDX labels are single bytes; labels must be < 256")

    try:
        with _open(image_path, "wb") as f:
            if channels == 1:
                f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
            else:
                f.write(struct.pack(">IIIII", IDX_IMAGES_RGB_MAGIC, n, rows, cols, channels))
            f.write(dataset.images.tobytes())
        with _open(label_path, "wb") as f:
            f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
            f.write(dataset.labels.astype(np.uint8).tobytes())
    except OSError as e:
        raise DataError(f"cannot write IDX files: {e}") from e


def _netpbm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments"""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedRasterError("truncated NetPBM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_netpbm(path: PathLike) -> ImageTensor:
    """Load a binary P5 (grayscale) or P6 (RGB) image with maxval 255"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e

    magic = data[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4"):
        raise UnsupportedVariantError(f"{path}: NetPBM variant {magic.decode()} is not supported")
    if magic not in (b"P5", b"P6"):
        raise UnsupportedVariantError(f"{path}: not a binary NetPBM file")

    tokens, offset = _netpbm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed NetPBM header") from None
    if maxval != 255:
        raise UnsupportedMaxvalError(f"{path}: maxval must be 255, got {maxval}")

    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    raster = data[2 + offset:2 + offset + expected]
    if len(raster) != expected:
        raise TruncatedRasterError(
            f"{path}: raster holds {len(raster)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()
    return ImageTensor(pixels)


def save_netpbm(image: ImageTensor, path: PathLike) -> None:
    """Write an image as binary P5/P6; round-trips bit-exactly through load_netpbm"""
    if image.channels not in VALID_CHANNELS:
        raise InvalidChannelsError(f"NetPBM needs 1 or 3 channels, got {image.channels}")
    magic = "P5" if image.channels == 1 else "P6"
    header = f"{magic}\n{image.width} {image.height}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + image.pixels.tobytes())
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def compute_norm_stats(dataset: LabeledDataset) -> NormStats:
    """Per-channel sample mean and population stddev of intensities"""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot compute normalization stats of an empty dataset")

    # Integer moments keep the result independent of record order
    flat = dataset.images.reshape(-1, dataset.channels).astype(np.int64)
    n = flat.shape[0]
    sums = flat.sum(axis=0)
    sq_sums = (flat * flat).sum(axis=0)
    mean = sums / n
    var = np.maximum(sq_sums / n - mean * mean, 0.0)
    stddev = np.maximum(np.sqrt(var), MIN_STDDEV)
    return NormStats(mean=tuple(mean), stddev=tuple(stddev))
