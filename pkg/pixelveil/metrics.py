"""Attack, detection and perceptual metrics"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy import stats
from skimage.metrics import structural_similarity

from .data_io import ImageTensor
from .errors import (
    CountMismatchError,
    DataError,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidDistributionError,
    ValidationError,
    WindowRangeError,
)

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_MIN_SIDE = 3
DISTRIBUTION_TOLERANCE = 1e-6


def _check_fraction(name: str, value: Optional[float]) -> None:
    if value is not None and not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class EvalReport:
    functionality: float
    functionality_loss: float
    asr: float
    bacc: Optional[float] = None
    tpr: Optional[float] = None
    tnr: Optional[float] = None
    ssim_mean: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("functionality", "asr", "bacc", "tpr", "tnr"):
            _check_fraction(name, getattr(self, name))
        if self.tpr is not None and self.tnr is not None:
            expected = balanced_accuracy(self.tpr, self.tnr)
            if self.bacc is None:
                self.bacc = expected
            elif abs(self.bacc - expected) > 1e-12:
                raise ValidationError(f"bACC {self.bacc} disagrees with (TPR+TNR)/2 = {expected}")

    def to_dict(self) -> dict:
        return asdict(self)


def attack_success_rate(predictions: Sequence[int], target_class: int) -> float:
    preds = np.asarray(predictions)
    if preds.size == 0:
        raise EmptyDatasetError("ASR of an empty prediction set is undefined")
    return float(np.mean(preds == target_class))


def functionality_loss(benign_acc: float, backdoored_acc: float) -> float:
    """Signed accuracy drop of the backdoored model relative to its benign twin"""
    return benign_acc - backdoored_acc


def balanced_accuracy(tpr: float, tnr: float) -> float:
    _check_fraction("TPR", tpr)
    _check_fraction("TNR", tnr)
    return (tpr + tnr) / 2.0


def _ssim_kwargs(height: int, width: int) -> dict:
    side = min(height, width)
    if side < SSIM_MIN_SIDE:
        raise WindowRangeError(f"SSIM needs images at least {SSIM_MIN_SIDE}x{SSIM_MIN_SIDE}, got {height}x{width}")
    kwargs = {"gaussian_weights": True, "sigma": SSIM_SIGMA,
              "use_sample_covariance": False, "data_range": 255}
    if side < SSIM_WINDOW:
        # largest odd window; sigma scales with it so the Gaussian support is the window
        window = side if side % 2 else side - 1
        kwargs["win_size"] = window
        kwargs["sigma"] = SSIM_SIGMA * (window - 1) / (SSIM_WINDOW - 1)
    return kwargs


def ssim_arrays(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cannot compare {a.shape} with {b.shape}")
    return float(structural_similarity(
        a.astype(np.float64), b.astype(np.float64), channel_axis=-1,
        **_ssim_kwargs(a.shape[0], a.shape[1]),
    ))


def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """
    Mean SSIM over 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, L 255),
    averaged over channels. Images under 11 pixels on a side use the largest
    odd window that fits.
    """
    return ssim_arrays(a.pixels, b.pixels)


def ssim_stats(clean_images: np.ndarray, poisoned_images: np.ndarray) -> Dict[str, float]:
    """Mean, min and max SSIM over paired (N,H,W,C) batches"""
    if clean_images.shape != poisoned_images.shape:
        raise DimensionMismatchError(f"{clean_images.shape} vs {poisoned_images.shape}")
    if len(clean_images) == 0:
        raise EmptyDatasetError("no image pairs to compare")
    scores = np.array([ssim_arrays(c, p) for c, p in zip(clean_images, poisoned_images)])
    return {"mean": float(scores.mean()), "min": float(scores.min()),
            "max": float(scores.max()), "count": int(len(scores))}


def sample_entropies(probability_vectors: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits of each row"""
    probs = np.asarray(probability_vectors, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise InvalidDistributionError(f"expected a non-empty (N, k) array, got shape {probs.shape}")
    if np.any(probs < -DISTRIBUTION_TOLERANCE) or not np.all(np.isfinite(probs)):
        raise InvalidDistributionError("probabilities must be finite and non-negative")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > DISTRIBUTION_TOLERANCE):
        raise InvalidDistributionError("each probability vector must sum to 1")
    return stats.entropy(np.clip(probs, 0.0, None), base=2, axis=1)


def prediction_entropy(probability_vectors: np.ndarray) -> float:
    """Mean per-vector entropy in bits, 0 log 0 taken as 0"""
    return float(np.mean(sample_entropies(probability_vectors)))


@dataclass(frozen=True)
class ThresholdResult:
    bacc: float
    threshold: float
    direction: str    # "above": score > threshold flags; "below": score < threshold flags
    tpr: float
    tnr: float


def best_threshold_bacc(negative_scores: Sequence[float],
                        positive_scores: Sequence[float]) -> ThresholdResult:
    """Best single-threshold balanced accuracy separating positives from negatives, either direction"""
    neg = np.sort(np.asarray(negative_scores, dtype=np.float64))
    pos = np.sort(np.asarray(positive_scores, dtype=np.float64))
    if neg.size == 0 or pos.size == 0:
        raise EmptyDatasetError("both score sets must be non-empty")

    candidates = np.unique(np.concatenate([neg, pos]))
    above = np.concatenate([[-np.inf], candidates])
    # score > t flags
    tpr_above = 1.0 - np.searchsorted(pos, above, side="right") / pos.size
    tnr_above = np.searchsorted(neg, above, side="right") / neg.size
    below = np.concatenate([candidates, [np.inf]])
    # score < t flags
    tpr_below = np.searchsorted(pos, below, side="left") / pos.size
    tnr_below = 1.0 - np.searchsorted(neg, below, side="left") / neg.size

    bacc_above = (tpr_above + tnr_above) / 2.0
    bacc_below = (tpr_below + tnr_below) / 2.0
    i, j = int(np.argmax(bacc_above)), int(np.argmax(bacc_below))
    if bacc_above[i] >= bacc_below[j]:
        return ThresholdResult(float(bacc_above[i]), float(above[i]), "above",
                               float(tpr_above[i]), float(tnr_above[i]))
    return ThresholdResult(float(bacc_below[j]), float(below[j]), "below",
                           float(tpr_below[j]), float(tnr_below[j]))


def load_lpips_scores(path: Union[str, Path], count: Optional[int] = None) -> np.ndarray:
    """
    Read externally computed LPIPS scores, one per line, paired by index with
    the evaluated images. Blank lines are ignored.
    """
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read LPIPS scores {path}: {e}") from e
    values = []
    for number, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise DataError(f"{path}:{number}: not a number: {line!r}") from None
    if count is not None and len(values) != count:
        raise CountMismatchError(f"{path} holds {len(values)} scores, expected {count}")
    return np.asarray(values)
