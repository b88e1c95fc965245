"""
Backdoor defenses the trigger is evaluated against.

Detection: STRIP (entropy under superposition), Spectral Signature (SSD),
Activation Clustering (AC). Mitigation sweeps: median smoothing, input
transformations, neuron pruning and fine-tuning.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score
from tqdm import tqdm

from .data_io import ImageTensor, LabeledDataset
from .errors import (
    DegenerateFeaturesError,
    EmptyPoolError,
    InsufficientSamplesError,
    ShapeMismatchError,
    ValidationError,
)
from .imageops import blend_arrays, horizontal_flip, median_smooth_batch, random_crop, rotate
from .metrics import (
    ThresholdResult,
    attack_success_rate,
    balanced_accuracy,
    best_threshold_bacc,
    functionality_loss,
    sample_entropies,
)
from .nn import NetworkParams, TrainConfig, evaluate, fine_tune, forward, predict, prune_neurons
from .parallel import ParallelProcessor, shard_ranges
from .poison import PoisonPlan, Trigger, embed_batch, poison_all_test

logger = logging.getLogger(__name__)

STRIP_SHARD = 64
POWER_TOL = 1e-8
POWER_MAX_ITER = 1000

AC_ANALYSES = ("smaller", "relative_size", "distance", "silhouette")
AC_DEFAULT_THRESHOLDS = {"relative_size": 0.35, "silhouette": 0.10}

TRANSFORMS = ("none", "crop", "rotation", "flip")


# ---------------------------------------------------------------- STRIP

@dataclass(frozen=True)
class StripConfig:
    num_overlays: int = 100
    blend_weight: float = 0.5
    overlay_pool: Optional[LabeledDataset] = None
    seed: int = 0

    def __post_init__(self):
        if self.num_overlays < 1:
            raise ValidationError(f"need at least one overlay, got {self.num_overlays}")
        if not 0.0 < self.blend_weight < 1.0:
            raise ValidationError(f"blend weight must lie in (0, 1), got {self.blend_weight}")


def _pool_images(config: StripConfig) -> np.ndarray:
    if config.overlay_pool is None or len(config.overlay_pool) == 0:
        raise EmptyPoolError("STRIP needs a non-empty overlay pool")
    return config.overlay_pool.images


def strip_entropy(model: NetworkParams, sample: ImageTensor, config: StripConfig,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Mean prediction entropy of `sample` blended with N randomly drawn pool images"""
    pool = _pool_images(config)
    if pool.shape[1:] != sample.shape:
        raise ShapeMismatchError(f"pool images {pool.shape[1:]} do not match sample {sample.shape}")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    idx = rng.integers(0, len(pool), size=config.num_overlays)
    blended = blend_arrays(sample.pixels[np.newaxis], pool[idx], config.blend_weight)
    return float(np.mean(sample_entropies(forward(model, blended))))


def _strip_shard(task: Tuple[NetworkParams, np.ndarray, int, StripConfig]) -> np.ndarray:
    model, images, offset, config = task
    return np.array([
        strip_entropy(model, ImageTensor(img), config,
                      np.random.default_rng([config.seed, offset + i]))
        for i, img in enumerate(images)
    ])


def strip_entropies(model: NetworkParams, images: np.ndarray, config: StripConfig,
                    workers: int = 1, show_progress: bool = False) -> np.ndarray:
    """STRIP entropy of every image; sample i always uses the stream seeded by (seed, i)"""
    _pool_images(config)
    tasks = [(model, images[r.start:r.stop], r.start, config)
             for r in shard_ranges(len(images), STRIP_SHARD)]
    if workers <= 1:
        parts = [_strip_shard(t) for t in tqdm(tasks, desc="strip", unit="shard",
                                                disable=not show_progress)]
    else:
        parts = ParallelProcessor(workers).map(_strip_shard, tasks)
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class StripReport:
    clean_entropies: np.ndarray
    poisoned_entropies: np.ndarray
    bin_edges: np.ndarray
    clean_histogram: np.ndarray
    poisoned_histogram: np.ndarray
    best: ThresholdResult
    frr: float
    frr_threshold: float
    frr_tpr: float
    frr_tnr: float

    def histogram_rows(self) -> List[dict]:
        return [
            {"bin_low": float(lo), "bin_high": float(hi),
             "clean": int(c), "poisoned": int(p)}
            for lo, hi, c, p in zip(self.bin_edges[:-1], self.bin_edges[1:],
                                    self.clean_histogram, self.poisoned_histogram)
        ]

    def summary(self) -> Dict[str, float]:
        return {
            "clean_mean_entropy": float(self.clean_entropies.mean()),
            "poisoned_mean_entropy": float(self.poisoned_entropies.mean()),
            "best_bacc": self.best.bacc,
            "best_threshold": self.best.threshold,
            "best_direction": self.best.direction,
            "frr": self.frr,
            "frr_threshold": self.frr_threshold,
            "frr_tpr": self.frr_tpr,
            "frr_tnr": self.frr_tnr,
            "frr_bacc": balanced_accuracy(self.frr_tpr, self.frr_tnr),
        }


def strip_report(model: NetworkParams, clean_images: np.ndarray, poisoned_images: np.ndarray,
                 config: StripConfig, bins: int = 20, frr: float = 0.01,
                 workers: int = 1, show_progress: bool = False) -> StripReport:
    """
    Entropy distributions of clean and poisoned inputs on shared bins.

    Besides the best single-threshold bACC, the FRR rule flags inputs whose
    entropy falls below the `frr` quantile of clean entropies.
    """
    if not 0.0 <= frr < 1.0:
        raise ValidationError(f"FRR must lie in [0, 1), got {frr}")
    clean = strip_entropies(model, clean_images, config, workers, show_progress)
    poisoned = strip_entropies(model, poisoned_images, config, workers, show_progress)
    if clean.size == 0 or poisoned.size == 0:
        raise InsufficientSamplesError("STRIP needs clean and poisoned samples")

    edges = np.histogram_bin_edges(np.concatenate([clean, poisoned]), bins=bins)
    clean_hist, _ = np.histogram(clean, bins=edges)
    poisoned_hist, _ = np.histogram(poisoned, bins=edges)
    best = best_threshold_bacc(clean, poisoned)

    threshold = float(np.quantile(clean, frr))
    report = StripReport(
        clean_entropies=clean,
        poisoned_entropies=poisoned,
        bin_edges=edges,
        clean_histogram=clean_hist,
        poisoned_histogram=poisoned_hist,
        best=best,
        frr=frr,
        frr_threshold=threshold,
        frr_tpr=float(np.mean(poisoned < threshold)),
        frr_tnr=float(np.mean(clean >= threshold)),
    )
    logger.info("STRIP: clean entropy %.3f, poisoned %.3f, best bACC %.3f",
                clean.mean(), poisoned.mean(), best.bacc)
    return report


# ---------------------------------------------------------------- SSD

@dataclass
class SsdReport:
    scores: np.ndarray
    threshold: float
    flags: np.ndarray
    top_eigvec: np.ndarray
    eigenvalue: float
    iterations: int


def _top_eigvec(cov: np.ndarray, seed: int) -> Tuple[np.ndarray, int]:
    """Power iteration on a PSD matrix from a seeded start"""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for iteration in range(1, POWER_MAX_ITER + 1):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            raise DegenerateFeaturesError("power iteration collapsed to the zero vector")
        w /= norm
        if np.linalg.norm(w - v) < POWER_TOL:
            return w, iteration
        v = w
    logger.debug("power iteration did not converge in %d steps; using eigh", POWER_MAX_ITER)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, -1], POWER_MAX_ITER


def ssd_detect(features: np.ndarray, epsilon: float, seed: int = 0) -> SsdReport:
    """
    Spectral signature: project centered features on the top covariance
    eigenvector and flag |score| above its (1 - 1.5*epsilon) quantile.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InsufficientSamplesError(f"SSD needs at least 2 feature vectors, got shape {x.shape}")
    if not 0.0 < epsilon < 0.5:
        raise ValidationError(f"epsilon must lie in (0, 0.5), got {epsilon}")

    # exact comparison on the raw rows; centering leaves rounding residue
    if np.all(x == x[0]):
        raise DegenerateFeaturesError("features have zero covariance (all samples identical)")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)

    v, iterations = _top_eigvec(cov, seed)
    # sign convention: largest-magnitude component positive
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    eigenvalue = float(v @ cov @ v)

    scores = centered @ v
    magnitude = np.abs(scores)
    threshold = float(np.quantile(magnitude, 1.0 - 1.5 * epsilon))
    flags = magnitude > threshold
    logger.debug("SSD: lambda=%.4g, threshold=%.4g, flagged %d/%d",
                 eigenvalue, threshold, flags.sum(), len(flags))
    return SsdReport(scores=scores, threshold=threshold, flags=flags,
                     top_eigvec=v, eigenvalue=eigenvalue, iterations=iterations)


def ssd_detect_by_class(features: np.ndarray, labels: Sequence[int], epsilon: float,
                        seed: int = 0) -> Tuple[np.ndarray, Dict[int, SsdReport]]:
    """Run SSD within each label group; flags come back in dataset order"""
    labels = np.asarray(labels)
    if len(labels) != len(features):
        raise ShapeMismatchError(f"{len(features)} feature vectors but {len(labels)} labels")
    flags = np.zeros(len(labels), dtype=bool)
    reports: Dict[int, SsdReport] = {}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            logger.debug("SSD: skipping class %d with %d sample(s)", cls, len(idx))
            continue
        report = ssd_detect(features[idx], epsilon, seed)
        flags[idx] = report.flags
        reports[int(cls)] = report
    return flags, reports


# ---------------------------------------------------------------- AC

@dataclass(frozen=True)
class AcConfig:
    pca_dims: int = 10
    analysis: str = "smaller"
    threshold: Optional[float] = None
    kmeans_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.pca_dims < 2:
            raise ValidationError(f"pca_dims must be at least 2, got {self.pca_dims}")
        if self.analysis not in AC_ANALYSES:
            raise ValidationError(f"analysis must be one of {AC_ANALYSES}, got '{self.analysis}'")
        if self.kmeans_restarts < 1:
            raise ValidationError("kmeans_restarts must be positive")

    @property
    def effective_threshold(self) -> Optional[float]:
        if self.threshold is not None:
            return self.threshold
        return AC_DEFAULT_THRESHOLDS.get(self.analysis)


@dataclass
class AcClassResult:
    label: int
    cluster_sizes: Tuple[int, int]
    poisoned_clusters: List[int]
    score: Optional[float] = None


@dataclass
class AcReport:
    flags: np.ndarray
    classes: List[AcClassResult] = field(default_factory=list)


def _cluster_class(features: np.ndarray, config: AcConfig) -> Tuple[np.ndarray, np.ndarray]:
    dims = min(config.pca_dims, features.shape[0], features.shape[1])
    reduced = PCA(n_components=dims, random_state=config.seed).fit_transform(features)
    kmeans = KMeans(n_clusters=2, n_init=config.kmeans_restarts, tol=1e-6,
                    random_state=config.seed)
    return reduced, kmeans.fit_predict(reduced)


def ac_detect(features: np.ndarray, labels: Sequence[int], config: AcConfig = AcConfig()) -> AcReport:
    """
    Activation clustering: per label group, PCA then 2-means, then the
    configured analysis decides which cluster (if any) is poisoned.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ShapeMismatchError(f"{len(x)} feature vectors but {len(labels)} labels")

    classes = np.unique(labels)
    medians = {int(c): np.median(x[labels == c], axis=0) for c in classes}
    threshold = config.effective_threshold
    flags = np.zeros(len(x), dtype=bool)
    results: List[AcClassResult] = []

    for cls in classes:
        cls = int(cls)
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise InsufficientSamplesError(f"class {cls} has {len(idx)} sample(s); 2-means needs at least 2")
        reduced, assignment = _cluster_class(x[idx], config)
        sizes = np.bincount(assignment, minlength=2)
        smaller = int(np.argmin(sizes))
        poisoned: List[int] = []
        score = None

        if config.analysis == "smaller":
            poisoned = [smaller]
        elif config.analysis == "relative_size":
            score = float(sizes[smaller] / len(idx))
            if score < threshold:
                poisoned = [smaller]
        elif config.analysis == "silhouette":
            occupied = np.count_nonzero(sizes)
            score = float(silhouette_score(reduced, assignment)) if 2 <= occupied < len(idx) else 0.0
            if score > threshold:
                poisoned = [smaller]
        else:
            others = [medians[c] for c in medians if c != cls]
            for k in range(2):
                members = x[idx[assignment == k]]
                if not len(members) or not others:
                    continue
                median = np.median(members, axis=0)
                own = np.linalg.norm(median - medians[cls])
                nearest_other = min(np.linalg.norm(median - o) for o in others)
                if nearest_other < own:
                    poisoned.append(k)

        for k in poisoned:
            flags[idx[assignment == k]] = True
        results.append(AcClassResult(cls, (int(sizes[0]), int(sizes[1])), poisoned, score))
        logger.debug("AC class %d: sizes %s, poisoned clusters %s", cls, tuple(sizes), poisoned)

    return AcReport(flags=flags, classes=results)


# ---------------------------------------------------------------- detection scoring

@dataclass(frozen=True)
class DetectionScore:
    tpr: float
    tnr: float
    bacc: float

    def to_dict(self) -> dict:
        return {"tpr": self.tpr, "tnr": self.tnr, "bacc": self.bacc}


def detector_baccuracy(flags: Sequence[bool], plan: PoisonPlan) -> DetectionScore:
    """TPR over poisoned records, TNR over clean ones, and their mean"""
    flags = np.asarray(flags, dtype=bool)
    truth = plan.mask
    if len(flags) != len(truth):
        raise ShapeMismatchError(f"{len(flags)} flags for a plan over {len(truth)} records")
    positives, negatives = truth.sum(), (~truth).sum()
    if positives == 0 or negatives == 0:
        raise ValidationError("ground truth needs both poisoned and clean records")
    tpr = float(np.sum(flags & truth) / positives)
    tnr = float(np.sum(~flags & ~truth) / negatives)
    return DetectionScore(tpr, tnr, balanced_accuracy(tpr, tnr))


# ---------------------------------------------------------------- mitigation sweeps

def _attack_row(model: NetworkParams, clean: LabeledDataset, poisoned_images: np.ndarray,
                target_class: int) -> Dict[str, float]:
    functionality, _ = evaluate(model, clean)
    return {"functionality": functionality,
            "asr": attack_success_rate(predict(model, poisoned_images), target_class)}


def smoothing_sweep(model: NetworkParams, clean_test: LabeledDataset,
                    poisoned_test: LabeledDataset, windows: Sequence[int],
                    target_class: int) -> List[dict]:
    """Median-filter both test sets at each window and re-evaluate; rows are reported as-is"""
    rows = []
    for window in windows:
        smoothed_clean = clean_test.replace(images=median_smooth_batch(clean_test.images, window))
        smoothed_poisoned = median_smooth_batch(poisoned_test.images, window)
        row = {"window": int(window)}
        row.update(_attack_row(model, smoothed_clean, smoothed_poisoned, target_class))
        logger.info("smoothing w=%d: functionality %.4f, ASR %.4f",
                    window, row["functionality"], row["asr"])
        rows.append(row)
    return rows


def _transform_images(images: np.ndarray, kind: str, seed: int, pad: int,
                      degrees: float) -> np.ndarray:
    """Apply one seeded transform; equal seeds give equal per-index parameters"""
    if kind == "none":
        return images
    rng = np.random.default_rng(seed)
    if kind == "crop":
        offsets = rng.integers(0, 2 * pad + 1, size=(len(images), 2))
        return np.stack([random_crop(ImageTensor(img), pad, rng, offset=tuple(o)).pixels
                         for img, o in zip(images, offsets)])
    if kind == "rotation":
        angles = rng.uniform(-degrees, degrees, size=len(images))
        return np.stack([rotate(ImageTensor(img), float(a)).pixels
                         for img, a in zip(images, angles)])
    if kind == "rotation_0":
        return np.stack([rotate(ImageTensor(img), 0.0).pixels for img in images])
    if kind == "flip":
        return np.stack([horizontal_flip(ImageTensor(img)).pixels for img in images])
    raise ValidationError(f"unknown transform '{kind}'")


def transform_sweep(model: NetworkParams, clean_test: LabeledDataset,
                    poisoned_test: LabeledDataset, target_class: int, seed: int = 0,
                    pad: int = 2, degrees: float = 5.0, rotation_control: bool = False,
                    trigger: Optional[Trigger] = None) -> List[dict]:
    """
    Rows for no transform, random crop, random rotation within ±degrees and
    horizontal flip. With a trigger, the flip row also reports whether
    flipping a poisoned image equals poisoning the flipped clean image.
    """
    kinds = list(TRANSFORMS) + (["rotation_0"] if rotation_control else [])
    rows = []
    for kind in kinds:
        clean_images = _transform_images(clean_test.images, kind, seed, pad, degrees)
        poisoned_images = _transform_images(poisoned_test.images, kind, seed, pad, degrees)
        row = {"transform": kind}
        row.update(_attack_row(model, clean_test.replace(images=clean_images),
                               poisoned_images, target_class))
        if kind == "flip" and trigger is not None:
            row["trigger_preserved"] = bool(np.array_equal(
                poisoned_images, embed_batch(clean_images, trigger)))
        logger.info("transform %s: functionality %.4f, ASR %.4f",
                    kind, row["functionality"], row["asr"])
        rows.append(row)
    return rows


def pruning_experiment(model: NetworkParams, clean_holdout: LabeledDataset,
                       clean_test: LabeledDataset, poisoned_test: LabeledDataset,
                       target_class: int, budget: float = 0.04) -> dict:
    """Prune dormant neurons on defender data and compare the attack before and after"""
    before = _attack_row(model, clean_test, poisoned_test.images, target_class)
    pruned = prune_neurons(model, clean_holdout, budget)
    after = _attack_row(pruned.params, clean_test, poisoned_test.images, target_class)
    return {
        "budget": budget,
        "pruned_neurons": pruned.pruned_count,
        "asr_before": before["asr"],
        "asr_after": after["asr"],
        "asr_change": after["asr"] - before["asr"],
        "functionality_before": before["functionality"],
        "functionality_after": after["functionality"],
        "functionality_loss": functionality_loss(before["functionality"], after["functionality"]),
    }


def finetune_sweep(model: NetworkParams, clean_holdout: LabeledDataset, trigger: Trigger,
                   target_class: int, fractions: Sequence[float],
                   config: TrainConfig = TrainConfig(learning_rate=0.01, epochs=10),
                   seed: int = 0, test_fraction: float = 0.5) -> List[dict]:
    """
    Fine-tune on seeded fractions of the defender's clean data and measure
    functionality and ASR on one fixed test split.

    The held-out set is permuted once. Its first `test_fraction` share is
    the test split for every row; each fine-tune set is a prefix of the
    rest, sized as a fraction of the whole held-out set.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = len(clean_holdout)
    order = np.random.default_rng(seed).permutation(n)
    test_count = int(np.floor(test_fraction * n + 0.5))
    if test_count == 0:
        raise InsufficientSamplesError(f"{n} held-out records leave no test split")
    test_set = clean_holdout.subset(order[:test_count])
    tune_pool = order[test_count:]
    poisoned = poison_all_test(test_set, trigger, target_class)

    rows = []
    for fraction in fractions:
        if not 0.0 <= fraction < 1.0:
            raise ValidationError(f"fine-tune fraction must lie in [0, 1), got {fraction}")
        count = int(np.floor(fraction * n + 0.5))
        if count > len(tune_pool):
            raise InsufficientSamplesError(
                f"fraction {fraction} needs {count} records, only {len(tune_pool)} "
                f"lie outside the test split")
        tune_set = clean_holdout.subset(tune_pool[:count])
        tuned = fine_tune(model, tune_set, config) if count else model
        row = {"fraction": float(fraction), "tune_records": count,
               "test_records": len(test_set)}
        row.update(_attack_row(tuned, test_set, poisoned.images, target_class))
        logger.info("fine-tune %.0f%%: functionality %.4f, ASR %.4f",
                    fraction * 100, row["functionality"], row["asr"])
        rows.append(row)
    return rows
