"""
Hand-differentiated Perceptron/MLP with SGD training.

The layer set is fixed (dense, leaky ReLU, dropout, softmax cross-entropy);
all arithmetic is float64. Dense weights are stored (in_dim, out_dim), so a
layer computes z = a @ W + b.
"""

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .data_io import LabeledDataset, NormStats
from .errors import (
    DataError,
    EmptyDatasetError,
    InvalidSpecError,
    ManifestError,
    ShapeMismatchError,
    TrainingDivergedError,
    ValidationError,
)
from .imageops import AUGMENTATIONS, augment_batch
from .trigger import TriggerTensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

DENSE = "dense"
LEAKY_RELU = "leaky_relu"
DROPOUT = "dropout"
SOFTMAX_XENT = "softmax_xent"

EVAL_CHUNK = 2048

Batch = Union[np.ndarray, LabeledDataset]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    slope: float = 0.0
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in (DENSE, LEAKY_RELU, DROPOUT, SOFTMAX_XENT):
            raise InvalidSpecError(f"unknown layer kind '{self.kind}'")
        if self.kind == DENSE and (self.in_dim < 1 or self.out_dim < 1):
            raise InvalidSpecError(f"dense layer needs positive dims, got {self.in_dim}->{self.out_dim}")
        if self.kind == LEAKY_RELU and not 0 < self.slope < 1:
            raise InvalidSpecError(f"leaky ReLU slope must lie in (0, 1), got {self.slope}")
        if self.kind == DROPOUT and not 0 <= self.p < 1:
            raise InvalidSpecError(f"dropout probability must lie in [0, 1), got {self.p}")

    @classmethod
    def dense(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls(DENSE, in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def leaky_relu(cls, slope: float = 0.2) -> "LayerSpec":
        return cls(LEAKY_RELU, slope=slope)

    @classmethod
    def dropout(cls, p: float = 0.2) -> "LayerSpec":
        return cls(DROPOUT, p=p)

    @classmethod
    def softmax_xent(cls) -> "LayerSpec":
        return cls(SOFTMAX_XENT)

    @property
    def is_activation_point(self) -> bool:
        return self.kind in (LEAKY_RELU, DROPOUT)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "slope": self.slope, "p": self.p}


@dataclass
class NetworkParams:
    """Layer specs plus one (W, b) pair per dense layer"""
    layers: Tuple[LayerSpec, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    normalization: Optional[NormStats] = None

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]

        dense = [spec for spec in self.layers if spec.kind == DENSE]
        if not dense:
            raise InvalidSpecError("network needs at least one dense layer")
        if len(dense) != len(self.weights) or len(dense) != len(self.biases):
            raise InvalidSpecError("one weight matrix and bias vector per dense layer")
        if any(spec.kind == SOFTMAX_XENT for spec in self.layers[:-1]):
            raise InvalidSpecError("softmax_xent may only be the final layer")
        for prev, nxt in zip(dense, dense[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InvalidSpecError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for spec, w, b in zip(dense, self.weights, self.biases):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise InvalidSpecError(
                    f"weights {w.shape}/{b.shape} do not match dense {spec.in_dim}->{spec.out_dim}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidSpecError("weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def has_softmax(self) -> bool:
        return self.layers[-1].kind == SOFTMAX_XENT

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.layers, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.normalization)

    def checksum(self) -> str:
        """SHA-256 over every weight and bias in layer order"""
        digest = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            digest.update(np.ascontiguousarray(w).tobytes())
            digest.update(np.ascontiguousarray(b).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    normalization: Optional[NormStats] = None
    augment: Tuple[str, ...] = ()
    augment_pad: int = 2
    augment_degrees: float = 5.0
    show_progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch size >= 1")
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ValidationError(f"unknown augmentation(s): {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "augment": list(self.augment),
            "augment_pad": self.augment_pad,
            "augment_degrees": self.augment_degrees,
        }


@dataclass
class TrainResult:
    params: NetworkParams
    loss_history: List[float] = field(default_factory=list)


@dataclass
class PruneResult:
    params: NetworkParams
    pruned_count: int
    baseline_accuracy: float
    final_accuracy: float
    pruned_neurons: List[int] = field(default_factory=list)


def build_mlp(input_dim: int, hidden_dims: Sequence[int] = (256, 128), num_classes: int = 10,
              slope: float = 0.2, dropout: float = 0.2, seed: int = 0,
              normalization: Optional[NormStats] = None) -> NetworkParams:
    """
    dense -> leaky_relu -> dropout -> dense -> leaky_relu -> dropout -> dense -> softmax_xent

    Weights and biases start uniform in ±1/sqrt(fan_in) from a generator seeded by `seed`.
    """
    dims = [input_dim, *hidden_dims, num_classes]
    if any(d < 1 for d in dims):
        raise InvalidSpecError(f"all layer widths must be positive, got {dims}")

    rng = np.random.default_rng(seed)
    layers: List[LayerSpec] = []
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        layers.append(LayerSpec.dense(fan_in, fan_out))
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
        if i < len(dims) - 2:
            layers.append(LayerSpec.leaky_relu(slope))
            layers.append(LayerSpec.dropout(dropout))
    layers.append(LayerSpec.softmax_xent())
    return NetworkParams(tuple(layers), weights, biases, normalization)


def _as_matrix(batch: Batch) -> np.ndarray:
    if isinstance(batch, LabeledDataset):
        batch = batch.images
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[np.newaxis]
    return batch.reshape(len(batch), -1).astype(np.float64)


def _prepare(params: NetworkParams, batch: Batch) -> np.ndarray:
    x = _as_matrix(batch)
    if x.shape[1] != params.input_dim:
        raise ShapeMismatchError(f"input dim {x.shape[1]} does not match network input {params.input_dim}")
    stats = params.normalization
    if stats is not None:
        reps = x.shape[1] // stats.channels
        x = (x - np.tile(stats.mean, reps)) / np.tile(stats.stddev, reps)
    return x


def _forward(params: NetworkParams, x: np.ndarray, train: bool,
             rng: Optional[np.random.Generator], upto: Optional[int] = None):
    """Run layers [0, upto) and return (output, per-layer inputs, dropout masks)"""
    inputs, masks = [], []
    a = x
    k = 0
    layers = params.layers if upto is None else params.layers[:upto]
    for spec in layers:
        inputs.append(a)
        mask = None
        if spec.kind == DENSE:
            a = a @ params.weights[k] + params.biases[k]
            k += 1
        elif spec.kind == LEAKY_RELU:
            a = np.where(a > 0, a, spec.slope * a)
        elif spec.kind == DROPOUT:
            if train and spec.p > 0:
                if rng is None:
                    raise ValidationError("train-mode dropout needs a random generator")
                # inverted dropout keeps the expected activation unchanged
                mask = (rng.random(a.shape) >= spec.p) / (1.0 - spec.p)
                a = a * mask
        elif spec.kind == SOFTMAX_XENT:
            shifted = a - a.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            a = e / e.sum(axis=1, keepdims=True)
        masks.append(mask)
    return a, inputs, masks


def forward(params: NetworkParams, batch: Batch, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Class-probability vectors for a batch (raw scores if the net has no softmax head).

    Inputs are normalized by (x - mu) / sigma when the network carries NormStats.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode}")
    out, _, _ = _forward(params, _prepare(params, batch), mode == "train", rng)
    return out


def detector_score(params: NetworkParams, batch: Batch) -> np.ndarray:
    """Raw linear output of a single-output network, one score per sample"""
    upto = len(params.layers) - 1 if params.has_softmax else None
    out, _, _ = _forward(params, _prepare(params, batch), False, None, upto=upto)
    return out[:, 0]


def backward(params: NetworkParams, batch: Batch, labels: Sequence[int],
             rng: Optional[np.random.Generator] = None,
             mode: str = "train") -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Mean cross-entropy and its exact gradient w.r.t. every (W, b).

    `rng` must be in the same state as for the paired forward pass so the
    dropout masks agree.
    """
    if not params.has_softmax:
        raise InvalidSpecError("backward needs a softmax_xent head")
    x = _prepare(params, batch)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) != len(x):
        raise ShapeMismatchError(f"{len(x)} samples but {len(y)} labels")
    if len(y) and (y.min() < 0 or y.max() >= params.num_outputs):
        raise ShapeMismatchError(f"labels must lie in [0, {params.num_outputs})")

    probs, inputs, masks = _forward(params, x, mode == "train", rng)
    n = len(y)
    logits = inputs[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    k = len(params.weights)
    for spec, a_in, mask in zip(reversed(params.layers[:-1]), reversed(inputs[:-1]),
                                reversed(masks[:-1])):
        if spec.kind == DENSE:
            k -= 1
            grads.append((a_in.T @ delta, delta.sum(axis=0)))
            delta = delta @ params.weights[k].T
        elif spec.kind == LEAKY_RELU:
            delta = delta * np.where(a_in > 0, 1.0, spec.slope)
        elif spec.kind == DROPOUT and mask is not None:
            delta = delta * mask
    grads.reverse()
    return loss, grads


def _rngs(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    shuffle_ss, dropout_ss, augment_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(shuffle_ss), np.random.default_rng(dropout_ss),
            np.random.default_rng(augment_ss))


def train(params: NetworkParams, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """
    SGD with classical momentum: v <- mu*v - lr*(g + wd*theta); theta <- theta + v.

    Records are reshuffled every epoch from a generator seeded by config.seed;
    the input params are not modified.
    """
    params = params.copy()
    if config.normalization is not None:
        params.normalization = config.normalization
    if config.epochs == 0 or len(dataset) == 0:
        return TrainResult(params, [])

    shuffle_rng, dropout_rng, augment_rng = _rngs(config.seed)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    history: List[float] = []
    n = len(dataset)

    epochs = tqdm(range(config.epochs), desc="train", unit="epoch",
                  disable=not config.show_progress)
    for epoch in epochs:
        order = shuffle_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = dataset.images[idx]
            if config.augment:
                images = augment_batch(images, config.augment, augment_rng,
                                       pad=config.augment_pad, degrees=config.augment_degrees)
            loss, grads = backward(params, images, dataset.labels[idx], dropout_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch + 1}, batch {batches + 1} "
                    f"(lr={config.learning_rate}, momentum={config.momentum}); "
                    "try a smaller learning rate"
                )
            for k, ((gw, gb), (vw, vb)) in enumerate(zip(grads, velocity)):
                w, b = params.weights[k], params.biases[k]
                vw *= config.momentum
                vw -= config.learning_rate * (gw + config.weight_decay * w)
                vb *= config.momentum
                vb -= config.learning_rate * (gb + config.weight_decay * b)
                w += vw
                b += vb
            total += loss
            batches += 1
        history.append(total / batches)
        epochs.set_postfix(loss=f"{history[-1]:.4f}")
        logger.info("epoch %d/%d: mean loss %.4f", epoch + 1, config.epochs, history[-1])

    return TrainResult(params, history)


def fine_tune(params: NetworkParams, clean_subset: LabeledDataset,
              config: TrainConfig) -> NetworkParams:
    """Continue training from `params` on defender-held clean data"""
    if config.normalization is None:
        config = replace(config, normalization=params.normalization)
    return train(params, clean_subset, config).params


def predict(params: NetworkParams, batch: Batch) -> np.ndarray:
    """Argmax class per sample; the lowest index wins ties"""
    x = _as_matrix(batch)
    preds = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), EVAL_CHUNK):
        chunk = forward(params, x[start:start + EVAL_CHUNK])
        preds[start:start + EVAL_CHUNK] = np.argmax(chunk, axis=1)
    return preds


def evaluate(params: NetworkParams, dataset: LabeledDataset) -> Tuple[float, np.ndarray]:
    """Accuracy fraction and per-sample predicted classes"""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    preds = predict(params, dataset.images)
    return float(np.mean(preds == dataset.labels)), preds


def _activation_points(params: NetworkParams) -> List[int]:
    return [i for i, spec in enumerate(params.layers) if spec.is_activation_point]


def hidden_activations(params: NetworkParams, batch: Batch,
                       layer_index: Optional[int] = None) -> np.ndarray:
    """
    Eval-mode output of layer `layer_index` (a leaky_relu or dropout layer).

    Defaults to the last post-activation point, i.e. the penultimate-layer
    representation.
    """
    points = _activation_points(params)
    if layer_index is None:
        if not points:
            raise InvalidSpecError("network has no hidden activation layer")
        layer_index = points[-1]
    if layer_index not in points:
        raise ValidationError(f"layer {layer_index} is not a post-activation point; choose from {points}")
    x = _prepare(params, batch)
    chunks = []
    for start in range(0, len(x), EVAL_CHUNK):
        out, _, _ = _forward(params, x[start:start + EVAL_CHUNK], False, None, upto=layer_index + 1)
        chunks.append(out)
    if not chunks:
        return np.zeros((0, 0))
    return np.concatenate(chunks)


def prune_neurons(params: NetworkParams, clean_dataset: LabeledDataset,
                  budget: float = 0.04) -> PruneResult:
    """
    Zero last-hidden-layer neurons (outgoing row and bias) from the most dormant
    on clean inputs upward, stopping before the first step whose cumulative
    clean-accuracy drop exceeds `budget`.
    """
    if len(clean_dataset) == 0:
        raise EmptyDatasetError("pruning needs a non-empty clean set")
    dense_layers = [i for i, spec in enumerate(params.layers) if spec.kind == DENSE]
    if len(dense_layers) < 2:
        raise InvalidSpecError("pruning needs at least one hidden dense layer")

    final_dense = dense_layers[-1]
    x = _prepare(params, clean_dataset)
    acts, _, _ = _forward(params, x, False, None, upto=final_dense)
    w_out, b_out = params.weights[-1], params.biases[-1]
    labels = clean_dataset.labels

    def accuracy(mask: np.ndarray) -> float:
        return float(np.mean(np.argmax((acts * mask) @ w_out + b_out, axis=1) == labels))

    order = np.argsort(np.abs(acts).mean(axis=0), kind="stable")
    mask = np.ones(acts.shape[1])
    baseline = accuracy(mask)
    current = baseline
    pruned: List[int] = []
    for neuron in order:
        mask[neuron] = 0.0
        acc = accuracy(mask)
        if baseline - acc > budget:
            mask[neuron] = 1.0
            break
        pruned.append(int(neuron))
        current = acc

    result = params.copy()
    result.weights[-1][pruned, :] = 0.0
    result.biases[-2][pruned] = 0.0
    logger.info("Pruned %d neurons: clean accuracy %.4f -> %.4f", len(pruned), baseline, current)
    return PruneResult(result, len(pruned), baseline, current, pruned)


def perceptron_detector(trigger: TriggerTensor) -> NetworkParams:
    """Single dense unit with w = t (vectorized trigger) and b = -m^2 M / 2; score > 0 means present"""
    t = trigger.values.reshape(-1, 1)
    m = trigger.magnitude
    bias = -(m * m) * trigger.m_effective / 2.0
    return NetworkParams((LayerSpec.dense(t.shape[0], 1),), [t.copy()], [np.array([bias])])


def save_checkpoint(params: NetworkParams, path: Union[str, Path]) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "layers": [spec.to_dict() for spec in params.layers],
        "normalization": params.normalization.to_dict() if params.normalization else None,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{k}"] = w
        arrays[f"b{k}"] = b
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    try:
        Path(path).write_bytes(buffer.getvalue())
    except OSError as e:
        raise DataError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: Union[str, Path]) -> NetworkParams:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ManifestError(f"unsupported checkpoint version {meta.get('format_version')}",
                                    field="format_version")
            layers = tuple(LayerSpec(**spec) for spec in meta["layers"])
            count = sum(1 for spec in layers if spec.kind == DENSE)
            weights = [data[f"w{k}"] for k in range(count)]
            biases = [data[f"b{k}"] for k in range(count)]
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    except (KeyError, ValueError) as e:
        raise ManifestError(f"malformed checkpoint {path}: {e}") from e
    norm = meta.get("normalization")
    return NetworkParams(layers, weights, biases, NormStats.from_dict(norm) if norm else None)
