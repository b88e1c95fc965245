"""End-to-end attack experiments - orchestrates poison, train and evaluation"""

import logging
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .data_io import LabeledDataset, compute_norm_stats
from .errors import EmptyDatasetError
from .metrics import EvalReport, attack_success_rate, functionality_loss, ssim_stats
from .nn import NetworkParams, TrainConfig, TrainResult, build_mlp, evaluate, predict, train
from .poison import PoisonPlan, Trigger, embed_batch, make_plan, poison_all_test, poison_dataset
from .trigger import TriggerSpec, generate_trigger

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    benign: NetworkParams
    backdoored: NetworkParams
    plan: PoisonPlan
    report: EvalReport
    benign_history: List[float]
    backdoored_history: List[float]


class BackdoorExperiment:
    """Train a benign model and its backdoored twin from the same seeds, then measure the attack"""

    def __init__(self, train_set: LabeledDataset, test_set: LabeledDataset, trigger: Trigger,
                 target_class: int, poison_rate: float, selection_seed: int = 0,
                 train_config: TrainConfig = TrainConfig(),
                 hidden_dims: Sequence[int] = (256, 128), model_seed: int = 0):
        """
        Args:
            trigger: dispersed trigger, real-valued perturbation or opaque patch
            selection_seed: seeds which training records get poisoned
            model_seed: seeds the initial weights shared by both twins
        """
        self.train_set = train_set
        self.test_set = test_set
        self.trigger = trigger
        self.target_class = target_class
        self.poison_rate = poison_rate
        self.selection_seed = selection_seed
        self.train_config = train_config
        self.hidden_dims = tuple(hidden_dims)
        self.model_seed = model_seed
        self._benign: Optional[TrainResult] = None

    def _fit(self, dataset: LabeledDataset) -> TrainResult:
        init = build_mlp(int(np.prod(dataset.image_shape)), self.hidden_dims,
                         dataset.num_classes, seed=self.model_seed)
        config = replace(self.train_config, normalization=compute_norm_stats(dataset))
        return train(init, dataset, config)

    def train_benign(self) -> TrainResult:
        """Benign twin, trained once and reused across runs of this experiment"""
        if self._benign is None:
            logger.info("Training benign model on %d records", len(self.train_set))
            self._benign = self._fit(self.train_set)
        return self._benign

    def with_trigger(self, trigger: Trigger) -> "BackdoorExperiment":
        """Same data, seeds and benign twin, different trigger"""
        other = BackdoorExperiment(self.train_set, self.test_set, trigger, self.target_class,
                                   self.poison_rate, self.selection_seed, self.train_config,
                                   self.hidden_dims, self.model_seed)
        other._benign = self._benign
        return other

    def run(self) -> ExperimentResult:
        benign = self.train_benign()

        plan = make_plan(len(self.train_set), self.poison_rate, self.target_class,
                         self.selection_seed)
        poisoned_train, plan = poison_dataset(self.train_set, self.trigger, plan)
        logger.info("Training backdoored model (%d poisoned records)", len(plan.poisoned_indices))
        backdoored = self._fit(poisoned_train)

        benign_acc, _ = evaluate(benign.params, self.test_set)
        backdoored_acc, _ = evaluate(backdoored.params, self.test_set)
        poisoned_test = poison_all_test(self.test_set, self.trigger, self.target_class)
        asr = attack_success_rate(predict(backdoored.params, poisoned_test.images), self.target_class)
        similarity = ssim_stats(self.test_set.images, poisoned_test.images)

        report = EvalReport(
            functionality=backdoored_acc,
            functionality_loss=functionality_loss(benign_acc, backdoored_acc),
            asr=asr,
            ssim_mean=similarity["mean"],
            extras={"benign_functionality": benign_acc,
                    "benign_asr": attack_success_rate(predict(benign.params, poisoned_test.images),
                                                      self.target_class)},
        )
        logger.info("Functionality %.4f (loss %.4f), ASR %.4f, SSIM %.4f",
                    report.functionality, report.functionality_loss, report.asr, report.ssim_mean)
        return ExperimentResult(benign.params, backdoored.params, plan, report,
                                benign.loss_history, backdoored.loss_history)


def magnitude_sweep(experiment: BackdoorExperiment, spec: TriggerSpec,
                    magnitudes: Sequence[float]) -> List[dict]:
    """One backdoored model per trigger magnitude; the benign twin is shared"""
    experiment.train_benign()
    rows = []
    for m in magnitudes:
        trigger = generate_trigger(replace(spec, magnitude_m=float(m)))
        result = experiment.with_trigger(trigger).run()
        rows.append({
            "m": float(m),
            "asr": result.report.asr,
            "functionality": result.report.functionality,
            "functionality_loss": result.report.functionality_loss,
            "ssim": result.report.ssim_mean,
        })
    return rows


def timing_report(spec: TriggerSpec, images: np.ndarray, repeats: int = 5) -> dict:
    """Wall-clock seconds to generate the trigger and to poison one image (best of `repeats`)"""
    if len(images) == 0:
        raise EmptyDatasetError("timing needs at least one image")
    generation, embedding = [], []
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        trigger = generate_trigger(spec)
        generation.append(time.perf_counter() - start)

        start = time.perf_counter()
        embed_batch(images, trigger)
        embedding.append((time.perf_counter() - start) / len(images))
    return {
        "trigger_generation_seconds": min(generation),
        "per_image_poison_seconds": min(embedding),
        "images": int(len(images)),
        "repeats": max(1, repeats),
    }
