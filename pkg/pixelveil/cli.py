#!/usr/bin/env python
"""Command-line interface for pixelveil"""

import argparse
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    REFERENCE_NOTE,
    BoundQuery,
    capacity_constant,
    magnitude_bound,
    perceptron_oracle,
    reference_table,
)
from .config import (
    ExperimentConfig,
    apply_config,
    config_echo,
    output_path,
    read_yaml,
)
from .data_io import (
    ImageTensor,
    LabeledDataset,
    NormStats,
    compute_norm_stats,
    load_idx_dataset,
    save_idx_dataset,
    save_netpbm,
)
from .defenses import (
    AC_ANALYSES,
    AcConfig,
    StripConfig,
    ac_detect,
    detector_baccuracy,
    finetune_sweep,
    pruning_experiment,
    smoothing_sweep,
    ssd_detect,
    ssd_detect_by_class,
    strip_report,
    transform_sweep,
)
from .errors import PixelVeilError, UsageError
from .imageops import AUGMENTATIONS
from .metrics import (
    EvalReport,
    attack_success_rate,
    functionality_loss,
    load_lpips_scores,
    ssim_stats,
)
from .nn import (
    NetworkParams,
    TrainConfig,
    build_mlp,
    evaluate,
    hidden_activations,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .output import Report, ReportRenderer, read_report_header
from .pipeline import BackdoorExperiment, magnitude_sweep, timing_report
from .poison import (
    PatchSpec,
    Trigger,
    load_plan,
    make_plan,
    poison_all_test,
    poison_dataset,
    poison_image,
    residual_map,
    save_plan,
)
from .trigger import (
    Symmetry,
    TriggerSpec,
    compute_layout,
    generate_trigger,
    load_trigger,
    random_seed_hex,
    save_trigger,
    unnormalize_trigger,
)

logger = logging.getLogger(__name__)

ZERO_SEED = "00" * 32


# ---------------------------------------------------------------- helpers

def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"'{args.command}' requires {', '.join(missing)}")


def _load_dataset(images: str, labels: str, limit: Optional[int] = None,
                  num_classes: Optional[int] = None) -> LabeledDataset:
    dataset = load_idx_dataset(images, labels, num_classes)
    if limit is not None:
        dataset = dataset.take(limit)
    logger.info("Loaded %d records of shape %s from %s", len(dataset), dataset.image_shape, images)
    return dataset


def _dataset(args: argparse.Namespace, prefix: str = "") -> LabeledDataset:
    images, labels = f"{prefix}images", f"{prefix}labels"
    _require(args, images, labels)
    return _load_dataset(getattr(args, images), getattr(args, labels),
                         getattr(args, "limit", None), getattr(args, "num_classes", None))


def _parse_color(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(","))


def _trigger(args: argparse.Namespace, dataset: LabeledDataset,
             stats: Optional[NormStats] = None) -> Trigger:
    """Dispersed trigger from a manifest, or an opaque patch from the patch flags"""
    if args.patch_size is not None:
        h, w, c = dataset.image_shape
        color = _parse_color(args.patch_color)
        if len(color) == 1:
            color = color * c
        return PatchSpec.bottom_right(args.patch_size, color, h, w, args.patch_inset)

    _require(args, "trigger")
    tensor = generate_trigger(load_trigger(args.trigger))
    if args.trigger_space == "normalized":
        stats = stats or compute_norm_stats(dataset)
        # the trigger lives in normalized units; embed its intensity-space equivalent
        return unnormalize_trigger(tensor, stats) - np.asarray(stats.mean)
    return tensor


def _model(args: argparse.Namespace, name: str = "model") -> NetworkParams:
    _require(args, name)
    return load_checkpoint(getattr(args, name))


def _report(args: argparse.Namespace, **kwargs) -> Report:
    return Report(command=args.command, config=config_echo(args), **kwargs)


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet


# ---------------------------------------------------------------- subcommands

def cmd_gen_trigger(args: argparse.Namespace) -> Report:
    _require(args, "m", "seed", "out")
    if args.seed == "random":
        args.seed = random_seed_hex()
        logger.warning("Drew a fresh key; it is recorded in the manifest")
    spec = TriggerSpec(seed=args.seed, magnitude_m=args.m, reps_h=args.reps_h,
                       reps_v=args.reps_v, margin=args.margin, symmetry=Symmetry(args.symmetry),
                       channels=args.channels, image_h=args.height, image_w=args.width)
    layout = compute_layout(spec)
    path = output_path(args.out)
    save_trigger(spec, path)

    if args.preview is not None:
        trigger = generate_trigger(spec)
        clean = ImageTensor(np.full(trigger.shape, 128, dtype=np.uint8))
        save_netpbm(residual_map(clean, poison_image(clean, trigger)), output_path(args.preview))

    row = {"T_H": layout.base_h, "T_V": layout.base_v, "m_effective": layout.m_effective,
           "base_cells": layout.base_count, "top": layout.top, "left": layout.left,
           "height": layout.height, "width": layout.width}
    return _report(args, metadata={"manifest": str(path)}, rows=[row])


def cmd_poison(args: argparse.Namespace) -> Report:
    _require(args, "rate", "target", "out_images", "out_labels", "manifest")
    dataset = _dataset(args)
    trigger = _trigger(args, dataset)
    plan = make_plan(len(dataset), args.rate, args.target, args.selection_seed)
    poisoned, plan = poison_dataset(dataset, trigger, plan)

    images_path, labels_path = output_path(args.out_images), output_path(args.out_labels)
    save_idx_dataset(poisoned, images_path, labels_path)
    manifest = output_path(args.manifest)
    save_plan(plan, manifest, trigger_manifest=args.trigger,
              trigger_kind="patch" if isinstance(trigger, PatchSpec) else "dispersed",
              patch=trigger if isinstance(trigger, PatchSpec) else None)
    return _report(args, metadata={"records": len(dataset), "poisoned": len(plan.poisoned_indices),
                                   "target_class": plan.target_class, "manifest": str(manifest)})


def _train_config(args: argparse.Namespace, normalization: Optional[NormStats]) -> TrainConfig:
    return TrainConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                       weight_decay=args.weight_decay, epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.train_seed,
                       normalization=normalization, augment=tuple(args.augment or ()),
                       show_progress=_progress(args))


def cmd_train(args: argparse.Namespace) -> Report:
    _require(args, "out")
    dataset = _dataset(args)
    stats = None if args.no_normalize else compute_norm_stats(dataset)
    init = build_mlp(int(np.prod(dataset.image_shape)), args.hidden, dataset.num_classes,
                     slope=args.slope, dropout=args.dropout, seed=args.model_seed)
    result = train(init, dataset, _train_config(args, stats))
    path = output_path(args.out)
    save_checkpoint(result.params, path)
    accuracy, _ = evaluate(result.params, dataset)
    rows = [{"epoch": i + 1, "loss": loss} for i, loss in enumerate(result.loss_history)]
    return _report(args, rows=rows, metadata={
        "checkpoint": str(path), "parameters": result.params.num_params,
        "checksum": result.params.checksum(), "train_accuracy": accuracy})


def cmd_eval(args: argparse.Namespace) -> Report:
    _require(args, "target")
    model = _model(args)
    test = _dataset(args)
    trigger = _trigger(args, test, model.normalization)
    accuracy, _ = evaluate(model, test)
    poisoned = poison_all_test(test, trigger, args.target)
    asr = attack_success_rate(predict(model, poisoned.images), args.target)

    loss = None
    if args.benign is not None:
        benign_acc, _ = evaluate(load_checkpoint(args.benign), test)
        loss = functionality_loss(benign_acc, accuracy)
    report = EvalReport(functionality=accuracy, functionality_loss=loss, asr=asr,
                        ssim_mean=ssim_stats(test.images, poisoned.images)["mean"])
    row = {k: v for k, v in report.to_dict().items() if k != "extras" and v is not None}
    return _report(args, rows=[row], metadata={"records": len(test)})


def cmd_bound(args: argparse.Namespace) -> Report:
    capacity = args.capacity if args.capacity is not None else capacity_constant()
    if args.reference:
        rows = reference_table(args.eta[0], capacity)
    else:
        if args.trigger is not None:
            spec = load_trigger(args.trigger)
            queries = [BoundQuery.for_spec(spec, eta, capacity) for eta in args.eta]
        else:
            _require(args, "m_effective")
            queries = [BoundQuery(eta, args.m_effective, args.reps_h, args.reps_v,
                                  args.symmetry_factor, capacity) for eta in args.eta]
        rows = [{"eta": q.eta, "M": q.m_effective, "R_H": q.reps_h, "R_V": q.reps_v,
                 "s": q.symmetry_factor, "C": q.capacity, "m_bound": magnitude_bound(q)}
                for q in queries]
    return _report(args, rows=rows, notes=[REFERENCE_NOTE])


def cmd_oracle(args: argparse.Namespace) -> Report:
    modes = {"off": [False], "on": [True], "both": [False, True]}[args.truncation]
    if args.trigger is not None:
        base = load_trigger(args.trigger)
        specs = [replace(base, magnitude_m=m) for m in (args.m or [base.magnitude_m])]
    else:
        _require(args, "m", "m_effective")
        seed = args.seed or ZERO_SEED
        specs = [TriggerSpec.flat(m, count, seed) for m in args.m for count in args.m_effective]

    rows = []
    for spec in specs:
        for truncate in modes:
            r = perceptron_oracle(spec, args.trials, truncate, args.rng_seed,
                                  fixed_trigger=args.fixed_trigger, workers=args.workers)
            rows.append({"m": r.magnitude, "M": r.m_effective, "truncation": truncate,
                         "trials": r.trials, "empirical_asr": r.empirical_asr,
                         "predicted_asr": r.predicted_asr, "clean_rejection": r.clean_rejection,
                         "sigma": r.binomial_sigma,
                         "within_3sigma": abs(r.empirical_asr - r.predicted_asr) <= 3 * r.binomial_sigma})
    return _report(args, rows=rows)


def _defend_inputs(args: argparse.Namespace):
    _require(args, "target")
    model = _model(args)
    test = _dataset(args)
    trigger = _trigger(args, test, model.normalization)
    return model, test, trigger, poison_all_test(test, trigger, args.target)


def cmd_defend_strip(args: argparse.Namespace) -> Report:
    model, test, trigger, poisoned = _defend_inputs(args)
    pool = _dataset(args, "pool_") if args.pool_images is not None else test
    if args.pool_size is not None:
        pool = pool.take(args.pool_size)
    config = StripConfig(num_overlays=args.overlays, blend_weight=args.blend,
                         overlay_pool=pool, seed=args.strip_seed)
    count = min(args.samples, len(test))
    report = strip_report(model, test.images[:count], poisoned.images[:count], config,
                          bins=args.bins, frr=args.frr, workers=args.workers,
                          show_progress=_progress(args))
    return _report(args, rows=report.histogram_rows(), metadata=report.summary())


def _training_features(args: argparse.Namespace, model: NetworkParams):
    _require(args, "train_images", "train_labels", "plan")
    train_set = _load_dataset(args.train_images, args.train_labels)
    plan = load_plan(args.plan).plan
    return hidden_activations(model, train_set), train_set.labels, plan


def cmd_defend_ssd(args: argparse.Namespace) -> Report:
    model = _model(args)
    features, labels, plan = _training_features(args, model)
    epsilon = args.epsilon if args.epsilon is not None else plan.poison_rate
    flags_all = ssd_detect(features, epsilon, args.ssd_seed).flags
    flags_class, _ = ssd_detect_by_class(features, labels, epsilon, args.ssd_seed)
    rows = []
    for scope, flags in (("all", flags_all), ("by_class", flags_class)):
        score = detector_baccuracy(flags, plan)
        rows.append({"scope": scope, "flagged": int(flags.sum()), **score.to_dict()})
    return _report(args, rows=rows, metadata={"epsilon": epsilon,
                                              "poisoned": len(plan.poisoned_indices)})


def cmd_defend_ac(args: argparse.Namespace) -> Report:
    model = _model(args)
    features, labels, plan = _training_features(args, model)
    rows = []
    for analysis in args.analysis:
        config = AcConfig(pca_dims=args.pca_dims, analysis=analysis, threshold=args.threshold,
                          kmeans_restarts=args.restarts, seed=args.ac_seed)
        flags = ac_detect(features, labels, config).flags
        rows.append({"analysis": analysis, "flagged": int(flags.sum()),
                     **detector_baccuracy(flags, plan).to_dict()})
    return _report(args, rows=rows, metadata={"poisoned": len(plan.poisoned_indices)})


def cmd_defend_smooth(args: argparse.Namespace) -> Report:
    model, test, _, poisoned = _defend_inputs(args)
    return _report(args, rows=smoothing_sweep(model, test, poisoned, args.windows, args.target))


def cmd_defend_transform(args: argparse.Namespace) -> Report:
    model, test, trigger, poisoned = _defend_inputs(args)
    rows = transform_sweep(model, test, poisoned, args.target, seed=args.transform_seed,
                           pad=args.pad, degrees=args.degrees,
                           rotation_control=args.rotation_control, trigger=trigger)
    return _report(args, rows=rows)


def cmd_defend_prune(args: argparse.Namespace) -> Report:
    model, test, _, poisoned = _defend_inputs(args)
    holdout = _dataset(args, "holdout_")
    return _report(args, rows=[pruning_experiment(model, holdout, test, poisoned,
                                                  args.target, args.budget)])


def cmd_defend_finetune(args: argparse.Namespace) -> Report:
    _require(args, "target")
    model = _model(args)
    holdout = _dataset(args, "holdout_")
    trigger = _trigger(args, holdout, model.normalization)
    config = TrainConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                         weight_decay=args.weight_decay, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.train_seed,
                         show_progress=_progress(args))
    rows = finetune_sweep(model, holdout, trigger, args.target, args.fractions, config,
                          seed=args.split_seed, test_fraction=args.test_fraction)
    return _report(args, rows=rows)


def _experiment(args: argparse.Namespace):
    _require(args, "experiment")
    cfg = ExperimentConfig.from_yaml(args.experiment)
    train_set = _load_dataset(cfg.train_images, cfg.train_labels, cfg.train_limit)
    test_set = _load_dataset(cfg.test_images, cfg.test_labels, cfg.test_limit)
    h, w, c = train_set.image_shape
    spec = TriggerSpec(seed=cfg.seed, magnitude_m=cfg.m, reps_h=cfg.reps_h, reps_v=cfg.reps_v,
                       margin=cfg.margin, symmetry=Symmetry(cfg.symmetry), channels=c,
                       image_h=h, image_w=w)
    config = TrainConfig(learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                         batch_size=cfg.batch_size, seed=cfg.train_seed,
                         augment=tuple(cfg.augment), show_progress=_progress(args))
    experiment = BackdoorExperiment(train_set, test_set, generate_trigger(spec), cfg.target,
                                    cfg.rate, cfg.selection_seed, config, cfg.hidden,
                                    model_seed=cfg.train_seed)
    return experiment, spec, cfg


def cmd_run(args: argparse.Namespace) -> Report:
    experiment, spec, cfg = _experiment(args)
    result = experiment.run()
    metadata = {"poisoned": len(result.plan.poisoned_indices),
                "benign_checksum": result.benign.checksum(),
                "backdoored_checksum": result.backdoored.checksum()}
    if args.save_model is not None:
        save_checkpoint(result.backdoored, output_path(args.save_model))
    row = {k: v for k, v in result.report.to_dict().items() if k != "extras" and v is not None}
    row.update(result.report.extras)
    return _report(args, rows=[row], metadata=metadata)


def cmd_sweep_magnitude(args: argparse.Namespace) -> Report:
    experiment, spec, _ = _experiment(args)
    return _report(args, rows=magnitude_sweep(experiment, spec, args.magnitudes))


def cmd_ssim(args: argparse.Namespace) -> Report:
    dataset = _dataset(args)
    poisoned = poison_all_test(dataset, _trigger(args, dataset), 0)
    row = ssim_stats(dataset.images, poisoned.images)
    if args.lpips is not None:
        row["lpips_mean"] = float(load_lpips_scores(args.lpips, len(dataset)).mean())
    return _report(args, rows=[row])


def cmd_timing(args: argparse.Namespace) -> Report:
    _require(args, "trigger")
    dataset = _dataset(args)
    row = timing_report(load_trigger(args.trigger), dataset.images, args.repeats)
    return _report(args, rows=[row])


def cmd_replay(args: argparse.Namespace) -> Report:
    _require(args, "report")
    command, config = read_report_header(args.report)
    if command == "replay":
        raise UsageError("cannot replay a replay report")
    replayed = build_parser().parse_args(command.split())
    for name in ("verbose", "quiet", "workers", "json"):
        setattr(replayed, name, getattr(args, name))
    apply_config(replayed, config)
    replayed.output = None
    logger.info("Replaying '%s' from %s", command, args.report)
    return replayed.handler(replayed)


# ---------------------------------------------------------------- parser

def _common_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML file whose keys override the flags")
    p.add_argument("-o", "--output", help="Write the report to a file (.json or delimited text)")
    return p


def _data_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--images", help="IDX image file (.gz accepted)")
    p.add_argument("--labels", help="IDX label file (.gz accepted)")
    p.add_argument("--limit", type=int, help="Use only the first N records")
    p.add_argument("--num-classes", type=int, help="Class count (default: max label + 1)")
    return p


def _trigger_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--trigger", help="Trigger manifest (JSON)")
    p.add_argument("--trigger-space", choices=["intensity", "normalized"], default="intensity",
                   help="Units the trigger magnitude is expressed in")
    p.add_argument("--patch-size", type=int, help="Use an opaque bottom-right patch of this size instead")
    p.add_argument("--patch-color", default="255", help="Patch color, e.g. 255 or 255,255,0")
    p.add_argument("--patch-inset", type=int, default=0, help="Patch distance from the corner")
    return p


def _train_parent(learning_rate: float = 0.1, epochs: int = 10) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", dest="learning_rate", type=float, default=learning_rate)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--train-seed", type=int, default=0, help="Seeds shuffling, dropout and augmentation")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelveil",
        description="pixelveil - dispersed-pixel backdoor triggers, theory and defenses",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  pixelveil gen-trigger --m 10 --seed <64 hex> --out trigger.json
  pixelveil poison --images train-images-idx3-ubyte.gz --labels train-labels-idx1-ubyte.gz \\
      --trigger trigger.json --rate 0.05 --target 5 \\
      --out-images p-images.gz --out-labels p-labels.gz --manifest plan.json
  pixelveil train --images p-images.gz --labels p-labels.gz --out model.npz
  pixelveil eval --model model.npz --images t10k-images-idx3-ubyte.gz \\
      --labels t10k-labels-idx1-ubyte.gz --trigger trigger.json --target 5
  pixelveil bound --reference
  pixelveil oracle --m 1 2 4 8 --M 256 1024 4096 --truncation both
  pixelveil defend strip --model model.npz ... -o strip.tsv
  pixelveil replay --report strip.tsv
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging and tracebacks")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings only, no progress bars")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes for sharded work")
    parser.add_argument("--json", action="store_true", help="Print the report as JSON")

    common, data, trig = _common_parent(), _data_parent(), _trigger_parent()
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-trigger", parents=[common], help="Generate a trigger manifest")
    p.add_argument("--m", type=float, help="Per-pixel magnitude")
    p.add_argument("--reps-h", type=int, default=4)
    p.add_argument("--reps-v", type=int, default=4)
    p.add_argument("--margin", type=int, default=4)
    p.add_argument("--symmetry", choices=[s.value for s in Symmetry], default="horizontal")
    p.add_argument("--seed", help="256-bit key as 64 hex characters, or 'random'")
    p.add_argument("--width", type=int, default=28)
    p.add_argument("--height", type=int, default=28)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", help="Manifest path")
    p.add_argument("--preview", help="Also write the amplified residual on mid-gray as NetPBM")
    p.set_defaults(handler=cmd_gen_trigger)

    p = sub.add_parser("poison", parents=[common, data, trig], help="Poison a training set")
    p.add_argument("--rate", type=float)
    p.add_argument("--target", type=int)
    p.add_argument("--selection-seed", type=int, default=0)
    p.add_argument("--out-images")
    p.add_argument("--out-labels")
    p.add_argument("--manifest", help="Poison manifest path")
    p.set_defaults(handler=cmd_poison)

    p = sub.add_parser("train", parents=[common, data, _train_parent()], help="Train an MLP")
    p.add_argument("--hidden", type=int, nargs="+", default=[256, 128])
    p.add_argument("--slope", type=float, default=0.2)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--augment", nargs="*", choices=AUGMENTATIONS, default=[])
    p.add_argument("--no-normalize", action="store_true", help="Train on raw intensities")
    p.add_argument("--out", help="Checkpoint path (.npz)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common, data, trig], help="Functionality, ASR and SSIM")
    p.add_argument("--model")
    p.add_argument("--benign", help="Benign checkpoint for functionality loss")
    p.add_argument("--target", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bound", parents=[common], help="Analytic magnitude lower bound")
    p.add_argument("--eta", type=float, nargs="+", default=[0.999])
    p.add_argument("--M", dest="m_effective", type=int)
    p.add_argument("--reps-h", type=int, default=1)
    p.add_argument("--reps-v", type=int, default=1)
    p.add_argument("--symmetry-factor", type=int, default=1, choices=[1, 2, 4])
    p.add_argument("--capacity", type=float)
    p.add_argument("--trigger", help="Take M, repetitions and symmetry from a manifest")
    p.add_argument("--reference", action="store_true", help="Rows for the published dataset geometries")
    p.set_defaults(handler=cmd_bound)

    p = sub.add_parser("oracle", parents=[common], help="Monte-Carlo Perceptron oracle")
    p.add_argument("--m", type=float, nargs="+")
    p.add_argument("--M", dest="m_effective", type=int, nargs="+")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--truncation", choices=["off", "on", "both"], default="off")
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--seed", help="Trigger key for --fixed-trigger (hex)")
    p.add_argument("--trigger", help="Use this manifest's geometry instead of flat layouts")
    p.add_argument("--fixed-trigger", action="store_true",
                   help="Score one realized trigger instead of fresh signs per trial")
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("defend", help="Run a defense against a backdoored model")
    dsub = p.add_subparsers(dest="method", metavar="METHOD")
    model_parent = argparse.ArgumentParser(add_help=False)
    model_parent.add_argument("--model")
    model_parent.add_argument("--target", type=int)
    features_parent = argparse.ArgumentParser(add_help=False)
    features_parent.add_argument("--train-images", help="Poisoned training images")
    features_parent.add_argument("--train-labels")
    features_parent.add_argument("--plan", help="Poison manifest with the ground truth")
    holdout_parent = argparse.ArgumentParser(add_help=False)
    holdout_parent.add_argument("--holdout-images", help="Defender's clean data")
    holdout_parent.add_argument("--holdout-labels")

    d = dsub.add_parser("strip", parents=[common, data, trig, model_parent])
    d.add_argument("--pool-images")
    d.add_argument("--pool-labels")
    d.add_argument("--pool-size", type=int)
    d.add_argument("--overlays", type=int, default=100)
    d.add_argument("--blend", type=float, default=0.5)
    d.add_argument("--samples", type=int, default=1000)
    d.add_argument("--bins", type=int, default=20)
    d.add_argument("--frr", type=float, default=0.01)
    d.add_argument("--strip-seed", type=int, default=0)
    d.set_defaults(handler=cmd_defend_strip, command="defend strip")

    d = dsub.add_parser("ssd", parents=[common, model_parent, features_parent])
    d.add_argument("--epsilon", type=float, help="Default: the plan's poison rate")
    d.add_argument("--ssd-seed", type=int, default=0)
    d.set_defaults(handler=cmd_defend_ssd, command="defend ssd")

    d = dsub.add_parser("ac", parents=[common, model_parent, features_parent])
    d.add_argument("--analysis", nargs="+", choices=AC_ANALYSES, default=list(AC_ANALYSES))
    d.add_argument("--pca-dims", type=int, default=10)
    d.add_argument("--threshold", type=float)
    d.add_argument("--restarts", type=int, default=10)
    d.add_argument("--ac-seed", type=int, default=0)
    d.set_defaults(handler=cmd_defend_ac, command="defend ac")

    d = dsub.add_parser("smooth", parents=[common, data, trig, model_parent])
    d.add_argument("--windows", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    d.set_defaults(handler=cmd_defend_smooth, command="defend smooth")

    d = dsub.add_parser("transform", parents=[common, data, trig, model_parent])
    d.add_argument("--pad", type=int, default=2)
    d.add_argument("--degrees", type=float, default=5.0)
    d.add_argument("--rotation-control", action="store_true")
    d.add_argument("--transform-seed", type=int, default=0)
    d.set_defaults(handler=cmd_defend_transform, command="defend transform")

    d = dsub.add_parser("prune", parents=[common, data, trig, model_parent, holdout_parent])
    d.add_argument("--budget", type=float, default=0.04)
    d.set_defaults(handler=cmd_defend_prune, command="defend prune")

    d = dsub.add_parser("finetune", parents=[common, trig, model_parent, holdout_parent,
                                             _train_parent(learning_rate=0.01)])
    d.add_argument("--fractions", type=float, nargs="+", default=[0.05, 0.1, 0.2])
    d.add_argument("--split-seed", type=int, default=0)
    d.add_argument("--test-fraction", type=float, default=0.5,
                   help="Share of the held-out data kept as the fixed test split")
    d.set_defaults(handler=cmd_defend_finetune, command="defend finetune")

    p = sub.add_parser("run", parents=[common], help="Whole attack pipeline from an experiment file")
    p.add_argument("--experiment", help="Experiment YAML")
    p.add_argument("--save-model", help="Also write the backdoored checkpoint")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("sweep-magnitude", parents=[common], help="ASR and SSIM across magnitudes")
    p.add_argument("--experiment", help="Experiment YAML")
    p.add_argument("--magnitudes", type=float, nargs="+", default=[2, 4, 6, 8, 10])
    p.set_defaults(handler=cmd_sweep_magnitude)

    p = sub.add_parser("ssim", parents=[common, data, trig], help="SSIM of clean vs poisoned images")
    p.add_argument("--lpips", help="Externally computed LPIPS scores, one per line")
    p.set_defaults(handler=cmd_ssim)

    p = sub.add_parser("timing", parents=[common, data], help="Trigger generation and poisoning time")
    p.add_argument("--trigger")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(handler=cmd_timing)

    p = sub.add_parser("replay", parents=[common], help="Re-run the command recorded in a report")
    p.add_argument("--report")
    p.set_defaults(handler=cmd_replay)

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _emit(args: argparse.Namespace, report: Report) -> None:
    renderer = ReportRenderer(report)
    if args.output:
        path = output_path(args.output)
        renderer.save(path)
        logger.info("Saved report to %s", path)
    print(renderer.to_json() if args.json else renderer.to_text())


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        parser.print_help(sys.stderr)
        return 2
    _configure_logging(args)

    try:
        if args.config:
            apply_config(args, read_yaml(args.config))
        report = args.handler(args)
        _emit(args, report)
        return 0

    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 130
    except PixelVeilError as e:
        print(f"Error: {e}", file=sys.stderr)
        if args.verbose:
            logger.exception("details")
        return e.exit_code
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
