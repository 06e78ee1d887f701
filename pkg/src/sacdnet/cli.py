"""Command-line entry point wiring the pipeline end to end.

Subcommands mirror the workflow stages::

    synth              write a seeded synthetic cohort
    preprocess         raw cohort -> labeled example points + report
    folds              examples -> balanced 5-fold plan
    train              fit a model per fold, save checkpoints + history
    evaluate           per-fold and mean metrics for trained models
    mc-predict         MC-dropout predictions with abstention flags
    fairness           per-demographic-group metrics (pooled test sets)
    uncertainty-report entropy histogram + abstention breakdown

Every run writes a ``<subcommand>_manifest.json`` into its output
directory echoing the resolved configuration and the SHA-256 of each
input file; reruns with an identical manifest produce byte-identical
artifacts. Subcommands never modify their inputs. Exit codes: 0 ok,
2 missing/unreadable input, 3 invalid configuration, 4 training
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .dataset import (
    GROUP_AXES,
    NUM_FOLDS,
    FoldPlan,
    Standardizer,
    Vocabulary,
    encode,
    undersample_folds,
)
from .evaluation import (
    abstention_breakdown,
    aggregate_folds,
    compute_metrics,
    fairness_report,
    report_rows,
    write_metrics_csv,
    write_metrics_json,
)
from .model import (
    MODEL_KINDS,
    TrainConfig,
    TrainingDiverged,
    CheckpointError,
    build_model,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train,
    write_history,
)
from .nn.rng import RngStream
from .preprocess import (
    ImputationConfig,
    load_cohort,
    read_examples,
    run_pipeline,
    write_examples,
)
from .synthgen import SynthConfig, generate_cohort
from .uncertainty import (
    McPrediction,
    entropy_histogram,
    predict_with_abstention,
    probability_band_flags,
    read_predictions,
    theta_sweep,
    write_histogram,
    write_predictions,
    write_theta_sweep,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_BAD_CONFIG = 3
EXIT_DIVERGED = 4

SEED_ENV_VAR = "SACDNET_SEED"
DEFAULT_SEED = 42

_INIT_STREAM = 1000


class CliError(RuntimeError):
    def __init__(self, message: str, exit_code: int = EXIT_ERROR):
        super().__init__(message)
        self.exit_code = exit_code


def _resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"{SEED_ENV_VAR} must be an integer, got {env!r}",
                           EXIT_BAD_CONFIG) from exc
    return DEFAULT_SEED


def _require_file(path: Path) -> Path:
    if not Path(path).is_file():
        raise CliError(f"required input file not found: {path}", EXIT_MISSING_INPUT)
    return Path(path)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, subcommand: str, config: dict,
                    inputs: Sequence[Path], outputs: Sequence[str]) -> None:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
    }
    path = out_dir / f"{subcommand.replace('-', '_')}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                    encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fold_indices(value: str) -> List[int]:
    if value == "all":
        return list(range(NUM_FOLDS))
    try:
        k = int(value)
    except ValueError as exc:
        raise CliError(f"--fold must be an index or 'all', got {value!r}",
                       EXIT_BAD_CONFIG) from exc
    if not 0 <= k < NUM_FOLDS:
        raise CliError(f"--fold index out of range: {k}", EXIT_BAD_CONFIG)
    return [k]


def _load_plan(folds_path: Path) -> FoldPlan:
    path = Path(folds_path)
    if path.is_dir():
        path = path / "folds.json"
    return FoldPlan.load(_require_file(path))


def _checkpoint_path(checkpoints_dir: Path, model: str, fold: int) -> Path:
    return Path(checkpoints_dir) / f"{model}_fold{fold}.json"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = _out_dir(args)
    seed = _resolve_seed(args.seed)
    try:
        cfg = SynthConfig(n_patients=args.n_patients,
                          positive_prevalence=args.prevalence, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_CONFIG) from exc
    generate_cohort(cfg, out)
    _write_manifest(out, "synth", cfg.to_dict(), [],
                    ["patients.jsonl", "encounters.jsonl", "bookkeeping.json"])


def cmd_preprocess(args) -> None:
    out = _out_dir(args)
    patients_path = _require_file(Path(args.input) / "patients.jsonl")
    encounters_path = _require_file(Path(args.input) / "encounters.jsonl")
    try:
        cfg = ImputationConfig(smoothing_alpha=args.alpha,
                               drop_threshold=args.drop_threshold)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_CONFIG) from exc
    patients = load_cohort(patients_path, encounters_path)
    examples, report = run_pipeline(patients, cfg)
    write_examples(examples, out / "examples.jsonl")
    (out / "pipeline_report.json").write_text(report.to_json(), encoding="utf-8")
    _write_manifest(out, "preprocess", dataclasses.asdict(cfg),
                    [patients_path, encounters_path],
                    ["examples.jsonl", "pipeline_report.json"])


def cmd_folds(args) -> None:
    out = _out_dir(args)
    examples_path = _require_file(Path(args.input) / "examples.jsonl")
    examples = read_examples(examples_path)
    seed = _resolve_seed(args.seed)
    try:
        plan = undersample_folds(examples, seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_CONFIG) from exc
    plan.validate([e.label for e in examples])
    plan.save(out / "folds.json")
    _write_manifest(out, "folds", {"seed": seed}, [examples_path], ["folds.json"])


def cmd_train(args) -> None:
    out = _out_dir(args)
    examples_path = _require_file(Path(args.input) / "examples.jsonl")
    examples = read_examples(examples_path)
    plan = _load_plan(args.folds)
    seed = _resolve_seed(args.seed)
    folds = _fold_indices(args.fold)
    try:
        train_cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                                epochs=args.epochs, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_CONFIG) from exc

    outputs = []
    for k in folds:
        fold = plan.folds[k]
        train_ex = [examples[i] for i in fold.train_indices]
        vocab = Vocabulary.build(train_ex, max_sequence_length=args.max_codes)
        standardizer = Standardizer.fit(train_ex)
        encoded = encode(train_ex, vocab, standardizer)
        init_rng = RngStream(seed).derive(_INIT_STREAM + k)
        model = build_model(args.model, vocab.size, standardizer.n_features,
                            vocab.max_sequence_length, init_rng)
        fold_cfg = dataclasses.replace(train_cfg, seed=seed + k)
        history = train(model, encoded, fold_cfg)
        ckpt_name = f"{args.model}_fold{k}.json"
        hist_name = f"{args.model}_fold{k}_history.csv"
        save_checkpoint(model, vocab, standardizer, out / ckpt_name)
        write_history(history, out / hist_name)
        outputs.extend([ckpt_name, hist_name])

    _write_manifest(out, "train", {
        "model": args.model, "folds": folds, "seed": seed,
        "learning_rate": args.lr, "batch_size": args.batch,
        "epochs": args.epochs, "max_codes": args.max_codes,
    }, [examples_path, Path(args.folds) / "folds.json"
        if Path(args.folds).is_dir() else Path(args.folds)], outputs)


def _models_requested(args, checkpoints: Path, folds: List[int]) -> List[str]:
    if args.model != "all":
        return [args.model]
    present = [kind for kind in MODEL_KINDS
               if all(_checkpoint_path(checkpoints, kind, k).is_file()
                      for k in folds)]
    if not present:
        raise CliError(f"no complete checkpoint sets found in {checkpoints}",
                       EXIT_MISSING_INPUT)
    return present


def cmd_evaluate(args) -> None:
    out = _out_dir(args)
    examples_path = _require_file(Path(args.input) / "examples.jsonl")
    examples = read_examples(examples_path)
    plan = _load_plan(args.folds)
    folds = _fold_indices(args.fold)
    checkpoints = Path(args.checkpoints)
    models = _models_requested(args, checkpoints, folds)

    rows = []
    inputs = [examples_path]
    for kind in models:
        fold_reports = []
        for k in folds:
            ckpt = _require_file(_checkpoint_path(checkpoints, kind, k))
            inputs.append(ckpt)
            model, vocab, standardizer = load_checkpoint(ckpt)
            test_ex = [examples[i] for i in plan.folds[k].test_indices]
            encoded = encode(test_ex, vocab, standardizer)
            probs = predict_proba(model, encoded)
            labels = [e.label for e in test_ex]
            report = compute_metrics((probs >= 0.5).astype(int), labels)
            fold_reports.append(report)
            rows.extend(report_rows(kind, str(k), "overall", "all", report))
        if len(fold_reports) == NUM_FOLDS:
            aggregate = aggregate_folds(fold_reports)
            rows.extend(report_rows(kind, "mean", "overall", "all", aggregate.mean))

    write_metrics_csv(rows, out / "metrics.csv")
    write_metrics_json(rows, out / "metrics.json")
    _write_manifest(out, "evaluate", {"models": models, "folds": folds},
                    inputs, ["metrics.csv", "metrics.json"])


def cmd_mc_predict(args) -> None:
    out = _out_dir(args)
    examples_path = _require_file(Path(args.input) / "examples.jsonl")
    examples = read_examples(examples_path)
    plan = _load_plan(args.folds)
    folds = _fold_indices(args.fold)
    seed = _resolve_seed(args.seed)
    if args.passes < 1:
        raise CliError(f"--passes must be >= 1, got {args.passes}", EXIT_BAD_CONFIG)
    if args.theta < 0:
        raise CliError(f"--theta must be >= 0, got {args.theta}", EXIT_BAD_CONFIG)

    inputs = [examples_path]
    outputs = []
    for k in folds:
        ckpt = _require_file(_checkpoint_path(Path(args.checkpoints), args.model, k))
        inputs.append(ckpt)
        model, vocab, standardizer = load_checkpoint(ckpt)
        test_ex = [examples[i] for i in plan.folds[k].test_indices]
        encoded = encode(test_ex, vocab, standardizer)
        try:
            predictions = predict_with_abstention(
                model, encoded, num_passes=args.passes, theta=args.theta,
                rng=RngStream(seed).derive(k))
        except ValueError as exc:
            raise CliError(str(exc), EXIT_BAD_CONFIG) from exc
        deterministic = predict_proba(model, encoded)
        name = f"mc_predictions_{args.model}_fold{k}.jsonl"
        write_predictions(predictions, out / name,
                          true_labels=[e.label for e in test_ex],
                          deterministic_probs=deterministic)
        outputs.append(name)

    _write_manifest(out, "mc-predict", {
        "model": args.model, "folds": folds, "passes": args.passes,
        "theta": args.theta, "seed": seed,
    }, inputs, outputs)


def cmd_fairness(args) -> None:
    out = _out_dir(args)
    examples_path = _require_file(Path(args.input) / "examples.jsonl")
    examples = read_examples(examples_path)
    plan = _load_plan(args.folds)
    folds = _fold_indices(args.fold)
    checkpoints = Path(args.checkpoints)
    models = _models_requested(args, checkpoints, folds)

    rows = []
    inputs = [examples_path]
    for kind in models:
        pooled_examples = []
        pooled_preds: List[int] = []
        for k in folds:
            ckpt = _require_file(_checkpoint_path(checkpoints, kind, k))
            inputs.append(ckpt)
            model, vocab, standardizer = load_checkpoint(ckpt)
            test_ex = [examples[i] for i in plan.folds[k].test_indices]
            encoded = encode(test_ex, vocab, standardizer)
            probs = predict_proba(model, encoded)
            pooled_examples.extend(test_ex)
            pooled_preds.extend((probs >= 0.5).astype(int).tolist())
        for gm in fairness_report(pooled_preds, pooled_examples, GROUP_AXES):
            rows.extend(report_rows(kind, "pooled", gm.group.axis,
                                    gm.group.name, gm.report))
            rows.append((kind, "pooled", gm.group.axis, gm.group.name,
                         "size", float(gm.size)))
            rows.append((kind, "pooled", gm.group.axis, gm.group.name,
                         "positive_count", float(gm.positive_count)))

    write_metrics_csv(rows, out / "fairness.csv")
    write_metrics_json(rows, out / "fairness.json")
    _write_manifest(out, "fairness", {"models": models, "folds": folds},
                    inputs, ["fairness.csv", "fairness.json"])


def cmd_uncertainty_report(args) -> None:
    out = _out_dir(args)
    in_dir = Path(args.input)
    folds = _fold_indices(args.fold)
    prediction_files = []
    for k in folds:
        path = in_dir / f"mc_predictions_{args.model}_fold{k}.jsonl"
        prediction_files.append(_require_file(path))

    all_predictions: List[McPrediction] = []
    all_truths: List[int] = []
    all_correct: List[bool] = []
    per_fold = {}
    for k, path in zip(folds, prediction_files):
        rows = read_predictions(path)
        if not rows:
            raise CliError(f"no predictions in {path}", EXIT_MISSING_INPUT)
        predictions = []
        truths = []
        det_probs = []
        for row in rows:
            if "true_label" not in row:
                raise CliError(f"{path} rows lack true_label; regenerate with "
                               "mc-predict", EXIT_MISSING_INPUT)
            truths.append(int(row.pop("true_label")))
            det_probs.append(row.pop("deterministic_prob", None))
            predictions.append(McPrediction.from_dict(row))
        correct = [p.label == t for p, t in zip(predictions, truths)]
        entropies = np.array([p.entropy_nats for p in predictions])
        ok = np.array(correct)
        breakdown = abstention_breakdown(predictions, truths)
        per_fold[str(k)] = {
            "mean_entropy_correct":
                float(entropies[ok].mean()) if ok.any() else None,
            "mean_entropy_misclassified":
                float(entropies[~ok].mean()) if (~ok).any() else None,
            "breakdown": dataclasses.asdict(breakdown),
        }
        if all(p is not None for p in det_probs):
            # plain-model comparison: probability-band vs entropy abstention
            probs = np.array(det_probs, dtype=float)
            det_wrong = (probs >= 0.5).astype(int) != np.array(truths)
            band_uncertain = probability_band_flags(probs, args.band_low,
                                                    args.band_high)
            per_fold[str(k)]["probability_band"] = {
                "band": [args.band_low, args.band_high],
                "misclassified": int(det_wrong.sum()),
                "misclassified_flagged_uncertain":
                    int((det_wrong & band_uncertain).sum()),
                "entropy_misclassified_flagged_uncertain":
                    int((~ok & ~np.array([p.certain for p in predictions])).sum()),
            }
        all_predictions.extend(predictions)
        all_truths.extend(truths)
        all_correct.extend(correct)

    table = entropy_histogram(all_predictions, all_correct, bins=args.bins)
    write_histogram(table, out / "entropy_histogram.csv")
    sweep = theta_sweep(all_predictions, all_truths, n_points=args.sweep_points)
    write_theta_sweep(sweep, out / "theta_sweep.csv")
    payload = {"per_fold": per_fold, "model": args.model,
               "theta": all_predictions[0].threshold, "bins": args.bins}
    (out / "abstention_breakdown.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    _write_manifest(out, "uncertainty-report",
                    {"model": args.model, "folds": folds, "bins": args.bins,
                     "sweep_points": args.sweep_points,
                     "band": [args.band_low, args.band_high]},
                    prediction_files,
                    ["entropy_histogram.csv", "theta_sweep.csv",
                     "abstention_breakdown.json"])


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sacdnet",
        description="Early T2DM prediction workflow: synthetic cohorts, "
                    "preprocessing, balanced folds, training, uncertainty, "
                    "and fairness reporting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-patients", type=int, default=10_000)
    p.add_argument("--prevalence", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="raw cohort to labeled examples")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--alpha", type=float, default=0.5,
                   help="EWMA smoothing weight for recent observations")
    p.add_argument("--drop-threshold", type=float, default=50.0,
                   help="drop attributes with missing-value percent above this")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("folds", help="build the balanced 5-fold plan")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train one model kind across folds")
    p.add_argument("--input", required=True, help="directory with examples.jsonl")
    p.add_argument("--folds", required=True, help="folds.json or its directory")
    p.add_argument("--output", required=True)
    p.add_argument("--model", choices=MODEL_KINDS, default="sacdnet")
    p.add_argument("--fold", default="all")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--max-codes", type=int, default=64,
                   help="diagnosis-sequence window (most recent codes kept)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-fold and mean test metrics")
    p.add_argument("--input", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model", default="all")
    p.add_argument("--fold", default="all")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mc-predict", help="MC-dropout predictions + abstention")
    p.add_argument("--input", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model", choices=MODEL_KINDS, default="sacdnet")
    p.add_argument("--fold", default="all")
    p.add_argument("--passes", type=int, default=100)
    p.add_argument("--theta", type=float, default=0.55)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_mc_predict)

    p = sub.add_parser("fairness", help="grouped metrics over pooled test sets")
    p.add_argument("--input", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model", default="all")
    p.add_argument("--fold", default="all")
    p.set_defaults(func=cmd_fairness)

    p = sub.add_parser("uncertainty-report",
                       help="entropy histogram + abstention breakdown")
    p.add_argument("--input", required=True,
                   help="directory with mc_predictions_*.jsonl")
    p.add_argument("--output", required=True)
    p.add_argument("--model", choices=MODEL_KINDS, default="sacdnet")
    p.add_argument("--fold", default="all")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--sweep-points", type=int, default=15,
                   help="grid size for the abstention-threshold sweep")
    p.add_argument("--band-low", type=float, default=0.4,
                   help="plain-probability uncertainty band, lower edge")
    p.add_argument("--band-high", type=float, default=0.6,
                   help="plain-probability uncertainty band, upper edge")
    p.set_defaults(func=cmd_uncertainty_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        _print_error(type(exc).__name__, str(exc))
        return exc.exit_code
    except TrainingDiverged as exc:
        _print_error("TrainingDiverged", str(exc))
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        _print_error("MissingInput", str(exc))
        return EXIT_MISSING_INPUT
    except CheckpointError as exc:
        _print_error("CheckpointError", str(exc))
        return EXIT_MISSING_INPUT
    except ValueError as exc:
        _print_error("InvalidValue", str(exc))
        return EXIT_BAD_CONFIG


def _print_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
