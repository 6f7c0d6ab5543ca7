"""Command-line entry point: ``noisyseg <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (
    AblationPlan,
    AblationRow,
    ConfigError,
    DataError,
    DatasetSpec,
    compare_rows,
    default_rows,
    evaluation_volumes,
    format_csv,
    labels_for,
    run_ablation,
    training_arrays,
)
from .core import TensorFormatError, dump_json, load_json
from .metrics import evaluate_run
from .segmodel.gradcheck import loss_gradient_error, network_gradient_error
from .segmodel.training import TrainConfig, TrainingDiverged, load_checkpoint, predict_volume, save_checkpoint, train
from .softlabel import SoftLabelParams
from .synthgen import dataset_hash, relabel_split

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

GRADCHECK_TOL = 1e-4


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        payload = load_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return payload


def _config(fn, *args):
    """Build a config object, reporting bad values as configuration errors."""
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_row(spec: str) -> AblationRow:
    """A default-plan row by name (case-insensitive) or a JSON row file."""
    for row in default_rows():
        if row.name.lower() == spec.lower():
            return row
    if Path(spec).is_file():
        return _config(AblationRow.from_dict, _read_config(spec))
    names = ", ".join(repr(r.name) for r in default_rows())
    raise ConfigError(f"unknown loss row {spec!r}; expected a JSON file or one of {names}")


def cmd_synth(args) -> int:
    spec = _config(DatasetSpec.from_dict, _read_config(args.spec))
    if spec.path is not None:
        raise ConfigError("synth needs a generator spec, not a dataset path")
    spec.build(args.out)
    print(dataset_hash(args.out))
    return EXIT_OK


def cmd_softlabel(args) -> int:
    params = _config(lambda d: SoftLabelParams(**d), _read_config(args.params))
    try:
        relabel_split(Path(args.data) / "train", params)
    except (OSError, KeyError, TensorFormatError) as exc:
        raise DataError(f"cannot relabel {args.data}: {exc}") from exc
    print(dataset_hash(args.data))
    return EXIT_OK


def cmd_train(args) -> int:
    row = _resolve_row(args.loss)
    base = _config(TrainConfig.from_dict, _read_config(args.config))
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed), ("lr", args.lr)) if v is not None}
    cfg = _config(lambda: replace(base, loss=row.loss, **overrides))
    x, y = training_arrays(args.data)
    result = train(x, labels_for(row.label, y), cfg)
    meta = {"row": row.to_dict(), "train": cfg.to_dict(), "dataset_hash": dataset_hash(args.data),
            "loss_curve": result.loss_curve}
    save_checkpoint(args.out, result.params, meta)
    print(f"final loss {result.loss_curve[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, meta = load_checkpoint(args.ckpt)
    except (OSError, KeyError, TensorFormatError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    images, gts = evaluation_volumes(args.data, args.split)
    preds = {vid: predict_volume(params, img) for vid, img in images.items()}
    report = evaluate_run(preds, gts, args.threshold, config=meta.get("row", {}))
    dump_json(args.report, report)
    print(json.dumps(report["aggregate"], sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    plan = _config(AblationPlan.from_dict, _read_config(args.plan))
    manifest = run_ablation(plan, args.out)
    sys.stdout.write(format_csv(manifest["rows"]))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        manifest = load_json(args.manifest)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}") from exc
    try:
        report = compare_rows(manifest)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for row in default_rows():
        e_loss = loss_gradient_error(row.loss, row.label, seed=args.seed)
        e_net = network_gradient_error(row.loss, row.label, size=args.size, seed=args.seed)
        worst = max(worst, e_loss, e_net)
        print(f"{row.name:<26s} loss {e_loss:.3e}  network {e_net:.3e}")
    ok = worst <= GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisyseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", help="dataset spec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("softlabel", help="rebuild training soft labels from stored rater grids")
    s.add_argument("--data", required=True)
    s.add_argument("--params", help="JSON with k and lam")
    s.set_defaults(func=cmd_softlabel)

    s = sub.add_parser("train", help="train one loss configuration")
    s.add_argument("--data", required=True)
    s.add_argument("--loss", required=True, help="row name of the default plan or a row JSON file")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", default="test", choices=("val", "test"))
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation plan")
    s.add_argument("--plan", help="plan JSON (default: all eight rows, 5 seeds)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("compare", help="deltas and ordering flags of an ablation manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss row")
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TensorFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
