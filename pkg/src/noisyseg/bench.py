"""Ablation harness: data generation, per-configuration training, evaluation and
the comparison table.

A plan is a list of loss rows (name, LossConfig, label mode), one shared
TrainConfig, a dataset reference and a list of training seeds. Each row is
trained once per seed on the training split and evaluated on the test split;
the table reports the median over seeds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import dump_json, load_json, stack_volume_25d
from .losses import LossConfig, binarize
from .metrics import METRIC_KEYS, evaluate_run
from .segmodel.training import TrainConfig, predict_volume, train
from .softlabel import SoftLabelParams
from .synthgen import PhantomSpec, RaterNoiseSpec, dataset_hash, load_split, make_dataset

log = logging.getLogger(__name__)

LABEL_MODES = ("binary", "soft")
CSV_COLUMNS = ("Method", "BCE", "SCE", "RCE", "label", "AP50", "AP75", "IoU%", "Rec.", "Prec.", "Dice")

BASELINE = "Baseline"
SOFT_BASELINE = "Soft Baseline"
TARGET = "APL + soft lbl (1,1,1)"


class ConfigError(ValueError):
    """A plan, spec or parameter file is malformed."""


class DataError(RuntimeError):
    """A dataset directory is missing files or has the wrong content."""


class IncompleteManifestError(ValueError):
    pass


@dataclass(frozen=True)
class AblationRow:
    name: str
    loss: LossConfig
    label: str = "soft"

    def __post_init__(self):
        if self.label not in LABEL_MODES:
            raise ConfigError(f"row {self.name!r}: label must be one of {LABEL_MODES}, got {self.label!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "loss": self.loss.to_dict(), "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        return cls(str(d["name"]), LossConfig.from_dict(d.get("loss", {})), d.get("label", "soft"))


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic corpus; ``path`` points at an existing one instead."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    noise: RaterNoiseSpec = field(default_factory=RaterNoiseSpec)
    n_volumes: int = 20
    ratios: tuple = (0.8, 0.05, 0.15)
    cell: int = 8
    softlabel: SoftLabelParams = field(default_factory=SoftLabelParams)
    path: str | None = None

    def to_dict(self) -> dict:
        if self.path is not None:
            return {"path": self.path}
        return {
            "phantom": self.phantom.to_json(),
            "noise": self.noise.to_json(),
            "n_volumes": self.n_volumes,
            "ratios": list(self.ratios),
            "cell": self.cell,
            "softlabel": asdict(self.softlabel),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        if "path" in d:
            return cls(path=str(d["path"]))
        return cls(
            phantom=PhantomSpec.from_json(d.get("phantom", {})),
            noise=RaterNoiseSpec.from_json(d.get("noise", {})),
            n_volumes=int(d.get("n_volumes", 20)),
            ratios=tuple(d.get("ratios", (0.8, 0.05, 0.15))),
            cell=int(d.get("cell", 8)),
            softlabel=SoftLabelParams(**d.get("softlabel", {})),
        )

    def build(self, out_dir) -> Path:
        if self.path is not None:
            return Path(self.path)
        return make_dataset(out_dir, self.phantom, self.noise, self.n_volumes, self.ratios,
                            self.softlabel, self.cell)


def default_rows() -> list[AblationRow]:
    """The eight loss configurations of the reference ablation table."""
    plain = dict(normalize_terms=False)

    def row(name, w, label, **kw):
        return AblationRow(name, LossConfig(*w, **kw), label)

    return [
        row(BASELINE, (1, 0, 0), "binary", **plain),
        row("APL binary (1,0,1)", (1, 0, 1), "binary"),
        row("APL binary (2,0,1)", (2, 0, 1), "binary"),
        row(SOFT_BASELINE, (0, 1, 0), "soft", **plain),
        row("APL + soft lbl (0,1,1)", (0, 1, 1), "soft"),
        row("APL + soft lbl (0,2,1)", (0, 2, 1), "soft"),
        row(TARGET, (1, 1, 1), "soft"),
        row("APL + soft lbl (2,2,1)", (2, 2, 1), "soft"),
    ]


@dataclass(frozen=True)
class AblationPlan:
    rows: tuple = field(default_factory=lambda: tuple(default_rows()))
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold: float = 0.5

    def __post_init__(self):
        names = [r.name for r in self.rows]
        if not names:
            raise ConfigError("plan has no rows")
        if len(set(names)) != len(names):
            raise ConfigError(f"row names must be unique: {names}")
        if not self.seeds:
            raise ConfigError("plan has no seeds")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("loss")
        train.pop("seed")
        return {
            "rows": [r.to_dict() for r in self.rows],
            "train": train,
            "dataset": self.dataset.to_dict(),
            "seeds": list(self.seeds),
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationPlan":
        try:
            kw = {}
            if "rows" in d:
                kw["rows"] = tuple(AblationRow.from_dict(r) for r in d["rows"])
            if "train" in d:
                kw["train"] = TrainConfig.from_dict({k: v for k, v in d["train"].items() if k not in ("loss", "seed")})
            if "dataset" in d:
                kw["dataset"] = DatasetSpec.from_dict(d["dataset"])
            if "seeds" in d:
                kw["seeds"] = tuple(int(s) for s in d["seeds"])
            if "threshold" in d:
                kw["threshold"] = float(d["threshold"])
            return cls(**kw)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid plan: {exc}") from exc


def config_hash(payload) -> str:
    """Git blob hash of the canonical JSON encoding of ``payload``."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- data -------------------------------------------------------------------

def training_arrays(data_dir) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3, H, W) 2.5D inputs and (N, H, W) soft labels of the training split."""
    try:
        vols = load_split(Path(data_dir) / "train")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read training split of {data_dir}: {exc}") from exc
    if not vols or any("soft" not in v for v in vols):
        raise DataError(f"training split of {data_dir} has no soft labels")
    x = np.concatenate([stack_volume_25d(v["intensity"]) for v in vols])
    y = np.concatenate([v["soft"] for v in vols]).astype(np.float64)
    return x, y


def evaluation_volumes(data_dir, split: str = "test") -> tuple[dict, dict]:
    """Intensity and ground-truth volumes of a split, keyed by id."""
    try:
        vols = load_split(Path(data_dir) / split)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read {split} split of {data_dir}: {exc}") from exc
    if not vols or any("gt" not in v for v in vols):
        raise DataError(f"{split} split of {data_dir} has no ground truth")
    return {v["id"]: v["intensity"] for v in vols}, {v["id"]: v["gt"] for v in vols}


def labels_for(mode: str, soft: np.ndarray) -> np.ndarray:
    return binarize(soft) if mode == "binary" else soft


# -- runs -------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(x, y, images, gts):
    _WORKER.update(x=x, y=y, images=images, gts=gts)


def _run_one(row: AblationRow, train_cfg: TrainConfig, seed: int, threshold: float) -> dict:
    cfg = replace(train_cfg, loss=row.loss, seed=seed)
    result = train(_WORKER["x"], labels_for(row.label, _WORKER["y"]), cfg)
    preds = {vid: predict_volume(result.params, img) for vid, img in _WORKER["images"].items()}
    report = evaluate_run(preds, _WORKER["gts"], threshold, config=row.to_dict())
    return {"seed": seed, "final_loss": result.loss_curve[-1], "report": report}


def _threads() -> int:
    value = os.environ.get("NOISYSEG_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"NOISYSEG_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("NOISYSEG_THREADS must be >= 1")
    return n


def median_metrics(runs: Sequence[dict]) -> dict:
    return {k: float(np.median([r["report"]["aggregate"][k] for r in runs])) for k in METRIC_KEYS}


def run_ablation(plan: AblationPlan, out_dir) -> dict:
    """Train and evaluate every (row, seed) pair; write the CSV and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    data_dir = plan.dataset.build(out / "data")
    x, y = training_arrays(data_dir)
    images, gts = evaluation_volumes(data_dir)

    jobs = [(r, s) for r in plan.rows for s in plan.seeds]
    n_threads = min(_threads(), len(jobs))
    if n_threads == 1:
        _init_worker(x, y, images, gts)
        results = [_run_one(r, plan.train, s, plan.threshold) for r, s in jobs]
    else:
        with ProcessPoolExecutor(n_threads, initializer=_init_worker, initargs=(x, y, images, gts)) as pool:
            futures = [pool.submit(_run_one, r, plan.train, s, plan.threshold) for r, s in jobs]
            results = [f.result() for f in futures]

    rows = []
    for i, row in enumerate(plan.rows):
        runs = results[i * len(plan.seeds):(i + 1) * len(plan.seeds)]
        rows.append({**row.to_dict(), "runs": runs, "median": median_metrics(runs)})
        log.info("%s: %s", row.name, rows[-1]["median"])

    manifest = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config_hash": config_hash(plan.to_dict()),
        "dataset_hash": dataset_hash(data_dir),
        "seeds": list(plan.seeds),
        "plan": plan.to_dict(),
        "rows": rows,
        "runtime_s": round(time.perf_counter() - started, 3),
    }
    write_csv(out / "results.csv", rows)
    dump_json(out / "manifest.json", manifest)
    try:
        dump_json(out / "comparison.json", compare_rows(manifest))
    except IncompleteManifestError as exc:
        log.info("no comparison written: %s", exc)
    return manifest


# -- reporting ----------------------------------------------------------------

def _weight(w: float) -> str:
    return f"{w:g}"


def table_lines(rows: Sequence[dict]) -> list[list[str]]:
    lines = [list(CSV_COLUMNS)]
    for r in rows:
        m, loss = r["median"], r["loss"]
        lines.append([
            r["name"], _weight(loss["w_bce"]), _weight(loss["w_sce"]), _weight(loss["w_rce"]),
            "bin" if r["label"] == "binary" else "soft",
            f"{100 * m['ap50']:.2f}", f"{100 * m['ap75']:.2f}", f"{100 * m['iou']:.2f}",
            f"{m['recall']:.4f}", f"{m['precision']:.4f}", f"{m['dice']:.4f}",
        ])
    return lines


def format_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table_lines(rows))
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(rows))


def load_manifest(path) -> dict:
    return load_json(path)


def compare_rows(manifest: dict, baseline: str = BASELINE, soft_baseline: str = SOFT_BASELINE,
                 target: str = TARGET) -> dict:
    """Median deltas of every row against the baseline and the ordering flags.

    Raises IncompleteManifestError, without a partial report, if a reference
    row is absent or any row lacks medians or a run per seed.
    """
    rows = {r.get("name"): r for r in manifest.get("rows", [])}
    missing = [n for n in (baseline, soft_baseline, target) if n not in rows]
    if missing:
        raise IncompleteManifestError(f"manifest lacks rows {missing}")
    n_seeds = len(manifest.get("seeds", []))
    for name, r in rows.items():
        med = r.get("median", {})
        if any(k not in med for k in METRIC_KEYS):
            raise IncompleteManifestError(f"row {name!r} has no median for every metric")
        if "runs" in r and len(r["runs"]) != n_seeds:
            raise IncompleteManifestError(f"row {name!r} has {len(r['runs'])} runs for {n_seeds} seeds")

    base = rows[baseline]["median"]
    deltas = {name: {k: r["median"][k] - base[k] for k in METRIC_KEYS} for name, r in rows.items()}
    best = {k: max(r["median"][k] for r in rows.values()) for k in METRIC_KEYS}
    tgt = rows[target]["median"]
    dice_rank = 1 + sum(r["median"]["dice"] > tgt["dice"] for r in rows.values())
    return {
        "baseline": baseline,
        "soft_baseline": soft_baseline,
        "target": target,
        "deltas": deltas,
        "target_dice_rank": dice_rank,
        "flags": {
            "soft_baseline_above_baseline": rows[soft_baseline]["median"]["dice"] > base["dice"],
            "target_best_recall": tgt["recall"] >= best["recall"],
            "target_best_precision": tgt["precision"] >= best["precision"],
            "target_top2_dice": dice_rank <= 2,
        },
    }
