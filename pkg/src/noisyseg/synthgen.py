"""Synthetic phantom volumes and a noisy multi-rater grid annotation simulator."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Volume, dump_json, load_json, read_tensor, write_tensor
from .softlabel import GridTemplate, RaterGrid, SoftLabelParams, build_soft_labels

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream.

    splitmix64 is counter based (output i depends only on seed + i * gamma),
    so blocks of draws are generated with vectorized uint64 arithmetic and
    are identical to drawing one value at a time.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix64(np.uint64(self.state) + steps * _GAMMA)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def uniform(self, n: int | None = None):
        u = (self.next_u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:n]))
        return radius * np.cos(2.0 * np.pi * u[n:])

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


def derive_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th independent child stream of ``seed``."""
    rng = Rng(seed)
    rng.state = (rng.state + index * int(_GAMMA)) & _MASK64
    return int(rng.next_u64(1)[0])


@dataclass(frozen=True)
class PhantomSpec:
    depth: int = 12
    height: int = 64
    width: int = 64
    bone_axes: tuple = (22.0, 26.0)  # semi-axes (y, x) in pixels
    bone_axes_jitter: float = 2.0
    lesion_count: tuple = (2, 5)
    lesion_radius: tuple = (2.5, 6.0)  # half-maximum radius on the lesion's peak slice
    lesion_boost: tuple = (0.15, 0.45)
    background: float = 0.1
    bone_intensity: float = 0.4
    noise_std: float = 0.05
    seed: int = 42

    def __post_init__(self):
        for name in ("background", "bone_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError("lesion_count must be an ordered, non-negative range")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[0] > self.lesion_radius[1]:
            raise ValueError("lesion_radius must be an ordered, positive range")
        if self.lesion_boost[0] < 0 or self.lesion_boost[0] > self.lesion_boost[1]:
            raise ValueError("lesion_boost must be an ordered, non-negative range")
        if self.depth < 1 or self.height < 3 or self.width < 3:
            raise ValueError("volume too small")

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**kw)


@dataclass(frozen=True)
class RaterNoiseSpec:
    n_raters: int = 3
    miss_rate: float = 0.5
    fp_rate: float = 0.05
    jitter: float = 0.0
    difficulty_penalty: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.n_raters < 1:
            raise ValueError("need at least one rater")
        for name in ("miss_rate", "fp_rate", "jitter", "difficulty_penalty"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RaterNoiseSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Lesion:
    center_y: float
    center_x: float
    radius: float
    boost: float
    first_slice: int
    span: int
    dim: bool  # boost in the lowest quartile of the spec's range

    def profile(self, offset: int) -> float:
        """Radius/amplitude factor on the ``offset``-th slice of the lesion."""
        peak = self.span // 2
        return 1.0 if offset == peak else 0.75


def _disk_inside(cy, cx, r, ey, ex, ay, ax) -> bool:
    angles = np.linspace(0.0, 2.0 * np.pi, 48, endpoint=False)
    py = cy + r * np.sin(angles)
    px = cx + r * np.cos(angles)
    return bool(np.all(((py - ey) / ay) ** 2 + ((px - ex) / ax) ** 2 <= 1.0))


def generate_volume(spec: PhantomSpec, volume_id: str | None = None) -> Volume:
    """Deterministic phantom: elliptic bone, Gaussian lesions, additive noise.

    Lesion ground truth is each bump's half-maximum disk, restricted to bone.
    """
    rng = Rng(spec.seed)
    d, h, w = spec.depth, spec.height, spec.width
    ay = spec.bone_axes[0] + spec.bone_axes_jitter * (2.0 * rng.uniform() - 1.0)
    ax = spec.bone_axes[1] + spec.bone_axes_jitter * (2.0 * rng.uniform() - 1.0)
    ay = min(ay, (h - 1) / 2.0)
    ax = min(ax, (w - 1) / 2.0)
    ey, ex = (h - 1) / 2.0, (w - 1) / 2.0
    r_lo, r_hi = spec.lesion_radius
    if r_hi + 1.0 >= min(ay, ax):
        raise ValueError(f"lesion radius {r_hi} does not fit inside bone axes ({ay:.1f}, {ax:.1f})")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bone2d = ((yy - ey) / ay) ** 2 + ((xx - ex) / ax) ** 2 <= 1.0
    bone = np.broadcast_to(bone2d, (d, h, w)).astype(np.uint8)

    b_lo, b_hi = spec.lesion_boost
    dim_cut = b_lo + 0.25 * (b_hi - b_lo)
    lesions = []
    for _ in range(rng.integer(*spec.lesion_count)):
        radius = r_lo + (r_hi - r_lo) * rng.uniform()
        boost = b_lo + (b_hi - b_lo) * rng.uniform()
        span = rng.integer(1, min(3, d))
        first = rng.integer(0, d - span)
        for _attempt in range(1000):
            cy = ey - ay + 2.0 * ay * rng.uniform()
            cx = ex - ax + 2.0 * ax * rng.uniform()
            if _disk_inside(cy, cx, radius + 1.0, ey, ex, ay, ax):
                break
        else:
            raise ValueError("could not place a lesion inside the bone")
        lesions.append(Lesion(cy, cx, radius, boost, first, span, boost < dim_cut))

    intensity = np.where(bone == 1, spec.bone_intensity, spec.background).astype(np.float64)
    gt = np.zeros((d, h, w), dtype=np.uint8)
    for les in lesions:
        dist2 = (yy - les.center_y) ** 2 + (xx - les.center_x) ** 2
        for off in range(les.span):
            f = les.profile(off)
            r_s = les.radius * f
            sigma2 = r_s**2 / (2.0 * math.log(2.0))
            i = les.first_slice + off
            intensity[i] += bone2d * (les.boost * f) * np.exp(-dist2 / (2.0 * sigma2))
            gt[i] |= (dist2 <= r_s**2) & bone2d
    intensity += spec.noise_std * rng.normal(d * h * w).reshape(d, h, w)
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    vid = volume_id if volume_id is not None else f"seed{spec.seed}"
    return Volume(vid, intensity, gt, bone, tuple(lesions))


def grid_template_for(volume: Volume, cell: int = 8) -> GridTemplate:
    """Grid anchored at the bone bounding box (over all slices)."""
    ys, xs = np.nonzero(volume.bone.max(axis=0))
    if ys.size == 0:
        raise ValueError("volume has no bone")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return GridTemplate(int(x0), int(y0), cell, int(math.ceil((y1 - y0) / cell)), int(math.ceil((x1 - x0) / cell)))


def _effective_miss(noise: RaterNoiseSpec, difficult: bool) -> float:
    miss = noise.miss_rate
    if not difficult or miss in (0.0, 1.0):
        return miss
    return max(miss, min(miss + noise.difficulty_penalty, 0.95))


def cell_miss_rates(volume: Volume, template: GridTemplate, noise: RaterNoiseSpec) -> np.ndarray:
    """Per (slice, cell) miss probability; NaN marks cells without ground truth."""
    d, h, w = volume.gt.shape
    n_cells = template.rows * template.cols
    out = np.full((d, n_cells), np.nan)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bone2d = volume.bone.max(axis=0) == 1
    for les in volume.lesions:
        dist2 = (yy - les.center_y) ** 2 + (xx - les.center_x) ** 2
        for off in range(les.span):
            i = les.first_slice + off
            support = (dist2 <= (les.radius * les.profile(off)) ** 2) & bone2d
            difficult = les.dim or (les.span > 1 and off == 0)
            miss = _effective_miss(noise, difficult)
            for k in range(n_cells):
                y0, y1, x0, x1 = template.cell_bounds(k // template.cols, k % template.cols, (h, w))
                if support[y0:y1, x0:x1].any():
                    out[i, k] = miss if np.isnan(out[i, k]) else min(out[i, k], miss)
    # ground truth without lesion metadata (e.g. hand-made fixtures)
    for i in range(d):
        for k in range(n_cells):
            if np.isnan(out[i, k]):
                y0, y1, x0, x1 = template.cell_bounds(k // template.cols, k % template.cols, (h, w))
                if volume.gt[i, y0:y1, x0:x1].any():
                    out[i, k] = noise.miss_rate
    return out


def simulate_raters(volume: Volume, template: GridTemplate, noise: RaterNoiseSpec) -> list[list[RaterGrid]]:
    """Noisy grid selections, indexed ``[slice][rater]``.

    Each (rater, slice, cell) consumes three uniforms in that nesting order:
    selection, jitter decision, jitter direction.
    """
    d = volume.depth
    rows, cols = template.shape
    miss = cell_miss_rates(volume, template, noise)
    has_gt = ~np.isnan(miss)
    p_select = np.where(has_gt, 1.0 - np.nan_to_num(miss), noise.fp_rate)
    draws = Rng(noise.seed).uniform(noise.n_raters * d * rows * cols * 3).reshape(noise.n_raters, d, rows * cols, 3)
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))
    out: list[list[RaterGrid]] = [[] for _ in range(d)]
    for r in range(noise.n_raters):
        for i in range(d):
            u = draws[r, i]
            chosen = u[:, 0] < p_select[i]
            sel = np.zeros((rows, cols), dtype=np.uint8)
            for k in np.nonzero(chosen)[0]:
                row, col = divmod(int(k), cols)
                if u[k, 1] < noise.jitter:
                    dr, dc = moves[min(int(u[k, 2] * 4), 3)]
                    row = min(max(row + dr, 0), rows - 1)
                    col = min(max(col + dc, 0), cols - 1)
                sel[row, col] = 1
            out[i].append(RaterGrid(f"r{r}", template, sel))
    return out


def dump_volume_raters(template: GridTemplate, raters: Sequence[Sequence[RaterGrid]], n_raters: int) -> dict:
    return {
        "template": template.to_json(),
        "n_raters": n_raters,
        "slices": [
            {"slice": i, "raters": [{"id": g.rater_id, "cells": g.cells()} for g in grids]}
            for i, grids in enumerate(raters)
        ],
    }


def load_volume_raters(payload: dict) -> tuple[GridTemplate, list[list[RaterGrid]], int]:
    template = GridTemplate.from_json(payload["template"])
    slices = sorted(payload["slices"], key=lambda s: s["slice"])
    raters = [[RaterGrid.from_cells(r["id"], template, r["cells"]) for r in s["raters"]] for s in slices]
    return template, raters, int(payload["n_raters"])


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return n_train, n_val, n - n_train - n_val


SPLITS = ("train", "val", "test")


def make_dataset(
    out_dir,
    phantom: PhantomSpec = PhantomSpec(),
    noise: RaterNoiseSpec = RaterNoiseSpec(),
    n_volumes: int = 20,
    ratios: Sequence[float] = (0.8, 0.05, 0.15),
    softlabel: SoftLabelParams = SoftLabelParams(),
    cell: int = 8,
) -> Path:
    """Write ``<out>/{train,val,test}/manifest.json`` plus STF1 tensors.

    Training volumes carry rater grids and derived soft labels but no ground
    truth; validation and test volumes carry ground truth only.
    """
    out = Path(out_dir)
    counts = split_counts(n_volumes, ratios)
    specs = {
        "phantom": phantom.to_json(),
        "noise": noise.to_json(),
        "softlabel": asdict(softlabel),
        "n_volumes": n_volumes,
        "ratios": list(ratios),
        "cell": cell,
    }
    index = 0
    for split, count in zip(SPLITS, counts):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for _ in range(count):
            vid = f"vol{index:03d}"
            vseed = derive_seed(phantom.seed, index)
            vol = generate_volume(replace(phantom, seed=vseed), vid)
            files = {"intensity": f"{vid}_intensity.stf", "bone": f"{vid}_bone.stf"}
            write_tensor(split_dir / files["intensity"], vol.intensity)
            write_tensor(split_dir / files["bone"], vol.bone)
            entry = {"id": vid, "seed": vseed, "files": files}
            if split == "train":
                template = grid_template_for(vol, cell)
                rnoise = replace(noise, seed=derive_seed(noise.seed, index))
                raters = simulate_raters(vol, template, rnoise)
                soft = build_soft_labels(raters, template, vol.bone, vol.intensity, softlabel, noise.n_raters)
                files["raters"] = f"{vid}_raters.json"
                files["soft"] = f"{vid}_soft.stf"
                dump_json(split_dir / files["raters"], dump_volume_raters(template, raters, noise.n_raters))
                write_tensor(split_dir / files["soft"], soft)
                entry["rater_seed"] = rnoise.seed
            else:
                files["gt"] = f"{vid}_gt.stf"
                write_tensor(split_dir / files["gt"], vol.gt)
            entries.append(entry)
            index += 1
        dump_json(split_dir / "manifest.json", {"split": split, "volumes": entries, "specs": specs})
    return out


def relabel_split(split_dir, params: SoftLabelParams) -> None:
    """Recompute soft labels of a training split from its stored rater grids."""
    split_dir = Path(split_dir)
    manifest = load_json(split_dir / "manifest.json")
    for entry in manifest["volumes"]:
        files = entry["files"]
        if "raters" not in files:
            raise ValueError(f"volume {entry['id']} has no rater grids")
        template, raters, n_raters = load_volume_raters(load_json(split_dir / files["raters"]))
        image = read_tensor(split_dir / files["intensity"])
        bone = read_tensor(split_dir / files["bone"])
        soft = build_soft_labels(raters, template, bone, image, params, n_raters)
        files.setdefault("soft", f"{entry['id']}_soft.stf")
        write_tensor(split_dir / files["soft"], soft)
    manifest["specs"]["softlabel"] = asdict(params)
    dump_json(split_dir / "manifest.json", manifest)


def load_split(split_dir) -> list[dict]:
    """Volumes of one split as dicts of arrays keyed like the manifest files."""
    split_dir = Path(split_dir)
    manifest = load_json(split_dir / "manifest.json")
    out = []
    for entry in manifest["volumes"]:
        item = {"id": entry["id"], "seed": entry["seed"]}
        for key, name in entry["files"].items():
            if name.endswith(".stf"):
                item[key] = read_tensor(split_dir / name)
        out.append(item)
    return out


def dataset_hash(root) -> str:
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
