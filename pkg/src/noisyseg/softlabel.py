"""Soft pseudo ground truth from multi-rater grid annotations.

Four steps, applied in order: rater aggregation on the grid, exclusion of
everything outside the bone mask, intensity-conditioned confidence boost,
and propagation from neighbouring slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import check_same_shape


@dataclass(frozen=True)
class GridTemplate:
    origin_x: int
    origin_y: int
    cell: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.cell < 1:
            raise ValueError("cell size must be >= 1")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_bounds(self, r: int, c: int, image_shape: tuple[int, int]):
        """(y0, y1, x0, x1) of cell (r, c) clipped to the image; may be empty."""
        h, w = image_shape
        y0 = self.origin_y + r * self.cell
        x0 = self.origin_x + c * self.cell
        return (
            min(max(y0, 0), h),
            min(max(y0 + self.cell, 0), h),
            min(max(x0, 0), w),
            min(max(x0 + self.cell, 0), w),
        )

    def to_json(self) -> dict:
        return {"origin": [self.origin_x, self.origin_y], "cell": self.cell, "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_json(cls, d: dict) -> "GridTemplate":
        x, y = d["origin"]
        return cls(int(x), int(y), int(d["cell"]), int(d["rows"]), int(d["cols"]))


@dataclass(frozen=True)
class RaterGrid:
    rater_id: str
    template: GridTemplate
    selection: np.ndarray  # (rows, cols) of 0/1

    def __post_init__(self):
        sel = np.asarray(self.selection)
        if sel.shape != self.template.shape:
            raise ValueError(f"selection {sel.shape} does not match grid {self.template.shape}")
        if not np.all((sel == 0) | (sel == 1)):
            raise ValueError("selections are 0/1")

    def cells(self) -> list[list[int]]:
        return [[int(r), int(c)] for r, c in zip(*np.nonzero(self.selection))]

    @classmethod
    def from_cells(cls, rater_id, template, cells) -> "RaterGrid":
        sel = np.zeros(template.shape, dtype=np.uint8)
        for r, c in cells:
            sel[r, c] = 1
        return cls(str(rater_id), template, sel)


@dataclass(frozen=True)
class SoftLabelParams:
    k: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.k):
            raise ValueError("intensity threshold k must be finite")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("propagation weight must lie in [0, 1]")


def dump_rater_grids(template: GridTemplate, grids: Sequence[RaterGrid]) -> dict:
    return {"template": template.to_json(), "raters": [{"id": g.rater_id, "cells": g.cells()} for g in grids]}


def load_rater_grids(payload: dict) -> tuple[GridTemplate, list[RaterGrid]]:
    template = GridTemplate.from_json(payload["template"])
    return template, [RaterGrid.from_cells(r["id"], template, r["cells"]) for r in payload["raters"]]


def aggregate_raters(grids: Sequence[RaterGrid], n_raters: int) -> np.ndarray:
    """Fraction of the scan's raters that selected each cell."""
    if n_raters < 1:
        raise ValueError("n_raters must be >= 1")
    ids = {g.rater_id for g in grids}
    if len(ids) > n_raters:
        raise ValueError(f"{len(ids)} distinct raters but n_raters={n_raters}")
    templates = {g.template for g in grids}
    if len(templates) > 1:
        raise ValueError("rater grids use different templates")
    if not grids:
        raise ValueError("need at least one grid to know the template shape")
    counts = np.zeros(grids[0].template.shape, dtype=np.int64)
    for g in grids:
        counts += np.asarray(g.selection, dtype=np.int64)
    return counts / n_raters


def rasterize(template: GridTemplate, cell_probs: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
    cell_probs = np.asarray(cell_probs, dtype=np.float64)
    if cell_probs.shape != template.shape:
        raise ValueError(f"cell grid {cell_probs.shape} does not match template {template.shape}")
    out = np.zeros(image_shape, dtype=np.float64)
    for r in range(template.rows):
        for c in range(template.cols):
            y0, y1, x0, x1 = template.cell_bounds(r, c, image_shape)
            out[y0:y1, x0:x1] = cell_probs[r, c]
    return out


def apply_bone_mask(soft: np.ndarray, bone: np.ndarray) -> np.ndarray:
    check_same_shape(soft, bone)
    return np.where(np.asarray(bone) == 1, soft, 0.0)


def intensity_boost(soft: np.ndarray, image: np.ndarray, bone: np.ndarray, params: SoftLabelParams) -> np.ndarray:
    """Set selected pixels brighter than mean + k*std of the bone to 1."""
    check_same_shape(soft, image, bone)
    inside = np.asarray(bone) == 1
    if not inside.any():
        raise ValueError("bone mask is empty")
    values = np.asarray(image, dtype=np.float64)[inside]
    threshold = values.mean() + params.k * values.std()
    bright = (np.asarray(soft) > 0) & (np.asarray(image, dtype=np.float64) > threshold)
    return np.where(bright, 1.0, soft)


def propagate_slices(volume: np.ndarray, params: SoftLabelParams, bone: np.ndarray | None = None) -> np.ndarray:
    """Raise interior slices towards evidence present in both neighbours.

    Reads the unmodified input volume; first and last slices pass through.
    With ``bone`` given, the result is re-masked so nothing leaks outside it.
    """
    volume = np.asarray(volume, dtype=np.float64)
    out = volume.copy()
    if volume.shape[0] >= 3:
        both = np.minimum(volume[:-2], volume[2:])
        out[1:-1] = np.maximum(volume[1:-1], params.lam * both)
    if bone is not None:
        check_same_shape(out, bone)
        out = np.where(np.asarray(bone) == 1, out, 0.0)
    return out


def build_soft_labels(
    raters: Sequence[Sequence[RaterGrid]],
    template: GridTemplate,
    bone: np.ndarray,
    image: np.ndarray,
    params: SoftLabelParams = SoftLabelParams(),
    n_raters: int | None = None,
) -> np.ndarray:
    """Run the four steps on a (D, H, W) volume; ``raters[i]`` holds slice i's grids.

    ``n_raters`` defaults to the number of distinct rater ids over the scan.
    """
    check_same_shape(bone, image)
    depth, h, w = image.shape
    if len(raters) != depth:
        raise ValueError(f"{len(raters)} slices of rater grids for a {depth}-slice volume")
    if n_raters is None:
        n_raters = len({g.rater_id for grids in raters for g in grids})
    per_slice = np.zeros((depth, h, w), dtype=np.float64)
    for i in range(depth):
        if raters[i]:
            cells = aggregate_raters(raters[i], n_raters)
        else:
            cells = np.zeros(template.shape)
        soft = rasterize(template, cells, (h, w))
        soft = apply_bone_mask(soft, bone[i])
        if np.any(bone[i] == 1):
            soft = intensity_boost(soft, image[i], bone[i], params)
        per_slice[i] = soft
    return propagate_slices(per_slice, params, bone).astype(np.float32)
