"""2-D weight-space landscapes spanned by two fine-tuning directions.

The base model sits at (0, 0). The x axis is ``w_x - w_base`` and the y axis
``w_y - w_base``, so (1, 0) and (0, 1) reproduce the two fine-tuned models.
Each grid point ``(a, b)`` is the model ``w_base + (a*u + b*v)``, evaluated
with one contour metric.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distill import ReplayPool
from .harness import evaluate_general, replay_ce
from .model import ManifestEntry, TinyDecoder, WeightVector, flatten_weights, load_weights

METRICS = ("replay_ce", "general_score")


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-0.5, 1.5)
    y_range: tuple[float, float] = (-0.5, 1.5)
    nx: int = 25
    ny: int = 25
    metric: str = "replay_ce"

    def __post_init__(self):
        if not self.x_range[0] < self.x_range[1] or not self.y_range[0] < self.y_range[1]:
            raise ValueError("grid ranges must be increasing")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def xs(self) -> np.ndarray:
        return _axis(*self.x_range, self.nx)

    def ys(self) -> np.ndarray:
        return _axis(*self.y_range, self.ny)


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    # rounding snaps points like 0.0 and 1.0 onto exact values
    return np.round(lo + (hi - lo) * np.arange(n) / (n - 1), 12) + 0.0


@dataclass
class BasisFrame:
    origin: np.ndarray  # float64
    u: np.ndarray
    v: np.ndarray
    manifest: tuple[ManifestEntry, ...]
    template: TinyDecoder


def _frozen_state(model: TinyDecoder) -> dict[str, np.ndarray]:
    return {n: p.data for n, p in model.params.items() if not p.requires_grad}


def basis_frame(base: TinyDecoder, model_x: TinyDecoder, model_y: TinyDecoder) -> BasisFrame:
    wb, wx, wy = flatten_weights(base), flatten_weights(model_x), flatten_weights(model_y)
    if not (wb.manifest == wx.manifest == wy.manifest):
        raise ValueError("the three models do not share a weight manifest")
    fb = _frozen_state(base)
    for other in (model_x, model_y):
        fo = _frozen_state(other)
        if fo.keys() != fb.keys() or any(not np.array_equal(fo[k], fb[k]) for k in fb):
            raise ValueError("frozen (non-trainable) weights differ between models")
    origin = wb.values.astype(np.float64)
    # differences of float32 values are exact in float64 at these scales
    return BasisFrame(
        origin,
        wx.values.astype(np.float64) - origin,
        wy.values.astype(np.float64) - origin,
        wb.manifest,
        base.clone(),
    )


def weights_at(frame: BasisFrame, a: float, b: float) -> WeightVector:
    w = frame.origin + (a * frame.u + b * frame.v)
    return WeightVector(w.astype(np.float32), frame.manifest)


def model_at(frame: BasisFrame, a: float, b: float) -> TinyDecoder:
    model = frame.template.clone()
    return load_weights(model, weights_at(frame, a, b)).eval()


def evaluate_metric(model: TinyDecoder, metric: str, pool: ReplayPool | None = None, heldout=None) -> float:
    if metric == "replay_ce":
        if pool is None:
            raise ValueError("replay_ce needs the replay pool")
        return replay_ce(model, pool)
    if metric == "general_score":
        if heldout is None:
            raise ValueError("general_score needs the held-out corpus")
        return evaluate_general(model, heldout)
    raise ValueError(f"unknown metric {metric}")


def eval_point(frame: BasisFrame, a: float, b: float, metric: str, pool=None, heldout=None) -> float:
    try:
        return evaluate_metric(model_at(frame, a, b), metric, pool, heldout)
    except FloatingPointError:
        return float("nan")


def eval_grid(
    frame: BasisFrame,
    spec: GridSpec,
    pool: ReplayPool | None = None,
    heldout: Sequence[np.ndarray] | None = None,
    progress=None,
) -> list[tuple[float, float, str, float]]:
    """Row-major (y outer, x inner) list of ``(a, b, metric, value)``."""
    rows = []
    with np.errstate(over="ignore", invalid="ignore"):
        for b in spec.ys():
            for a in spec.xs():
                value = eval_point(frame, float(a), float(b), spec.metric, pool, heldout)
                rows.append((float(a), float(b), spec.metric, value))
                if progress is not None:
                    progress(len(rows))
    return rows


def grid_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "b", "metric", "value"])
    for a, b, metric, value in rows:
        w.writerow([f"{a:.6f}", f"{b:.6f}", metric, repr(float(value))])
    return buf.getvalue()


def grid_array(rows, spec: GridSpec) -> np.ndarray:
    """Values reshaped to (ny, nx)."""
    return np.array([r[3] for r in rows], dtype=np.float64).reshape(spec.ny, spec.nx)
