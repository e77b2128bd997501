"""Finite weighted point measures, ball masses and rescaled local views."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyBall, MeasureFormatError, ResolutionTooFine

#: scales below this multiple of the resolution floor are rejected
FLOOR_FACTOR = 4.0


def _as_points(points, dim=None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1) if dim == 1 else pts.reshape(1, -1)
    return pts


def _norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", v, v))


class PointMeasure:
    """Finite weighted point set in R^n standing for a Radon measure.

    Coincident points are merged by summing their weights (exact coordinate
    equality). Arrays are read-only after construction.

    Parameters
    ----------
    points : array_like, shape (m, n)
        Support points.
    weights : array_like, shape (m,)
        Strictly positive finite masses.
    label : str, optional
        Free-form description.
    """

    def __init__(self, points, weights, label: str = "", _merged: bool = False):
        pts = _as_points(points)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights must have matching lengths")
        if pts.shape[0] == 0:
            raise ValueError("a measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and strictly positive")
        if not _merged:
            pts, w = _merge(pts, w)
        pts = np.ascontiguousarray(pts)
        w = np.ascontiguousarray(w)
        pts.setflags(write=False)
        w.setflags(write=False)
        self.points = pts
        self.weights = w
        self.label = label

    # basic properties
    @property
    def ambient_dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @cached_property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    @cached_property
    def resolution_floor(self) -> float:
        """Minimum pairwise distance of the support (0 for a single point)."""
        if len(self) < 2:
            return 0.0
        d, _ = self.tree.query(self.points, k=2)
        return float(d[:, 1].min())

    @cached_property
    def diameter(self) -> float:
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def check_scale(self, r: float) -> None:
        """Raise ResolutionTooFine when ``r`` is below the usable band."""
        if r < FLOOR_FACTOR * self.resolution_floor:
            raise ResolutionTooFine(
                f"scale {r:.3g} below {FLOOR_FACTOR:g} x resolution floor "
                f"{self.resolution_floor:.3g}")

    def nearest(self, x) -> tuple[float, int]:
        d, i = self.tree.query(np.asarray(x, dtype=float))
        return float(d), int(i)

    def in_support(self, x) -> bool:
        """True when ``x`` lies within half the resolution floor of a point."""
        d, _ = self.nearest(x)
        return d <= 0.5 * self.resolution_floor

    def ball_indices(self, center, radius: float) -> np.ndarray:
        """Sorted indices of points in the open ball B(center, radius)."""
        c = np.asarray(center, dtype=float)
        cand = np.asarray(self.tree.query_ball_point(c, radius), dtype=np.intp)
        if cand.size == 0:
            return cand
        cand.sort()
        dist = _norms(self.points[cand] - c)
        return cand[dist < radius]

    def to_dict(self) -> dict:
        return {"dim": self.ambient_dim, "points": self.points.tolist(),
                "weights": self.weights.tolist(), "label": self.label}

    def __repr__(self) -> str:
        return (f"PointMeasure(n={self.ambient_dim}, size={len(self)}, "
                f"mass={self.total_mass:.6g}, label={self.label!r})")


def _merge(pts: np.ndarray, w: np.ndarray):
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    if uniq.shape[0] == pts.shape[0]:
        return pts, w
    inv = inv.reshape(-1)
    merged = np.zeros(uniq.shape[0])
    np.add.at(merged, inv, w)
    return uniq, merged


@dataclass(frozen=True)
class BallQuery:
    """Open ball B(center, radius)."""

    center: tuple
    radius: float

    def __init__(self, center, radius):
        c = tuple(float(v) for v in np.atleast_1d(np.asarray(center, dtype=float)))
        if not radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(radius))

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.center)


@dataclass(frozen=True)
class DoublingStats:
    """Estimated doubling constant and the derived exponent eta."""

    c_delta: float
    eta: float
    scale_range: tuple

    @staticmethod
    def from_c(c_delta: float, scale_range=(0, 0)) -> "DoublingStats":
        c = max(1.0, float(c_delta))
        return DoublingStats(c, eta_from_c(c), tuple(scale_range))


def eta_from_c(c_delta: float) -> float:
    """Exponent with (2 c_delta)^eta = 2."""
    return 1.0 / math.log2(2.0 * c_delta)


def ball_mass(mu: PointMeasure, q: BallQuery) -> float:
    """Mass of the open ball; 0 for empty balls."""
    idx = mu.ball_indices(q.center, q.radius)
    return float(mu.weights[idx].sum())


def ball_masses(mu: PointMeasure, centers, radius: float) -> np.ndarray:
    """Open-ball masses for many centers at one radius."""
    c = _as_points(centers, mu.ambient_dim)
    out = np.empty(len(c))
    for i, lists in enumerate(mu.tree.query_ball_point(c, radius)):
        idx = np.asarray(lists, dtype=np.intp)
        if idx.size:
            idx.sort()
            idx = idx[_norms(mu.points[idx] - c[i]) < radius]
        out[i] = mu.weights[idx].sum()
    return out


def restrict_rescale(mu: PointMeasure, q: BallQuery, r_keep: float = 1.0) -> PointMeasure:
    """The local view mu_{x,r}: translate, dilate and normalize.

    Points within ``r_keep * radius`` of the center are kept; weights are
    divided by the mass of B(x, r) so the open unit ball carries mass 1.
    """
    if r_keep < 1:
        raise ValueError("r_keep must be at least 1")
    m = ball_mass(mu, q)
    if m <= 0:
        raise EmptyBall(f"ball at {q.center} of radius {q.radius} is empty")
    idx = mu.ball_indices(q.center, q.radius * r_keep)
    pts = (mu.points[idx] - q.x) / q.radius
    return PointMeasure(pts, mu.weights[idx] / m, label=f"{mu.label}@local")


def doubling_constant(mu: PointMeasure, centers, scales: Iterable[int],
                      n_min: int = 1) -> DoublingStats:
    """Empirical doubling constant over centers and dyadic radii 2^-k.

    Raises
    ------
    ResolutionTooFine
        If a scale is below the resolution band or a sampled ball holds
        fewer than ``n_min`` points.
    """
    c = _as_points(centers, mu.ambient_dim)
    ks = sorted(int(k) for k in scales)
    if not ks:
        raise ValueError("need at least one scale")
    best = 1.0
    for k in ks:
        r = 2.0 ** (-k)
        mu.check_scale(r)
        counts = mu.tree.query_ball_point(c, r, return_length=True)
        if np.any(counts < n_min):
            raise ResolutionTooFine(f"ball of radius 2^-{k} holds < {n_min} points")
        small = ball_masses(mu, c, r)
        big = ball_masses(mu, c, 2 * r)
        ok = small > 0
        if not np.all(ok):
            raise ResolutionTooFine(f"empty ball at radius 2^-{k}")
        best = max(best, float(np.max(big / small)))
    return DoublingStats.from_c(best, (ks[0], ks[-1]))


def detect_atoms(mu: PointMeasure, scale_floor: float) -> list:
    """Support points whose open ball of radius ``scale_floor`` holds only themselves."""
    if len(mu) == 1:
        return [(mu.points[0].copy(), float(mu.weights[0]))]
    if scale_floor <= mu.resolution_floor:
        raise ValueError("scale_floor must exceed the resolution floor")
    d, _ = mu.tree.query(mu.points, k=2)
    keep = np.flatnonzero(d[:, 1] >= scale_floor)
    return [(mu.points[i].copy(), float(mu.weights[i])) for i in keep]


# JSON format

def measure_from_dict(doc: dict) -> PointMeasure:
    """Validate a measure document and build the measure.

    The first violation is reported with its index.
    """
    if not isinstance(doc, dict):
        raise MeasureFormatError("measure document must be an object")
    for key in ("dim", "points", "weights"):
        if key not in doc:
            raise MeasureFormatError(f"missing field '{key}'")
    n = doc["dim"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise MeasureFormatError("field 'dim' must be an integer >= 1")
    pts, w = doc["points"], doc["weights"]
    if not isinstance(pts, list) or not isinstance(w, list):
        raise MeasureFormatError("'points' and 'weights' must be lists")
    if len(pts) != len(w):
        raise MeasureFormatError(
            f"points has {len(pts)} entries but weights has {len(w)}")
    if not pts:
        raise MeasureFormatError("measure is empty")
    for i, p in enumerate(pts):
        if not isinstance(p, list) or len(p) != n:
            raise MeasureFormatError(f"points[{i}] must be a list of {n} numbers")
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in p):
            raise MeasureFormatError(f"points[{i}] has a non-finite coordinate")
    for i, v in enumerate(w):
        if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
            raise MeasureFormatError(f"weights[{i}] must be finite and positive")
    return PointMeasure(np.array(pts, dtype=float).reshape(len(pts), n),
                        np.array(w, dtype=float), label=str(doc.get("label", "")))


def load_measure(path) -> PointMeasure:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeasureFormatError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return measure_from_dict(doc)


def save_measure(mu: PointMeasure, path) -> None:
    Path(path).write_text(json.dumps(mu.to_dict()))
