"""Densities, per-point multiscale profiles, dimension detection and strata."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ResolutionTooFine, ScaleConstraintViolated
from .flatness import (AffinePlane, AlphaResult, SearchOptions, alpha_d, alpha_min,
                       projection_distance)
from .measure import BallQuery, DoublingStats, PointMeasure, ball_mass, restrict_rescale

LN2 = math.log(2.0)
J_MAX = 5.0


@dataclass
class ScaleRecord:
    k: int
    r: float
    alpha: float
    d: int
    plane: AffinePlane
    c_d: float
    theta_star: float
    ball_mass: float
    alphas: tuple = ()


@dataclass
class ScaleProfile:
    """Per-scale records at one point, ordered from coarse (small k) to fine."""

    point_index: int
    x: np.ndarray
    records: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def ks(self):
        return [rec.k for rec in self.records]

    def to_rows(self):
        return [(rec.k, rec.r, rec.d, rec.alpha, rec.theta_star) for rec in self.records]


def stabilized_density(r: float, d: int, c_d: float, mass: float) -> float:
    """theta* = r^-d c_d mu(B(x, r))."""
    return r ** (-d) * c_d * mass


def profile(mu: PointMeasure, x, k_range, m_r: int = 4,
            opts: SearchOptions | None = None, point_index: int = -1) -> ScaleProfile:
    """Scan dyadic scales 2^-k at ``x``, keeping the flattest of ``m_r`` radii per scale.

    Scales below the resolution band are recorded in ``excluded``. The best
    planes of each scale seed the search at the next finer scale.
    """
    opts = opts or SearchOptions()
    x = np.asarray(x, dtype=float)
    if point_index < 0:
        point_index = mu.nearest(x)[1]
    prof = ScaleProfile(point_index, x)
    seeds = None
    for k in sorted(k_range):
        radii = [2.0 ** -k] if m_r == 1 else np.geomspace(2.0 ** (-k - 1), 2.0 ** -k, m_r)[::-1]
        best = None
        try:
            for r in radii:
                res, d, allres = alpha_min(mu, BallQuery(x, r), opts, coarse=seeds)
                if best is None or res.value < best[0].value - 1e-12:
                    best = (res, d, allres)
        except ResolutionTooFine:
            if best is None:
                prof.excluded.append(k)
                continue
        res, d, allres = best
        m = ball_mass(mu, BallQuery(x, res.radius))
        prof.records.append(ScaleRecord(
            k, float(res.radius), float(res.value), int(d), res.world_plane, float(res.c_v),
            stabilized_density(res.radius, d, res.c_v, m), m,
            tuple(float(a.value) for a in allres)))
        seeds = {a.dim: a.world_plane for a in allres}
    return prof


def J_estimate(p: ScaleProfile):
    """Sum of alpha_k ln 2 over available scales, with the factor-2 bracket."""
    if not p.records:
        raise ValueError("empty profile")
    s = LN2 * sum(rec.alpha for rec in p.records)
    return s, (s, 2.0 * s)


@dataclass
class PointClassification:
    d_x: int | None
    unstable: bool
    theta: float | None
    theta_log_err: float | None
    stratum_k: int | None
    J: float
    tangent_plane: AffinePlane | None
    convergence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"d_x": self.d_x, "theta": self.theta, "stratum": self.stratum_k,
                "J": self.J, "unstable_flag": self.unstable,
                "theta_log_err": self.theta_log_err}


def stratum_of(theta: float) -> int:
    return int(math.floor(math.log2(theta)))


def classify_point(p: ScaleProfile, stats: DoublingStats | None = None,
                   window: int = 5) -> PointClassification:
    """Dimension, density, stratum and tangent plane from the finest scales.

    The dimension is reported only when the finest ``window`` scales agree;
    otherwise the point is Unstable. The log-density error bar is the sum of
    alpha over that window.
    """
    J, _ = J_estimate(p)
    recs = p.records[-window:]
    if len(recs) < window or len({r.d for r in recs}) != 1:
        return PointClassification(None, True, None, None, None, J, None, {})
    fin = recs[-1]
    d = fin.d
    theta = fin.theta_star
    err = sum(r.alpha for r in recs)
    conv = {r.k: projection_distance(r.plane, fin.plane) for r in p.records if r.d == d}
    return PointClassification(d, False, theta, err, stratum_of(theta), J, fin.plane, conv)


def stratify_set(mu: PointMeasure, sample, k_range, window: int = 5, J_max: float = J_MAX,
                 m_r: int = 4, opts: SearchOptions | None = None):
    """Bucket sample indices by (d_x, stratum); unstable or high-J points go to the remainder.

    Returns (buckets, remainder, classifications keyed by index).
    """
    buckets: dict = {}
    remainder = []
    info = {}
    for i in sample:
        i = int(i)
        p = profile(mu, mu.points[i], k_range, m_r, opts, point_index=i)
        if not p.records:
            remainder.append(i)
            continue
        c = classify_point(p, window=window)
        info[i] = c
        if c.unstable or c.J > J_max:
            remainder.append(i)
        else:
            buckets.setdefault((c.d_x, c.stratum_k), []).append(i)
    return buckets, remainder, info


def _ball_flat_mass(xi: np.ndarray, s: float, plane: AffinePlane, c_v: float) -> float:
    """nu_V(B(xi, s)) for the continuous flat measure (ball inside the unit ball)."""
    if plane.dim == 0:
        return float(np.linalg.norm(xi - plane.base) < s)
    dist = float(plane.distance(xi)[0])
    if dist >= s:
        return 0.0
    return c_v * (s * s - dist * dist) ** (plane.dim / 2.0)


def density_diagnostics(mu: PointMeasure, x, scales, d: int | None = None,
                        kappa: float = 0.1, eps: float | None = None,
                        stats: DoublingStats | None = None, delta: float = 0.01,
                        opts: SearchOptions | None = None, max_points: int = 40,
                        n_s: int = 16) -> dict:
    """Good-point densities, stabilized-density ratios and windowed masses.

    Parameters
    ----------
    scales : sequence of float
        Radii at which alpha_d is evaluated; pairs with rho <= r <= 4 rho are
        compared.
    d : int, optional
        Dimension; by default the optimal dimension at the largest scale.
    eps : float, optional
        Good-set threshold; defaults to 1/(100 c_delta^3).
    """
    x = np.asarray(x, dtype=float)
    opts = opts or SearchOptions()
    scales = sorted(float(r) for r in scales)
    if eps is None:
        c = stats.c_delta if stats is not None else 2.0 ** mu.ambient_dim
        eps = 1.0 / (100.0 * c ** 3)
    if d is None:
        _, d, _ = alpha_min(mu, BallQuery(x, scales[-1]), opts)
    results = {r: alpha_d(mu, BallQuery(x, r), d, opts) for r in scales}
    report = {"d": int(d), "kappa": kappa, "eps": eps, "good_points": [],
              "log_ratio": [], "windowed": []}

    for r, res in results.items():
        m = ball_mass(mu, BallQuery(x, r))
        W = res.world_plane
        near = mu.ball_indices(x, r / 2)
        near = near[W.distance(mu.points[near]) / r <= res.value / eps]
        if len(near) > max_points:
            near = near[np.linspace(0, len(near) - 1, max_points).astype(int)]
        local = restrict_rescale(mu, BallQuery(x, r))
        worst = 0.0
        for yi in near:
            y = mu.points[yi]
            xi = (y - x) / r
            for s in np.linspace(kappa, 0.5, n_s + 2)[1:-1]:
                mloc = local.weights[local.ball_indices(xi, s)].sum()
                if abs(mloc - _ball_flat_mass(xi, s, res.plane, res.c_v)) > 4 * res.value / eps:
                    continue
                theta_rd = ball_mass(mu, BallQuery(y, r * s)) / (s ** d * m)
                worst = max(worst, abs(theta_rd - res.c_v))
        bound_unit = kappa ** (-d) * res.value / eps
        report["good_points"].append({"r": r, "alpha": res.value, "n_good": int(len(near)),
                                      "residual": worst, "bound_unit": bound_unit})
        if d >= 1:
            for a in np.linspace(0.05, 0.3, 6):
                got = ball_mass(mu, BallQuery(x, a * r)) / m
                report["windowed"].append({
                    "r": r, "a": float(a), "residual": abs(got - res.c_v * a ** d),
                    "bound_unit": delta + 2 * res.value / delta,
                    "x_offset": float(W.distance(x)[0] / r)})

    theta = {r: stabilized_density(r, d, res.c_v, ball_mass(mu, BallQuery(x, r)))
             for r, res in results.items()}
    for i, rho in enumerate(scales):
        for r in scales[i + 1:]:
            if r <= 4 * rho:
                report["log_ratio"].append({
                    "rho": rho, "r": r, "log_ratio": abs(math.log(theta[r] / theta[rho])),
                    "alpha_sum": results[r].value + results[rho].value})
    if not report["log_ratio"] and len(scales) > 1:
        raise ScaleConstraintViolated("no scale pair with rho <= r <= 4 rho")
    return report


def bmo_estimate(mu: PointMeasure, tree, field) -> float:
    """Largest mu-weighted mean oscillation of ``field`` over the cubes of ``tree``.

    ``field`` holds one value per support point; NaN marks points without a
    value, which are ignored.
    """
    f = np.asarray(field, dtype=float)
    w = mu.weights
    best = 0.0
    for cube in tree.cubes:
        idx = cube.members
        v = f[idx]
        ok = np.isfinite(v)
        if ok.sum() < 2:
            continue
        ww = w[idx][ok]
        vv = v[ok]
        mean = np.dot(ww, vv) / ww.sum()
        best = max(best, float(np.dot(ww, np.abs(vv - mean)) / ww.sum()))
    return best
