"""Flat reference measures, the alpha_d numbers, beta numbers and plane diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import gamma as _gamma

from .errors import PlaneMissesBall, ResolutionTooFine, ScaleConstraintViolated
from .measure import BallQuery, PointMeasure, restrict_rescale
from .transport import (TransportPair, TransportResult, dirac_cost, w1_boundary,
                        w1_cost)

ADMISSIBLE_RADIUS = 0.5
_CLAMP = 0.4999


def unit_ball_volume(d: int) -> float:
    """Lebesgue volume of the unit d-ball."""
    return math.pi ** (d / 2) / _gamma(d / 2 + 1)


def _orthonormal_rows(F: np.ndarray) -> np.ndarray:
    if F.shape[0] == 0:
        return F.reshape(0, F.shape[1])
    q, r = np.linalg.qr(F.T)
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return (q * s).T


def _complement(F: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal rows spanning the orthogonal complement of the row space of F."""
    if F.shape[0] == 0:
        return np.eye(n)
    if F.shape[0] == n:
        return np.zeros((0, n))
    u, _, _ = np.linalg.svd(F.T, full_matrices=True)
    return u[:, F.shape[0]:].T.copy()


@dataclass(frozen=True)
class AffinePlane:
    """d-dimensional affine plane ``base + span(frame)``.

    ``frame`` has shape (d, n) with orthonormal rows; it is empty for d = 0.
    """

    dim: int
    base: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float).reshape(-1)
        n = base.shape[0]
        F = np.asarray(self.frame, dtype=float).reshape(self.dim, n)
        if self.dim:
            err = np.abs(F @ F.T - np.eye(self.dim)).max()
            if err > 1e-12:
                F = _orthonormal_rows(F)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "frame", F)

    @property
    def n(self) -> int:
        return int(self.base.shape[0])

    @staticmethod
    def through(point, frame) -> "AffinePlane":
        F = _orthonormal_rows(np.atleast_2d(np.asarray(frame, dtype=float)))
        return AffinePlane(F.shape[0], np.asarray(point, dtype=float), F)

    @staticmethod
    def point(p) -> "AffinePlane":
        p = np.asarray(p, dtype=float).reshape(-1)
        return AffinePlane(0, p, np.zeros((0, p.shape[0])))

    @staticmethod
    def full(n: int) -> "AffinePlane":
        return AffinePlane(n, np.zeros(n), np.eye(n))

    def projector(self) -> np.ndarray:
        return self.frame.T @ self.frame

    def normals(self) -> np.ndarray:
        return _complement(self.frame, self.n)

    def project(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.base + (p - self.base) @ self.projector()

    def distance(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.linalg.norm(p - self.project(p), axis=1)

    def foot(self, x=None) -> np.ndarray:
        """Closest point of the plane to ``x`` (default the origin)."""
        x = np.zeros(self.n) if x is None else np.asarray(x, dtype=float)
        return self.project(x)[0]

    def dist_origin(self) -> float:
        return float(np.linalg.norm(self.foot()))

    def canonical(self) -> "AffinePlane":
        return AffinePlane(self.dim, self.foot(), self.frame)

    def to_world(self, x, r: float) -> "AffinePlane":
        """Image under z -> x + r z, i.e. the plane W = x + rV."""
        return AffinePlane(self.dim, np.asarray(x, dtype=float) + r * self.base, self.frame)

    def to_local(self, x, r: float) -> "AffinePlane":
        return AffinePlane(self.dim, (self.base - np.asarray(x, dtype=float)) / r, self.frame)

    def coords(self, pts) -> np.ndarray:
        """Frame coordinates of the projections, relative to ``base``."""
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        return (p - self.base) @ self.frame.T

    def to_dict(self) -> dict:
        return {"dim": self.dim, "base": self.base.tolist(), "frame": self.frame.tolist()}

    @staticmethod
    def from_dict(doc: dict) -> "AffinePlane":
        n = len(doc["base"])
        return AffinePlane(int(doc["dim"]), np.array(doc["base"], float),
                           np.array(doc["frame"], float).reshape(int(doc["dim"]), n))


def plane_constant(plane: AffinePlane) -> float:
    """c_V = (1 - dist(0,V)^2)^(-d/2): inverse normalized measure of V in the unit ball."""
    s = plane.dist_origin()
    if s >= 1.0:
        raise PlaneMissesBall("plane does not meet the unit ball")
    return float((1.0 - s * s) ** (-plane.dim / 2.0))


def projection_distance(V: AffinePlane, W: AffinePlane) -> float:
    """Operator norm of the difference of the orthogonal projections."""
    return float(np.linalg.norm(V.projector() - W.projector(), 2))


def _subcell_offsets(d: int, s: int) -> np.ndarray:
    g = (np.arange(s) + 0.5) / s - 0.5
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)


def _disk_lattice(d: int, rho: float, h: float):
    """Cell representatives and intersected volumes for the d-disk of radius rho."""
    if d == 1:
        m = math.ceil(rho / h + 0.5)
        edges = (np.arange(-m, m + 1) + 0.5) * h
        a = np.maximum(edges[:-1], -rho)
        b = np.minimum(edges[1:], rho)
        keep = b > a
        return ((a + b) / 2)[keep].reshape(-1, 1), (b - a)[keep]
    m = math.ceil(rho / h + 0.5)
    ax = np.arange(-m, m + 1) * h
    centers = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    half = h * math.sqrt(d) / 2
    r = np.linalg.norm(centers, axis=1)
    inner = r + half <= rho
    border = (~inner) & (r - half < rho)
    pts = [centers[inner]]
    vol = [np.full(int(inner.sum()), h ** d)]
    if border.any():
        s = 8 if d <= 2 else 4
        off = _subcell_offsets(d, s) * h
        sub = centers[border][:, None, :] + off[None]
        ins = np.linalg.norm(sub, axis=2) < rho
        cnt = ins.sum(axis=1)
        ok = cnt > 0
        cen = (sub * ins[..., None]).sum(axis=1)[ok] / cnt[ok, None]
        pts.append(cen)
        vol.append(h ** d * cnt[ok] / s ** d)
    return np.vstack(pts), np.concatenate(vol)


def lattice_step(d: int, h: float, cap: int) -> float:
    """Smallest step >= h whose disk lattice has about ``cap`` cells at most."""
    if d == 0:
        return h
    return max(h, (unit_ball_volume(d) / cap) ** (1.0 / d))


def flat_measure(plane: AffinePlane, h: float) -> PointMeasure:
    """Lattice sample of the normalized flat measure on V intersected with the unit ball.

    Cells of side ``h`` in the plane's frame carry mass proportional to
    their intersection with the slice; boundary cells are represented by the
    centroid of the intersection. The open-ball mass is exactly 1.
    """
    pts, w = _flat_arrays(plane, h)
    return PointMeasure(pts, w, label=f"flat{plane.dim}", _merged=True)


def _flat_arrays(plane: AffinePlane, h: float):
    if h <= 0:
        raise ValueError("grid step must be positive")
    f = plane.foot()
    s2 = float(f @ f)
    if s2 >= 1.0:
        raise PlaneMissesBall("plane does not meet the unit ball")
    if plane.dim == 0:
        return f.reshape(1, -1), np.ones(1)
    rho = math.sqrt(1.0 - s2)
    u, vol = _disk_lattice(plane.dim, rho, h)
    pts = f + u @ plane.frame
    return pts, vol / vol.sum()


# plane search

@dataclass
class SearchOptions:
    """Controls for the multi-start plane search.

    ``grid_step`` None means min(0.02, floor / r); the step actually used is
    raised so the lattice holds at most ``max_lattice`` cells
    (``max_lattice_full`` when d = n, which needs no search). Starting planes
    are the local principal plane, any supplied seeds and ``n_random`` random
    planes; simplex descent runs from at most ``max_descents`` of them, best
    initial cost first after the fixed seeds.
    """

    grid_step: float | None = None
    n_random: int = 8
    seed: int = 0
    tol: float = 1e-4
    max_support: int = 300
    max_lattice: int = 400
    max_lattice_full: int = 800
    early_stop: float | None = None
    maxfev: int | None = None
    search_support: int = 80
    search_lattice: int = 100
    max_descents: int = 2


@dataclass
class AlphaResult:
    """Best plane found for alpha_d at (center, radius), in local coordinates."""

    value: float
    plane: AffinePlane
    c_v: float
    transport: TransportResult | None
    restarts_used: int
    dim: int = 0
    center: np.ndarray | None = None
    radius: float = 1.0
    grid_step: float = 0.0
    coarsening_error: float = 0.0

    @property
    def world_plane(self) -> AffinePlane:
        return self.plane.to_world(self.center, self.radius)

    def to_dict(self) -> dict:
        return {"value": self.value, "dim": self.dim, "plane": self.plane.to_dict(),
                "c_v": self.c_v, "restarts": self.restarts_used,
                "center": None if self.center is None else np.asarray(self.center).tolist(),
                "radius": self.radius, "grid_step": self.grid_step,
                "coarsening_error": self.coarsening_error}


def coarsen(x: np.ndarray, w: np.ndarray, cap: int):
    """Aggregate points into grid cells until at most ``cap`` remain.

    Mass moves to the weighted cell centroid, so the transport error is at
    most the returned displacement sum.
    """
    if len(w) <= cap:
        return x, w, 0.0
    g = 2.0 / cap
    while True:
        keys = np.floor(x / g).astype(np.int64)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        if len(counts) <= cap:
            break
        g *= 1.25
    inv = inv.reshape(-1)
    m = np.bincount(inv, weights=w)
    c = np.stack([np.bincount(inv, weights=w * x[:, j]) for j in range(x.shape[1])], axis=1)
    c /= m[:, None]
    err = float(np.dot(w, np.linalg.norm(x - c[inv], axis=1)))
    return c, m, err


@dataclass
class _Local:
    """Open-ball part of a local view, possibly coarsened."""

    x: np.ndarray
    w: np.ndarray
    full_x: np.ndarray
    full_w: np.ndarray
    err: float
    measure: PointMeasure

    @staticmethod
    def build(local: PointMeasure, cap: int) -> "_Local":
        r = np.linalg.norm(local.points, axis=1)
        keep = r < 1.0
        fx, fw = local.points[keep], local.weights[keep]
        x, w, err = coarsen(fx, fw, cap)
        return _Local(x, w, fx, fw, err, local)


def _pca_plane(loc: _Local, d: int) -> AffinePlane:
    n = loc.full_x.shape[1]
    m = loc.full_w @ loc.full_x / loc.full_w.sum()
    if d == 0:
        return AffinePlane.point(_clamp_point(m))
    X = loc.full_x - m
    cov = (X * loc.full_w[:, None]).T @ X
    vals, vecs = np.linalg.eigh(cov)
    F = vecs[:, ::-1][:, :d].T
    return _admissible(AffinePlane(d, m, F))


def _clamp_point(p: np.ndarray) -> np.ndarray:
    s = float(np.linalg.norm(p))
    return p * (_CLAMP / s) if s > _CLAMP else p


def _admissible(plane: AffinePlane) -> AffinePlane:
    """Canonical form with the foot of the origin pulled into B(0, 1/2)."""
    return AffinePlane(plane.dim, _clamp_point(plane.foot()), plane.frame)


def _random_plane(rng: np.random.Generator, d: int, n: int) -> AffinePlane:
    v = rng.standard_normal(n)
    base = v / np.linalg.norm(v) * ADMISSIBLE_RADIUS * rng.random() ** (1.0 / n)
    F = _orthonormal_rows(rng.standard_normal((d, n))) if d else np.zeros((0, n))
    return _admissible(AffinePlane(d, base, F))


class _Chart:
    """Local coordinates (normal offset, tilt) around a seed plane."""

    def __init__(self, seed: AffinePlane):
        self.d, self.n = seed.dim, seed.n
        self.f0 = seed.foot()
        self.F0 = seed.frame
        self.N0 = seed.normals()
        self.k = self.n - self.d

    @property
    def size(self) -> int:
        return self.k * (self.d + 1) if self.d else self.n

    def plane(self, p: np.ndarray) -> AffinePlane:
        if self.d == 0:
            return AffinePlane.point(_clamp_point(self.f0 + p))
        t = p[: self.k]
        A = p[self.k:].reshape(self.d, self.k)
        F = _orthonormal_rows(self.F0 + A @ self.N0)
        return _admissible(AffinePlane(self.d, self.f0 + t @ self.N0, F))

    def simplex(self, step_t: float = 0.05, step_a: float = 0.1) -> np.ndarray:
        m = self.size
        steps = np.full(m, step_t)
        if self.d:
            steps[self.k:] = step_a
        return np.vstack([np.zeros(m), np.diag(steps)])


def _plane_cost(loc: _Local, plane: AffinePlane, h: float) -> float:
    if plane.dim == 0:
        return dirac_cost(loc.x, loc.w, np.linalg.norm(loc.x, axis=1), plane.base)
    y, b = _flat_arrays(plane, h)
    return w1_cost(loc.x, loc.w, y, b)


def _default_step(mu: PointMeasure | None, r: float | None) -> float:
    h = 0.02
    if mu is not None and r:
        floor = mu.resolution_floor
        if floor > 0:
            h = min(h, floor / r)
    return h


def alpha_local(loc: _Local, d: int, opts: SearchOptions, h: float,
                seeds=(), label_seed: int = 0) -> AlphaResult:
    """Plane search on a prepared local view; ``seeds`` are extra starting planes.

    The search runs on a cheaper view (support and lattice capped by the
    ``search_*`` options); the winning plane is then scored at full
    resolution.
    """
    n = loc.x.shape[1]
    if not 0 <= d <= n:
        raise ValueError(f"dimension {d} outside [0, {n}]")
    if d == n:
        h_eff = lattice_step(d, h, opts.max_lattice_full)
        return _finish(loc, AffinePlane.full(n), h_eff, 0)
    h_eff = lattice_step(d, h, opts.max_lattice)
    h_s = lattice_step(d, h, opts.search_lattice)
    xs, ws, _ = coarsen(loc.x, loc.w, opts.search_support)
    search = _Local(xs, ws, loc.full_x, loc.full_w, 0.0, None)
    early = opts.early_stop if opts.early_stop is not None else 0.5 * h_s

    rng = np.random.default_rng([opts.seed, d, label_seed])
    fixed = [_pca_plane(loc, d)] + [_admissible(s) for s in seeds
                                    if s is not None and s.dim == d]
    randoms = [_random_plane(rng, d, n) for _ in range(opts.n_random)]
    scored = [(_plane_cost(search, s, h_s), i, s) for i, s in enumerate(fixed + randoms)]
    head = scored[:len(fixed)]
    tail = sorted(scored[len(fixed):], key=lambda t: (t[0], t[1]))
    order = head + tail

    best_val, _, best_plane = min(scored, key=lambda t: (t[0], t[1]))
    used = 0
    for v0, _, s in order:
        if best_val <= early or used >= opts.max_descents:
            break
        used += 1
        chart = _Chart(s)
        fun = lambda p, c=chart: _plane_cost(search, c.plane(p), h_s)
        maxfev = opts.maxfev or 25 * (chart.size + 1)
        res = minimize(fun, np.zeros(chart.size), method="Nelder-Mead",
                       options={"initial_simplex": chart.simplex(), "fatol": opts.tol,
                                "xatol": 1e-3, "maxfev": maxfev})
        if res.fun < best_val:
            best_val, best_plane = float(res.fun), chart.plane(res.x)
    return _finish(loc, best_plane, h_eff, used)


def _finish(loc: _Local, plane: AffinePlane, h: float, used: int) -> AlphaResult:
    plane = plane.canonical()
    y, b = _flat_arrays(plane, h)
    pair = TransportPair(PointMeasure(loc.x, loc.w, _merged=True),
                         PointMeasure(y, b, _merged=True))
    tr = w1_boundary(pair)
    c_v = min(max(plane_constant(plane), 1.0), 2.0 ** plane.dim)
    return AlphaResult(tr.cost, plane, c_v, tr, used, dim=plane.dim,
                       grid_step=h, coarsening_error=loc.err)


def prepare(mu: PointMeasure, q: BallQuery, opts: SearchOptions, check_support: bool = True):
    if check_support and not mu.in_support(q.center):
        raise ValueError("query center is not a support point")
    mu.check_scale(q.radius)
    local = restrict_rescale(mu, q)
    return _Local.build(local, opts.max_support)


def alpha_d(mu: PointMeasure, q: BallQuery, d: int, opts: SearchOptions | None = None,
            coarse: AffinePlane | None = None) -> AlphaResult:
    """Approximate alpha_d(x, r) by multi-start search over admissible planes.

    Parameters
    ----------
    coarse : AffinePlane, optional
        A world plane from a nearby coarser scale, used as an extra seed.
    """
    opts = opts or SearchOptions()
    loc = prepare(mu, q, opts)
    h = opts.grid_step or _default_step(mu, q.radius)
    seeds = []
    if coarse is not None:
        seeds.append(coarse.to_local(q.x, q.radius))
    res = alpha_local(loc, d, opts, h, seeds)
    res.center, res.radius = q.x, q.radius
    return res


def alpha_min(mu: PointMeasure, q: BallQuery, opts: SearchOptions | None = None,
              coarse: dict | None = None):
    """alpha(x, r) = min over d of alpha_d; ties within 1e-6 go to the smaller d.

    Returns the best result, its dimension and the list of all results.
    """
    opts = opts or SearchOptions()
    loc = prepare(mu, q, opts)
    h = opts.grid_step or _default_step(mu, q.radius)
    results = []
    for d in range(mu.ambient_dim + 1):
        seeds = []
        if coarse and coarse.get(d) is not None:
            seeds.append(coarse[d].to_local(q.x, q.radius))
        r = alpha_local(loc, d, opts, h, seeds)
        r.center, r.radius = q.x, q.radius
        results.append(r)
    best = 0
    for d, r in enumerate(results):
        if r.value < results[best].value - 1e-6:
            best = d
    return results[best], best, results


# beta numbers and geometric diagnostics

def _local_points(mu: PointMeasure, q: BallQuery):
    local = restrict_rescale(mu, q)
    r = np.linalg.norm(local.points, axis=1)
    keep = r < 1.0
    return local.points[keep], local.weights[keep]


def beta(mu: PointMeasure, q: BallQuery, d: int, mode: str = "avg",
         candidates=(), opts: SearchOptions | None = None) -> float:
    """Jones beta number over planes meeting B(x, r/2).

    ``mode='avg'`` is the mu-average of dist(z, W)/r over B(x, r);
    ``mode='sup'`` the supremum over support points in the ball.
    ``candidates`` are extra world planes tried as starting points.
    """
    if mode not in ("avg", "sup"):
        raise ValueError("mode must be 'avg' or 'sup'")
    opts = opts or SearchOptions()
    x, w = _local_points(mu, q)
    n = mu.ambient_dim
    if d == n:
        return 0.0

    def score(plane: AffinePlane) -> float:
        dist = plane.distance(x)
        return float(np.dot(w, dist)) if mode == "avg" else float(dist.max())

    loc = _Local(x, w, x, w, 0.0, None)
    starts = [_pca_plane(loc, d)]
    starts += [_admissible(c.to_local(q.x, q.radius)) for c in candidates if c.dim == d]
    rng = np.random.default_rng([opts.seed, d, 7])
    starts += [_random_plane(rng, d, n) for _ in range(min(opts.n_random, 2))]
    best = math.inf
    for s in starts:
        best = min(best, score(s))
        if best == 0.0:
            break
        chart = _Chart(s)
        res = minimize(lambda p: score(chart.plane(p)), np.zeros(chart.size),
                       method="Nelder-Mead",
                       options={"initial_simplex": chart.simplex(0.02, 0.05),
                                "fatol": 1e-7, "xatol": 1e-6,
                                "maxfev": 200 * (chart.size + 1)})
        best = min(best, float(res.fun))
    return best


def sup_flatness_constant(c_delta: float, eta: float) -> float:
    """Explicit constant C with beta_inf(x, 2r/3) <= C alpha_d(x, r)^eta."""
    return 6.0 * (2.0 * c_delta ** 2) ** eta


def _plane_grid(plane: AffinePlane, center, radius: float, h: float, cap: int = 20000):
    """Grid points of plane within the open ball B(center, radius), step h."""
    f = plane.foot(center)
    s = float(np.linalg.norm(f - np.asarray(center, dtype=float)))
    if s >= radius:
        raise PlaneMissesBall("plane misses the ball")
    if plane.dim == 0:
        return f.reshape(1, -1)
    rho = math.sqrt(radius ** 2 - s ** 2)
    step = max(h, rho * (unit_ball_volume(plane.dim) / cap) ** (1.0 / plane.dim))
    m = math.ceil(rho / step)
    ax = np.arange(-m, m + 1) * step
    u = np.stack(np.meshgrid(*([ax] * plane.dim), indexing="ij"), -1).reshape(-1, plane.dim)
    u = u[np.linalg.norm(u, axis=1) < rho]
    if len(u) == 0:
        u = np.zeros((1, plane.dim))
    return f + u @ plane.frame


def hole_distance(mu: PointMeasure, q: BallQuery, plane: AffinePlane | AlphaResult,
                  h: float = 0.02) -> float:
    """Largest normalized distance to the support from W intersected with B(x, r/2).

    ``plane`` is a world plane or an AlphaResult at the same query.
    """
    if isinstance(plane, AlphaResult):
        plane = plane.world_plane
    grid = _plane_grid(plane, q.x, q.radius / 2, h * q.radius)
    dist, _ = mu.tree.query(grid)
    return float(dist.max() / q.radius)


def plane_drift(coarse: AlphaResult, fine: AlphaResult, a: float = 0.25, h: float = 0.02):
    """Mutual deviation of W(x, r) and W(y, t) inside B(x, 2r), and their angle."""
    x, r = np.asarray(coarse.center), coarse.radius
    y, t = np.asarray(fine.center), fine.radius
    if not (a * r <= t <= r and np.linalg.norm(x - y) + t / 2 < r):
        raise ScaleConstraintViolated("need a r <= t <= r and |x - y| + t/2 < r")
    W, V = coarse.world_plane, fine.world_plane
    dev = []
    for src, dst in ((V, W), (W, V)):
        try:
            g = _plane_grid(src, x, 2 * r, h * r)
            dev.append(float(dst.distance(g).max()))
        except PlaneMissesBall:
            dev.append(0.0)
    return dev[0], dev[1], projection_distance(W, V)


def affine_avg_to_sup(slope: np.ndarray, offset: float, lam: float, h: float = 0.02) -> float:
    """Ratio sup_{lam B}|A| / (lam * mean_B |A|) for A(u) = slope.u + offset on R^d.

    The average is over the unit ball of R^d, approximated on a lattice.
    """
    slope = np.atleast_1d(np.asarray(slope, dtype=float))
    d = slope.shape[0]
    u, vol = _disk_lattice(d, 1.0, h)
    avg = float(np.dot(vol, np.abs(u @ slope + offset)) / vol.sum())
    # |A| is convex, so its sup on the ball is attained on the boundary
    sup = abs(offset) + lam * float(np.linalg.norm(slope))
    return sup / (lam * avg)
