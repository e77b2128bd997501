"""Stopping-time regions, Lipschitz graphs and big bi-Lipschitz pieces.

Cubes come from :mod:`wassflat.cubes`. The ball ``B`` adds a virtual top
cube ``Q0`` (id ``TOP``) of size ``r_B`` that contains every cube of the band
``Delta_B``; its alpha is ``alpha_d(x_B, r_B)``, so on flat data ``Q0`` heads a
single region. At finite resolution the cubes of the finest generation are
treated as resolution leaves: their points play the role of the limit set
``Z_0(S)`` of the region that contains them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .cubes import (CubeFlat, CubeTree, build_cubes, cube_flats, default_j_range,
                    fit_kappa, _other_label_distance)
from .errors import (ConfigInfeasible, DegenerateRegion, EmptyTree, ResolutionTooFine)
from .flatness import AffinePlane, SearchOptions, alpha_d, plane_constant
from .measure import BallQuery, PointMeasure, ball_masses, eta_from_c

TOP = -1
LN2 = math.log(2.0)


@dataclass
class CoronaConfig:
    """Parameters of the corona pipeline on one ball.

    ``n_generations`` None runs down to the resolution floor. ``lam`` only
    enters the ``lambda_star >= 10 lam`` check and the enlarged cubes.
    """

    d: int = 1
    lam: float = 8.0
    lambda_star: float = 80.0
    alpha_threshold: float = 0.05
    n_generations: int | None = None
    n_samples: int = 3
    top_alpha: bool = True
    workers: int = 1
    opts: SearchOptions | None = None

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("d", "lam", "lambda_star", "alpha_threshold",
                                             "n_generations", "n_samples", "top_alpha", "workers")}
        out["opts"] = None if self.opts is None else dict(vars(self.opts))
        return out


@dataclass
class StoppingRegion:
    """A coherent stopping-time region.

    ``stopped`` are minimal cubes with tree children (none in the region);
    ``leaves`` are minimal cubes of the finest generation. Together they
    form M(S).
    """

    id: int
    top: int
    members: list
    stopped: list
    leaves: list
    alpha_budget: float
    alpha_used: float

    @property
    def minimal(self) -> list:
        return sorted(self.stopped + self.leaves)

    def to_dict(self) -> dict:
        return {"id": self.id, "top": self.top, "size": len(self.members),
                "stopped": len(self.stopped), "leaves": len(self.leaves),
                "alpha_budget": self.alpha_budget, "alpha_used": self.alpha_used}


class Corona:
    """Bad cubes and stopping-time regions of ``Delta_B``, with uniform cube access.

    Iterating yields ``(bad, regions)``.
    """

    def __init__(self, tree: CubeTree, flats: dict, ball: BallQuery, threshold: float,
                 tops: list, delta: list, q0: CubeFlat | None):
        self.tree = tree
        self.flats = flats
        self.ball = ball
        self.threshold = float(threshold)
        self.tops = list(tops)
        self.delta = list(delta)
        self.q0 = q0
        self._q0_members = np.sort(np.concatenate([tree.cubes[c].members for c in tops]))
        self.bad: list = []
        self.regions: list = []
        self.region_of: dict = {}
        self.chain: dict = {}

    def __iter__(self):
        return iter((self.bad, self.regions))

    # uniform access, TOP included
    def d(self, cid: int) -> float:
        return self.ball.radius if cid == TOP else self.tree.cubes[cid].d

    def members(self, cid: int) -> np.ndarray:
        return self._q0_members if cid == TOP else self.tree.cubes[cid].members

    def mass(self, cid: int) -> float:
        if cid == TOP:
            return float(sum(self.tree.cubes[c].mass for c in self.tops))
        return self.tree.cubes[cid].mass

    def children(self, cid: int) -> list:
        return list(self.tops) if cid == TOP else list(self.tree.cubes[cid].children)

    def parent(self, cid: int):
        if cid == TOP:
            return None
        p = self.tree.cubes[cid].parent
        if p is None or cid in self._top_set:
            return TOP
        return p

    @property
    def _top_set(self):
        if not hasattr(self, "_tops_cache"):
            self._tops_cache = set(self.tops)
        return self._tops_cache

    def alpha(self, cid: int) -> float:
        if cid == TOP:
            return float("inf") if self.q0 is None else self.q0.alpha
        return self.flats[cid].alpha

    def plane(self, cid: int) -> AffinePlane:
        return self.q0.plane if cid == TOP else self.flats[cid].plane

    def center(self, cid: int) -> np.ndarray:
        return self.ball.x if cid == TOP else self.tree.cubes[cid].center

    def is_leaf(self, cid: int) -> bool:
        return cid != TOP and not self.tree.cubes[cid].children

    def to_dict(self) -> dict:
        return {"ball": {"center": self.ball.x.tolist(), "radius": self.ball.radius},
                "threshold": self.threshold, "n_cubes": len(self.delta),
                "bad": list(self.bad), "regions": [r.to_dict() for r in self.regions]}


def ball_band(lambda_star: float, r_B: float) -> int:
    """First generation j with 4 lambda_star 2^-j <= r_B."""
    return int(math.ceil(math.log2(4 * lambda_star / r_B) - 1e-12))


def prepare_ball(mu: PointMeasure, ball: BallQuery, cfg: CoronaConfig):
    """Cubes, band ``Delta_B`` and per-cube flatness for one ball.

    The tree is built on the support inside ``2B``. ``Delta_B`` is every cube
    of the first band generation that meets ``B`` together with all of its
    descendants, so sibling sets are always complete.

    Returns ``(tree, tops, delta, flats, q0)``.
    """
    if cfg.lambda_star < 10 * cfg.lam:
        raise ValueError("lambda_star must be at least 10 lambda")
    jt = ball_band(cfg.lambda_star, ball.radius)
    j_res = default_j_range(mu)[1]
    j_end = j_res if cfg.n_generations is None else min(jt + cfg.n_generations - 1, j_res)
    if j_end < jt:
        raise ResolutionTooFine(f"band generation {jt} is below the resolution floor")
    sub = mu.ball_indices(ball.x, 2 * ball.radius)
    if len(sub) == 0:
        raise EmptyTree("no support inside 2B")
    tree = build_cubes(mu, (jt, j_end), subset=sub)
    tops = [c.id for c in tree.generation(jt)
            if np.any(np.linalg.norm(mu.points[c.members] - ball.x, axis=1) < ball.radius)]
    if not tops:
        raise EmptyTree("no cube meets B")
    delta = sorted(set(tops).union(*[tree.descendants(t) for t in tops]))
    flats = cube_flats(mu, tree, delta, cfg.lambda_star, cfg.n_samples, cfg.d, cfg.opts,
                       cfg.lam, cfg.workers)
    q0 = None
    if cfg.top_alpha:
        res = alpha_d(mu, ball, cfg.d, cfg.opts)
        idx = int(mu.nearest(ball.x)[1])
        q0 = CubeFlat(TOP, idx, ball.x.copy(), ball.radius, float(res.value),
                      res.world_plane, cfg.d, float(res.c_v))
    return tree, tops, delta, flats, q0


def build_corona(tree: CubeTree, flats: dict, alpha_threshold: float, ball: BallQuery,
                 tops=None, delta=None, q0: CubeFlat | None = None) -> Corona:
    """Split ``Delta_B`` into bad cubes and coherent stopping-time regions.

    Bad cubes have ``alpha >= alpha_threshold``. Regions are grown from the
    largest unused good cube: all children of a region cube join together
    when every child keeps the chain sum from the top strictly below the
    threshold. ``Q0`` takes part when ``q0`` is given.
    """
    if tops is None:
        j0 = tree.j0
        tops = [c.id for c in tree.generation(j0)
                if np.any(np.linalg.norm(tree.mu.points[c.members] - ball.x, axis=1) < ball.radius)]
    if not tops:
        raise EmptyTree("no cube meets B")
    if delta is None:
        delta = sorted(set(tops).union(*[tree.descendants(t) for t in tops]))
    missing = [c for c in delta if c not in flats]
    if missing:
        raise ValueError(f"{len(missing)} cubes of Delta_B lack flatness data")
    cor = Corona(tree, flats, ball, alpha_threshold, tops, delta, q0)
    thr = cor.threshold
    cand = ([TOP] if q0 is not None else []) + sorted(delta, key=lambda c: (tree.cubes[c].j, c))
    cor.bad = [c for c in cand if cor.alpha(c) >= thr]
    bad = set(cor.bad)
    for top in cand:
        if top in bad or top in cor.region_of:
            continue
        rid = len(cor.regions)
        members, stopped, leaves = [top], [], []
        chain = {top: cor.alpha(top)}
        queue = [top]
        while queue:
            q = queue.pop(0)
            kids = cor.children(q)
            if not kids:
                leaves.append(q)
                continue
            if all(chain[q] + cor.alpha(k) < thr for k in kids):
                for k in kids:
                    chain[k] = chain[q] + cor.alpha(k)
                    members.append(k)
                    queue.append(k)
            else:
                stopped.append(q)
        for m in members:
            cor.region_of[m] = rid
        cor.chain.update(chain)
        cor.regions.append(StoppingRegion(rid, top, sorted(members), sorted(stopped),
                                          sorted(leaves), thr, float(max(chain.values()))))
    return cor


def check_corona(cor: Corona) -> None:
    """Assert partition of the good cubes, coherence and the chain budget."""
    good = [c for c in ([TOP] if cor.q0 is not None else []) + cor.delta if c not in set(cor.bad)]
    seen = {}
    for S in cor.regions:
        mem = set(S.members)
        for m in S.members:
            assert m not in seen, "cube in two regions"
            seen[m] = S.id
            assert cor.chain[m] < cor.threshold, "chain budget exceeded"
            if m != S.top:
                p = cor.parent(m)
                assert p in mem, "parent outside region"
                assert all(k in mem for k in cor.children(p)), "sibling outside region"
        kids_in = {m for m in S.members if any(k in mem for k in cor.children(m))}
        assert set(S.minimal) == mem - kids_in, "minimal cubes mismatch"
    assert set(seen) == set(good), "regions do not partition the good cubes"


def carleson_report(tree: CubeTree, flats: dict, bad, regions, ball: BallQuery,
                    corona: Corona | None = None) -> dict:
    """Packing sums of the corona, each divided by mu(B).

    ``sum_alpha_mass`` sums alpha(Q) mu(Q) over ``Delta_B``; ``bad_mass`` sums
    mu(Q) over cubes with alpha(Q) >= threshold / 2; ``tops_mass`` sums the
    masses of the region tops. ``per_generation`` splits the first sum by
    generation.
    """
    mu = tree.mu
    mB = float(ball_masses(mu, ball.x, ball.radius)[0])
    if corona is None:
        delta = sorted(flats)
        thr = regions[0].alpha_budget if regions else float("nan")
        mass_of = lambda c: tree.cubes[c].mass  # noqa: E731
    else:
        delta = corona.delta
        thr = corona.threshold
        mass_of = corona.mass
    sa, bm, per = 0.0, 0.0, {}
    for c in delta:
        a = flats[c].alpha
        m = tree.cubes[c].mass
        sa += a * m
        per[tree.cubes[c].j] = per.get(tree.cubes[c].j, 0.0) + a * m / mB
        if a >= thr / 2:
            bm += m
    tops = sum(mass_of(S.top) for S in regions)
    minimal = sum(mass_of(c) for S in regions for c in S.minimal)
    return {"mu_B": mB, "sum_alpha_mass": sa / mB, "bad_mass": bm / mB, "tops_mass": tops / mB,
            "minimal_mass": minimal / mB, "n_regions": len(regions), "n_bad": len(bad),
            "n_cubes": len(delta), "threshold": thr,
            "per_generation": {int(j): v for j, v in sorted(per.items())}}


def cube_chain_J(cor: Corona) -> np.ndarray:
    """ln 2 times the sum of alpha(Q) over the cubes of ``Delta_B`` containing each point.

    A dyadic stand-in for the integral of alpha_d(x, t) dt/t over the band.
    Returns one value per tree point (NaN outside Q0).
    """
    tree = cor.tree
    J = np.zeros(len(tree.points))
    inside = np.zeros(len(tree.points), dtype=bool)
    inside[tree.pos[cor.members(TOP)]] = True
    dset = set(cor.delta)
    for j in tree.generations:
        lab = tree.labels[j]
        ids = np.unique(lab[inside])
        amap = np.zeros(len(tree.cubes))
        for c in ids:
            if c in dset:
                amap[c] = cor.alpha(int(c))
        J[inside] += amap[lab[inside]]
    J *= LN2
    J[~inside] = np.nan
    return J


# region graphs

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6 * u - 15) + 10)


@dataclass
class RegionGraph:
    """Lipschitz graph of one region over its base plane, sampled on Whitney cells."""

    region_id: int
    d: int
    base_plane: AffinePlane
    center: np.ndarray
    radius: float
    cell_centers: np.ndarray
    cell_sides: np.ndarray
    cell_cubes: np.ndarray
    cell_capped: np.ndarray
    grid: np.ndarray
    A_grid: np.ndarray
    pou_sum: np.ndarray
    lipschitz_measured: float
    residual_points: np.ndarray
    residual: np.ndarray
    residual_max: float
    alpha_used: float
    maps: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"region": self.region_id, "d": self.d, "radius": self.radius,
                "cells": int(len(self.cell_sides)), "capped_cells": int(self.cell_capped.sum()),
                "grid_points": int(len(self.grid)), "lipschitz_measured": self.lipschitz_measured,
                "residual_max": self.residual_max, "alpha_used": self.alpha_used,
                "pou_max_error": float(np.max(np.abs(self.pou_sum - 1))) if len(self.pou_sum) else 0.0}


class _RegionGeometry:
    """d_S, D_S and the cube bookkeeping of one region."""

    def __init__(self, cor: Corona, S: StoppingRegion):
        self.cor, self.S = cor, S
        tree = cor.tree
        self.W = cor.plane(S.top)
        self.N = self.W.normals()
        by_gen = {}
        for c in S.members:
            j = None if c == TOP else tree.cubes[c].j
            by_gen.setdefault(j, []).append(c)
        self.levels = []
        for j, cubes in sorted(by_gen.items(), key=lambda t: -1e9 if t[0] is None else t[0]):
            idx = np.concatenate([cor.members(c) for c in cubes])
            owner = np.concatenate([np.full(len(cor.members(c)), c) for c in cubes])
            pts = tree.mu.points[idx]
            self.levels.append({"delta": cor.d(cubes[0]), "pts": pts, "owner": owner,
                                "tree": cKDTree(pts), "ptree": cKDTree(self.W.coords(pts))})

    def d_S(self, x: np.ndarray) -> np.ndarray:
        out = np.full(len(x), np.inf)
        for lv in self.levels:
            dist, _ = lv["tree"].query(x)
            out = np.minimum(out, dist + lv["delta"])
        return out

    def D(self, p: np.ndarray, with_owner: bool = False):
        out = np.full(len(p), np.inf)
        own = np.full(len(p), TOP - 1, dtype=np.int64)
        for lv in self.levels:
            dist, i = lv["ptree"].query(p)
            val = dist + lv["delta"]
            better = val < out
            out[better] = val[better]
            own[better] = lv["owner"][i[better]]
        return (out, own) if with_owner else out


def _affine_map(W: AffinePlane, N: np.ndarray, V: AffinePlane):
    """(M, v) with A(p) = M p + v the normal offset of V over the point p of W."""
    F, Fv = W.frame, V.frame
    G = F @ Fv.T
    Ginv = np.linalg.inv(G)
    db = V.base - W.base
    M = N @ Fv.T @ Ginv
    v = N @ db - M @ (F @ db)
    return M, v


def region_graph(mu: PointMeasure, cor: Corona, S: StoppingRegion, flats: dict | None = None,
                 min_side: float | None = None, max_residual_points: int = 2000,
                 max_cells: int = 200000) -> RegionGraph:
    """Build the graph function A of a region on U = W_S ∩ B(p_S, 10 d(Q(S))).

    Whitney cells are maximal dyadic cubes of W_S (in frame coordinates
    centered at p_S) with ``diam R <= D(p) / 20`` on R, checked through the
    1-Lipschitz bound of D; cells reaching ``min_side`` (default the
    resolution floor) are kept and flagged as capped. Each cell gets the
    cube Q_R of the usual selection rule and the affine map of W(Q_R); A is
    their smooth partition-of-unity blend. The residual is
    ``|pi_perp(x) - A(pi(x))| / d_S(x)`` over sampled points of 8 Q(S).
    """
    if flats is not None and flats is not cor.flats:
        raise ValueError("flats must be the corona's flatness data")
    d = cor.plane(S.top).dim
    if d == 0:
        raise DegenerateRegion("region graphs need d >= 1")
    geo = _RegionGeometry(cor, S)
    W, Nrm = geo.W, geo.N
    tree = cor.tree
    dQ = cor.d(S.top)
    x_top = cor.ball.x if S.top == TOP else cor.flats[S.top].x
    pS = W.coords(x_top)[0]
    L = 10 * dQ
    floor = mu.resolution_floor
    min_side = max(floor, 1e-12) if min_side is None else float(min_side)
    sq = math.sqrt(d)

    # Whitney cells, level by level
    offsets = np.array(np.meshgrid(*[[-0.25, 0.25]] * d, indexing="ij")).reshape(d, -1).T
    centers = pS[None, :].copy()
    side = 2 * L
    acc_c, acc_s, acc_cap = [], [], []
    while len(centers):
        # drop cells missing U
        gap = np.linalg.norm(np.maximum(np.abs(centers - pS) - side / 2, 0), axis=1)
        centers = centers[gap < L]
        if not len(centers):
            break
        diam = side * sq
        Dc = geo.D(centers)
        ok = diam <= (Dc - diam / 2) / 20
        cap = ~ok & (side / 2 < min_side)
        keep = ok | cap
        acc_c.append(centers[keep])
        acc_s.append(np.full(keep.sum(), side))
        acc_cap.append(cap[keep])
        rest = centers[~keep]
        centers = (rest[:, None, :] + side * offsets[None]).reshape(-1, d)
        side /= 2
        if sum(len(a) for a in acc_c) + len(centers) > max_cells:
            raise DegenerateRegion("Whitney decomposition exceeds the cell budget")
    if not acc_c:
        raise DegenerateRegion("U has no Whitney cells")
    cc = np.vstack(acc_c)
    cs = np.concatenate(acc_s)
    ccap = np.concatenate(acc_cap)

    # cube selection for each cell
    def clip_to_U(p):
        v = p - pS
        r = np.linalg.norm(v, axis=1, keepdims=True)
        return np.where(r > L, pS + v * (L / np.maximum(r, 1e-300)), p)

    pc = clip_to_U(cc)
    Dp, owner = geo.D(pc, with_owner=True)
    region_set = set(S.members)
    qr = np.empty(len(cc), dtype=np.int64)
    for i in range(len(cc)):
        q = int(owner[i])
        while True:
            p = cor.parent(q) if q != S.top else None
            if p is None or p not in region_set or cor.d(p) > 3 * Dp[i]:
                break
            q = p
        qr[i] = q
    maps = {}
    for q in np.unique(qr):
        maps[int(q)] = _affine_map(W, Nrm, cor.plane(int(q)))

    # evaluation through per-level center trees
    levels = {}
    for s in np.unique(cs):
        sel = np.flatnonzero(cs == s)
        levels[float(s)] = (sel, cKDTree(cc[sel]))

    def evaluate(P):
        P = np.atleast_2d(P)
        num = np.zeros((len(P), Nrm.shape[0]))
        den = np.zeros(len(P))
        for s, (sel, kd) in levels.items():
            hits = kd.query_ball_point(P, 1.5 * s * sq + 1e-15)
            for k, h in enumerate(hits):
                if not h:
                    continue
                cells = sel[h]
                t = np.abs(P[k] - cc[cells]) / (s / 2)
                wts = np.prod(_smoothstep(3 - t), axis=1)
                nz = wts > 0
                if not nz.any():
                    continue
                for c, wgt in zip(cells[nz], wts[nz]):
                    M, v = maps[int(qr[c])]
                    num[k] += wgt * (M @ P[k] + v)
                den[k] += wts[nz].sum()
        A = num / np.where(den > 0, den, 1.0)[:, None]
        return A, den

    # sample grid: per cell, spacing max(min D over the cell / 40, floor)
    grid = []
    for c, s in zip(cc, cs):
        Dmin = max(float(geo.D(c[None])[0]) - s * sq / 2, 0.0)
        h = max(Dmin / 40, floor, 1e-12)
        k = max(1, int(math.ceil(s / h - 1e-9)))
        k = min(k, 4)
        t = (np.arange(k) + 0.5) / k - 0.5
        g = np.array(np.meshgrid(*[t] * d, indexing="ij")).reshape(d, -1).T * s + c
        grid.append(g)
    grid = np.vstack(grid)
    grid = grid[np.linalg.norm(grid - pS, axis=1) < L]
    if not len(grid):
        raise DegenerateRegion("U has no grid points")
    A_grid, den = evaluate(grid)
    pou = np.where(den > 0, 1.0, 0.0)
    if np.any(den <= 0):
        raise DegenerateRegion("partition of unity vanishes on U")
    # partition-of-unity sums, explicitly
    pou = _pou_sums(grid, levels, cc, sq)

    lip = _lipschitz(grid, A_grid, d)

    # residual over 8 Q(S)
    mem = cor.members(S.top)
    kd_top = cKDTree(mu.points[mem])
    cand = tree.subset
    dist, _ = kd_top.query(mu.points[cand], distance_upper_bound=7 * dQ * (1 + 1e-12))
    near = cand[dist <= 7 * dQ]
    px = W.coords(mu.points[near])
    near = near[np.linalg.norm(px - pS, axis=1) < L]
    if len(near) > max_residual_points:
        near = near[np.linspace(0, len(near) - 1, max_residual_points).round().astype(int)]
    x = mu.points[near]
    dS = geo.d_S(x)
    Ax, _ = evaluate(W.coords(x))
    perp = (x - W.base) @ Nrm.T
    res = np.linalg.norm(perp - Ax, axis=1) / dS
    return RegionGraph(S.id, d, W, pS, L, cc, cs, qr, ccap, grid, A_grid, pou, lip,
                       near, res, float(res.max()) if len(res) else 0.0, S.alpha_used, maps)


def _pou_sums(grid, levels, cc, sq):
    """Sum over cells of phi_R = phi~_R / sum phi~, evaluated at the grid points."""
    tot = np.zeros(len(grid))
    parts = []
    for s, (sel, kd) in levels.items():
        hits = kd.query_ball_point(grid, 1.5 * s * sq + 1e-15)
        for k, h in enumerate(hits):
            if h:
                t = np.abs(grid[k] - cc[sel[h]]) / (s / 2)
                w = np.prod(_smoothstep(3 - t), axis=1)
                tot[k] += w.sum()
                parts.append((k, w))
    out = np.zeros(len(grid))
    for k, w in parts:
        out[k] += np.sum(w / tot[k])
    return out


def _lipschitz(P: np.ndarray, A: np.ndarray, d: int) -> float:
    if len(P) < 2:
        return 0.0
    k = min(len(P), 2 ** d + 3)
    dist, idx = cKDTree(P).query(P, k=k)
    best = 0.0
    for col in range(1, k):
        dd = dist[:, col]
        ok = dd > 1e-12
        if ok.any():
            diff = np.linalg.norm(A[ok] - A[idx[ok, col]], axis=1)
            best = max(best, float(np.max(diff / dd[ok])))
    return best


def projection_separation(cor: Corona, S: StoppingRegion, max_points: int = 1500,
                    leaf_points: bool = False) -> float:
    """min |pi_S(x) - pi_S(y)| / |x - y| over pairs of E(S).

    E(S) is the set of centers of the minimal cubes. With ``leaf_points``
    the sample points of the finest minimal cubes replace their centers,
    which tests whether they can serve as the limit set Z(S).
    """
    W = cor.plane(S.top)
    pts = []
    if leaf_points and S.leaves:
        pts.append(cor.tree.mu.points[np.concatenate([cor.members(c) for c in S.leaves])])
        cubes = S.stopped
    else:
        cubes = S.minimal
    pts.append(np.array([cor.center(c) for c in cubes]).reshape(-1, W.n))
    E = np.vstack(pts)
    if len(E) > max_points:
        E = E[np.linspace(0, len(E) - 1, max_points).round().astype(int)]
    if len(E) < 2:
        return 1.0
    dx = pdist(E)
    dp = pdist(W.coords(E))
    ok = dx > 0
    return float(np.min(dp[ok] / dx[ok]))


# big pieces

@dataclass
class BigPiece:
    """Kept set A, its map f into R^d and the bookkeeping of the removed sets."""

    kept: np.ndarray
    f: np.ndarray
    region: np.ndarray
    mu_B: float
    F1_mass: float
    F2_mass: float
    F3_mass: float
    removed_ratio: float
    distortion_measured: float
    config: dict
    packing: float
    N_bound: int
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta_hi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    J: np.ndarray = field(default_factory=lambda: np.zeros(0))
    removed_sharp: float = 0.0
    theta_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return {"kept": int(len(self.kept)), "mu_B": self.mu_B, "F1": self.F1_mass,
                "F2": self.F2_mass, "F3": self.F3_mass, "removed_ratio": self.removed_ratio,
                "distortion": self.distortion_measured, "config": self.config,
                "packing": self.packing, "N_bound": self.N_bound,
                "removed_sharp": self.removed_sharp, "theta_ratio": self.theta_ratio}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"f{i}" for i in range(self.f.shape[1])] + ["region"])
            for i, fx, r in zip(self.kept, self.f, self.region):
                w.writerow([int(i)] + [repr(float(v)) for v in fx] + [int(r)])


def _z_regions(cor: Corona) -> set:
    """Regions whose finest points pass the projection check and act as Z(S)."""
    return {S.id for S in cor.regions
            if len(S.members) > 1 and S.leaves
            and projection_separation(cor, S, leaf_points=True) >= 0.5}


def _t_prime(cor: Corona, zreg: set) -> list:
    out = {TOP} | set(cor.bad)
    for S in cor.regions:
        out.add(S.top)
        out.update(S.stopped)
        if S.id not in zreg:
            out.update(S.leaves)
    return sorted(out)


def _t_depths(cor: Corona, tprime: list) -> dict:
    """j(Q): number of strictly larger cubes of T' containing Q (Q0 counts)."""
    tset = set(tprime)
    depth = {TOP: 0}
    for q in tprime:
        if q == TOP:
            continue
        n, p = 0, cor.parent(q)
        while p is not None:
            if p in tset:
                n += 1
            p = cor.parent(p)
        depth[q] = n
    return depth


def _edge(cor: Corona, cid: int) -> np.ndarray:
    """dist(x, Sigma \\ Q) for the members of Q, capped at d(Q)."""
    tree = cor.tree
    mem = cor.members(cid)
    if cid == TOP:
        inside = np.zeros(len(tree.points), dtype=bool)
        inside[tree.pos[mem]] = True
        out_pts = tree.points[~inside]
        if not len(out_pts):
            return np.full(len(mem), cor.d(TOP))
        dist, _ = cKDTree(out_pts).query(tree.points[tree.pos[mem]])
        return np.minimum(dist, cor.d(TOP))
    c = tree.cubes[cid]
    labels = tree.labels[c.j]
    return _other_label_distance(tree.kdtree, tree.points, labels, tree.pos[mem], c.d)


def _measured_a(cor: Corona, cubes) -> float:
    """a with Sigma ∩ B(c_Q, 2 a d(Q)) ⊂ Q for the given cubes, capped at 1/2."""
    tree = cor.tree
    a = 0.5
    for q in cubes:
        if q == TOP:
            continue
        c = tree.cubes[q]
        dist = _other_label_distance(tree.kdtree, tree.points, tree.labels[c.j],
                                     tree.pos[[c.center_index]], 4 * c.d)[0]
        a = min(a, dist / (2 * c.d))
    return float(a)


def _ball_points(k: int, d: int) -> np.ndarray:
    """k deterministic, well spread points of the closed unit d-ball.

    Farthest-point sampling from the origin over a cubic grid in the ball.
    """
    if k == 1:
        return np.zeros((1, d))
    if d == 1:
        return np.linspace(-1, 1, k)[:, None]
    m = int(math.ceil(2 * (4 * k) ** (1 / d))) + 1
    t = np.linspace(-1, 1, m)
    G = np.array(np.meshgrid(*[t] * d, indexing="ij")).reshape(d, -1).T
    G = G[np.linalg.norm(G, axis=1) <= 1 + 1e-12]
    pick = [int(np.argmin(np.linalg.norm(G, axis=1)))]
    dist = np.linalg.norm(G - G[pick[0]], axis=1)
    for _ in range(k - 1):
        i = int(np.argmax(dist))
        pick.append(i)
        dist = np.minimum(dist, np.linalg.norm(G - G[i], axis=1))
    return G[pick]


def _packing_map(E: np.ndarray, plane: AffinePlane, center: np.ndarray, dQ: float,
                 c_min: float) -> np.ndarray:
    """Separated points of B(0, d(Q)) in R^d, one per row of E.

    The projections of E on the cube's plane, centered at c_Q and scaled into
    the ball, are used when they keep separation ``c_min d(Q)``; otherwise a
    fixed spread set is matched to them by minimal squared displacement.
    """
    u = (E - center) @ plane.frame.T
    k, d = u.shape
    rad = np.linalg.norm(u, axis=1).max()
    X = u * (dQ / rad) if rad > dQ else u.copy()
    if k < 2 or pdist(X).min() >= c_min * dQ:
        return X
    P = _ball_points(k, d) * dQ
    cost = ((X[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)
    r, c = linear_sum_assignment(cost)
    out = np.empty_like(X)
    out[r] = P[c]
    return out


def _f1_f2(cor: Corona, tprime: list, depth: dict, N: int, rho: float, in_B: np.ndarray):
    """Indicator masks (over tree points) of F1 and F2."""
    tree = cor.tree
    F1 = np.zeros(len(tree.points), dtype=bool)
    F2 = np.zeros(len(tree.points), dtype=bool)
    for q in tprime:
        pos = tree.pos[cor.members(q)]
        # points of a finest cube in T' sit one level below it
        if depth[q] > N or (cor.is_leaf(q) and depth[q] >= N):
            F1[pos] = True
        F2[pos[cor._edge_cache[q] < (1 - rho) * cor.d(q)]] = True
    return F1 & in_B, F2 & in_B


def big_piece(mu: PointMeasure, cor: Corona, gamma: float = 0.2, N: int | None = None,
              rho: float | None = None, c_min: float = 0.05, a_cap: float | None = None,
              c_cap: float | None = None) -> BigPiece:
    """Kept set A = (Sigma ∩ B) minus F1, F2 and F3, and the map f.

    ``N`` and ``rho`` default to the smallest values with
    ``mu(F1) <= gamma/4 mu(B)`` and ``mu(F2) <= gamma/4 mu(B)``, scanning
    N = 1, 2, ... and rho = 1 - 2^-k. The finest points of a region act as
    its limit set Z(S) when the projection onto W_S keeps them 2-separated;
    other finest cubes join T' and each of their sample points becomes a
    cube one level deeper, mapped through a separated set like the children
    of any cube outside T*. The map uses the measured constants a and c,
    lowered to ``a_cap`` and ``c_cap`` when given (any smaller values
    keep the separation properties, and fixed caps make the map comparable
    between resolutions). F3 holds the points of B left
    without a map (expected empty).

    Raises
    ------
    ConfigInfeasible
        When the given (or best reachable) N and rho leave
        ``mu(F1) + mu(F2) >= gamma/2 mu(B)``.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if N is not None and N < 1:
        raise ValueError("N must be at least 1")
    if rho is not None and not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    if cor.q0 is None:
        raise ValueError("big_piece needs the corona's top cube Q0")
    tree = cor.tree
    ball = cor.ball
    pts, w = tree.points, tree.weights
    in_B = np.linalg.norm(pts - ball.x, axis=1) < ball.radius
    mB = float(w[in_B].sum())
    zreg = _z_regions(cor)
    tprime = _t_prime(cor, zreg)
    depth = _t_depths(cor, tprime)
    cor._edge_cache = {q: _edge(cor, q) for q in tprime}
    packing = sum(cor.mass(q) for q in tprime) / mB
    N_bound = int(math.ceil(4 * packing / gamma))
    max_depth = max(depth.values())

    def masses(n, r):
        F1, F2 = _f1_f2(cor, tprime, depth, n, r, in_B)
        return F1, F2, float(w[F1].sum()), float(w[F2].sum())

    if N is None:
        N = 1
        while N <= max_depth and masses(N, 0.5)[2] > gamma / 4 * mB:
            N += 1
    if rho is None:
        for k in range(1, 40):
            rho = 1 - 2.0 ** -k
            if masses(N, rho)[3] <= gamma / 4 * mB:
                break
    F1, F2, m1, m2 = masses(N, rho)
    if m1 + m2 >= gamma / 2 * mB:
        raise ConfigInfeasible(
            f"mu(F1) + mu(F2) = {(m1 + m2) / mB:.4f} mu(B) exceeds gamma/2 = {gamma / 2:.4f} "
            f"with N = {N}, rho = {rho}")

    T = [q for q in tprime if depth[q] <= N]
    tset = set(T)
    rset = {S.top: S for S in cor.regions}
    t_star = [q for q in T if q in rset and len(rset[q].members) > 1]
    tstar_set = set(t_star)

    # Z_0 of the Z-regions with top in T; points of finest cubes of T are point cubes
    point_leaves = [q for q in T if cor.is_leaf(q) and depth[q] < N]
    zero = np.full(len(pts), -1, dtype=np.int64)
    owner = np.full(len(pts), TOP - 1, dtype=np.int64)
    for S in cor.regions:
        if S.top in tstar_set and S.id in zreg:
            for c in S.leaves:
                zero[tree.pos[cor.members(c)]] = S.id
                owner[tree.pos[cor.members(c)]] = S.top
    for q in point_leaves:
        owner[tree.pos[cor.members(q)]] = q
        zero[tree.pos[cor.members(q)]] = cor.region_of.get(q, -1)
    covered = owner >= TOP
    keep = in_B & ~F1 & ~F2 & covered
    F3 = in_B & ~F1 & ~F2 & ~covered
    m3 = float(w[F3].sum())

    # construction constants
    used = [q for q in T if q != TOP]
    kids = {c for q in T if q not in tstar_set for c in cor.children(q)}
    a = _measured_a(cor, sorted(set(used) | kids))
    X = {}
    c_meas = 1.0
    for q in T:
        if q in tstar_set:
            continue
        ch = cor.children(q)
        if ch:
            E = np.array([cor.center(c) for c in ch])
        elif q in point_leaves:
            ch = [int(i) for i in cor.members(q)]
            E = tree.mu.points[ch]
        else:
            continue
        Xq = _packing_map(E, cor.plane(q), cor.center(q), cor.d(q), c_min)
        X[q] = dict(zip(ch, Xq))
        if len(ch) > 1:
            c_meas = min(c_meas, float(pdist(Xq).min() / cor.d(q)))
    a_used = a if a_cap is None else min(a, a_cap)
    c_used = c_meas if c_cap is None else min(c_meas, c_cap)
    scale = a_used * c_used / 10

    def g_center(q, child):
        if q in tstar_set:
            return (cor.center(child) - cor.center(q)) @ cor.plane(q).frame.T
        return X[q][child]

    def t_parent(q):
        p = cor.parent(q)
        while p is not None and p not in tset:
            p = cor.parent(p)
        return p

    kept = np.flatnonzero(keep)
    dim = cor.plane(TOP).dim
    fvals = np.zeros((len(kept), dim))
    own = owner[kept]
    for q in np.unique(own):
        q = int(q)
        sel = np.flatnonzero(own == q)
        x = pts[kept[sel]]
        if q in tstar_set:
            y = (x - cor.center(q)) @ cor.plane(q).frame.T
        else:
            y = np.array([X[q][int(i)] for i in tree.subset[kept[sel]]])
        cur = q
        while cur != TOP and depth[cur] >= 1:
            par = t_parent(cur)
            y = scale * y + g_center(par, cur)
            cur = par
        fvals[sel] = y
    region_ids = zero[kept]
    L = _distortion(pts[kept], fvals)
    return BigPiece(tree.subset[kept], fvals, region_ids, mB, m1 / mB, m2 / mB, m3 / mB,
                    (mB - float(w[keep].sum())) / mB, L,
                    {"N": int(N), "rho": float(rho), "gamma": float(gamma), "a": a_used, "c": c_used,
                     "a_measured": a, "c_measured": c_meas},
                    packing, N_bound)


def _distortion(x: np.ndarray, fx: np.ndarray, block: int = 2048) -> float:
    """max(Lip f, Lip f^-1) over all pairs; inf when two points share an image."""
    n = len(x)
    if n < 2:
        return 1.0
    hi, lo = 0.0, np.inf
    for s in range(0, n, block):
        xs, fs = x[s:s + block], fx[s:s + block]
        for t in range(s, n, block):
            dx = np.linalg.norm(xs[:, None, :] - x[None, t:t + block, :], axis=2)
            df = np.linalg.norm(fs[:, None, :] - fx[None, t:t + block, :], axis=2)
            if t == s:
                iu = np.triu_indices(len(xs), 1, len(dx[0]))
                dx, df = dx[iu], df[iu]
            ok = dx > 0
            if not ok.any():
                continue
            r = df[ok] / dx[ok]
            hi = max(hi, float(r.max()))
            lo = min(lo, float(r.min()))
    if lo <= 0:
        return float("inf")
    return float(max(hi, 1 / lo, 1.0))


def refine_sharp(piece: BigPiece, cor: Corona, J=None, C1: float | None = None,
                 gamma: float | None = None) -> BigPiece:
    """Drop kept points with J > 2 C1 / gamma and report density comparability.

    ``J`` holds one value per kept point (default: the cube-chain sum of
    :func:`cube_chain_J`); ``C1`` defaults to the measured Carleson ratio,
    the mu-average of J over B. For each survivor the point density
    ``theta(x) = r^-d c mu(B(x, r))`` is taken at the finest cube scale
    ``r = r_Q``, and the drift bounds
    ``[r1^-d mu(B(x,r1)) e^(-2J), 2^d r1^-d mu(B(x,r1)) e^(2J)]`` use
    ``r1 = r_B / 2``.
    """
    tree = cor.tree
    mu = tree.mu
    gamma = piece.config["gamma"] if gamma is None else gamma
    Jall = cube_chain_J(cor)
    ball = cor.ball
    in_B = np.linalg.norm(tree.points - ball.x, axis=1) < ball.radius
    if C1 is None:
        wB = tree.weights[in_B]
        C1 = float(np.nansum(wB * Jall[in_B]) / wB.sum())
    Jk = Jall[tree.pos[piece.kept]] if J is None else np.asarray(J, dtype=float)
    keep = Jk <= 2 * C1 / gamma
    idx = piece.kept[keep]
    d = piece.f.shape[1]
    r1 = ball.radius / 2
    m1 = ball_masses(mu, mu.points[idx], r1) if len(idx) else np.zeros(0)
    lo = r1 ** -d * m1 * np.exp(-2 * Jk[keep])
    hi = 2 ** d * r1 ** -d * m1 * np.exp(2 * Jk[keep])
    theta = np.zeros(len(idx))
    jm = tree.j_max
    for i, p in enumerate(idx):
        q = tree.cube_of(int(p), jm).id
        fl = cor.flats[q]
        x = mu.points[p]
        try:
            c = plane_constant(fl.plane.to_local(x, fl.r))
        except Exception:
            c = 2.0 ** d
        c = min(max(c, 1.0), 2.0 ** d)
        theta[i] = fl.r ** -d * c * ball_masses(mu, x, fl.r)[0]
    removed = float(tree.weights[tree.pos[piece.kept[~keep]]].sum()) / piece.mu_B
    ratio = float(theta.max() / theta.min()) if len(theta) and theta.min() > 0 else float("nan")
    out = BigPiece(idx, piece.f[keep], piece.region[keep], piece.mu_B, piece.F1_mass,
                   piece.F2_mass, piece.F3_mass, piece.removed_ratio + removed,
                   _distortion(mu.points[idx], piece.f[keep]),
                   dict(piece.config, C1=C1, J_cut=2 * C1 / gamma), piece.packing, piece.N_bound,
                   theta, lo, hi, Jk[keep], removed, ratio)
    return out


def analyze_ball(mu: PointMeasure, ball: BallQuery, cfg: CoronaConfig | None = None) -> Corona:
    """prepare_ball followed by build_corona."""
    cfg = cfg or CoronaConfig()
    tree, tops, delta, flats, q0 = prepare_ball(mu, ball, cfg)
    return build_corona(tree, flats, cfg.alpha_threshold, ball, tops, delta, q0)


def region_report(cor: Corona, graphs: list) -> list:
    """One JSON-ready record per region graph."""
    out = []
    for g in graphs:
        S = cor.regions[g.region_id]
        gens = [cor.tree.cubes[c].j for c in S.members if c != TOP]
        rec = {"region": S.id, "top": S.top,
               "generations": [min(gens), max(gens)] if gens else [],
               "alpha_budget_used": S.alpha_used,
               "lipschitz_measured": g.lipschitz_measured, "residual_max": g.residual_max}
        out.append(rec)
    return out


def save_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def doubling_eta(cor: Corona) -> float:
    """eta from the largest mass ratio between parent and child cubes of Delta_B."""
    c = 1.0
    for q in cor.delta:
        p = cor.tree.cubes[q].parent
        if p is not None:
            c = max(c, cor.tree.cubes[p].mass / cor.tree.cubes[q].mass)
    return eta_from_c(c)
