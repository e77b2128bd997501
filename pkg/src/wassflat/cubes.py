"""Dyadic pseudo-cubes on the support of a discrete measure.

Generation ``j`` uses a greedy maximal ``2^-j``-separated net, nested in
the net of generation ``j + 1``. Each point of the finest generation goes to
its nearest net center; each net center of generation ``j + 1`` hangs below
the nearest center of generation ``j``. A cube is the set of points whose
chain of centers passes through its own center, so partition and nesting
are exact by construction. The ball constants are measured, not assumed.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTree, ResolutionTooFine
from .flatness import AffinePlane, SearchOptions, alpha_d, alpha_min
from .measure import BallQuery, PointMeasure

TIE_TOL = 1e-12
K_SHORT = 32


@dataclass
class Cube:
    """One pseudo-cube. ``members`` are indices into the parent measure."""

    id: int
    j: int
    center_index: int
    center: np.ndarray
    members: np.ndarray
    parent: int | None
    children: list = field(default_factory=list)
    mass: float = 0.0

    @property
    def d(self) -> float:
        return 2.0 ** (-self.j)

    def to_dict(self) -> dict:
        return {"id": self.id, "j": self.j, "center": self.center.tolist(),
                "center_index": self.center_index, "parent": self.parent,
                "children": list(self.children), "mass": self.mass,
                "size": int(len(self.members))}


@dataclass
class CubeFlat:
    """Flatness data attached to a cube: best sampled (x_Q, r_Q) and its plane."""

    cube_id: int
    x_index: int
    x: np.ndarray
    r: float
    alpha: float
    plane: AffinePlane
    dim: int
    c_v: float = 1.0

    def to_dict(self) -> dict:
        return {"cube": self.cube_id, "x_index": self.x_index, "x": self.x.tolist(),
                "r": self.r, "alpha": self.alpha, "dim": self.dim, "c_v": self.c_v,
                "plane": self.plane.to_dict()}


def _nearest_lowest(tree: cKDTree, order: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Index (into the tree data) of the nearest point; ties go to the lowest ``order``."""
    k = min(2, tree.n)
    dist, idx = tree.query(pts, k=k)
    if k == 1:
        return np.atleast_1d(idx).astype(np.int64)
    best = idx[:, 0].copy()
    tie = dist[:, 1] - dist[:, 0] <= TIE_TOL * np.maximum(1.0, dist[:, 0])
    if np.any(tie):
        for i in np.flatnonzero(tie):
            # rare: collect every center at the minimal distance
            cand = tree.query_ball_point(pts[i], dist[i, 0] * (1 + 1e-9) + TIE_TOL)
            best[i] = min(cand, key=lambda c: order[c])
    return best


def _greedy_net(tree: cKDTree, pts: np.ndarray, seeds: np.ndarray, sep: float) -> np.ndarray:
    """Extend ``seeds`` (positions) to a maximal ``sep``-separated net, scanning in index order."""
    n = len(pts)
    covered = np.zeros(n, dtype=bool)
    if len(seeds):
        dist, _ = cKDTree(pts[seeds]).query(pts, distance_upper_bound=sep)
        covered = dist < sep
    new = []
    for i in np.flatnonzero(~covered):
        if covered[i]:
            continue
        new.append(i)
        nb = np.asarray(tree.query_ball_point(pts[i], sep), dtype=np.int64)
        if len(nb):
            close = np.linalg.norm(pts[nb] - pts[i], axis=1) < sep
            covered[nb[close]] = True
    return np.concatenate([np.asarray(seeds, dtype=np.int64), np.asarray(new, dtype=np.int64)])


def _other_label_distance(tree: cKDTree, pts: np.ndarray, labels: np.ndarray,
                          query: np.ndarray, cap) -> np.ndarray:
    """Distance from each queried position to the nearest point with another label, capped.

    A short nearest-neighbor pass settles most points; the rest are handled
    per label against a tree of the nearby points carrying other labels.
    """
    query = np.asarray(query, dtype=np.int64)
    cap = np.broadcast_to(np.asarray(cap, dtype=float), query.shape).copy()
    out = cap.copy()
    n = tree.n
    if len(query) == 0:
        return out
    kk = min(K_SHORT, n)
    dist, idx = tree.query(pts[query], k=kk, distance_upper_bound=float(cap.max()))
    dist = dist.reshape(len(query), kk)
    idx = idx.reshape(len(query), kk)
    valid = np.isfinite(dist) & (dist < cap[:, None])
    lab = np.where(valid, labels[np.minimum(idx, n - 1)], -2)
    other = valid & (lab != labels[query][:, None])
    hit = other.any(axis=1)
    first = np.argmax(other, axis=1)
    out[hit] = dist[np.arange(len(query)), first][hit]
    settled = hit | ~valid[:, -1] | (kk >= n)
    rest = np.flatnonzero(~settled)
    if len(rest):
        own = labels[query[rest]]
        for L in np.unique(own):
            sel = rest[own == L]
            qp = pts[query[sel]]
            mid = qp.mean(axis=0)
            reach = np.linalg.norm(qp - mid, axis=1).max() + cap[sel].max()
            cand = np.asarray(tree.query_ball_point(mid, reach * (1 + 1e-12)), dtype=np.int64)
            cand = cand[labels[cand] != L]
            if len(cand):
                d2, _ = cKDTree(pts[cand]).query(qp)
                out[sel] = np.minimum(d2, cap[sel])
    return out


class CubeTree:
    """Nested pseudo-cube partitions of (a subset of) the support of ``mu``.

    Attributes
    ----------
    cubes : list of Cube
        All cubes, ordered by generation then net order; ``cubes[i].id == i``.
    labels : dict
        ``labels[j]`` maps subset positions to cube ids of generation ``j``.
    c_outer, c_inner : float
        Measured constants with
        ``Sigma ∩ B(c_Q, d(Q)/c_inner) ⊂ Q ⊂ B(c_Q, c_outer d(Q))``.
    """

    def __init__(self, mu: PointMeasure, subset: np.ndarray, j0: int, j_max: int,
                 cubes: list, labels: dict, sep_factor: float = 1.0):
        self.mu = mu
        self.subset = subset
        self.j0, self.j_max = j0, j_max
        self.cubes = cubes
        self.labels = labels
        self.sep_factor = sep_factor
        self.points = mu.points[subset]
        self.weights = mu.weights[subset]
        self.kdtree = cKDTree(self.points)
        self.pos = np.full(len(mu), -1, dtype=np.int64)
        self.pos[subset] = np.arange(len(subset))
        self.kappa: float | None = None
        self.kappa_r2: float | None = None
        self._edge = {}
        self._nn = None
        self.c_outer, self.c_inner = self._ball_constants()

    @property
    def generations(self) -> range:
        return range(self.j0, self.j_max + 1)

    def generation(self, j: int) -> list:
        return [c for c in self.cubes if c.j == j]

    def cube_of(self, point_index: int, j: int) -> Cube:
        return self.cubes[self.labels[j][self.pos[point_index]]]

    def ancestors(self, cid: int) -> list:
        out = []
        p = self.cubes[cid].parent
        while p is not None:
            out.append(p)
            p = self.cubes[p].parent
        return out

    def descendants(self, cid: int) -> list:
        out, stack = [], list(self.cubes[cid].children)
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self.cubes[c].children)
        return sorted(out)

    def _ball_constants(self):
        c_out, c_in = 0.0, 1.0
        for j in self.generations:
            gen = [c for c in self.cubes if c.j == j]
            d = 2.0 ** (-j)
            for c in gen:
                r = np.linalg.norm(self.points[self.pos[c.members]] - c.center, axis=1).max()
                c_out = max(c_out, r / d)
            if len(gen) > 1:
                cpos = self.pos[[c.center_index for c in gen]]
                dist = _other_label_distance(self.kdtree, self.points, self.labels[j], cpos, 4 * d)
                c_in = max(c_in, float(np.max(d / dist)))
        return float(c_out), float(c_in)

    def edge_distance(self, j: int) -> np.ndarray:
        """dist(x, support outside the cube of x) at generation j, capped at d/2."""
        if j not in self._edge:
            d = 2.0 ** (-j)
            self._edge[j] = _other_label_distance(self.kdtree, self.points, self.labels[j],
                                                  np.arange(len(self.points)), 0.5 * d)
        return self._edge[j]

    def nn_spacing(self) -> np.ndarray:
        """Distance from each point to its nearest neighbor in the tree's point set."""
        if self._nn is None:
            if len(self.points) < 2:
                self._nn = np.zeros(len(self.points))
            else:
                self._nn = self.kdtree.query(self.points, k=2)[0][:, 1]
        return self._nn

    def to_dict(self) -> dict:
        return {"j0": self.j0, "j_max": self.j_max, "sep_factor": self.sep_factor,
                "c_outer": self.c_outer, "c_inner": self.c_inner,
                "kappa": self.kappa, "kappa_r2": self.kappa_r2,
                "cubes": [{"id": c.id, "j": c.j, "center": c.center.tolist(),
                           "parent": c.parent, "mass": c.mass} for c in self.cubes]}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def to_dot(self) -> str:
        lines = ["digraph cubes {", "  node [shape=box];"]
        for c in self.cubes:
            lines.append(f'  q{c.id} [label="{c.id} j={c.j} m={c.mass:.3g}"];')
        for c in self.cubes:
            for ch in c.children:
                lines.append(f"  q{c.id} -> q{ch};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def default_j_range(mu: PointMeasure) -> tuple:
    diam = mu.diameter
    floor = mu.resolution_floor
    j0 = math.ceil(-math.log2(diam)) if diam > 0 else 0
    j_max = math.floor(-math.log2(floor)) if floor > 0 else j0
    return j0, max(j0, j_max)


def build_cubes(mu: PointMeasure, j_range=None, subset=None) -> CubeTree:
    """Build nested pseudo-cubes for generations ``j_range = (j0, j_max)``.

    Parameters
    ----------
    subset : array of int, optional
        Restrict the construction to these support indices (for example the
        points of a ball); the rest of the support is ignored.
    """
    if len(mu) == 0:
        raise EmptyTree("empty measure")
    subset = np.arange(len(mu)) if subset is None else np.unique(np.asarray(subset, dtype=np.int64))
    if len(subset) == 0:
        raise EmptyTree("empty subset")
    j0, j_max = default_j_range(mu) if j_range is None else (int(j_range[0]), int(j_range[1]))
    if j_max < j0:
        raise ValueError("j_range must satisfy j0 <= j_max")
    floor = mu.resolution_floor
    if floor > 0 and 2.0 ** (-j_max) < floor:
        raise ResolutionTooFine(
            f"generation {j_max} (d = {2.0 ** -j_max:.3g}) is below the resolution floor {floor:.3g}")

    pts = mu.points[subset]
    w = mu.weights[subset]
    kd = cKDTree(pts)
    gens = list(range(j0, j_max + 1))
    nets = []
    prev = np.zeros(0, dtype=np.int64)
    for j in gens:
        prev = _greedy_net(kd, pts, prev, 2.0 ** (-j))
        nets.append(prev)

    # parent of each net center: nearest center one generation up
    local = [None] * len(gens)
    finest = nets[-1]
    local[-1] = _nearest_lowest(cKDTree(pts[finest]), subset[finest], pts)
    parent_maps = [None] * len(gens)
    for g in range(len(gens) - 1, 0, -1):
        up = nets[g - 1]
        parent_maps[g] = _nearest_lowest(cKDTree(pts[up]), subset[up], pts[nets[g]])
        local[g - 1] = parent_maps[g][local[g]]

    cubes, labels = [], {}
    offset = 0
    offsets = []
    for g, j in enumerate(gens):
        net = nets[g]
        lab = local[g]
        order = np.argsort(lab, kind="stable")
        counts = np.bincount(lab, minlength=len(net))
        starts = np.concatenate([[0], np.cumsum(counts)])
        offsets.append(offset)
        for c in range(len(net)):
            mem = np.sort(order[starts[c]:starts[c + 1]])
            par = None if g == 0 else offsets[g - 1] + int(parent_maps[g][c])
            cubes.append(Cube(id=offset + c, j=j, center_index=int(subset[net[c]]),
                              center=pts[net[c]].copy(), members=subset[mem],
                              parent=par, mass=float(np.sum(w[mem]))))
        labels[j] = lab + offset
        offset += len(net)
    for c in cubes:
        if c.parent is not None:
            cubes[c.parent].children.append(c.id)
    return CubeTree(mu, subset, j0, j_max, cubes, labels)


def check_partition(tree: CubeTree) -> None:
    """Assert exact partition, nesting and center membership; raise AssertionError otherwise."""
    full = set(tree.subset.tolist())
    for j in tree.generations:
        seen = set()
        for c in tree.generation(j):
            mem = set(c.members.tolist())
            assert mem, "empty cube"
            assert c.center_index in mem, "center outside its cube"
            assert not (mem & seen), "overlapping cubes"
            seen |= mem
            if c.children:
                kids = set()
                for ch in c.children:
                    kids |= set(tree.cubes[ch].members.tolist())
                assert kids == mem, "children do not tile the parent"
        assert seen == full, "generation does not cover the support"


def boundary_mass(tree: CubeTree, Q: Cube | int, lam: float) -> float:
    """Relative boundary mass of a cube.

    For ``lam < 1``: mass of Q minus the reduced cube
    ``{x in Q : dist(x, Sigma \\ Q) >= (1 - lam) d(Q)}``, over mu(Q).
    For ``lam > 1``: mass of ``{x not in Q : dist(x, Q) <= (lam - 1) d(Q)}``
    over mu(Q).
    """
    Q = tree.cubes[Q] if isinstance(Q, (int, np.integer)) else Q
    if not 0.5 < lam < 2 or lam == 1:
        raise ValueError("lambda must lie in (0.5, 2) and differ from 1")
    pos = tree.pos[Q.members]
    if lam < 1:
        edge = tree.edge_distance(Q.j)[pos]
        lost = tree.weights[pos][edge < (1 - lam) * Q.d]
        return float(lost.sum() / Q.mass)
    t = (lam - 1) * Q.d
    mem = tree.points[pos]
    reach = np.linalg.norm(mem - Q.center, axis=1).max() + t
    cand = np.asarray(tree.kdtree.query_ball_point(Q.center, reach * (1 + 1e-12)), dtype=np.int64)
    cand = cand[tree.labels[Q.j][cand] != Q.id]
    if len(cand) == 0:
        return 0.0
    dist, _ = cKDTree(mem).query(tree.points[cand])
    return float(tree.weights[cand][dist <= t].sum() / Q.mass)


def fit_kappa(tree: CubeTree, lambdas=(0.9, 0.95, 0.99), generations=None, min_size: int = 8):
    """Fit ``deficit(lam) ~ C (1 - lam)^kappa`` on the mass-weighted mean deficit.

    A discrete cube has no boundary layer thinner than its point spacing, so
    only resolved cubes enter: at least ``min_size`` points, a nonempty
    layer ``dist(x, Sigma \\ Q) < (1 - min lam) d(Q)``, and nearest-neighbor
    spacing at most ``(1 - max lam) d(Q)`` throughout that layer. Returns
    ``(kappa, C, r2, deficits, n_cubes)``; ``kappa`` is NaN when fewer than
    two deficits are positive.
    """
    gens = set(tree.generations if generations is None else generations)
    spacing = tree.nn_spacing()
    cubes = []
    for c in tree.cubes:
        if c.j not in gens or len(c.members) < min_size:
            continue
        pos = tree.pos[c.members]
        layer = tree.edge_distance(c.j)[pos] < (1 - min(lambdas)) * c.d
        if layer.any() and spacing[pos[layer]].max() <= (1 - max(lambdas)) * c.d:
            cubes.append(c)
    if not cubes:
        return float("nan"), float("nan"), float("nan"), np.zeros(len(lambdas)), 0
    mass = sum(c.mass for c in cubes)
    defs = np.array([sum(boundary_mass(tree, c, lam) * c.mass for c in cubes) / mass
                     for lam in lambdas])
    x = np.log(1 - np.asarray(lambdas, dtype=float))
    ok = defs > 0
    if ok.sum() < 2:
        return float("nan"), float("nan"), float("nan"), defs, len(cubes)
    y = np.log(defs[ok])
    slope, icpt = np.polyfit(x[ok], y, 1)
    resid = y - (slope * x[ok] + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / ss) if ss > 0 else 1.0
    tree.kappa, tree.kappa_r2 = float(slope), r2
    return float(slope), float(np.exp(icpt)), r2, defs, len(cubes)


def _enlarged_contains(tree: CubeTree, A: Cube, B: Cube, lam: float) -> bool:
    """Is A inside lam B, that is dist(a, B) <= (lam - 1) d(B) for every a in A?"""
    t = (lam - 1) * B.d
    pa = tree.points[tree.pos[A.members]]
    pb = tree.points[tree.pos[B.members]]
    dist, _ = cKDTree(pb).query(pa, distance_upper_bound=t * (1 + 1e-12) + 1e-300)
    return bool(np.all(dist <= t))


def semi_adjacent(tree: CubeTree, Q: Cube | int, R: Cube | int, lam: float = 8.0) -> bool:
    Q = tree.cubes[Q] if isinstance(Q, (int, np.integer)) else Q
    R = tree.cubes[R] if isinstance(R, (int, np.integer)) else R
    return _enlarged_contains(tree, Q, R, lam) and _enlarged_contains(tree, R, Q, lam)


def _hausdorff_ratio(tree: CubeTree, A: Cube, B: Cube) -> float:
    """max over a in A of dist(a, B), divided by d(B)."""
    pa = tree.points[tree.pos[A.members]]
    dist, _ = cKDTree(tree.points[tree.pos[B.members]]).query(pa)
    return float(dist.max() / B.d)


def guidance_lambda(tree: CubeTree, max_pairs: int = 4000) -> float:
    """Smallest lambda making every child ~ parent and close same-generation pairs semi-adjacent.

    Same-generation pairs are those with dist(Q, R) <= d(Q). At most
    ``max_pairs`` pairs of each kind are examined, in cube order.
    """
    need = 1.0
    pairs = 0
    for c in tree.cubes:
        if c.parent is None:
            continue
        p = tree.cubes[c.parent]
        need = max(need, 1 + _hausdorff_ratio(tree, p, c), 1 + _hausdorff_ratio(tree, c, p))
        pairs += 1
        if pairs >= max_pairs:
            break
    pairs = 0
    for j in tree.generations:
        gen = tree.generation(j)
        if len(gen) < 2:
            continue
        d = 2.0 ** (-j)
        lab = tree.labels[j]
        for c in gen:
            pos = tree.pos[c.members]
            near = tree.kdtree.query_ball_point(tree.points[pos], d * (1 + 1e-12))
            others = {int(lab[i]) for nb in near for i in nb} - {c.id}
            for o in sorted(others):
                oc = tree.cubes[o]
                need = max(need, 1 + _hausdorff_ratio(tree, c, oc), 1 + _hausdorff_ratio(tree, oc, c))
                pairs += 1
            if pairs >= max_pairs:
                break
    return float(need * (1 + 1e-9))


def _sample_members(tree: CubeTree, Q: Cube, n: int) -> list:
    mem = [m for m in Q.members.tolist() if m != Q.center_index]
    picks = [Q.center_index]
    if n > 1 and mem:
        idx = np.linspace(0, len(mem) - 1, min(n - 1, len(mem))).round().astype(int)
        picks += [mem[i] for i in np.unique(idx)]
    return picks


def cube_alpha(mu: PointMeasure, tree: CubeTree, Q: Cube | int, lambda_star: float = 80.0,
               n_samples: int = 3, d: int | None = None, opts: SearchOptions | None = None,
               lam: float = 8.0) -> CubeFlat:
    """Best sampled alpha over x in Q and r in [lambda_star d(Q), 2 lambda_star d(Q)].

    Sample ``i`` uses the i-th sampled point (the center first) and the radius
    ``lambda_star d(Q) 2^(i / n_samples)``. With ``d`` None each sample uses
    the best dimension. The kept pair is the minimizer, so its alpha is at
    most twice the sampled infimum.
    """
    Q = tree.cubes[Q] if isinstance(Q, (int, np.integer)) else Q
    if lambda_star < 10 * lam:
        raise ValueError("lambda_star must be at least 10 lambda")
    r0 = lambda_star * Q.d
    if r0 > mu.diameter:
        raise ResolutionTooFine(f"radius band starts at {r0:.3g}, beyond the data diameter")
    best = None
    for i, x_idx in enumerate(_sample_members(tree, Q, n_samples)):
        r = r0 * 2.0 ** (i / max(n_samples, 1))
        q = BallQuery(mu.points[x_idx], r)
        res = alpha_d(mu, q, d, opts) if d is not None else alpha_min(mu, q, opts)[0]
        if best is None or res.value < best[0].value:
            best = (res, x_idx, r)
    res, x_idx, r = best
    return CubeFlat(Q.id, int(x_idx), mu.points[x_idx].copy(), float(r), float(res.value),
                    res.world_plane, res.dim, float(res.c_v))


def _flat_job(args):
    mu, tree, cid, lambda_star, n_samples, d, opts, lam = args
    return cube_alpha(mu, tree, cid, lambda_star, n_samples, d, opts, lam)


def cube_flats(mu: PointMeasure, tree: CubeTree, cube_ids, lambda_star: float = 80.0,
               n_samples: int = 3, d: int | None = None, opts: SearchOptions | None = None,
               lam: float = 8.0, workers: int = 1) -> dict:
    """cube_alpha for many cubes; returns ``{cube id: CubeFlat}``.

    Results do not depend on ``workers``: every cube is computed by the same
    deterministic routine.
    """
    ids = [int(c) for c in cube_ids]
    jobs = [(mu, tree, c, lambda_star, n_samples, d, opts, lam) for c in ids]
    if workers > 1 and len(ids) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_flat_job, jobs, chunksize=max(1, len(ids) // (4 * workers))))
    else:
        out = [_flat_job(j) for j in jobs]
    return dict(zip(ids, out))
