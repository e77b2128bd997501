"""Boundary-vanishing Wasserstein-1 distance between measures on the unit ball.

The test functions are 1-Lipschitz and vanish outside the open unit ball.
For discrete measures this equals a balanced min-cost flow in which every
point may also exchange mass with one boundary node at cost ``1 - |p|``,
i.e. transport under the shortcut metric
``d(x, y) = min(|x - y|, (1 - |x|) + (1 - |y|))``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .errors import MassMismatch, TooLarge
from .measure import PointMeasure

# keep POT from importing deep-learning backends it does not need here
for _k in ("POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX",
           "POT_BACKEND_DISABLE_CUPY", "POT_BACKEND_DISABLE_TENSORFLOW"):
    os.environ.setdefault(_k, "1")
import ot  # noqa: E402

MASS_TOL = 1e-9
N_LP = 400
BOUNDARY = -1
_EMD_MAX_ITER = 10_000_000


def _inside(m: PointMeasure):
    """Points strictly inside the unit ball, their masses and original indices."""
    r = np.linalg.norm(m.points, axis=1)
    idx = np.flatnonzero(r < 1.0)
    return m.points[idx], m.weights[idx], idx, r[idx]


@dataclass(frozen=True)
class TransportPair:
    """Two local views whose open-unit-ball restrictions are probability measures."""

    mu: PointMeasure
    nu: PointMeasure

    def __post_init__(self):
        if self.mu.ambient_dim != self.nu.ambient_dim:
            raise MassMismatch("ambient dimensions differ")
        for name, m in (("mu", self.mu), ("nu", self.nu)):
            mass = _inside(m)[1].sum()
            if abs(mass - 1.0) > MASS_TOL:
                raise MassMismatch(f"{name} has open-ball mass {mass!r}, expected 1")

    def swapped(self) -> "TransportPair":
        return TransportPair(self.nu, self.mu)


@dataclass
class TransportResult:
    """Optimal cost with plan and dual potentials.

    ``plan`` maps ``(i, j)`` to transported mass; ``j = -1`` is the boundary
    sink and ``i = -1`` the boundary source. ``dual_witness`` holds one
    potential per point of each measure (zero outside the open ball).
    """

    cost: float
    plan: dict = field(default_factory=dict)
    plan_cost: dict = field(default_factory=dict)
    dual_witness: dict = field(default_factory=dict)

    def marginals(self, n_mu: int, n_nu: int):
        a = np.zeros(n_mu)
        b = np.zeros(n_nu)
        for (i, j), m in self.plan.items():
            if i >= 0:
                a[i] += m
            if j >= 0:
                b[j] += m
        return a, b

    def to_csv(self, path) -> None:
        """Write rows ``i, j, mass, cost``; -1 denotes the boundary node."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "mass", "cost"])
            for key in sorted(self.plan):
                w.writerow([key[0], key[1], repr(self.plan[key]), repr(self.plan_cost[key])])


def _augmented(x, a, rx, y, b, ry):
    """Balanced problem with one boundary node appended on each side."""
    n, m = len(a), len(b)
    C = np.zeros((n + 1, m + 1))
    if n and m:
        C[:n, :m] = cdist(x, y)
    C[:n, m] = 1.0 - rx
    C[n, :m] = 1.0 - ry
    src = np.concatenate([a, [b.sum()]])
    dst = np.concatenate([b, [a.sum()]])
    return src, dst, C


def w1_cost(x, a, y, b) -> float:
    """Cost only, for points already inside the open unit ball."""
    rx = np.linalg.norm(x, axis=1)
    ry = np.linalg.norm(y, axis=1)
    if len(b) == 1:
        return dirac_cost(x, a, rx, y[0])
    if len(a) == 1:
        return dirac_cost(y, b, ry, x[0])
    src, dst, C = _augmented(x, a, rx, y, b, ry)
    return float(ot.emd2(src, dst, C, numItermax=_EMD_MAX_ITER))


def dirac_cost(x, a, rx, p) -> float:
    """Closed form against a unit Dirac at ``p``: sum of a_i d(x_i, p)."""
    direct = np.linalg.norm(x - p, axis=1)
    via = (1.0 - rx) + (1.0 - float(np.linalg.norm(p)))
    return float(np.dot(a, np.minimum(direct, via)))


def w1_boundary(pair: TransportPair, check: bool = True) -> TransportResult:
    """Exact boundary-vanishing W1 via network simplex on the augmented graph.

    Optimality is checked by complementary slackness of the simplex duals.
    """
    x, a, ix, rx = _inside(pair.mu)
    y, b, iy, ry = _inside(pair.nu)
    n, m = len(a), len(b)
    src, dst, C = _augmented(x, a, rx, y, b, ry)
    G, log = ot.emd(src, dst, C, numItermax=_EMD_MAX_ITER, log=True)
    if log.get("result_code", 1) != 1:
        raise RuntimeError(f"network simplex did not converge: {log.get('warning')}")
    u, v = np.asarray(log["u"]), np.asarray(log["v"])
    cost = float((G * C).sum())
    if check:
        scale = max(1.0, float(np.abs(C).max()))
        red = C - u[:, None] - v[None, :]
        if red.min() < -1e-7 * scale:
            raise RuntimeError("dual infeasible simplex output")
        if np.abs(red[G > 1e-14]).max(initial=0.0) > 1e-7 * scale:
            raise RuntimeError("complementary slackness violated")
    rows_i = np.concatenate([ix, [BOUNDARY]])
    cols_j = np.concatenate([iy, [BOUNDARY]])
    plan, plan_cost = {}, {}
    for r, c in zip(*np.nonzero(G > 0)):
        if r == n and c == m:
            continue
        key = (int(rows_i[r]), int(cols_j[c]))
        plan[key] = float(G[r, c])
        plan_cost[key] = float(C[r, c])
    psi_mu = np.zeros(len(pair.mu))
    psi_nu = np.zeros(len(pair.nu))
    psi_mu[ix] = u[:n] + v[m]
    psi_nu[iy] = -(u[n] + v[:m])
    return TransportResult(cost, plan, plan_cost, {"mu": psi_mu, "nu": psi_nu})


def _combined(pair: TransportPair):
    x, a, _, _ = _inside(pair.mu)
    y, b, _, _ = _inside(pair.nu)
    pts = np.vstack([x, y])
    signed = np.concatenate([a, -b])
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    mass = np.zeros(len(uniq))
    np.add.at(mass, inv.reshape(-1), signed)
    return uniq, mass


def w1_dual_oracle(pair: TransportPair, n_lp: int = N_LP) -> float:
    """Solve the Kantorovich dual as a linear program with HiGHS.

    Maximizes sum psi_i (mu_i - nu_i) over potentials with
    |psi_i - psi_j| <= |x_i - x_j| and |psi_i| <= 1 - |x_i|.
    """
    pts, mass = _combined(pair)
    k = len(pts)
    if k > n_lp:
        raise TooLarge(f"combined support {k} exceeds cap {n_lp}")
    cap = np.clip(1.0 - np.linalg.norm(pts, axis=1), 0.0, None)
    if k == 1:
        return float(abs(mass[0]) * cap[0])
    ii, jj = np.triu_indices(k, 1)
    dist = np.linalg.norm(pts[ii] - pts[jj], axis=1)
    rows = np.arange(2 * len(ii))
    cols_pos = np.concatenate([ii, jj])
    cols_neg = np.concatenate([jj, ii])
    data = np.concatenate([np.ones(2 * len(ii)), -np.ones(2 * len(ii))])
    A = sparse.csr_matrix((data, (np.concatenate([rows, rows]),
                                  np.concatenate([cols_pos, cols_neg]))),
                          shape=(2 * len(ii), k))
    rhs = np.concatenate([dist, dist])
    res = linprog(-mass, A_ub=A, b_ub=rhs, bounds=list(zip(-cap, cap)),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual LP failed: {res.message}")
    return float(abs(res.fun))


def radial_cdf_gap(pair: TransportPair, phi_center, eps: float, w1: float | None = None):
    """Radial distribution gap around ``phi_center`` and its good radii.

    With phi(z) = min(1, 2|z - y|), F(t) and G(t) are the masses of
    B(y, t/2) under mu and nu. Returns the exact integral of |F - G| over
    (0, 1) and the maximal s-intervals of (0, 1/2) on which
    |mu(B(y,s)) - nu(B(y,s))| <= (2/eps) W1.
    """
    y = np.asarray(phi_center, dtype=float)
    if np.linalg.norm(y) >= 0.5:
        raise ValueError("phi_center must lie in B(0, 1/2)")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if w1 is None:
        w1 = w1_boundary(pair, check=False).cost
    x, a, _, _ = _inside(pair.mu)
    z, b, _, _ = _inside(pair.nu)
    tx = 2.0 * np.linalg.norm(x - y, axis=1)
    tz = 2.0 * np.linalg.norm(z - y, axis=1)
    knots = np.unique(np.concatenate([[0.0, 1.0], tx[tx < 1], tz[tz < 1]]))
    lo = knots[:-1]
    # on (lo_k, lo_{k+1}) the masses count points with 2|p - y| <= lo_k
    ox, oz = np.argsort(tx), np.argsort(tz)
    F = np.concatenate([[0.0], np.cumsum(a[ox])])[np.searchsorted(tx[ox], lo, side="right")]
    G = np.concatenate([[0.0], np.cumsum(b[oz])])[np.searchsorted(tz[oz], lo, side="right")]
    gap = np.abs(F - G)
    widths = np.diff(knots)
    integral = float(np.dot(gap, widths))
    good = gap <= (2.0 / eps) * w1 + 1e-15
    intervals = []
    for k in np.flatnonzero(good):
        s0, s1 = knots[k] / 2.0, knots[k + 1] / 2.0
        if intervals and intervals[-1][1] == s0:
            intervals[-1] = (intervals[-1][0], s1)
        else:
            intervals.append((s0, s1))
    return integral, intervals


def interval_complement_length(intervals, lo: float = 0.0, hi: float = 0.5) -> float:
    covered = sum(min(b, hi) - max(a, lo) for a, b in intervals if b > lo and a < hi)
    return (hi - lo) - covered
