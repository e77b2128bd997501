"""Deterministic generators for the example measures used as test corpus.

All constructions are truncated; every mass identity below is exact
bookkeeping at construction time.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import qmc

from .flatness import unit_ball_volume
from .measure import PointMeasure


def normalized_sphere_area(n: int, radius: float) -> float:
    """H^{n-1} of a radius-R sphere in R^n, with the unit (n-1)-ball of measure 1."""
    surface = n * unit_ball_volume(n)
    return surface * radius ** (n - 1) / unit_ball_volume(n - 1)


def sphere_points(n: int, m: int) -> np.ndarray:
    """Quasi-uniform points on the unit sphere of R^n (Fibonacci lattice for n = 3)."""
    if n == 2:
        t = 2 * np.pi * (np.arange(m) + 0.5) / m
        return np.c_[np.cos(t), np.sin(t)]
    if n == 3:
        i = np.arange(m) + 0.5
        z = 1 - 2 * i / m
        phi = np.pi * (3 - math.sqrt(5)) * i
        s = np.sqrt(1 - z * z)
        return np.c_[s * np.cos(phi), s * np.sin(phi), z]
    u = qmc.Halton(d=n, scramble=False).random(m + 1)[1:]
    from scipy.special import ndtri
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def gen_dirac_chain(variant: str = "geometric", j_max: int = 12, j_min: int = 0,
                    step: float | None = None) -> PointMeasure:
    """Atoms accumulating at 0, which is not itself an atom.

    ``geometric``: atoms 2^-j with mass 4^-j for j_min <= j <= j_max.
    ``slow``: atoms x_j = 1/log j (3 <= j <= j_max) with mass x_j - x_{j+1},
    the tail mass x_{j_max+1} spread as a Lebesgue sample on (0, x_{j_max+1}),
    plus a Lebesgue sample on (-1, 0]. The positive half then satisfies
    mu(closed ball(0, x_j) on [0, inf)) = x_j.
    """
    if j_max < 2:
        raise ValueError("j_max must be at least 2")
    if variant == "geometric":
        j = np.arange(j_min, j_max + 1)
        return PointMeasure((2.0 ** -j).reshape(-1, 1), 4.0 ** -j,
                            label=f"dirac_chain geometric j<={j_max}")
    if variant != "slow":
        raise ValueError("variant must be 'geometric' or 'slow'")
    j = np.arange(3, j_max + 2)
    x = 1.0 / np.log(j)
    atoms, mass = x[:-1], x[:-1] - x[1:]
    tail = x[-1]
    if step is None:
        step = mass.min() / 8
    m_tail = max(1, math.ceil(tail / step))
    t = (np.arange(m_tail) + 0.5) * (tail / m_tail)
    m_neg = math.ceil(1.0 / step)
    neg = -(np.arange(m_neg) + 0.5) / m_neg
    pts = np.concatenate([atoms, t, neg]).reshape(-1, 1)
    w = np.concatenate([mass, np.full(m_tail, tail / m_tail), np.full(m_neg, 1.0 / m_neg)])
    return PointMeasure(pts, w, label=f"dirac_chain slow j<={j_max}")


def slow_chain_atoms(j_max: int) -> np.ndarray:
    j = np.arange(3, j_max + 1)
    return 1.0 / np.log(j)


def gen_string_of_spheres(n: int = 3, epsilon: float = 0.1, count: int = 41,
                          points_per_sphere: int = 64, refine=(),
                          refine_points: int = 80000) -> PointMeasure:
    """Spheres of radius eps/10 centered at j eps e_1, scaled by eps^(2-n).

    Sphere j runs over ``-(count // 2) .. count - 1 - count // 2`` so sphere 0
    sits at the origin. Spheres listed in ``refine`` are sampled with
    ``refine_points`` points so small scales around them are resolved.
    """
    if n < 3:
        raise ValueError("n must be at least 3")
    R = epsilon / 10
    mass = epsilon ** (2 - n) * normalized_sphere_area(n, R)
    refine = set(int(j) for j in refine)
    coarse = sphere_points(n, points_per_sphere)
    fine = sphere_points(n, refine_points) if refine else None
    pts, w = [], []
    for j in range(-(count // 2), count - count // 2):
        c = np.zeros(n)
        c[0] = j * epsilon
        s = fine if j in refine else coarse
        pts.append(c + R * s)
        w.append(np.full(len(s), mass / len(s)))
    return PointMeasure(np.vstack(pts), np.concatenate(w),
                        label=f"string_of_spheres n={n} eps={epsilon}")


def sphere_mass(n: int, epsilon: float) -> float:
    return epsilon ** (2 - n) * normalized_sphere_area(n, epsilon / 10)


def gen_ocean_of_circles(n: int = 2, epsilon: float = 0.1, box: float = 1.0,
                         points_per_circle: int = 64) -> PointMeasure:
    """Circles of radius eps/10 at the points of eps Z^n in [-box, box]^n.

    Each circle lies in the (e_1, e_2) plane and carries mass
    eps^(n-1) times its normalized length (half its Euclidean length).
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    R = epsilon / 10
    m = math.floor(box / epsilon + 1e-9)
    ax = np.arange(-m, m + 1) * epsilon
    centers = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    t = 2 * np.pi * (np.arange(points_per_circle) + 0.5) / points_per_circle
    ring = np.zeros((points_per_circle, n))
    ring[:, 0], ring[:, 1] = R * np.cos(t), R * np.sin(t)
    mass = epsilon ** (n - 1) * math.pi * R
    pts = (centers[:, None, :] + ring[None]).reshape(-1, n)
    w = np.full(len(pts), mass / points_per_circle)
    return PointMeasure(pts, w, label=f"ocean n={n} eps={epsilon}")


_DIRS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


def broom_tips(rho: float, k: int) -> np.ndarray:
    """E_k: the 4^k planar points sum_{j<=k} rho^j e_{eps_j}."""
    E = np.zeros((1, 2))
    for j in range(1, k + 1):
        E = (E[:, None, :] + rho ** j * _DIRS[None]).reshape(-1, 2)
    return E


def gen_broom(rho: float = 0.3, k_max: int = 6, stick: bool = True,
              points_per_segment: int = 16, window=None) -> PointMeasure:
    """Vertical segments E_k x [rho^(k+1), rho^k] in R^3 with density 4^-k.

    Levels run over 0 <= k <= k_max (level 0 is the single segment over the
    origin). Each segment is sampled at ``points_per_segment`` cell
    midpoints carrying equal shares of its mass 4^-k (rho^k - rho^(k+1)).
    The optional stick {0} x [1, 2] carries Lebesgue measure at the level-0
    spacing. ``window = (center, radius)`` keeps only the points of the
    closed ball, i.e. the restriction of the same measure; whole segments far
    from the window are skipped before sampling.
    """
    if not 0 < rho < 0.5:
        raise ValueError("rho must lie in (0, 1/2)")
    m = int(points_per_segment)
    pts, w = [], []
    cells = (np.arange(m) + 0.5) / m
    for k in range(k_max + 1):
        E = broom_tips(rho, k)
        lo, hi = rho ** (k + 1), rho ** k
        if window is not None:
            c, R = np.asarray(window[0], dtype=float), float(window[1])
            E = E[np.linalg.norm(E - c[:2], axis=1) <= R]
            if not len(E) or lo - c[2] > R or c[2] - hi > R:
                continue
        z = lo + (hi - lo) * cells
        seg = np.concatenate([np.repeat(E, m, axis=0), np.tile(z, len(E))[:, None]], axis=1)
        pts.append(seg)
        w.append(np.full(len(seg), 4.0 ** -k * (hi - lo) / m))
    if stick:
        ms = math.ceil(m / (1 - rho))
        z = 1 + (np.arange(ms) + 0.5) / ms
        pts.append(np.c_[np.zeros((ms, 2)), z])
        w.append(np.full(ms, 1.0 / ms))
    pts, w = np.vstack(pts), np.concatenate(w)
    if window is not None:
        keep = np.linalg.norm(pts - np.asarray(window[0], dtype=float), axis=1) <= float(window[1])
        pts, w = pts[keep], w[keep]
    return PointMeasure(pts, w,
                        label=f"broom rho={rho} kmax={k_max} m={m}")


def broom_level_slices(rho: float, k_max: int, points_per_segment: int):
    """Index ranges of each level's points in the generator's output order."""
    out, start = {}, 0
    for k in range(k_max + 1):
        size = 4 ** k * points_per_segment
        out[k] = (start, start + size)
        start += size
    return out


def gen_haar_product(a, N: int, grid: int | None = None) -> PointMeasure:
    """Haar product G_N = prod_{k<=N} prod_I (1 + a_k h_I) on [0, 1).

    ``a`` is a scalar or a sequence of N+1 per-generation coefficients; h_I
    is +1 on the left half of I and -1 on the right half. The density is
    sampled at the centers of the 2^(N+2) cells (or ``grid`` cells, a power
    of two at least that fine).
    """
    coef = np.broadcast_to(np.asarray(a, dtype=float), (N + 1,)) if np.ndim(a) == 0 \
        else np.asarray(a, dtype=float)
    if len(coef) != N + 1:
        raise ValueError("need N+1 coefficients")
    if np.any(np.abs(coef) >= 1):
        raise ValueError("coefficients must satisfy |a| < 1")
    M = grid or 2 ** (N + 2)
    if M < 2 ** (N + 2) or M & (M - 1):
        raise ValueError("grid must be a power of two >= 2^(N+2)")
    i = np.arange(M)
    G = np.ones(M)
    for k in range(N + 1):
        half = (i * 2 ** (k + 1)) // M % 2
        G *= 1 + coef[k] * np.where(half == 0, 1.0, -1.0)
    t = (i + 0.5) / M
    return PointMeasure(t.reshape(-1, 1), G / M, label=f"haar N={N}")


def gen_riesz_product(alpha_seq, N: int | None = None, grid: int | None = None) -> PointMeasure:
    """Riesz product F_N = prod_{k=1}^N (1 + alpha_k cos(3^k x)) on [0, 2 pi).

    The grid (default 4 * 3^N points) resolves every frequency of the
    expanded product, so the total mass is 2 pi up to rounding.
    """
    alpha = np.asarray(alpha_seq, dtype=float)
    if N is None:
        N = len(alpha)
    alpha = alpha[:N]
    if np.any(alpha >= 1) or np.any(alpha < -1):
        raise ValueError("alpha entries must lie in [-1, 1)")
    M = grid or 4 * 3 ** N
    x = 2 * np.pi * (np.arange(M) + 0.5) / M
    F = np.ones(M)
    for k in range(1, N + 1):
        F *= 1 + alpha[k - 1] * np.cos(3 ** k * x)
    keep = F > 0
    return PointMeasure(x[keep].reshape(-1, 1), F[keep] * (2 * np.pi / M),
                        label=f"riesz N={N}")


def gen_line(n: int = 2, length: float = 2.0, m: int = 2001, d: int = 1) -> PointMeasure:
    """Unit-density sample of a centered d-cube of side ``length`` in R^n (d <= 2)."""
    if d == 1:
        t = (np.arange(m) + 0.5) / m * length - length / 2
        pts = np.zeros((m, n))
        pts[:, 0] = t
        # unit density for the normalized length (unit segment of length 2 has measure 1)
        return PointMeasure(pts, np.full(m, length / (2 * m)), label=f"line n={n}")
    if d == 2:
        t = (np.arange(m) + 0.5) / m * length - length / 2
        u, v = np.meshgrid(t, t, indexing="ij")
        pts = np.zeros((m * m, n))
        pts[:, 0], pts[:, 1] = u.ravel(), v.ravel()
        # unit density for the normalized area (unit disk has measure 1)
        cell = (length / m) ** 2 / math.pi
        return PointMeasure(pts, np.full(m * m, cell), label=f"plane n={n}")
    raise ValueError("d must be 1 or 2")
