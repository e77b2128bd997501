import math

import numpy as np
import pytest

from wassflat import (BallQuery, SearchOptions, alpha_d, ball_mass, detect_atoms, gen_broom,
                      gen_dirac_chain, gen_haar_product, gen_ocean_of_circles, gen_riesz_product,
                      gen_string_of_spheres, profile)
from wassflat.generators import (broom_level_slices, broom_tips, normalized_sphere_area,
                                 slow_chain_atoms, sphere_mass)

FAST = SearchOptions(n_random=2, max_descents=1)


def closed_mass(mu, c, r):
    return float(mu.weights[np.linalg.norm(mu.points - c, axis=1) <= r].sum())


def test_geometric_chain_tail_sums():
    mu = gen_dirac_chain("geometric", 14)
    for j in range(0, 14):
        expect = sum(4.0 ** -i for i in range(j, 15))
        assert closed_mass(mu, [0.0], 2.0 ** -j) == pytest.approx(expect, rel=1e-12)


def test_slow_chain_closed_ball_identity_and_atoms():
    j_max = 40
    mu = gen_dirac_chain("slow", j_max)
    x = slow_chain_atoms(j_max)
    pos = mu.points[:, 0] >= 0
    for xj in x:
        m = float(mu.weights[pos & (mu.points[:, 0] <= xj)].sum())
        assert m == pytest.approx(xj, abs=1e-12)
    step = (x[:-1] - x[1:]).min()
    step = min(step, x[-1] - 1 / math.log(j_max + 1)) / 8
    found = [float(p[0]) for p, _ in detect_atoms(mu, 2 * step)]
    for xj in x:
        assert any(abs(f - xj) < 1e-12 for f in found)
    assert all(f > 0 for f in found)


def test_string_sphere_masses_and_linear_growth():
    eps = 0.1
    mu = gen_string_of_spheres(3, eps, 41, points_per_sphere=100)
    per = mu.weights.reshape(41, 100).sum(axis=1)
    expect = eps ** (2 - 3) * normalized_sphere_area(3, eps / 10)
    np.testing.assert_allclose(per, expect, rtol=1e-6)
    assert sphere_mass(3, eps) == pytest.approx(expect)
    x = mu.points[mu.nearest([0, 0.01, 0])[1]]
    cs = [ball_mass(mu, BallQuery(x, r)) / r for r in (0.75, 1.25, 1.75)]
    assert max(cs) / min(cs) < 1.2


def test_ocean_unit_ball_mass_and_flatness():
    eps = 0.1
    mu = gen_ocean_of_circles(2, eps, box=1.5, points_per_circle=32)
    x = mu.points[mu.nearest([0.01, 0])[1]]
    assert ball_mass(mu, BallQuery(x, 1.0)) == pytest.approx(1.0, rel=0.1)
    for r in (0.4, 0.8):
        assert alpha_d(mu, BallQuery(x, r), 2, FAST).value <= 4 * eps / r


def test_broom_segment_masses_and_tips():
    rho, k_max, m = 0.3, 4, 8
    mu = gen_broom(rho, k_max, stick=False, points_per_segment=m)
    sl = broom_level_slices(rho, k_max, m)
    for k, (a, b) in sl.items():
        seg = mu.weights[a:b].reshape(4 ** k, m).sum(axis=1)
        np.testing.assert_allclose(seg, 4.0 ** -k * (rho ** k - rho ** (k + 1)), rtol=1e-12)
    assert len(np.unique(broom_tips(rho, 3), axis=0)) == 64
    with_stick = gen_broom(rho, 2, stick=True, points_per_segment=m)
    stick = with_stick.points[:, 2] > 1
    assert with_stick.weights[stick].sum() == pytest.approx(1.0)


def test_broom_window_is_a_restriction():
    c = np.r_[broom_tips(0.3, 3)[0], 0.01]
    full = gen_broom(0.3, 5, points_per_segment=32)
    win = gen_broom(0.3, 5, points_per_segment=32, window=(c, 0.05))
    keep = np.linalg.norm(full.points - c, axis=1) <= 0.05
    assert win.total_mass == pytest.approx(full.weights[keep].sum(), rel=1e-12)
    assert len(win) == keep.sum()


def test_haar_product():
    flat = gen_haar_product(0.0, 5)
    assert np.ptp(flat.weights) == 0
    ratios = []
    for N in (4, 8, 12):
        mu = gen_haar_product(0.9, N)
        # Haar orthogonality: the integral of G_N over [0, 1) is 1
        assert mu.total_mass == pytest.approx(1.0, abs=1e-12)
        ratios.append(mu.weights.min() / mu.weights.max())
    assert ratios[0] > ratios[1] > ratios[2]
    with pytest.raises(ValueError):
        gen_haar_product(1.0, 3)


def test_riesz_product():
    flat = gen_riesz_product([0.0] * 3)
    assert np.ptp(flat.weights) == pytest.approx(0, abs=1e-15)
    mu = gen_riesz_product([0.9] * 5)
    assert mu.total_mass == pytest.approx(2 * math.pi, rel=1e-12)


def test_riesz_regimes_separate():
    big = gen_riesz_product([0.9] * 5)
    small = gen_riesz_product([0.9 / k ** 2 for k in range(1, 6)])
    totals = []
    for mu in (big, small):
        x = mu.points[mu.nearest([1.0])[1]]
        p = profile(mu, x, range(1, 6), m_r=1, opts=FAST)
        totals.append(sum(r.alpha for r in p.records))
    assert totals[0] > 1.5 * totals[1]


def test_generators_are_deterministic():
    for make in (lambda: gen_broom(0.3, 3, points_per_segment=8),
                 lambda: gen_string_of_spheres(4, 0.1, 5, points_per_sphere=70),
                 lambda: gen_ocean_of_circles(3, 0.5)):
        a, b = make(), make()
        assert a.points.tobytes() == b.points.tobytes()
        assert a.weights.tobytes() == b.weights.tobytes()
