import math

import numpy as np
import pytest

from wassflat import (AffinePlane, BallQuery, PlaneMissesBall, PointMeasure,
                      ScaleConstraintViolated, SearchOptions, TransportPair, alpha_d, alpha_min,
                      beta, flat_measure, gen_line, gen_string_of_spheres, hole_distance,
                      plane_constant, plane_drift, restrict_rescale, w1_dual_oracle)
from wassflat.flatness import affine_avg_to_sup, projection_distance

FAST = SearchOptions(n_random=2, max_descents=1)


def line_plane(offset=0.0, angle=0.0):
    u = np.array([math.cos(angle), math.sin(angle)])
    nrm = np.array([-u[1], u[0]])
    return AffinePlane.through(offset * nrm, [u])


@pytest.mark.parametrize("d", [1, 2])
def test_plane_constant_extremes(d):
    n = 3
    frame = np.eye(n)[:d]
    base = np.zeros(n)
    assert plane_constant(AffinePlane.through(base, frame)) == 1.0
    base[-1] = math.sqrt(3) / 2
    assert plane_constant(AffinePlane.through(base, frame)) == pytest.approx(2.0 ** d, abs=1e-9)


def test_plane_constant_half_offset_monte_carlo():
    c = plane_constant(line_plane(0.5))
    assert c == pytest.approx(2 / math.sqrt(3), abs=1e-12)
    # normalized length of the chord by sampling: unit segment has measure 1
    t = np.linspace(-1, 1, 200001)
    inside = np.hypot(t, 0.5) < 1
    length = inside.mean() * 2
    assert 1 / (length / 2) == pytest.approx(c, rel=1e-3)


def test_flat_measure_mass_and_miss():
    for d, n in [(0, 2), (1, 2), (2, 3), (2, 2)]:
        base = np.zeros(n)
        base[-1] = 0.3 if d < n else 0.0
        nu = flat_measure(AffinePlane.through(base, np.eye(n)[:d]) if d else AffinePlane.point(base), 0.05)
        inside = np.linalg.norm(nu.points, axis=1) < 1
        assert nu.weights[inside].sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(PlaneMissesBall):
        flat_measure(line_plane(1.2), 0.05)


def test_self_flat_alpha_small():
    for h in (0.05, 0.02):
        nu = flat_measure(line_plane(0.0), h)
        res = alpha_d(nu, BallQuery(nu.points[nu.nearest([0, 0])[1]], 1.0), 1,
                      SearchOptions(grid_step=h))
        assert res.value <= 2 * h
        assert 1 <= res.c_v <= 2


def test_single_dirac_dimension_zero():
    mu = PointMeasure([[0.0, 0.0]], [1.0])
    res = alpha_d(mu, BallQuery([0, 0], 0.5), 0)
    assert res.value == 0.0
    np.testing.assert_allclose(res.plane.base, 0.0, atol=1e-12)


def test_parallel_segments_against_dual_oracle():
    s, h, m = 0.1, 0.02, 120
    t = (np.arange(m) + 0.5) / m * 2 - 1
    pts = np.vstack([np.c_[t, np.full(m, s)], np.c_[t, np.full(m, -s)]])
    mu = PointMeasure(pts, np.ones(2 * m))
    x0 = mu.points[mu.nearest([0.0, s])[1]]
    q = BallQuery(x0, 1.0)
    res = alpha_d(mu, q, 1, SearchOptions(grid_step=h))
    loc = restrict_rescale(mu, q)
    keep = np.linalg.norm(loc.points, axis=1) < 1
    loc = PointMeasure(loc.points[keep][::2], loc.weights[keep][::2] * 2)
    # the reference line midway between the two segments, in local coordinates
    ref = flat_measure(AffinePlane.through([0.0, -x0[1]], [[1.0, 0.0]]), 0.025)
    oracle = w1_dual_oracle(TransportPair(loc, ref))
    assert oracle / 2 - 2 * h <= res.value <= 2 * oracle + 2 * h


def test_alpha_min_atoms_and_lines():
    # an isolated atom next to a finely sampled line keeps the resolution floor small
    far = gen_line(2, 2.0, 501, 1)
    mu = PointMeasure(np.vstack([[[0.0, 0.0]], far.points + [0.0, 1.0]]),
                      np.r_[1.0, far.weights])
    res, d, allres = alpha_min(mu, BallQuery([0, 0], 0.5), FAST)
    assert d == 0 and res.value == 0.0
    line = gen_line(2, 2.0, 2001, 1)
    res, d, allres = alpha_min(line, BallQuery(line.points[1000], 0.25), FAST)
    assert d == 1
    for r in allres:
        assert 1 <= r.c_v <= 2 ** r.dim


def test_alpha_rigid_motion_invariance():
    line = gen_line(2, 2.0, 1001, 1)
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    moved = PointMeasure(line.points @ R.T + [0.3, -0.2], line.weights)
    pts = [line.points[500], moved.points[moved.nearest(line.points[500] @ R.T + [0.3, -0.2])[1]]]
    vals = [alpha_d(m, BallQuery(p, 0.3), 1, SearchOptions(grid_step=0.02)).value
            for m, p in zip((line, moved), pts)]
    assert abs(vals[0] - vals[1]) <= 0.01


def test_beta_collinear_and_ordering():
    line = gen_line(2, 2.0, 1001, 1)
    q = BallQuery(line.points[500], 0.4)
    assert beta(line, q, 1, "avg") == pytest.approx(0.0, abs=1e-9)
    assert beta(line, q, 1, "sup") == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(0)
    cloud = PointMeasure(rng.normal(size=(300, 2)) * [1, 0.2], np.ones(300))
    q = BallQuery(cloud.points[cloud.nearest([0, 0])[1]], 1.0)
    assert beta(cloud, q, 1, "avg") <= beta(cloud, q, 1, "sup")
    assert beta(cloud, q, 1, "avg") > 0


def test_hole_distance():
    nu = flat_measure(line_plane(0.0), 0.02)
    q = BallQuery(nu.points[nu.nearest([0, 0])[1]], 1.0)
    assert hole_distance(nu, q, line_plane(0.0), h=0.01) <= 0.02
    eps = 0.1
    mu = gen_string_of_spheres(3, eps, 41, points_per_sphere=64)
    x = mu.points[mu.nearest([0, 0.01, 0])[1]]
    for r in (2 * eps, 10 * eps):
        res, d, _ = alpha_min(mu, BallQuery(x, r), FAST)
        hd = hole_distance(mu, BallQuery(x, r), res)
        assert hd > 0
        assert hd <= 16 * res.value ** (1 / (res.dim + 1)) + 0.02


def test_plane_drift_identical_and_angle():
    line = gen_line(2, 2.0, 2001, 1)
    a = alpha_d(line, BallQuery(line.points[1000], 0.5), 1, FAST)
    b = alpha_d(line, BallQuery(line.points[1000], 0.25), 1, FAST)
    dev1, dev2, ang = plane_drift(a, b)
    assert dev1 == pytest.approx(0, abs=1e-9) and dev2 == pytest.approx(0, abs=1e-9)
    assert ang == pytest.approx(0, abs=1e-9)
    with pytest.raises(ScaleConstraintViolated):
        plane_drift(b, a)
    for phi in (0.1, 0.5, 1.2):
        assert projection_distance(line_plane(0, 0), line_plane(0, phi)) == pytest.approx(
            abs(math.sin(phi)), abs=1e-9)


def test_affine_avg_to_sup_constant_is_stable():
    rng = np.random.default_rng(1)
    for d in (1, 2):
        ratios = [affine_avg_to_sup(rng.normal(size=d), rng.normal(), lam, 0.02)
                  for lam in (1, 2, 4, 8) for _ in range(10)]
        assert max(ratios) <= 4.0 * d
