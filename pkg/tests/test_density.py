import math

import numpy as np
import pytest

from wassflat import (BallQuery, PointMeasure, SearchOptions, build_cubes, classify_point,
                      density_diagnostics, gen_broom, gen_dirac_chain, gen_haar_product,
                      gen_line, gen_ocean_of_circles, profile, stratify_set)
from wassflat.density import J_estimate, bmo_estimate
from wassflat.flatness import projection_distance

FAST = SearchOptions(n_random=2, max_descents=1)


@pytest.fixture(scope="module")
def line():
    return gen_line(2, 2.0, 4001, 1)


def test_flat_profile_and_classification(line):
    x = line.points[2000]
    p = profile(line, x, range(1, 7), m_r=2, opts=FAST)
    assert [r.d for r in p.records] == [1] * 6
    assert max(r.alpha for r in p.records) < 0.03
    thetas = [r.theta_star for r in p.records]
    assert max(thetas) / min(thetas) < 1.01
    J, (lo, hi) = J_estimate(p)
    assert J < 0.1 and hi == 2 * lo
    c = classify_point(p, window=5)
    assert c.d_x == 1 and not c.unstable
    assert c.theta == pytest.approx(1.0, rel=0.01)
    assert c.stratum_k == 0
    # tangent angles obey the triangle inequality along the scale sequence
    recs = p.records
    for a in range(len(recs)):
        for b in range(a + 1, len(recs)):
            chain = sum(projection_distance(recs[i].plane, recs[i + 1].plane) for i in range(a, b))
            assert projection_distance(recs[a].plane, recs[b].plane) <= chain + 1e-9


def test_profile_radii_in_band(line):
    p = profile(line, line.points[1000], range(2, 5), m_r=4, opts=FAST)
    for rec in p.records:
        assert 2.0 ** (-rec.k - 1) <= rec.r <= 2.0 ** -rec.k
        assert rec.theta_star == rec.r ** -rec.d * rec.c_d * rec.ball_mass


def test_profile_excludes_fine_scales():
    mu = gen_line(2, 2.0, 101, 1)
    p = profile(mu, mu.points[50], range(1, 9), m_r=1, opts=FAST)
    assert p.excluded and min(p.excluded) > max(p.ks())


def test_dirac_chain_atoms_are_zero_dimensional():
    mu = gen_dirac_chain("geometric", 12)
    p = profile(mu, [1.0], range(2, 5), m_r=2, opts=FAST)
    assert all(r.d == 0 and r.alpha == 0.0 for r in p.records)
    sample = [mu.nearest([1.0])[1], mu.nearest([0.5])[1]]
    buckets, rest, info = stratify_set(mu, sample, range(3, 6), window=3, m_r=1, opts=FAST)
    assert not rest
    for (d, k), idx in buckets.items():
        assert d == 0
        for i in idx:
            assert info[i].theta == pytest.approx(mu.weights[i])


def test_haar_J_grows_with_depth():
    Js = []
    for N in (4, 6, 8):
        mu = gen_haar_product(0.9, N, grid=2 ** 12)
        x = mu.points[mu.nearest([1 / 3])[1]]
        p = profile(mu, x, range(1, N + 1), m_r=1, opts=FAST)
        Js.append(J_estimate(p)[0])
    slope = np.polyfit([4, 6, 8], Js, 1)[0]
    assert slope > 0 and Js[0] < Js[1] < Js[2]


def test_ocean_point_density():
    eps = 0.1
    mu = gen_ocean_of_circles(2, eps, box=0.2, points_per_circle=512)
    x = mu.points[0]
    p = profile(mu, x, range(7, 11), m_r=1, opts=FAST)
    c = classify_point(p, window=3)
    assert c.d_x == 1
    assert c.theta == pytest.approx(eps ** (2 - 1), rel=0.1)
    assert c.stratum_k == math.floor(math.log2(eps))


def test_stratify_flat_plane_and_partition(line):
    sample = np.arange(1500, 2500, 125)
    buckets, rest, _ = stratify_set(line, sample, range(2, 7), window=5, m_r=1, opts=FAST)
    assert list(buckets) == [(1, 0)] and not rest
    got = sorted(i for v in buckets.values() for i in v) + rest
    assert sorted(got) == sorted(sample.tolist())


def test_stratify_broom_segment_interiors():
    mu = gen_broom(0.3, 2, points_per_segment=512)
    z = mu.points[:, 2]
    # points on the level-0 segment, away from its ends
    idx = np.flatnonzero((np.linalg.norm(mu.points[:, :2], axis=1) == 0) & (z > 0.5) & (z < 0.8))[::60]
    buckets, rest, info = stratify_set(mu, idx, range(5, 10), window=4, m_r=1, opts=FAST)
    assert sum(len(v) for v in buckets.values()) + len(rest) == len(idx)
    assert all(d == 1 for d, _ in buckets)
    assert len(rest) <= len(idx) // 4


def test_density_diagnostics_flat(line):
    x = line.points[2000]
    rep = density_diagnostics(line, x, [0.1, 0.2, 0.4], opts=FAST)
    assert rep["d"] == 1
    for g in rep["good_points"]:
        assert g["residual"] < 0.02
    for w in rep["windowed"]:
        assert w["residual"] < 0.01
    for lr in rep["log_ratio"]:
        assert lr["log_ratio"] < 0.01


def test_bmo_flat_and_broom():
    mu = gen_line(2, 2.0, 1001, 1)
    tree = build_cubes(mu, (1, 5))
    assert bmo_estimate(mu, tree, np.zeros(len(mu))) == 0.0
    vals = []
    for m in (64, 128):
        b = gen_broom(0.3, 3, points_per_segment=m)
        tree = build_cubes(b, (1, 4))
        # log of the linear density 4^-k of the level through each point
        z = b.points[:, 2]
        k = np.where(z >= 1, 0, np.floor(np.log(z) / np.log(0.3)))
        field = -k * np.log(4.0)
        vals.append(bmo_estimate(b, tree, field))
    assert np.isfinite(vals).all()
    assert vals[0] == pytest.approx(vals[1], rel=0.5)
