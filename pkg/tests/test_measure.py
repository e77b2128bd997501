import json

import numpy as np
import pytest

from wassflat import (BallQuery, EmptyBall, MeasureFormatError, PointMeasure, ResolutionTooFine,
                      ball_mass, detect_atoms, doubling_constant, eta_from_c, gen_dirac_chain,
                      gen_line, load_measure, restrict_rescale, save_measure)
from wassflat.flatness import unit_ball_volume


def test_ball_mass_single_atom():
    mu = PointMeasure([[0.0, 0.0]], [1.0])
    assert ball_mass(mu, BallQuery([0.0, 0.0], 1.0)) == 1.0
    # open ball: a point on the sphere is outside
    assert ball_mass(mu, BallQuery([1.0, 0.0], 1.0)) == 0.0


@pytest.mark.parametrize("d", [2, 3])
def test_ball_mass_monte_carlo_volume(d):
    rng = np.random.default_rng(5)
    n = 20000
    pts = rng.uniform(-1, 1, size=(n, d))
    mu = PointMeasure(pts, np.full(n, 2.0 ** d / n))
    got = ball_mass(mu, BallQuery(np.zeros(d), 1.0))
    assert got == pytest.approx(unit_ball_volume(d), rel=0.03)


def test_merge_coincident_points_preserves_masses():
    pts = np.array([[0.0], [0.5], [0.0], [0.7]])
    mu = PointMeasure(pts, [1.0, 2.0, 3.0, 4.0])
    assert len(mu) == 3
    for c, r in [(0.0, 0.1), (0.6, 0.2), (0.3, 1.0)]:
        raw = sum(w for p, w in zip(pts[:, 0], [1, 2, 3, 4]) if abs(p - c) < r)
        assert ball_mass(mu, BallQuery([c], r)) == pytest.approx(raw)


def test_restrict_rescale_normalizes_and_is_idempotent():
    mu = gen_line(2, 2.0, 801, 1)
    q = BallQuery(mu.points[400], 0.3)
    loc = restrict_rescale(mu, q)
    inside = np.linalg.norm(loc.points, axis=1) < 1
    assert loc.weights[inside].sum() == pytest.approx(1.0, abs=1e-12)
    again = restrict_rescale(loc, BallQuery(np.zeros(2), 1.0))
    np.testing.assert_allclose(again.weights, loc.weights[inside], atol=1e-12)
    # rescaled line sample is a flat line measure on the unit ball
    assert np.abs(loc.points[:, 1]).max() == 0.0
    assert np.abs(loc.points[:, 0]).max() < 1


def test_restrict_rescale_empty_ball():
    mu = PointMeasure([[0.0]], [1.0])
    with pytest.raises(EmptyBall):
        restrict_rescale(mu, BallQuery([5.0], 1.0))


def test_doubling_line_and_eta():
    mu = gen_line(2, 2.0, 4001, 1)
    centers = mu.points[1500:2500:100]
    st = doubling_constant(mu, centers, range(2, 6))
    assert st.c_delta == pytest.approx(2.0, rel=0.02)
    assert (2 * st.c_delta) ** st.eta == pytest.approx(2.0, abs=1e-12)
    assert eta_from_c(2.0) == 0.5


def test_doubling_ratio_bounds_every_sample():
    mu = gen_line(2, 2.0, 2001, 1)
    centers = mu.points[::200]
    st = doubling_constant(mu, centers, range(2, 5))
    for x in centers:
        for k in range(2, 5):
            r = 2.0 ** -k
            assert ball_mass(mu, BallQuery(x, 2 * r)) / ball_mass(mu, BallQuery(x, r)) <= st.c_delta + 1e-12
            assert ball_mass(mu, BallQuery(x, r)) <= ball_mass(mu, BallQuery(x, 2 * r))


def test_doubling_dirac_chain_is_stable_across_resolutions():
    cs = []
    for jm in (10, 14):
        mu = gen_dirac_chain("geometric", jm)
        centers = (2.0 ** -np.arange(6)).reshape(-1, 1)
        st = doubling_constant(mu, centers, range(1, 5))
        cs.append(st.c_delta)
    assert np.isfinite(cs).all()
    assert cs[0] == pytest.approx(cs[1], rel=1e-3)


def test_doubling_below_floor_raises():
    mu = gen_line(2, 2.0, 101, 1)
    with pytest.raises(ResolutionTooFine):
        doubling_constant(mu, mu.points[:3], [12])


def test_detect_atoms():
    mu = gen_dirac_chain("geometric", 8)
    atoms = detect_atoms(mu, 1.5 * mu.resolution_floor)
    found = sorted(float(p[0]) for p, _ in atoms)
    # every atom separated by more than the floor is found; 0 is never one
    assert all(x > 0 for x in found)
    assert 1.0 in found and 0.5 in found
    assert detect_atoms(gen_line(2, 2.0, 201, 1), 0.03) == []
    single = PointMeasure([[0.3, 0.1]], [2.0])
    (p, m), = detect_atoms(single, 0.1)
    np.testing.assert_array_equal(p, [0.3, 0.1])
    assert m == 2.0


def test_json_roundtrip_and_validation(tmp_path):
    mu = PointMeasure([[0.0, 1.0], [2.0, 3.0]], [0.25, 0.75], label="t")
    p = tmp_path / "m.json"
    save_measure(mu, p)
    back = load_measure(p)
    np.testing.assert_array_equal(back.points, mu.points)
    np.testing.assert_array_equal(back.weights, mu.weights)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dim": 2, "points": [[0, 0], [1, 1]], "weights": [1.0, -1.0]}))
    with pytest.raises(MeasureFormatError, match="1"):
        load_measure(bad)
