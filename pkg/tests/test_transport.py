import numpy as np
import pytest

from wassflat import (MassMismatch, PointMeasure, TooLarge, TransportPair, radial_cdf_gap,
                      w1_boundary, w1_dual_oracle)
from wassflat.transport import interval_complement_length


def dirac(p):
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return PointMeasure(p.reshape(1, -1), [1.0])


def random_measure(rng, n, k):
    r = rng.uniform(0, 0.999, k) ** (1 / n)
    v = rng.normal(size=(k, n))
    pts = v / np.linalg.norm(v, axis=1, keepdims=True) * r[:, None]
    w = rng.uniform(0.1, 1.0, k)
    return PointMeasure(pts, w / w.sum())


def test_identity_pair_costs_zero():
    rng = np.random.default_rng(1)
    mu = random_measure(rng, 2, 7)
    res = w1_boundary(TransportPair(mu, mu))
    assert res.cost == pytest.approx(0.0, abs=1e-12)
    assert w1_dual_oracle(TransportPair(mu, mu)) == pytest.approx(0.0, abs=1e-9)


def test_dirac_closed_forms():
    assert w1_boundary(TransportPair(dirac([0, 0]), dirac([0.3, 0]))).cost == pytest.approx(0.3, abs=1e-12)
    assert w1_dual_oracle(TransportPair(dirac([0, 0]), dirac([0.3, 0]))) == pytest.approx(0.3, abs=1e-9)
    # |q| = |q'| = 0.95 and |q - q'| = 0.5: the boundary route costs 0.1
    half = np.arcsin(0.25 / 0.95)
    q = 0.95 * np.array([np.cos(half), np.sin(half)])
    qq = 0.95 * np.array([np.cos(half), -np.sin(half)])
    assert np.linalg.norm(q - qq) == pytest.approx(0.5)
    res = w1_boundary(TransportPair(dirac(q), dirac(qq)))
    assert res.cost == pytest.approx(0.1, abs=1e-9)


def test_plan_marginals_and_cost():
    rng = np.random.default_rng(2)
    mu, nu = random_measure(rng, 3, 9), random_measure(rng, 3, 12)
    res = w1_boundary(TransportPair(mu, nu))
    a, b = res.marginals(len(mu), len(nu))
    np.testing.assert_allclose(a, mu.weights, atol=1e-9)
    np.testing.assert_allclose(b, nu.weights, atol=1e-9)
    total = sum(m * res.plan_cost[k] for k, m in res.plan.items())
    assert total == pytest.approx(res.cost, abs=1e-9)


def test_primal_dual_symmetry_and_triangle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        mu, nu, rho = (random_measure(rng, n, int(rng.integers(1, 16))) for _ in range(3))
        c = w1_boundary(TransportPair(mu, nu)).cost
        assert c == pytest.approx(w1_dual_oracle(TransportPair(mu, nu)), abs=1e-6)
        assert c == pytest.approx(w1_boundary(TransportPair(nu, mu)).cost, abs=1e-9)
        c2 = w1_boundary(TransportPair(nu, rho)).cost
        c3 = w1_boundary(TransportPair(mu, rho)).cost
        assert c3 <= c + c2 + 1e-9
        assert 0 <= c <= 2


def test_mass_mismatch():
    with pytest.raises(MassMismatch):
        TransportPair(PointMeasure([[0.0]], [0.5]), dirac([0.0]))
    # mass outside the open ball does not count
    with pytest.raises(MassMismatch):
        TransportPair(PointMeasure([[1.0]], [1.0]), dirac([0.0]))


def test_dual_oracle_size_cap():
    rng = np.random.default_rng(4)
    mu, nu = random_measure(rng, 2, 30), random_measure(rng, 2, 30)
    with pytest.raises(TooLarge):
        w1_dual_oracle(TransportPair(mu, nu), n_lp=40)


def test_radial_gap_identity():
    rng = np.random.default_rng(5)
    mu = random_measure(rng, 2, 10)
    gap, good = radial_cdf_gap(TransportPair(mu, mu), [0.1, 0.0], 0.1)
    assert gap == 0.0
    assert good == [(0.0, 0.5)]


@pytest.mark.parametrize("eps", [0.1, 0.3])
def test_radial_gap_bounds(eps):
    rng = np.random.default_rng(6)
    for _ in range(15):
        mu, nu = random_measure(rng, 2, 12), random_measure(rng, 2, 12)
        pair = TransportPair(mu, nu)
        w = w1_boundary(pair).cost
        y = rng.uniform(-0.3, 0.3, 2)
        gap, good = radial_cdf_gap(pair, y, eps, w)
        assert gap <= 2 * w + 1e-9
        assert interval_complement_length(good) <= eps + 1e-12


def test_plan_csv(tmp_path):
    res = w1_boundary(TransportPair(dirac([0.9, 0]), dirac([-0.9, 0])))
    p = tmp_path / "plan.csv"
    res.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "i,j,mass,cost"
    assert any(",-1," in ln or ln.startswith("-1,") for ln in lines[1:])
