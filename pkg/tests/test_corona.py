import csv
import json

import numpy as np
import pytest

from _corpus import line_corona, string_corona
from wassflat import (BallQuery, ConfigInfeasible, EmptyTree, big_piece, build_corona,
                      build_cubes, carleson_report, region_graph, refine_sharp)
from wassflat.corona import (TOP, ball_band, check_corona, cube_chain_J, projection_separation,
                             region_report)


def test_ball_band():
    assert ball_band(20, 0.5) == 8
    assert 4 * 20 * 2.0 ** -ball_band(20, 0.3) <= 0.3


def test_flat_corona_single_region():
    mu, cor = line_corona()
    check_corona(cor)
    assert cor.bad == []
    assert len(cor.regions) == 1
    S = cor.regions[0]
    assert S.top == TOP
    assert set(S.members) == {TOP, *cor.delta}
    assert S.alpha_used < cor.threshold
    rep = carleson_report(cor.tree, cor.flats, cor.bad, cor.regions, cor.ball, cor)
    assert rep["sum_alpha_mass"] < 0.05
    assert rep["bad_mass"] == 0.0
    assert rep["tops_mass"] == pytest.approx(1.0, abs=0.01)
    assert rep["minimal_mass"] <= rep["tops_mass"] + 1e-12


def test_partition_on_synthetic_flats():
    mu, cor = line_corona()
    # raise alpha artificially on a few cubes and rebuild from the same flats
    flats = dict(cor.flats)
    rng = np.random.default_rng(0)
    for c in rng.choice(cor.delta, 40, replace=False):
        f = flats[int(c)]
        flats[int(c)] = type(f)(**{**vars(f), "alpha": 0.04})
    cor2 = build_corona(cor.tree, flats, 0.05, cor.ball, cor.tops, cor.delta, cor.q0)
    check_corona(cor2)
    assert len(cor2.regions) > 1
    good = {TOP, *cor.delta} - set(cor2.bad)
    assert sum(len(S.members) for S in cor2.regions) == len(good)
    rep = carleson_report(cor2.tree, flats, cor2.bad, cor2.regions, cor2.ball, cor2)
    assert rep["minimal_mass"] <= rep["tops_mass"] + 1e-12


def test_empty_tree():
    mu, cor = line_corona()
    with pytest.raises(EmptyTree):
        build_corona(cor.tree, cor.flats, 0.05, BallQuery([5.0, 5.0], 0.1))


def test_flat_region_graph():
    mu, cor = line_corona()
    g = region_graph(mu, cor, cor.regions[0])
    assert np.abs(g.A_grid).max() < 1e-9
    assert g.residual_max < 1e-9
    assert np.abs(g.pou_sum - 1).max() <= 1e-9
    assert g.lipschitz_measured < 1e-9
    assert projection_separation(cor, cor.regions[0]) >= 0.5
    rec, = region_report(cor, [g])
    json.dumps(rec)
    assert rec["region"] == 0 and rec["residual_max"] == g.residual_max


def test_flat_big_piece_and_refinement(tmp_path):
    mu, cor = line_corona()
    piece = big_piece(mu, cor, gamma=0.2)
    assert piece.removed_ratio <= 0.2
    assert piece.F3_mass == 0.0
    assert piece.distortion_measured == pytest.approx(1.0, abs=1e-9)
    again = big_piece(mu, cor, gamma=0.2)
    assert piece.f.tobytes() == again.f.tobytes()
    sharp = refine_sharp(piece, cor)
    assert sharp.removed_sharp == 0.0
    assert sharp.theta_ratio == pytest.approx(1.0, abs=0.02)
    assert np.all(sharp.theta_lo <= sharp.theta_hi)
    path = tmp_path / "piece.csv"
    piece.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["index", "f0", "region"]
    assert len(rows) == len(piece.kept) + 1
    json.dumps(piece.to_dict())


def test_big_piece_infeasible_config():
    mu, cor = line_corona()
    with pytest.raises(ConfigInfeasible):
        big_piece(mu, cor, gamma=0.2, N=1, rho=0.01)
    with pytest.raises(ValueError):
        big_piece(mu, cor, gamma=1.5)


def test_cube_chain_J_flat():
    mu, cor = line_corona()
    J = cube_chain_J(cor)
    inside = np.isfinite(J)
    assert inside.any()
    assert np.nanmax(J) < 0.1


def test_string_regions_stop_at_the_crossover():
    mu, cor = string_corona(64)
    check_corona(cor)
    # the ball sits at 20 eps where the string looks flat; cube balls at a few eps do not
    q0_region = cor.regions[cor.region_of[TOP]]
    assert cor.alpha(TOP) < 0.05
    assert q0_region.members == [TOP] and q0_region.stopped == [TOP]
    by_gen = {}
    for c in cor.delta:
        by_gen.setdefault(cor.tree.cubes[c].j, []).append(cor.alpha(c))
    means = [np.mean(by_gen[j]) for j in sorted(by_gen)]
    assert cor.alpha(TOP) < means[0] < means[1]


def test_tree_determinism_for_corona_input():
    mu, cor = line_corona()
    t2 = build_cubes(mu, (cor.tree.j0, cor.tree.j_max), subset=cor.tree.subset)
    assert [c.members.tobytes() for c in t2.cubes] == [c.members.tobytes() for c in cor.tree.cubes]
