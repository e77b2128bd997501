"""Shared, cached test corpus: measures and coronas reused across test modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from wassflat.corona import CoronaConfig, analyze_ball
from wassflat.flatness import SearchOptions
from wassflat.generators import (broom_tips, gen_broom, gen_haar_product, gen_line,
                                 gen_string_of_spheres)
from wassflat.measure import BallQuery

# reduced plane search used for every cube of a corona
LEAN = SearchOptions(n_random=2, max_descents=1, search_support=40, search_lattice=48,
                     max_support=120, max_lattice=150, maxfev=60, early_stop=0.01)


def corona_config(threshold: float, generations: int) -> CoronaConfig:
    return CoronaConfig(d=1, lam=2, lambda_star=20, alpha_threshold=threshold,
                        n_generations=generations, n_samples=1, opts=LEAN)


@lru_cache(maxsize=None)
def line_corona():
    mu = gen_line(2, 2.0, 2001, 1)
    return mu, analyze_ball(mu, BallQuery([0.0, 0.0], 0.5), corona_config(0.05, 3))


BROOM_RHO = 0.3


def broom_ball_center() -> np.ndarray:
    # just above the foot of a level-4 segment
    return np.r_[broom_tips(BROOM_RHO, 4)[0], 0.0045]


@lru_cache(maxsize=None)
def broom_corona(points_per_segment: int = 256, k_max: int = 6):
    c = broom_ball_center()
    mu = gen_broom(BROOM_RHO, k_max, points_per_segment=points_per_segment, window=(c, 0.03))
    x = mu.points[mu.nearest(c)[1]]
    return mu, analyze_ball(mu, BallQuery(x, 0.0075), corona_config(0.1, 2))


@lru_cache(maxsize=None)
def string_corona(points_per_sphere: int = 64):
    mu = gen_string_of_spheres(3, 0.1, 41, points_per_sphere=points_per_sphere)
    x = mu.points[mu.nearest([0.0, 0.01, 0.0])[1]]
    return mu, analyze_ball(mu, BallQuery(x, 2.0), corona_config(0.1, 2))


@lru_cache(maxsize=None)
def haar_corona(N: int):
    mu = gen_haar_product(0.9, N, grid=2 ** 13)
    x = mu.points[mu.nearest([0.5])[1]]
    return mu, analyze_ball(mu, BallQuery(x, 0.5), corona_config(0.1, 2))
