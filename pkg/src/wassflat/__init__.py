"""Multiscale flatness of discrete measures via a boundary-aware Wasserstein distance."""

from .errors import (ConfigError, ConfigInfeasible, DegenerateRegion, EmptyBall, EmptyTree,
                     MassMismatch, MeasureFormatError, PlaneMissesBall, ResolutionTooFine,
                     ScaleConstraintViolated, TooLarge, WassflatError)
from .measure import (BallQuery, DoublingStats, PointMeasure, ball_mass, ball_masses,
                      detect_atoms, doubling_constant, eta_from_c, load_measure,
                      restrict_rescale, save_measure)
from .transport import (TransportPair, TransportResult, radial_cdf_gap, w1_boundary,
                        w1_dual_oracle)
from .flatness import (AffinePlane, AlphaResult, SearchOptions, alpha_d, alpha_min, beta,
                       flat_measure, hole_distance, plane_constant, plane_drift)
from .density import (ScaleProfile, classify_point, density_diagnostics, profile,
                      stratify_set)
from .cubes import CubeTree, build_cubes, check_partition, cube_flats, fit_kappa
from .corona import (BigPiece, Corona, CoronaConfig, RegionGraph, StoppingRegion,
                     analyze_ball, big_piece, build_corona, carleson_report, region_graph,
                     refine_sharp)
from .generators import (gen_broom, gen_dirac_chain, gen_haar_product, gen_line,
                         gen_ocean_of_circles, gen_riesz_product, gen_string_of_spheres)

__version__ = "0.1.0"
