"""Command-line front end: generate measures, run analyses, write reports and plots.

Every run resolves one configuration from built-in defaults, an optional
JSON config file and command-line flags (in increasing priority), and embeds
it in each JSON report. ``--save-config`` writes the resolved document back,
so a run can be repeated bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import generators as gen
from .errors import ConfigError, WassflatError
from .flatness import SearchOptions
from .measure import BallQuery, load_measure, save_measure

COMMANDS = ("gen", "alpha", "profile", "stratify", "cubes", "corona", "bigpiece",
            "carleson", "report")
EXAMPLES = ("line", "plane", "broom", "string", "ocean", "haar", "riesz", "dirac")


@dataclass
class RunConfig:
    """Resolved parameters of one run. Unused fields are carried along unchanged."""

    command: str = ""
    input: str | None = None
    out: str = "out"
    # generator
    example: str | None = None
    n: int = 3
    rho: float = 0.3
    gen_kmax: int = 6
    points: int = 16
    epsilon: float = 0.1
    a: float = 0.9
    depth: int = 8
    # point analyses
    x_index: int = 0
    kmin: int = 1
    kmax: int = 8
    m_r: int = 4
    sample: int = 32
    window: int = 5
    grid_step: float | None = None
    seed: int = 0
    # corona
    ball: str | None = None
    d: int = 1
    lam: float = 2.0
    lambda_star: float = 20.0
    alpha_threshold: float = 0.05
    generations: int | None = None
    n_samples: int = 1
    gamma: float = 0.2
    N: int | None = None
    rho_piece: float | None = None
    C1: float | None = None
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown value {self.command!r}")
        if self.command == "gen":
            if self.example not in EXAMPLES:
                raise ConfigError(f"example: expected one of {', '.join(EXAMPLES)}")
        elif not self.input:
            raise ConfigError("input: a measure file is required")
        checks = [("rho", 0 < self.rho < 0.5), ("points", self.points >= 1),
                  ("epsilon", 0 < self.epsilon < 1), ("a", abs(self.a) < 1),
                  ("kmin", self.kmin <= self.kmax), ("m_r", self.m_r >= 1),
                  ("sample", self.sample >= 1), ("window", self.window >= 1),
                  ("d", self.d >= 0), ("lam", self.lam > 1),
                  ("lambda_star", self.lambda_star >= 10 * self.lam),
                  ("alpha_threshold", self.alpha_threshold > 0),
                  ("n_samples", self.n_samples >= 1), ("gamma", 0 < self.gamma < 1),
                  ("N", self.N is None or self.N >= 1),
                  ("rho_piece", self.rho_piece is None or 0 < self.rho_piece < 1),
                  ("workers", self.workers >= 1),
                  ("generations", self.generations is None or self.generations >= 1)]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name}: value {getattr(self, name)!r} out of range")
        if self.command in ("corona", "bigpiece", "carleson", "report") and not self.ball:
            raise ConfigError("ball: required as 'x1,...,xn:r'")
        if self.ball:
            parse_ball(self.ball)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_ball(text: str) -> BallQuery:
    try:
        c, r = text.split(":")
        return BallQuery([float(v) for v in c.split(",")], float(r))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"ball: cannot parse {text!r} ({exc})") from None


def load_config(path) -> dict:
    """Read a JSON key/value config; errors name the line or the field."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    for k in doc:
        if k not in known:
            raise ConfigError(f"{path}: unknown field {k!r}")
    return doc


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _opts(cfg: RunConfig, lean: bool = False) -> SearchOptions:
    if lean:
        return SearchOptions(grid_step=cfg.grid_step, seed=cfg.seed, n_random=2, max_descents=1,
                             search_support=40, search_lattice=48, max_support=120,
                             max_lattice=150, maxfev=60, early_stop=0.01)
    return SearchOptions(grid_step=cfg.grid_step, seed=cfg.seed)


# output helpers

def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=",", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "wassflat"
    return plt, plt.figure(figsize=(8, 6), dpi=100)


def save_svg(plt, fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _validate(paths) -> None:
    for p in paths:
        if not Path(p).is_file() or Path(p).stat().st_size == 0:
            raise WassflatError(f"artifact {p} was not written")
        if str(p).endswith(".json"):
            json.loads(Path(p).read_text())


# commands

def cmd_gen(cfg: RunConfig, outdir: Path) -> tuple[list, dict]:
    e = cfg.example
    if e == "line":
        mu = gen.gen_line(cfg.n, 2.0, cfg.points, 1)
    elif e == "plane":
        mu = gen.gen_line(cfg.n, 2.0, cfg.points, 2)
    elif e == "broom":
        mu = gen.gen_broom(cfg.rho, cfg.gen_kmax, points_per_segment=cfg.points)
    elif e == "string":
        mu = gen.gen_string_of_spheres(cfg.n, cfg.epsilon)
    elif e == "ocean":
        mu = gen.gen_ocean_of_circles(cfg.n, cfg.epsilon)
    elif e == "haar":
        mu = gen.gen_haar_product(cfg.a, cfg.depth)
    elif e == "riesz":
        mu = gen.gen_riesz_product([cfg.a] * cfg.depth, cfg.depth)
    else:
        mu = gen.gen_dirac_chain("geometric", cfg.depth)
    path = outdir / f"{e}.json"
    save_measure(mu, path)
    return [path], {"points": len(mu), "mass": mu.total_mass, "path": str(path)}


def cmd_alpha(cfg, outdir, mu) -> tuple[list, dict]:
    from .density import profile
    x = mu.points[cfg.x_index]
    p = profile(mu, x, range(cfg.kmin, cfg.kmax + 1), 1, _opts(cfg), cfg.x_index)
    rows = [(r.k, r.r, r.d, r.alpha) for r in p.records]
    csv_path, svg_path = outdir / "alpha.csv", outdir / "alpha.svg"
    write_csv(csv_path, ["k", "r", "d", "alpha"], rows)
    _plot_profile(p, svg_path)
    return [csv_path, svg_path], {"scales": len(rows), "excluded": p.excluded}


def _plot_profile(p, path) -> None:
    plt, fig = _figure()
    ax = fig.add_subplot(111)
    if p.records:
        ax.plot([np.log2(r.r) for r in p.records], [r.alpha for r in p.records], "o-")
    ax.set_xlabel("log2 r")
    ax.set_ylabel("alpha")
    save_svg(plt, fig, path)


def cmd_profile(cfg, outdir, mu) -> tuple[list, dict]:
    from .density import classify_point, profile
    x = mu.points[cfg.x_index]
    p = profile(mu, x, range(cfg.kmin, cfg.kmax + 1), cfg.m_r, _opts(cfg), cfg.x_index)
    csv_path, svg_path = outdir / "profile.csv", outdir / "profile.svg"
    write_csv(csv_path, ["k", "r", "d", "alpha", "theta_star"], p.to_rows())
    _plot_profile(p, svg_path)
    summary = {"excluded": p.excluded}
    if p.records:
        summary["classification"] = classify_point(p, window=min(cfg.window, len(p.records))).to_dict()
    return [csv_path, svg_path], summary


def cmd_stratify(cfg, outdir, mu) -> tuple[list, dict]:
    from .density import stratify_set
    rng = np.random.default_rng(cfg.seed)
    sample = np.sort(rng.choice(len(mu), size=min(cfg.sample, len(mu)), replace=False))
    buckets, rest, info = stratify_set(mu, sample, range(cfg.kmin, cfg.kmax + 1), cfg.window,
                                       m_r=cfg.m_r, opts=_opts(cfg))
    rows = []
    for i in sample:
        c = info.get(int(i))
        rows.append((int(i), "" if c is None or c.d_x is None else c.d_x,
                     "" if c is None or c.stratum_k is None else c.stratum_k,
                     float("nan") if c is None else c.J))
    csv_path, svg_path = outdir / "strata.csv", outdir / "strata.svg"
    write_csv(csv_path, ["index", "d", "stratum", "J"], rows)
    plt, fig = _figure()
    ax = fig.add_subplot(111)
    keys = sorted(buckets)
    ax.bar(range(len(keys)), [len(buckets[k]) for k in keys])
    ax.set_xticks(range(len(keys)), [f"d={d},k={k}" for d, k in keys])
    ax.set_ylabel("points")
    save_svg(plt, fig, svg_path)
    return [csv_path, svg_path], {"buckets": {f"{d},{k}": len(v) for (d, k), v in sorted(buckets.items())},
                                  "remainder": len(rest)}


def cmd_cubes(cfg, outdir, mu) -> tuple[list, dict]:
    from .cubes import build_cubes, check_partition, default_j_range, fit_kappa
    j0, j1 = default_j_range(mu)
    if cfg.generations is not None:
        j1 = min(j1, j0 + cfg.generations - 1)
    tree = build_cubes(mu, (j0, j1))
    check_partition(tree)
    kappa, C, r2, _, n_used = fit_kappa(tree)
    json_path, dot_path = outdir / "cubes.json", outdir / "cubes.dot"
    doc = tree.to_dict()
    doc["kappa_fit"] = {"kappa": kappa, "C": C, "r2": r2, "cubes_used": n_used}
    write_json(doc, json_path)
    dot_path.write_text(tree.to_dot())
    return [json_path, dot_path], {"cubes": len(tree.cubes), "generations": [j0, j1],
                                   "kappa": kappa, "r2": r2}


def _corona(cfg, mu):
    from .corona import CoronaConfig, analyze_ball, check_corona
    ccfg = CoronaConfig(d=cfg.d, lam=cfg.lam, lambda_star=cfg.lambda_star,
                        alpha_threshold=cfg.alpha_threshold, n_generations=cfg.generations,
                        n_samples=cfg.n_samples, workers=cfg.workers, opts=_opts(cfg, lean=True))
    cor = analyze_ball(mu, parse_ball(cfg.ball), ccfg)
    check_corona(cor)
    return cor


def cmd_corona(cfg, outdir, mu, cor=None) -> tuple[list, dict]:
    from .corona import region_graph, region_report
    from .errors import DegenerateRegion
    cor = cor or _corona(cfg, mu)
    graphs = []
    if cfg.d >= 1:
        for S in cor.regions:
            try:
                graphs.append(region_graph(mu, cor, S))
            except DegenerateRegion:
                pass
    json_path = outdir / "regions.json"
    write_json({"corona": cor.to_dict(), "regions": region_report(cor, graphs),
                "graphs": [g.to_dict() for g in graphs]}, json_path)
    paths = [json_path]
    if mu.ambient_dim == 2 and graphs:
        svg_path = outdir / "regions.svg"
        _plot_graphs(mu, cor, graphs, svg_path)
        paths.append(svg_path)
    return paths, {"regions": len(cor.regions), "bad": len(cor.bad), "graphs": len(graphs)}


def _plot_graphs(mu, cor, graphs, path) -> None:
    plt, fig = _figure()
    ax = fig.add_subplot(111)
    idx = cor.tree.subset
    ax.scatter(mu.points[idx, 0], mu.points[idx, 1], s=1, c="0.6")
    for g in graphs:
        if g.d != 1:
            continue
        order = np.argsort(g.grid[:, 0])
        p = g.grid[order]
        pts = g.base_plane.base + p @ g.base_plane.frame + g.A_grid[order] @ g.base_plane.normals()
        ax.plot(pts[:, 0], pts[:, 1], lw=1)
    ax.set_aspect("equal")
    save_svg(plt, fig, path)


def cmd_carleson(cfg, outdir, mu, cor=None) -> tuple[list, dict]:
    from .corona import carleson_report
    cor = cor or _corona(cfg, mu)
    rep = carleson_report(cor.tree, cor.flats, cor.bad, cor.regions, cor.ball, cor)
    json_path, csv_path, svg_path = (outdir / "carleson.json", outdir / "carleson.csv",
                                     outdir / "carleson.svg")
    write_json(rep, json_path)
    write_csv(csv_path, ["generation", "alpha_mass_ratio"], sorted(rep["per_generation"].items()))
    plt, fig = _figure()
    ax = fig.add_subplot(111)
    js = sorted(rep["per_generation"])
    ax.plot(js, [rep["per_generation"][j] for j in js], "o-")
    ax.set_xlabel("generation")
    ax.set_ylabel("sum alpha mu(Q) / mu(B)")
    save_svg(plt, fig, svg_path)
    keys = ("sum_alpha_mass", "bad_mass", "tops_mass", "n_regions", "n_bad", "n_cubes")
    return [json_path, csv_path, svg_path], {k: rep[k] for k in keys}


def cmd_bigpiece(cfg, outdir, mu, cor=None) -> tuple[list, dict]:
    from .corona import big_piece, refine_sharp
    cor = cor or _corona(cfg, mu)
    piece = big_piece(mu, cor, cfg.gamma, cfg.N, cfg.rho_piece)
    sharp = refine_sharp(piece, cor, C1=cfg.C1)
    csv_path, json_path = outdir / "bigpiece.csv", outdir / "bigpiece.json"
    piece.to_csv(csv_path)
    write_json({"piece": piece.to_dict(), "sharp": sharp.to_dict()}, json_path)
    return [csv_path, json_path], {"kept": len(piece.kept), "removed": piece.removed_ratio,
                                   "distortion": piece.distortion_measured,
                                   "theta_ratio": sharp.theta_ratio}


def cmd_report(cfg, outdir, mu) -> tuple[list, dict]:
    cor = _corona(cfg, mu)
    paths, summary = [], {}
    for name, fn in (("corona", cmd_corona), ("carleson", cmd_carleson), ("bigpiece", cmd_bigpiece)):
        p, s = fn(cfg, outdir, mu, cor)
        paths += p
        summary[name] = s
    return paths, summary


HANDLERS = {"alpha": cmd_alpha, "profile": cmd_profile, "stratify": cmd_stratify,
            "cubes": cmd_cubes, "corona": cmd_corona, "carleson": cmd_carleson,
            "bigpiece": cmd_bigpiece, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wassflat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON key/value config file")
        p.add_argument("--save-config", help="write the resolved config here")
        p.add_argument("--json", action="store_true", help="print a JSON summary")
        p.add_argument("--in", dest="input")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--grid-step", dest="grid_step", type=float)
        if name == "gen":
            p.add_argument("--example", choices=EXAMPLES)
            p.add_argument("--n", type=int)
            p.add_argument("--rho", type=float)
            p.add_argument("--kmax", dest="gen_kmax", type=int)
            p.add_argument("--points", type=int)
            p.add_argument("--epsilon", type=float)
            p.add_argument("--a", type=float)
            p.add_argument("--depth", type=int)
        if name in ("alpha", "profile", "stratify"):
            p.add_argument("--x-index", dest="x_index", type=int)
            p.add_argument("--kmin", type=int)
            p.add_argument("--kmax", type=int)
            p.add_argument("--m-r", dest="m_r", type=int)
            p.add_argument("--window", type=int)
            p.add_argument("--sample", type=int)
        if name in ("cubes", "corona", "carleson", "bigpiece", "report"):
            p.add_argument("--generations", type=int)
        if name in ("corona", "carleson", "bigpiece", "report"):
            p.add_argument("--ball", help="center and radius, 'x1,...,xn:r'")
            p.add_argument("--d", type=int)
            p.add_argument("--lam", type=float)
            p.add_argument("--lambda-star", dest="lambda_star", type=float)
            p.add_argument("--alpha-threshold", dest="alpha_threshold", type=float)
            p.add_argument("--n-samples", dest="n_samples", type=int)
        if name in ("bigpiece", "report"):
            p.add_argument("--gamma", type=float)
            p.add_argument("--N", type=int)
            p.add_argument("--rho-piece", dest="rho_piece", type=float)
            p.add_argument("--C1", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2
    if args.save_config:
        save_config(cfg, args.save_config)
    outdir = Path(cfg.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        if cfg.command == "gen":
            paths, summary = cmd_gen(cfg, outdir)
        else:
            mu = load_measure(cfg.input)
            paths, summary = HANDLERS[cfg.command](cfg, outdir, mu)
        run_path = outdir / f"{cfg.command}_run.json"
        write_json({"config": cfg.to_dict(), "summary": summary}, run_path)
        paths.append(run_path)
        _validate(paths)
    except (WassflatError, ValueError, OSError) as exc:
        print(f"{cfg.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps({"config": cfg.to_dict(), "summary": summary,
                          "artifacts": [str(p) for p in paths]}, sort_keys=True,
                         default=_jsonable))
    else:
        for p in paths:
            print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
