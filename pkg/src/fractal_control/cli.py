"""Command-line experiment runner.

``fractal-control --experiment NAME [--level M] [--paths N] [--seed S]
[--horizon T] [--a A] [--workers W] [--out PATH] [--format csv|json]
[--config FILE]``

A config file holds ``key=value`` lines with the same keys as the flags;
flags win.  Every run writes ``PATH.manifest.json`` next to the result.
Exit status: 0 success, 1 numerical failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import subprocess
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, _kernels
from ._config import ResourceLimitError, max_level
from .control import (
    AdmissibilityError,
    BasisDegeneracyError,
    ControlPolicy,
    IntegrationBlowupError,
    smooth_test_coefficients,
    variation_orders,
)
from .diffusion import (
    Estimate,
    WalkConfig,
    bracket_bin_edges,
    estimate_kernel_on_diagonal,
    estimate_moment,
    min_resolvable_time,
    sample_paths,
    singularity_profile,
    top_share,
)
from .dirichlet import build_measure_table, write_measure_table
from .gasket import build_pregasket, index_word
from .regulator import CoverageError, RegulatorConfig, regulator_suite

EXPERIMENTS = (
    "geometry-audit",
    "measures",
    "kernel-slope",
    "bracket-moments",
    "singularity",
    "variation-orders",
    "regulator",
)
FORMATS = ("csv", "json")

# experiment-specific settings used when the corresponding flag is absent
KERNEL_VERTEX = 1
KERNEL_TIMES = 10
MOMENT_EPSILONS = tuple(2.0 ** -j for j in range(2, 8))
SINGULARITY_BINS = 625
VARIATION_EPSILONS = tuple(2.0 ** -j for j in range(4, 10))
VARIATION_PATHS = 4000
VARIATION_HORIZON = 0.125


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    level: int = 6
    paths: int = 100_000
    seed: int = 0
    horizon: float = 1.0
    a: float = 1.0
    workers: int | None = None
    out: str | None = None
    format: str = "csv"
    explicit: frozenset = frozenset()

    def output_path(self) -> Path:
        return Path(self.out) if self.out else Path(f"{self.experiment}.{self.format}")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("explicit")
        d["out"] = str(self.output_path())
        return d


_CASTS: dict[str, Callable[[str], object]] = {
    "experiment": str,
    "level": int,
    "paths": int,
    "seed": int,
    "horizon": float,
    "a": float,
    "workers": int,
    "out": str,
    "format": str,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fractal-control",
        description="Run a named Sierpinski-gasket diffusion/control experiment.",
    )
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--level", type=int, help="gasket level m (default 6)")
    p.add_argument("--paths", type=int, help="Monte Carlo paths N (default 100000)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--horizon", type=float, help="time horizon T (default 1)")
    p.add_argument("--a", type=float, help="regulator control-cost weight (default 1)")
    p.add_argument("--workers", type=int, help="worker threads (default: all cores)")
    p.add_argument("--out", help="result path (default EXPERIMENT.FORMAT)")
    p.add_argument("--format", choices=FORMATS, help="csv or json (default csv)")
    p.add_argument("--config", help="key=value file; flags take precedence")
    return p


def read_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in _CASTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CASTS[key](val)
        except ValueError:
            raise UsageError(f"--{key}: malformed value {val!r} in {path}") from None
    return values


def parse_config(argv: Sequence[str] | None = None) -> ExperimentConfig:
    """Merge defaults, an optional key=value file and flags (flags win)."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    merged = read_config_file(ns.config) if ns.config else {}
    for key in _CASTS:
        val = getattr(ns, key)
        if val is not None:
            merged[key] = val
    if "experiment" not in merged:
        raise UsageError("--experiment is required")
    if merged["experiment"] not in EXPERIMENTS:
        raise UsageError(f"--experiment: unknown experiment {merged['experiment']!r}")
    if merged.get("format", "csv") not in FORMATS:
        raise UsageError(f"--format: must be one of {FORMATS}")
    cfg = ExperimentConfig(**merged, explicit=frozenset(merged))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.level < 0:
        raise UsageError("--level: must be >= 0")
    if cfg.level > max_level():
        raise UsageError(f"--level: {cfg.level} exceeds the maximum level {max_level()}")
    if cfg.paths < 1:
        raise UsageError("--paths: must be >= 1")
    if not (cfg.horizon > 0 and math.isfinite(cfg.horizon)):
        raise UsageError("--horizon: must be a positive number")
    if not (cfg.a > 0 and math.isfinite(cfg.a)):
        raise UsageError("--a: must be a positive number")
    if cfg.workers is not None and cfg.workers < 1:
        raise UsageError("--workers: must be >= 1")
    if cfg.experiment == "regulator" and "horizon" in cfg.explicit and cfg.horizon != 1.0:
        raise UsageError("--horizon: the regulator runs on [0, 1]")
    if cfg.experiment in ("kernel-slope", "bracket-moments", "singularity", "variation-orders", "regulator") \
            and cfg.level < 1:
        raise UsageError("--level: this experiment needs level >= 1")


# ---------------------------------------------------------------------------
# result tables


@dataclass
class Result:
    """A CSV table (header + rows + trailing comment lines) and its JSON twin."""

    header: list
    rows: list
    json: dict
    trailer: list = None
    csv_text: str | None = None

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return json.dumps(self.json, indent=2, sort_keys=True) + "\n"
        if self.csv_text is not None:
            return self.csv_text
        lines = [",".join(self.header)]
        lines += [",".join(_fmt(v) for v in row) for row in self.rows]
        lines += [f"# {k},{_fmt(v)}" for k, v in (self.trailer or [])]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _est_rows(ests: Sequence[Estimate]) -> list:
    return [[e.name, e.value, e.stderr, e.n] for e in ests]


def run_geometry_audit(cfg: ExperimentConfig) -> Result:
    rows, js = [], []
    for m in range(cfg.level + 1):
        g = build_pregasket(m)
        ok = (
            g.n_vertices == (3 ** (m + 1) + 3) // 2
            and g.n_edges == 3 ** (m + 1)
            and g.n_cells == 3 ** m
            and sorted(np.flatnonzero(g.degree == 2).tolist()) == sorted(g.corner_ids)
            and bool(np.all((g.degree == 2) | (g.degree == 4)))
        )
        rows.append([m, g.n_vertices, g.n_edges, g.n_cells, ok])
        js.append({"level": m, "vertices": g.n_vertices, "edges": g.n_edges, "cells": g.n_cells, "ok": ok})
    return Result(["level", "vertices", "edges", "cells", "ok"], rows, {"levels": js, "ok": all(r[-1] for r in rows)})


def run_measures(cfg: ExperimentConfig) -> Result:
    table = build_measure_table(cfg.level)
    buf = io.StringIO()
    write_measure_table(table, buf)
    total_mu = sum(table.mu[cfg.level])
    total_nu = sum(table.nu[cfg.level])

    def fmt(x):
        return f"{x.numerator}/{x.denominator}" if table.exact else repr(float(x))

    cells = [
        {"word": index_word(i, cfg.level), "nu": fmt(table.nu[cfg.level][i]), "mu": fmt(table.mu[cfg.level][i]),
         "mu1": fmt(table.mu_i[0][cfg.level][i]), "mu2": fmt(table.mu_i[1][cfg.level][i]),
         "mu3": fmt(table.mu_i[2][cfg.level][i])}
        for i in range(3 ** cfg.level)
    ]
    js = {"level": cfg.level, "exact": table.exact, "total_mu": fmt(total_mu), "total_nu": fmt(total_nu), "cells": cells}
    return Result([], [], js, csv_text=buf.getvalue())


def run_kernel_slope(cfg: ExperimentConfig) -> Result:
    m = cfg.level
    hi = 0.1 if "horizon" not in cfg.explicit else cfg.horizon
    lo = min_resolvable_time(m)
    if hi <= lo:
        raise UsageError(f"--horizon: must exceed the resolution limit {lo:g} at level {m}")
    ts = np.geomspace(lo, hi, KERNEL_TIMES)
    k = estimate_kernel_on_diagonal(m, ts, KERNEL_VERTEX, paths=cfg.paths, seed=cfg.seed)
    buf = io.StringIO()
    k.write_csv(buf)
    js = {"vertex": KERNEL_VERTEX, "t": k.t.tolist(), "p_hat": k.p_hat.tolist(), "stderr": k.stderr.tolist(),
          "slope": k.slope, "n": k.n}
    return Result([], [], js, csv_text=buf.getvalue())


def run_bracket_moments(cfg: ExperimentConfig) -> Result:
    eps = [e for e in MOMENT_EPSILONS if e <= cfg.horizon]
    if len(eps) < 2:
        raise UsageError("--horizon: too short for the epsilon grid")
    wc = WalkConfig(level=cfg.level, horizon=max(eps), seed=cfg.seed, paths=cfg.paths)
    rep = estimate_moment([1, 2], [[(0.0, e)] for e in eps], None, wc)
    ests = []
    for i, e in enumerate(eps):
        for j, k in enumerate(rep.k):
            ests.append(Estimate(f"m{k:g}_eps{e:g}", rep.estimates[i, j], rep.stderr[i, j], rep.n))
    slope1, ratio = rep.slope(0), rep.ratio_slope(1, 0)
    js = {"epsilon": eps, "k": rep.k.tolist(), "estimates": rep.estimates.tolist(), "stderr": rep.stderr.tolist(),
          "slope_m1": slope1, "slope_m2_over_m1": ratio, "n": rep.n}
    return Result(["name", "value", "stderr", "n"], _est_rows(ests), js,
                  trailer=[("slope_m1", slope1), ("slope_m2_over_m1", ratio)])


def run_singularity(cfg: ExperimentConfig) -> Result:
    wc = WalkConfig(level=cfg.level, horizon=cfg.horizon, seed=cfg.seed, paths=cfg.paths)
    bins = SINGULARITY_BINS
    if wc.steps % bins:
        bins = math.gcd(wc.steps, SINGULARITY_BINS)
    curve = singularity_profile(bracket_bin_edges(wc, bins))
    top = top_share(curve)
    rows = [[i + 1, v] for i, v in enumerate(curve)]
    return Result(["bins", "cumulative_share"], rows,
                  {"bins": bins, "curve": curve.tolist(), "top_decile_share": top, "n": cfg.paths},
                  trailer=[("top_decile_share", top)])


def run_variation_orders(cfg: ExperimentConfig) -> Result:
    n = cfg.paths if "paths" in cfg.explicit else VARIATION_PATHS
    T = cfg.horizon if "horizon" in cfg.explicit else VARIATION_HORIZON
    # a spike shorter than one step is empty
    eps = [e for e in VARIATION_EPSILONS if 5.0 ** -cfg.level <= e <= T]
    if len(eps) < 2:
        raise UsageError("--level/--horizon: fewer than two epsilons resolvable on this grid")
    paths = sample_paths(WalkConfig(level=cfg.level, horizon=T, seed=cfg.seed, paths=n))
    zero, one = ControlPolicy.constant(0.0), ControlPolicy.constant(1.0)
    rep = variation_orders(smooth_test_coefficients(), zero, one, one, 1, eps, paths, 0.5)
    buf = io.StringIO()
    rep.write_csv(buf)
    slopes = {name: rep.slope(name) for name in ("xi", "xi_minus_y", "xi_minus_y_minus_z")}
    for name, s in slopes.items():
        buf.write(f"# slope_{name},{float(s)!r}\n")
    js = {"epsilon": rep.epsilon.tolist(), "kappa": rep.kappa, "n": n, "horizon": T,
          "T2": {k: {"value": v[0].tolist(), "stderr": v[1].tolist()} for k, v in rep.T.items()},
          "m1": {"value": rep.m1[0].tolist(), "stderr": rep.m1[1].tolist()},
          "correlation_xi_y": rep.correlation.tolist(), "slopes": slopes}
    return Result([], [], js, csv_text=buf.getvalue())


def run_regulator(cfg: ExperimentConfig) -> Result:
    rc = RegulatorConfig(a=cfg.a, level=cfg.level, paths=cfg.paths, seed=cfg.seed)
    rep = regulator_suite(rc)
    js = rep.to_json()
    rows = _est_rows([rep.theta0] + [Estimate(f"J_{k}", v.value, v.stderr, v.n) for k, v in rep.J.items()])
    trailer = [(f"check_{k}", v) for k, v in rep.checks.items()]
    return Result(["name", "value", "stderr", "n"], rows, js, trailer=trailer)


RUNNERS = {
    "geometry-audit": run_geometry_audit,
    "measures": run_measures,
    "kernel-slope": run_kernel_slope,
    "bracket-moments": run_bracket_moments,
    "singularity": run_singularity,
    "variation-orders": run_variation_orders,
    "regulator": run_regulator,
}


# ---------------------------------------------------------------------------
# runner


def _git_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(cfg: ExperimentConfig, status: int, wall: float, error: str | None) -> Path:
    path = Path(str(cfg.output_path()) + ".manifest.json")
    doc = {
        "config": cfg.echo(),
        "version": __version__,
        "git": _git_stamp(),
        "backend": _kernels.backend(),
        "wall_time_s": wall,
        "exit_status": status,
        "error": error,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run, write the result and the manifest, return the exit status."""
    t0 = time.perf_counter()
    status, error = 0, None
    try:
        _kernels.set_workers(cfg.workers)
        result = RUNNERS[cfg.experiment](cfg)
        out = cfg.output_path()
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="\n") as fh:
            fh.write(result.render(cfg.format))
    except (UsageError, ResourceLimitError) as exc:
        status, error = 2, str(exc)
    except (IntegrationBlowupError, AdmissibilityError, BasisDegeneracyError, CoverageError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        status, error = 1, f"{type(exc).__name__}: {exc}"
    write_manifest(cfg, status, time.perf_counter() - t0, error)
    if error:
        print(f"fractal-control: {error}", file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:  # argparse has printed usage
        return int(exc.code or 0)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        print(f"fractal-control: error: {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
