"""Batch front-end: config-driven solve, study, green-check, noise-check.

Configuration is a flat key=value text file ('#' starts a comment); every
key is schema-typed and unknown keys are rejected before any computation.
--set key=value overrides entries, --seed/--threads/--out override the
corresponding keys.  Results are CSV files plus a rendered PNG next to
each one; everything is written to a temporary file and renamed, so a
failed run leaves no partial outputs.

Exit codes: 0 success, 2 configuration error, 3 stability rejection,
4 numerical abort.  SPDE_LAB_LOG in {error, info, debug} controls the
'spde_lab' logger.
"""

import argparse
import csv
import logging
import math
import os
import sys
import tempfile

import numpy as np

from .green import (DEFAULT_SPACE_LADDER, DEFAULT_TIME_LADDER,
                    DEFAULT_TIME_N, rate_check_space, rate_check_time,
                    save_rate_csv)
from .lattice import DIRICHLET, NEUMANN, GridSpec
from .noise import FactorizationError, NoiseModel, build_covariance
from .schemes import (DEFAULT_CFL, EXPLICIT, IMPLICIT, CoefficientSet,
                      InitialCondition, SchemeOverflowError, SchemeRun,
                      StabilityError, run)
from .study import SPACE, TIME, StudyAbortError, StudyPlan, run_study

logger = logging.getLogger("spde_lab")


class ConfigError(ValueError):
    """Schema violation or invalid value in the run configuration."""


def _int_list(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def _float_list(text):
    return tuple(float(p) for p in text.split(",") if p.strip())


# key -> (parser, default); choice tuples list the admissible strings
_SCHEMA = {
    "grid.d": (int, 1),
    "grid.n": (int, 16),
    "grid.m": (int, 256),
    "grid.T": (float, 1.0),
    "grid.bc": ((DIRICHLET, NEUMANN), DIRICHLET),
    "noise.kind": (("none", "white", "riesz"), "none"),
    "noise.alpha": (float, 0.5),
    "sigma.family": (("constant", "affine", "cosine"), "constant"),
    "sigma.a": (float, 0.0),
    "sigma.b": (float, 0.0),
    "sigma.c": (float, 1.0),
    "b.family": (("constant", "affine", "cosine"), "constant"),
    "b.a": (float, 0.0),
    "b.b": (float, 0.0),
    "b.c": (float, 0.0),
    "initial.family": (("zero", "sine_product", "bump", "table"), "zero"),
    "initial.values": (_float_list, None),
    "scheme.kind": ((IMPLICIT, EXPLICIT), IMPLICIT),
    "scheme.q": (float, DEFAULT_CFL),
    "run.record": (str, "all"),
    "study.axis": ((TIME, SPACE), TIME),
    "study.divisors": (_int_list, None),
    "study.replicas": (int, 100),
    "study.tstar": (float, None),
    "study.xstar": (_float_list, None),
    "greencheck.kind": (("space", "time"), "space"),
    "greencheck.meshes": (_int_list, None),
    "greencheck.n": (int, DEFAULT_TIME_N),
    "noisecheck.samples": (int, 20000),
    "seed": (int, 0),
    "threads": (int, None),
    "output": (str, "."),
}


def _parse_entry(key, text):
    if key not in _SCHEMA:
        raise ConfigError("unknown configuration key %r" % key)
    kind = _SCHEMA[key][0]
    if isinstance(kind, tuple):
        if text not in kind:
            raise ConfigError("%s must be one of %s, got %r"
                              % (key, "/".join(kind), text))
        return text
    try:
        return kind(text)
    except ValueError:
        raise ConfigError("%s expects a %s value, got %r"
                          % (key, kind.__name__, text)) from None


class RunConfig:
    """Schema-validated flat configuration with per-key defaults."""

    def __init__(self, values=None):
        self.values = dict(values or {})
        for key in self.values:
            if key not in _SCHEMA:
                raise ConfigError("unknown configuration key %r" % key)

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("line %d is not 'key = value': %r"
                                  % (lineno, raw.strip()))
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in values:
                raise ConfigError("duplicate key %r (line %d)"
                                  % (key, lineno))
            values[key] = _parse_entry(key, val)
        return cls(values)

    def set(self, key, text):
        self.values[key] = _parse_entry(key, text)

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        return _SCHEMA[key][1]

    def is_set(self, key):
        return key in self.values


def _grid(cfg):
    return GridSpec(cfg["grid.d"], cfg["grid.n"], cfg["grid.m"],
                    cfg["grid.T"], cfg["grid.bc"])


def _noise(cfg):
    kind = cfg["noise.kind"]
    if kind == "none":
        return None
    if kind == "white":
        return NoiseModel("white", cfg["grid.d"])
    return NoiseModel("riesz", cfg["grid.d"], cfg["noise.alpha"])


def _coefficient(cfg, section):
    family = cfg[section + ".family"]
    if family == "constant":
        return ("constant", cfg[section + ".c"])
    return (family, cfg[section + ".a"], cfg[section + ".b"])


def _coefficients(cfg):
    return CoefficientSet(_coefficient(cfg, "sigma"), _coefficient(cfg, "b"))


def _initial(cfg):
    family = cfg["initial.family"]
    if family == "table":
        values = cfg["initial.values"]
        if values is None:
            raise ConfigError("initial.family=table requires initial.values")
        return InitialCondition("table", np.asarray(values, dtype=float))
    return InitialCondition(family)


def _recorded(cfg, m):
    text = cfg["run.record"]
    if text == "all":
        return None
    if text == "final":
        return [m]
    try:
        return list(_int_list(text))
    except ValueError:
        raise ConfigError("run.record must be 'all', 'final', or "
                          "comma-separated levels, got %r" % text) from None


# --- output helpers ------------------------------------------------------


def _atomic(path, write):
    """Run write(tmp_path) then rename into place; suffix is preserved so
    format-sniffing writers (PNG) still work."""
    directory = os.path.dirname(path) or "."
    suffix = os.path.splitext(path)[1]
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=suffix)
    os.close(fd)
    try:
        write(tmp)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_figure(path, draw):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        draw(ax)
        fig.tight_layout()
        _atomic(path, lambda tmp: fig.savefig(tmp, dpi=120))
    finally:
        plt.close(fig)


# --- subcommands -----------------------------------------------------------


def cmd_solve(cfg, outdir, threads):
    grid = _grid(cfg)
    scheme = SchemeRun(grid, _coefficients(cfg), _initial(cfg),
                       noise_model=_noise(cfg), kind=cfg["scheme.kind"],
                       seed=cfg["seed"], recorded_levels=_recorded(cfg, grid.m),
                       q=cfg["scheme.q"])
    logger.info("solving: d=%d n=%d m=%d bc=%s kind=%s",
                grid.d, grid.n, grid.m, grid.bc, cfg["scheme.kind"])
    traj = run(scheme)
    csv_path = os.path.join(outdir, "trajectory.csv")
    bin_path = os.path.join(outdir, "trajectory.bin")
    _atomic(csv_path, traj.save_csv)
    _atomic(bin_path, traj.save_binary)
    sups = traj.sup_norms()

    def draw(ax):
        ts = [lv * grid.dt for lv, _ in sups]
        ax.plot(ts, [s for _, s in sups], marker=".")
        ax.set_xlabel("t")
        ax.set_ylabel("sup |u|")
        ax.set_title("sup-norm per recorded level")

    _save_figure(os.path.join(outdir, "solve.png"), draw)
    for lv, s in sups:
        print("level %d  t=%-10.6g  sup=%.10g" % (lv, lv * grid.dt, s))
    print("wrote %s, %s" % (csv_path, bin_path))
    return 0


def _study_plan(cfg):
    grid = _grid(cfg)
    divisors = cfg["study.divisors"]
    if divisors is None:
        raise ConfigError("study.divisors is required for the study command")
    tstar = cfg["study.tstar"] if cfg.is_set("study.tstar") else grid.T
    return StudyPlan(cfg["study.axis"], grid, divisors,
                     cfg["study.replicas"], _coefficients(cfg),
                     _initial(cfg), noise=_noise(cfg),
                     kind=cfg["scheme.kind"], tstar=tstar,
                     xstar=cfg["study.xstar"], seed=cfg["seed"],
                     q=cfg["scheme.q"])


def cmd_study(cfg, outdir, threads):
    plan = _study_plan(cfg)
    logger.info("study: axis=%s divisors=%s replicas=%d threads=%d",
                plan.axis, plan.divisors, plan.replicas, threads)
    report = run_study(plan, threads=threads)

    def write_report(tmp):
        report.to_csv(tmp)
        with open(tmp, "a", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([report.axis, report.alpha_or_white, "summary",
                        "", "", "", "",
                        repr(report.slope_mid), repr(report.slope_sup),
                        repr(report.slope_stddev),
                        repr(report.theory_exponent), report.replicas,
                        report.aborted, report.seed])

    csv_path = os.path.join(outdir, "study.csv")
    _atomic(csv_path, write_report)

    def write_points(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ln_mesh", "ln_error_mid", "ln_error_sup"])
            for mesh, e_mid, e_sup in zip(report.meshes, report.error_mid,
                                          report.error_sup):
                w.writerow([repr(math.log(mesh)), repr(math.log(e_mid)),
                            repr(math.log(e_sup))])

    points_path = os.path.join(outdir, "study_points.csv")
    _atomic(points_path, write_points)

    def draw(ax):
        ms = np.asarray(report.meshes, dtype=float)
        ax.loglog(ms, report.error_mid, "o-", label="error_mid")
        ax.loglog(ms, report.error_sup, "s--", label="error_sup")
        fit = np.exp(report.intercept_mid) * ms ** -report.slope_mid
        ax.loglog(ms, fit, ":", label="fit slope %.3f" % report.slope_mid)
        ax.set_xlabel("mesh")
        ax.set_ylabel("squared error")
        ax.legend()
        ax.set_title("%s-axis convergence (%s noise)"
                     % (report.axis, report.alpha_or_white))

    _save_figure(os.path.join(outdir, "study.png"), draw)
    print("slope_mid=%.6g  slope_sup=%.6g  stddev=%.3g  theory=%.6g  "
          "replicas=%d aborted=%d"
          % (report.slope_mid, report.slope_sup, report.slope_stddev,
             report.theory_exponent, report.replicas, report.aborted))
    print("wrote %s, %s" % (csv_path, points_path))
    return 0


def cmd_green_check(cfg, outdir, threads):
    alpha = cfg["noise.alpha"]
    kind = cfg["greencheck.kind"]
    meshes = cfg["greencheck.meshes"]
    if kind == "space":
        results = [rate_check_space(alpha, meshes or DEFAULT_SPACE_LADDER)]
    else:
        results = rate_check_time(alpha, meshes or DEFAULT_TIME_LADDER,
                                  n=cfg["greencheck.n"])
    csv_path = os.path.join(outdir, "green_check.csv")
    _atomic(csv_path, lambda tmp: save_rate_csv(results, tmp))

    def draw(ax):
        for res in results:
            ms = np.asarray(res.meshes, dtype=float)
            ax.loglog(ms, res.values, "o-", label="%s slope %.3f"
                      % (res.kind, res.slope))
            guide = res.values[0] * (ms / ms[0]) ** res.target_slope
            ax.loglog(ms, guide, ":",
                      label="target slope %.3f" % res.target_slope)
        ax.set_xlabel("mesh")
        ax.set_ylabel("kernel distance integral")
        ax.legend()
        ax.set_title("kernel approximation rate, alpha=%g" % alpha)

    _save_figure(os.path.join(outdir, "green_check.png"), draw)
    for res in results:
        print("%s: slope=%.6g target=%.6g" % (res.kind, res.slope,
                                              res.target_slope))
    print("wrote %s" % csv_path)
    return 0


def cmd_noise_check(cfg, outdir, threads):
    noise = _noise(cfg)
    if noise is None:
        raise ConfigError("noise-check needs noise.kind = white or riesz")
    grid = _grid(cfg)
    samples = cfg["noisecheck.samples"]
    if samples < 2:
        raise ConfigError("noisecheck.samples must be at least 2")
    factor = build_covariance(noise, grid)
    target = factor.C
    rng = np.random.default_rng(cfg["seed"])
    draws = rng.standard_normal((samples, factor.rank)) @ factor.L.T
    empirical = draws.T @ draws / samples
    variances = np.diag(target)
    se = np.sqrt((np.outer(variances, variances) + target ** 2) / samples)
    deviation = np.abs(empirical - target) / np.maximum(se, 1e-300)

    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "target", "empirical", "stderr",
                        "deviation_se"])
            K = target.shape[0]
            for i in range(K):
                for j in range(K):
                    w.writerow([i + 1, j + 1, repr(float(target[i, j])),
                                repr(float(empirical[i, j])),
                                repr(float(se[i, j])),
                                repr(float(deviation[i, j]))])

    csv_path = os.path.join(outdir, "noise_check.csv")
    _atomic(csv_path, write)

    def draw(ax):
        im = ax.imshow(deviation, origin="lower")
        ax.figure.colorbar(im, ax=ax, label="|deviation| / SE")
        ax.set_xlabel("cell")
        ax.set_ylabel("cell")
        ax.set_title("covariance deviation, %d samples" % samples)

    _save_figure(os.path.join(outdir, "noise_check.png"), draw)
    print("max deviation = %.4g standard errors (%d samples, %d cells)"
          % (deviation.max(), samples, target.shape[0]))
    print("wrote %s" % csv_path)
    return 0


_COMMANDS = {
    "solve": cmd_solve,
    "study": cmd_study,
    "green-check": cmd_green_check,
    "noise-check": cmd_noise_check,
}


def _setup_logging():
    level_name = os.environ.get("SPDE_LAB_LOG", "error")
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError("SPDE_LAB_LOG must be one of error/info/debug, "
                          "got %r" % level_name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(levels[level_name])


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="spde-lab",
        description="Finite-difference runs and convergence studies for "
                    "the stochastic heat equation on [0,1]^d.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH",
                       help="key=value configuration file")
        p.add_argument("--set", metavar="K=V", action="append", default=[],
                       dest="overrides", help="override one config entry")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (default: config 'output')")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.config is not None:
            with open(args.config) as fh:
                cfg = RunConfig.from_text(fh.read())
        else:
            cfg = RunConfig()
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError("--set expects key=value, got %r" % item)
            key, _, val = item.partition("=")
            cfg.set(key.strip(), val.strip())
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        if args.threads is not None:
            cfg.set("threads", str(args.threads))
        threads = cfg["threads"]
        if threads is None:
            threads = os.cpu_count() or 1
        if threads < 1:
            raise ConfigError("threads must be at least 1")
        outdir = args.out if args.out is not None else cfg["output"]
        os.makedirs(outdir, exist_ok=True)
        return _COMMANDS[args.command](cfg, outdir, threads)
    except StabilityError as exc:
        print("stability rejection: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except (SchemeOverflowError, StudyAbortError, FactorizationError) as exc:
        print("numerical abort: %s" % exc, file=sys.stderr)
        return 4


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
