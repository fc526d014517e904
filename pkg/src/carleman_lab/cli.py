"""Configuration-driven command line front end.

One config file describes one command run; sweeps are grids inside the
config. Results land in a single CSV per run whose leading ``#`` lines
carry the manifest (tool version, seed, config hash and echo, library
versions, wall time); everything below them is deterministic given
(config, seed). Output files are written atomically (temp file + rename).

Config format: flat INI sections of typed keys, e.g. ::

    [experiment]
    command = verify-carleman
    seed = 42

    [grid]
    L = 1.0
    N_list = 31 63 127

    [time]
    T = 1.0
    K = 128

    [weights]
    x_star = -0.75
    t0 = 0.5
    lambda_grid = 1 2
    s_grid = 2 4
    eps_cfg = 1.0

    [ensemble]
    M = 200

Exit status: 0 success, 1 validation or I/O failure, 2 numeric failure
(weight overflow / continuation non-convergence).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import __version__
from .errors import CarlemanLabError, ConfigError, ContinuationError, WeightOverflowError
from .carleman import DrivenNoiseFamily, carleman_sweep
from .cauchy import OscillatoryBoundaryFamily, holder_experiment
from .forward import SPDEProblem, ensemble_run
from .grid import DiscreteField, make_grid, verify_identities
from .inverse_source import generate_separable_pairs, uniformity_sweep

__all__ = ["ExperimentConfig", "parse_config", "serialize_config", "run", "main"]

COMMANDS = ("verify-identities", "simulate", "verify-carleman", "inverse-source", "cauchy")

# section -> key -> (python type, default); list-valued keys hold tuples
_SCHEMA = {
    "experiment": {"command": (str, None), "seed": (int, 0)},
    "grid": {"L": (float, 1.0), "N": (int, None), "N_list": ("int_list", None)},
    "time": {"T": (float, 1.0), "K": (int, None)},
    "weights": {
        "x_star": (float, None),
        "t0": (float, None),
        "beta": (float, None),
        "lambda_grid": ("float_list", (1.0,)),
        "s_grid": ("float_list", (2.0,)),
        "eps_cfg": (float, 1.0),
        "c_lambda": (float, 1.0),
        "suppress_terminal": (bool, True),
    },
    "ensemble": {"M": (int, 1)},
    "family": {
        "name": (str, None),
        "family_seed": (int, 7),
        "pairs": (int, 100),
        "scales": ("float_list", None),
        "x_left": (float, 0.5),
        "epsilon": (float, 0.05),
        "c_level": (float, 0.0),
    },
    "output": {"path": (str, None)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seed: int = 0
    L: float = 1.0
    n_list: tuple = ()
    T: float = 1.0
    K: int | None = None
    x_star: float | None = None
    t0: float | None = None
    beta: float | None = None
    lambda_grid: tuple = (1.0,)
    s_grid: tuple = (2.0,)
    eps_cfg: float = 1.0
    c_lambda: float = 1.0
    suppress_terminal: bool = True
    M: int = 1
    family_name: str | None = None
    family_seed: int = 7
    pairs: int = 100
    scales: tuple | None = None
    x_left: float = 0.5
    epsilon: float = 0.05
    c_level: float = 0.0
    out_path: str | None = None

    @property
    def h_list(self) -> tuple:
        return tuple(self.L / (n + 1) for n in self.n_list)

    def steps(self, N: int) -> int:
        if self.K is not None:
            return self.K
        h = self.L / (N + 1)
        return max(1, int(math.ceil(self.T / (h**2 / 4.0))))


def _parse_scalar(kind, raw, path, violations):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(tok) for tok in raw.split())
        if kind == "float_list":
            return tuple(float(tok) for tok in raw.split())
        return raw.strip()
    except ValueError:
        violations.append(f"{path}: cannot parse {raw!r} as {kind}")
        return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigError listing every violation."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (N vs n)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError([f"syntax: {err}"]) from err

    violations: list[str] = []
    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            violations.append(f"{section}: unknown section")
            continue
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                violations.append(f"{section}.{key}: unknown key")
                continue
            kind, _default = _SCHEMA[section][key]
            parsed = _parse_scalar(kind, raw, f"{section}.{key}", violations)
            if parsed is not None:
                values[f"{section}.{key}"] = parsed

    command = values.get("experiment.command")
    if command is None:
        violations.append("experiment.command: required")
    elif command not in COMMANDS:
        violations.append(f"experiment.command: {command!r} not one of {COMMANDS}")

    n_single = values.get("grid.N")
    n_list = values.get("grid.N_list")
    if n_single is not None and n_list is not None:
        violations.append("grid: give N or N_list, not both")
    n_tuple = tuple(n_list) if n_list else ((n_single,) if n_single is not None else ())
    if not n_tuple and command is not None:
        violations.append("grid.N: required (or grid.N_list)")
    for n in n_tuple:
        if n < 2:
            violations.append(f"grid.N: every entry must be >= 2, got {n}")

    cfg = ExperimentConfig(
        command=command or "",
        seed=values.get("experiment.seed", 0),
        L=values.get("grid.L", 1.0),
        n_list=n_tuple,
        T=values.get("time.T", 1.0),
        K=values.get("time.K"),
        x_star=values.get("weights.x_star"),
        t0=values.get("weights.t0"),
        beta=values.get("weights.beta"),
        lambda_grid=values.get("weights.lambda_grid", (1.0,)),
        s_grid=values.get("weights.s_grid", (2.0,)),
        eps_cfg=values.get("weights.eps_cfg", 1.0),
        c_lambda=values.get("weights.c_lambda", 1.0),
        suppress_terminal=values.get("weights.suppress_terminal", True),
        M=values.get("ensemble.M", 1),
        family_name=values.get("family.name"),
        family_seed=values.get("family.family_seed", 7),
        pairs=values.get("family.pairs", 100),
        scales=values.get("family.scales"),
        x_left=values.get("family.x_left", 0.5),
        epsilon=values.get("family.epsilon", 0.05),
        c_level=values.get("family.c_level", 0.0),
        out_path=values.get("output.path"),
    )
    violations.extend(_cross_validate(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def _cross_validate(cfg: ExperimentConfig) -> list[str]:
    out = []
    if cfg.L <= 0:
        out.append(f"grid.L: must be positive, got {cfg.L}")
    if cfg.T <= 0:
        out.append(f"time.T: must be positive, got {cfg.T}")
    if cfg.K is not None and cfg.K < 1:
        out.append(f"time.K: must be >= 1, got {cfg.K}")
    if cfg.M < 1:
        out.append(f"ensemble.M: must be >= 1, got {cfg.M}")
    if cfg.seed < 0 or cfg.seed >= 1 << 64:
        out.append("experiment.seed: must fit in 64 bits")
    if cfg.command == "verify-carleman" and cfg.n_list:
        h_min = min(cfg.h_list)
        bound = math.sqrt(cfg.eps_cfg / h_min)
        for i, s in enumerate(cfg.s_grid):
            if s > bound:
                out.append(
                    f"weights.s_grid[{i}]: s={s} exceeds the admissible window "
                    f"sqrt(eps_cfg/h_min) = {bound:.6g}"
                )
        if cfg.x_star is not None and 0.0 <= cfg.x_star <= cfg.L:
            out.append(f"weights.x_star: must lie outside [0, {cfg.L}]")
        for i, lam in enumerate(cfg.lambda_grid):
            if lam < 1.0:
                out.append(f"weights.lambda_grid[{i}]: lambda must be >= 1, got {lam}")
    if cfg.command == "cauchy":
        if not (0.0 < cfg.x_left < cfg.L):
            out.append(f"family.x_left: need 0 < x_left < L, got {cfg.x_left}")
        if not (0.0 < cfg.epsilon < cfg.T / 2.0):
            out.append(f"family.epsilon: need 0 < eps < T/2, got {cfg.epsilon}")
    if cfg.command == "inverse-source" and cfg.pairs < 1:
        out.append(f"family.pairs: must be >= 1, got {cfg.pairs}")
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(serialize(parse(t))) == parse(t)."""
    lines = ["[experiment]", f"command = {cfg.command}", f"seed = {cfg.seed}", ""]
    lines += ["[grid]", f"L = {_fmt(cfg.L)}"]
    if cfg.n_list:
        lines.append(f"N_list = {_fmt(cfg.n_list)}")
    lines.append("")
    lines += ["[time]", f"T = {_fmt(cfg.T)}"]
    if cfg.K is not None:
        lines.append(f"K = {cfg.K}")
    lines.append("")
    lines += ["[weights]"]
    for key, val in (
        ("x_star", cfg.x_star), ("t0", cfg.t0), ("beta", cfg.beta),
        ("lambda_grid", cfg.lambda_grid), ("s_grid", cfg.s_grid),
        ("eps_cfg", cfg.eps_cfg), ("c_lambda", cfg.c_lambda),
        ("suppress_terminal", cfg.suppress_terminal),
    ):
        if val is not None:
            lines.append(f"{key} = {_fmt(val)}")
    lines.append("")
    lines += ["[ensemble]", f"M = {cfg.M}", ""]
    lines += ["[family]"]
    for key, val in (
        ("name", cfg.family_name), ("family_seed", cfg.family_seed),
        ("pairs", cfg.pairs), ("scales", cfg.scales),
        ("x_left", cfg.x_left), ("epsilon", cfg.epsilon), ("c_level", cfg.c_level),
    ):
        if val is not None:
            lines.append(f"{key} = {_fmt(val)}")
    lines.append("")
    if cfg.out_path is not None:
        lines += ["[output]", f"path = {cfg.out_path}", ""]
    return "\n".join(lines)


# -- command implementations ---------------------------------------------------

def _rows_verify_identities(cfg: ExperimentConfig):
    header = ["N", "identity", "max_residual", "n_pairs"]
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for N in cfg.n_list:
        grid = make_grid(cfg.L, N)
        worst: dict[str, float] = {}
        for _ in range(cfg.pairs):
            u = DiscreteField(grid, rng.standard_normal(N + 2))
            v_vals = rng.standard_normal(N + 2)
            v_vals[0] = v_vals[-1] = 0.0
            report = verify_identities(u, DiscreteField(grid, v_vals))
            for name, res in report.residuals.items():
                worst[name] = max(worst.get(name, 0.0), res)
        for name in sorted(worst):
            rows.append([N, name, worst[name], cfg.pairs])
    return header, rows


def _rows_simulate(cfg: ExperimentConfig, threads):
    header = ["N", "level", "t", "l2_mean", "l2_std_error"]
    rows = []
    for N in cfg.n_list:
        grid = make_grid(cfg.L, N)
        K = cfg.steps(N)
        family = DrivenNoiseFamily(seed=cfg.family_seed)
        problem, _f, _g = family.build(grid, cfg.T, K)
        e = ensemble_run(problem, cfg.M, cfg.seed, parallel=threads > 1, num_threads=threads)
        l2 = np.sqrt(grid.h * (e.solutions[:, :, 1:-1] ** 2).sum(axis=2))  # (M, K+1)
        mean = l2.mean(axis=0)
        se = l2.std(axis=0, ddof=1) / math.sqrt(cfg.M) if cfg.M > 1 else None
        for n, t in enumerate(e.times):
            rows.append([N, n, float(t), float(mean[n]), None if se is None else float(se[n])])
    return header, rows


def _rows_verify_carleman(cfg: ExperimentConfig, threads):
    result = carleman_sweep(
        cfg.s_grid,
        cfg.lambda_grid,
        cfg.h_list,
        cfg.M,
        cfg.eps_cfg,
        L=cfg.L,
        T=cfg.T,
        K=cfg.K or 128,
        master_seed=cfg.seed,
        family=DrivenNoiseFamily(seed=cfg.family_seed),
        x_star=cfg.x_star,
        t0=cfg.t0,
        beta=cfg.beta,
        suppress_terminal=cfg.suppress_terminal,
        c_lambda=cfg.c_lambda,
        parallel=threads > 1,
        num_threads=threads,
    )
    header = [
        "kind", "h", "lambda", "s", "beta", "M",
        "lhs_lap", "lhs_grad", "lhs_value", "lhs_noise",
        "rhs_source", "rhs_noise_grad", "rhs_flux", "rhs_terminal",
        "lhs_total", "rhs_total", "ratio", "ratio_std_error",
        "degenerate", "flags", "reason",
    ]
    rows = []
    for rep in result.reports:
        rows.append([
            "report", rep.h, rep.lam, rep.s, rep.beta, rep.M,
            *rep.lhs.values, *rep.rhs.values[:4],
            rep.lhs.total, rep.rhs.total, rep.ratio, rep.ratio_std_error,
            rep.degenerate, ";".join(rep.flags), None,
        ])
    for cell in result.skipped:
        rows.append([
            "skipped", cell.h, cell.lam, cell.s, None, cfg.M,
            *[None] * 12, None, None, cell.reason,
        ])
    for h in sorted(result.max_ratio_by_h):
        rows.append([
            "max-ratio", h, None, None, None, cfg.M,
            *[None] * 10, result.max_ratio_by_h[h], None, None, None, None,
        ])
    return header, rows


def _rows_inverse_source(cfg: ExperimentConfig, threads):
    pair_specs = generate_separable_pairs(cfg.pairs, cfg.family_seed, L=cfg.L, T=cfg.T)
    result = uniformity_sweep(
        cfg.h_list,
        pair_specs,
        cfg.M,
        L=cfg.L,
        T=cfg.T,
        K=cfg.K or 128,
        master_seed=cfg.seed,
        parallel=threads > 1,
        num_threads=threads,
    )
    header = [
        "kind", "h", "pair", "source_gap", "flux_gap", "terminal_gap",
        "data_gap", "data_std_error", "ratio", "flag", "verdict",
    ]
    rows = []
    for h in sorted(result.records):
        for i, rec in enumerate(result.records[h]):
            rows.append([
                "record", h, f"pair-{i}", rec.source_gap, rec.flux_gap,
                rec.terminal_gap, rec.data_gap, rec.data_std_error,
                rec.ratio, rec.flag, None,
            ])
    for h in sorted(result.max_ratio_by_h):
        rows.append([
            "max-ratio", h, None, None, None, None, None, None,
            result.max_ratio_by_h[h], None, None,
        ])
    rows.append(["verdict", None, None, None, None, None, None, None, None, None,
                 result.verdict or ""])
    return header, rows


def _rows_cauchy(cfg: ExperimentConfig, threads):
    if not cfg.scales:
        raise ConfigError(["family.scales: required for the cauchy command"])
    header = [
        "kind", "h", "scale", "data_norm", "interior_norm", "m_bound",
        "kappa", "r_squared", "beta", "n_level", "n_tiles",
    ]
    rows = []
    family = OscillatoryBoundaryFamily(c_level=cfg.c_level)
    for N in cfg.n_list:
        grid = make_grid(cfg.L, N)
        records, fit = holder_experiment(
            family, cfg.scales, grid, cfg.T, cfg.K or 256, cfg.M, cfg.seed,
            x_left=cfg.x_left, epsilon=cfg.epsilon,
            parallel=threads > 1, num_threads=threads,
        )
        for rec in records:
            rows.append([
                "record", rec.h, rec.scale, rec.data_norm, rec.interior_norm,
                rec.m_bound, rec.kappa, rec.r_squared, rec.beta, rec.n_level,
                len(rec.t0_tiles),
            ])
        if fit is not None:
            rows.append([
                "fit", grid.h, None, None, None, None, fit.kappa,
                fit.r_squared, None, None, None,
            ])
    return header, rows


_DISPATCH = {
    "verify-identities": lambda cfg, threads: _rows_verify_identities(cfg),
    "simulate": _rows_simulate,
    "verify-carleman": _rows_verify_carleman,
    "inverse-source": _rows_inverse_source,
    "cauchy": _rows_cauchy,
}


def run(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> int:
    """Execute one validated config; returns the process exit code."""
    started = time.monotonic()
    try:
        header, rows = _DISPATCH[cfg.command](cfg, threads)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 1
    except (WeightOverflowError, ContinuationError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except CarlemanLabError as err:
        print(err, file=sys.stderr)
        return 1

    body = io.StringIO()
    writer = csv.writer(body, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])

    config_text = serialize_config(cfg)
    digest = hashlib.sha256(config_text.encode()).hexdigest()
    manifest = [
        f"# carleman-lab {__version__}",
        f"# command={cfg.command}",
        f"# seed={cfg.seed}",
        f"# config-sha256={digest}",
        f"# numpy={np.__version__}",
        f"# python={sys.version.split()[0]}",
        f"# wall-seconds={time.monotonic() - started:.3f}",
        "# config-begin",
        *(f"# {line}" for line in config_text.splitlines()),
        "# config-end",
    ]
    text = "\n".join(manifest) + "\n" + body.getvalue()

    target_dir = out_dir or cfg.out_path or "."
    try:
        os.makedirs(target_dir, exist_ok=True)
        final = os.path.join(target_dir, f"{cfg.command}.csv")
        fd, tmp = tempfile.mkstemp(dir=target_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, final)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as err:
        print(f"cannot write results: {err}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="carleman-lab")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the INI config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument(
        "--threads", type=int, default=None,
        help="worker threads (fallback: CARLEMAN_LAB_THREADS, then 1)",
    )
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(text)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 1
    if cfg.command != args.command:
        print(
            f"config declares command {cfg.command!r} but {args.command!r} was requested",
            file=sys.stderr,
        )
        return 1
    if args.seed is not None:
        if not (0 <= args.seed < 1 << 64):
            print("--seed must fit in 64 bits", file=sys.stderr)
            return 1
        cfg = replace(cfg, seed=args.seed)
    threads = args.threads
    if threads is None:
        env = os.environ.get("CARLEMAN_LAB_THREADS")
        threads = int(env) if env else 1
    return run(cfg, out_dir=args.out, threads=max(1, threads))


if __name__ == "__main__":
    raise SystemExit(main())
