"""Command-line drivers for the library: problem generation, adaptive
reduction, Lyapunov solves, balanced truncation, frequency sweeps, and the
two-solver benchmark table.

Every run is described by an :class:`ExperimentConfig`, read from a JSON
file that mirrors the dataclass field-for-field; `--seed` overrides the
config seed in place.  All outputs land in `--out` (CSV with a fixed
"%.17e" float format, JSON with sorted keys, tensors in "T4 v1"), so a
fixed seed gives byte-identical files across runs on one platform.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 numerical breakdown.
"""

import argparse
import dataclasses
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from .btr import balanced_truncate
from .generators import gen_heat2d, gen_spdiags
from .krylov import BreakdownError, SingularFactorError
from .lyapunov import (
    SingularPencilError,
    save_solution,
    solve_lyapunov_classic,
    solve_lyapunov_rational,
)
from .mor import MLTISystem, adaptive_reduce, frequency_sweep
from .tensor4 import SingularOperatorError, read_t4, write_t4

__all__ = ["ExperimentConfig", "load_config", "main"]

# inverse-heavy rational schedule used for all Lyapunov-equation drivers;
# robust on both generator families (see the solver docs)
LYAP_SHIFTS = (0.0, 0.0, math.inf)

_PROBLEMS = ("spdiags", "heat2d", "file")
_METHODS = ("TRBA", "TRBL", "TCBL", "BT")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class NonConvergence(RuntimeError):
    """A solver returned without reaching its tolerance; outputs were
    still written."""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: problem instance, method, tolerances, grids.

    `shift_interval` seeds the adaptive shift search of the reduction
    methods; `freq_grid` is (omega_min, omega_max, count, log_spaced).
    `files` holds {"a": path, "b": path, "c": path} when problem is
    "file" and must be absent otherwise.
    """

    problem: str = "spdiags"
    N: int = 20
    K1: int = 3
    K2: int = 3
    method: str = "TRBL"
    m_max: int = 30
    eps: float = 1e-8
    dtol: float = 1e-12
    shift_interval: tuple = (-1e4, -1e-2)
    freq_grid: tuple = (1e-2, 1e2, 100, True)
    seed: int = 0
    files: dict = None

    def __post_init__(self):
        if self.problem not in _PROBLEMS:
            raise ConfigError("problem must be one of %s" % (_PROBLEMS,))
        if self.method not in _METHODS:
            raise ConfigError("method must be one of %s" % (_METHODS,))
        for name in ("N", "K1", "K2", "m_max"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError("%s must be a positive integer" % name)
        if self.N < 2:
            raise ConfigError("N must be at least 2")
        for name in ("eps", "dtol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 < v < math.inf):
                raise ConfigError("%s must be a positive finite number" % name)
        si = self.shift_interval
        if len(si) != 2 or not all(
            isinstance(v, (int, float)) and math.isfinite(v) and v != 0.0
            for v in si
        ):
            raise ConfigError("shift_interval needs two finite nonzero reals")
        fg = self.freq_grid
        if len(fg) != 4:
            raise ConfigError(
                "freq_grid must be (omega_min, omega_max, count, log_spaced)"
            )
        lo, hi, count, logf = fg
        if not (0.0 < lo < hi < math.inf):
            raise ConfigError("freq_grid needs 0 < omega_min < omega_max")
        if not isinstance(count, int) or count < 1:
            raise ConfigError("freq_grid count must be a positive integer")
        if not isinstance(logf, bool):
            raise ConfigError("freq_grid log_spaced must be a boolean")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.problem == "file":
            if not isinstance(self.files, dict) or set(self.files) != {
                "a",
                "b",
                "c",
            }:
                raise ConfigError(
                    'problem "file" needs files = {"a": ..., "b": ..., "c": ...}'
                )
        elif self.files is not None:
            raise ConfigError("files is only valid with problem \"file\"")


def _coerce(raw):
    # JSON arrays arrive as lists; the dataclass stores tuples
    out = dict(raw)
    for key in ("shift_interval", "freq_grid"):
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def load_config(path=None, seed=None):
    """ExperimentConfig from a JSON file (defaults when path is None).

    Unknown keys are rejected.  `seed` overrides the config value.
    Raises ConfigError on any invalid content.
    """
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc))
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    return _config_from_dict(raw, seed)


def _config_from_dict(raw, seed=None):
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError("unknown config keys: %s" % sorted(unknown))
    try:
        cfg = ExperimentConfig(**_coerce(raw))
    except TypeError as exc:
        raise ConfigError(str(exc))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg


def build_system(cfg):
    """Instantiate the configured problem as an MLTISystem."""
    if cfg.problem == "spdiags":
        return gen_spdiags(cfg.N, cfg.K1, cfg.K2, seed=cfg.seed)
    if cfg.problem == "heat2d":
        return gen_heat2d(cfg.N, cfg.K1, cfg.K2, seed=cfg.seed)
    try:
        a = read_t4(cfg.files["a"])
        b = read_t4(cfg.files["b"])
        c = read_t4(cfg.files["c"])
    except (OSError, ValueError) as exc:
        raise ConfigError("cannot read tensor files: %s" % exc)
    try:
        return MLTISystem(A=a, B=b, C=c)
    except ValueError as exc:
        raise ConfigError("file tensors are not a valid system: %s" % exc)


def _omegas(cfg):
    lo, hi, count, logf = cfg.freq_grid
    if logf:
        return np.logspace(math.log10(lo), math.log10(hi), count)
    return np.linspace(lo, hi, count)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return "%.17e" % value
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_table(out, stem, fmt, header, rows):
    if fmt == "json":
        payload = [dict(zip(header, row)) for row in rows]
        return _write_json(os.path.join(out, stem + ".json"), payload)
    return _write_csv(os.path.join(out, stem + ".csv"), header, rows)


def _sweep_rows(samples):
    return [
        (s.omega, s.norm_full, s.norm_reduced, s.error) for s in samples
    ]

_SWEEP_HEADER = ("omega", "norm_full", "norm_reduced", "error")


def _json_shifts(shifts):
    if shifts is None:
        return None
    return ["inf" if math.isinf(s) else float(s) for s in shifts]


def _clamped_m_max(cfg, sys):
    n = sys.A.data.shape[0]
    p = sys.B.data.shape[1]
    return max(min(cfg.m_max, n // p), 1)


def _reduction(cfg, sys, r):
    # shared by reduce/freqresp: BT truncates, TRBA/TRBL grow adaptively
    if cfg.method == "BT":
        bt = balanced_truncate(
            sys,
            r=r,
            eps=cfg.eps,
            dtol=cfg.dtol,
            m_max=_clamped_m_max(cfg, sys),
            shifts=LYAP_SHIFTS,
        )
        return bt.reduced, {"r": bt.r}, True
    if cfg.method not in ("TRBA", "TRBL"):
        raise ConfigError("method %s cannot build a reduction" % cfg.method)
    result = adaptive_reduce(
        sys,
        _clamped_m_max(cfg, sys),
        cfg.eps,
        method=cfg.method.lower(),
        interval=cfg.shift_interval,
        sweep_omegas=[],
    )
    info = {
        "m": len(result.shifts),
        "achieved_estimate": result.achieved,
        "shifts": _json_shifts(result.shifts),
    }
    return result.reduced, info, result.converged


def cmd_gen(cfg, args):
    sys_ = build_system(cfg)
    for name, tensor in (("a", sys_.A), ("b", sys_.B), ("c", sys_.C)):
        write_t4(os.path.join(args.out, name + ".t4"), tensor)
    return 0


def cmd_lyap(cfg, args):
    sys_ = build_system(cfg)
    m_max = _clamped_m_max(cfg, sys_)
    if cfg.method == "TCBL":
        sol = solve_lyapunov_classic(
            sys_.A, sys_.B, sys_.C, eps=cfg.eps, dtol=cfg.dtol, m_max=m_max
        )
    elif cfg.method == "TRBL":
        sol = solve_lyapunov_rational(
            sys_.A,
            sys_.B,
            sys_.C,
            eps=cfg.eps,
            dtol=cfg.dtol,
            m_max=m_max,
            shifts=LYAP_SHIFTS,
        )
    else:
        raise ConfigError("lyap supports methods TRBL and TCBL")
    save_solution(sol, os.path.join(args.out, "lyap"))
    if not sol.converged:
        raise NonConvergence(
            "residual bound %.3e above eps %.3e" % (sol.residual_bound, cfg.eps)
        )
    return 0


def cmd_reduce(cfg, args):
    sys_ = build_system(cfg)
    reduced, info, converged = _reduction(cfg, sys_, args.r)
    for name, tensor in (
        ("reduced_a", reduced.A_m),
        ("reduced_b", reduced.B_m),
        ("reduced_c", reduced.C_m),
    ):
        write_t4(os.path.join(args.out, name + ".t4"), tensor)
    info["method"] = cfg.method
    info["converged"] = converged
    _write_json(os.path.join(args.out, "reduce.json"), info)
    if not converged:
        raise NonConvergence("reduction stopped above its tolerance")
    return 0


def cmd_freqresp(cfg, args):
    # fixed-budget sampling: the reduction runs to its configured size and
    # the sweep is reported either way (reduction quality is visible in
    # the error column, not the exit code or a warning)
    sys_ = build_system(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        reduced, _, _ = _reduction(cfg, sys_, args.r)
    samples = frequency_sweep(sys_, reduced, _omegas(cfg))
    _write_table(
        args.out, "freqresp", args.format, _SWEEP_HEADER, _sweep_rows(samples)
    )
    return 0


def cmd_bt(cfg, args):
    sys_ = build_system(cfg)
    bt = balanced_truncate(
        sys_,
        r=args.r,
        eps=cfg.eps,
        dtol=cfg.dtol,
        m_max=_clamped_m_max(cfg, sys_),
        shifts=LYAP_SHIFTS,
    )
    for name, tensor in (
        ("bt_a", bt.reduced.A_m),
        ("bt_b", bt.reduced.B_m),
        ("bt_c", bt.reduced.C_m),
    ):
        write_t4(os.path.join(args.out, name + ".t4"), tensor)
    _write_table(
        args.out,
        "hankel",
        args.format,
        ("k", "sigma"),
        [(k + 1, float(s)) for k, s in enumerate(bt.hankel_values)],
    )
    samples = frequency_sweep(sys_, bt.reduced, _omegas(cfg))
    _write_table(
        args.out, "bt_sweep", args.format, _SWEEP_HEADER, _sweep_rows(samples)
    )
    defect = float(
        np.linalg.norm(bt.W_r.data.T @ bt.V_r.data - np.eye(bt.r))
    )
    _write_json(
        os.path.join(args.out, "bt.json"),
        {"r": bt.r, "projector_defect": defect},
    )
    return 0


def _bench_configs(args):
    if args.config is None:
        return [_config_from_dict({}, args.seed)]
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("cannot read config %s: %s" % (args.config, exc))
    entries = raw if isinstance(raw, list) else [raw]
    return [_config_from_dict(entry, args.seed) for entry in entries]


def _bench_case(cfg, timings):
    sys_ = build_system(cfg)
    m_max = _clamped_m_max(cfg, sys_)
    label = "%s(%d,%d,%d)" % (cfg.problem, cfg.N, cfg.K1, cfg.K2)
    rows = []
    for algorithm, solve in (
        ("TCBL", lambda: solve_lyapunov_classic(
            sys_.A, sys_.B, sys_.C, eps=cfg.eps, dtol=cfg.dtol, m_max=m_max
        )),
        ("TRBL", lambda: solve_lyapunov_rational(
            sys_.A, sys_.B, sys_.C, eps=cfg.eps, dtol=cfg.dtol, m_max=m_max,
            shifts=LYAP_SHIFTS,
        )),
    ):
        start = time.perf_counter()
        try:
            sol = solve()
            elapsed = time.perf_counter() - start
            it, res = sol.iterations, float(sol.residual_bound)
        except (
            BreakdownError,
            SingularFactorError,
            SingularOperatorError,
            SingularPencilError,
        ) as exc:
            elapsed = time.perf_counter() - start
            it = res = None
            print(
                "bench: %s %s failed: %s" % (label, algorithm, exc),
                file=sys.stderr,
            )
        rows.append(
            (label, algorithm, it, res, elapsed if timings == "wall" else None)
        )
    return rows


_BENCH_HEADER = ("case", "algorithm", "iter", "res", "time_s")


def _bench_text(rows):
    widths = [len(h) for h in _BENCH_HEADER]
    cells = []
    for row in rows:
        case, algorithm, it, res, time_s = row
        text = (
            case,
            algorithm,
            "-" if it is None else str(it),
            "-" if res is None else "%.3e" % res,
            "-" if time_s is None else "%.2f" % time_s,
        )
        cells.append(text)
        widths = [max(w, len(t)) for w, t in zip(widths, text)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(_BENCH_HEADER, widths)).rstrip()
    ]
    for text in cells:
        lines.append(
            "  ".join(t.ljust(w) for t, w in zip(text, widths)).rstrip()
        )
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    rows = []
    for cfg in _bench_configs(args):
        rows.extend(_bench_case(cfg, args.timings))
    payload = [dict(zip(_BENCH_HEADER, row)) for row in rows]
    _write_json(os.path.join(args.out, "bench.json"), payload)
    with open(os.path.join(args.out, "bench.txt"), "w") as fh:
        fh.write(_bench_text(rows))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="einmor",
        description="Tensor model reduction and Lyapunov solver drivers.",
    )
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument(
        "--format",
        choices=("csv", "json"),
        default="csv",
        help="tabular output format",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="write the configured system as T4 tensors")
    sub.add_parser("lyap", help="low-rank Lyapunov solve (TRBL or TCBL)")
    reduce_p = sub.add_parser("reduce", help="adaptive reduction or BT")
    freq_p = sub.add_parser("freqresp", help="frequency sweep of a reduction")
    bt_p = sub.add_parser("bt", help="balanced truncation outputs")
    for p in (reduce_p, freq_p, bt_p):
        p.add_argument(
            "--r",
            type=int,
            default=5,
            help="retained order for BT (default 5)",
        )
    bench_p = sub.add_parser("bench", help="two-solver benchmark table")
    bench_p.add_argument(
        "--timings",
        choices=("wall", "none"),
        default="wall",
        help="wall-clock column or blank (for byte-stable output)",
    )
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.command == "bench":
            return cmd_bench(args)
        cfg = load_config(args.config, args.seed)
        handler = {
            "gen": cmd_gen,
            "lyap": cmd_lyap,
            "reduce": cmd_reduce,
            "freqresp": cmd_freqresp,
            "bt": cmd_bt,
        }[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print("einmor: config error: %s" % exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print("einmor: invalid run: %s" % exc, file=sys.stderr)
        return 2
    except NonConvergence as exc:
        print("einmor: did not converge: %s" % exc, file=sys.stderr)
        return 3
    except (
        BreakdownError,
        SingularFactorError,
        SingularOperatorError,
        SingularPencilError,
    ) as exc:
        print("einmor: numerical breakdown: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
