"""Command line entry point: ``pucci-kac solve <config> [--threads K]
[--print-defaults] [--study knob=a,b,c]``.

Exit status 0 on success, 2 when a grid solver did not converge, 1 on
input errors.  Numba is imported only after the thread count is known.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
THREADS_ENV = "PUCCI_KAC_THREADS"
STUDY_KNOBS = ("dt", "h", "n_paths")


def analytic_value(spec, x) -> float | None:
    """Closed form for a ball with constant ``f = c`` and ``g = g0``.

    ``g0 + c (R^2 - |x - x0|^2) / (a N)`` with ``a = lam`` for ``c > 0``
    (the solution is concave) and ``a = Lam`` for ``c < 0``.
    """
    import numpy as np

    if spec.domain.kind != "ball" or not (spec.f.is_constant and spec.g.is_constant):
        return None
    c = float(spec.f(spec.domain.center))
    g0 = float(spec.g(spec.domain.center))
    x = np.asarray(x, dtype=float)
    r2 = float(np.sum((x - spec.domain.center) ** 2))
    R = spec.domain.inradius
    if r2 > R * R:
        return None
    a = spec.lam if c > 0 else spec.Lam
    return g0 + c * (R * R - r2) / (a * spec.dim)


@dataclass
class Row:
    point: tuple[float, ...]
    estimate: float
    err: float
    solver: str
    seed: int
    runtime_ms: float


@dataclass
class Outcome:
    rows: list[Row] = field(default_factory=list)
    grids: dict = field(default_factory=dict)
    report: list[str] = field(default_factory=list)
    converged: bool = True


def _controls(spec, cfg):
    from .symmat import enumerate_controls

    return enumerate_controls(spec.dim, spec.lam, spec.Lam, cfg.angles, cfg.levels)


def _run_dpp(spec, cfg, out: Outcome):
    from . import dpp_solver
    from .grid import build_grid

    t0 = time.perf_counter()
    grid = build_grid(spec.domain, spec.g, cfg.h)
    controls = _controls(spec, cfg)
    tol = cfg.resolved_tol(spec)
    sol, rep = dpp_solver.solve(grid, controls, spec.f, cfg.resolved_dt_dpp(spec), tol, cfg.max_iter,
                                method=cfg.method)
    ms = 1e3 * (time.perf_counter() - t0)
    out.converged &= rep.converged
    out.grids["dpp_grid"] = sol
    for p in cfg.eval_points:
        out.rows.append(Row(p, sol.value_at(p), tol, "dpp_grid", cfg.seed, ms))
    out.report.append(f"dpp_grid: h={cfg.h} dt_dpp={rep.dt_dpp:.6g} controls={len(controls)} "
                      f"method={rep.method} iterations={rep.iterations} final_residual={rep.final_residual:.3e} "
                      f"converged={rep.converged}")
    return sol, controls


def _run_fd(spec, cfg, out: Outcome, grid=None):
    from . import fd_oracle
    from .grid import build_grid

    t0 = time.perf_counter()
    grid = grid if grid is not None else build_grid(spec.domain, spec.g, cfg.h)
    tol = cfg.resolved_tol(spec)
    sol, rep = fd_oracle.solve_policy_iteration(spec.domain, spec.f, spec.g, cfg.h, cfg.fd_angles, tol,
                                                min(cfg.max_iter, 1000), lam=spec.lam, Lam=spec.Lam,
                                                W=cfg.fd_radius, grid=grid)
    ms = 1e3 * (time.perf_counter() - t0)
    out.converged &= rep.converged
    out.grids["fd_oracle"] = sol
    for p in cfg.eval_points:
        out.rows.append(Row(p, sol.value_at(p), tol, "fd_oracle", cfg.seed, ms))
    out.report.append(f"fd_oracle: h={cfg.h} K={cfg.fd_angles} W={cfg.fd_radius} iterations={rep.iterations} "
                      f"final_residual={rep.final_residual:.3e} converged={rep.converged}")
    return sol


def _fixed_policy(spec, cfg):
    import numpy as np

    from .simulate import Policy
    from .symmat import Control, SymMatrix, sqrt_factor

    n = spec.dim
    if cfg.control == "lam":
        return Policy.constant(Control.from_sigma(math.sqrt(spec.lam) * np.eye(n)))
    if cfg.control == "Lam":
        return Policy.constant(Control.from_sigma(math.sqrt(spec.Lam) * np.eye(n)))
    a = np.array([float(t) for t in cfg.control.split(",")]).reshape(n, n)
    ctrl = sqrt_factor(SymMatrix.from_array(a))
    ctrl.check(spec.lam, spec.Lam)
    return Policy.constant(ctrl)


def _run_mc(spec, cfg, out: Outcome):
    from .simulate import PathConfig, estimate_value

    pcfg = PathConfig(cfg.dt, cfg.resolved_max_time(spec), cfg.seed, cfg.exit_refinement)
    if cfg.control == "policy":
        from . import dpp_solver

        grid, controls = _run_dpp(spec, cfg, out)
        policy = dpp_solver.extract_policy(grid, controls)
    else:
        policy = _fixed_policy(spec, cfg)
        grid = None
    for p in cfg.eval_points:
        t0 = time.perf_counter()
        est = estimate_value(p, policy, spec.domain, spec.f, spec.g, cfg.n_paths, pcfg)
        ms = 1e3 * (time.perf_counter() - t0)
        out.rows.append(Row(p, est.mean, est.stderr, "mc_fixed_control", cfg.seed, ms))
        line = (f"mc_fixed_control at {_pt(p)}: mean={est.mean:.6f} stderr={est.stderr:.2e} "
                f"censor_rate={est.censor_rate:.4f} control={cfg.control} dt={cfg.dt} n_paths={cfg.n_paths}")
        if est.warning:
            line += f" WARNING: {est.warning}"
        if grid is not None:
            line += f" grid_value={grid.value_at(p):.6f} gap={grid.value_at(p) - est.mean:+.3e}"
        out.report.append(line)


def _pt(p) -> str:
    return "(" + ", ".join(f"{c:g}" for c in p) + ")"


def run(spec, cfg, out_dir: str | os.PathLike | None = None, threads: int | None = None) -> int:
    """Run the configured solver(s) and write ``values.csv``, ``grid.csv``
    (grid solvers) and ``report.txt`` into the output directory."""
    from .grid import GridError

    out_dir = Path(out_dir if out_dir is not None else cfg.output)
    out = Outcome()
    try:
        if cfg.solver == "dpp_grid":
            _run_dpp(spec, cfg, out)
        elif cfg.solver == "fd_oracle":
            _run_fd(spec, cfg, out)
        elif cfg.solver == "mc_fixed_control":
            _run_mc(spec, cfg, out)
        else:
            grid, _ = _run_dpp(spec, cfg, out)
            _run_fd(spec, cfg, out)
            _cross_report(spec, cfg, out)
    except (GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for p in cfg.eval_points:
        ref = analytic_value(spec, p)
        if ref is not None:
            out.report.append(f"analytic value at {_pt(p)}: {ref:.6f}")
    if threads is not None:
        out.report.append(f"threads: {threads}")
    write_outputs(out_dir, spec, cfg, out)
    return EXIT_OK if out.converged else EXIT_NONCONVERGED


def _cross_report(spec, cfg, out: Outcome):
    import numpy as np

    a, b = out.grids["dpp_grid"], out.grids["fd_oracle"]
    idx = a.interior
    diff = float(np.max(np.abs(a.values[idx] - b.values[idx]))) if idx.size else 0.0
    ell = spec.ell_estimate
    out.report.append(f"cross_check: max |u_dpp - u_fd| over interior nodes = {diff:.3e} "
                      f"(ell = {ell:.4g}, ratio = {diff / ell if ell > 0 else float('nan'):.3e})")
    for p in cfg.eval_points:
        ud, uf = a.value_at(p), b.value_at(p)
        line = f"cross_check at {_pt(p)}: dpp={ud:.6f} fd={uf:.6f} |dpp-fd|={abs(ud - uf):.3e}"
        ref = analytic_value(spec, p)
        if ref is not None:
            line += f" |dpp-exact|={abs(ud - ref):.3e} |fd-exact|={abs(uf - ref):.3e}"
        out.report.append(line)


def write_outputs(out_dir: Path, spec, cfg, out: Outcome) -> None:
    from .config import dump_config

    out_dir.mkdir(parents=True, exist_ok=True)
    inline = cfg.timing == "inline"
    coords = [f"x{i + 1}" for i in range(spec.dim)]
    with open(out_dir / "values.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coords + ["estimate", "stderr_or_tol", "solver", "seed"] + (["runtime_ms"] if inline else []))
        for r in out.rows:
            w.writerow([repr(float(c)) for c in r.point] + [repr(float(r.estimate)), repr(float(r.err)), r.solver,
                                                             r.seed] + ([f"{r.runtime_ms:.3f}"] if inline else []))
    if not inline:
        with open(out_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(coords + ["solver", "runtime_ms"])
            for r in out.rows:
                w.writerow([repr(float(c)) for c in r.point] + [r.solver, f"{r.runtime_ms:.3f}"])
    if "dpp_grid" in out.grids:
        out.grids["dpp_grid"].to_csv(out_dir / "grid.csv")
        if "fd_oracle" in out.grids:
            out.grids["fd_oracle"].to_csv(out_dir / "grid_fd.csv")
    elif "fd_oracle" in out.grids:
        out.grids["fd_oracle"].to_csv(out_dir / "grid.csv")
    text = ["# configuration", dump_config(spec, cfg), f"# ell estimate: {spec.ell_estimate:.6g}", "# results"]
    text += out.report
    (out_dir / "report.txt").write_text("\n".join(text) + "\n")


@dataclass
class StudyRow:
    value: float
    estimate: float
    stderr: float
    error: float | None
    order: float | None


def convergence_study(spec, cfg, knob: str, ladder) -> list[StudyRow]:
    """Run the solver once per rung of ``ladder`` for ``knob`` in ``dt``,
    ``h`` or ``n_paths`` at the first evaluation point.

    ``error`` is measured against the registered closed form when one
    exists.  ``order`` compares successive rungs: for ``dt`` and ``h`` it is
    ``log(e_prev / e) / log(k_prev / k)`` on the errors, for ``n_paths`` the
    same on the standard errors (expected 1/2).
    """
    from .config import with_knob
    from .simulate import PathConfig, estimate_value

    if knob not in STUDY_KNOBS:
        raise ValueError(f"study knob must be one of {STUDY_KNOBS}")
    ladder = [float(v) for v in ladder]
    if len(ladder) < 2:
        raise ValueError("a study needs at least two rungs")
    steps = [b - a for a, b in zip(ladder, ladder[1:])]
    if not (all(s > 0 for s in steps) or all(s < 0 for s in steps)):
        raise ValueError("study ladder must be strictly sorted")
    x = cfg.eval_points[0]
    ref = analytic_value(spec, x)
    rows: list[StudyRow] = []
    for v in ladder:
        c = with_knob(cfg, knob, v)
        if knob == "h":
            out = Outcome()
            if c.solver == "fd_oracle":
                sol = _run_fd(spec, c, out)
            else:
                sol, _ = _run_dpp(spec, c, out)
            est, se = sol.value_at(x), 0.0
        else:
            pcfg = PathConfig(c.dt, c.resolved_max_time(spec), c.seed, c.exit_refinement)
            r = estimate_value(x, _fixed_policy(spec, c), spec.domain, spec.f, spec.g, c.n_paths, pcfg)
            est, se = r.mean, r.stderr
        err = None if ref is None else abs(est - ref)
        order = None
        if rows:
            prev = rows[-1]
            a, b = (prev.stderr, se) if knob == "n_paths" else (prev.error, err)
            if a is not None and b is not None and a > 0 and b > 0:
                order = math.log(a / b) / math.log(prev.value / v) if knob != "n_paths" else \
                    math.log(a / b) / math.log(v / prev.value)
        rows.append(StudyRow(v, est, se, err, order))
    return rows


def format_study(knob: str, rows: list[StudyRow]) -> str:
    head = f"{knob:>12} {'estimate':>14} {'stderr':>10} {'error':>10} {'order':>7}"
    lines = [head]
    for r in rows:
        e = "-" if r.error is None else f"{r.error:.3e}"
        o = "-" if r.order is None else f"{r.order:.2f}"
        lines.append(f"{r.value:>12.6g} {r.estimate:>14.8f} {r.stderr:>10.3e} {e:>10} {o:>7}")
    return "\n".join(lines)


def _parse_study(text: str) -> tuple[str, list[float]]:
    knob, _, vals = text.partition("=")
    knob = knob.strip()
    if knob not in STUDY_KNOBS or not vals:
        raise argparse.ArgumentTypeError(f"expected knob=a,b,c with knob in {STUDY_KNOBS}")
    try:
        return knob, [float(v) for v in vals.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ladder {vals!r}") from None


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pucci-kac", description="Solve the Pucci-maximal Dirichlet problem from an INI configuration.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="run a configuration")
    s.add_argument("config", nargs="?", help="INI configuration file")
    s.add_argument("--threads", type=int, default=None, help=f"worker threads (fallback: ${THREADS_ENV})")
    s.add_argument("--print-defaults", action="store_true", help="print every key with its default and exit")
    s.add_argument("--study", type=_parse_study, default=None, metavar="KNOB=A,B,C",
                   help="convergence study over dt, h or n_paths")
    s.add_argument("--output", default=None, help="output directory (overrides the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_defaults:
        from .config import DEFAULTS_TEXT

        sys.stdout.write(DEFAULTS_TEXT)
        return EXIT_OK
    if args.config is None:
        print("error: a config file is required", file=sys.stderr)
        return EXIT_INPUT
    threads = _threads(args.threads)
    if threads and int(os.environ.get("NUMBA_NUM_THREADS", "0") or 0) < threads:
        os.environ["NUMBA_NUM_THREADS"] = str(threads)
    # numba falls back to another threading layer; the notice is noise here
    warnings.filterwarnings("ignore", message="The TBB threading layer")

    from .config import ConfigError, load_config

    try:
        spec, cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    from .simulate import set_threads

    used = set_threads(threads or cfg.threads or 1)
    out_dir = Path(args.output or cfg.output)
    if args.study is None:
        return run(spec, cfg, out_dir, threads=used)
    knob, ladder = args.study
    try:
        rows = convergence_study(spec, cfg, knob, ladder)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_study(knob, rows)
    with open(out_dir / "study.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([knob, "estimate", "stderr", "error", "order"])
        for r in rows:
            w.writerow([repr(r.value), repr(r.estimate), repr(r.stderr),
                        "" if r.error is None else repr(r.error), "" if r.order is None else repr(r.order)])
    (out_dir / "report.txt").write_text(f"# convergence study at {_pt(cfg.eval_points[0])}\n{table}\n")
    print(table)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
