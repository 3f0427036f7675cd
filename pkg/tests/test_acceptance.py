"""Acceptance suite.

Every test prints one line ``CRITERION <k>: PASS|FAIL  <measurements>``
(visible with or without output capture) and then asserts the same
condition.  Tolerances are the published ones; see the README for the
settings chosen where none are pinned.

Run standalone with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pucci_kac import dpp_solver, fd_oracle
from pucci_kac.config import estimate_ell
from pucci_kac.exprlang import parse
from pucci_kac.geometry import Domain
from pucci_kac.grid import build_grid
from pucci_kac.simulate import (PathConfig, Policy, continuity_probe, estimate_value, exit_time_stats,
                                restart_consistency)
from pucci_kac.symmat import Control, enumerate_controls, pucci_plus, sqrt_factor

DISK = Domain.ball([0.0, 0.0], 1.0)
ORIGIN = np.zeros(2)
LAM, BIG_LAM = 1.0, 2.0
RUNTIME_LIMIT_S = 60.0


def field(text: str):
    return parse(text, 2)


@pytest.fixture
def report(capsys):
    def emit(k, ok: bool, detail: str) -> None:
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        with capsys.disabled():
            print("\n" + line, flush=True)

    return emit


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def solve_dpp(f: str, g: str, h: float, lam=LAM, Lam=BIG_LAM, domain=DISK):
    def go():
        grid = build_grid(domain, field(g), h)
        cs = enumerate_controls(2, lam, Lam)
        sol, rep = dpp_solver.solve(grid, cs, field(f), dpp_solver.default_dt(h, 2, Lam))
        return sol, rep, cs

    (sol, rep, cs), secs = timed(go)
    return sol, rep, cs, secs


def solve_fd(f: str, g: str, h: float, lam=LAM, Lam=BIG_LAM, domain=DISK, grid=None):
    (sol, rep), secs = timed(fd_oracle.solve_policy_iteration, domain, field(f), field(g), h, 8,
                             lam=lam, Lam=Lam, grid=grid)
    return sol, rep, secs


def policy_fraction(sol, controls, level: float) -> float:
    pol = sol.policy_index[sol.interior]
    good = [np.allclose(controls[k].diffusion.array, level * np.eye(2), atol=1e-9) for k in pol]
    return float(np.mean(good))


def test_criterion_1_concave_radial_case(report):
    """f = 1, lam = 1, Lam = 2: u(0) = 1/(lam N) = 0.5."""
    ud, rd, _, td = solve_dpp("1", "0", 0.02)
    uf, rf, tf = solve_fd("1", "0", 0.01)
    ed, ef = abs(ud.value_at(ORIGIN) - 0.5), abs(uf.value_at(ORIGIN) - 0.5)
    ok = (rd.converged and rf.converged and ed <= 0.01 and ef <= 0.01
          and td <= RUNTIME_LIMIT_S and tf <= RUNTIME_LIMIT_S)
    report(1, ok, f"dpp(h=0.02) |u(0)-0.5|={ed:.2e} in {td:.1f}s; fd(h=0.01,K=8) |u(0)-0.5|={ef:.2e} "
                  f"in {tf:.1f}s; tol 0.01, limit {RUNTIME_LIMIT_S:.0f}s")
    assert ok


def test_criterion_2_convex_radial_case(report):
    """f = -1: u(0) = -1/(Lam N) = -0.25 and the optimal control is sqrt(Lam) I."""
    ud, rd, cs, _ = solve_dpp("-1", "0", 0.02)
    uf, rf, _ = solve_fd("-1", "0", 0.01)
    ed, ef = abs(ud.value_at(ORIGIN) + 0.25), abs(uf.value_at(ORIGIN) + 0.25)
    frac = policy_fraction(ud, cs, BIG_LAM)
    ok = rd.converged and rf.converged and ed <= 0.005 and ef <= 0.005 and frac >= 0.9
    report(2, ok, f"dpp |u(0)+0.25|={ed:.2e}; fd |u(0)+0.25|={ef:.2e} (tol 0.005); "
                  f"policy = sqrt(Lam) I on {100 * frac:.1f}% of interior cells (need >= 90%)")
    assert ok


def test_criterion_3_linear_reduction(report):
    """lam = Lam = 1: Monte Carlo with sigma = I against 0.5 and the grid value."""
    ud, _, _, _ = solve_dpp("1", "0", 0.02, lam=1.0, Lam=1.0)
    cfg = PathConfig(dt=1e-4, max_time=200.0, seed=0)
    pol = Policy.constant(Control.from_sigma(np.eye(2)))
    est = estimate_value(ORIGIN, pol, DISK, field("1"), field("0"), 100_000, cfg)
    u_grid = ud.value_at(ORIGIN)
    z = (est.mean - 0.5) / est.stderr
    ok_exact = abs(est.mean - 0.5) <= 3 * est.stderr
    ok_grid = abs(est.mean - u_grid) <= 0.01
    report(3, ok_exact and ok_grid,
           f"MC(n=1e5, dt=1e-4) = {est.mean:.5f} +- {est.stderr:.5f}: |MC-0.5| = {abs(est.mean - 0.5):.5f} "
           f"= {z:.1f} SE (need <= 3 SE) [{'ok' if ok_exact else 'fails'}]; |MC-dpp| = "
           f"{abs(est.mean - u_grid):.5f} (need <= 0.01) [{'ok' if ok_grid else 'fails'}]")
    assert ok_exact and ok_grid


def oracle_problems(seed: int = 2024):
    rng = np.random.default_rng(seed)
    domains = [Domain.ball([0.0, 0.0], 1.0), Domain.box([-1.0, -1.0], [1.0, 1.0]),
               Domain.annulus([0.0, 0.0], 0.3, 1.0), Domain.box([0.0, 0.0], [1.0, 1.0]),
               Domain.annulus([0.0, 0.0], 0.4, 1.2)]
    fs = ["1", "-1", "x1", "sin(x1)*cos(x2)"]
    gs = ["0", "x1"]
    return [(d, fs[rng.integers(len(fs))], gs[rng.integers(len(gs))]) for d in domains]


def test_criterion_4_oracle_equivalence(report):
    h = 0.05
    worst, lines, ok = 0.0, [], True
    for d, f, g in oracle_problems():
        grid = build_grid(d, field(g), h)
        ud, rd, _, _ = solve_dpp(f, g, h, domain=d)
        uf, rf, _ = solve_fd(f, g, h, domain=d, grid=grid)
        idx = ud.interior
        diff = float(np.max(np.abs(ud.values[idx] - uf.values[idx])))
        ell = estimate_ell(d, field(f), field(g))
        ratio = diff / ell
        worst = max(worst, ratio)
        ok &= rd.converged and rf.converged and diff <= 0.03 * ell
        lines.append(f"{d.kind}(f={f},g={g}) {ratio:.1e}")
    report(4, ok, f"max ||u_dpp-u_fd||/ell = {worst:.2e} (need <= 0.03) over " + "; ".join(lines))
    assert ok


def random_controls(n: int, lam: float, Lam: float, seed: int = 5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        th = rng.uniform(0, math.pi)
        q = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        a = (q * rng.uniform(lam, Lam, size=2)) @ q.T
        out.append(sqrt_factor(0.5 * (a + a.T)))
    return out


def test_criterion_5_subsolution_ordering(report):
    """Every constant control in K is suboptimal: its value stays below u_dpp."""
    ud, _, _, _ = solve_dpp("1", "0", 0.02)
    u0 = ud.value_at(ORIGIN)
    cfg = PathConfig(dt=2.5e-4, max_time=200.0, seed=17)
    worst, violations = -math.inf, 0
    for i, ctrl in enumerate(random_controls(20, LAM, BIG_LAM)):
        ctrl.check(LAM, BIG_LAM)
        est = estimate_value(ORIGIN, Policy.constant(ctrl), DISK, field("1"), field("0"), 10_000,
                             PathConfig(cfg.dt, cfg.max_time, seed=cfg.seed + i))
        slack = est.mean - (u0 + 3 * est.stderr + 0.01)
        worst = max(worst, slack)
        violations += slack > 0
    report(5, violations == 0, f"u_dpp(0)={u0:.5f}; 20 controls (n=1e4, dt=2.5e-4): {violations} violations, "
                               f"largest est - (u_dpp + 3SE + 0.01) = {worst:+.4f}")
    assert violations == 0


def test_criterion_6_restart_consistency(report):
    ud, _, cs, _ = solve_dpp("1", "0", 0.05)
    pol = dpp_solver.extract_policy(ud, cs)
    cfg = PathConfig(dt=1e-3, max_time=200.0, seed=23)
    ok, parts = True, []
    for rho in (0.05, 0.2):
        direct, split = restart_consistency(ORIGIN, pol, DISK, field("1"), field("0"), rho, cfg, 100_000)
        joint = math.hypot(direct.stderr, split.stderr)
        gap = abs(direct.mean - split.mean)
        ok &= gap <= 3 * joint
        parts.append(f"rho={rho}: direct {direct.mean:.5f}, split {split.mean:.5f}, |diff|={gap:.5f} "
                     f"= {gap / joint:.2f} joint SE")
    report(6, ok, "; ".join(parts) + " (need <= 3)")
    assert ok


def test_criterion_7_comparison_principle(report):
    h, worst, ok = 0.05, math.inf, True
    parts = []
    for name, solve in (("dpp", lambda f, g: solve_dpp(f, g, h)[0]), ("fd", lambda f, g: solve_fd(f, g, h)[0])):
        base = solve("sin(x1)*cos(x2)", "x1")
        for label, f, g in (("f+0.1", "sin(x1)*cos(x2) + 0.1", "x1"), ("g+0.1", "sin(x1)*cos(x2)", "x1 + 0.1")):
            up = solve(f, g)
            idx = base.interior
            drop = float(np.min(up.values[idx] - base.values[idx]))
            worst = min(worst, drop)
            ok &= drop >= -1e-9
            parts.append(f"{name} {label}: min increase {drop:+.2e}")
    report(7, ok, "; ".join(parts) + " (need >= -1e-9)")
    assert ok


def test_criterion_8_exit_time_suite(report):
    pol = Policy.constant(Control.from_sigma(np.eye(2)))
    cfg = PathConfig(dt=1e-4, max_time=200.0, seed=0)
    factors = [2.0**k for k in range(-3, 6)] + [20.0]
    st = exit_time_stats(ORIGIN, pol, DISK, cfg, 100_000, tail_factors=factors)
    ok_i = abs(st.mean_tau - 0.5) <= 3 * st.stderr
    probs = [p for _, p in st.tail]
    p20 = dict(zip(sorted(factors), probs))[20.0]
    ok_ii = all(a >= b for a, b in zip(probs, probs[1:])) and p20 <= 0.01

    votes = 0
    cfg_c = PathConfig(dt=1e-3, max_time=200.0)
    x = np.array([0.5, 0.0])
    seqs = []
    for seed in (1, 2, 3):
        c = PathConfig(cfg_c.dt, cfg_c.max_time, seed=seed)
        seq = [continuity_probe(x, x + [d, 0.0], pol, DISK, c, 10_000, 0.1) for d in (0.1, 0.01, 0.001)]
        seqs.append(seq)
        votes += all(a >= b for a, b in zip(seq, seq[1:]))
    ok_iii = votes >= 2

    coarse = exit_time_stats(ORIGIN, pol, DISK, PathConfig(1e-3, 200.0, seed=31), 100_000)
    fine = exit_time_stats(ORIGIN, pol, DISK, PathConfig(2.5e-4, 200.0, seed=37), 100_000)
    diff = abs(coarse.mean_tau - fine.mean_tau)
    allow = max(3 * math.hypot(coarse.stderr, fine.stderr), 0.02 * fine.mean_tau)
    ok_iv = diff <= allow

    ok = ok_i and ok_ii and ok_iii and ok_iv
    report(8, ok,
           f"(i) E[tau]={st.mean_tau:.5f} +- {st.stderr:.5f}, {abs(st.mean_tau - 0.5) / st.stderr:.1f} SE from 0.5 "
           f"[{'ok' if ok_i else 'fails'}]; (ii) P(tau >= 20 E)={p20:.1e}, tail monotone "
           f"[{'ok' if ok_ii else 'fails'}]; (iii) probes "
           + ", ".join("(" + ",".join(f"{p:.4f}" for p in s) + ")" for s in seqs)
           + f" nonincreasing for {votes}/3 seeds [{'ok' if ok_iii else 'fails'}]; (iv) |tau(1e-3)-tau(2.5e-4)|="
           f"{diff:.5f} <= {allow:.5f} [{'ok' if ok_iv else 'fails'}]")
    assert ok


def test_criterion_9_operator_suite(report):
    rng = np.random.default_rng(99)
    sym = [0.5 * (a + a.T) for a in rng.normal(size=(100, 2, 2))]

    cs = enumerate_controls(2, LAM, BIG_LAM, angles=64, levels=5)
    brute_err = max(abs(cs.best(s)[1] - pucci_plus(s, LAM, BIG_LAM)) / np.linalg.norm(s) for s in sym)
    ok_a = brute_err <= 0.01

    h = 0.05
    dt = dpp_solver.default_dt(h, 2, BIG_LAM)
    controls = enumerate_controls(2, LAM, BIG_LAM)
    worst = 0.0
    for s in sym[:10]:
        a, b, c = (float(v) for v in (s[0, 0], s[0, 1], s[1, 1]))
        q = field(f"0.5*(({a!r})*x1^2 + 2*({b!r})*x1*x2 + ({c!r})*x2^2)")
        grid = build_grid(DISK, q, h)
        grid = grid.with_interior(q(grid.coords(grid.interior)))
        new, _ = dpp_solver.dpp_update(grid, controls, field("0"), dt)
        node = grid.node_near(ORIGIN)
        step = new.values[node] - grid.values[node]
        err = abs(step - dt * 0.5 * pucci_plus(s, LAM, BIG_LAM)) / (np.linalg.norm(s) * (dt * dt + h * h))
        worst = max(worst, err)
    ok_b = worst <= 1.0

    bad = 0
    for s, t, p in zip(sym, sym[1:], sym[2:]):
        psd = p @ p.T
        tol = 1e-9 * (1 + np.abs(s).sum() + np.abs(t).sum() + np.abs(psd).sum())
        for k in (0.0, 0.5, 3.0):
            bad += abs(pucci_plus(k * s, LAM, BIG_LAM) - k * pucci_plus(s, LAM, BIG_LAM)) > tol * (1 + k)
        bad += pucci_plus(s + t, LAM, BIG_LAM) > pucci_plus(s, LAM, BIG_LAM) + pucci_plus(t, LAM, BIG_LAM) + tol
        bad += pucci_plus(s + psd, LAM, BIG_LAM) < pucci_plus(s, LAM, BIG_LAM) - tol
    ok_c = bad == 0
    ok = ok_a and ok_b and ok_c
    report(9, ok, f"brute-force max error / |S| = {brute_err:.2e} (need <= 0.01); quadratic step error / "
                  f"(|S|(dt^2+h^2)) = {worst:.2e} (need <= 1); invariant violations = {bad}")
    assert ok


CRITERION_1_CONFIG = """\
[problem]
dim = 2
lam = 1
Lam = 2
domain = ball
radius = 1
f = 1
g = 0

[solver]
solver = dpp_grid
h = 0.02
seed = 7
eval_points = 0,0; 0.25,-0.5
"""

MC_CONFIG = """\
[problem]
lam = 1
Lam = 2
f = 1
g = x1
[solver]
solver = mc_fixed_control
control = 1.5,0.2,0.2,1.2
n_paths = 4000
seed = 7
eval_points = 0,0; 0.25,-0.5
"""


def run_cli(config: Path, out: Path, threads: int) -> subprocess.CompletedProcess:
    env = dict(os.environ)
    env.pop("NUMBA_NUM_THREADS", None)
    return subprocess.run([sys.executable, "-m", "pucci_kac", "solve", str(config), "--threads", str(threads),
                           "--output", str(out)], capture_output=True, text=True, env=env)


def test_criterion_10_determinism(report, tmp_path):
    ok, parts = True, []
    for name, text in (("criterion-1", CRITERION_1_CONFIG), ("monte-carlo", MC_CONFIG)):
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(text)
        blobs = []
        for threads in (1, 2, 8):
            for rep in (0, 1):
                out = tmp_path / f"{name}-{threads}-{rep}"
                r = run_cli(cfg, out, threads)
                ok &= r.returncode == 0
                blobs.append((out / "values.csv").read_bytes() if r.returncode == 0 else b"")
                ok &= f"threads: {threads}" in (out / "report.txt").read_text() if r.returncode == 0 else False
        same = all(b == blobs[0] for b in blobs) and bool(blobs[0])
        ok &= same
        parts.append(f"{name}: {len(blobs)} runs over threads 1,2,8 {'byte-identical' if same else 'DIFFER'}")
    report(10, ok, "; ".join(parts))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
