"""Problem and run configuration: an INI file with ``[problem]`` and ``[solver]``.

Every key, its type and its default is listed in ``DEFAULTS_TEXT`` (printed
by ``pucci-kac solve --print-defaults``).  ``auto`` asks for the derived
default documented next to the key.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .exprlang import ExprError, ScalarField, parse
from .geometry import Domain

SOLVERS = ("mc_fixed_control", "dpp_grid", "fd_oracle", "cross_check")
ELL_SAMPLES = 100_000

DEFAULTS_TEXT = """\
# pucci-kac configuration (INI).  Values shown are the defaults.
[problem]
# spatial dimension N
dim = 2
# ellipticity bounds, 0 < lam <= Lam
lam = 1.0
Lam = 1.0
# ball | box | annulus
domain = ball
# ball and annulus centre (comma separated, N entries; default origin)
center = auto
# ball radius
radius = 1.0
# box corners (comma separated, N entries each)
lo = auto
hi = auto
# annulus radii
r_inner = auto
r_outer = auto
# source term and boundary data: expressions in x1..xN and r = |x|
f = 1
g = 0

[solver]
# mc_fixed_control | dpp_grid | fd_oracle | cross_check
solver = dpp_grid
seed = 0
# points where values are reported, ';' between points, ',' between coordinates
eval_points = auto
output = out
# worker threads for path simulation (auto: PUCCI_KAC_THREADS or 1)
threads = auto
# grid solvers
h = 0.02
# auto: h^2 / (N Lam)
dt_dpp = auto
angles = 16
levels = 2
# auto: 1e-7 * ell
tol = auto
max_iter = 100000
# howard | value
method = howard
# wide-stencil angle count and radius of the finite-difference oracle
fd_angles = 8
fd_radius = 3
# Monte Carlo
dt = 0.001
n_paths = 10000
# auto: 50 diam(D)^2 / lam
max_time = auto
# none | segment_projection
exit_refinement = segment_projection
# lam | Lam | policy | diffusion matrix entries row by row (N*N numbers)
control = lam
# separate: runtimes go to timing.csv; inline: runtime_ms column in values.csv
timing = separate
"""


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ProblemSpec:
    dim: int
    lam: float
    Lam: float
    domain: Domain
    f_expr: str
    g_expr: str
    f: ScalarField = field(repr=False, compare=False)
    g: ScalarField = field(repr=False, compare=False)
    ell_estimate: float = 0.0

    def __eq__(self, other) -> bool:
        return (isinstance(other, ProblemSpec) and self.dim == other.dim and self.lam == other.lam
                and self.Lam == other.Lam and self.domain == other.domain
                and self.f.canonical() == other.f.canonical() and self.g.canonical() == other.g.canonical())

    __hash__ = None


@dataclass(frozen=True)
class RunConfig:
    solver: str = "dpp_grid"
    seed: int = 0
    eval_points: tuple[tuple[float, ...], ...] = ()
    output: str = "out"
    threads: int | None = None
    h: float = 0.02
    dt_dpp: float | None = None
    angles: int = 16
    levels: int = 2
    tol: float | None = None
    max_iter: int = 100_000
    method: str = "howard"
    fd_angles: int = 8
    fd_radius: int = 3
    dt: float = 1e-3
    n_paths: int = 10_000
    max_time: float | None = None
    exit_refinement: str = "segment_projection"
    control: str = "lam"
    timing: str = "separate"

    def resolved_dt_dpp(self, spec: ProblemSpec) -> float:
        return self.dt_dpp if self.dt_dpp is not None else self.h * self.h / (spec.dim * spec.Lam)

    def resolved_tol(self, spec: ProblemSpec) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-7 * (spec.ell_estimate if spec.ell_estimate > 0 else 1.0)

    def resolved_max_time(self, spec: ProblemSpec) -> float:
        if self.max_time is not None:
            return self.max_time
        return 50.0 * spec.domain.diameter ** 2 / spec.lam


def estimate_ell(domain: Domain, f: ScalarField, g: ScalarField, n: int = ELL_SAMPLES) -> float:
    """``max(sup |f|, sup |g|)`` over Halton points of the bounding box in the closure of ``D``."""
    lo, hi = domain.bounding_box()
    pts = qmc.scale(qmc.Halton(d=domain.dim, scramble=False).random(n), lo, hi)
    pts = pts[domain.in_closure(pts)]
    if pts.shape[0] == 0:
        return 0.0
    return float(max(np.max(np.abs(f(pts))), np.max(np.abs(g(pts)))))


def _get(sec: configparser.SectionProxy, name: str, key: str, conv, *, auto_ok=False, default=None):
    raw = sec.get(key)
    path = f"{name}.{key}"
    if raw is None:
        return default
    raw = raw.strip()
    if auto_ok and raw == "auto":
        return None
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: cannot read {raw!r} ({exc})") from None


def _floats(raw: str) -> list[float]:
    vals = [float(t) for t in raw.split(",") if t.strip()]
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite entry")
    return vals


def _int(raw: str) -> int:
    v = float(raw)
    if v != int(v):
        raise ValueError("not an integer")
    return int(v)


def _points(raw: str) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(_floats(p)) for p in raw.split(";") if p.strip())


def _positive(path: str, v, allow_none=True):
    if v is None and allow_none:
        return
    if not (v > 0 and math.isfinite(v)):
        raise ConfigError(f"{path}: must be positive, got {v!r}")


PROBLEM_KEYS = {"dim", "lam", "Lam", "domain", "center", "radius", "lo", "hi", "r_inner", "r_outer", "f", "g"}
SOLVER_KEYS = {f.name for f in fields(RunConfig)}


def _domain(sec, dim: int) -> Domain:
    kind = sec.get("domain", "ball").strip()
    center = _get(sec, "problem", "center", _floats, auto_ok=True)
    center = [0.0] * dim if center is None else center
    try:
        if kind == "ball":
            if len(center) != dim:
                raise ConfigError(f"problem.center: needs {dim} entries")
            return Domain.ball(center, _get(sec, "problem", "radius", float, default=1.0))
        if kind == "box":
            lo = _get(sec, "problem", "lo", _floats, auto_ok=True)
            hi = _get(sec, "problem", "hi", _floats, auto_ok=True)
            lo = [0.0] * dim if lo is None else lo
            hi = [1.0] * dim if hi is None else hi
            if len(lo) != dim or len(hi) != dim:
                raise ConfigError(f"problem.lo/problem.hi: need {dim} entries each")
            return Domain.box(lo, hi)
        if kind == "annulus":
            if len(center) != dim:
                raise ConfigError(f"problem.center: needs {dim} entries")
            r_in = _get(sec, "problem", "r_inner", float, auto_ok=True)
            r_out = _get(sec, "problem", "r_outer", float, auto_ok=True)
            return Domain.annulus(center, 0.5 if r_in is None else r_in, 1.0 if r_out is None else r_out)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"problem.domain: {exc}") from None
    raise ConfigError(f"problem.domain: unknown kind {kind!r} (ball, box, annulus)")


def parse_config(text: str, *, estimate: bool = True) -> tuple[ProblemSpec, RunConfig]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax: {exc}") from None
    for name in cp.sections():
        if name not in ("problem", "solver"):
            raise ConfigError(f"{name}: unknown section")
    if not cp.has_section("problem"):
        raise ConfigError("problem: section missing")
    prob = cp["problem"]
    sol = cp["solver"] if cp.has_section("solver") else cp["DEFAULT"]
    for key in prob:
        if key not in PROBLEM_KEYS:
            raise ConfigError(f"problem.{key}: unknown key")
    for key in sol:
        if key not in SOLVER_KEYS:
            raise ConfigError(f"solver.{key}: unknown key")

    dim = _get(prob, "problem", "dim", _int, default=2)
    if not 1 <= dim <= 3:
        raise ConfigError(f"problem.dim: must be 1, 2 or 3, got {dim}")
    lam = _get(prob, "problem", "lam", float, default=1.0)
    Lam = _get(prob, "problem", "Lam", float, default=lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ConfigError(f"problem.lam: must be positive, got {lam}")
    if not (lam <= Lam and math.isfinite(Lam)):
        raise ConfigError(f"problem.lam, problem.Lam: need lam <= Lam, got lam={lam}, Lam={Lam}")
    domain = _domain(prob, dim)
    exprs = {}
    for key in ("f", "g"):
        src = prob.get(key, "1" if key == "f" else "0").strip()
        try:
            exprs[key] = parse(src, dim)
        except ExprError as exc:
            raise ConfigError(f"problem.{key}: {exc}") from None
    ell = estimate_ell(domain, exprs["f"], exprs["g"]) if estimate else 0.0
    spec = ProblemSpec(dim, lam, Lam, domain, exprs["f"].source, exprs["g"].source, exprs["f"], exprs["g"], ell)

    kw = {}
    kw["solver"] = sol.get("solver", "dpp_grid").strip()
    if kw["solver"] not in SOLVERS:
        raise ConfigError(f"solver.solver: must be one of {', '.join(SOLVERS)}")
    kw["seed"] = _get(sol, "solver", "seed", _int, default=0)
    if not 0 <= kw["seed"] < 2**64:
        raise ConfigError("solver.seed: must be a 64-bit unsigned integer")
    pts = _get(sol, "solver", "eval_points", _points, auto_ok=True)
    kw["eval_points"] = (tuple(float(c) for c in domain.center),) if not pts else pts
    lo, hi = domain.bounding_box()
    for p in kw["eval_points"]:
        if len(p) != dim:
            raise ConfigError(f"solver.eval_points: point {p} does not have {dim} coordinates")
        if np.any(np.array(p) < lo - 1e-12) or np.any(np.array(p) > hi + 1e-12):
            raise ConfigError(f"solver.eval_points: point {p} outside the bounding box of the domain")
    kw["output"] = sol.get("output", "out").strip()
    kw["threads"] = _get(sol, "solver", "threads", _int, auto_ok=True)
    for key, conv in (("h", float), ("dt_dpp", float), ("tol", float), ("dt", float), ("max_time", float)):
        kw[key] = _get(sol, "solver", key, conv, auto_ok=key not in ("h", "dt"),
                       default=getattr(RunConfig, key))
        _positive(f"solver.{key}", kw[key])
    for key in ("angles", "levels", "max_iter", "fd_angles", "fd_radius", "n_paths", "threads"):
        if key != "threads":
            kw[key] = _get(sol, "solver", key, _int, default=getattr(RunConfig, key))
        if kw[key] is not None and kw[key] < 1:
            raise ConfigError(f"solver.{key}: must be a positive integer, got {kw[key]}")
    if kw["levels"] < 2:
        raise ConfigError("solver.levels: must be at least 2")
    if kw["n_paths"] < 2:
        raise ConfigError("solver.n_paths: must be at least 2")
    for key, allowed in (("method", ("howard", "value")), ("exit_refinement", ("none", "segment_projection")),
                         ("timing", ("separate", "inline"))):
        kw[key] = sol.get(key, getattr(RunConfig, key)).strip()
        if kw[key] not in allowed:
            raise ConfigError(f"solver.{key}: must be one of {', '.join(allowed)}")
    kw["control"] = sol.get("control", "lam").strip()
    _check_control(kw["control"], dim)
    if kw["max_time"] is not None and kw["dt"] > kw["max_time"]:
        raise ConfigError("solver.dt, solver.max_time: need dt <= max_time")
    return spec, RunConfig(**kw)


def _check_control(text: str, dim: int) -> None:
    if text in ("lam", "Lam", "policy"):
        return
    try:
        vals = _floats(text)
    except ValueError:
        vals = []
    if len(vals) != dim * dim:
        raise ConfigError(f"solver.control: expected lam, Lam, policy or {dim * dim} matrix entries, got {text!r}")


def load_config(path, *, estimate: bool = True) -> tuple[ProblemSpec, RunConfig]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, estimate=estimate)


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(spec: ProblemSpec, cfg: RunConfig) -> str:
    """Canonical text; ``parse_config(dump_config(s, c))`` reproduces ``(s, c)``."""
    d = spec.domain.describe()
    lines = ["[problem]", f"dim = {spec.dim}", f"lam = {spec.lam!r}", f"Lam = {spec.Lam!r}",
             f"domain = {spec.domain.kind}"]
    for key, val in d.items():
        if isinstance(val, list):
            val = ",".join(repr(float(v)) for v in val)
        else:
            val = repr(float(val))
        lines.append(f"{key} = {val}")
    lines += [f"f = {spec.f.canonical()}", f"g = {spec.g.canonical()}", "", "[solver]"]
    for fl in fields(RunConfig):
        v = getattr(cfg, fl.name)
        if fl.name == "eval_points":
            v = ";".join(",".join(repr(float(c)) for c in p) for p in v)
        lines.append(f"{fl.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def with_knob(cfg: RunConfig, knob: str, value) -> RunConfig:
    if knob == "n_paths":
        value = int(value)
    return replace(cfg, **{knob: value})
