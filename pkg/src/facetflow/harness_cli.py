"""Scenario configuration, preset data, solver orchestration and the command line.

A scenario is one JSON document.  ``run_scenario`` runs the selected solvers
from the same initial profile, cross-checks them on the sample times and
writes a bundle of CSV/JSON files.  The bundle is assembled in a scratch
directory next to the target and renamed into place only when complete, so
a failed run leaves nothing behind.

Exit codes of the command line: 0 success, 2 configuration error, 3 solver
failure, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import shutil
import sys
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anisotropy import TWO_PI, AnisotropyJ, square_J, wulff_profile
from .composition import compose
from .facet_tracker import (
    TrackerInvariantError,
    build_omega,
    detect_initial_facets,
    eval_w,
    events_json,
    milestones,
    milestones_json,
    profile_at,
    run_until,
    trajectory_csv,
)
from .jr_profile import PERIOD_INTEGRAL, Profile, validate_jr
from .regularized_solver import (
    GridField,
    SolverFailure,
    SolverParams,
    field_from_profile,
    grid_phi,
    observables,
    resolution_warning,
    run,
    snapshot_csv,
)
from .semidiscrete import ProxFailure, SchemeRun, diagnostics_csv, grid_samples, run_scheme

__all__ = [
    "EXIT_CONFIG",
    "EXIT_INVARIANT",
    "EXIT_OK",
    "EXIT_SOLVER",
    "PRESET_NAMES",
    "Bundle",
    "ConfigError",
    "InvariantViolation",
    "RegularizedConfig",
    "ScenarioConfig",
    "ScenarioSolverError",
    "SchemeConfig",
    "TrackerConfig",
    "convergence_table",
    "corner_preset",
    "cross_validate",
    "emit_plot_data",
    "main",
    "minimal_reversed_preset",
    "polygon_preset",
    "preset",
    "run_scenario",
    "two_hump_preset",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4

SOLVERS = ("tracker", "regularized", "scheme")
PRESET_NAMES = ("parabola", "minimal", "minimal-reversed", "corner(m)", "two-hump", "polygon")
MANIFEST = "manifest.json"

# tolerances of the cross-checks
SLACK = 1e-8
STATIONARY_TOL = 1e-6
OMEGA_TOL = 1e-9
SCHEME_RESIDUAL_TOL = 1e-9
OMEGA_SAMPLES = 200


class ConfigError(ValueError):
    """Invalid scenario configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ScenarioSolverError(RuntimeError):
    """A solver failed; the message says which solver and where."""


class InvariantViolation(RuntimeError):
    """A module invariant broke during a run."""


# -- presets ---------------------------------------------------------------------------


def _minimal() -> Profile:
    xs = np.arange(5) * (math.pi / 2)
    v = math.pi / 4 + np.arange(4) * (math.pi / 2)
    return Profile.from_pl(xs, v, v, square_J(), 0.0)


def minimal_reversed_preset() -> Profile:
    """The four square facets listed in reversed angular order."""
    xs = np.arange(5) * (math.pi / 2)
    v = 7 * math.pi / 4 - np.arange(4) * (math.pi / 2)
    return Profile.from_pl(xs, v, v, square_J(), 0.0)


def corner_preset(m: int) -> Profile:
    """Piecewise-linear phi with one upward jump across m corner angles.

    phi rises from 0 to 5 pi/8 on (0, x*), jumps to 3 pi/4 + (m - 1) pi/2 + pi/8,
    and rises to 2 pi; x* fixes the period integral.
    """
    if not 1 <= m <= 4:
        raise ValueError(f"corner preset needs 1 <= m <= 4, got {m}")
    p_left = 5 * math.pi / 8
    p_right = 3 * math.pi / 4 + (m - 1) * math.pi / 2 + math.pi / 8
    x_star = (2 * PERIOD_INTEGRAL - (p_right + TWO_PI) * TWO_PI) / (p_left - (p_right + TWO_PI))
    return Profile.from_pl([0.0, x_star, TWO_PI], [0.0, p_right], [p_left, TWO_PI], square_J(), 0.0)


def two_hump_preset() -> Profile:
    """Non-convex data: a rise, a 3 pi/4 plateau (zero-curvature facet), a second rise."""
    from scipy.optimize import brentq

    xs = np.array([0.0, 2.0, 2.4, 2.8, 3.3, 3.7, TWO_PI])

    def values(top):
        v = np.array([0.0, 2.0, 2.7, 3 * math.pi / 4, 3 * math.pi / 4, top, TWO_PI])
        return v[:-1], v[1:]

    def excess(top):
        a, b = values(top)
        return float(np.sum(0.5 * (a + b) * np.diff(xs))) - PERIOD_INTEGRAL

    a, b = values(brentq(excess, 2.4, 6.0, xtol=1e-15))
    return Profile.from_pl(xs, a, b, square_J(), 0.0)


def polygon_preset(J: AnisotropyJ) -> Profile:
    """Wulff profile of J: phi = alpha_k while J'(phi) sweeps the subdifferential at alpha_k.

    The profile inverts the staircase J' (shifted by c); c is chosen so that
    phi integrates to 2 pi^2 over a period, and the integral grows with slope
    2 pi in c.
    """
    stair = wulff_profile(J)
    n = J.n

    def pieces(c):
        xs, vals = [0.0], []
        for k in range(-2 * n, 3 * n):
            # staircase values on the gaps either side of alpha_k (midpoints avoid round-off at corners)
            lo = stair(0.5 * (J.corner(k - 1) + J.corner(k))) - c
            hi = stair(0.5 * (J.corner(k) + J.corner(k + 1))) - c
            if hi <= 0.0 or lo >= TWO_PI:
                continue
            vals.append(J.corner(k))
            xs.append(min(hi, TWO_PI))
        return np.array(xs), np.array(vals)

    xs, vals = pieces(0.0)
    c = (PERIOD_INTEGRAL - float(np.sum(vals * np.diff(xs)))) / TWO_PI
    xs, vals = pieces(c)
    keep = np.diff(xs) > 1e-14
    x = np.concatenate([[0.0], xs[1:][keep]])
    return Profile.from_pl(x, vals[keep], vals[keep], J, 0.0)


def preset(name: str, J: AnisotropyJ | None = None) -> Profile:
    """Profile of a named preset; see PRESET_NAMES (corner(m) takes an integer m)."""
    J = J or square_J()
    mt = re.fullmatch(r"corner\((\d+)\)", name)
    if name == "polygon":
        return polygon_preset(J)
    if name == "parabola":
        return Profile.from_pl([0.0, TWO_PI], [0.0], [TWO_PI], J, 0.0)
    if J != square_J():
        raise ValueError(f"preset {name!r} is defined for the square anisotropy only")
    if mt:
        return corner_preset(int(mt.group(1)))
    table = {
        "minimal": _minimal,
        "minimal-reversed": minimal_reversed_preset,
        "two-hump": two_hump_preset,
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}")
    return table[name]()


# -- configuration ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrackerConfig:
    max_events: int = 10_000


@dataclass(frozen=True)
class RegularizedConfig:
    n: int = 1024
    epsilon: float = 2e-3
    dt: float = 1e-3
    theta: float = 1.0


@dataclass(frozen=True)
class SchemeConfig:
    n: int = 1024
    h: float = 1e-3


@dataclass(frozen=True)
class ScenarioConfig:
    initial_data: str
    T: float
    output_dir: str | None = None
    sample_times: tuple[float, ...] = ()
    solvers: tuple[str, ...] = SOLVERS
    anisotropy: AnisotropyJ = field(default_factory=square_J)
    tracker: TrackerConfig = TrackerConfig()
    regularized: RegularizedConfig = RegularizedConfig()
    scheme: SchemeConfig = SchemeConfig()
    convergence_hs: tuple[float, ...] = (4e-3, 2e-3, 1e-3)
    seed: int = 0
    base_dir: str = "."

    # -- parsing -----------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d, base_dir: str | os.PathLike = ".") -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        allowed = {"initial_data", "anisotropy", "solver", "tracker", "regularized", "scheme",
                   "convergence", "T", "sample_times", "output_dir", "seed"}
        for key in sorted(d):
            if key not in allowed:
                raise ConfigError(key, "unknown field")
        if "initial_data" not in d:
            raise ConfigError("initial_data", "missing")
        if "T" not in d:
            raise ConfigError("T", "missing")
        T = _number(d["T"], "T", lo=0.0, lo_open=True, hi=10.0)
        J = _anisotropy(d.get("anisotropy", "square"))
        initial = d["initial_data"]
        if not isinstance(initial, str) or not initial:
            raise ConfigError("initial_data", "must be a preset name or a profile file path")
        if not _is_preset(initial):
            path = Path(base_dir) / initial
            if not path.is_file():
                raise ConfigError("initial_data", f"no preset of that name and no file at {str(path)!r}")
        samples = d.get("sample_times", [])
        if not isinstance(samples, list):
            raise ConfigError("sample_times", "must be a list of numbers")
        st = tuple(_number(x, f"sample_times[{i}]", lo=0.0, hi=T) for i, x in enumerate(samples))
        for i in range(1, len(st)):
            if st[i] <= st[i - 1]:
                raise ConfigError(f"sample_times[{i}]", "sample times must be strictly increasing")
        sel = d.get("solver", "all")
        if sel == "all":
            solvers = SOLVERS
        elif isinstance(sel, str) and sel in SOLVERS:
            solvers = (sel,)
        elif isinstance(sel, list) and sel and all(isinstance(s, str) and s in SOLVERS for s in sel):
            solvers = tuple(s for s in SOLVERS if s in sel)
        else:
            raise ConfigError("solver", f"must be 'all', one of {list(SOLVERS)}, or a list of them")
        if "tracker" in solvers and J != square_J():
            raise ConfigError("solver", "the tracker supports the square anisotropy only; "
                              "select regularized and/or scheme")
        tr = _section(d, "tracker", {"max_events"})
        tracker = TrackerConfig(
            max_events=_integer(tr.get("max_events", 10_000), "tracker.max_events", lo=1)
        )
        rg = _section(d, "regularized", {"n", "epsilon", "dt", "theta"})
        reg = RegularizedConfig(
            n=_integer(rg.get("n", 1024), "regularized.n", lo=8, hi=1 << 16),
            epsilon=_number(rg.get("epsilon", 2e-3), "regularized.epsilon", lo=0.0, lo_open=True, hi=0.5),
            dt=_number(rg.get("dt", 1e-3), "regularized.dt", lo=0.0, lo_open=True, hi=T),
            theta=_number(rg.get("theta", 1.0), "regularized.theta", lo=0.5, hi=1.0),
        )
        sc = _section(d, "scheme", {"n", "h"})
        scheme = SchemeConfig(
            n=_integer(sc.get("n", 1024), "scheme.n", lo=8, hi=1 << 16),
            h=_number(sc.get("h", 1e-3), "scheme.h", lo=0.0, lo_open=True, hi=T),
        )
        cv = _section(d, "convergence", {"hs"})
        hs_raw = cv.get("hs", [4e-3, 2e-3, 1e-3])
        if not isinstance(hs_raw, list) or not hs_raw:
            raise ConfigError("convergence.hs", "must be a non-empty list of step sizes")
        hs = tuple(_number(x, f"convergence.hs[{i}]", lo=0.0, lo_open=True, hi=T) for i, x in enumerate(hs_raw))
        out = d.get("output_dir")
        if out is not None and (not isinstance(out, str) or not out):
            raise ConfigError("output_dir", "must be a non-empty string")
        seed = _integer(d.get("seed", 0), "seed", lo=0, hi=2**32 - 1)
        cfg = cls(initial, T, out, st, solvers, J, tracker, reg, scheme, hs, seed, str(base_dir))
        # the initial profile itself is part of the configuration
        cfg.initial_profile()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScenarioConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("<file>", f"config file {str(path)!r} does not exist")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "initial_data": self.initial_data,
            "anisotropy": {"corners": list(self.anisotropy.corners), "weights": list(self.anisotropy.weights)},
            "solver": list(self.solvers),
            "tracker": {"max_events": self.tracker.max_events},
            "regularized": {"n": self.regularized.n, "epsilon": self.regularized.epsilon,
                            "dt": self.regularized.dt, "theta": self.regularized.theta},
            "scheme": {"n": self.scheme.n, "h": self.scheme.h},
            "convergence": {"hs": list(self.convergence_hs)},
            "T": self.T,
            "sample_times": list(self.sample_times),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def with_overrides(self, solvers=None, output_dir=None, seed=None) -> "ScenarioConfig":
        from dataclasses import replace

        kw = {}
        if solvers is not None:
            kw["solvers"] = SOLVERS if solvers == "all" else (solvers,)
            if "tracker" in kw["solvers"] and self.anisotropy != square_J():
                raise ConfigError("solver", "the tracker supports the square anisotropy only")
        if output_dir is not None:
            kw["output_dir"] = str(output_dir)
        if seed is not None:
            if seed < 0:
                raise ConfigError("seed", "must be a non-negative integer")
            kw["seed"] = int(seed)
        return replace(self, **kw)

    def initial_profile(self) -> Profile:
        """The initial profile; raises ConfigError when it is not admissible."""
        J = self.anisotropy
        if _is_preset(self.initial_data):
            try:
                p = preset(self.initial_data, J)
            except ValueError as exc:
                raise ConfigError("initial_data", str(exc)) from None
        else:
            path = Path(self.base_dir) / self.initial_data
            try:
                p = Profile.from_json(path.read_text())
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError("initial_data", f"cannot read profile {str(path)!r}: {exc}") from None
        errs = validate_jr(p, J)
        if errs:
            raise ConfigError("initial_data", "profile is not admissible: " + "; ".join(errs))
        return p


def _is_preset(name: str) -> bool:
    return name in PRESET_NAMES or re.fullmatch(r"corner\((\d+)\)", name) is not None


def _section(d: dict, key: str, allowed: set[str]) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    for k in sorted(sec):
        if k not in allowed:
            raise ConfigError(f"{key}.{k}", "unknown field")
    return sec


def _number(x, path: str, lo=None, hi=None, lo_open=False) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ConfigError(path, f"must be a finite number, got {x!r}")
    x = float(x)
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo:g}, got {x:g}")
    if hi is not None and x > hi:
        raise ConfigError(path, f"must be <= {hi:g}, got {x:g}")
    return x


def _integer(x, path: str, lo=None, hi=None) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(path, f"must be an integer, got {x!r}")
    if lo is not None and x < lo:
        raise ConfigError(path, f"must be >= {lo}, got {x}")
    if hi is not None and x > hi:
        raise ConfigError(path, f"must be <= {hi}, got {x}")
    return x


def _anisotropy(value) -> AnisotropyJ:
    if value == "square":
        return square_J()
    if not isinstance(value, dict):
        raise ConfigError("anisotropy", "must be 'square' or an object with corners and weights")
    for k in sorted(value):
        if k not in ("corners", "weights"):
            raise ConfigError(f"anisotropy.{k}", "unknown field")
    vals = {}
    for k in ("corners", "weights"):
        v = value.get(k)
        if not isinstance(v, list):
            raise ConfigError(f"anisotropy.{k}", "must be a list of numbers")
        vals[k] = [_number(x, f"anisotropy.{k}[{i}]") for i, x in enumerate(v)]
    try:
        return AnisotropyJ(tuple(vals["corners"]), tuple(vals["weights"]))
    except ValueError as exc:
        raise ConfigError("anisotropy", str(exc)) from None


# -- running ---------------------------------------------------------------------------


@dataclass
class Bundle:
    """In-memory results of a scenario, keyed by solver."""

    config: ScenarioConfig
    profile: Profile
    tracker_state: object = None
    # sample time -> grid samples of w on the regularized / scheme grids
    tracker_on_reg: dict = field(default_factory=dict)
    tracker_on_scheme: dict = field(default_factory=dict)
    tracker_profiles: dict = field(default_factory=dict)
    tracker_omega: dict = field(default_factory=dict)
    reg_initial: GridField | None = None
    reg_snaps: list = field(default_factory=list)
    reg_dissipation: float = 0.0
    reg_energy_bound: float = 0.0
    reg_history: list = field(default_factory=list)
    scheme_run: SchemeRun | None = None


def _run_tracker(b: Bundle) -> None:
    cfg = b.config
    st = detect_initial_facets(b.profile, cfg.anisotropy)
    s_reg = np.arange(cfg.regularized.n) * (TWO_PI / cfg.regularized.n)
    s_sch = np.arange(cfg.scheme.n) * (TWO_PI / cfg.scheme.n)
    for t in cfg.sample_times:
        run_until(st, t, [t], max_events=cfg.tracker.max_events)
        if "regularized" in cfg.solvers:
            b.tracker_on_reg[t] = eval_w(st, s_reg)
        if "scheme" in cfg.solvers:
            b.tracker_on_scheme[t] = eval_w(st, s_sch)
        b.tracker_profiles[t] = profile_at(st)
        b.tracker_omega[t] = build_omega(st)
    run_until(st, cfg.T, max_events=cfg.tracker.max_events)
    b.tracker_state = st


def _run_regularized(b: Bundle) -> None:
    rc = b.config.regularized
    J = b.config.anisotropy
    p = SolverParams(rc.epsilon, rc.dt, rc.theta)
    f0 = field_from_profile(b.profile, rc.n)
    hist = [observables(f0, p, J)]
    with warnings.catch_warnings():
        # the under-resolution warning is reported in the bundle instead
        warnings.simplefilter("ignore")
        final, snaps, diss = run(f0, p, b.config.T, J, b.config.sample_times,
                                 callback=lambda f: hist.append(observables(f, p, J)))
    b.reg_initial = f0
    b.reg_snaps = snaps
    b.reg_dissipation = diss
    lift = TWO_PI * (1.0 + rc.epsilon**2)
    b.reg_energy_bound = hist[0]["energy"] - hist[-1]["energy"] + lift * (final.values[0] - f0.values[0])
    b.reg_history = hist


def _run_scheme(b: Bundle) -> None:
    sc = b.config.scheme
    w0 = grid_samples(b.profile, sc.n)
    b.scheme_run = run_scheme(w0, sc.h, b.config.T, b.config.anisotropy)


def execute(cfg: ScenarioConfig) -> Bundle:
    """Run the selected solvers; solver failures become ScenarioSolverError."""
    b = Bundle(cfg, cfg.initial_profile())
    if "tracker" in cfg.solvers:
        try:
            _run_tracker(b)
        except TrackerInvariantError as exc:
            raise InvariantViolation(f"tracker: {exc}") from exc
    if "regularized" in cfg.solvers:
        try:
            _run_regularized(b)
        except SolverFailure as exc:
            raise ScenarioSolverError(f"regularized solver: {exc}") from exc
    if "scheme" in cfg.solvers:
        try:
            _run_scheme(b)
        except ProxFailure as exc:
            raise ScenarioSolverError(f"semi-discrete scheme: {exc} (residual {exc.residual:.3g})") from exc
    return b


def _scheme_field_at(run_: SchemeRun, t: float) -> np.ndarray:
    """Scheme state held on ((k-1)h, kh]: u^k with k = ceil(t / h)."""
    k = int(math.ceil(t / run_.h - 1e-9))
    return run_.fields[min(k, len(run_.fields) - 1)]


def _norms(diff: np.ndarray) -> tuple[float, float]:
    ds = TWO_PI / len(diff)
    return float(np.max(np.abs(diff))), float(math.sqrt(np.sum(diff * diff) * ds))


def _flag(solver, prop, message, t=None, severity="violation") -> dict:
    return {"solver": solver, "property": prop, "severity": severity,
            "t": t, "message": f"{prop}: {message}"}


def _extremes_interior(phi: np.ndarray, margin: int = 2) -> bool:
    """Both extremes of phi are attained away from the ends of the window.

    The lifted phi jumps by 2 pi across s = 0; an extreme touching that edge
    is not a local extreme of the lifted function, and the window bounds are
    then not invariant.
    """
    for ext in (phi.min(), phi.max()):
        idx = np.flatnonzero(np.abs(phi - ext) <= 1e-12 * max(1.0, abs(ext)))
        if idx.min() < margin or idx.max() >= len(phi) - margin:
            return False
    return True


def cross_validate(b: Bundle) -> dict:
    """Discrepancies between the solvers at the sample times and every invariant flag.

    Flags carry the name of the violated property; severity "warning" marks
    advisory findings such as an under-resolved grid.
    """
    cfg = b.config
    rng = np.random.default_rng(cfg.seed)
    flags: list[dict] = []
    report: dict = {"sample_times": list(cfg.sample_times), "tracker_vs_regularized": [],
                    "tracker_vs_scheme": [], "notes": []}
    w0_ref = {}
    if b.tracker_state is not None:
        for t in cfg.sample_times:
            errs = validate_jr(b.tracker_profiles[t], cfg.anisotropy)
            for e in errs:
                flags.append(_flag("tracker", "admissible profile", e, t))
            # Omega from the facet data against the composition dJ o dw at random points
            xs = np.sort(rng.uniform(0.0, TWO_PI, OMEGA_SAMPLES))
            om = b.tracker_omega[t]
            ref = compose(cfg.anisotropy, b.tracker_profiles[t].phi_pl())
            gap = float(np.max(np.abs(om(xs) - ref(xs))))
            if gap > OMEGA_TOL:
                flags.append(_flag("tracker", "composition identity",
                                   f"Omega differs from dJ o dw by {gap:.3g}", t))
        ms = milestones(b.tracker_state)
        report["tracker_milestones"] = {k: (ms[k] if math.isfinite(ms[k]) else None)
                                        for k in ("T_cx", "T_fa", "T_1")}
    if b.reg_initial is not None:
        rc = cfg.regularized
        msg = resolution_warning(rc.n, rc.epsilon)
        if msg:
            flags.append(_flag("regularized", "under-resolution", msg, severity="warning"))
        h0 = b.reg_history[0]
        tv_prev = h0["tv"]
        if _extremes_interior(grid_phi(b.reg_initial)):
            for obs in b.reg_history[1:]:
                if obs["phimin"] < h0["phimin"] - SLACK or obs["phimax"] > h0["phimax"] + SLACK:
                    flags.append(_flag("regularized", "maximum principle",
                                       f"phi range [{obs['phimin']:.6g}, {obs['phimax']:.6g}] leaves "
                                       f"[{h0['phimin']:.6g}, {h0['phimax']:.6g}]", obs["t"]))
                    break
        else:
            report["notes"].append("maximum principle not checked: an extreme of phi0 touches s = 0")
        for obs in b.reg_history[1:]:
            if obs["tv"] > tv_prev + SLACK:
                flags.append(_flag("regularized", "total variation decay",
                                   f"TV rose from {tv_prev:.12g} to {obs['tv']:.12g}", obs["t"]))
                break
            tv_prev = obs["tv"]
        if b.reg_dissipation > b.reg_energy_bound + 1e-8 * max(1.0, abs(b.reg_energy_bound)):
            flags.append(_flag("regularized", "energy dissipation",
                               f"dissipation {b.reg_dissipation:.6g} exceeds {b.reg_energy_bound:.6g}"))
        s = b.reg_initial.s
        # run() returns one snapshot per sample time, in order
        series = [(t, snap.values + 0.5 * s * s) for t, snap in zip(cfg.sample_times, b.reg_snaps)]
        if b.tracker_state is not None:
            for t, w in series:
                sup, l2 = _norms(w - b.tracker_on_reg[t])
                report["tracker_vs_regularized"].append({"t": float(t), "sup": sup, "l2": l2})
        w0_ref["regularized"] = (b.reg_initial.values + 0.5 * s * s, series)
    if b.scheme_run is not None:
        run_ = b.scheme_run
        for k, (rep, res) in enumerate(zip(run_.reports, run_.residuals), start=1):
            for v in rep.violations:
                flags.append(_flag("scheme", "facet structure", v, run_.times[k]))
            if res > SCHEME_RESIDUAL_TOL:
                flags.append(_flag("scheme", "optimality residual",
                                   f"step residual {res:.3g} above {SCHEME_RESIDUAL_TOL:g}", run_.times[k]))
        for t in cfg.sample_times:
            u = _scheme_field_at(run_, t)
            if b.tracker_state is not None:
                sup, l2 = _norms(u - b.tracker_on_scheme[t])
                report["tracker_vs_scheme"].append({"t": float(t), "sup": sup, "l2": l2})
        w0_ref["scheme"] = (run_.fields[0], [(t, _scheme_field_at(run_, t)) for t in cfg.sample_times])
    if b.tracker_state is not None and cfg.sample_times:
        s = np.linspace(0.0, TWO_PI, 257)[:-1]
        w0 = np.asarray(b.profile.w_at(s))
        w0_ref["tracker"] = (w0, [(t, np.asarray(b.tracker_profiles[t].w_at(s))) for t in cfg.sample_times])
    # unit-speed translation of the initial shape
    if cfg.sample_times and w0_ref:
        drift = {}
        for name, (w0, series) in w0_ref.items():
            drift[name] = max(float(np.max(np.abs(w - w0 - t))) for t, w in series)
        report["translation_drift"] = dict(sorted(drift.items()))
        tol = {"tracker": STATIONARY_TOL, "scheme": STATIONARY_TOL,
               "regularized": 5.0 * cfg.regularized.epsilon}
        if all(drift[k] <= tol[k] for k in drift):
            report["notes"].append("stationary shape, Lambda_t = 1")
    report["flags"] = flags
    report["violations"] = sum(1 for f in flags if f["severity"] == "violation")
    report["warnings"] = sum(1 for f in flags if f["severity"] == "warning")
    return report


# -- plot data -------------------------------------------------------------------------

PLOT_HEADER = ("series", "solver", "t", "s", "value", "label")


def emit_plot_data(b: Bundle) -> str:
    """Long-format CSV: one row per plotted value.

    series "w" and "phi" are curve samples, "facet" rows carry (xi-, xi+) in
    (s, value) with the facet id as label, "milestone" rows carry a time in
    value.  Nothing but the header is written when there are no sample times.
    """
    cfg = b.config
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(PLOT_HEADER)
    if not cfg.sample_times:
        return buf.getvalue()

    def curve(solver, t, s, w, phi):
        for x, y in zip(s, w):
            wr.writerow(["w", solver, repr(float(t)), repr(float(x)), repr(float(y)), ""])
        for x, y in zip(s, phi):
            wr.writerow(["phi", solver, repr(float(t)), repr(float(x)), repr(float(y)), ""])

    if b.tracker_state is not None:
        n = cfg.scheme.n if "scheme" in cfg.solvers else cfg.regularized.n
        s = (np.arange(n) + 0.5) * (TWO_PI / n)
        for t in cfg.sample_times:
            p = b.tracker_profiles[t]
            curve("tracker", t, s, np.asarray(p.w_at(s)), np.asarray(p.phi_at(s)))
        for row in b.tracker_state.trajectory:
            t, fid, xm, xp = row[:4]
            wr.writerow(["facet", "tracker", repr(float(t)), repr(float(xm)), repr(float(xp)), str(fid)])
        ms = milestones(b.tracker_state)
        for key in ("T_cx", "T_fa", "T_1"):
            if math.isfinite(ms[key]):
                wr.writerow(["milestone", "tracker", "", "", repr(float(ms[key])), key])
    if b.reg_initial is not None:
        s = b.reg_initial.s
        mid = (np.arange(b.reg_initial.n) + 0.5) * b.reg_initial.ds
        for snap in b.reg_snaps:
            for x, y in zip(s, snap.values + 0.5 * s * s):
                wr.writerow(["w", "regularized", repr(float(snap.t)), repr(float(x)), repr(float(y)), ""])
            for x, y in zip(mid, grid_phi(snap)):
                wr.writerow(["phi", "regularized", repr(float(snap.t)), repr(float(x)), repr(float(y)), ""])
    if b.scheme_run is not None:
        n = len(b.scheme_run.fields[0])
        ds = TWO_PI / n
        s = np.arange(n) * ds
        mid = s + 0.5 * ds
        for t in cfg.sample_times:
            u = _scheme_field_at(b.scheme_run, t)
            du = (np.append(u[1:], u[0] + PERIOD_INTEGRAL) - u) / ds
            for x, y in zip(s, u):
                wr.writerow(["w", "scheme", repr(float(t)), repr(float(x)), repr(float(y)), ""])
            for x, y in zip(mid, du):
                wr.writerow(["phi", "scheme", repr(float(t)), repr(float(x)), repr(float(y)), ""])
    return buf.getvalue()


# -- bundle output ---------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def bundle_files(b: Bundle, report: dict) -> dict[str, str]:
    """File name -> contents of a bundle."""
    cfg = b.config
    files = {"config.json": _dump(cfg.to_dict()), "initial_profile.json": b.profile.to_json() + "\n"}
    if b.tracker_state is not None:
        files["tracker_trajectory.csv"] = trajectory_csv(b.tracker_state)
        files["tracker_events.json"] = events_json(b.tracker_state)
        files["tracker_milestones.json"] = milestones_json(b.tracker_state)
    if b.reg_initial is not None:
        rc = cfg.regularized
        p = SolverParams(rc.epsilon, rc.dt, rc.theta)
        files["regularized_snapshots.csv"] = snapshot_csv(b.reg_snaps, p, cfg.anisotropy)
        files["regularized_metadata.json"] = _dump({
            "n": rc.n, "epsilon": rc.epsilon, "dt": rc.dt, "theta": rc.theta,
            "dissipation": b.reg_dissipation, "energy_bound": b.reg_energy_bound,
            "initial": b.reg_history[0], "final": b.reg_history[-1],
            "resolution_warning": resolution_warning(rc.n, rc.epsilon),
        })
    if b.scheme_run is not None:
        files["scheme_diagnostics.csv"] = diagnostics_csv(b.scheme_run)
    files["cross_validation.json"] = _dump(report)
    files["plot_data.csv"] = emit_plot_data(b)
    files[MANIFEST] = _dump({"files": sorted(files)})
    return files


def write_atomic(out_dir: str | os.PathLike, files: dict[str, str]) -> Path:
    """Write files into a fresh directory that replaces out_dir in one rename.

    An existing out_dir is replaced only when it holds a previous bundle
    (a manifest) or is empty.
    """
    out = Path(out_dir)
    if out.exists():
        if not out.is_dir() or (any(out.iterdir()) and not (out / MANIFEST).is_file()):
            raise ConfigError("output_dir", f"{str(out)!r} exists and is not a bundle directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    umask = os.umask(0)
    os.umask(umask)
    try:
        os.chmod(tmp, 0o777 & ~umask)
        for name, text in files.items():
            (tmp / name).write_text(text)
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
            os.replace(out, old / "x")
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def run_scenario(cfg: ScenarioConfig, out_dir: str | os.PathLike | None = None):
    """Run a scenario and write its bundle; returns (bundle, report, output path)."""
    target = out_dir if out_dir is not None else cfg.output_dir
    if target is None:
        raise ConfigError("output_dir", "missing (set it in the config or pass --out)")
    b = execute(cfg)
    report = cross_validate(b)
    path = write_atomic(target, bundle_files(b, report))
    return b, report, path


def convergence_table(cfg: ScenarioConfig) -> list[dict]:
    """E(h) of the scheme against the tracker for the configured step sizes."""
    from .semidiscrete import convergence_study

    p = cfg.initial_profile()
    n = cfg.scheme.n
    s = np.arange(n) * (TWO_PI / n)
    st = detect_initial_facets(p, cfg.anisotropy)

    def reference(t):
        run_until(st, t, max_events=cfg.tracker.max_events)
        return eval_w(st, s)

    try:
        return convergence_study(grid_samples(p, n), list(cfg.convergence_hs), cfg.T, reference, cfg.anisotropy)
    except TrackerInvariantError as exc:
        raise InvariantViolation(f"tracker: {exc}") from exc
    except ProxFailure as exc:
        raise ScenarioSolverError(f"semi-discrete scheme: {exc}") from exc


# -- command line ----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facetflow", description="Crystalline curvature flow scenarios")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "run the solvers and write a bundle"),
        ("validate", "check a scenario config"),
        ("convergence", "scheme-vs-tracker error table"),
        ("plotdata", "write long-format plot data only"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        sp.add_argument("--solver", choices=(*SOLVERS, "all"), default=None)
        sp.add_argument("--seed", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = ScenarioConfig.from_file(args.config).with_overrides(args.solver, args.out, args.seed)
        if args.command == "validate":
            print(_dump(cfg.to_dict()), end="")
            return EXIT_OK
        if args.command == "convergence":
            table = convergence_table(cfg)
            text = _dump({"T": cfg.T, "rows": table})
            if cfg.output_dir is not None:
                write_atomic(cfg.output_dir, {"convergence.json": text, MANIFEST: _dump({"files": ["convergence.json"]})})
            print(text, end="")
            return EXIT_OK
        if args.command == "plotdata":
            if cfg.output_dir is None:
                raise ConfigError("output_dir", "missing (set it in the config or pass --out)")
            b = execute(cfg)
            write_atomic(cfg.output_dir, {"plot_data.csv": emit_plot_data(b),
                                          MANIFEST: _dump({"files": ["plot_data.csv"]})})
            return EXIT_OK
        _, report, path = run_scenario(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioSolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    for f in report["flags"]:
        print(f"[{f['severity']}] {f['solver']}: {f['message']}", file=sys.stderr)
    print(f"bundle written to {path}")
    return EXIT_INVARIANT if report["violations"] else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
