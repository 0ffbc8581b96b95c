"""Implicit Euler (proximal) steps for the crystalline flow and their facet diagnostics.

A step maps grid samples v of w = Lambda + s^2/2 to the minimizer u of

    sum_j [h J(Du_j) + 1/2 (u_j - v_j)^2] ds,   u_n = u_0 + 2 pi^2,

where Du_j = (u_{j+1} - u_j) / ds and the flux entering cell 0 is the lifted
one, F_{-1} = F_{n-1} - 2 pi.  The Euler-Lagrange system reads

    u_j - v_j = (h / ds) (F_j - F_{j-1}),   F_j in dJ(Du_j).

The minimizer is first approached through the mollified energies J_eps with
decreasing eps (warm started), then polished to the exact crystalline
solution by a primal-dual active-set iteration: every cell is either on a
facet (slope pinned to a corner, flux free inside the subdifferential) or on
a plateau (flux fixed, slope free).  Each active set gives a sparse linear
system.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from .anisotropy import TWO_PI, AnisotropyJ, square_J
from .jr_profile import PERIOD_INTEGRAL, Profile
from .regularized_solver import GridField, SolverParams, _implicit_solve, _regularized

__all__ = [
    "FacetReport",
    "ProxFailure",
    "ProxResult",
    "ProxStepProblem",
    "SchemeRun",
    "convergence_study",
    "diagnostics_csv",
    "error_table_json",
    "facet_diagnostics",
    "facet_masks",
    "grid_samples",
    "growth_exponent",
    "prox_step",
    "run_scheme",
]

XI_TOL = 1e-4
EPS_SCHEDULE = (1e-3, 1e-4, 1e-5)
GRADIENT_TOL = 1e-11
MAX_ACTIVE_SET_ITERS = 200
_SLACK = 1e-11
RAMP_FACTOR = 0.25


class ProxFailure(RuntimeError):
    """The prox step did not converge; carries the last iterate and its residual."""

    def __init__(self, message: str, u: np.ndarray, residual: float):
        super().__init__(message)
        self.u = u
        self.residual = residual


@dataclass(frozen=True)
class ProxStepProblem:
    v: np.ndarray
    h: float
    anisotropy: AnisotropyJ = field(default_factory=square_J)
    eps_prox: tuple[float, ...] = EPS_SCHEDULE
    guess: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or len(v) < 16:
            raise ValueError("v must be a 1-d array with at least 16 samples")
        if not self.h > 0:
            raise ValueError("h must be positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "eps_prox", tuple(float(e) for e in self.eps_prox))

    @property
    def n(self) -> int:
        return len(self.v)

    @property
    def ds(self) -> float:
        return TWO_PI / self.n


@dataclass
class ProxResult:
    u: np.ndarray
    flux: np.ndarray
    residual: float
    eps_reached: float | None
    active_set_iterations: int
    exact: bool


def grid_samples(p: Profile, n: int) -> np.ndarray:
    """w at s_j = 2 pi j / n."""
    s = np.arange(n) * (TWO_PI / n)
    return np.array([p.w_at(x) for x in s])


def _slopes(u: np.ndarray, ds: float) -> np.ndarray:
    nxt = np.append(u[1:], u[0] + PERIOD_INTEGRAL)
    return (nxt - u) / ds


def _euler_residual(u, v, F, h, ds) -> float:
    prev = np.concatenate([[F[-1] - TWO_PI], F[:-1]])
    return float(np.max(np.abs(u - v - h / ds * (F - prev))))


# -- mollified continuation -------------------------------------------------------


def _mollified_prox(v, h, J, eps, u0, max_iter=60):
    """Minimize the J_eps energy starting from u0; None when Newton stalls."""
    n = len(v)
    ds = TWO_PI / n
    s = np.arange(n) * ds
    shift = 0.5 * s * s
    R = _regularized(J, eps)
    # reuse the implicit step, warm started from u0 by shifting the unknown
    params = SolverParams(epsilon=eps, dt=h, theta=1.0, newton_tol=GRADIENT_TOL, max_iter=max_iter)
    f_old = GridField(n, v - shift)
    L = _implicit_solve(f_old, R, params, h, start=u0 - shift)
    return None if L is None else L + shift


def _ramp(J: AnisotropyJ, eps: float) -> list[float]:
    """Wide-to-narrow mollification widths ending just above eps.

    A corner crossed inside a single grid cell leaves no cell in the
    eps-window and Newton then stalls on the flat part of J_eps; a wide
    window first places cells on the facet.
    """
    out = []
    e = 0.2 * J.min_gap
    while e > eps:
        out.append(e)
        e *= RAMP_FACTOR
    return out


# -- exact active-set polish ----------------------------------------------------------


def _initial_active_set(u, J, ds, eps):
    """Per cell: ('c', K) for a facet at lifted corner K, ('g', P) for plateau P."""
    phi = _slopes(u, ds)
    p, _ = J.locate(phi)
    kinds = []
    for x, pj in zip(phi, p):
        pj = int(pj)
        lo, hi = J.corner(pj), J.corner(pj + 1)
        if x - lo <= eps:
            kinds.append(("c", pj))
        elif hi - x <= eps:
            kinds.append(("c", pj + 1))
        else:
            kinds.append(("g", pj))
    return kinds


def _solve_active_set(v, h, J, kinds):
    n = len(v)
    facet_cells = [j for j, (k, _) in enumerate(kinds) if k == "c"]
    if len(facet_cells) == n:
        return _solve_fully_faceted(v, h, J, kinds)
    ds = TWO_PI / n
    r = h / ds
    col = {j: n + i for i, j in enumerate(facet_cells)}
    size = n + len(col)
    rows, cols, vals = [], [], []
    rhs = np.zeros(size)

    def flux_term(row, cell, coef):
        # add coef * F_cell to the row; F is known on plateau cells
        kind, idx = kinds[cell]
        if kind == "g":
            rhs[row] -= coef * J.plateau(idx)
        else:
            rows.append(row)
            cols.append(col[cell])
            vals.append(coef)

    for i in range(n):
        rows.append(i)
        cols.append(i)
        vals.append(1.0)
        rhs[i] += v[i]
        flux_term(i, i, -r)
        flux_term(i, (i - 1) % n, r)
        if i == 0:
            # F_{-1} = F_{n-1} - 2 pi
            rhs[i] += r * TWO_PI
    for row, j in enumerate(facet_cells, start=n):
        nxt = (j + 1) % n
        rows += [row, row]
        cols += [nxt, j]
        vals += [1.0, -1.0]
        rhs[row] = J.corner(kinds[j][1]) * ds - (PERIOD_INTEGRAL if nxt == 0 else 0.0)
    A = csr_matrix((vals, (rows, cols)), shape=(size, size))
    x = spsolve(A.tocsc(), rhs)
    u = x[:n]
    F = np.array([J.plateau(idx) if kind == "g" else x[col[j]] for j, (kind, idx) in enumerate(kinds)])
    return u, F


def _solve_fully_faceted(v, h, J, kinds):
    """Every cell on a facet: u is a fixed polygon plus a constant, F free up to a constant."""
    n = len(v)
    ds = TWO_PI / n
    alphas = np.array([J.corner(k) for _, k in kinds])
    shape = np.concatenate([[0.0], np.cumsum(alphas[:-1] * ds)])
    # summing the node equations gives sum(u - v) = 2 pi h / ds
    c = (np.sum(v) + h / ds * TWO_PI - np.sum(shape)) / n
    u = shape + c
    F = np.cumsum((u - v) * ds / h)  # F_i - F_{-1}; the constant F_{-1} is free
    lo = np.array([J.plateau(k - 1) for _, k in kinds]) - F
    hi = np.array([J.plateau(k) for _, k in kinds]) - F
    return u, F + 0.5 * (np.max(lo) + np.min(hi))


def _update_active_set(u, F, J, kinds, ds):
    phi = _slopes(u, ds)
    new = list(kinds)
    changed = False
    for j, (kind, idx) in enumerate(kinds):
        if kind == "c":
            if F[j] < J.plateau(idx - 1) - _SLACK:
                new[j] = ("g", idx - 1)
            elif F[j] > J.plateau(idx) + _SLACK:
                new[j] = ("g", idx)
        else:
            if phi[j] < J.corner(idx) - _SLACK:
                new[j] = ("c", idx)
            elif phi[j] > J.corner(idx + 1) + _SLACK:
                new[j] = ("c", idx + 1)
        changed |= new[j] != kinds[j]
    return new, changed


def _exact_polish(v, h, J, u_start, eps):
    ds = TWO_PI / len(v)
    kinds = _initial_active_set(u_start, J, ds, eps)
    for it in range(1, MAX_ACTIVE_SET_ITERS + 1):
        u, F = _solve_active_set(v, h, J, kinds)
        kinds, changed = _update_active_set(u, F, J, kinds, ds)
        if not changed:
            return u, F, it
    return None


def prox_step(p: ProxStepProblem) -> ProxResult:
    """Minimizer of the discrete step energy for the crystalline J.

    A supplied guess seeds the active-set polish directly.  Otherwise, or
    if that fails, after each continuation stage the polish is attempted; its
    fixed point satisfies the exact optimality conditions, so the remaining
    stages are skipped once it succeeds.  If Newton stalls at the first
    scheduled width, the continuation restarts from a wide mollification.
    Raises ProxFailure when no stage leads to a converged polish.
    """
    J = p.anisotropy
    v = p.v
    if p.guess is not None:
        polished = _exact_polish(v, p.h, J, np.asarray(p.guess, dtype=float), XI_TOL)
        if polished is not None:
            u_ex, F, its = polished
            res = _euler_residual(u_ex, v, F, p.h, p.ds)
            if res <= 1e-9:
                return ProxResult(u_ex, F, res, None, its, True)
    widths = [e for e in p.eps_prox if e < 0.5 * J.min_gap]
    if not widths:
        raise ValueError("every eps_prox value exceeds half the smallest corner gap")
    u = v.copy()
    eps_reached = None
    queue = list(widths)
    ramped = False
    while queue:
        eps = queue.pop(0)
        trial = _mollified_prox(v, p.h, J, eps, u)
        if trial is None:
            if ramped or eps_reached is not None:
                break
            ramped = True
            queue = _ramp(J, widths[0]) + widths
            continue
        u, eps_reached = trial, eps
        polished = _exact_polish(v, p.h, J, u, eps)
        if polished is not None:
            u_ex, F, its = polished
            res = _euler_residual(u_ex, v, F, p.h, p.ds)
            if res <= 1e-9:
                return ProxResult(u_ex, F, res, eps, its, True)
    raise ProxFailure(f"prox step did not converge (last epsilon {eps_reached})", u, math.inf)


# -- facet diagnostics -----------------------------------------------------------------


def facet_masks(u: np.ndarray, J: AnisotropyJ, tol: float = XI_TOL) -> dict[int, np.ndarray]:
    """Per corner index l (mod N), the cells whose slope is within tol of alpha_l."""
    ds = TWO_PI / len(u)
    phi = _slopes(u, ds)
    out = {}
    for l, a in enumerate(J.corners):
        d = np.abs(np.mod(phi - a + math.pi, TWO_PI) - math.pi)
        out[l] = d <= tol
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Cyclic runs of True as (start, length)."""
    n = len(mask)
    if mask.all():
        return [(0, n)]
    if not mask.any():
        return []
    start = int(np.argmin(mask))  # a False cell
    runs = []
    j = 0
    while j < n:
        c = (start + j) % n
        if mask[c]:
            k = j
            while k < n and mask[(start + k) % n]:
                k += 1
            runs.append((c, k - j))
            j = k
        else:
            j += 1
    return runs


def _merge_close(mask: np.ndarray, gap: int) -> np.ndarray:
    """Fill False stretches of length <= gap lying between True cells."""
    out = mask.copy()
    n = len(mask)
    for start, length in _runs(~mask):
        if length <= gap and length < n:
            for k in range(length):
                out[(start + k) % n] = True
    return out


def _facet_count(u: np.ndarray, J: AnisotropyJ, tol: float, merge: int) -> int:
    """Facet components plus corners crossed between two adjacent non-facet cells."""
    ds = TWO_PI / len(u)
    masks = facet_masks(u, J, tol)
    count = sum(len(_runs(_merge_close(m, merge))) for m in masks.values())
    phi = _slopes(u, ds)
    any_facet = np.zeros(len(u), bool)
    for m in masks.values():
        any_facet |= m
    nxt = np.append(phi[1:], phi[0] + TWO_PI)
    nxt_facet = np.roll(any_facet, -1)
    for j in range(len(u)):
        if any_facet[j] or nxt_facet[j]:
            continue
        lo, hi = sorted((phi[j], nxt[j]))
        count += len(J.corners_between(lo, hi, closed=False))
    return count


@dataclass
class FacetReport:
    xi_inclusion: bool
    K_prev: int
    K_new: int
    off_xi_max: float
    omega_variation: float
    l1: float
    linf: float
    new_facet_measure: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def facet_diagnostics(
    v: np.ndarray,
    u: np.ndarray,
    h: float,
    J: AnisotropyJ | None = None,
    K0: int | None = None,
    tol: float = XI_TOL,
) -> FacetReport:
    """Structural checks of one step v -> u.

    Grid tolerance is two cells; slopes within tol of a corner count as facet
    cells.  Constancy of dOmega/ds is checked on cells that were already facet
    cells of v, where both v and u are affine.
    """
    J = J or square_J()
    n = len(u)
    ds = TWO_PI / n
    merge = 2
    old = facet_masks(v, J, tol)
    new = facet_masks(u, J, tol)
    inclusion = True
    for l in old:
        near = new[l].copy()
        for k in range(1, merge + 1):
            near |= np.roll(new[l], k) | np.roll(new[l], -k)
        if np.any(old[l] & ~near):
            inclusion = False
    K_prev = _facet_count(v, J, tol, merge)
    K_new = _facet_count(u, J, tol, merge)
    diff = u - v
    any_new = np.zeros(n, bool)
    for m in new.values():
        any_new |= m
    # nodes whose neighbouring cells are away from every facet (two-cell margin)
    near_xi = any_new.copy()
    for k in range(1, merge + 1):
        near_xi |= np.roll(any_new, k) | np.roll(any_new, -k)
    off = ~(near_xi | np.roll(near_xi, 1))
    off_xi_max = float(np.max(np.abs(diff[off]))) if off.any() else 0.0
    omega_var = 0.0
    for l in old:
        both = old[l] & new[l]
        for start, length in _runs(both):
            if length < 2:
                continue
            # node i sits between cells i-1 and i
            nodes = [(start + k) % n for k in range(1, length)]
            vals = diff[nodes] / h
            omega_var = max(omega_var, float(vals.max() - vals.min()))
    l1 = float(np.sum(np.abs(diff)) * ds)
    linf = float(np.max(np.abs(diff)))
    new_measure = float(sum(np.count_nonzero(new[l] & ~old[l]) for l in new) * ds)
    violations = []
    if not inclusion:
        violations.append("facet set shrank (Xi inclusion)")
    if K_new > K_prev:
        violations.append(f"facet count grew {K_prev} -> {K_new}")
    if off_xi_max > tol:
        violations.append(f"u != v off the facets ({off_xi_max:.3g})")
    if omega_var > 1e-6:
        violations.append(f"dOmega/ds not constant on a facet ({omega_var:.3g})")
    if K0 is not None and l1 > h * (math.pi / 2) * K0 * (1 + 1e-9):
        violations.append(f"L1 step bound exceeded ({l1:.3g})")
    return FacetReport(inclusion, K_prev, K_new, off_xi_max, omega_var, l1, linf, new_measure, violations)


# -- runs -------------------------------------------------------------------------------


@dataclass
class SchemeRun:
    h: float
    times: list[float]
    fields: list[np.ndarray]
    reports: list[FacetReport]
    residuals: list[float]


def run_scheme(
    w0: np.ndarray,
    h: float,
    T: float,
    J: AnisotropyJ | None = None,
    eps_prox: tuple[float, ...] = EPS_SCHEDULE,
    diagnostics: bool = True,
) -> SchemeRun:
    """Iterate floor(T/h) prox steps from grid samples w0 of w."""
    J = J or square_J()
    u = np.asarray(w0, dtype=float)
    steps = int(math.floor(T / h + 1e-9))
    K0 = _facet_count(u, J, XI_TOL, 2)
    out = SchemeRun(h, [0.0], [u.copy()], [], [])
    for k in range(1, steps + 1):
        # after the first step the facets of u are exact and seed the active set
        guess = u if k > 1 else None
        res = prox_step(ProxStepProblem(u, h, J, eps_prox, guess))
        if diagnostics:
            out.reports.append(facet_diagnostics(u, res.u, h, J, K0))
        out.residuals.append(res.residual)
        u = res.u
        out.times.append(k * h)
        out.fields.append(u.copy())
    return out


def growth_exponent(w0: np.ndarray, hs, J: AnisotropyJ | None = None) -> tuple[float, list[float]]:
    """Log-log slope of the first-step new-facet measure against h."""
    meas = []
    for h in hs:
        res = prox_step(ProxStepProblem(w0, h, J or square_J()))
        meas.append(facet_diagnostics(w0, res.u, h, J).new_facet_measure)
    slope = float(np.polyfit(np.log(hs), np.log(meas), 1)[0])
    return slope, meas


def convergence_study(
    w0: np.ndarray,
    hs,
    T: float,
    reference,
    J: AnisotropyJ | None = None,
    quad_points: int = 3,
) -> list[dict]:
    """E(h) = int_0^T ||w_ref(t) - u^{k(t)}||_{L2} dt for the piecewise-constant scheme.

    u^k is held on ((k-1)h, kh].  reference(t) returns grid samples of the
    reference w at time t; it is called with non-decreasing times, so a
    forward-only solver can serve it.  Each step interval is integrated by
    Gauss-Legendre quadrature.
    """
    n = len(w0)
    ds = TWO_PI / n
    nodes, weights = np.polynomial.legendre.leggauss(quad_points)
    runs = {}
    wanted = set()
    for h in hs:
        runs[h] = run_scheme(w0, h, T, J, diagnostics=False)
        for k in range(1, len(runs[h].times)):
            a = (k - 1) * h
            wanted.update(float(a + 0.5 * h * (1.0 + x)) for x in nodes)
    ref = {t: np.asarray(reference(t), dtype=float) for t in sorted(wanted)}
    table = []
    for h in hs:
        run = runs[h]
        err = 0.0
        for k in range(1, len(run.times)):
            a = (k - 1) * h
            for x, wq in zip(nodes, weights):
                t = float(a + 0.5 * h * (1.0 + x))
                diff = ref[t] - run.fields[k]
                err += 0.5 * h * wq * math.sqrt(float(np.sum(diff * diff) * ds))
        table.append({"h": float(h), "E": float(err)})
    return table


def diagnostics_csv(run: SchemeRun) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t", "K_prev", "K_new", "xi_inclusion", "off_xi_max", "omega_variation",
                "l1", "linf", "new_facet_measure", "residual"])
    for k, (rep, res) in enumerate(zip(run.reports, run.residuals), start=1):
        w.writerow([k, repr(run.times[k]), rep.K_prev, rep.K_new, int(rep.xi_inclusion),
                    repr(rep.off_xi_max), repr(rep.omega_variation), repr(rep.l1), repr(rep.linf),
                    repr(rep.new_facet_measure), repr(res)])
    return buf.getvalue()


def error_table_json(table: list[dict]) -> str:
    return json.dumps({"rows": table}, indent=2, sort_keys=True) + "\n"
