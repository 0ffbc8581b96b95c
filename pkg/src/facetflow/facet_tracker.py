"""Event-driven construction of the almost classical solution for the square J.

Between events the profile w0 is frozen and only facet data evolve: every
facet k carries a line x -> alpha_k x + C_k + tau_k that replaces w0 on
[xi_k^-, xi_k^+].  A facet whose neighbours are smooth moves by the exact
area law

    integral over the facet of (line - w0) = DeltaOmega * (t - t_i),

solved per piece of the piecewise-quadratic w0.  Chains of touching facets
(groups) share junctions given by intersecting lines and are integrated with
an adaptive Runge-Kutta pair.  Events are collisions of free ends and the
disappearance of zero-curvature facets inside groups; at each event the
profile is re-frozen and a new epoch starts.

Positions are kept on the universal cover (the real line); the periodic
extension of w0 is w0(y + 2 pi m) = w0(y) + m I + 2 pi m y + 2 pi^2 m (m - 1)
with I = 2 pi^2 for admissible profiles.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45
from scipy.optimize import brentq

from .anisotropy import ANGLE_TOL, TWO_PI, AnisotropyJ, dJ, square_J
from .composition import compose
from .jr_profile import POSITION_TOL, PiecewiseLinear, Profile, validate_jr, xi_sets

__all__ = [
    "DELTA_OMEGA",
    "EventRecord",
    "FacetState",
    "FrozenW",
    "TrackerInvariantError",
    "TrackerState",
    "apply_event",
    "build_omega",
    "detect_initial_facets",
    "detect_next_event",
    "envelope_profile",
    "eval_w",
    "events_json",
    "fan_coefficients",
    "liapunov_F",
    "milestones",
    "milestones_json",
    "omega_endpoints",
    "profile_at",
    "run_until",
    "shift_roots",
    "step_group",
    "step_noninteracting",
    "trajectory_csv",
]

DELTA_OMEGA = math.pi / 2
MERGE_TOL = 1e-9
MIN_LENGTH = 1e-8
EVENT_XTOL = 1e-13
RTOL = 1e-10
ATOL = 1e-12
SQUARE_GAP_TOL = 1e-9
SELF_SIMILAR_T0 = 1e-12


class TrackerInvariantError(RuntimeError):
    """Raised when the tracker state breaks one of its structural invariants."""


# -- frozen profile on the cover ------------------------------------------------


class FrozenW:
    """w0 and phi0 = w0' of a profile on the universal cover."""

    def __init__(self, profile: Profile):
        self.profile = profile
        pl = profile.phi_pl()
        self.x = pl.x
        self.v0 = pl.v0
        self.v1 = pl.v1
        inc = 0.5 * (pl.v0 + pl.v1) * np.diff(pl.x)
        self.W = profile.base_height + np.concatenate([[0.0], np.cumsum(inc)])
        self.I = float(self.W[-1] - self.W[0])
        self.n = len(self.v0)
        # integral of w over each base piece
        L = np.diff(pl.x)
        q = (pl.v1 - pl.v0) / L
        self._piece_int = self.W[:-1] * L + pl.v0 * L**2 / 2 + q * L**3 / 6
        self._q = q

    def locate(self, x: float, side: int = 1) -> tuple[int, int]:
        m = math.floor((x - self.x[0]) / TWO_PI)
        y = x - TWO_PI * m
        if side >= 0:
            i = int(np.searchsorted(self.x, y, side="right")) - 1
        else:
            i = int(np.searchsorted(self.x, y, side="left")) - 1
        if i < 0:
            i, m = self.n - 1, m - 1
        elif i >= self.n:
            i, m = 0, m + 1
        return i, m

    def coeffs(self, i: int, m: int) -> tuple[float, float, float, float, float]:
        """(left end, length, w at left end, phi at left end, phi slope) of a lifted piece."""
        xl = float(self.x[i])
        L = float(self.x[i + 1] - xl)
        wl = float(self.W[i]) + m * self.I + TWO_PI * m * xl + 2 * math.pi**2 * m * (m - 1)
        return xl + TWO_PI * m, L, wl, float(self.v0[i]) + TWO_PI * m, float(self._q[i])

    def w(self, x: float) -> float:
        i, m = self.locate(x)
        xl, L, wl, b, q = self.coeffs(i, m)
        d = x - xl
        return wl + b * d + 0.5 * q * d * d

    def phi(self, x: float, side: int = 1) -> float:
        i, m = self.locate(x, side)
        xl, L, wl, b, q = self.coeffs(i, m)
        return b + q * (x - xl)

    def integral(self, a: float, b: float) -> float:
        """Integral of w0 over [a, b] on the cover."""
        if b < a:
            return -self.integral(b, a)
        total = 0.0
        x = a
        while x < b:
            i, m = self.locate(x)
            xl, L, wl, p, q = self.coeffs(i, m)
            xe = min(b, xl + L)
            d0, d1 = x - xl, xe - xl
            total += wl * (d1 - d0) + p * (d1**2 - d0**2) / 2 + q * (d1**3 - d0**3) / 6
            if xe <= x:  # round-off guard
                xe = np.nextafter(x, np.inf)
            x = xe
        return total

    def crossing(
        self,
        alpha: float,
        C: float,
        tau: float,
        x0: float,
        direction: int,
        side_sign: int,
        reach: float = 2 * TWO_PI,
    ) -> float:
        """First x beyond x0 (in direction) where side_sign*(w0 - alpha x - C - tau) >= 0."""
        if side_sign == 0 or (tau == 0.0 and abs(self.w(x0) - alpha * x0 - C) <= 1e-13):
            return x0
        x = x0
        limit = x0 + direction * reach
        i, m = self.locate(x0, direction)
        for _ in range(4 * self.n * int(reach / TWO_PI + 2)):
            xl, L, wl, b, q = self.coeffs(i, m)
            # g(d) = side_sign * (wl + b d + q d^2/2 - alpha (xl + d) - C - tau)
            a0 = side_sign * (wl - alpha * xl - C - tau)
            a1 = side_sign * (b - alpha)
            a2 = side_sign * 0.5 * q
            if direction > 0:
                d_end = min(L, limit - xl)
            else:
                d_end = max(0.0, limit - xl)
            root = _first_root(a0, a1, a2, min(max(x - xl, 0.0), L), d_end)
            if root is not None:
                return xl + root
            if direction > 0:
                if xl + L >= limit:
                    break
                x = xl + L
                i += 1
                if i == self.n:
                    i, m = 0, m + 1
            else:
                if xl <= limit:
                    break
                x = xl
                i -= 1
                if i < 0:
                    i, m = self.n - 1, m - 1
        raise TrackerInvariantError("free end left the admissible range (missed collision)")


def _first_root(a0: float, a1: float, a2: float, d_start: float, d_end: float) -> float | None:
    """First d from d_start toward d_end with g(d) = a0 + a1 d + a2 d^2 >= 0."""
    g = lambda d: a0 + a1 * d + a2 * d * d  # noqa: E731
    if g(d_start) >= 0:
        return d_start
    if g(d_end) < 0:
        # a quadratic can dip above zero strictly inside and come back
        if a2 < 0:
            dv = -a1 / (2 * a2)
            if min(d_start, d_end) < dv < max(d_start, d_end) and g(dv) >= 0:
                d_end = dv
            else:
                return None
        else:
            return None
    lo, hi = d_start, d_end
    # closed form candidates, then one bracketed polish
    cands = []
    if abs(a2) > 1e-300:
        disc = a1 * a1 - 4 * a2 * a0
        if disc >= 0:
            sq = math.sqrt(disc)
            qq = -0.5 * (a1 + math.copysign(sq, a1))
            if qq != 0:
                cands.extend([qq / a2, a0 / qq])
    elif a1 != 0:
        cands.append(-a0 / a1)
    lo_b, hi_b = min(lo, hi), max(lo, hi)
    good = [c for c in cands if lo_b - 1e-12 <= c <= hi_b + 1e-12]
    if good:
        best = min(good, key=lambda c: abs(c - d_start))
        return min(max(best, lo_b), hi_b)
    return brentq(g, lo, hi, xtol=1e-16)


def shift_roots(f: "FacetState", tau: float, w0: FrozenW, sides=(-1, 1)) -> tuple[float, float]:
    """Endpoints of a non-interacting facet after a vertical shift tau of its line."""
    xm = w0.crossing(f.alpha, f.C0, tau, f.xm0, -1, -f.side_sign[0]) if -1 in sides else f.xi_minus
    xp = w0.crossing(f.alpha, f.C0, tau, f.xp0, 1, f.side_sign[1]) if 1 in sides else f.xi_plus
    return xm, xp


# -- state ------------------------------------------------------------------------


@dataclass
class FacetState:
    id: int
    alpha: float
    xi_minus: float
    xi_plus: float
    tau: float = 0.0
    omega_minus: float = 0.0
    omega_plus: float = 0.0
    curvature_class: str = "convex"
    group: int | None = None
    anchor: tuple[float, float] = (0.0, 0.0)
    # side signs: sign(phi - alpha) just outside each end (or neighbour angle)
    side_sign: tuple[int, int] = (-1, 1)
    joined: tuple[bool, bool] = (False, False)
    tau_total0: float = 0.0
    # epoch-start end positions
    xm0: float = 0.0
    xp0: float = 0.0

    @property
    def C0(self) -> float:
        """Offset of the epoch-start line alpha x + C0."""
        return self.anchor[1] - self.alpha * self.anchor[0]

    @property
    def delta_omega(self) -> float:
        return self.omega_plus - self.omega_minus

    @property
    def length(self) -> float:
        return self.xi_plus - self.xi_minus

    @property
    def tau_total(self) -> float:
        return self.tau_total0 + self.tau

    def line(self, x: float) -> float:
        return self.alpha * x + self.C0 + self.tau


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str
    facets: tuple[int, ...]


@dataclass
class TrackerState:
    w0: Profile
    facets: list[FacetState]
    t: float = 0.0
    epoch: int = 0
    epoch_times: list[float] = field(default_factory=lambda: [0.0])
    facet_counts: list[int] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    J: AnisotropyJ = field(default_factory=square_J)
    # group integration bookkeeping
    group_ids: list[list[int]] = field(default_factory=list)
    ring: bool = False
    step_log: list[dict] = field(default_factory=list)
    trajectory: list[tuple] = field(default_factory=list)
    T_fa: float = math.inf
    T_cx: float = 0.0
    T_1: float = math.inf
    _frozen: FrozenW | None = None
    _next_id: int = 0
    _ode_y: np.ndarray | None = None
    _ode_t: float = 0.0
    _dense: list = field(default_factory=list)
    _solver: object = None
    _fans: list = field(default_factory=list)
    _fan_t: float = 0.0

    @property
    def frozen(self) -> FrozenW:
        if self._frozen is None:
            self._frozen = FrozenW(self.w0)
        return self._frozen

    @property
    def N(self) -> int:
        return len(self.facets)


# -- classification ------------------------------------------------------------------


def _side_value(pl: PiecewiseLinear, x: float, side: int, alpha: float) -> float:
    """Representative value of phi just outside x on the given side.

    When phi approaches alpha continuously, the far end of the adjacent
    piece tells on which side of alpha it lies.
    """
    lim = float(pl(x, side))
    if abs(lim - alpha) > ANGLE_TOL:
        return lim
    m = math.floor((x - pl.x[0]) / TWO_PI)
    y = x - TWO_PI * m
    n = pl.n_pieces
    if side < 0:
        j = int(np.searchsorted(pl.x, y, side="left")) - 1
        shift = 0.0
        if j < 0:
            j, shift = n - 1, -TWO_PI
        return float(pl.v0[j] + shift + TWO_PI * m)
    j = int(np.searchsorted(pl.x, y, side="right")) - 1
    shift = 0.0
    if j >= n:
        j, shift = 0, TWO_PI
    return float(pl.v1[j] + shift + TWO_PI * m)


def _sign(v: float) -> int:
    return 1 if v > ANGLE_TOL else (-1 if v < -ANGLE_TOL else 0)


def _class_from_signs(sl: int, sr: int) -> str:
    if sl < 0 < sr:
        return "convex"
    if sl > 0 > sr:
        return "concave"
    return "zero"


def _build_facets(p: Profile, J: AnisotropyJ, prev: list[FacetState] | None, next_id: int):
    """Facets of a profile with adjacency, side signs, classes and slope sections."""
    xs = xi_sets(p, J)
    comps = list(xs.components)
    pl = p.phi_pl()
    facets: list[FacetState] = []
    for c in comps:
        facets.append(FacetState(id=-1, alpha=c.alpha, xi_minus=c.lo, xi_plus=c.hi))
    n = len(facets)
    # adjacency (cyclic); the last facet meets the first one shifted by 2 pi
    for k in range(n):
        f, g = facets[k], facets[(k + 1) % n]
        shift = TWO_PI if k == n - 1 else 0.0
        touch = abs(g.xi_minus + shift - f.xi_plus) <= POSITION_TOL * 10
        # neighbours through a jump that skips no corner angle
        ga = g.alpha + shift
        adjacent = abs(ga - f.alpha) > ANGLE_TOL and not J.corners_between(
            min(ga, f.alpha), max(ga, f.alpha), closed=False
        )
        if n == 1:
            touch = touch and abs(f.xi_plus - f.xi_minus - TWO_PI) <= 1e-9
        if touch and adjacent:
            f.joined = (f.joined[0], True)
            g.joined = (True, g.joined[1])
    for k, f in enumerate(facets):
        if f.joined[0]:
            g = facets[(k - 1) % n]
            ga = g.alpha - (TWO_PI if k == 0 else 0.0)
            sl = _sign(ga - f.alpha)
        else:
            sl = _sign(_side_value(pl, f.xi_minus, -1, f.alpha) - f.alpha)
        if f.joined[1]:
            g = facets[(k + 1) % n]
            ga = g.alpha + (TWO_PI if k == n - 1 else 0.0)
            sr = _sign(ga - f.alpha)
        else:
            sr = _sign(_side_value(pl, f.xi_plus, 1, f.alpha) - f.alpha)
        f.side_sign = (sl, sr)
        f.curvature_class = _class_from_signs(sl, sr)
    # ids: reuse the id of an overlapping previous facet
    used = set()
    for f in facets:
        best = None
        if prev:
            for g in prev:
                if g.id in used:
                    continue
                for sh in (-TWO_PI, 0.0, TWO_PI):
                    if (
                        abs(g.alpha + sh - f.alpha) <= 1e-9
                        and g.xi_minus + sh <= f.xi_plus + 1e-9
                        and g.xi_plus + sh >= f.xi_minus - 1e-9
                    ):
                        if best is None or g.id < best.id:
                            best = g
        if best is not None:
            f.id = best.id
            f.tau_total0 = best.tau_total
            used.add(best.id)
        else:
            f.id = next_id
            next_id += 1
    return facets, next_id


def omega_endpoints(state: TrackerState) -> None:
    """Assign Omega^- and Omega^+ to every facet from its side signs."""
    J = state.J
    for f in state.facets:
        k = J.corner_index(f.alpha)
        if k is None:
            raise TrackerInvariantError(f"facet {f.id} angle {f.alpha!r} is not a corner")
        iv = J.corner_subdiff(k)
        f.omega_minus = iv.lo if f.side_sign[0] < 0 else iv.hi
        f.omega_plus = iv.lo if f.side_sign[1] < 0 else iv.hi
    # consistency across junctions
    n = len(state.facets)
    for k, f in enumerate(state.facets):
        if f.joined[1]:
            g = state.facets[(k + 1) % n]
            shift = TWO_PI if k == n - 1 else 0.0
            if abs(g.omega_minus + shift - f.omega_plus) > 1e-9:
                raise TrackerInvariantError(
                    f"slope sections disagree at the junction of facets {f.id} and {g.id}"
                )


def _groups(facets: list[FacetState]) -> tuple[list[list[int]], bool]:
    """Index chains of joined facets; the flag is True for a closed ring."""
    n = len(facets)
    if n == 0:
        return [], False
    if all(f.joined[1] for f in facets):
        return [list(range(n))], True
    # start after a facet whose right side is free
    start = next(k for k in range(n) if not facets[k].joined[1]) + 1
    chains: list[list[int]] = []
    cur: list[int] = []
    for j in range(n):
        k = (start + j) % n
        cur.append(k)
        if not facets[k].joined[1]:
            chains.append(cur)
            cur = []
    if cur:
        chains.append(cur)
    return chains, False


# -- construction ----------------------------------------------------------------------


def detect_initial_facets(p: Profile, J: AnisotropyJ | None = None) -> TrackerState:
    """Initial tracker state from a JR profile."""
    J = J or square_J()
    errs = validate_jr(p, J)
    if errs:
        raise ValueError("profile is not admissible: " + errs[0])
    facets, next_id = _build_facets(p, J, None, 0)
    # zero-length zero-curvature facets disappear at once
    keep = [f for f in facets if not (f.curvature_class == "zero" and f.length <= POSITION_TOL)]
    state = TrackerState(w0=p, facets=[], J=J)
    state._next_id = next_id
    if len(keep) != len(facets):
        dropped = [f.id for f in facets if f not in keep]
        state.events.append(EventRecord(0.0, "zero_extinction", tuple(dropped)))
    _start_epoch(state, p, prev=None, facets=facets if len(keep) == len(facets) else None)
    state.facet_counts = [len(state.facets)]
    _check_full(state)
    return state


def _start_epoch(state: TrackerState, p: Profile, prev, facets=None) -> None:
    """Freeze p and (re)build facet data for a new epoch."""
    state.w0 = p
    state._frozen = None
    if facets is None:
        facets, state._next_id = _build_facets(p, state.J, prev, state._next_id)
        facets = [f for f in facets if not (f.curvature_class == "zero" and f.length <= POSITION_TOL)]
        if prev is None:
            # re-derive adjacency after removing degenerate zero facets
            pass
    fw = state.frozen
    for f in facets:
        f.xm0, f.xp0 = f.xi_minus, f.xi_plus
        f.anchor = (f.xi_minus, fw.w(f.xi_minus))
        f.tau = 0.0
    state.facets = facets
    omega_endpoints(state)
    chains, ring = _groups(facets)
    state.group_ids = [c for c in chains if len(c) > 1 or ring]
    state.ring = ring
    for gi, c in enumerate(state.group_ids):
        for k in c:
            facets[k].group = gi
    for c in chains:
        if len(c) == 1 and not ring:
            facets[c[0]].group = None
    state._ode_y = None
    state._ode_t = state.t
    state._dense = []
    state._solver = None
    state._fans = []


# -- closed form motion of a lone facet --------------------------------------------------


def _area(f: FacetState, w0: FrozenW, tau: float) -> tuple[float, float, float]:
    """(area between the shifted line and w0, xi^-, xi^+) for a lone facet."""
    xm, xp = shift_roots(f, tau, w0)
    line_int = f.alpha * (xp * xp - xm * xm) / 2 + (f.C0 + tau) * (xp - xm)
    return abs(line_int - w0.integral(xm, xp)), xm, xp


def _tau_of_time(f: FacetState, w0: FrozenW, elapsed: float) -> float:
    """Solve area(tau) = |DeltaOmega| * elapsed for the signed shift tau."""
    dOm = f.delta_omega
    if abs(dOm) <= 1e-15 or elapsed <= 0:
        return 0.0
    sgn = 1.0 if dOm > 0 else -1.0
    target = abs(dOm) * elapsed
    hi = max(1e-12, target)
    while _area(f, w0, sgn * hi)[0] < target:
        hi *= 4.0
        if hi > 1e6:
            raise TrackerInvariantError(f"facet {f.id}: area law has no solution")
    # Newton on the monotone area function with bisection safeguard
    lo = 0.0
    x = hi / 2
    for _ in range(200):
        A, xm, xp = _area(f, w0, sgn * x)
        r = A - target
        if r > 0:
            hi = x
        else:
            lo = x
        dA = xp - xm
        nx = x - r / dA if dA > 0 else 0.5 * (lo + hi)
        if not (lo < nx < hi):
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 1e-15 * max(1.0, x):
            x = nx
            break
        x = nx
    return sgn * x


def step_noninteracting(state: TrackerState, f: FacetState, t: float) -> None:
    """Place a lone facet at time t of the current epoch (exact area law)."""
    w0 = state.frozen
    if f.curvature_class == "zero":
        f.tau = 0.0
        f.xi_minus, f.xi_plus = f.xm0, f.xp0
        return
    f.tau = _tau_of_time(f, w0, t - state.epoch_times[-1])
    f.xi_minus, f.xi_plus = shift_roots(f, f.tau, w0)


# -- groups ----------------------------------------------------------------------------


def _chain_shifts(chain: list[int]) -> list[int]:
    """Number of period wraps before each member of a chain in facet order."""
    m = [0]
    for j in range(1, len(chain)):
        m.append(m[-1] + (1 if chain[j] < chain[j - 1] else 0))
    return m


def _group_positions(state: TrackerState, chain: list[int], taus: np.ndarray) -> np.ndarray:
    """Endpoints (len(chain)+1 values) of a chain for given shifts.

    Positions are in the frame of the first member; member j lives
    2 pi * _chain_shifts(chain)[j] to the right of its own base frame.
    """
    fs = [state.facets[k] for k in chain]
    w0 = state.frozen
    m = len(fs)
    shifts = _chain_shifts(chain)
    lines = [_lift_line(f.alpha, f.C0, sh) for f, sh in zip(fs, shifts)]
    pos = np.empty(m + 1)
    for j in range(m - 1):
        (fa, fC), (ga, gC) = lines[j], lines[j + 1]
        pos[j + 1] = (gC + taus[j + 1] - fC - taus[j]) / (fa - ga)
    if state.ring:
        fa, fC = lines[-1]
        ga, gC = _lift_line(fs[0].alpha, fs[0].C0, shifts[-1] + 1)
        pos[m] = (gC + taus[0] - fC - taus[-1]) / (fa - ga)
        pos[0] = pos[m] - TWO_PI * (shifts[-1] + 1)
    else:
        f = fs[0]
        pos[0] = w0.crossing(f.alpha, f.C0, taus[0], f.xm0, -1, -f.side_sign[0])
        f = fs[-1]
        pos[m] = w0.crossing(f.alpha, f.C0, taus[-1], f.xp0, 1, f.side_sign[1]) + TWO_PI * shifts[-1]
    return pos


def _lift_line(alpha: float, C: float, m: int) -> tuple[float, float]:
    """Line alpha x + C moved m periods to the right on the cover."""
    return alpha + TWO_PI * m, C - TWO_PI * m * alpha - 2 * math.pi**2 * m * m


def _ode_layout(state: TrackerState) -> list[int]:
    return [k for c in state.group_ids for k in c]


def _ode_rhs(state: TrackerState, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    off = 0
    for c in state.group_ids:
        taus = y[off : off + len(c)]
        pos = _group_positions(state, c, taus)
        lengths = np.diff(pos)
        for j, k in enumerate(c):
            f = state.facets[k]
            dOm = f.delta_omega
            if abs(dOm) > 1e-15:
                L = lengths[j]
                if L <= 0:
                    raise TrackerInvariantError(f"facet {f.id} collapsed inside a group")
                out[off + j] = dOm / L
        off += len(c)
    return out


def _degenerate_runs(state: TrackerState, chain: list[int]) -> list[tuple[int, int]]:
    """Maximal runs [j0, j1) of zero-length moving facets inside a chain."""
    runs = []
    j = 0
    while j < len(chain):
        f = state.facets[chain[j]]
        if f.length <= POSITION_TOL and f.curvature_class != "zero":
            j0 = j
            while j < len(chain):
                g = state.facets[chain[j]]
                if not (g.length <= POSITION_TOL and g.curvature_class != "zero"):
                    break
                j += 1
            runs.append((j0, j))
        else:
            j += 1
    return runs


def _self_similar_betas(alphas: np.ndarray, d_omega: np.ndarray, pL: float, pR: float) -> np.ndarray:
    """Coefficients beta_j of the lines alpha_j (x - x*) + beta_j sqrt(t) of a facet fan.

    The fan opens from one point between the outer slopes pL and pR; each
    member satisfies beta_j * (scaled length) = 2 DeltaOmega_j.  Given beta_1
    the junctions follow one by one, so a scalar shooting on beta_1 matches
    the far free end.
    """
    m = len(alphas)
    sgn = 1.0 if d_omega[0] > 0 else -1.0

    def march(b1):
        beta = np.empty(m)
        beta[0] = sgn * b1
        x = beta[0] / (pL - alphas[0])
        for j in range(m):
            if beta[j] * sgn <= 0:
                return None, -1.0
            x += 2 * d_omega[j] / beta[j]
            if j + 1 < m:
                beta[j + 1] = beta[j] + x * (alphas[j] - alphas[j + 1])
        return beta, x - beta[-1] / (pR - alphas[-1])

    def resid(lb):
        beta, r = march(math.exp(lb))
        return r if beta is not None else -1.0

    def valid(lb):
        return march(math.exp(lb))[0] is not None

    # all beta_j > 0 holds for beta_1 above a threshold; the residual tends to
    # +inf there (the last junction runs off) and is negative for large beta_1
    grid = np.linspace(-20, 20, 401)
    ok = [valid(g) for g in grid]
    if not any(ok):
        raise TrackerInvariantError("no self-similar start for a degenerate facet fan")
    i = ok.index(True)
    lo, hi = (grid[i - 1], grid[i]) if i > 0 else (grid[0] - 40.0, grid[0])
    start = hi
    while resid(start) <= 0:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            raise TrackerInvariantError("no self-similar start for a degenerate facet fan")
        if valid(mid):
            hi = start = mid
        else:
            lo = mid
    for g in grid[grid > start]:
        if resid(g) < 0:
            lb = brentq(resid, start, g, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            return march(math.exp(lb))[0]
        start = g
    raise TrackerInvariantError("no self-similar start for a degenerate facet fan")


def _init_ode(state: TrackerState) -> None:
    """Initial group state; degenerate fans start from their self-similar profile."""
    layout = _ode_layout(state)
    y = np.array([state.facets[k].tau for k in layout])
    t_start = state.t
    fans = []
    off = 0
    pl = state.w0.phi_pl()
    for c in state.group_ids:
        shifts = _chain_shifts(c)
        for j0, j1 in _degenerate_runs(state, c):
            fs = [state.facets[c[j]] for j in range(j0, j1)]
            al = np.array([f.alpha + TWO_PI * shifts[j] for f, j in zip(fs, range(j0, j1))])
            x_star = fs[0].xi_minus
            if j0 > 0:
                pL = state.facets[c[j0 - 1]].alpha + TWO_PI * shifts[j0 - 1]
            elif state.ring:
                pL = state.facets[c[-1]].alpha + TWO_PI * (shifts[-1] - 1)
            else:
                pL = float(pl(x_star, -1)) + TWO_PI * shifts[j0]
            if j1 < len(c):
                pR = state.facets[c[j1]].alpha + TWO_PI * shifts[j1]
            elif state.ring:
                pR = state.facets[c[0]].alpha + TWO_PI * (shifts[-1] + 1)
            else:
                pR = float(pl(x_star, 1)) + TWO_PI * shifts[j1 - 1]
            beta = _self_similar_betas(al, np.array([f.delta_omega for f in fs]), pL, pR)
            fans.append((off + j0, off + j1, beta))
        off += len(c)
    if fans:
        t_start = state.t + SELF_SIMILAR_T0
        for i0, i1, beta in fans:
            y[i0:i1] = beta * math.sqrt(SELF_SIMILAR_T0)
    state._fans = fans
    state._fan_t = state.t
    state._ode_y = y
    state._ode_t = t_start
    state._solver = None


def _ensure_ode(state: TrackerState) -> None:
    if state._ode_y is None:
        _init_ode(state)


def step_group(state: TrackerState, t_end: float, max_steps: int | None = None) -> int:
    """Advance the group system of the epoch toward t_end with the adaptive pair.

    Takes at most max_steps accepted steps (all of them when None) and
    returns the number taken.  Dense output of every step is kept so that
    events can be located inside a step.
    """
    if not _ode_layout(state):
        return 0
    _ensure_ode(state)
    if t_end <= state._ode_t:
        return 0
    if state._solver is None or state._solver.t_bound != t_end:
        state._solver = RK45(
            lambda t, y: _ode_rhs(state, y),
            state._ode_t,
            state._ode_y,
            t_end,
            rtol=RTOL,
            atol=ATOL,
        )
    solver = state._solver
    taken = 0
    while solver.status == "running" and (max_steps is None or taken < max_steps):
        msg = solver.step()
        if solver.status == "failed":
            raise TrackerInvariantError(f"group integration failed: {msg}")
        state._dense.append((solver.t_old, solver.t, solver.dense_output()))
        state._ode_y = solver.y.copy()
        state._ode_t = solver.t
        taken += 1
    return taken


def _ode_state_at(state: TrackerState, t: float) -> np.ndarray:
    _ensure_ode(state)
    if state._dense:
        t_first = state._dense[0][0]
    else:
        t_first = state._ode_t
    if t <= t_first:
        if t >= t_first - 1e-15 or not state._fans:
            y = (state._dense[0][2](t_first) if state._dense else state._ode_y).copy()
            return y
        # inside the self-similar opening layer
        y = state._ode_y.copy() if not state._dense else state._dense[0][2](t_first).copy()
        r = math.sqrt(max(t - state._fan_t, 0.0))
        for i0, i1, beta in state._fans:
            y[i0:i1] = beta * r
        return y
    for t0, t1, interp in state._dense:
        if t0 <= t <= t1:
            return interp(t)
    return state._ode_y.copy()


# -- positions at a time --------------------------------------------------------------------


def _set_time(state: TrackerState, t: float) -> None:
    """Place every facet at time t of the current epoch."""
    for c, _ in _singletons(state):
        step_noninteracting(state, state.facets[c], t)
    layout = _ode_layout(state)
    if layout:
        y = _ode_state_at(state, t)
        off = 0
        for c in state.group_ids:
            pos = _group_positions(state, c, y[off : off + len(c)])
            shifts = _chain_shifts(c)
            for j, k in enumerate(c):
                f = state.facets[k]
                f.tau = float(y[off + j])
                f.xi_minus = float(pos[j]) - TWO_PI * shifts[j]
                f.xi_plus = float(pos[j + 1]) - TWO_PI * shifts[j]
            off += len(c)
    state.t = t


def _singletons(state: TrackerState):
    in_group = {k for c in state.group_ids for k in c}
    for k in range(len(state.facets)):
        if k not in in_group:
            yield k, state.facets[k]


# -- events ---------------------------------------------------------------------------------


def _cluster_ends(state: TrackerState) -> list[tuple[int, int]]:
    """(first facet index, last facet index) of every cluster in cyclic order."""
    chains, ring = _groups(state.facets)
    if ring:
        return []
    return [(c[0], c[-1]) for c in chains]


def _gap_functions(state: TrackerState):
    """Pairs (right end of one cluster, left end of the next) as callables of t."""
    ends = _cluster_ends(state)
    out = []
    nc = len(ends)
    for i in range(nc):
        a_last = ends[i][1]
        b_first = ends[(i + 1) % nc][0]
        out.append((a_last, b_first))
    return out


def _positions_at(state: TrackerState, t: float) -> dict[int, tuple[float, float]]:
    _set_time(state, t)
    return {k: (f.xi_minus, f.xi_plus) for k, f in enumerate(state.facets)}


def _gap_value(state: TrackerState, pos, a_last: int, b_first: int) -> float:
    """Gap from the right end of facet a_last to the left end of facet b_first.

    Measured as the epoch-start gap plus the displacement of both ends, so
    that it turns negative (instead of wrapping) once the ends cross.
    """
    fa, fb = state.facets[a_last], state.facets[b_first]
    g0 = (fb.xm0 - fa.xp0) % TWO_PI
    if g0 > TWO_PI - 1e-9:
        g0 -= TWO_PI
    return g0 + (pos[b_first][0] - fb.xm0) - (pos[a_last][1] - fa.xp0)


def _moving(f: FacetState) -> bool:
    return f.curvature_class != "zero"


def _event_values(state: TrackerState, t: float) -> tuple[list[float], list[tuple]]:
    """Signed event functions at time t; an event fires when a value reaches 0."""
    pos = _positions_at(state, t)
    vals: list[float] = []
    tags: list[tuple] = []
    for a_last, b_first in _gap_functions(state):
        fa, fb = state.facets[a_last], state.facets[b_first]
        if not (_moving(fa) or _moving(fb) or fa.group is not None or fb.group is not None):
            continue
        vals.append(_gap_value(state, pos, a_last, b_first))
        tags.append(("collision", a_last, b_first))
    for c in state.group_ids:
        for k in c:
            f = state.facets[k]
            L = pos[k][1] - pos[k][0]
            if f.curvature_class == "zero":
                vals.append(L)
                tags.append(("zero_extinction", k))
            else:
                vals.append(L - MIN_LENGTH)
                tags.append(("violation", k))
    return vals, tags


def detect_next_event(state: TrackerState, horizon: float):
    """Earliest event in (t, horizon]; returns (time, tag) or (inf, None)."""
    t0 = state.t
    if horizon <= t0:
        return math.inf, None
    has_groups = bool(state.group_ids)
    best_t, best_tag = math.inf, None

    def fire(ts, tag_index):
        return _event_values(state, ts)[0][tag_index]

    if not has_groups:
        vals1, tags = _event_values(state, horizon)
        for i, v in enumerate(vals1):
            if v <= 0:
                v0 = _event_values(state, t0)[0][i]
                if v0 <= 0:
                    te = t0
                else:
                    te = brentq(lambda s: fire(s, i), t0, horizon, xtol=EVENT_XTOL)
                if te < best_t:
                    best_t, best_tag = te, tags[i]
        _set_time(state, t0)
        return best_t, best_tag
    # integrate the groups step by step and watch the event functions
    _ensure_ode(state)
    t_prev = max(t0, state._ode_t if not state._dense else t0)
    vals_prev, tags = _event_values(state, t_prev)
    for i, v in enumerate(vals_prev):
        if v <= 0 and tags[i][0] == "violation":
            raise TrackerInvariantError(
                f"non-zero-curvature facet {state.facets[tags[i][1]].id} degenerated inside a group"
            )
        if v <= 0:
            _set_time(state, t0)
            return t0, tags[i]
    while t_prev < horizon:
        pending = [d for d in state._dense if d[1] > t_prev]
        if not pending:
            if state._ode_t >= horizon or step_group(state, horizon, max_steps=1) == 0:
                break
            continue
        found = False
        for ta, tb, _ in pending:
            lo = max(ta, t_prev)
            vals, tags = _event_values(state, tb)
            for i, v in enumerate(vals):
                if v <= 0:
                    va = _event_values(state, lo)[0][i]
                    te = lo if va <= 0 else brentq(lambda s_: fire(s_, i), lo, tb, xtol=EVENT_XTOL)
                    if te < best_t:
                        best_t, best_tag = te, tags[i]
                    found = True
            if not found:
                _record_step(state, tb)
            t_prev = tb
            if found:
                break
        if found:
            break
    if best_tag is not None and best_tag[0] == "violation":
        raise TrackerInvariantError(
            f"non-zero-curvature facet {state.facets[best_tag[1]].id} degenerated inside a group"
        )
    _set_time(state, t0)
    return best_t, best_tag


def _record_step(state: TrackerState, t: float) -> None:
    """Log gaps and the Liapunov value on a closed ring after an accepted step."""
    if not state.ring or (state.step_log and state.step_log[-1]["t"] >= t):
        return
    _set_time(state, t)
    lengths = [f.length for f in state.facets]
    rates = [f.delta_omega / f.length for f in state.facets]
    state.step_log.append(
        {"t": t, "gaps": lengths, "F": liapunov_F(lengths), "tau_dot": rates}
    )
    if len(lengths) == state.J.n and math.isinf(state.T_1):
        if _at_wulff_gaps(state):
            state.T_1 = t


def _closed_pairs(state: TrackerState, t: float) -> set[tuple[int, int]]:
    """Facet-id pairs whose gap has closed at an event time t.

    Near a continuous touch a gap behaves like sqrt(t* - t), so the test looks
    just past t as well as at t.
    """
    probe = t + max(4 * EVENT_XTOL, 1e-12 * abs(t))
    v_at, tags = _event_values(state, t)
    v_past, _ = _event_values(state, probe)
    closed = set()
    for va, vp, tag in zip(v_at, v_past, tags):
        if tag[0] == "collision" and (va <= MERGE_TOL or vp <= 0):
            closed.add((state.facets[tag[1]].id, state.facets[tag[2]].id))
    _set_time(state, t)
    return closed


def apply_event(state: TrackerState, t: float, tag) -> EventRecord:
    """Advance to the event time, edit the facet list and start a new epoch."""
    facets = state.facets
    extinct: set[int] = set()
    if tag[0] == "collision":
        closed = _closed_pairs(state, t)
        closed.add((facets[tag[1]].id, facets[tag[2]].id))
        ids = tuple(sorted({i for pair in closed for i in pair}))
        kind_out = "merge"
        by_id = {f.id: f for f in facets}
        for ia, ib in closed:
            fa, fb = by_id[ia], by_id[ib]
            same = abs(math.remainder(fb.alpha - fa.alpha, TWO_PI)) <= 1e-9
            if same and "zero" in (fa.curvature_class, fb.curvature_class):
                kind_out = "zero_extinction"
    elif tag[0] == "zero_extinction":
        _set_time(state, t)
        closed = set()
        extinct = {facets[tag[1]].id}
        ids = tuple(extinct)
        kind_out = "zero_extinction"
    else:
        raise TrackerInvariantError(f"unknown event {tag!r}")
    prev = [FacetState(**{**f.__dict__}) for f in facets]
    p = _profile_now(state, closed=closed, extinct=extinct)
    had_zero = any(f.curvature_class == "zero" for f in facets)
    state.epoch_times.append(t)
    state.epoch += 1
    _start_epoch(state, p, prev)
    rec = EventRecord(t, kind_out, ids)
    state.events.append(rec)
    state.facet_counts.append(len(state.facets))
    if had_zero and not any(f.curvature_class == "zero" for f in state.facets):
        state.T_cx = t
        state.events.append(EventRecord(t, "convexification", ()))
    _check_full(state)
    return rec


def _check_full(state: TrackerState) -> None:
    if state.ring and math.isinf(state.T_fa):
        state.T_fa = state.t
        state.events.append(EventRecord(state.t, "full_faceting", tuple(f.id for f in state.facets)))
        if len(state.facets) == state.J.n:
            state.events.append(
                EventRecord(state.t, "asymptotic_entry", tuple(f.id for f in state.facets))
            )
            if _at_wulff_gaps(state):
                state.T_1 = min(state.T_1, state.t)


def _at_wulff_gaps(state: TrackerState) -> bool:
    """Every gap equals its DeltaOmega, so all facets move at unit speed."""
    return max(abs(f.length - f.delta_omega) for f in state.facets) <= SQUARE_GAP_TOL


# -- profile of the current solution ---------------------------------------------------------


def _profile_now(
    state: TrackerState,
    closed: set[tuple[int, int]] | None = None,
    extinct: set[int] | None = None,
) -> Profile:
    """Profile of w(., t) at the current time (facets replace w0 on their spans).

    ``closed`` lists facet-id pairs that meet at this instant; their common
    end is snapped to the intersection of their lines (or shared for equal
    angles).  Facets in ``extinct`` are dropped and their neighbours joined.
    """
    closed = closed or set()
    extinct = extinct or set()
    live = [f for f in state.facets if f.id not in extinct]
    order = {f.id: k for k, f in enumerate(state.facets)}
    spans = [[f.xi_minus, f.xi_plus, f.alpha, f] for f in live]
    n = len(spans)
    for k in range(n if n > 1 else 0):
        s, t_ = spans[k], spans[(k + 1) % n]
        f, g = s[3], t_[3]
        shift = 1 if k == n - 1 else 0
        gap = t_[0] + TWO_PI * shift - s[1]
        mid = state.facets[(order[f.id] + 1) % len(state.facets)]
        joined_by_extinction = mid.id in extinct and mid.id != g.id
        if (f.id, g.id) not in closed and not joined_by_extinction and abs(gap) > MERGE_TOL:
            continue
        if gap > 0.5 and not joined_by_extinction:
            continue
        ga, gC = _lift_line(g.alpha, g.C0, shift)
        if abs(ga - f.alpha) > 1e-9:
            x = (gC + g.tau - f.C0 - f.tau) / (f.alpha - ga)
        elif f.curvature_class == "zero":
            x = s[1]
        elif g.curvature_class == "zero":
            x = t_[0] + TWO_PI * shift
        else:
            x = 0.5 * (s[1] + t_[0] + TWO_PI * shift)
        s[1] = x
        t_[0] = x - TWO_PI * shift
    if n == 1 and ((live[0].id, live[0].id) in closed or abs(spans[0][1] - spans[0][0] - TWO_PI) <= MERGE_TOL):
        spans[0][1] = spans[0][0] + TWO_PI
    cuts = [(a, b, al) for a, b, al, _ in spans]
    return _splice(state.w0.phi_pl(), cuts, state.J, _w_now(state, 0.0))


def _splice(pl: PiecewiseLinear, spans, J: AnisotropyJ, base: float) -> Profile:
    """Profile whose phi equals alpha on every cover span (a, b, alpha) and pl elsewhere."""
    pieces = [(pl.x[i], pl.x[i + 1], pl.v0[i], pl.v1[i]) for i in range(pl.n_pieces)]
    cuts = []
    for a, b, al in spans:
        if b - a <= POSITION_TOL:
            continue
        m = math.floor(a / TWO_PI)
        a0, b0, al0 = a - TWO_PI * m, b - TWO_PI * m, al - TWO_PI * m
        if b0 > TWO_PI + POSITION_TOL:
            cuts.append((a0, TWO_PI, al0))
            cuts.append((0.0, b0 - TWO_PI, al0 - TWO_PI))
        else:
            cuts.append((a0, min(b0, TWO_PI), al0))
    for a, b, al in cuts:
        new = []
        for x0, x1, p0, p1 in pieces:
            if x1 <= a or x0 >= b:
                new.append((x0, x1, p0, p1))
                continue
            if x0 < a:
                pa = p0 + (p1 - p0) * (a - x0) / (x1 - x0)
                new.append((x0, a, p0, pa))
            if x1 > b:
                pb = p0 + (p1 - p0) * (b - x0) / (x1 - x0)
                new.append((b, x1, pb, p1))
        new.append((a, b, al, al))
        pieces = sorted((q for q in new if q[1] - q[0] > POSITION_TOL), key=lambda q: q[0])
    x = np.array([q[0] for q in pieces] + [pieces[-1][1]])
    x[0], x[-1] = 0.0, TWO_PI
    v0 = np.array([q[2] for q in pieces])
    v1 = np.array([q[3] for q in pieces])
    return Profile.from_pl(x, v0, v1, J=J, base_height=base)


def fan_coefficients(state: TrackerState) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """(x*, angles, beta) of every degenerate facet fan opening in the current epoch."""
    _ensure_ode(state)
    layout = _ode_layout(state)
    out = []
    for i0, i1, beta in state._fans:
        fs = [state.facets[layout[i]] for i in range(i0, i1)]
        out.append((fs[0].xi_minus, np.array([f.alpha for f in fs]), beta.copy()))
    return out


def envelope_profile(
    p: Profile,
    x_star: float,
    alphas,
    betas,
    s: float,
    shift: float = 0.0,
    J: AnisotropyJ | None = None,
) -> Profile:
    """Fan of lines w0(x*) + alpha_j (x - x*) + beta_j sqrt(s) merged into w0, moved by shift.

    For an opening fan (beta > 0) the result is max(w0, lines); for a
    closing one it is min(w0, lines).  Such profiles carry only regular
    facets and bracket the data near a degenerate fan.
    """
    J = J or square_J()
    fw = FrozenW(p)
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    sgn = 1 if betas[0] > 0 else -1
    w_star = fw.w(x_star)
    C = w_star - alphas * x_star + betas * math.sqrt(s)
    xs = [fw.crossing(alphas[0], C[0], 0.0, x_star, -1, sgn)]
    for j in range(len(alphas) - 1):
        xs.append((C[j + 1] - C[j]) / (alphas[j] - alphas[j + 1]))
    xs.append(fw.crossing(alphas[-1], C[-1], 0.0, x_star, 1, sgn))
    if np.any(np.diff(xs) <= 0):
        raise ValueError("fan lines do not form an envelope at this s")
    spans = [(xs[j], xs[j + 1], alphas[j]) for j in range(len(alphas))]
    out = _splice(p.phi_pl(), spans, J, p.base_height)
    return Profile(out.segments, out.base_height + shift)


def _w_now(state: TrackerState, x: float) -> float:
    fw = state.frozen
    for f in state.facets:
        for sh in (-1, 0, 1):
            a = f.xi_minus + TWO_PI * sh
            b = f.xi_plus + TWO_PI * sh
            if a - 1e-14 <= x <= b + 1e-14 and b > a:
                al, C = _lift_line(f.alpha, f.C0, sh)
                return al * x + C + f.tau
    return fw.w(x)


def eval_w(state: TrackerState, x):
    """w(x, t) at the current time of the state."""
    x = np.asarray(x, dtype=float)
    vals = np.array([_w_now(state, float(v)) for v in x.ravel()]).reshape(x.shape)
    return float(vals) if vals.ndim == 0 else vals


def profile_at(state: TrackerState) -> Profile:
    """Profile of the solution at the current time."""
    return _profile_now(state)


def build_omega(state: TrackerState) -> PiecewiseLinear:
    """Omega(., t): ramps on facets, constants of dJ(phi0) elsewhere."""
    pl_now = _profile_now(state).phi_pl()
    facets = state.facets
    spans = []
    for f in facets:
        if f.length <= POSITION_TOL:
            continue
        m = math.floor(f.xi_minus / TWO_PI)
        spans.append((f.xi_minus - TWO_PI * m, f.xi_plus - TWO_PI * m,
                      f.omega_minus - TWO_PI * m, f.omega_plus - TWO_PI * m))
    xs: list[float] = []
    v0: list[float] = []
    v1: list[float] = []
    for i in range(pl_now.n_pieces):
        a, b = pl_now.x[i], pl_now.x[i + 1]
        mid = 0.5 * (a + b)
        val = None
        for lo, hi, om, op in spans:
            for sh in (0.0, -TWO_PI):
                if lo + sh - 1e-12 <= mid <= hi + sh + 1e-12:
                    r0 = (a - lo - sh) / (hi - lo)
                    r1 = (b - lo - sh) / (hi - lo)
                    val = (om + (op - om) * r0 + sh, om + (op - om) * r1 + sh)
                    break
            if val is not None:
                break
        if val is None:
            c = float(dJ(state.J, pl_now(mid)))
            val = (c, c)
        xs.append(a)
        v0.append(val[0])
        v1.append(val[1])
    xs.append(TWO_PI)
    return PiecewiseLinear(np.array(xs), np.array(v0), np.array(v1), TWO_PI)


def omega_via_composition(state: TrackerState) -> PiecewiseLinear:
    return compose(state.J, _profile_now(state).phi_pl())


# -- driver ----------------------------------------------------------------------------------


def run_until(state: TrackerState, T: float, sample_times=(), max_events: int = 10_000) -> TrackerState:
    """Advance the state to time T, recording trajectory rows at sample times and events."""
    samples = sorted(float(s) for s in sample_times if s >= state.t - 1e-15)
    si = 0

    def record(t_rec):
        for f in state.facets:
            state.trajectory.append(
                (t_rec, f.id, f.xi_minus % TWO_PI, f.xi_minus % TWO_PI + f.length,
                 f.tau_total, f.omega_minus, f.omega_plus)
            )

    for _ in range(max_events):
        t_ev, tag = detect_next_event(state, T)
        t_stop = min(t_ev, T)
        while si < len(samples) and samples[si] <= t_stop:
            _set_time(state, samples[si])
            record(samples[si])
            si += 1
        if tag is None or t_ev > T:
            _set_time(state, T)
            if state.ring:
                _record_step(state, T)
            break
        apply_event(state, t_ev, tag)
        record(t_ev)
    else:
        raise TrackerInvariantError("event budget exhausted")
    _set_time(state, T)
    return state


def milestones(state: TrackerState) -> dict:
    return {
        "T_cx": state.T_cx,
        "T_fa": state.T_fa,
        "T_1": state.T_1,
        "N": list(state.facet_counts),
        "t_i": list(state.epoch_times),
    }


def liapunov_F(gaps) -> float:
    """F = DeltaOmega * sum ln(gap_k) over the cyclic gap vector."""
    g = np.asarray(gaps, dtype=float)
    if np.any(g <= 0):
        raise ValueError("gaps must be positive")
    return float(DELTA_OMEGA * np.sum(np.log(g)))


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def trajectory_csv(state: TrackerState) -> str:
    """Rows (t, facet id, xi-, xi+, tau, Omega-, Omega+) in recording order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "facet", "xi_minus", "xi_plus", "tau", "omega_minus", "omega_plus"])
    for t, fid, xm, xp, tau, om, op in state.trajectory:
        w.writerow([repr(float(t)), fid, repr(float(xm)), repr(float(xp)), repr(float(tau)),
                    repr(float(om)), repr(float(op))])
    return buf.getvalue()


def events_json(state: TrackerState) -> str:
    rows = [{"t": e.time, "kind": e.kind, "facets": list(e.facets)} for e in state.events]
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def milestones_json(state: TrackerState) -> str:
    """Milestones with infinite (never reached) times written as null."""
    m = milestones(state)
    out = {k: _finite_or_none(m[k]) for k in ("T_cx", "T_fa", "T_1")}
    out["N"] = m["N"]
    out["t_i"] = [float(t) for t in m["t_i"]]
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
