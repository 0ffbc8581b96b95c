"""Composition of a maximal monotone outer map with a multivalued JR function.

The inner function A is a PiecewiseLinear (possibly periodic with a lift).  The
outer map is either an AnisotropyJ, whose subdifferential is used, or a
MonotoneMap given by its own piecewise-linear graph.  Plateaus of A where the
outer map is multivalued are resolved by the behaviour of A on both sides:
increasing and decreasing plateaus get a linear ramp between the interval
endpoints, valleys get the upper endpoint and peaks the lower one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anisotropy import ANGLE_TOL, AnisotropyJ, dJ
from .jr_profile import POSITION_TOL, PiecewiseLinear, Profile

__all__ = [
    "DomainDecomposition",
    "MonotoneMap",
    "Plateau",
    "as_profile",
    "classify_plateau",
    "compose",
    "compose_profile",
    "decompose_domain",
    "inverse_map",
]

VALUE_TOL = 1e-12


@dataclass(frozen=True)
class Plateau:
    a: float
    b: float
    c: float
    # indices of the first and last piece of A covering the plateau
    first: int
    last: int


@dataclass(frozen=True)
class DomainDecomposition:
    D_s: tuple[float, ...]
    D_f: tuple[Plateau, ...]
    D_r: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class MonotoneMap:
    """Maximal monotone map on the real line from a non-decreasing graph.

    ``graph`` is a non-periodic PiecewiseLinear with non-decreasing values.
    Jumps of the graph are the multivalued points.  Outside the knot range
    the map is the constant ``below`` (``above``); by default these are the
    end values of the graph, otherwise the ends carry vertical segments.
    """

    graph: PiecewiseLinear
    below: float | None = None
    above: float | None = None

    def _check(self):
        g = self.graph
        if np.any(g.v1 < g.v0 - VALUE_TOL):
            raise ValueError("graph must be non-decreasing")

    def __post_init__(self):
        self._check()

    def breakpoints(self, lo: float, hi: float) -> list[float]:
        x = self.graph.x
        return [float(v) for v in x if lo + VALUE_TOL < v < hi - VALUE_TOL]

    def limit(self, y: float, side: int) -> float:
        g = self.graph
        if y <= g.x[0] and (side < 0 or y < g.x[0]):
            return float(g.v0[0] if self.below is None else self.below)
        if y >= g.x[-1] and (side > 0 or y > g.x[-1]):
            return float(g.v1[-1] if self.above is None else self.above)
        return float(g(y, side))

    def interval(self, y: float) -> tuple[float, float]:
        return self.limit(y, -1), self.limit(y, 1)


class _SubdiffMap:
    """Adapter exposing the subdifferential of an AnisotropyJ as a monotone map."""

    def __init__(self, J: AnisotropyJ):
        self.J = J

    def breakpoints(self, lo: float, hi: float) -> list[float]:
        return [self.J.corner(k) for k in self.J.corners_between(lo, hi, closed=False)]

    def limit(self, y: float, side: int) -> float:
        k = self.J.corner_index(y)
        if k is None:
            return float(dJ(self.J, y))
        iv = self.J.corner_subdiff(k)
        return iv.hi if side > 0 else iv.lo

    def interval(self, y: float) -> tuple[float, float]:
        return self.limit(y, -1), self.limit(y, 1)


def _outer(F):
    if isinstance(F, AnisotropyJ):
        return _SubdiffMap(F)
    return F


def inverse_map(A: PiecewiseLinear) -> MonotoneMap:
    """Inverse of a non-decreasing (possibly multivalued) function A on [a, b]."""
    if A.lift is not None:
        raise ValueError("inverse_map expects a non-periodic function")
    pts_y: list[float] = []
    pts_x: list[float] = []
    # walk the completed graph of A; vertical jumps become plateaus of A^-1
    for i in range(A.n_pieces):
        pts_y.extend([A.v0[i], A.v1[i]])
        pts_x.extend([A.x[i], A.x[i + 1]])
    ys = np.asarray(pts_y)
    xs = np.asarray(pts_x)
    if np.any(np.diff(ys) < -VALUE_TOL):
        raise ValueError("A must be non-decreasing")
    # knots of the inverse graph: distinct y values; pieces: x from ... to ...
    kx: list[float] = []
    v0: list[float] = []
    v1: list[float] = []
    for j in range(len(ys) - 1):
        y0, y1 = ys[j], ys[j + 1]
        if y1 - y0 <= VALUE_TOL:
            continue  # plateau of A: a jump of the inverse at y0
        kx.append(y0)
        v0.append(xs[j])
        v1.append(xs[j + 1])
    kx.append(ys[-1])
    graph = PiecewiseLinear(np.array(kx), np.array(v0), np.array(v1))
    return MonotoneMap(graph, below=float(xs[0]), above=float(xs[-1]))


# -- decomposition -------------------------------------------------------------


def _plateaus(A: PiecewiseLinear) -> list[Plateau]:
    """Maximal runs of constant pieces of A (continuous across knots)."""
    out: list[Plateau] = []
    n = A.n_pieces
    const = np.abs(A.v1 - A.v0) <= VALUE_TOL
    i = 0
    while i < n:
        if not const[i]:
            i += 1
            continue
        j = i
        c = A.v0[i]
        while j + 1 < n and const[j + 1] and abs(A.v0[j + 1] - c) <= VALUE_TOL:
            j += 1
        out.append(Plateau(float(A.x[i]), float(A.x[j + 1]), float(c), i, j))
        i = j + 1
    if A.lift is not None and len(out) > 1:
        first, last = out[0], out[-1]
        if (
            first.first == 0
            and last.last == n - 1
            and abs(last.c - A.lift - first.c) <= VALUE_TOL
        ):
            # a plateau crossing the period boundary: keep it in the frame of the end
            merged = Plateau(last.a, first.b + A.period, last.c, last.first, first.last)
            out = out[1:-1] + [merged]
    return out


def decompose_domain(A: PiecewiseLinear) -> DomainDecomposition:
    """Split the domain into jump points, plateaus and the regular rest."""
    plats = _plateaus(A)
    D_s: list[float] = []
    knots = range(A.n_pieces) if A.lift is not None else range(1, A.n_pieces)
    for i in knots:
        L, R = A.knot_limits(i)
        if abs(R - L) > VALUE_TOL:
            D_s.append(float(A.x[i]))
    # regular part: everything not in a plateau, minus jump points
    covered = sorted((p.a, p.b) for p in plats)
    a0, b0 = float(A.x[0]), float(A.x[-1])
    D_r: list[tuple[float, float]] = []
    cur = a0
    for lo, hi in covered:
        lo_c = max(lo, a0)
        if lo_c > cur + POSITION_TOL:
            D_r.append((cur, lo_c))
        cur = max(cur, min(hi, b0))
    if A.lift is not None:
        wrap_end = max((p.b - A.period for p in plats if p.b > b0), default=a0)
        if D_r and D_r[0][0] == a0 and wrap_end > a0:
            lo, hi = D_r[0]
            D_r[0] = (wrap_end, hi) if hi > wrap_end else None
            D_r = [r for r in D_r if r is not None]
        if b0 > cur + POSITION_TOL:
            D_r.append((cur, b0))
    elif b0 > cur + POSITION_TOL:
        D_r.append((cur, b0))
    return DomainDecomposition(tuple(D_s), tuple(plats), tuple(D_r))


def _side_sign(A: PiecewiseLinear, plat: Plateau, side: int) -> int:
    """Sign of A - c just outside the plateau on the given side (0 if unknown)."""
    n = A.n_pieces
    periodic = A.lift is not None
    lift = A.lift or 0.0
    wrapped = plat.first > plat.last
    if side < 0:
        i = plat.first
        if i == 0 and not periodic:
            return 0
        j = (i - 1) % n
        shift = -lift if i == 0 else 0.0
        L = A.v1[j] + shift
        start = A.v0[j] + shift
    else:
        i = plat.last
        if i == n - 1 and not periodic:
            return 0
        j = (i + 1) % n
        shift = lift if (i == n - 1 or wrapped) else 0.0
        L = A.v0[j] + shift
        start = A.v1[j] + shift
    if abs(L - plat.c) > VALUE_TOL:
        return 1 if L > plat.c else -1
    if abs(start - plat.c) <= VALUE_TOL:
        where = "left" if side < 0 else "right"
        raise ValueError(f"A equals {plat.c!r} on a neighbourhood {where} of the plateau")
    return 1 if start > plat.c else -1


def classify_plateau(A: PiecewiseLinear, plat: Plateau) -> str:
    """One of 'increasing', 'decreasing', 'convex', 'concave'.

    A missing side (end of a non-periodic domain) is read as continuing the
    monotone trend of the other side.
    """
    left = _side_sign(A, plat, -1)
    right = _side_sign(A, plat, 1)
    if left == 0 and right == 0:
        raise ValueError("A is constant on its whole domain")
    if left == 0:
        left = -right
    if right == 0:
        right = -left
    if left < 0 < right:
        return "increasing"
    if left > 0 > right:
        return "decreasing"
    if left > 0 and right > 0:
        return "convex"
    return "concave"


def compose(F, A: PiecewiseLinear) -> PiecewiseLinear:
    """The composition of the outer map F with the JR function A.

    Returns a piecewise-linear function on the domain of A (with the same
    period and a lift equal to the image of one period).
    """
    G = _outer(F)
    plats = _plateaus(A)
    in_plateau = np.full(A.n_pieces, -1)
    for k, p in enumerate(plats):
        if p.first <= p.last:
            in_plateau[p.first : p.last + 1] = k
        else:  # wraps
            in_plateau[p.first :] = k
            in_plateau[: p.last + 1] = k
    lift_out = None
    if A.lift is not None:
        lift_out = G.limit(float(A.v0[0]) + A.lift, 1) - G.limit(float(A.v0[0]), 1)
    xs: list[float] = []
    v0: list[float] = []
    v1: list[float] = []
    for i in range(A.n_pieces):
        a, b = float(A.x[i]), float(A.x[i + 1])
        y0, y1 = float(A.v0[i]), float(A.v1[i])
        k = in_plateau[i]
        if k >= 0:
            p = plats[k]
            lo, hi = G.interval(p.c)
            # pieces of a wrapped plateau lying in the first period
            shift = -lift_out if (p.first > p.last and i <= p.last) else 0.0
            lo, hi = lo + shift, hi + shift
            if hi - lo <= VALUE_TOL:
                xs.append(a)
                v0.append(lo)
                v1.append(lo)
                continue
            kind = classify_plateau(A, p)
            if kind in ("increasing", "decreasing"):
                start, end = (lo, hi) if kind == "increasing" else (hi, lo)
                span = p.b - p.a
                # position of this piece within the (possibly wrapped) plateau
                off_a = a - p.a if a >= p.a - POSITION_TOL else a + A.period - p.a
                off_b = off_a + (b - a)
                xs.append(a)
                v0.append(start + (end - start) * off_a / span)
                v1.append(start + (end - start) * off_b / span)
            else:
                val = hi if kind == "convex" else lo
                xs.append(a)
                v0.append(val)
                v1.append(val)
            continue
        # regular piece: subdivide at breakpoints of the outer map
        cuts = G.breakpoints(min(y0, y1), max(y0, y1))
        if y1 < y0:
            cuts = cuts[::-1]
        pts = [(a, y0)]
        for yc in cuts:
            pts.append((a + (yc - y0) / (y1 - y0) * (b - a), yc))
        pts.append((b, y1))
        direction = 1 if y1 >= y0 else -1
        for (xa, ya), (xb, yb) in zip(pts[:-1], pts[1:]):
            if xb - xa <= POSITION_TOL:
                continue
            xs.append(xa)
            v0.append(G.limit(ya, direction))
            v1.append(G.limit(yb, -direction))
    xs.append(float(A.x[-1]))
    return PiecewiseLinear(np.array(xs), np.array(v0), np.array(v1), lift_out)


def compose_profile(J: AnisotropyJ, p: Profile) -> PiecewiseLinear:
    """Omega = dJ composed with the subdifferential of w for a profile."""
    return compose(J, p.phi_pl())


def as_profile(f: PiecewiseLinear, J: AnisotropyJ) -> Profile:
    """Wrap a piecewise-linear function as a JR profile (for validation)."""
    return Profile.from_pl(f.x, f.v0, f.v1, J=J)
