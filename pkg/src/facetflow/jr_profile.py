"""JR-class profiles: the slope phi = w_s stored as facets and smooth pieces.

A profile describes w(s) = Lambda(s) + s^2/2 on one period [0, 2*pi) through
its derivative phi.  Facet segments carry a constant corner angle, smooth
segments carry a piecewise-linear interpolant of samples whose values avoid
the corner set.  Jumps of phi only happen at segment boundaries, and the
periodic extension obeys phi(s + 2*pi) = phi(s) + 2*pi.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .anisotropy import ANGLE_TOL, TWO_PI, AnisotropyJ, square_J

__all__ = [
    "PERIOD_INTEGRAL",
    "Component",
    "PiecewiseLinear",
    "Profile",
    "Segment",
    "SubgradientSet",
    "XiSets",
    "facet_count",
    "jr_norm",
    "partial_w",
    "total_variation",
    "validate_jr",
    "xi_sets",
]

PERIOD_INTEGRAL = 2.0 * math.pi**2
POSITION_TOL = 1e-12


@dataclass(frozen=True)
class PiecewiseLinear:
    """f on [x[0], x[-1]], linear on (x[i], x[i+1]) from v0[i] to v1[i].

    With ``lift`` set the function is extended by f(x + P) = f(x) + lift,
    P = x[-1] - x[0].  Jumps live at the knots; the value at a knot is the
    closed interval between its one-sided limits.
    """

    x: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    lift: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v0 = np.asarray(self.v0, dtype=float)
        v1 = np.asarray(self.v1, dtype=float)
        if x.ndim != 1 or len(x) < 2 or v0.shape != (len(x) - 1,) or v1.shape != v0.shape:
            raise ValueError("inconsistent piecewise-linear arrays")
        if np.any(np.diff(x) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "v1", v1)

    @property
    def period(self) -> float:
        return float(self.x[-1] - self.x[0])

    @property
    def n_pieces(self) -> int:
        return len(self.v0)

    def _reduce(self, s):
        s = np.asarray(s, dtype=float)
        if self.lift is None:
            return s, np.zeros_like(s)
        m = np.floor((s - self.x[0]) / self.period)
        return s - m * self.period, m

    def __call__(self, s, side: int = 1):
        """One-sided value: right limit for side=+1, left limit for side=-1."""
        y, m = self._reduce(s)
        if side >= 0:
            i = np.searchsorted(self.x, y, side="right") - 1
        else:
            i = np.searchsorted(self.x, y, side="left") - 1
            if self.lift is not None:
                wrap = i < 0
                i = np.where(wrap, self.n_pieces - 1, i)
                y = np.where(wrap, y + self.period, y)
                m = np.where(wrap, m - 1, m)
        i = np.clip(i, 0, self.n_pieces - 1)
        L = self.x[i + 1] - self.x[i]
        t = (y - self.x[i]) / L
        val = self.v0[i] + (self.v1[i] - self.v0[i]) * t
        if self.lift is not None:
            val = val + m * self.lift
        return float(val) if np.ndim(val) == 0 else val

    def knot_limits(self, i: int) -> tuple[float, float]:
        """(left limit, right limit) at knot i, using the lift at the ends."""
        n = self.n_pieces
        if 0 < i < n:
            return float(self.v1[i - 1]), float(self.v0[i])
        if self.lift is None:
            if i == 0:
                return float(self.v0[0]), float(self.v0[0])
            return float(self.v1[-1]), float(self.v1[-1])
        if i == 0:
            return float(self.v1[-1] - self.lift), float(self.v0[0])
        return float(self.v1[-1]), float(self.v0[0] + self.lift)

    def integral(self) -> float:
        return float(np.sum(0.5 * (self.v0 + self.v1) * np.diff(self.x)))

    def total_variation(self) -> float:
        tv = float(np.sum(np.abs(self.v1 - self.v0)))
        jumps = [abs(r - l) for l, r in (self.knot_limits(i) for i in range(1, self.n_pieces))]
        tv += sum(jumps)
        if self.lift is not None:
            l, r = self.knot_limits(0)
            tv += abs(r - l)
        return tv


@dataclass(frozen=True)
class Segment:
    """Facet (constant corner angle on [a, b]) or smooth piece (samples s, phi)."""

    kind: str
    a: float
    b: float
    alpha: float | None = None
    s: tuple[float, ...] = ()
    phi: tuple[float, ...] = ()

    @classmethod
    def facet(cls, alpha: float, a: float, b: float) -> "Segment":
        return cls("facet", float(a), float(b), alpha=float(alpha))

    @classmethod
    def smooth(cls, s, phi) -> "Segment":
        s = tuple(float(v) for v in s)
        phi = tuple(float(v) for v in phi)
        if len(s) < 2 or len(s) != len(phi):
            raise ValueError("smooth segment needs at least two samples")
        return cls("smooth", s[0], s[-1], s=s, phi=phi)

    @property
    def is_facet(self) -> bool:
        return self.kind == "facet"

    @property
    def is_degenerate(self) -> bool:
        return self.is_facet and self.b - self.a <= POSITION_TOL

    @property
    def phi_start(self) -> float:
        return self.alpha if self.is_facet else self.phi[0]

    @property
    def phi_end(self) -> float:
        return self.alpha if self.is_facet else self.phi[-1]

    def to_dict(self) -> dict:
        if self.is_facet:
            return {"kind": "facet", "alpha": self.alpha, "a": self.a, "b": self.b}
        return {"kind": "smooth", "s": list(self.s), "phi": list(self.phi)}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        if d["kind"] == "facet":
            return cls.facet(d["alpha"], d["a"], d["b"])
        if d["kind"] == "smooth":
            return cls.smooth(d["s"], d["phi"])
        raise ValueError(f"unknown segment kind {d['kind']!r}")


@dataclass(frozen=True)
class SubgradientSet:
    lo: float
    hi: float

    @property
    def is_singleton(self) -> bool:
        return abs(self.hi - self.lo) <= ANGLE_TOL


@dataclass(frozen=True)
class Component:
    """One connected component of Xi_l: corner alpha on [lo, hi]."""

    alpha: float
    corner: int
    lo: float
    hi: float
    explicit: bool = True

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class XiSets:
    components: tuple[Component, ...]
    union: tuple[tuple[float, float], ...]

    def per_corner(self, n_corners: int = 4) -> dict[int, list[Component]]:
        out: dict[int, list[Component]] = {l: [] for l in range(n_corners)}
        for c in self.components:
            out[c.corner % n_corners].append(c)
        return out


@dataclass(frozen=True)
class Profile:
    """Circular list of segments covering [0, 2*pi) plus the height w(0)."""

    segments: tuple[Segment, ...]
    base_height: float = 0.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("profile needs at least one segment")

    # -- construction --------------------------------------------------------
    @classmethod
    def from_pl(
        cls,
        x,
        v0,
        v1,
        J: AnisotropyJ | None = None,
        base_height: float = 0.0,
    ) -> "Profile":
        """Build a profile from a piecewise-linear phi on [0, 2*pi].

        Pieces constant at a corner become facets, interior corner crossings
        and continuous touches become zero-length facets, the rest is merged
        into smooth segments split at every jump.
        """
        J = J or square_J()
        x = np.asarray(x, dtype=float)
        v0 = np.asarray(v0, dtype=float)
        v1 = np.asarray(v1, dtype=float)
        # (a, b, p0, p1, alpha-or-None)
        pieces: list[tuple[float, float, float, float, float | None]] = []
        for i in range(len(v0)):
            a, b, p, q = x[i], x[i + 1], v0[i], v1[i]
            k0, k1 = J.corner_index(p), J.corner_index(q)
            if k0 is not None and k0 == k1:
                al = J.corner(k0)
                pieces.append((a, b, al, al, al))
                continue
            cuts = J.corners_between(p, q, closed=False)
            if q < p:
                cuts = cuts[::-1]
            cur_a, cur_p = a, p
            for k in cuts:
                al = J.corner(k)
                xc = a + (al - p) / (q - p) * (b - a)
                if xc - cur_a > POSITION_TOL:
                    pieces.append((cur_a, xc, cur_p, al, None))
                pieces.append((xc, xc, al, al, al))
                cur_a, cur_p = xc, al
            if b - cur_a > POSITION_TOL:
                pieces.append((cur_a, b, cur_p, q, None))
        # continuous touches at knots between two smooth pieces
        out: list[tuple] = []
        for i, pc in enumerate(pieces):
            if out and pc[4] is None and out[-1][4] is None:
                prev = out[-1]
                if abs(prev[3] - pc[2]) <= ANGLE_TOL:
                    k = J.corner_index(pc[2])
                    if k is not None:
                        al = J.corner(k)
                        out.append((pc[0], pc[0], al, al, al))
            if (
                out
                and pc[4] is not None
                and out[-1][4] is not None
                and abs(out[-1][4] - pc[4]) <= ANGLE_TOL
                and abs(out[-1][1] - pc[0]) <= POSITION_TOL
            ):
                # touching facets of one angle are a single facet
                prev = out.pop()
                pc = (prev[0], max(prev[1], pc[1]), pc[2], pc[3], pc[4])
            out.append(pc)
        segs: list[Segment] = []
        run_s: list[float] = []
        run_p: list[float] = []

        def flush():
            if run_s:
                segs.append(Segment.smooth(run_s, run_p))
                run_s.clear()
                run_p.clear()

        for a, b, p, q, al in out:
            if al is not None:
                flush()
                segs.append(Segment.facet(al, a, b))
                continue
            if run_s and (abs(run_p[-1] - p) > ANGLE_TOL or abs(run_s[-1] - a) > POSITION_TOL):
                flush()
            if not run_s:
                run_s.extend([a, b])
                run_p.extend([p, q])
            else:
                run_s.append(b)
                run_p.append(q)
        flush()
        return cls(tuple(segs), float(base_height))

    @classmethod
    def from_samples(cls, s, phi, J: AnisotropyJ | None = None, base_height: float = 0.0):
        """Profile from samples of phi; a repeated abscissa encodes a jump."""
        s = np.asarray(s, dtype=float)
        phi = np.asarray(phi, dtype=float)
        keep = np.diff(s) > 0
        x = np.concatenate([s[:-1][keep], [s[-1]]])
        return cls.from_pl(x, phi[:-1][keep], phi[1:][keep], J=J, base_height=base_height)

    # -- piecewise-linear views ---------------------------------------------
    def phi_pl(self) -> PiecewiseLinear:
        """phi as a periodic piecewise-linear function (zero-length facets dropped)."""
        if "pl" not in self._cache:
            xs: list[float] = []
            v0: list[float] = []
            v1: list[float] = []
            for seg in self.segments:
                if seg.is_facet:
                    if seg.is_degenerate:
                        continue
                    xs.append(seg.a)
                    v0.append(seg.alpha)
                    v1.append(seg.alpha)
                else:
                    for j in range(len(seg.s) - 1):
                        xs.append(seg.s[j])
                        v0.append(seg.phi[j])
                        v1.append(seg.phi[j + 1])
            xs.append(self.segments[-1].b)
            self._cache["pl"] = PiecewiseLinear(np.array(xs), np.array(v0), np.array(v1), TWO_PI)
        return self._cache["pl"]

    def _w_knots(self) -> np.ndarray:
        if "w" not in self._cache:
            pl = self.phi_pl()
            inc = 0.5 * (pl.v0 + pl.v1) * np.diff(pl.x)
            self._cache["w"] = self.base_height + np.concatenate([[0.0], np.cumsum(inc)])
        return self._cache["w"]

    def phi_at(self, s, side: int = 1):
        return self.phi_pl()(s, side)

    def integral(self) -> float:
        return self.phi_pl().integral()

    def w_at(self, s):
        """w on the universal cover: w(y + 2 pi m) = w(y) + m I + 2 pi m y + 2 pi^2 m (m-1)."""
        pl = self.phi_pl()
        W = self._w_knots()
        y, m = pl._reduce(s)
        i = np.clip(np.searchsorted(pl.x, y, side="right") - 1, 0, pl.n_pieces - 1)
        d = y - pl.x[i]
        L = pl.x[i + 1] - pl.x[i]
        q = (pl.v1[i] - pl.v0[i]) / L
        val = W[i] + pl.v0[i] * d + 0.5 * q * d * d
        I = W[-1] - W[0]
        val = val + m * I + TWO_PI * m * y + 2 * math.pi**2 * m * (m - 1)
        return float(val) if np.ndim(val) == 0 else val

    def lambda_at(self, s):
        s = np.asarray(s, dtype=float)
        out = self.w_at(s) - 0.5 * s * s
        return float(out) if np.ndim(out) == 0 else out

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {"base_height": self.base_height, "segments": [s.to_dict() for s in self.segments]}

    def to_json(self) -> str:
        # repr-based float formatting is exact (at most 17 significant digits)
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Profile":
        return cls(tuple(Segment.from_dict(x) for x in d["segments"]), float(d.get("base_height", 0.0)))

    @classmethod
    def from_json(cls, text: str) -> "Profile":
        return cls.from_dict(json.loads(text))


# -- junction helpers -----------------------------------------------------------


def _junctions(p: Profile):
    """Yield (position, left segment index, right segment index, L, R) cyclically.

    Runs of zero-length facets sharing one position are collapsed: L is the
    limit from the last segment of positive length on the left, R from the
    first one on the right.
    """
    segs = p.segments
    n = len(segs)
    # indices of segments with positive length
    pos = [i for i, sg in enumerate(segs) if not sg.is_degenerate]
    if not pos:
        return
    for idx, i in enumerate(pos):
        j = pos[(idx + 1) % len(pos)]
        left, right = segs[i], segs[j]
        L = left.phi_end
        R = right.phi_start
        x = left.b
        if j <= i:  # wrapped around
            L -= TWO_PI
            x = 0.0
        between = [(k % n) for k in range(i + 1, j if j > i else j + n)]
        yield x, i, j, L, R, between


def xi_sets(p: Profile, J: AnisotropyJ | None = None) -> XiSets:
    """Components of Xi in circular order, including implicit point components."""
    J = J or square_J()
    comps: list[Component] = []
    segs = p.segments
    if all(sg.is_degenerate for sg in segs):
        return XiSets((), ())
    for x, i, j, L, R, between in _junctions(p):
        left, right = segs[i], segs[j]
        wrapped = x == 0.0 and j <= i
        left_alpha = None
        if left.is_facet:
            left_alpha = left.alpha - (TWO_PI if wrapped else 0.0)
        explicit = {}
        for k in between:
            sg = segs[k]
            al = sg.alpha - (TWO_PI if (wrapped and k > i) else 0.0)
            explicit[J.corner_index(al)] = sg
        ks = J.corners_between(L, R, closed=True)
        if R < L:
            ks = ks[::-1]
        for k in ks:
            al = J.corner(k)
            if left_alpha is not None and abs(left_alpha - al) <= ANGLE_TOL:
                continue
            if right.is_facet and abs(right.alpha - al) <= ANGLE_TOL:
                continue
            comps.append(Component(al, k, x, x, explicit=k in explicit))
        if right.is_facet:
            kk = J.corner_index(right.alpha)
            comps.append(Component(right.alpha, kk if kk is not None else 0, right.a, right.b))
    # the junction loop visits each positive-length facet once as "right";
    # the sort is stable, so components sharing a point keep the jump order
    comps.sort(key=lambda c: (c.lo, c.hi))
    if len(comps) > 1:
        first, last = comps[0], comps[-1]
        if (
            first.lo <= POSITION_TOL
            and first.hi > first.lo
            and last.hi >= TWO_PI - POSITION_TOL
            and last.hi > last.lo
            and abs(last.alpha - TWO_PI - first.alpha) <= ANGLE_TOL
        ):
            # one facet split by the period boundary
            comps = comps[1:-1] + [Component(last.alpha, last.corner, last.lo, TWO_PI + first.hi)]
    return XiSets(tuple(comps), tuple(_merge_union(comps)))


def _merge_union(comps: list[Component]) -> list[tuple[float, float]]:
    if not comps:
        return []
    iv = sorted((c.lo, c.hi) for c in comps)
    out = [list(iv[0])]
    for lo, hi in iv[1:]:
        if lo <= out[-1][1] + POSITION_TOL:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    if len(out) > 1 and out[0][0] <= POSITION_TOL and out[-1][1] >= TWO_PI - POSITION_TOL:
        # the union wraps around s = 0
        first = out.pop(0)
        out[-1][1] = TWO_PI + first[1]
    return [tuple(v) for v in out]


def facet_count(p: Profile, J: AnisotropyJ | None = None) -> int:
    return len(xi_sets(p, J).components)


def total_variation(p: Profile) -> float:
    return p.phi_pl().total_variation()


def jr_norm(p: Profile, J: AnisotropyJ | None = None) -> float:
    return total_variation(p) + facet_count(p, J)


def partial_w(p: Profile, s: float) -> SubgradientSet:
    """Interval between the one-sided derivatives of w at s."""
    s = float(s) % TWO_PI
    pl = p.phi_pl()
    i = int(np.searchsorted(pl.x, s))
    if i < len(pl.x) and abs(pl.x[i] - s) <= POSITION_TOL:
        L, R = pl.knot_limits(i)
    elif i > 0 and abs(pl.x[i - 1] - s) <= POSITION_TOL:
        L, R = pl.knot_limits(i - 1)
    elif abs(s - TWO_PI) <= POSITION_TOL:
        L, R = pl.knot_limits(0)
    else:
        v = pl(s)
        L = R = v
    return SubgradientSet(min(L, R), max(L, R))


def validate_jr(
    p: Profile,
    J: AnisotropyJ | None = None,
    check_period: bool = True,
) -> list[str]:
    """Return the list of violated profile invariants (empty when valid)."""
    J = J or square_J()
    errs: list[str] = []
    segs = p.segments
    if abs(segs[0].a) > POSITION_TOL:
        errs.append(f"coverage: first segment starts at {segs[0].a!r}, expected 0")
    if abs(segs[-1].b - TWO_PI) > 1e-10:
        errs.append(f"coverage: last segment ends at {segs[-1].b!r}, expected 2*pi")
    for i in range(len(segs) - 1):
        if abs(segs[i].b - segs[i + 1].a) > POSITION_TOL:
            errs.append(f"coverage: gap between segment {i} and {i + 1} at s={segs[i].b!r}")
    for i, sg in enumerate(segs):
        if sg.is_facet:
            if sg.alpha is None or J.corner_index(sg.alpha) is None:
                errs.append(f"facet {i}: angle {sg.alpha!r} is not a corner")
            if sg.b < sg.a - POSITION_TOL:
                errs.append(f"facet {i}: reversed interval [{sg.a!r}, {sg.b!r}]")
            continue
        s = np.asarray(sg.s)
        ph = np.asarray(sg.phi)
        if not np.all(np.isfinite(ph)) or not np.all(np.isfinite(s)):
            errs.append(f"smooth {i}: non-finite samples")
            continue
        if np.any(np.diff(s) <= 0):
            errs.append(f"smooth {i}: samples not strictly increasing")
        if np.any(J.is_corner(ph[1:-1])):
            j = int(np.argmax(J.is_corner(ph[1:-1]))) + 1
            errs.append(f"smooth {i}: value in corner set off Xi at s={s[j]!r}")
        for j in range(len(ph) - 1):
            if J.corners_between(ph[j], ph[j + 1], closed=False):
                errs.append(f"smooth {i}: value in corner set off Xi near s={s[j]!r}")
                break
    if check_period:
        I = p.integral()
        if abs(I - PERIOD_INTEGRAL) > 1e-9 * PERIOD_INTEGRAL:
            errs.append(f"periodicity: integral of phi is {I!r}, expected 2*pi^2")
    return errs
