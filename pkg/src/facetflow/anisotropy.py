"""Convex piecewise-linear energies J on the angle line and their mollified versions.

The energy is stored through its corner angles and jump weights inside one
period.  Its derivative is lifted so that J'(phi + 2*pi) = J'(phi) + 2*pi,
which is the normalisation under which Omega(s) = s is a slope section of the
square profile.  On the window (c_{N-1} - 2*pi, c_0 + 2*pi) the lifted energy
coincides with sum_i b_i |phi - c_i|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * math.pi
ANGLE_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-12

__all__ = [
    "ANGLE_TOL",
    "AnisotropyJ",
    "RegularizedJ",
    "SlopeInterval",
    "WulffProfile",
    "square_J",
    "eval_J",
    "subdiff_J",
    "dJ",
    "dJ_eps",
    "d2J_eps",
    "eval_J_eps",
    "wulff_profile",
]


@dataclass(frozen=True)
class SlopeInterval:
    """Closed interval [lo, hi] of slopes."""

    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty slope interval [{self.lo}, {self.hi}]")

    @property
    def is_singleton(self) -> bool:
        return self.lo == self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol


@dataclass(frozen=True)
class AnisotropyJ:
    """Convex piecewise-linear energy J(phi) = sum_i b_i |phi - alpha_i| (lifted).

    corners must be strictly increasing and fit inside one period; weights must
    be positive and sum to pi, so that the image of the subdifferential over a
    period has length 2*pi.
    """

    corners: tuple[float, ...]
    weights: tuple[float, ...]
    period: float = TWO_PI

    def __post_init__(self):
        c = tuple(float(x) for x in self.corners)
        b = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "corners", c)
        object.__setattr__(self, "weights", b)
        if self.period != TWO_PI:
            raise ValueError("only the 2*pi period is supported")
        if len(c) != len(b):
            raise ValueError("corners and weights must have equal length")
        if len(c) < 4:
            raise ValueError(f"need at least 4 corners, got {len(c)}")
        if any(w <= 0 for w in b):
            raise ValueError("weights must be positive")
        if abs(sum(b) - math.pi) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to pi, got {sum(b)!r}")
        if any(c[i + 1] <= c[i] for i in range(len(c) - 1)):
            raise ValueError("corners must be strictly increasing")
        if c[-1] - c[0] >= TWO_PI:
            raise ValueError("corners must lie within one period")

    @property
    def n(self) -> int:
        return len(self.corners)

    @property
    def plateau_values(self) -> np.ndarray:
        """Omega_j = sum_{i<=j} b_i - sum_{i>j} b_i for j = 0..N-1."""
        b = np.asarray(self.weights)
        cum = np.cumsum(b)
        return 2.0 * cum - math.pi

    @property
    def min_gap(self) -> float:
        c = np.asarray(self.corners)
        gaps = np.diff(np.append(c, c[0] + TWO_PI))
        return float(gaps.min())

    # -- lifted indexing ---------------------------------------------------
    def corner(self, k: int) -> float:
        """Lifted corner alpha(k) = c_{k mod N} + 2*pi*(k div N)."""
        m, j = divmod(int(k), self.n)
        return self.corners[j] + TWO_PI * m

    def plateau(self, k: int) -> float:
        """Value of J' on the open gap (alpha(k), alpha(k+1))."""
        m, j = divmod(int(k), self.n)
        return float(self.plateau_values[j]) + TWO_PI * m

    def corner_subdiff(self, k: int) -> SlopeInterval:
        return SlopeInterval(self.plateau(k - 1), self.plateau(k))

    def locate(self, phi):
        """Return (gap index p, corner flag) with alpha(p) <= phi < alpha(p+1).

        The corner flag holds the lifted corner index when phi is within
        ANGLE_TOL of a corner and -huge otherwise.
        """
        phi = np.asarray(phi, dtype=float)
        c = np.asarray(self.corners)
        m = np.floor((phi - c[0]) / TWO_PI)
        y = phi - TWO_PI * m
        # guard the round-off case y == c0 + 2*pi
        wrap = y >= c[0] + TWO_PI
        m = np.where(wrap, m + 1, m)
        y = np.where(wrap, y - TWO_PI, y)
        j = np.searchsorted(c, y, side="right") - 1
        p = (j + self.n * m).astype(np.int64)
        ext = np.append(c, c[0] + TWO_PI)
        at_lo = np.abs(y - ext[j]) <= ANGLE_TOL
        at_hi = np.abs(ext[j + 1] - y) <= ANGLE_TOL
        flag = np.where(at_lo, p, np.where(at_hi, p + 1, np.iinfo(np.int64).min))
        return p, flag

    def corners_between(self, lo: float, hi: float, closed: bool = True) -> list[int]:
        """Lifted corner indices k with alpha(k) in [lo, hi] (or (lo, hi))."""
        if hi < lo:
            lo, hi = hi, lo
        c0 = self.corners[0]
        k0 = self.n * int(math.floor((lo - c0) / TWO_PI)) - 1
        out = []
        k = k0
        while True:
            a = self.corner(k)
            if a > hi + ANGLE_TOL:
                break
            if closed:
                if a >= lo - ANGLE_TOL:
                    out.append(k)
            elif lo + ANGLE_TOL < a < hi - ANGLE_TOL:
                out.append(k)
            k += 1
        return out

    def corner_index(self, alpha: float) -> int | None:
        """Lifted index of the corner equal to alpha (within tolerance) or None."""
        _, flag = self.locate(alpha)
        flag = int(flag)
        return None if flag == np.iinfo(np.int64).min else flag

    def is_corner(self, phi) -> np.ndarray:
        _, flag = self.locate(phi)
        return flag != np.iinfo(np.int64).min

    def _k0(self) -> float:
        return self._k0_value

    @cached_property
    def _k0_value(self) -> float:
        c = np.asarray(self.corners)
        b = np.asarray(self.weights)
        j_hi = float(np.sum(b * (c[0] + TWO_PI - c)))
        j_lo = float(np.sum(b * (c - c[0])))
        return j_hi - j_lo - TWO_PI * c[0]

    def _reduce(self, phi):
        phi = np.asarray(phi, dtype=float)
        c0 = self.corners[0]
        m = np.floor((phi - c0) / TWO_PI)
        return phi - TWO_PI * m, m


def square_J() -> AnisotropyJ:
    """The square energy: corners -3pi/4, -pi/4, pi/4, 3pi/4 with weights pi/4."""
    q = math.pi / 4
    return AnisotropyJ((-3 * q, -q, q, 3 * q), (q, q, q, q))


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def eval_J(J: AnisotropyJ, phi):
    """Energy value; equals sum b_i |phi - alpha_i| near the base period."""
    y, m = J._reduce(phi)
    c = np.asarray(J.corners)
    b = np.asarray(J.weights)
    base = np.sum(b * np.abs(y[..., None] - c), axis=-1)
    val = base + m * (TWO_PI * y + J._k0()) + 2 * math.pi**2 * m * (m - 1)
    return _scalar(val)


def dJ(J: AnisotropyJ, phi):
    """Classical derivative off the corners; midpoint of the jump at a corner."""
    p, flag = J.locate(phi)
    vals = np.asarray(J.plateau_values)
    n = J.n
    pm, pj = np.divmod(p, n)
    plateau = vals[pj] + TWO_PI * pm
    at = flag != np.iinfo(np.int64).min
    if np.any(at):
        k = np.where(at, flag, 0)
        km, kj = np.divmod(k - 1, n)
        lower = vals[kj] + TWO_PI * km
        hm, hj = np.divmod(k, n)
        upper = vals[hj] + TWO_PI * hm
        plateau = np.where(at, 0.5 * (lower + upper), plateau)
    return _scalar(plateau)


def subdiff_J(J: AnisotropyJ, phi: float) -> SlopeInterval:
    """Subdifferential of J at phi: a singleton off the corners, the jump at one."""
    k = J.corner_index(float(phi))
    if k is None:
        v = float(dJ(J, phi))
        return SlopeInterval(v, v)
    return J.corner_subdiff(k)


# -- mollifier ---------------------------------------------------------------
# Triweight kernel rho(u) = 35/32 (1 - u^2)^3 on (-1, 1).  Its distribution
# function and second primitive are polynomials, so every mollified quantity
# has a closed form.

_C_RHO = 35.0 / 32.0


def _kernel(u):
    u = np.asarray(u, dtype=float)
    q = np.clip(1.0 - u * u, 0.0, None)
    return _C_RHO * q * q * q


def _cdf(u):
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    u2 = u * u
    return 0.5 + _C_RHO * u * (1.0 - u2 + 0.6 * u2 * u2 - u2 * u2 * u2 / 7.0)


def _abs_smooth(u):
    """(|.| * rho)(u) for the unit kernel."""
    u = np.asarray(u, dtype=float)
    uc = np.clip(u, -1.0, 1.0)
    u2 = uc * uc
    prim = 0.5 * (uc + 1.0) + _C_RHO * (
        u2 * (0.5 + u2 * (-0.25 + u2 * (0.1 - u2 / 56.0))) - 93.0 / 280.0
    )
    return np.where(np.abs(u) < 1.0, 2.0 * prim - uc, np.abs(u))


@dataclass(frozen=True)
class RegularizedJ:
    """J_eps = J * rho_eps + eps^2 x^2 / 2 with a compact polynomial kernel."""

    base: AnisotropyJ
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.epsilon >= 0.5 * self.base.min_gap:
            raise ValueError("epsilon must be below half the smallest corner gap")

    @cached_property
    def _term_arrays(self):
        J = self.base
        c = np.asarray(J.corners)
        b = np.asarray(J.weights)
        # base corners plus the two periodic neighbours of the window ends
        centers = np.concatenate([c, [c[0] + TWO_PI, c[-1] - TWO_PI]])
        weights = np.concatenate([b, [b[0], b[-1]]])
        return centers, weights

    def _terms(self):
        return self._term_arrays


def eval_J_eps(R: RegularizedJ, phi):
    J, eps = R.base, R.epsilon
    y, m = J._reduce(phi)
    centers, weights = R._terms()
    c = np.asarray(J.corners)
    u = (y[..., None] - centers) / eps
    sm = eps * _abs_smooth(u)
    val = np.sum(weights[: J.n] * sm[..., : J.n], axis=-1)
    val = val + weights[J.n] * (sm[..., J.n] + y - c[0] - TWO_PI)
    val = val + weights[J.n + 1] * (sm[..., J.n + 1] - y + c[-1] - TWO_PI)
    val = val + m * (TWO_PI * y + J._k0()) + 2 * math.pi**2 * m * (m - 1)
    phi = np.asarray(phi, dtype=float)
    return _scalar(val + 0.5 * eps**2 * phi**2)


def dJ_eps(R: RegularizedJ, phi):
    """Derivative of J_eps; equals J' + eps^2 phi farther than eps from corners."""
    J, eps = R.base, R.epsilon
    y, m = J._reduce(phi)
    centers, weights = R._terms()
    sg = 2.0 * _cdf((y[..., None] - centers) / eps) - 1.0
    val = np.sum(weights[: J.n] * sg[..., : J.n], axis=-1)
    val = val + weights[J.n] * (sg[..., J.n] + 1.0)
    val = val + weights[J.n + 1] * (sg[..., J.n + 1] - 1.0)
    phi = np.asarray(phi, dtype=float)
    return _scalar(val + TWO_PI * m + eps**2 * phi)


def d2J_eps(R: RegularizedJ, phi):
    """Second derivative of J_eps; bounded below by eps^2."""
    J, eps = R.base, R.epsilon
    y, _ = J._reduce(phi)
    centers, weights = R._terms()
    rho = _kernel((y[..., None] - centers) / eps) / eps
    return _scalar(np.sum(2.0 * weights * rho, axis=-1) + eps**2)


@dataclass(frozen=True)
class WulffProfile:
    """Piecewise-constant function equal to values[j] on [breaks[j], breaks[j+1])."""

    breaks: tuple[float, ...]
    values: tuple[float, ...]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        b = np.asarray(self.breaks)
        m = np.floor((x - b[0]) / TWO_PI)
        y = x - TWO_PI * m
        j = np.clip(np.searchsorted(b, y, side="right") - 1, 0, len(self.values) - 1)
        return _scalar(np.asarray(self.values)[j] + TWO_PI * m)


def wulff_profile(J: AnisotropyJ) -> WulffProfile:
    """Angle parameterisation of the Wulff polygon of J."""
    if len(J.corners) < 4:
        raise ValueError("need at least 4 corners")
    if abs(sum(J.weights) - math.pi) > WEIGHT_SUM_TOL:
        raise ValueError("weights must sum to pi")
    breaks = tuple(J.corners) + (J.corners[0] + TWO_PI,)
    return WulffProfile(breaks, tuple(float(v) for v in J.plateau_values))
