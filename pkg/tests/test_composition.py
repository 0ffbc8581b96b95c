import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facetflow.anisotropy import square_J, subdiff_J
from facetflow.composition import (
    MonotoneMap,
    as_profile,
    classify_plateau,
    compose,
    compose_profile,
    decompose_domain,
    inverse_map,
)
from facetflow.harness_cli import PRESET_NAMES, preset
from facetflow.jr_profile import PiecewiseLinear, Profile, validate_jr
from oracles import random_monotone_steps

PI = math.pi
S = np.linspace(0.0, 2 * PI, 1001)[:-1]


def test_minimal_slope_section_is_identity(minimal, J):
    om = compose_profile(J, minimal)
    np.testing.assert_allclose(om(S), S, atol=1e-13)
    assert om.lift == pytest.approx(2 * PI)


def test_parabola_gives_plateau_values(parabola, J):
    om = compose_profile(J, parabola)
    expected = np.select(
        [S < PI / 4, S < 3 * PI / 4, S < 5 * PI / 4, S < 7 * PI / 4], [0.0, PI / 2, PI, 3 * PI / 2], 2 * PI
    )
    keep = np.min(np.abs(S[:, None] - np.array([PI / 4, 3 * PI / 4, 5 * PI / 4, 7 * PI / 4])), axis=1) > 1e-9
    np.testing.assert_allclose(om(S[keep]), expected[keep], atol=1e-13)


def test_two_hump_decomposition_and_valley(two_hump, J):
    A = two_hump.phi_pl()
    dec = decompose_domain(A)
    assert len(dec.D_f) == 1
    plat = dec.D_f[0]
    assert (plat.a, plat.b, plat.c) == pytest.approx((2.8, 3.3, 3 * PI / 4))
    assert classify_plateau(A, plat) == "convex"
    om = compose(J, A)
    # a valley takes the upper end of the subdifferential
    np.testing.assert_allclose(om(np.linspace(2.85, 3.25, 9)), PI, atol=1e-13)


@pytest.mark.parametrize(
    "values, kind",
    [
        ([0.0, 1.0, 1.0, 2.0], "increasing"),
        ([2.0, 1.0, 1.0, 0.0], "decreasing"),
        ([2.0, 1.0, 1.0, 2.0], "convex"),
        ([0.0, 1.0, 1.0, 0.0], "concave"),
    ],
)
def test_plateau_classes(values, kind):
    A = PiecewiseLinear(np.arange(4.0), np.array(values[:-1]), np.array(values[1:]))
    (plat,) = decompose_domain(A).D_f
    assert classify_plateau(A, plat) == kind


def test_increasing_plateau_gets_linear_ramp():
    G = MonotoneMap(PiecewiseLinear(np.array([0.0, 1.0, 2.0]), np.array([0.0, 5.0]), np.array([1.0, 6.0])))
    A = PiecewiseLinear(np.array([0.0, 1.0, 3.0, 4.0]), np.array([0.5, 1.0, 1.0]), np.array([1.0, 1.0, 1.5]))
    f = compose(G, A)
    np.testing.assert_allclose(f(np.array([1.0, 2.0, 2.5])), [1.0, 3.0, 4.0], atol=1e-13)


def test_inverse_rejects_decreasing_and_periodic():
    with pytest.raises(ValueError):
        inverse_map(PiecewiseLinear(np.array([0.0, 1.0]), np.array([1.0]), np.array([0.0])))
    with pytest.raises(ValueError):
        inverse_map(PiecewiseLinear(np.array([0.0, 1.0]), np.array([0.0]), np.array([1.0]), lift=1.0))


def test_monotone_map_rejects_decreasing_graph():
    with pytest.raises(ValueError):
        MonotoneMap(PiecewiseLinear(np.array([0.0, 1.0]), np.array([1.0]), np.array([0.0])))


def test_inverse_composition_is_identity_on_random_steps():
    rng = np.random.default_rng(2024)
    x = np.linspace(0.0, 1.0, 1001)
    done = 0
    while done < 50:
        xs, v0, v1 = random_monotone_steps(rng, int(rng.integers(2, 9)))
        if v1[-1] == v0[0]:
            continue  # a constant A has no inverse on its range
        A = PiecewiseLinear(xs, v0, v1)
        f = compose(inverse_map(A), A)
        np.testing.assert_allclose(f(x), x, atol=1e-12)
        np.testing.assert_allclose(f(x, -1), x, atol=1e-12)
        done += 1


@pytest.mark.parametrize("name", [p for p in PRESET_NAMES if p != "corner(m)"] + ["corner(1)", "corner(3)"])
def test_compose_output_is_admissible(name, J):
    om = compose_profile(J, preset(name))
    assert validate_jr(as_profile(om, J), J, check_period=False) == []


@given(st.integers(3, 20), st.floats(-0.9, 0.9), st.floats(-0.5, 0.5))
def test_compose_output_admissible_for_bent_parabolas(pieces, bend, tilt):
    J = square_J()
    x = np.linspace(0.0, 2 * PI, pieces + 1)
    phi = x + bend * np.sin(x) + tilt * np.sin(2 * x) / 2
    p = Profile.from_pl(x, phi[:-1], phi[1:], J)
    om = compose_profile(J, p)
    assert validate_jr(as_profile(om, J), J, check_period=False) == []
    # Omega is a selection of the subdifferential wherever phi is single valued
    s = np.linspace(0.05, 2 * PI - 0.05, 97)
    for si in s:
        iv_lo = om(si, -1)
        iv_hi = om(si, 1)
        sub = subdiff_J(J, p.phi_at(si))
        assert sub.lo - 1e-12 <= iv_lo <= sub.hi + 1e-12
        assert sub.lo - 1e-12 <= iv_hi <= sub.hi + 1e-12
