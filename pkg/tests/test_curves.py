import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qcsurgery.curves import (AmbiguousPointError, JordanCurve, NoSafeCopyError, PunctureSet,
                              SingularMetricError, annulus_hyperbolic_length, assumption_g_search,
                              contains, critical_values, intersection_census, is_linked,
                              iterated_pullback, lift_curve, pullback_components, quasihyperbolic_length)
from qcsurgery.harness import fundamental_annulus
from qcsurgery.rational import RationalMap, postcritical_sample


def zpow(d):
    return RationalMap.polynomial([0] * d + [1])


def ray_cast(vertices, z):
    """Crossing-number point-in-polygon test, written independently of the winding code."""
    x, y = z.real, z.imag
    inside = False
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        if (a.imag > y) != (b.imag > y):
            xc = a.real + (y - a.imag) * (b.real - a.real) / (b.imag - a.imag)
            if xc > x:
                inside = not inside
    return inside


def star(rng, n=64):
    t = 2 * np.pi * np.arange(n) / n
    r = 1 + 0.4 * rng.random(n)
    return JordanCurve(r * np.exp(1j * t))


def test_contains_examples():
    c = JordanCurve.circle(0, 1, 64)
    assert contains(c, 0) is True
    assert contains(c, 2) is False
    with pytest.raises(AmbiguousPointError):
        contains(c, c.vertices[3])


def test_contains_matches_ray_casting(rng):
    for _ in range(10):
        curve = star(rng)
        pts = rng.uniform(-1.6, 1.6, 1000) + 1j * rng.uniform(-1.6, 1.6, 1000)
        pts = pts[curve.distance(pts) > 1e-9]
        got = contains(curve, pts)
        want = np.array([ray_cast(curve.vertices, z) for z in pts])
        assert np.array_equal(got, want)


def test_is_linked_examples():
    c = JordanCurve.circle(0, 1, 64)
    assert is_linked(c, [0.5])
    assert not is_linked(c, [3, 4j])
    assert not is_linked(c, [])


def test_quasihyperbolic_circle_scale_free():
    for r in (0.01, 1.0, 300.0):
        L = quasihyperbolic_length(JordanCurve.circle(0, r, 256), PunctureSet([0]))
        assert abs(L - 2 * math.pi) < 1e-3


def test_quasihyperbolic_bounds_and_monotonicity():
    c = JordanCurve.circle(0, 1, 256)
    # the puncture at 3 is never the nearest one on the unit circle, so the length stays 2 pi
    assert abs(quasihyperbolic_length(c, PunctureSet([0, 3])) - 2 * math.pi) < 1e-3
    # with a puncture at 1.5 the density rises to 1 / 0.5 near z = 1
    L = quasihyperbolic_length(c, PunctureSet([0, 1.5]))
    assert 2 * math.pi < L < 2 * math.pi * 2.0
    far = [quasihyperbolic_length(JordanCurve.circle(5, 1, 256), PunctureSet([5 + s * 1.2, 5 - s * 1.2j]))
           for s in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(far, far[1:]))


def test_quasihyperbolic_singular_metric():
    with pytest.raises(SingularMetricError):
        quasihyperbolic_length(JordanCurve.circle(0, 1, 64), PunctureSet([1.0]))


@given(st.complex_numbers(max_magnitude=50, allow_nan=False, allow_infinity=False),
       st.floats(0, 2 * math.pi))
def test_quasihyperbolic_translation_rotation_invariant(shift, angle):
    rng = np.random.default_rng(3)
    curve = star(rng)
    punct = np.array([0.1, 0.3j, -0.2 - 0.1j])
    L0 = quasihyperbolic_length(curve, PunctureSet(punct))
    rot = np.exp(1j * angle)
    moved = JordanCurve(curve.vertices * rot + shift, check=False)
    L1 = quasihyperbolic_length(moved, PunctureSet(punct * rot + shift))
    assert abs(L1 - L0) <= 1e-9 * L0


def test_lift_examples():
    R = zpow(2)
    lift = lift_curve(R, JordanCurve.circle(0, 1, 256), 1.0)
    assert lift.covering_degree == 2
    np.testing.assert_allclose(np.abs(lift.curve.vertices), 1, atol=1e-12)
    lift = lift_curve(R, JordanCurve.circle(0, 4, 256), 2.0)
    assert lift.covering_degree == 2
    np.testing.assert_allclose(np.abs(lift.curve.vertices), 2, atol=1e-12)


def test_lift_forward_image_on_base(misiurewicz):
    R = misiurewicz.rmap
    base = JordanCurve.circle(misiurewicz.landing_point, 0.25, 256)
    for comp in pullback_components(R, base):
        img = R(comp.curve.vertices)
        assert base.distance(img).max() <= 10 * 1e-8 * max(1.0, base.diameter)


def test_iterated_pullback_examples():
    comps = iterated_pullback(zpow(2), JordanCurve.circle(0, 1, 128), 2)
    assert len(comps) == 1 and comps[0].covering_degree == 4
    R = RationalMap.polynomial([4, 0, 1])
    fp = (1 - np.sqrt(1 - 16 + 0j)) / 2
    comps = iterated_pullback(R, JordanCurve.circle(fp, 0.1, 128), 1)
    assert sum(c.covering_degree for c in comps) == 2


@pytest.mark.parametrize("coeffs,k", [([4, 0, 1], 2), ([0.25j, 0, 1], 2), ([1, -3, 0, 1], 1)])
def test_iterated_pullback_degree_sum(coeffs, k):
    R = RationalMap.polynomial(coeffs)
    base = JordanCurve.circle(0.3 + 0.2j, 7.0, 256)
    cv = critical_values(R)
    assert np.all(base.distance(cv) > 0.1)
    comps = iterated_pullback(R, base, k)
    assert sum(c.covering_degree for c in comps) == R.degree ** k


@pytest.mark.parametrize("d", [2, 3])
def test_lift_hyperbolic_length_ratio(d):
    # curve |z| = r in A(1/2, 4); its lift under z^d lies in the preimage annulus A((1/2)^(1/d), 4^(1/d))
    r1, r2, r = 0.5, 4.0, 1.7
    base = JordanCurve.circle(0, r, 512)
    lift = lift_curve(zpow(d), base, r ** (1 / d))
    assert lift.covering_degree == d
    lb = annulus_hyperbolic_length(base, r1, r2)
    ll = annulus_hyperbolic_length(lift.curve, r1 ** (1 / d), r2 ** (1 / d))
    assert abs(ll / lb - d) <= 0.01 * d


def test_assumption_g_examples():
    R = RationalMap.polynomial([-2, 0, 1])
    _, P = postcritical_sample(R, 3)
    base = JordanCurve.circle(2.0, 0.2, 128)
    cert = assumption_g_search(R, base, 2, 100.0, P)
    assert cert.found
    for e in cert.found:
        if contains(e.curve, 2.0):
            assert e.linked
    assert assumption_g_search(R, base, 2, 0.0, P).found == []


def test_assumption_g_misiurewicz_length_bound(misiurewicz):
    R = misiurewicz.rmap
    _, P = postcritical_sample(R, 8)
    base = JordanCurve.circle(misiurewicz.landing_point, 0.25, 256)
    punct = PunctureSet(P)
    L = quasihyperbolic_length(base, punct)
    cert = assumption_g_search(R, base, 3, R.degree * L, P, punct)
    assert {e.level for e in cert.found} == {1, 2, 3}
    assert all(e.length <= R.degree * L for e in cert.found)


def test_assumption_g_refinement_stable(misiurewicz):
    R = misiurewicz.rmap
    _, P = postcritical_sample(R, 8)
    lengths = []
    for n in (256, 512):
        base = JordanCurve.circle(misiurewicz.landing_point, 0.25, n)
        cert = assumption_g_search(R, base, 2, 1e3, P)
        lengths.append(sorted((e.level, round(e.curve.centroid.real, 6), e.length) for e in cert.found))
    assert len(lengths[0]) == len(lengths[1])
    for a, b in zip(*lengths):
        assert abs(a[2] - b[2]) < 0.01 * a[2]


def test_intersection_census_far_curve_safe():
    R = zpow(2)
    fatou = fundamental_annulus(R, math.log(2))
    curve = JordanCurve(3 + 30 * (np.cos(np.linspace(0, 2 * np.pi, 256, endpoint=False)) + 1) / 2
                        + 0.5j * np.sin(np.linspace(0, 2 * np.pi, 256, endpoint=False)))
    census = intersection_census(curve, fatou, R)
    assert census.n_alpha >= 1
    assert census.green_range[1] >= census.safe_level


def test_intersection_census_deep_curve_raises():
    R = zpow(2)
    fatou = fundamental_annulus(R, math.log(2))
    with pytest.raises(NoSafeCopyError):
        intersection_census(JordanCurve.circle(0, 0.01, 64), fatou, R)


@pytest.mark.parametrize("d", [2, 3])
def test_intersection_census_lift_bound(d):
    R = zpow(d)
    fatou = fundamental_annulus(R, math.log(2))
    t = np.linspace(0, 2 * np.pi, 512, endpoint=False)
    alpha = JordanCurve(20 + 17 * np.cos(t) + 2j * np.sin(t))
    start = complex(alpha.vertices[0]) ** (1 / d)
    beta = lift_curve(R, alpha, start)
    na = intersection_census(alpha, fatou, R).n_alpha
    nb = intersection_census(beta.curve, fatou, R).n_alpha
    assert nb <= beta.covering_degree * na
