import math

import numpy as np
import pytest

from qcsurgery.curves import JordanCurve, is_linked, iterated_pullback, lift_curve
from qcsurgery.moduli import (AnnulusRegion, NoEmbeddingError, UnderResolvedError, greedy_annulus,
                              grid_modulus, largest_embedded_round_annulus, round_modulus)
from qcsurgery.rational import RationalMap


def test_round_modulus_examples():
    assert abs(round_modulus(0.5, 1) - math.log(2) / (2 * math.pi)) < 1e-15
    for p in (0.01, 0.3, 7.0):
        assert abs(round_modulus(p, p * math.exp(2 * math.pi)) - 1) < 1e-12
    assert abs(round_modulus(0.25, 1) - 2 * round_modulus(0.5, 1)) < 1e-15
    with pytest.raises(ValueError):
        round_modulus(1, 0.5)


def test_grid_modulus_round():
    est = grid_modulus(AnnulusRegion.round(0.5, 1, 0, 1024), 512)
    exact = round_modulus(0.5, 1)
    assert abs(est.value - exact) / exact < 0.02
    assert est.error_bound >= 0


@pytest.mark.parametrize("d", [2, 3])
def test_covering_law_zd(d):
    R = RationalMap.polynomial([0] * d + [1])
    outer = JordanCurve.circle(0, 1, 512)
    inner = JordanCurve.circle(0, 0.5, 512)
    lift_o = lift_curve(R, outer, 1.0).curve
    lift_i = lift_curve(R, inner, 0.5 ** (1 / d)).curve
    m_base = grid_modulus(AnnulusRegion(outer, inner), 512).value
    m_lift = grid_modulus(AnnulusRegion(lift_o, lift_i), 512).value
    assert abs(m_lift - m_base / d) / (m_base / d) < 0.03


def test_square_frame_refinement_stable():
    t = np.linspace(-1, 1, 129)[:-1]

    def square(s):
        e = np.concatenate([s * (1 + 1j * 0) + s * 1j * t, s * (-t + 1j), s * (-1 - 1j * t), s * (t - 1j)])
        return JordanCurve(e)
    region = AnnulusRegion(square(1.0), square(0.5))
    a = grid_modulus(region, 256).value
    b = grid_modulus(region, 512).value
    assert abs(a - b) / b < 0.01


def test_conformal_invariance_spot_check():
    base = AnnulusRegion.round(0.5, 1, 0, 1024)
    moved = base.mapped(lambda z: (z + 0.1) / (1 + 0.1 * z))
    a = grid_modulus(base, 512).value
    b = grid_modulus(moved, 512).value
    assert abs(a - b) / a < 0.03


def test_monotone_under_enlargement():
    vals = [grid_modulus(AnnulusRegion.round(p, 1, 0, 512), 256).value for p in (0.6, 0.5, 0.4)]
    assert vals[0] <= vals[1] <= vals[2]


def test_under_resolved():
    with pytest.raises(UnderResolvedError):
        grid_modulus(AnnulusRegion.round(0.999, 1, 0, 512), 64)


def test_largest_embedded_round():
    assert abs(largest_embedded_round_annulus(AnnulusRegion.round(0.3, 1, 0, 1024)) - 0.3) < 1e-3
    th = 2 * np.pi * np.arange(1024) / 1024
    r = np.where(np.abs(np.angle(np.exp(1j * th))) < 0.02, 0.6, 0.3)
    spiky = AnnulusRegion(JordanCurve.circle(0, 1, 1024), JordanCurve(r * np.exp(1j * th)))
    assert largest_embedded_round_annulus(spiky) >= 0.6 - 1e-3
    touching = np.where(np.abs(np.angle(np.exp(1j * th))) < 0.02, 0.9997, 0.3)
    region = AnnulusRegion(JordanCurve.circle(0, 1.0, 1024), JordanCurve(touching * np.exp(1j * th)))
    with pytest.raises(NoEmbeddingError):
        largest_embedded_round_annulus(region)


def test_greedy_annulus_avoids_obstacles():
    c = JordanCurve.circle(0, 1, 256)
    ring = greedy_annulus(c, [0.0, 1.5])
    assert np.all(np.abs(ring.outer.vertices) < 1.5)
    assert np.all(np.abs(ring.inner.vertices) > 0)
    assert ring.contains(np.array([1.0 + 0j]))[0]


def test_pullback_ring_moduli_lower_bound(misiurewicz):
    """Pullbacks B_i of a ring B around the base curve keep modulus >= m(B) / d(gamma_i)."""
    R = misiurewicz.rmap
    x = misiurewicz.landing_point
    ring = AnnulusRegion.round(0.2, 0.3, x, 512)
    m0 = grid_modulus(ring, 512).value
    outer = iterated_pullback(R, ring.outer, 2, keep=lambda c: is_linked(c.curve, [x]))
    inner = iterated_pullback(R, ring.inner, 2, keep=lambda c: is_linked(c.curve, [x]))
    o = [c for c in outer if is_linked(c.curve, [x])][0]
    i = [c for c in inner if is_linked(c.curve, [x])][0]
    m2 = grid_modulus(AnnulusRegion(o.curve, i.curve), 512).value
    assert m2 >= m0 / o.covering_degree - 0.03
