import numpy as np
import pytest

from qcsurgery.beltrami import BeltramiField
from qcsurgery.rational import preimage_array
from qcsurgery.surgery import (ConfigViolationError, SurgeryConfig, SurgeryTooThinError, blend_parameter,
                               blend_sup_norm, build_blend, default_grid, invariant_beltrami, mobius,
                               sigma_orbits, transplant, verify_invariance)


@pytest.fixture(scope="module")
def blend05():
    return build_blend(0.5, 256)


def test_blend_examples(blend05):
    assert blend05.a == 0.625 == blend_parameter(0.5)
    assert abs(blend05(np.array([0j]))[0] - 0.625) < 1e-15
    assert mobius(-0.625, 0.625) == 0
    # -a sits in the ring for p = 0.5, so the blend sends some other point to 0
    assert abs(blend05(blend05.inverse(np.array([0j])))[0]) < 1e-10


def test_blend_is_mobius_on_core_and_identity_on_unit_circle(blend05, rng):
    z = 0.5 * np.sqrt(rng.random(200)) * np.exp(2j * np.pi * rng.random(200))
    np.testing.assert_allclose(blend05(z), mobius(z, 0.625), atol=1e-15)
    e = np.exp(2j * np.pi * rng.random(200))
    assert np.max(np.abs(blend05(e * (1 - 1e-9)) - e)) < 1e-6


def test_blend_boundary_deviation_below_two_cells(blend05):
    inner, outer = blend05.boundary_deviation()
    assert inner < 2 and outer < 2


def test_blend_resolution_stable():
    a = build_blend(0.3, 256).sup_norm
    b = build_blend(0.3, 512).sup_norm
    assert a < 1 and abs(a - b) < 1e-2


def test_blend_norm_monotone_in_p():
    norms = [blend_sup_norm(p) for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(x <= y for x, y in zip(norms, norms[1:]))
    with pytest.raises(SurgeryTooThinError):
        build_blend(0.9, 256)


def test_blend_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_blend(1.2, 256)
    with pytest.raises(ValueError):
        build_blend(0.5, 64)


def test_transplanted_norm_independent_of_centre(depth_setup, rng):
    s = depth_setup(1)
    cfg = s.plan.config
    other = SurgeryConfig.aimed(cfg.curve, cfg.b, cfg.disk_center, 0.5 * cfg.disk_radius, cfg.p, 1.0)
    sups = []
    for c in (cfg, other):
        sm = transplant(s.blend, c)
        w = c.disk_center + c.disk_radius * np.sqrt(rng.random(20000)) * np.exp(2j * np.pi * rng.random(20000))
        sups.append(np.abs(sm.jet(w)[2]).max())
    assert abs(sups[0] - sups[1]) < 1e-2


def test_transplant_identity_off_disk(depth_setup, rng):
    sm = depth_setup(1).P.surgery
    cfg = sm.config
    w = cfg.disk_center + cfg.disk_radius * (1 + 3 * rng.random(1000)) * np.exp(2j * np.pi * rng.random(1000))
    assert np.array_equal(sm(w), w)


def test_transplant_sends_b_to_target_and_inverts(depth_setup, rng):
    sm = depth_setup(1).P.surgery
    cfg = sm.config
    assert abs(sm(np.array([cfg.b]))[0] - cfg.target) < 1e-12 * max(1, abs(cfg.target))
    w = cfg.disk_center + cfg.disk_radius * np.sqrt(rng.random(1000)) * np.exp(2j * np.pi * rng.random(1000))
    assert np.max(np.abs(sm.inverse(sm(w)) - w)) < 1e-6


def test_transplant_config_violation(depth_setup):
    cfg = depth_setup(1).plan.config
    bad = SurgeryConfig(cfg.curve, cfg.disk_center + 2 * cfg.disk_radius, cfg.disk_center, cfg.disk_radius,
                        cfg.p, cfg.target)
    with pytest.raises(ConfigViolationError):
        transplant(depth_setup(1).blend, bad)


def test_quasiregular_examples(depth_setup, rng):
    s = depth_setup(1)
    P, R, cfg = s.P, s.R, s.plan.config
    z = rng.normal(size=2000) * 2 + 1j * rng.normal(size=2000) * 2
    off = np.abs(R(z) - cfg.disk_center) >= cfg.disk_radius
    assert np.array_equal(P(z[off]), R(z[off]))
    for q in preimage_array(R, cfg.b):
        assert abs(P(np.array([q]))[0] - cfg.target) < 1e-9
    for w in rng.normal(size=10) + 1j * rng.normal(size=10):
        pre = P.preimages(complex(w))
        assert len(pre) == R.degree
        np.testing.assert_allclose(P(pre), w, atol=1e-8)


def passes(P, z, horizon=200):
    """Number of visits of each orbit to the transplanted ring and |blend mu| at the first one."""
    z = np.asarray(z, dtype=complex).copy()
    count = np.zeros(z.size, dtype=int)
    first = np.zeros(z.size)
    for _ in range(horizon):
        w = P.base(z)
        ring, _ = P.surgery.zones(w)
        mod = np.abs(P.surgery.jet(w)[2])
        first = np.where(ring & (count == 0), mod, first)
        count += ring
        z = P.surgery(w)
        z = np.where(np.abs(z) > 1e6, 1e6, z)
    return count, first


def test_sigma_orbit_rules(depth_setup, rng):
    s = depth_setup(1)
    P, R, cfg = s.P, s.R, s.plan.config
    far = np.array([1e3, -2e3j])
    assert np.all(sigma_orbits(P, far).sigma == 0)
    # points whose image lands in the ring: sigma is the dilatation of P itself
    zeta = (0.5 * (cfg.p + 1)) * np.exp(2j * np.pi * rng.random(40))
    w = P.surgery.unchart(zeta)
    z = np.concatenate([preimage_array(R, complex(x)) for x in w])
    mu_P = P.jet(z)[2]
    count, first = passes(P, z)
    single = count == 1
    assert single.any()
    np.testing.assert_allclose(sigma_orbits(P, z[single]).sigma, mu_P[single], atol=1e-12)
    # later entry: modulus preserved by holomorphic pullback
    zz = np.concatenate([preimage_array(R, complex(q)) for q in z[:20]])
    count, first = passes(P, zz)
    single = count == 1
    assert single.any()
    np.testing.assert_allclose(np.abs(sigma_orbits(P, zz[single]).sigma), first[single], atol=1e-12)


class _Holomorphic:
    """R viewed as a quasiregular map with an identity blend."""

    def __init__(self, R):
        self.R = R

    def jet(self, z):
        return self.R(z), self.R.derivative(z), np.zeros(np.shape(z), dtype=complex)


def test_zero_field_is_invariant_under_holomorphic_map(misiurewicz):
    R = misiurewicz.rmap
    grid = default_grid(R, 128)
    zero = BeltramiField(grid, np.zeros((128, 128)), 0.0, declared_support=np.ones((128, 128), dtype=bool))
    rep = verify_invariance(zero, _Holomorphic(R), samples=200)
    assert rep.samples == 200 and rep.pass_fraction == 1.0


@pytest.fixture(scope="module")
def sigma_depth3(depth_setup):
    s = depth_setup(3)
    return s, invariant_beltrami(s.P, grid=default_grid(s.R, 512))


def test_constructed_sigma_invariant_depth3(sigma_depth3):
    s, sigma = sigma_depth3
    assert verify_invariance(sigma, s.P).pass_fraction >= 0.95


def test_corrupted_sigma_fails_invariance(sigma_depth3):
    s, sigma = sigma_depth3
    z = sigma.grid.centers()
    supp = sigma.support
    cut = np.median(z[supp].real)
    bad = sigma.with_values(np.where(supp & (z.real < cut), 0, sigma.values))
    assert verify_invariance(bad, s.P).pass_fraction < 0.9


def test_sigma_vanishes_off_support(sigma_depth3):
    _, sigma = sigma_depth3
    assert np.all(sigma.values[~sigma.support] == 0)
    assert sigma.sup_norm < 1


def test_sigma_norm_against_blend_norm(sigma_depth3, rng):
    # single-pass points reproduce the blend norm; orbits crossing the ring
    # several times compose dilatations and may exceed it (recorded deviation)
    s, sigma = sigma_depth3
    assert sigma.sup_norm >= s.blend.sup_norm - 1e-2
    supp = sigma.grid.centers()[sigma.support]
    pts = supp[rng.choice(supp.size, size=min(2000, supp.size), replace=False)]
    count, _ = passes(s.P, pts)
    mod = np.abs(sigma_orbits(s.P, pts[count == 1]).sigma)
    assert mod.max(initial=0) <= blend_sup_norm(s.blend.p) + 1e-2
