import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from qcsurgery.rational import (Polynomial, RationalMap, critical_points, escape_census, evaluate,
                                fixed_points, iterate_orbit, naive_eval, parse_coefficients,
                                postcritical_sample, preimage_array, preimages, write_orbit_csv)

coef = st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False)


def poly_map(coeffs):
    return RationalMap.polynomial(coeffs)


def test_evaluate_examples():
    assert evaluate(poly_map([0, 0, 1]), 2) == 4
    assert evaluate(poly_map([4, 0, 1]), 0) == 4


def test_degree5_matches_naive_evaluator(rng):
    c = rng.normal(size=6) + 1j * rng.normal(size=6)
    R = poly_map(c)
    z = rng.normal(size=100) + 1j * rng.normal(size=100)
    np.testing.assert_allclose(R(z), naive_eval(c, z), rtol=1e-12)


def test_rational_evaluation_against_naive(rng):
    n = rng.normal(size=4) + 1j * rng.normal(size=4)
    d = rng.normal(size=3) + 1j * rng.normal(size=3)
    R = RationalMap(Polynomial(n), Polynomial(d))
    z = rng.normal(size=50) + 1j * rng.normal(size=50)
    np.testing.assert_allclose(R(z), naive_eval(n, z) / naive_eval(d, z), rtol=1e-11)


def test_critical_points_examples():
    pts = sorted(critical_points(poly_map([0, -3, 0, 1])).points, key=lambda t: t[0].real)
    assert [m for _, m in pts] == [1, 1]
    np.testing.assert_allclose([z for z, _ in pts], [-1, 1], atol=1e-12)
    (z0, m0), = critical_points(poly_map([0, 0, 1])).points
    assert abs(z0) < 1e-12 and m0 == 1


def test_critical_values_match_dense_grid_minima(rng):
    c = rng.normal(size=5) + 1j * rng.normal(size=5)
    R = poly_map(c)
    xs = np.linspace(-4, 4, 801)
    Z = xs[None, :] + 1j * xs[:, None]
    dmod = np.abs(R.derivative(Z))
    # each critical point sits at a local minimum of |R'| on the grid (to a cell)
    h = xs[1] - xs[0]
    for z, _ in critical_points(R).points:
        if abs(z.real) > 3.9 or abs(z.imag) > 3.9:
            continue
        i = int(round((z.imag + 4) / h))
        j = int(round((z.real + 4) / h))
        win = dmod[i - 3:i + 4, j - 3:j + 4]
        k = np.unravel_index(np.argmin(win), win.shape)
        assert abs(Z[i - 3 + k[0], j - 3 + k[1]] - z) <= 1.5 * h


@given(st.lists(coef, min_size=2, max_size=5).filter(lambda c: abs(c[-1]) > 0.2))
def test_critical_multiplicities_sum(c):
    R = poly_map(c + [1.0])
    assert critical_points(R).finite_multiplicity == R.degree - 1


def test_iterate_orbit_examples():
    rec = iterate_orbit(poly_map([4, 0, 1]), 0, 10, 100)
    assert rec.escaped and rec.escape_index == 3
    np.testing.assert_array_equal(rec.samples, [0, 4, 20, 404])
    rec = iterate_orbit(poly_map([0, 0, 1]), 0, 50)
    assert not rec.escaped and np.all(rec.samples == 0)
    rec = iterate_orbit(poly_map([-2, 0, 1]), 0, 20)
    assert not rec.escaped
    np.testing.assert_array_equal(rec.samples[:5], [0, -2, 2, 2, 2])


def test_orbit_agrees_with_double_precision_recomputation(rng):
    c = [0.3 + 0.1j, 0, 1]
    R = poly_map(c)
    for z0 in rng.normal(size=5) * 0.3 + 1j * rng.normal(size=5) * 0.3:
        rec = iterate_orbit(R, z0, 30)
        mpmath.mp.dps = 34
        z = mpmath.mpc(z0.real, z0.imag)
        stop = rec.escape_index if rec.escaped else len(rec.samples)
        for n in range(stop):
            assert abs(complex(z) - rec.samples[n]) <= 1e-6 * max(1.0, abs(rec.samples[n]))
            z = z * z + mpmath.mpc(c[0].real, c[0].imag)


def test_escape_census_examples(misiurewicz):
    assert escape_census(poly_map([4, 0, 1])).count == 1
    assert escape_census(poly_map([0, 0, 1])).count == 0
    assert escape_census(misiurewicz.rmap).count == 1


@given(st.lists(coef, min_size=2, max_size=3), st.integers(1, 40), st.integers(0, 60))
def test_escape_census_monotone_in_horizon(c, h1, extra):
    R = poly_map(c + [1.0])
    assert escape_census(R, h1).count <= escape_census(R, h1 + extra).count


def test_preimage_examples(rng):
    R = poly_map([0, 0, 1])
    np.testing.assert_allclose(sorted(preimage_array(R, 4), key=lambda z: z.real), [-2, 2], atol=1e-12)
    (z, m), = preimages(R, 0)
    assert abs(z) < 1e-7 and m == 2
    R3 = poly_map(rng.normal(size=4) + 1j * rng.normal(size=4))
    w = complex(rng.normal(), rng.normal())
    for z in preimage_array(R3, w):
        assert abs(R3(z) - w) <= 1e-9


@given(st.lists(coef, min_size=2, max_size=4), coef)
def test_preimages_round_trip(c, z):
    R = poly_map(c + [1.0])
    w = complex(R(z))
    for q in preimage_array(R, w):
        assert abs(complex(R(q)) - w) <= 1e-9 * max(1.0, abs(w))


def test_fixed_point_examples():
    fp = sorted(fixed_points(poly_map([0, 0, 1])), key=lambda t: t[0].real)
    np.testing.assert_allclose([z for z, _ in fp], [0, 1], atol=1e-12)
    np.testing.assert_allclose([m for _, m in fp], [0, 2], atol=1e-12)
    fp = sorted(fixed_points(poly_map([-2, 0, 1])), key=lambda t: t[0].real)
    np.testing.assert_allclose([z for z, _ in fp], [-1, 2], atol=1e-12)
    np.testing.assert_allclose([m for _, m in fp], [-2, 4], atol=1e-12)
    assert all(abs(m) > 1 for _, m in fp)


@given(coef, coef)
def test_holomorphic_index_formula_quadratic(a, b):
    R = poly_map([a, b, 1.0])
    lams = [m for _, m in fixed_points(R)]
    if len(lams) != 2 or min(abs(1 - lam) for lam in lams) < 1e-3:
        return
    # sum over all fixed points on the sphere; infinity is superattracting (multiplier 0) and contributes 1
    total = sum(1 / (1 - lam) for lam in lams) + 1 / (1 - 0)
    assert abs(total - 1) < 1e-6


def test_postcritical_sample_examples():
    pc, p = postcritical_sample(poly_map([4, 0, 1]), 3)
    for v in (4, 20, 404):
        assert np.min(np.abs(pc - v)) < 1e-9
    assert p.size == 0
    pc, p = postcritical_sample(poly_map([-2, 0, 1]), 3)
    assert set(np.round(p.real, 9)) == {-2.0, 2.0}
    assert set(np.round(pc.real, 9)) >= {-2.0, 2.0}


def test_postcritical_sample_landed_repelling_orbit(misiurewicz):
    # the critical orbit lands on a repelling fixed point; rounding must not make it escape
    _, p = postcritical_sample(misiurewicz.rmap, 3)
    assert np.min(np.abs(p - misiurewicz.landing_point)) < 1e-9


def test_orbit_csv_and_parse(tmp_path):
    rec = iterate_orbit(poly_map([-2, 0, 1]), 0.5, 5)
    text = write_orbit_csv(rec, tmp_path / "o.csv").read_text().splitlines()
    assert text[0] == "n,re,im,abs" and len(text) == 7
    assert parse_coefficients("4, 0, 1") == [4, 0, 1]
    assert parse_coefficients("1+2i,3") == [1 + 2j, 3]


def test_nonpolynomial_rejected_for_green():
    from qcsurgery.rational import green_function
    with pytest.raises(ValueError):
        green_function(RationalMap(Polynomial([1, 0, 1]), Polynomial([0, 1])), 1.0)
