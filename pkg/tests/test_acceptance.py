"""The nine acceptance criteria; each prints one PASS/FAIL line in the terminal summary."""
import time

import numpy as np

from conftest import record
from qcsurgery.beltrami import BeltramiField, GridSpec, solve_mrmt
from qcsurgery.curves import JordanCurve, annulus_hyperbolic_length, lift_curve
from qcsurgery.harness import PRESETS, ExperimentConfig, detect_conical, preset_map, run_instability_experiment
from qcsurgery.moduli import AnnulusRegion, grid_modulus, round_modulus
from qcsurgery.rational import RationalMap, fixed_points
from qcsurgery.surgery import build_blend


def test_criterion_1_radial_stretch():
    grid = GridSpec.square(0j, 1.25, 512)
    z = grid.centers()
    mu = BeltramiField.from_values(grid, np.where(np.abs(z) < 1, z / np.where(z == 0, 1, np.conj(z)) / 3, 0))
    t0 = time.perf_counter()
    qc = solve_mrmt(mu)
    secs = time.perf_counter() - t0
    err = float(np.abs(z + qc.displacement.values - z * np.abs(z))[np.abs(z) <= 0.9].max())
    ok = err <= 1e-2 and secs <= 60
    record(1, ok, f"sup error {err:.2e} on |z|<=0.9, {secs:.1f} s")
    assert ok


def test_criterion_2_moduli():
    exact = round_modulus(0.5, 1)
    m = grid_modulus(AnnulusRegion.round(0.5, 1, 0, 1024), 512).value
    R = RationalMap.polynomial([0, 0, 1])
    outer = lift_curve(R, JordanCurve.circle(0, 1, 512), 1.0).curve
    inner = lift_curve(R, JordanCurve.circle(0, 0.5, 512), 0.5 ** 0.5).curve
    m2 = grid_modulus(AnnulusRegion(outer, inner), 512).value
    e1, e2 = abs(m - exact) / exact, abs(m2 - exact / 2) / (exact / 2)
    ok = e1 < 0.02 and e2 < 0.03
    record(2, ok, f"A(0.5,1) rel err {e1:.2e}; z^2 preimage ring rel err {e2:.2e}")
    assert ok


def test_criterion_3_blend_suite():
    ps = (0.1, 0.3, 0.5, 0.7)
    coarse = [build_blend(p, 256).sup_norm for p in ps]
    fine = [build_blend(p, 512).sup_norm for p in ps]
    stable = max(abs(a - b) for a, b in zip(coarse, fine))
    ok = max(fine) < 1 and stable < 1e-2 and all(a <= b for a, b in zip(fine, fine[1:]))
    record(3, ok, "sup norms " + ", ".join(f"{v:.4f}" for v in fine) + f"; resolution drift {stable:.1e}")
    assert ok


def test_criterion_4_invariance(headline):
    bundle, _, _ = headline
    rec = next(r for r in bundle.records if r.depth == 2)
    ok = rec.invariance >= 0.95
    record(4, ok, f"depth-2 pass fraction {rec.invariance:.3f} on a 1024^2 grid")
    assert ok


def test_criterion_5_headline(headline):
    bundle, _, secs = headline
    ok = (bundle.s_before == 1 and bundle.s_after == [2, 2, 2]
          and all(r < 0.05 for r in bundle.fit_residuals) and secs <= 600)
    record(5, ok, f"s {bundle.s_before} -> {bundle.s_after}, residuals "
           + ", ".join(f"{r:.1e}" for r in bundle.fit_residuals) + f", {secs:.0f} s")
    assert ok


def test_criterion_6_lift_length():
    details, ok = [], True
    for d in (2, 3):
        R = RationalMap.polynomial([0] * d + [1])
        lift = lift_curve(R, JordanCurve.circle(0, 1.7, 512), 1.7 ** (1 / d))
        ratio = (annulus_hyperbolic_length(lift.curve, 0.5 ** (1 / d), 4 ** (1 / d))
                 / annulus_hyperbolic_length(JordanCurve.circle(0, 1.7, 512), 0.5, 4))
        ok &= lift.covering_degree == d and abs(ratio - d) <= 0.01 * d
        details.append(f"d={d}: degree {lift.covering_degree}, ratio {ratio:.4f}")
    record(6, ok, "; ".join(details))
    assert ok


def test_criterion_7_conical(misiurewicz):
    cert = detect_conical(preset_map("chebyshev"), 2.0, 0.1, d_max=1, horizon=50)
    k0 = []
    for name in PRESETS:
        R = preset_map(name)
        if name == "misiurewicz-cubic":
            x0 = misiurewicz.landing_point
        else:
            x0 = max((z for z, lam in fixed_points(R) if abs(lam) > 1), key=abs)
        k0.append(detect_conical(R, x0, horizon=0).component_degrees == (1,))
    ok = cert.conical and len(cert.good_times) == 51 and all(k0)
    record(7, ok, f"z^2-2 at 2: degree-1 times {len(cert.good_times)}/51; k=0 identity on {sum(k0)}/{len(k0)} presets")
    assert ok


def test_criterion_8_identity_limit(headline):
    bundle, _, _ = headline
    disp = [r.surgery_displacement for r in bundle.records]
    ok = all(a > b for a, b in zip(disp, disp[1:]))
    record(8, ok, "surgery displacement " + " > ".join(f"{v:.3e}" for v in disp))
    assert ok


def test_criterion_9_determinism(headline, tmp_path):
    bundle, out, _ = headline
    again = run_instability_experiment(ExperimentConfig(), tmp_path)
    names = sorted(p.name for p in out.iterdir())
    same = names == sorted(p.name for p in tmp_path.iterdir())
    differing = [n for n in names if not (tmp_path / n).exists()
                 or (tmp_path / n).read_bytes() != (out / n).read_bytes()]
    ok = same and not differing and again.report_text() == bundle.report_text()
    record(9, ok, f"{len(names)} output files compared, {len(differing)} differ")
    assert ok
