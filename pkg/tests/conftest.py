import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qcsurgery.curves import iterated_pullback, is_linked, JordanCurve
from qcsurgery.harness import (ExperimentConfig, auto_green_level, fundamental_annulus,
                               misiurewicz_preset, plan_surgery, run_instability_experiment)
from qcsurgery.surgery import build_blend, build_quasiregular

settings.register_profile("repo", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def misiurewicz():
    return misiurewicz_preset()


class DepthSetup:
    """Linked pullback curve, plan and quasiregular map at one depth of the Misiurewicz preset."""

    def __init__(self, preset, depth: int, blend_resolution: int = 256):
        R = preset.rmap
        x = preset.landing_point
        base = JordanCurve.circle(x, 0.25, 256)
        comps = iterated_pullback(R, base, depth, keep=lambda c: is_linked(c.curve, [x]))
        self.curve = [c for c in comps if is_linked(c.curve, [x])][0].curve
        self.fatou = fundamental_annulus(R, auto_green_level(R, base))
        self.plan = plan_surgery(R, self.curve, x, self.fatou)
        self.blend = build_blend(self.plan.config.p, blend_resolution)
        self.P = build_quasiregular(R, self.blend, self.plan.config)
        self.R = R
        self.x = x


@pytest.fixture(scope="session")
def depth_setup(misiurewicz):
    cache = {}

    def get(depth: int) -> DepthSetup:
        if depth not in cache:
            cache[depth] = DepthSetup(misiurewicz, depth)
        return cache[depth]
    return get


@pytest.fixture(scope="session")
def headline(tmp_path_factory):
    """The end-to-end run on the Misiurewicz preset at depths 1, 2, 3 on a 1024 grid."""
    import time
    out = tmp_path_factory.mktemp("headline")
    t0 = time.perf_counter()
    bundle = run_instability_experiment(ExperimentConfig(), out)
    return bundle, out, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
