"""Experiment driver: fundamental annuli, conical points, parameter search and the instability run."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beltrami import StraighteningError, straighten
from .curves import (AmbiguousPointError, AssumptionGCertificate, LiftResult, BranchAmbiguityError, ContinuationError, JordanCurve,
                     NoSafeCopyError, PunctureSet, assumption_g_search, contains, critical_values,
                     intersection_census, lift_curve, pullback_components)
from .moduli import AnnulusRegion, NoEmbeddingError, largest_embedded_round_annulus
from .rational import (Polynomial, RationalMap, critical_points, escape_census, fixed_points,
                       green_function, iterate_orbit, landed_orbit, postcritical_sample, preimage_array)
from .surgery import (SurgeryConfig, blend_parameter, build_blend, build_quasiregular, default_grid,
                      invariant_beltrami, verify_invariance)

REPORT_HEADER = ("# total disconnectedness of the Julia set is not certified; "
                 "presets are chosen to satisfy the hypotheses heuristically")


class LevelTooDeepError(ValueError):
    pass


class NotApplicableError(RuntimeError):
    """The map or curve does not meet the hypotheses of the construction."""


# ---------------------------------------------------------------------------
# Green function helpers and the fundamental annulus
# ---------------------------------------------------------------------------

def green_gradient(rmap: RationalMap, z, horizon: int = 200, bailout: float = 1e30) -> np.ndarray:
    """Gradient G_x + i G_y of the Green function, conj((R^n)' / R^n) / d^n at escape."""
    z = np.atleast_1d(np.asarray(z, dtype=complex)).copy()
    d = rmap.degree
    out = np.zeros(z.shape, dtype=complex)
    dz = np.ones(z.shape, dtype=complex)
    alive = np.arange(z.size)
    w = z.ravel()
    dz = dz.ravel()
    scale = 1.0
    for _ in range(horizon):
        if alive.size == 0:
            break
        dz = rmap.derivative(w) * dz
        w = rmap(w)
        scale /= d
        esc = np.abs(w) > bailout
        if esc.any():
            out.ravel()[alive[esc]] = np.conj(dz[esc] / w[esc]) * scale
            alive, w, dz = alive[~esc], w[~esc], dz[~esc]
    return out


@dataclass(frozen=True, eq=False)
class FundamentalAnnulus:
    region: AnnulusRegion
    green_level: float
    degree: int

    @property
    def inner(self) -> JordanCurve:
        return self.region.inner

    @property
    def outer(self) -> JordanCurve:
        return self.region.outer


def _project_to_level(rmap, z, level, iterations: int = 30):
    for _ in range(iterations):
        g = green_function(rmap, z)
        grad = green_gradient(rmap, z)
        step = (g - level) * grad / np.abs(grad) ** 2
        z = z - step
        if np.max(np.abs(step)) < 1e-14 * max(1.0, np.max(np.abs(z))):
            break
    return z


def _resample(z: np.ndarray, n: int) -> np.ndarray:
    closed = np.append(z, z[0])
    s = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(closed)))])
    t = np.linspace(0, s[-1], n, endpoint=False)
    return np.interp(t, s, closed.real) + 1j * np.interp(t, s, closed.imag)


def level_curve(rmap: RationalMap, level: float, resolution: int = 512, vertices: int = 512) -> JordanCurve:
    """The equipotential {G = level} traced by marching squares, then projected onto the level."""
    import contourpy

    d = rmap.degree
    lead = abs(rmap.numerator.coeffs[-1])
    radius = 2.0 * math.exp(level) * lead ** (-1 / (d - 1)) + 2.0
    xs = np.linspace(-radius, radius, resolution)
    Z = xs[None, :] + 1j * xs[:, None]
    G = green_function(rmap, Z)
    lines = contourpy.contour_generator(xs, xs, G).lines(level)
    closed = [ln for ln in lines if len(ln) > 8 and np.allclose(ln[0], ln[-1])]
    if len(closed) != 1 or len(lines) != 1:
        raise LevelTooDeepError(f"level {level} is not a single closed curve ({len(lines)} pieces)")
    raw = closed[0][:-1, 0] + 1j * closed[0][:-1, 1]
    z = _project_to_level(rmap, _resample(raw, vertices), level)
    return JordanCurve(z)


def fundamental_annulus(rmap: RationalMap, rho: float, resolution: int = 512,
                        vertices: int = 512) -> FundamentalAnnulus:
    """Ring between G = rho and G = d rho; the inner curve is the lift of the outer one."""
    if not rmap.is_polynomial or rmap.degree < 2:
        raise ValueError("fundamental annuli are constructed for polynomials of degree >= 2")
    d = rmap.degree
    crit = np.array([c for c, _ in critical_points(rmap).points])
    gcrit = float(np.max(green_function(rmap, crit), initial=0.0))
    if rho <= gcrit:
        raise LevelTooDeepError(f"rho = {rho} is not above the critical Green level {gcrit}")
    outer = level_curve(rmap, d * rho, resolution, vertices)
    w0 = outer.vertices[0]
    start = preimage_array(rmap, w0)[0]
    lift = lift_curve(rmap, outer, start)
    if lift.covering_degree != d:
        raise LevelTooDeepError("inner level curve is not connected")
    return FundamentalAnnulus(AnnulusRegion(outer, lift.curve), rho, d)


def auto_green_level(rmap: RationalMap, curve: JordanCurve, samples: int = 2048) -> float:
    """A level rho above every critical Green value whose band edges rho d^j sit just above max G on the curve."""
    d = rmap.degree
    crit = np.array([c for c, _ in critical_points(rmap).points])
    floor = 1.05 * float(np.max(green_function(rmap, crit), initial=0.0))
    gmax = float(np.max(green_function(rmap, curve.densified(curve.length / samples))))
    if gmax <= 0:
        raise NoSafeCopyError("curve lies in the filled Julia set")
    rho = 1.02 * gmax
    while rho <= max(floor, 1e-300):
        rho *= d
    return rho


# ---------------------------------------------------------------------------
# conical points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConicalCertificate:
    x0: complex
    delta: float
    degree_bound: int
    good_times: tuple
    component_degrees: tuple  # accumulated degree per k (None where indeterminate)
    indeterminate: tuple = ()

    @property
    def conical(self) -> bool:
        return not self.indeterminate and len(self.good_times) == len(self.component_degrees)


def local_map(rmap: RationalMap, x_from: complex, s_from: float, x_to: complex, s_to: float) -> RationalMap:
    """u -> (R(x_from + s_from u) - x_to) / s_to, expanded exactly as a polynomial in u.

    Working in these coordinates keeps pulled-back curves of order one in
    size however small they are in the plane.
    """
    if not rmap.is_polynomial:
        raise ValueError("local coordinates are built for polynomials")
    c = rmap.numerator.coeffs / rmap.denominator.coeffs[0]
    out = np.zeros(1, dtype=complex)
    lin = np.array([x_from, s_from], dtype=complex)
    for a in c[::-1]:
        out = np.polynomial.polynomial.polymul(out, lin)
        out[0] += a
    gap = complex(rmap(x_from)) - x_to
    # orbit samples represent a true orbit: a rounding-level gap (a landed cycle) is set to zero,
    # since after division by a tiny s_to it would swamp the curve
    out[0] = 0 if abs(gap) <= 1e-10 * (1 + abs(x_to)) else gap
    return RationalMap.polynomial(out / s_to)


def _local_component(Q: RationalMap, curve: JordanCurve) -> LiftResult:
    """Component of Q^-1(curve) around u = 0."""
    w = curve.vertices[0]
    cands = list(preimage_array(Q, w))
    d0 = complex(Q.derivative(0j))
    if d0 != 0:
        cands.append((w - complex(Q(0j))) / d0)  # linearised branch at the orbit point
    pre = []
    for u in cands:  # roots of a badly scaled local polynomial need polishing
        for _ in range(8):
            du = complex(Q.derivative(u))
            if du == 0:
                break
            u = u - (complex(Q(u)) - w) / du
        if abs(complex(Q(u)) - w) <= 1e-9 * max(1.0, abs(w)) and all(abs(u - v) > 1e-9 for v in pre):
            pre.append(u)
    pre = np.array(pre, dtype=complex)
    for k in np.argsort(np.abs(pre)):
        lift = lift_curve(Q, curve, pre[k])
        if contains(lift.curve, 0j):
            return lift
    raise ContinuationError("no pullback component contains the orbit point")


def pullback_degree(rmap: RationalMap, orbit: np.ndarray, k: int, delta: float, vertices: int,
                    cpts: np.ndarray, cmult: np.ndarray) -> int:
    """Degree of R^k on the component of R^-k D(orbit[k], delta) containing orbit[0]."""
    curve = JordanCurve.circle(0j, 1.0, vertices)
    scale = delta
    deg = 1
    for j in range(k - 1, -1, -1):
        d = abs(complex(rmap.derivative(orbit[j])))
        guess = scale / d if d > 1e-8 else math.sqrt(scale)
        Q = local_map(rmap, orbit[j], guess, orbit[j + 1], scale)
        lift = _local_component(Q, curve)
        if cpts.size:
            inside = np.atleast_1d(contains(lift.curve, (cpts - orbit[j]) / guess))
            deg *= 1 + int(cmult[inside].sum())
        # renormalise so the next curve has unit size again
        size = 0.5 * lift.curve.diameter
        curve = JordanCurve(lift.curve.vertices / size, check=False)
        scale = guess * size
    return deg


def detect_conical(rmap: RationalMap, x0: complex, delta: float | None = None, d_max: int = 1,
                   horizon: int = 50, vertices: int = 96, retries: int = 5) -> ConicalCertificate:
    """Pull disks D(R^k x0, delta) back along the orbit and track the degree of R^k on the component."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    orbit = landed_orbit(rmap, x0, max(horizon, 1))
    if orbit.escaped:
        raise ValueError("x0 does not have a bounded orbit within the horizon")
    xs = orbit.samples
    if len(xs) < horizon + 1:  # landed on a cycle: continue it exactly
        land = int(np.argmin(np.abs(xs[:-1] - xs[-1])))
        cycle = xs[land:-1]
        xs = np.concatenate([xs[:-1], np.resize(cycle, horizon + 2 - len(xs))])
    crit = critical_points(rmap).points
    cpts = np.array([c for c, _ in crit], dtype=complex)
    cmult = np.array([m for _, m in crit], dtype=int)
    if delta is None:
        dist = float(np.abs(xs[:, None] - cpts[None, :]).min()) if cpts.size else 1.0
        delta = max(0.5 * dist, 1e-3)
    if not delta > 0:
        raise ValueError("delta must be positive")
    for _ in range(retries + 1):
        degrees, good, bad = [], [], []
        ambiguous = False
        for k in range(horizon + 1):
            try:
                deg = pullback_degree(rmap, xs, k, delta, vertices, cpts, cmult)
            except (BranchAmbiguityError, AmbiguousPointError):
                ambiguous = True
                break
            except (ContinuationError, ValueError):
                degrees.append(None)
                bad.append(k)
                continue
            degrees.append(deg)
            if deg <= d_max:
                good.append(k)
        if not ambiguous:
            return ConicalCertificate(complex(x0), float(delta), d_max, tuple(good), tuple(degrees), tuple(bad))
        delta /= 2
    return ConicalCertificate(complex(x0), float(delta), d_max, tuple(good), tuple(degrees),
                              tuple(range(len(degrees), horizon + 1)))


# ---------------------------------------------------------------------------
# Misiurewicz parameters
# ---------------------------------------------------------------------------

def _landing_newton(make_map, crit: complex, param: complex, k: int, tol: float = 1e-13,
                    max_iter: int = 60):
    """Newton in a translation parameter for R^(k+1)(c) = R^k(c); dR/dparam = 1."""
    for _ in range(max_iter):
        R = make_map(param)
        z, dz = complex(crit), 0j
        zs, dzs = [z], [dz]
        for _ in range(k + 1):
            dz = complex(R.derivative(z)) * dz + 1
            z = complex(R(z))
            if not np.isfinite(z) or abs(z) > 1e8:
                return None
            zs.append(z)
            dzs.append(dz)
        g = zs[k + 1] - zs[k]
        dg = dzs[k + 1] - dzs[k]
        if dg == 0:
            return None
        step = g / dg
        param -= step
        if abs(step) < tol * max(1.0, abs(param)):
            return param
    return None


def _landing_residual(R, crit, k):
    z = complex(crit)
    for _ in range(k):
        z = complex(R(z))
    return abs(complex(R(z)) - z), z


def cubic_family(A: float):
    return lambda B: RationalMap.polynomial([B, -3 * A * A, 0, 1])


def quadratic_family():
    return lambda c: RationalMap.polynomial([c, 0, 1])


def refine_landing(make_map, crit, param, k):
    out = _landing_newton(make_map, crit, param, k)
    if out is None:
        raise ValueError("landing Newton iteration did not converge")
    return out


@dataclass(frozen=True)
class MisiurewiczParameters:
    A: float
    B: complex
    k: int
    landing_point: complex
    multiplier: complex
    residual: float

    @property
    def rmap(self) -> RationalMap:
        return cubic_family(self.A)(self.B)


def find_misiurewicz_cubic(k: int, seeds: int = 64, A: float = 0.8, seed: int = 0,
                           radius: float = 2.5) -> list[MisiurewiczParameters]:
    """Parameters B of z^3 - 3A^2 z + B with R^k(-A) a repelling fixed point and +A escaping."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    fam = cubic_family(A)
    found: list[MisiurewiczParameters] = []
    for _ in range(seeds):
        B0 = radius * np.sqrt(rng.random()) * np.exp(2j * np.pi * rng.random())
        B = _landing_newton(fam, -A, complex(B0), k)
        if B is None:
            continue
        R = fam(B)
        res, x = _landing_residual(R, -A, k)
        if res > 1e-10:
            continue
        if k > 1 and _landing_residual(R, -A, k - 1)[0] < 1e-8:
            continue  # lands earlier: belongs to a smaller k
        lam = complex(R.derivative(x))
        if abs(lam) <= 1:
            continue
        census = escape_census(R)
        if census.count != 1:
            continue
        if any(abs(B - f.B) < 1e-8 for f in found):
            continue
        found.append(MisiurewiczParameters(A, complex(B), k, x, lam, res))
    found.sort(key=lambda f: (round(f.B.real, 9), round(f.B.imag, 9)))
    return found


# ---------------------------------------------------------------------------
# presets and configuration
# ---------------------------------------------------------------------------

MISIUREWICZ_SEED = complex(-1.831045, -1.071599)


def misiurewicz_preset() -> MisiurewiczParameters:
    A, k = 0.8, 2
    fam = cubic_family(A)
    B = refine_landing(fam, -A, MISIUREWICZ_SEED, k)
    R = fam(B)
    res, x = _landing_residual(R, -A, k)
    return MisiurewiczParameters(A, B, k, x, complex(R.derivative(x)), res)


def preset_map(name: str) -> RationalMap:
    if name == "misiurewicz-cubic":
        return misiurewicz_preset().rmap
    table = {
        "quadratic-escape": [4, 0, 1],   # z^2 + 4
        "chebyshev": [-2, 0, 1],         # z^2 - 2
        "square": [0, 0, 1],             # z^2
        "cube": [0, 0, 0, 1],            # z^3
    }
    if name not in table:
        raise KeyError(f"unknown preset {name!r}")
    return RationalMap.polynomial(table[name])


PRESETS = ("misiurewicz-cubic", "quadratic-escape", "chebyshev", "square", "cube")


def resolve_map(text: str) -> RationalMap:
    """Preset name or an ascending coefficient list such as ``4,0,1``."""
    from .rational import parse_coefficients
    if text in PRESETS:
        return preset_map(text)
    return RationalMap.polynomial(parse_coefficients(text))


@dataclass
class ExperimentConfig:
    map: str = "misiurewicz-cubic"
    depths: tuple = (1, 2, 3)
    resolution: int = 1024
    blend_resolution: int = 256
    seed: int = 0
    base_radius: float = 0.25
    base_center: complex | None = None
    base_vertices: int = 256
    horizon: int = 200
    invariance_samples: int = 500
    census_horizon: int = 50
    fit_tolerance: float = 0.05
    disk_fill: float = 0.95
    julia_clearance: float = 0.04
    renders: bool = True

    KEYS = ("map", "depths", "resolution", "blend_resolution", "seed", "base_radius", "base_center",
            "base_vertices", "horizon", "invariance_samples", "census_horizon", "fit_tolerance",
            "disk_fill", "julia_clearance", "renders")

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        """Flat ``key = value`` lines; ``#`` comments; unknown keys are errors."""
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls.KEYS:
                raise ValueError(f"line {n}: unknown key {key!r}")
            setattr(cfg, key, cls._convert(key, value))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    @staticmethod
    def _convert(key: str, value: str):
        if key == "map":
            return value
        if key == "depths":
            return tuple(int(v) for v in value.replace(",", " ").split())
        if key in ("resolution", "blend_resolution", "seed", "base_vertices", "horizon",
                   "invariance_samples", "census_horizon"):
            return int(value)
        if key == "base_center":
            return None if value.lower() in ("", "auto", "none") else complex(value.replace("i", "j"))
        if key == "renders":
            return value.lower() in ("1", "true", "yes", "on")
        return float(value)

    def dumps(self) -> str:
        lines = []
        for k in self.KEYS:
            v = getattr(self, k)
            if k == "depths":
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "auto"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the experiment
# ---------------------------------------------------------------------------

def distance_estimate(rmap: RationalMap, z, horizon: int = 300, bailout: float = 1e30) -> np.ndarray:
    """|w| log|w| / |(R^n)'| at escape: comparable to the distance to the Julia set (0 if bounded)."""
    z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
    out = np.zeros(z.shape)
    dz = np.ones(z.shape, dtype=complex)
    alive = np.arange(z.size)
    w = z.copy()
    for _ in range(horizon):
        if alive.size == 0:
            break
        dz = rmap.derivative(w) * dz
        w = rmap(w)
        esc = np.abs(w) > bailout
        if esc.any():
            aw = np.abs(w[esc])
            out[alive[esc]] = aw * np.log(aw) / np.abs(dz[esc])
            alive, w, dz = alive[~esc], w[~esc], dz[~esc]
    return out


def julia_clearance_region(rmap: RationalMap, center: complex, radius: float, rays: int = 512,
                           samples: int = 400, clearance: float = 0.04, floor: float = 0.02) -> AnnulusRegion:
    """Region in unit-disk coordinates of D(center, radius) cut off where the Julia set comes close.

    Along each ray, walking inward, the inner boundary sits at the first
    radius where the distance estimate drops below ``clearance`` times the
    radius.
    """
    th = 2 * np.pi * np.arange(rays) / rays
    rs = np.linspace(1, floor, samples)
    Z = center + radius * rs[:, None] * np.exp(1j * th)[None, :]
    de = distance_estimate(rmap, Z).reshape(Z.shape) / (radius * rs[:, None])
    bad = de < clearance
    inner_r = np.where(bad.any(axis=0), rs[np.argmax(bad, axis=0)], floor)
    inner_r = np.maximum(inner_r, floor)
    if inner_r.max() >= 0.99:
        raise NoEmbeddingError("the Julia set reaches the transplant disk boundary")
    outer = JordanCurve.circle(0j, 1.0, rays)
    return AnnulusRegion(outer, JordanCurve(inner_r * np.exp(1j * th)))


@dataclass
class DepthRecord:
    depth: int
    status: str = "pending"
    stage: str = ""
    message: str = ""
    curve_length: float = float("nan")
    curve_diameter: float = float("nan")
    covering_degree: int = 0
    b: complex = 0j
    disk_radius: float = float("nan")
    p: float = float("nan")
    target: complex = 0j
    target_green: float = float("nan")
    safe_level: float = float("nan")
    n_alpha: int = 0
    blend_norm: float = float("nan")
    beltrami_norm: float = float("nan")
    support_cells: int = 0
    invariance: float = float("nan")
    fit_residual: float = float("nan")
    fit_degree: int = 0
    surgery_displacement: float = float("nan")
    straightening_displacement: float = float("nan")
    s_after: int = -1
    fitted: tuple = ()


@dataclass
class ReportBundle:
    map_label: str
    coefficients: tuple
    s_before: int
    records: list = field(default_factory=list)
    status: str = "pending"
    message: str = ""
    green_level: float = float("nan")
    base_length: float = float("nan")
    certificate_entries: int = 0
    artifacts: list = field(default_factory=list)

    @property
    def s_after(self) -> list:
        return [r.s_after for r in self.records]

    @property
    def beltrami_norms(self) -> list:
        return [r.beltrami_norm for r in self.records]

    @property
    def fit_residuals(self) -> list:
        return [r.fit_residual for r in self.records]

    @property
    def success(self) -> bool:
        return self.status == "success"

    def report_text(self) -> str:
        lines = [REPORT_HEADER, f"map = {self.map_label}",
                 "coefficients = " + ",".join(_fmt(c) for c in self.coefficients),
                 f"status = {self.status}"]
        if self.message:
            lines.append(f"message = {self.message}")
        lines += [f"s_before = {self.s_before}", f"green_level = {_fmt(self.green_level)}",
                  f"base_length = {_fmt(self.base_length)}",
                  f"certificate_entries = {self.certificate_entries}"]
        for r in self.records:
            pre = f"depth.{r.depth}."
            for name, value in vars(r).items():
                if name == "depth":
                    continue
                if name == "fitted":
                    value = ",".join(_fmt(c) for c in value)
                lines.append(pre + name + " = " + _fmt(value))
        lines.append("artifacts = " + ",".join(self.artifacts))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (complex, np.complexfloating)):
        return f"{v.real:.12g}{v.imag:+.12g}i"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _choose_component(entries, level: int, x_land: complex | None):
    at = [e for e in entries if e.level == level]
    if not at:
        return None
    if x_land is not None:
        with_x = [e for e in at if contains(e.curve, x_land)]
        if with_x:
            return min(with_x, key=lambda e: e.length)
    return min(at, key=lambda e: e.length)


def _first_hit(orbit: np.ndarray, curve: JordanCurve):
    for z in orbit[1:]:
        try:
            if contains(curve, z):
                return complex(z)
        except ValueError:
            continue
    return None


@dataclass(frozen=True)
class SurgeryPlan:
    config: SurgeryConfig
    census: object  # IntersectionCensus
    target_green: float


def plan_surgery(R: RationalMap, curve: JordanCurve, b: complex, fatou, census_horizon: int = 50,
                 disk_fill: float = 0.95, clearance: float = 0.04, directions: int = 512) -> SurgeryPlan:
    """Disk D around b inside the curve, p from the Julia clearance, target aimed at the safe copy."""
    r2 = disk_fill * float(curve.distance(np.array([b]))[0])
    region = julia_clearance_region(R, b, r2, clearance=clearance)
    p = round(1.05 * largest_embedded_round_annulus(region), 3)
    census = intersection_census(curve, fatou, R, census_horizon)
    a = blend_parameter(p)
    th = 2 * np.pi * np.arange(directions) / directions
    G = green_function(R, b + a * r2 * np.exp(1j * th))
    k = int(np.argmax(G))
    if G[k] < census.safe_level:
        raise NoSafeCopyError("no point at chart radius a lies in the safe copy")
    config = SurgeryConfig.aimed(curve, b, b, r2, p, direction=float(th[k]), safe_level=census.safe_level)
    return SurgeryPlan(config, census, float(G[k]))


def surgery_displacement(P, samples: int = 64, directions: int = 64) -> float:
    """Sup of |f(gamma, p)(w) - w| over a polar sample of the disk D."""
    cfg = P.config
    th = 2 * np.pi * np.arange(directions) / directions
    zz = cfg.disk_center + cfg.disk_radius * np.sqrt(np.linspace(0, 1, samples))[:, None] * np.exp(1j * th)
    return float(np.max(np.abs(P.surgery(zz) - zz)))


def run_depth(R: RationalMap, entry, rec: DepthRecord, cfg: ExperimentConfig, fatou,
              bounded_orbit: np.ndarray, x_land, out: Path | None, artifacts: list):
    curve = entry.curve
    rec.curve_length = entry.length
    rec.curve_diameter = curve.diameter
    rec.covering_degree = entry.degree
    rec.stage = "geometry"
    b = x_land if x_land is not None and contains(curve, x_land) else _first_hit(bounded_orbit, curve)
    if b is None:
        raise NotApplicableError("no point of the bounded critical orbit inside the curve")
    rec.b = b
    plan = plan_surgery(R, curve, b, fatou, cfg.census_horizon, cfg.disk_fill, cfg.julia_clearance)
    config = plan.config
    rec.disk_radius = config.disk_radius
    rec.p = config.p
    rec.n_alpha = plan.census.n_alpha
    rec.safe_level = plan.census.safe_level
    rec.target = config.target
    rec.target_green = plan.target_green
    rec.stage = "blend"
    blend = build_blend(config.p, cfg.blend_resolution)
    rec.blend_norm = blend.sup_norm
    P = build_quasiregular(R, blend, config)
    rec.surgery_displacement = surgery_displacement(P)
    rec.stage = "beltrami"
    grid = default_grid(R, cfg.resolution)
    sigma = invariant_beltrami(P, cfg.horizon, grid)
    rec.beltrami_norm = sigma.sup_norm
    rec.support_cells = int(sigma.support.sum())
    rep = verify_invariance(sigma, P, cfg.invariance_samples, seed=cfg.seed)
    rec.invariance = rep.pass_fraction
    rec.stage = "straighten"
    fit = straighten(P, sigma, R.degree, tolerance=cfg.fit_tolerance, seed=cfg.seed)
    rec.fit_residual = fit.residual
    rec.fit_degree = fit.degree
    rec.fitted = tuple(fit.fitted.coefficient_list)
    rec.straightening_displacement = fit.qc.sup_displacement
    rec.stage = "census-after"
    rec.s_after = escape_census(fit.fitted).count
    rec.stage = "done"
    if out is not None:
        d = rec.depth
        artifacts.append(curve.to_csv(out / f"curve_depth{d}.csv").name)
        artifacts.append(sigma.save(out / f"sigma_depth{d}.bin").name)
        artifacts.append(fit.qc.save(out / f"straightening_depth{d}.bin").name)
        if cfg.renders:
            artifacts.append(render_support_ppm(sigma, out / f"support_depth{d}.ppm").name)
            artifacts.append(plot_depth(R, curve, config, sigma, out / f"depth{d}.png").name)
    return rec


def run_instability_experiment(config, out_dir=None) -> ReportBundle:
    """Full pipeline per depth; stage errors are recorded, not raised."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    R = resolve_map(cfg.map)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    census = escape_census(R)
    bundle = ReportBundle(cfg.map, tuple(R.coefficient_list), census.count)
    artifacts: list[str] = []
    try:
        _, p_points = postcritical_sample(R, 8)
        bounded = [c for c, _, esc, _ in census.critical if not esc]
        orbit = landed_orbit(R, bounded[0], 64).samples if bounded else np.zeros(0, dtype=complex)
        if cfg.base_center is not None:
            center = cfg.base_center
        elif p_points.size:
            center = complex(orbit[-1])  # the periodic point the critical orbit lands on
        else:
            fp = [z for z, lam in fixed_points(R) if abs(lam) > 1]
            center = complex(fp[0]) if fp else 0j
        base = JordanCurve.circle(center, cfg.base_radius, cfg.base_vertices)
        punct = PunctureSet(p_points) if p_points.size else PunctureSet(np.array([center]))
        from .curves import quasihyperbolic_length
        bundle.base_length = quasihyperbolic_length(base, punct)
        cert = assumption_g_search(R, base, max(cfg.depths), R.degree * bundle.base_length,
                                   p_points, punct)
        bundle.certificate_entries = len(cert.found)
        if out is not None:
            (out / "certificate.txt").write_text(cert.report())
            artifacts.append("certificate.txt")
        if not cert.found:
            raise NotApplicableError("no linked pullback curve of bounded length (P-points: "
                                     f"{p_points.size})")
        rho = auto_green_level(R, base)
        bundle.green_level = rho
        fatou = fundamental_annulus(R, rho)
        x_land = complex(orbit[-1]) if orbit.size else None
        for depth in cfg.depths:
            rec = DepthRecord(depth)
            bundle.records.append(rec)
            entry = _choose_component(cert.found, depth, x_land)
            if entry is None:
                rec.status, rec.stage, rec.message = "failed", "assumption-g", "no certified curve"
                continue
            try:
                run_depth(R, entry, rec, cfg, fatou, orbit, x_land, out, artifacts)
                ok = rec.s_after >= bundle.s_before + 1 and rec.fit_residual < cfg.fit_tolerance
                rec.status = "success" if ok else "failed"
            except (ValueError, RuntimeError, StraighteningError) as exc:
                rec.status = "failed"
                rec.message = f"{type(exc).__name__}: {exc}"
        done = [r for r in bundle.records if r.status == "success"]
        bundle.status = "success" if done and len(done) == len(bundle.records) else "failed"
    except NotApplicableError as exc:
        bundle.status, bundle.message = "not-applicable", str(exc)
    if out is not None:
        if bundle.records:
            artifacts.append(write_depth_table(bundle, out / "depths.csv").name)
        if cfg.renders:
            artifacts.append(render_julia_ppm(R, default_grid(R, 256), out / "julia.ppm").name)
            if bundle.records:
                artifacts.append(plot_trends(bundle, out / "trends.png").name)
        (out / "config.txt").write_text(cfg.dumps())
        artifacts.append("config.txt")
        bundle.artifacts = artifacts
        (out / "report.txt").write_text(bundle.report_text())
    else:
        bundle.artifacts = artifacts
    return bundle


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

DEPTH_COLUMNS = ("depth", "status", "p", "disk_radius", "curve_length", "covering_degree", "n_alpha",
                 "blend_norm", "beltrami_norm", "invariance", "fit_residual", "surgery_displacement",
                 "straightening_displacement", "s_after")


def write_depth_table(bundle: ReportBundle, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DEPTH_COLUMNS)
        for r in bundle.records:
            w.writerow([_fmt(getattr(r, c)) for c in DEPTH_COLUMNS])
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary portable pixmap (P6)."""
    path = Path(path)
    rgb = np.ascontiguousarray(np.clip(rgb, 0, 255).astype(np.uint8))
    h, w, _ = rgb.shape
    with path.open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb[::-1].tobytes())  # first row written is the top (largest y)
    return path


def render_julia_ppm(rmap: RationalMap, grid, path) -> Path:
    """Escape-time shading of the basin of infinity via the Green function."""
    G = green_function(rmap, grid.centers())
    shade = np.where(G > 0, 255 * (1 - np.exp(-4 * G)), 0)
    rgb = np.stack([shade, 0.6 * shade, 0.3 * shade + 40 * (G == 0)], axis=-1)
    return write_ppm(path, rgb)


def render_support_ppm(sigma, path) -> Path:
    mag = np.abs(sigma.values)
    m = mag.max() if mag.max() > 0 else 1.0
    v = 255 * mag / m
    rgb = np.stack([v, v, v], axis=-1)
    rgb[sigma.support & (mag == 0)] = (255, 0, 0)
    return write_ppm(path, rgb)


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_depth(R, curve: JordanCurve, config: SurgeryConfig, sigma, path) -> Path:
    plt = _figure()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    g = sigma.grid
    axes[0].imshow(np.abs(sigma.values) > 0, origin="lower", extent=g.bounds, cmap="Greys")
    axes[0].set_title("support of sigma")
    v = np.append(curve.vertices, curve.vertices[0])
    axes[1].plot(v.real, v.imag, "k-", lw=0.8)
    t = np.linspace(0, 2 * np.pi, 200)
    d = config.disk_center + config.disk_radius * np.exp(1j * t)
    axes[1].plot(d.real, d.imag, "b--", lw=0.8)
    axes[1].plot([config.b.real], [config.b.imag], "ro", ms=3)
    axes[1].plot([config.target.real], [config.target.imag], "g^", ms=4)
    axes[1].set_aspect("equal")
    axes[1].set_title("curve, disk D, b and target")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_trends(bundle: ReportBundle, path) -> Path:
    plt = _figure()
    depths = [r.depth for r in bundle.records]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].semilogy(depths, [r.surgery_displacement for r in bundle.records], "o-", label="surgery map")
    ax[0].semilogy(depths, [r.straightening_displacement for r in bundle.records], "s-", label="straightening")
    ax[0].set_xlabel("depth")
    ax[0].legend()
    ax[1].plot(depths, bundle.beltrami_norms, "o-", label="sigma")
    ax[1].plot(depths, [r.blend_norm for r in bundle.records], "s--", label="blend")
    ax[1].set_ylim(0, 1)
    ax[1].set_xlabel("depth")
    ax[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
