"""Jordan curves, linkage, curve lifting and the bounded-length pullback search.

Curves are closed polylines stored without the repeated closing vertex and
always positively oriented.  Lengths come in two flavours: the
quasihyperbolic length with respect to a finite puncture set (a computable
stand-in for the hyperbolic metric of the complement of the grand orbit of
the postcritical set) and the exact hyperbolic length inside a round
annulus, which is what the covering relation l(lift) = d * l(base) is
checked against.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .rational import (RationalMap, critical_points, green_function, iterate_orbit,
                       postcritical_sample, preimage_array)


class AmbiguousPointError(ValueError):
    """Point lies on the curve (within tolerance)."""


class SingularMetricError(ValueError):
    """Curve passes through a puncture of the metric."""


class BranchAmbiguityError(RuntimeError):
    """Continuation came too close to a critical value."""


class ContinuationError(RuntimeError):
    """Lift did not close or the corrector lost its branch."""


class NoSafeCopyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# polylines
# ---------------------------------------------------------------------------

def _segments_intersect(p1, p2, q1, q2):
    """Vectorised proper/improper segment intersection test."""
    def cross(a, b):
        return a.real * b.imag - a.imag * b.real
    d1 = cross(q2 - q1, p1 - q1)
    d2 = cross(q2 - q1, p2 - q1)
    d3 = cross(p2 - p1, q1 - p1)
    d4 = cross(p2 - p1, q2 - p1)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0)


def _is_simple(v: np.ndarray, chunk: int = 512) -> bool:
    n = len(v)
    a, b = v, np.roll(v, -1)
    xlo, xhi = np.minimum(a.real, b.real), np.maximum(a.real, b.real)
    ylo, yhi = np.minimum(a.imag, b.imag), np.maximum(a.imag, b.imag)
    idx = np.arange(n)
    for s in range(0, n, chunk):
        i = idx[s:s + chunk, None]
        j = idx[None, :]
        cand = (j > i + 1) & ~((i == 0) & (j == n - 1))
        cand &= (xlo[None, :] <= xhi[i]) & (xhi[None, :] >= xlo[i])
        cand &= (ylo[None, :] <= yhi[i]) & (yhi[None, :] >= ylo[i])
        ii, jj = np.nonzero(cand)
        if ii.size == 0:
            continue
        ii = ii + s
        if np.any(_segments_intersect(a[ii], b[ii], a[jj], b[jj])):
            return False
    return True


def point_segment_distance(z: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points z[:, None] to segments (a, b)[None, :]."""
    ab = b - a
    denom = np.where(np.abs(ab) > 0, np.abs(ab) ** 2, 1.0)
    t = np.clip(((z[:, None] - a[None, :]) * np.conj(ab)[None, :]).real / denom[None, :], 0.0, 1.0)
    return np.abs(z[:, None] - (a[None, :] + t * ab[None, :]))


@dataclass(frozen=True, eq=False)
class JordanCurve:
    vertices: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=complex).ravel()
        if len(v) > 1 and v[0] == v[-1]:
            v = v[:-1]
        if len(v) < 16:
            raise ValueError(f"a Jordan curve needs at least 16 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex")
        if _signed_area(v) < 0:
            v = v[::-1].copy()
        if self.check and not _is_simple(v):
            raise ValueError("polyline is not simple")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def circle(cls, center: complex = 0j, radius: float = 1.0, n: int = 256) -> "JordanCurve":
        t = 2 * np.pi * np.arange(n) / n
        return cls(center + radius * np.exp(1j * t), check=False)

    def __len__(self):
        return len(self.vertices)

    @property
    def edges(self):
        return self.vertices, np.roll(self.vertices, -1)

    @property
    def length(self) -> float:
        a, b = self.edges
        return float(np.abs(b - a).sum())

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(max(np.ptp(v.real), np.ptp(v.imag)))

    @property
    def centroid(self) -> complex:
        return complex(self.vertices.mean())

    def distance(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        a, b = self.edges
        out = np.empty(z.size)
        for s in range(0, z.size, 256):
            out[s:s + 256] = point_segment_distance(z[s:s + 256], a, b).min(axis=1)
        return out

    def winding(self, z) -> np.ndarray:
        """Winding number about each point (rounded to an integer)."""
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        v = self.vertices
        out = np.empty(z.size)
        for s in range(0, z.size, 256):
            d = v[None, :] - z[s:s + 256, None]
            ang = np.angle(np.roll(d, -1, axis=1) / d).sum(axis=1)
            out[s:s + 256] = ang / (2 * np.pi)
        return np.rint(out).astype(int)

    def densified(self, max_spacing: float) -> np.ndarray:
        a, b = self.edges
        pieces = []
        for p, q in zip(a, b):
            m = max(1, int(math.ceil(abs(q - p) / max_spacing)))
            pieces.append(p + (q - p) * np.arange(m) / m)
        return np.concatenate(pieces)

    def map(self, fn, check: bool = False) -> "JordanCurve":
        return JordanCurve(fn(self.vertices), check=check)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["re", "im"])
            for z in self.vertices:
                w.writerow([repr(float(z.real)), repr(float(z.imag))])
        return path

    @classmethod
    def from_csv(cls, path) -> "JordanCurve":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["re"]) + 1j * float(r["im"]) for r in rows]))


def _signed_area(v: np.ndarray) -> float:
    w = np.roll(v, -1)
    return 0.5 * float((v.real * w.imag - w.real * v.imag).sum())


def _tolerance(curve: JordanCurve) -> float:
    # relative to the curve's size, with a floor at the rounding level of its coordinates
    return 1e-10 * curve.diameter + 1e-14 * float(np.abs(curve.vertices).max())


def contains(curve: JordanCurve, z, tol: float | None = None):
    """True where the winding number of the curve about z is 1."""
    tol = _tolerance(curve) if tol is None else tol
    arr = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
    if arr.size and curve.distance(arr).min() <= tol:
        raise AmbiguousPointError("point within tolerance of the curve")
    inside = curve.winding(arr) == 1
    return bool(inside[0]) if np.ndim(z) == 0 else inside.reshape(np.shape(z))


def is_linked(curve: JordanCurve, p_points) -> bool:
    pts = np.atleast_1d(np.asarray(p_points, dtype=complex)).ravel()
    if pts.size == 0:
        return False
    return bool(np.any(contains(curve, pts)))


# ---------------------------------------------------------------------------
# lengths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PunctureSet:
    points: np.ndarray
    depth: int = 0

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=complex)).ravel()
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_map(cls, rmap: RationalMap, depth: int = 1, orbit_depth: int = 8,
                 escape_radius: float = 1e4) -> "PunctureSet":
        """Postcritical points plus their preimages down to ``depth`` levels."""
        pc, _ = postcritical_sample(rmap, orbit_depth, escape_radius=escape_radius)
        pts = [z for z in pc if abs(z) < escape_radius]
        level = list(pts)
        for _ in range(depth):
            nxt = []
            for w in level:
                nxt.extend(preimage_array(rmap, w))
            pts.extend(nxt)
            level = nxt
        return cls(_unique(np.array(pts)), depth)


def _unique(pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if pts.size == 0:
        return pts
    tree = cKDTree(np.c_[pts.real, pts.imag])
    keep = np.ones(len(pts), dtype=bool)
    for i, j in sorted(tree.query_pairs(tol)):
        if keep[i]:
            keep[j] = False
    return pts[keep]


def quasihyperbolic_length(curve: JordanCurve, punctures: PunctureSet, tol: float = 1e-12) -> float:
    """Trapezoid rule for the integral of |dz| / dist(z, punctures) over the polyline."""
    pts = punctures.points
    if pts.size == 0:
        raise ValueError("empty puncture set")
    a, b = curve.edges
    seg_d = np.min([point_segment_distance(pts[i:i + 256], a, b).min() for i in range(0, pts.size, 256)])
    if seg_d <= tol * max(1.0, curve.diameter):
        raise SingularMetricError("curve touches a puncture")
    tree = cKDTree(np.c_[pts.real, pts.imag])
    dist, _ = tree.query(np.c_[curve.vertices.real, curve.vertices.imag])
    rho = 1.0 / dist
    return float((np.abs(b - a) * 0.5 * (rho + np.roll(rho, -1))).sum())


def annulus_density(z, r1: float, r2: float, center: complex = 0j) -> np.ndarray:
    """Hyperbolic density (curvature -1) of the round annulus r1 < |z - center| < r2."""
    r = np.abs(np.asarray(z) - center)
    L = math.log(r2 / r1)
    if np.any(r <= r1) or np.any(r >= r2):
        raise SingularMetricError("point outside the annulus")
    return np.pi / (r * L * np.sin(np.pi * np.log(r / r1) / L))


def annulus_hyperbolic_length(curve: JordanCurve, r1: float, r2: float, center: complex = 0j) -> float:
    a, b = curve.edges
    rho = annulus_density(curve.vertices, r1, r2, center)
    return float((np.abs(b - a) * 0.5 * (rho + np.roll(rho, -1))).sum())


# ---------------------------------------------------------------------------
# lifting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LiftResult:
    curve: JordanCurve
    covering_degree: int
    base_laps: int
    level: int = 1

    def __post_init__(self):
        if self.covering_degree < 1:
            raise ValueError("covering degree must be >= 1")


def critical_values(rmap: RationalMap) -> np.ndarray:
    return np.array([complex(rmap(c)) for c, _ in critical_points(rmap).points], dtype=complex)


def _rebase(base: JordanCurve, w0: complex, tol: float) -> np.ndarray:
    """Base vertices re-listed to start at the point of the polyline nearest w0."""
    a, b = base.edges
    d = point_segment_distance(np.array([w0]), a, b)[0]
    k = int(np.argmin(d))
    if d[k] > tol:
        raise ValueError(f"start does not map onto the base curve (distance {d[k]:.3e})")
    v = base.vertices
    if abs(v[k] - w0) <= tol:
        return np.roll(v, -k)
    if abs(v[(k + 1) % len(v)] - w0) <= tol:
        return np.roll(v, -(k + 1))
    return np.concatenate([[w0], np.roll(v, -(k + 1))])


class _Lifter:
    def __init__(self, rmap: RationalMap, newton_tol: float = 1e-13, max_halvings: int = 40):
        self.R = rmap
        self.tol = newton_tol
        self.max_halvings = max_halvings
        # scalar Newton steps do not need compensated evaluation; plain Horner is much cheaper
        if rmap.is_polynomial:
            c = [complex(a) for a in rmap.numerator.coeffs / rmap.denominator.coeffs[0]]
            self._c = c[::-1]
            self._dc = [k * a for k, a in enumerate(c)][1:][::-1]
        else:
            self._c = None

    def value(self, z):
        if self._c is None:
            return complex(self.R(z))
        acc = 0j
        for a in self._c:
            acc = acc * z + a
        return acc

    def slope(self, z):
        if self._c is None:
            return complex(self.R.derivative(z))
        acc = 0j
        for a in self._dc:
            acc = acc * z + a
        return acc

    def newton(self, z, w):
        for _ in range(40):
            dz = (self.value(z) - w) / self.slope(z)
            z = z - dz
            if abs(dz) <= self.tol * max(1.0, abs(z)):
                return z, True
        return z, abs(self.value(z) - w) <= 1e-9 * max(1.0, abs(w))

    def segment(self, z, wa, wb):
        """Continue the branch through z over wa -> wb."""
        frac, pos, cur = 1.0, 0.0, complex(z)
        halvings = 0
        while pos < 1.0:
            step = min(frac, 1.0 - pos)
            w_from = wa + (wb - wa) * pos
            w_to = wa + (wb - wa) * (pos + step)
            d = self.slope(cur)
            if d == 0:
                raise BranchAmbiguityError(f"continuation hit a critical point near {cur}")
            pred_step = (w_to - w_from) / d
            pred = cur + pred_step
            new, ok = self.newton(pred, w_to)
            if ok and abs(new - pred) <= 3.0 * abs(pred_step) + 1e-300:
                cur, pos = new, pos + step
                frac = min(1.0, 2 * step)
            else:
                frac = step / 2
                halvings += 1
                if halvings > self.max_halvings:
                    raise ContinuationError(f"step halving exhausted near {cur}")
        return cur


def lift_curve(rmap: RationalMap, base: JordanCurve, start: complex,
               margin: float | None = None, on_curve_tol: float | None = None) -> LiftResult:
    """Continue the preimage through ``start`` along the base until it closes."""
    start = complex(start)
    scale = max(1.0, base.diameter)
    margin = 1e-6 * base.diameter if margin is None else margin
    cv = critical_values(rmap)
    if cv.size and base.distance(cv).min() <= margin:
        raise BranchAmbiguityError("base curve passes within margin of a critical value")
    tol = 1e-8 * scale if on_curve_tol is None else on_curve_tol
    verts = _rebase(base, complex(rmap(start)), tol)
    n = len(verts)
    w0 = verts[0]
    pre = preimage_array(rmap, w0)
    sep = np.abs(pre[:, None] - pre[None, :])
    sep = sep[~np.eye(len(pre), dtype=bool)].min() if len(pre) > 1 else 1.0
    close_tol = 1e-3 * sep
    k_start = int(np.argmin(np.abs(pre - start)))
    if abs(pre[k_start] - start) > close_tol:
        raise ValueError("start is not a preimage of a base point")
    lifter = _Lifter(rmap)
    z = pre[k_start]
    out = []
    for lap in range(1, rmap.degree + 1):
        for i in range(n):
            out.append(z)
            z = lifter.segment(z, verts[i], verts[(i + 1) % n])
        gap = np.abs(pre - z)
        j = int(np.argmin(gap))
        if gap[j] > close_tol:
            raise ContinuationError("lift drifted off the preimage fibre")
        if j == k_start:
            curve = JordanCurve(np.array(out), check=False)
            return LiftResult(curve, lap, lap)
        z = pre[j]
    raise ContinuationError(f"lift did not close within {rmap.degree} laps")


def pullback_components(rmap: RationalMap, base: JordanCurve, margin: float | None = None) -> list[LiftResult]:
    """All components of the preimage of ``base``; covering degrees sum to deg R."""
    w0 = base.vertices[0]
    pre = preimage_array(rmap, w0)
    covered = np.zeros(len(pre), dtype=bool)
    sep = np.abs(pre[:, None] - pre[None, :])
    tol = 1e-3 * (sep[~np.eye(len(pre), dtype=bool)].min() if len(pre) > 1 else 1.0)
    comps = []
    for k in range(len(pre)):
        if covered[k]:
            continue
        lift = lift_curve(rmap, base, pre[k], margin=margin)
        nb = len(base)
        for j in range(lift.covering_degree):
            hit = np.abs(pre - lift.curve.vertices[j * nb]) <= tol if len(lift.curve) == nb * lift.covering_degree else None
            if hit is None:
                break
            covered |= hit
        covered[k] = True
        comps.append(lift)
    return comps


def iterated_pullback(rmap: RationalMap, base: JordanCurve, k: int,
                      keep=None, margin: float | None = None) -> list[LiftResult]:
    """Components of R^-k(base) with accumulated covering degrees.

    ``keep`` optionally filters which components are pulled back further.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    level = [LiftResult(base, 1, 0, 0)]
    for lev in range(1, k + 1):
        nxt = []
        for parent in level:
            if keep is not None and lev > 1 and not keep(parent):
                continue
            for c in pullback_components(rmap, parent.curve, margin=margin):
                nxt.append(LiftResult(c.curve, c.covering_degree * parent.covering_degree, c.base_laps, lev))
        level = nxt
    return level


# ---------------------------------------------------------------------------
# Assumption-G search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GEntry:
    level: int
    curve: JordanCurve
    length: float
    linked: bool
    degree: int


@dataclass
class AssumptionGCertificate:
    base_curve: JordanCurve
    length_bound: float
    base_length: float
    found: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def at_level(self, k: int) -> list[GEntry]:
        return [e for e in self.found if e.level == k]

    def report(self) -> str:
        lines = [f"length_bound = {self.length_bound!r}", f"base_length = {self.base_length!r}",
                 f"entries = {len(self.found)}"]
        for i, e in enumerate(self.found):
            lines.append(f"entry.{i} = level={e.level} length={e.length!r} linked={str(e.linked).lower()} "
                         f"degree={e.degree} vertices={len(e.curve)}")
        for i, (lev, msg) in enumerate(self.errors):
            lines.append(f"error.{i} = level={lev} {msg}")
        return "\n".join(lines) + "\n"


def assumption_g_search(rmap: RationalMap, base: JordanCurve, max_depth: int, length_bound: float,
                        p_points, punctures: PunctureSet | None = None) -> AssumptionGCertificate:
    """List linked pullback components of bounded quasihyperbolic length per level.

    Only linked components are pulled back further: if a component of the
    preimage is linked, so is its image, because a polynomial maps the
    interior of the component onto the interior of the image curve.
    """
    p_points = np.atleast_1d(np.asarray(p_points, dtype=complex))
    punctures = punctures if punctures is not None else PunctureSet(p_points)
    base_len = quasihyperbolic_length(base, punctures) if punctures.points.size else float("nan")
    cert = AssumptionGCertificate(base, length_bound, base_len)
    if length_bound <= 0:
        return cert
    level = [LiftResult(base, 1, 0, 0)]
    for k in range(1, max_depth + 1):
        nxt = []
        for parent in level:
            try:
                comps = pullback_components(rmap, parent.curve)
            except (BranchAmbiguityError, ContinuationError, ValueError) as exc:
                cert.errors.append((k, f"{type(exc).__name__}: {exc}"))
                continue
            for c in comps:
                try:
                    linked = is_linked(c.curve, p_points)
                except AmbiguousPointError as exc:
                    cert.errors.append((k, f"AmbiguousPointError: {exc}"))
                    continue
                if not linked:
                    continue
                deg = c.covering_degree * parent.covering_degree
                nxt.append(LiftResult(c.curve, deg, c.base_laps, k))
                try:
                    length = quasihyperbolic_length(c.curve, punctures)
                except SingularMetricError as exc:
                    cert.errors.append((k, f"SingularMetricError: {exc}"))
                    continue
                if length <= length_bound:
                    cert.found.append(GEntry(k, c.curve, length, True, deg))
        level = nxt
    return cert


# ---------------------------------------------------------------------------
# intersection census against Green bands
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntersectionCensus:
    n_alpha: int
    first_safe_index: int
    band_range: tuple  # (lowest, highest) band index met
    green_range: tuple  # (min G, max G) along the curve
    safe_level: float  # lower Green level of the safe copy


def intersection_census(curve: JordanCurve, fatou_annulus, rmap: RationalMap, horizon: int = 50,
                        samples: int = 2048) -> IntersectionCensus:
    """Count Green bands {rho d^j <= G < rho d^(j+1)}, |j| <= horizon, met by the curve.

    Band 0 is the fundamental annulus itself.  The highest band met is the
    safe copy: its forward images lie above the maximum of G on the curve,
    hence (maximum principle) outside the curve's interior.
    """
    rho = fatou_annulus.green_level
    d = rmap.degree
    pts = curve.densified(max(curve.length / samples, 1e-300))
    g = green_function(rmap, pts)
    gmin, gmax = float(g.min()), float(g.max())
    if gmax <= 0 or gmax < rho * d ** (-horizon):
        raise NoSafeCopyError("curve meets no fundamental-annulus copy within the horizon")
    hi = min(int(math.floor(math.log(gmax / rho, d))), horizon)
    lo = -horizon if gmin <= 0 else max(int(math.floor(math.log(gmin / rho, d))), -horizon)
    lo = min(lo, hi)
    return IntersectionCensus(hi - lo + 1, hi, (lo, hi), (gmin, gmax), rho * d ** hi)
