"""Rational and polynomial maps of the Riemann sphere.

Maps are stored as a numerator/denominator pair of polynomials with
ascending coefficient arrays.  Everything here is a pure function of its
inputs; the dataclasses are frozen and safe to share between threads.

Escape semantics: an orbit "converges to infinity" when some iterate exceeds
``escape_radius`` within ``horizon`` steps.  For polynomials this is a
certificate once the radius exceeds the usual escape bound.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ESCAPE_RADIUS = 1e4
DEFAULT_HORIZON = 1000
CLUSTER_TOL = 1e-7

# Sentinel for the point at infinity returned by ``evaluate``.
INFINITY = complex(np.inf, 0.0)

_SPLITTER = 134217729.0  # 2**27 + 1, Dekker split


class RootFindingError(RuntimeError):
    """Simultaneous iteration failed to converge."""

    def __init__(self, message, iterations=None, max_correction=None):
        super().__init__(message)
        self.iterations = iterations
        self.max_correction = max_correction


class IndeterminateError(ValueError):
    """0/0 encountered: the representation is not reduced."""


# ---------------------------------------------------------------------------
# compensated Horner evaluation
# ---------------------------------------------------------------------------

def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, al * bl - (((p - ah * bh) - al * bh) - ah * bl)


def comp_horner(coeffs, z):
    """Evaluate sum(coeffs[k] z**k) with compensated Horner steps.

    Complex multiply-add is split into real error-free transformations; the
    accumulated rounding errors are run through a second Horner pass and
    added back, which roughly doubles the working precision.
    """
    coeffs = np.asarray(coeffs, dtype=complex)
    z = np.asarray(z, dtype=complex)
    zr, zi = z.real, z.imag
    sr = np.full(z.shape, coeffs[-1].real)
    si = np.full(z.shape, coeffs[-1].imag)
    cr = np.zeros(z.shape)
    ci = np.zeros(z.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        for a in coeffs[-2::-1]:
            p1, e1 = _two_prod(sr, zr)
            p2, e2 = _two_prod(si, zi)
            t, e3 = _two_sum(p1, -p2)
            ur, e4 = _two_sum(t, a.real)
            p3, e5 = _two_prod(sr, zi)
            p4, e6 = _two_prod(si, zr)
            t2, e7 = _two_sum(p3, p4)
            ui, e8 = _two_sum(t2, a.imag)
            er = e1 - e2 + e3 + e4
            ei = e5 + e6 + e7 + e8
            cr, ci = cr * zr - ci * zi + er, cr * zi + ci * zr + ei
            sr, si = ur, ui
        out = (sr + cr) + 1j * (si + ci)
    return out if out.ndim else complex(out)


def naive_eval(coeffs, z):
    """Monomial-sum evaluation, used only as an independent check."""
    z = np.asarray(z, dtype=complex)
    return sum(c * z**k for k, c in enumerate(coeffs))


# ---------------------------------------------------------------------------
# polynomials and roots
# ---------------------------------------------------------------------------

def _trim(coeffs):
    c = np.atleast_1d(np.asarray(coeffs, dtype=complex)).copy()
    nz = np.nonzero(np.abs(c) > 0)[0]
    if nz.size == 0:
        return np.zeros(1, dtype=complex)
    return c[: nz[-1] + 1]


@dataclass(frozen=True, eq=False)
class Polynomial:
    """Polynomial with ascending complex coefficients."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = _trim(self.coeffs)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def is_zero(self) -> bool:
        return self.degree == 0 and self.coeffs[0] == 0

    def __call__(self, z):
        return comp_horner(self.coeffs, z)

    def derivative(self) -> "Polynomial":
        if self.degree == 0:
            return Polynomial([0.0])
        k = np.arange(1, len(self.coeffs))
        return Polynomial(self.coeffs[1:] * k)

    def __add__(self, other):
        other = other if isinstance(other, Polynomial) else Polynomial([other])
        n = max(len(self.coeffs), len(other.coeffs))
        out = np.zeros(n, dtype=complex)
        out[: len(self.coeffs)] += self.coeffs
        out[: len(other.coeffs)] += other.coeffs
        return Polynomial(out)

    def __sub__(self, other):
        other = other if isinstance(other, Polynomial) else Polynomial([other])
        return self + Polynomial(-other.coeffs)

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            return Polynomial(np.convolve(self.coeffs, other.coeffs))
        return Polynomial(self.coeffs * complex(other))

    __rmul__ = __mul__

    def roots(self, seed: int = 0) -> list[tuple[complex, int]]:
        return cluster_roots(aberth_roots(self.coeffs, seed=seed))

    def __repr__(self):
        return f"Polynomial({[complex(c) for c in self.coeffs]})"


def cauchy_bound(coeffs) -> float:
    c = _trim(coeffs)
    return 1.0 + float(np.max(np.abs(c[:-1] / c[-1]))) if len(c) > 1 else 0.0


def aberth_roots(coeffs, seed: int = 0, max_iter: int = 500, tol: float = 1e-14):
    """All roots of a polynomial by Aberth-Ehrlich simultaneous iteration.

    Starting points are spread on a circle of radius 1.5x the Cauchy bound
    with random phase jitter.  No deflation is used.  Raises
    ``RootFindingError`` if the iteration fails to settle.
    """
    c = _trim(coeffs)
    n = len(c) - 1
    if n < 1:
        return np.zeros(0, dtype=complex)
    c = c / c[-1]
    dc = c[1:] * np.arange(1, n + 1)
    absc = np.abs(c)
    rng = np.random.default_rng(seed)
    radius = 1.5 * cauchy_bound(c)
    angles = 2 * np.pi * (np.arange(n) + 0.5 * rng.random(n)) / n + rng.random() * 2 * np.pi
    z = radius * np.exp(1j * angles)
    active = np.ones(n, dtype=bool)
    eps = np.finfo(float).eps
    last = np.inf
    for it in range(max_iter):
        pz = comp_horner(c, z)
        dpz = comp_horner(dc, z)
        floor = 8 * eps * comp_horner(absc, np.abs(z)).real
        active &= np.abs(pz) > floor
        if not active.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = pz / dpz
            diff = z[:, None] - z[None, :]
            np.fill_diagonal(diff, 1.0)
            inv = 1.0 / diff
            np.fill_diagonal(inv, 0.0)
            corr = ratio / (1.0 - ratio * inv.sum(axis=1))
        bad = ~np.isfinite(corr)
        if bad.any():
            # stationary point of p or coincident iterates: kick them
            corr[bad] = 1e-3 * (1 + np.abs(z[bad])) * np.exp(1j * 2 * np.pi * rng.random(bad.sum()))
        corr[~active] = 0.0
        z = z - corr
        last = float(np.max(np.abs(corr)))
        if last <= tol * max(1.0, float(np.max(np.abs(z)))):
            break
    else:
        pz = comp_horner(c, z)
        floor = 64 * eps * comp_horner(absc, np.abs(z)).real
        if np.any(np.abs(pz) > np.maximum(floor, 1e-10)):
            raise RootFindingError(
                f"Aberth iteration did not converge in {max_iter} steps",
                iterations=max_iter, max_correction=last)
    return z


def cluster_roots(roots, tol: float = CLUSTER_TOL) -> list[tuple[complex, int]]:
    """Group nearly coincident roots (single linkage) into (centroid, multiplicity)."""
    roots = list(np.asarray(roots, dtype=complex))
    groups: list[list[complex]] = []
    for r in roots:
        hits = [g for g in groups if min(abs(r - q) for q in g) <= tol * max(1.0, abs(r))]
        if not hits:
            groups.append([r])
            continue
        merged = [r]
        for g in hits:
            merged.extend(g)
            groups.remove(g)
        groups.append(merged)
    out = [(complex(np.mean(g)), len(g)) for g in groups]
    out.sort(key=lambda t: (round(t[0].real, 9), round(t[0].imag, 9)))
    return out


# ---------------------------------------------------------------------------
# rational maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RationalMap:
    numerator: Polynomial
    denominator: Polynomial = field(default_factory=lambda: Polynomial([1.0]))

    def __post_init__(self):
        num = self.numerator if isinstance(self.numerator, Polynomial) else Polynomial(self.numerator)
        den = self.denominator if isinstance(self.denominator, Polynomial) else Polynomial(self.denominator)
        if den.is_zero:
            raise ValueError("zero denominator")
        object.__setattr__(self, "numerator", num)
        object.__setattr__(self, "denominator", den)
        if self.degree < 2:
            raise ValueError(f"degree must be >= 2, got {self.degree}")
        if den.degree > 0 and not self.is_reduced():
            raise ValueError("numerator and denominator share a root")

    @classmethod
    def polynomial(cls, coeffs) -> "RationalMap":
        return cls(Polynomial(coeffs))

    @property
    def degree(self) -> int:
        return max(self.numerator.degree, self.denominator.degree)

    @property
    def is_polynomial(self) -> bool:
        return self.denominator.degree == 0

    def is_reduced(self, tol: float = 1e-8) -> bool:
        for r, _ in self.denominator.roots():
            scale = comp_horner(np.abs(self.numerator.coeffs), abs(r)).real
            if abs(self.numerator(r)) <= tol * max(scale, 1.0):
                return False
        return True

    def __call__(self, z):
        """Vectorised evaluation; poles give inf, 0/0 gives nan."""
        num = self.numerator(z)
        if self.is_polynomial:
            return num / self.denominator.coeffs[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return num / self.denominator(z)

    def derivative(self, z):
        n, d = self.numerator, self.denominator
        if self.is_polynomial:
            return n.derivative()(z) / d.coeffs[0]
        dz = d(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (n.derivative()(z) * dz - n(z) * d.derivative()(z)) / dz**2

    def second_derivative(self, z, h: float = 1e-5):
        if self.is_polynomial:
            return self.numerator.derivative().derivative()(z) / self.denominator.coeffs[0]
        return (self.derivative(z + h) - self.derivative(z - h)) / (2 * h)

    @property
    def coefficient_list(self) -> list[complex]:
        return [complex(c) for c in self.numerator.coeffs]

    def __repr__(self):
        if self.is_polynomial:
            return f"RationalMap.polynomial({self.coefficient_list})"
        return f"RationalMap({self.numerator!r}, {self.denominator!r})"


def evaluate(rmap: RationalMap, z: complex) -> complex:
    """Scalar evaluation with explicit pole and 0/0 handling."""
    z = complex(z)
    num = complex(rmap.numerator(z))
    den = complex(rmap.denominator(z))
    if den == 0:
        if num == 0:
            raise IndeterminateError(f"0/0 at z={z}: representation is not reduced")
        return INFINITY
    return num / den


@dataclass(frozen=True)
class CriticalSet:
    points: tuple  # ((location, multiplicity), ...)
    degree: int

    @property
    def locations(self) -> np.ndarray:
        return np.array([p for p, _ in self.points], dtype=complex)

    @property
    def finite_multiplicity(self) -> int:
        return sum(m for _, m in self.points)

    @property
    def infinity_multiplicity(self) -> int:
        # convention: the deficit from 2d - 2 sits at infinity
        return 2 * self.degree - 2 - self.finite_multiplicity

    def __len__(self):
        return len(self.points)


def critical_points(rmap: RationalMap, seed: int = 0) -> CriticalSet:
    n, d = rmap.numerator, rmap.denominator
    w = n.derivative() * d - n * d.derivative()
    roots = aberth_roots(w.coeffs, seed=seed)
    dw = w.derivative()
    for r in roots:
        if abs(w(r)) > 1e-10 * max(1.0, comp_horner(np.abs(w.coeffs), abs(r)).real) and abs(dw(r)) > 1e-6:
            raise RootFindingError(f"critical point residual too large at {r}")
    return CriticalSet(tuple(cluster_roots(roots)), rmap.degree)


@dataclass(frozen=True)
class OrbitRecord:
    samples: np.ndarray
    escaped: bool
    escape_index: int | None = None

    def __len__(self):
        return len(self.samples)


def iterate_orbit(rmap: RationalMap, z0: complex, horizon: int = DEFAULT_HORIZON,
                  escape_radius: float = DEFAULT_ESCAPE_RADIUS) -> OrbitRecord:
    if horizon < 1 or escape_radius <= 0:
        raise ValueError("horizon must be >= 1 and escape_radius > 0")
    z = complex(z0)
    out = [z]
    if not np.isfinite(z) or abs(z) > escape_radius:
        return OrbitRecord(np.array(out), True, 0)
    for n in range(1, horizon + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            z = complex(rmap(z))
        out.append(z)
        if not np.isfinite(z) or abs(z) > escape_radius:
            return OrbitRecord(np.array(out), True, n)
    return OrbitRecord(np.array(out), False, None)


@dataclass(frozen=True)
class EscapeCensus:
    critical: tuple  # ((location, multiplicity, escaped, escape_index), ...)
    count: int
    horizon: int
    escape_radius: float

    @property
    def bounded(self) -> list[complex]:
        return [c for c, _, esc, _ in self.critical if not esc]


def _landing_index(samples: np.ndarray, tol: float, max_period: int) -> int | None:
    """First n with samples[n] equal (to tol) to one of the max_period preceding samples."""
    for n in range(1, len(samples)):
        prev = samples[max(0, n - max_period):n]
        if np.any(np.abs(prev - samples[n]) <= tol * (1 + abs(samples[n]))):
            return n
    return None


def landed_orbit(rmap: RationalMap, z0: complex, horizon: int = DEFAULT_HORIZON,
                 escape_radius: float = DEFAULT_ESCAPE_RADIUS, landing_tol: float = 1e-10,
                 max_period: int = 8) -> OrbitRecord:
    """Orbit truncated where it lands on a short cycle; a landed orbit counts as bounded."""
    rec = iterate_orbit(rmap, z0, horizon, escape_radius)
    stop = rec.escape_index if rec.escaped else len(rec.samples)
    land = _landing_index(rec.samples[:stop], landing_tol, max_period)
    if land is None:
        return rec
    return OrbitRecord(rec.samples[:land + 1], False, None)


def escape_census(rmap: RationalMap, horizon: int = DEFAULT_HORIZON,
                  escape_radius: float = DEFAULT_ESCAPE_RADIUS,
                  crit: CriticalSet | None = None, landing_tol: float = 1e-10,
                  max_period: int = 8) -> EscapeCensus:
    """Count finite critical points whose orbit exceeds ``escape_radius``.

    Infinity is excluded.  Multiple critical points count once each.  An
    orbit that lands on a cycle of period <= max_period (two samples agree to
    ``landing_tol``) is classed as bounded at that point: rounding error
    would otherwise push an orbit off a repelling cycle and let it escape.
    """
    crit = crit if crit is not None else critical_points(rmap)
    rows = []
    for c, m in crit.points:
        rec = iterate_orbit(rmap, c, horizon, escape_radius)
        escaped, idx = rec.escaped, rec.escape_index
        if landing_tol > 0:
            land = _landing_index(rec.samples[:idx] if escaped else rec.samples, landing_tol, max_period)
            if land is not None:
                escaped, idx = False, None
        rows.append((c, m, escaped, idx))
    return EscapeCensus(tuple(rows), sum(1 for r in rows if r[2]), horizon, escape_radius)


def preimages(rmap: RationalMap, w: complex, seed: int = 0) -> list[tuple[complex, int]]:
    """Roots of numerator - w * denominator with multiplicity."""
    poly = rmap.numerator - rmap.denominator * complex(w)
    return cluster_roots(aberth_roots(poly.coeffs, seed=seed))


def preimage_array(rmap: RationalMap, w: complex, seed: int = 0) -> np.ndarray:
    poly = rmap.numerator - rmap.denominator * complex(w)
    return aberth_roots(poly.coeffs, seed=seed)


def fixed_points(rmap: RationalMap) -> list[tuple[complex, complex]]:
    """Finite fixed points and their multipliers."""
    poly = rmap.numerator - rmap.denominator * Polynomial([0.0, 1.0])
    return [(z, complex(rmap.derivative(z))) for z, _ in cluster_roots(aberth_roots(poly.coeffs))]


def _dedupe(points: Iterable[complex], tol: float = 1e-9) -> np.ndarray:
    out: list[complex] = []
    for p in points:
        if all(abs(p - q) > tol * max(1.0, abs(p)) for q in out):
            out.append(p)
    return np.array(out, dtype=complex)


def postcritical_sample(rmap: RationalMap, depth: int, horizon: int = DEFAULT_HORIZON,
                        escape_radius: float = DEFAULT_ESCAPE_RADIUS):
    """Return (Pc points, P points).

    Pc collects R^1..R^depth of every finite critical point; P keeps the
    images from critical orbits that stay bounded for ``horizon`` steps.
    """
    if depth > horizon:
        raise ValueError("depth must not exceed horizon")
    pc, p = [], []
    for c, _ in critical_points(rmap).points:
        rec = landed_orbit(rmap, c, horizon, escape_radius)
        images = [z for z in rec.samples[1:depth + 1] if np.isfinite(z)]
        pc.extend(images)
        if not rec.escaped:
            p.extend(images)
    return _dedupe(pc), _dedupe(p)


def green_function(rmap: RationalMap, z, horizon: int = 200, bailout: float = 1e30):
    """Green's function of the basin of infinity for a polynomial map.

    G(z) = lim d^-n log|R^n(z)| truncated once |R^n z| exceeds ``bailout``;
    points that never reach it get 0.  The monic normalisation constant
    log|a_d| / (d - 1) is added so that G(z) - log|z| -> const matches the
    standard definition for non-monic maps as well.
    """
    if not rmap.is_polynomial:
        raise ValueError("Green's function is only implemented for polynomials")
    d = rmap.degree
    lead = abs(rmap.numerator.coeffs[-1] / rmap.denominator.coeffs[0])
    shift = np.log(lead) / (d - 1)
    z = np.array(z, dtype=complex, copy=True)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    g = np.zeros(z.shape)
    idx = np.arange(z.size)
    flat = z.ravel().copy()
    done = np.abs(flat) > bailout
    g.ravel()[done] = np.log(np.abs(flat[done])) + shift
    alive = idx[~done]
    w = flat[alive]
    scale = 1.0
    for _ in range(horizon):
        if alive.size == 0:
            break
        w = rmap(w)
        scale /= d
        out = ~(np.abs(w) <= bailout)
        if out.any():
            g.ravel()[alive[out]] = scale * (np.log(np.abs(w[out])) + shift)
            alive, w = alive[~out], w[~out]
    return float(g[0]) if scalar else g


def write_orbit_csv(record: OrbitRecord, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "re", "im", "abs"])
        for n, z in enumerate(record.samples):
            writer.writerow([n, repr(float(z.real)), repr(float(z.imag)), repr(float(abs(z)))])
    return path


def parse_coefficients(text: str) -> list[complex]:
    """Parse a comma separated ascending coefficient list, e.g. ``"4,0,1"``."""
    return [complex(tok.strip().replace(" ", "").replace("i", "j")) for tok in text.split(",") if tok.strip()]


def as_map(obj: RationalMap | Sequence[complex]) -> RationalMap:
    return obj if isinstance(obj, RationalMap) else RationalMap.polynomial(obj)
