"""Moduli of ring domains.

Normalisation used throughout: the round ring A(p, q) has modulus
(1/2pi) log(q/p), so a degree-d unbranched covering divides moduli by d.

The general estimate is a discrete extremal length: the ring is covered by
a square grid whose links are unit resistors, links cut by a boundary curve
are shortened to the crossing point (resistance = the cut fraction), the
inner curve is held at potential 1 and the outer at 0.  The conductance of
that network approximates the Dirichlet energy 1/modulus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .curves import JordanCurve, point_segment_distance


class UnderResolvedError(ValueError):
    pass


class NoEmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AnnulusRegion:
    outer: JordanCurve
    inner: JordanCurve

    def __post_init__(self):
        if not np.all(_inside(self.outer, self.inner.vertices)):
            raise ValueError("inner curve is not inside the outer curve")
        if self.margin <= 0:
            raise ValueError("boundary curves touch")

    @property
    def margin(self) -> float:
        a, b = self.outer.edges
        d1 = min(point_segment_distance(self.inner.vertices[i:i + 256], a, b).min()
                 for i in range(0, len(self.inner), 256))
        a, b = self.inner.edges
        d2 = min(point_segment_distance(self.outer.vertices[i:i + 256], a, b).min()
                 for i in range(0, len(self.outer), 256))
        return float(min(d1, d2))

    @classmethod
    def round(cls, p: float, q: float, center: complex = 0j, n: int = 512) -> "AnnulusRegion":
        return cls(JordanCurve.circle(center, q, n), JordanCurve.circle(center, p, n))

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return _inside(self.outer, z) & ~_inside(self.inner, z)

    def mapped(self, fn, check: bool = False) -> "AnnulusRegion":
        return AnnulusRegion(self.outer.map(fn, check), self.inner.map(fn, check))


@dataclass(frozen=True)
class ModulusEstimate:
    value: float
    resolution: int
    error_bound: float

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("modulus must be positive")


def _path(curve: JordanCurve) -> MplPath:
    v = curve.vertices
    return MplPath(np.c_[v.real, v.imag])


def _inside(curve: JordanCurve, z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    flat = z.ravel()
    return _path(curve).contains_points(np.c_[flat.real, flat.imag]).reshape(z.shape)


def round_modulus(p: float, q: float) -> float:
    if not 0 < p < q:
        raise ValueError("need 0 < p < q")
    return math.log(q / p) / (2 * math.pi)


def _crossing(a, b, inside_fn, a_inside: bool, steps: int = 40) -> np.ndarray:
    """Fraction t in (0, 1] along a -> b where inside_fn changes from a_inside."""
    lo = np.zeros(a.shape)
    hi = np.ones(a.shape)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        same = inside_fn(a + mid * (b - a)) == a_inside
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return np.maximum(0.5 * (lo + hi), 1e-9)


def _conductance(region: AnnulusRegion, n: int) -> float:
    v = region.outer.vertices
    x0, x1 = v.real.min(), v.real.max()
    y0, y1 = v.imag.min(), v.imag.max()
    span = max(x1 - x0, y1 - y0)
    h = span / (n - 1)
    if region.margin <= 2 * h:
        raise UnderResolvedError(f"boundary curves closer than 2 cells (h = {h:.3e})")
    xs = x0 - h + h * np.arange(n + 2)
    ys = y0 - h + h * np.arange(n + 2)
    Z = xs[None, :] + 1j * ys[:, None]
    in_outer = _inside(region.outer, Z)
    in_inner = _inside(region.inner, Z)
    free = in_outer & ~in_inner
    index = -np.ones(Z.shape, dtype=np.int64)
    index[free] = np.arange(int(free.sum()))
    m = int(free.sum())
    rows, cols, vals = [], [], []
    rhs = np.zeros(m)
    diag = np.zeros(m)
    flux_terms = []  # (node index, conductance) for links to the inner curve
    # the lattice has a frame of nodes outside the outer curve, so rolls never wrap free nodes
    for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
        nb_free = np.roll(free, -shift, axis=axis)
        nb_inner = np.roll(in_inner, -shift, axis=axis)
        nb_outer = np.roll(in_outer, -shift, axis=axis)
        nb_index = np.roll(index, -shift, axis=axis)
        Zb = np.roll(Z, -shift, axis=axis)
        both = free & nb_free
        rows.append(index[both])
        cols.append(nb_index[both])
        vals.append(-np.ones(int(both.sum())))
        diag += np.bincount(index[both], minlength=m)
        for mask, curve, value in ((free & nb_inner, region.inner, 1.0),
                                   (free & ~nb_outer, region.outer, 0.0)):
            if not mask.any():
                continue
            a_pts, b_pts = Z[mask], Zb[mask]
            t = _crossing(a_pts, b_pts, lambda q, c=curve: _inside(c, q), value == 0.0)
            g = 1.0 / t
            idx = index[mask]
            diag += np.bincount(idx, weights=g, minlength=m)
            rhs += np.bincount(idx, weights=g * value, minlength=m)
            if value == 1.0:
                flux_terms.append((idx, g))
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)).tocsr()
    u = spsolve(A, rhs)
    if not np.all(np.isfinite(u)):
        raise RuntimeError("Laplace solve failed")
    # current leaving the inner curve = conductance (inner at 1, outer at 0)
    return float(sum((g * (1.0 - u[idx])).sum() for idx, g in flux_terms))


def grid_modulus(region: AnnulusRegion, resolution: int = 512) -> ModulusEstimate:
    """Discrete extremal length of the ring at ``resolution`` nodes across.

    The error bound is the Richardson-style difference |m(n) - m(n/2)|,
    which over-estimates the error of the finer value when the scheme
    converges (it is second order for smooth boundaries).
    """
    if resolution < 64:
        raise ValueError("resolution must be >= 64")
    fine = 1.0 / _conductance(region, resolution)
    coarse = 1.0 / _conductance(region, resolution // 2)
    return ModulusEstimate(fine, resolution, abs(fine - coarse))


def largest_embedded_round_annulus(region: AnnulusRegion, rays: int = 512, tol: float = 1e-3,
                                   outer_tol: float = 0.02, radial_samples: int = 256) -> float:
    """Smallest p (to tol) such that {p < |z| < 1} lies in a region whose outer curve is ~ the unit circle.

    The smallest admissible p gives the widest embedded ring.
    """
    ov = region.outer.vertices
    mids = 0.5 * (ov + np.roll(ov, -1))
    radii = np.abs(np.concatenate([ov, mids]))
    if np.max(np.abs(radii - 1)) > outer_tol:
        raise ValueError("outer boundary is not within tolerance of the unit circle")
    r_out = float(radii.min()) * (1 - 1e-9)
    th = 2 * np.pi * np.arange(rays) / rays
    e = np.exp(1j * th)
    s = (np.arange(radial_samples) + 0.5) / radial_samples

    def ok(p: float) -> bool:
        r = p + (r_out - p) * s
        pts = r[:, None] * e[None, :]
        return bool(np.all(region.contains(pts)))

    if not ok(1 - tol):
        raise NoEmbeddingError("no round ring {p < |z| < 1} fits in the region")
    lo, hi = 0.0, 1 - tol
    if ok(lo + 1e-12):
        return 0.0
    while hi - lo > tol / 2:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def offset_annulus(curve: JordanCurve, inner_offset: float, outer_offset: float) -> AnnulusRegion:
    """Ring between the curve pushed inward and outward along vertex normals."""
    v = curve.vertices
    tangent = np.roll(v, -1) - np.roll(v, 1)
    normal = -1j * tangent / np.abs(tangent)  # outward for positive orientation
    return AnnulusRegion(JordanCurve(v + outer_offset * normal), JordanCurve(v - inner_offset * normal))


def greedy_annulus(curve: JordanCurve, obstacles, max_offset: float | None = None,
                   steps: int = 24, fill: float = 0.9) -> AnnulusRegion:
    """Approximate B(curve): grow normal offsets on each side until an obstacle or a self-crossing.

    Each side grows independently by bisection on the offset; the accepted
    offsets are scaled by ``fill`` so the ring keeps a margin from whatever
    stopped it.
    """
    obs = np.atleast_1d(np.asarray(obstacles, dtype=complex))
    max_offset = 0.5 * curve.diameter if max_offset is None else max_offset
    v = curve.vertices
    tangent = np.roll(v, -1) - np.roll(v, 1)
    normal = -1j * tangent / np.abs(tangent)
    inside_obs = _inside(curve, obs) if obs.size else np.zeros(0, dtype=bool)

    def side_ok(offset: float, sign: int) -> bool:
        try:
            moved = JordanCurve(v + sign * offset * normal)
        except ValueError:
            return False
        if moved.area <= 0:
            return False
        if obs.size:
            now_inside = _inside(moved, obs)
            if np.any(now_inside != inside_obs):
                return False
        return True

    offsets = []
    for sign in (+1, -1):
        lo, hi = 0.0, max_offset
        if side_ok(hi, sign):
            lo = hi
        else:
            for _ in range(steps):
                mid = 0.5 * (lo + hi)
                if side_ok(mid, sign):
                    lo = mid
                else:
                    hi = mid
        offsets.append(fill * lo)
    if min(offsets) <= 0:
        raise NoEmbeddingError("curve touches an obstacle; no ring around it")
    return AnnulusRegion(JordanCurve(v + offsets[0] * normal), JordanCurve(v - offsets[1] * normal))
