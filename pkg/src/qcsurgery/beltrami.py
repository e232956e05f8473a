"""Measurable Riemann mapping on a uniform grid and rational straightening.

The solver works with piecewise-constant cell data.  Both singular
integrals are discretised by integrating their kernels exactly over a
square cell and evaluating at cell centres, so a field supported on a
single cell is transformed exactly.  Convolutions go through a zero-padded
FFT, which makes them linear (not periodic) convolutions.

    Cauchy transform   C h(z) = (1/pi) int h(w) / (z - w) dA(w)
    Beurling transform S h(z) = -(1/pi) p.v. int h(w) / (z - w)^2 dA(w)

With h = d-bar f the normalised solution is f = z + C h, and the Beltrami
equation d-bar f = mu d f turns into the fixed point h = mu (1 + S h).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .rational import Polynomial, RationalMap

HEADER_FMT = "<8d"
KIND_BELTRAMI = 1
KIND_DISPLACEMENT = 2


class WraparoundError(ValueError):
    """Field support reaches the lattice frame."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class StraighteningError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# lattice plumbing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Uniform square-cell lattice; values live at cell centres."""
    xmin: float
    ymin: float
    h: float
    nx: int
    ny: int

    @classmethod
    def square(cls, center: complex, half_width: float, n: int) -> "GridSpec":
        h = 2.0 * half_width / n
        return cls(center.real - half_width, center.imag - half_width, h, n, n)

    @property
    def xmax(self) -> float:
        return self.xmin + self.nx * self.h

    @property
    def ymax(self) -> float:
        return self.ymin + self.ny * self.h

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)

    def centers(self) -> np.ndarray:
        x = self.xmin + (np.arange(self.nx) + 0.5) * self.h
        y = self.ymin + (np.arange(self.ny) + 0.5) * self.h
        return x[None, :] + 1j * y[:, None]  # shape (ny, nx), row = y

    def index(self, z):
        """Fractional (row, col) coordinates of z relative to cell centres."""
        z = np.asarray(z)
        col = (z.real - self.xmin) / self.h - 0.5
        row = (z.imag - self.ymin) / self.h - 0.5
        return row, col

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z)
        return (z.real > self.xmin) & (z.real < self.xmax) & (z.imag > self.ymin) & (z.imag < self.ymax)


@dataclass(frozen=True, eq=False)
class GridField:
    grid: GridSpec
    values: np.ndarray  # complex (ny, nx)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(f"values shape {v.shape} does not match grid {(self.grid.ny, self.grid.nx)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite grid values")
        object.__setattr__(self, "values", v)

    def interpolate(self, z) -> np.ndarray:
        return bilinear(self.grid, self.values, z)


def bilinear(grid: GridSpec, values: np.ndarray, z, outside=0.0) -> np.ndarray:
    """Bilinear interpolation between cell centres; ``outside`` beyond the lattice."""
    z = np.asarray(z, dtype=complex)
    row, col = grid.index(z)
    inside = (row >= 0) & (row <= grid.ny - 1) & (col >= 0) & (col <= grid.nx - 1)
    r0 = np.clip(np.floor(row).astype(int), 0, grid.ny - 2)
    c0 = np.clip(np.floor(col).astype(int), 0, grid.nx - 2)
    tr = np.clip(row - r0, 0.0, 1.0)
    tc = np.clip(col - c0, 0.0, 1.0)
    v = ((1 - tr) * (1 - tc) * values[r0, c0] + (1 - tr) * tc * values[r0, c0 + 1]
         + tr * (1 - tc) * values[r0 + 1, c0] + tr * tc * values[r0 + 1, c0 + 1])
    return np.where(inside, v, outside)


# ---------------------------------------------------------------------------
# cell-integrated kernels
# ---------------------------------------------------------------------------

def _xlogr2(a, r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, a * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)


def _xatan(a, b):
    # a * atan(b / a), continuous with value 0 on a = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a != 0, a * np.arctan(b / np.where(a != 0, a, 1.0)), 0.0)


def _cauchy_primitive(x, y):
    """H with d^2 H / dx dy = 1 / (x + i y)."""
    r2 = x * x + y * y
    re = 0.5 * _xlogr2(y, r2) + _xatan(x, y)
    im = 0.5 * _xlogr2(x, r2) + _xatan(y, x)
    return re - 1j * im


def _beurling_primitive(x, y):
    """G with d^2 G / dx dy = 1 / (x + i y)^2, branch cut on the negative axis."""
    r2 = x * x + y * y
    with np.errstate(divide="ignore"):
        lg = np.where(r2 > 0, 0.5 * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)
    return -np.arctan2(y, x) + 1j * lg


def _corner_sum(prim, dx, dy, h):
    a, b = dx - h / 2, dx + h / 2
    c, d = dy - h / 2, dy + h / 2
    return prim(b, d) - prim(a, d) - prim(b, c) + prim(a, c)


def cell_cauchy_weights(offsets: np.ndarray, h: float) -> np.ndarray:
    """(1/pi) * integral over the cell centred at w of dA / (z - w), offsets = z - w."""
    return _corner_sum(_cauchy_primitive, offsets.real, offsets.imag, h) / np.pi


def cell_beurling_weights(offsets: np.ndarray, h: float) -> np.ndarray:
    """-(1/pi) p.v. integral over the cell of dA / (z - w)^2; zero on the own cell."""
    w = -_corner_sum(_beurling_primitive, offsets.real, offsets.imag, h) / np.pi
    own = (np.abs(offsets.real) < h / 2) & (np.abs(offsets.imag) < h / 2)
    return np.where(own, 0.0, w)


class _Convolver:
    """Linear convolution of an (ny, nx) field with a translation-invariant kernel."""

    def __init__(self, grid: GridSpec, weight_fn):
        ny, nx = grid.ny, grid.nx
        self.shape = (ny, nx)
        self.pad = (2 * ny, 2 * nx)
        dy = np.fft.fftfreq(2 * ny, 1.0 / (2 * ny)) * grid.h
        dx = np.fft.fftfreq(2 * nx, 1.0 / (2 * nx)) * grid.h
        offsets = dx[None, :] + 1j * dy[:, None]
        self.kernel_hat = np.fft.fft2(weight_fn(offsets, grid.h))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        ny, nx = self.shape
        out = np.fft.ifft2(np.fft.fft2(values, s=self.pad) * self.kernel_hat)
        return out[:ny, :nx]


_CONVOLVERS: dict = {}


def _convolver(grid: GridSpec, kind: str) -> _Convolver:
    key = (kind, grid)
    conv = _CONVOLVERS.get(key)
    if conv is None:
        if len(_CONVOLVERS) > 8:
            _CONVOLVERS.clear()
        fn = cell_beurling_weights if kind == "beurling" else cell_cauchy_weights
        conv = _CONVOLVERS[key] = _Convolver(grid, fn)
    return conv


def _check_frame(field: GridField, frame: int = 2):
    v = field.values
    if (np.any(v[:frame] != 0) or np.any(v[-frame:] != 0)
            or np.any(v[:, :frame] != 0) or np.any(v[:, -frame:] != 0)):
        raise WraparoundError("field support touches the lattice frame")


def beurling_transform(field: GridField) -> GridField:
    _check_frame(field)
    return GridField(field.grid, _convolver(field.grid, "beurling")(field.values))


def cauchy_transform(field: GridField) -> GridField:
    _check_frame(field)
    return GridField(field.grid, _convolver(field.grid, "cauchy")(field.values))


def cauchy_at(grid: GridSpec, values: np.ndarray, z, mask: np.ndarray | None = None,
              chunk: int | None = None) -> np.ndarray:
    """Direct cell-integrated Cauchy transform at arbitrary points."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    mask = values != 0 if mask is None else mask
    rows, cols = np.nonzero(mask)
    w = grid.xmin + (cols + 0.5) * grid.h + 1j * (grid.ymin + (rows + 0.5) * grid.h)
    hv = values[rows, cols]
    chunk = max(1, (1 << 22) // max(1, w.size)) if chunk is None else chunk  # bounds the pair matrix
    out = np.zeros(z.shape, dtype=complex)
    flat = z.ravel()
    res = out.ravel()
    for s in range(0, flat.size, chunk):
        zz = flat[s:s + chunk]
        res[s:s + chunk] = cell_cauchy_weights(zz[:, None] - w[None, :], grid.h) @ hv
    return out


# ---------------------------------------------------------------------------
# Beltrami fields (containers shared with the surgery module)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BeltramiField:
    """Complex dilatation on a lattice.

    ``values`` are cell averages (what the solver consumes).  ``sup_norm`` is
    the largest modulus seen over every point sample used to build them,
    which can exceed the largest cell average when a support piece is
    thinner than a cell.  ``sampler`` optionally evaluates the field
    pointwise.
    """
    grid: GridSpec
    values: np.ndarray
    sup_norm: float
    sampler: Callable | None = field(default=None, repr=False)
    declared_support: np.ndarray | None = field(default=None, repr=False)
    subsamples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        object.__setattr__(self, "values", v)
        if v.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(f"values shape {v.shape} does not match the grid")
        if not self.sup_norm < 1:
            raise ValueError(f"sup norm {self.sup_norm} is not < 1")
        if self.declared_support is not None:
            supp = np.asarray(self.declared_support, dtype=bool)
            if np.any(v[~supp] != 0):
                raise ValueError("nonzero values outside the declared support")
            object.__setattr__(self, "declared_support", supp)

    @classmethod
    def from_values(cls, grid: GridSpec, values, sampler=None) -> "BeltramiField":
        v = np.asarray(values, dtype=complex)
        return cls(grid, v, float(np.abs(v).max(initial=0.0)), sampler)

    @property
    def support(self) -> np.ndarray:
        if self.declared_support is not None:
            return self.declared_support
        return self.values != 0

    def scaled(self, t: float) -> "BeltramiField":
        return BeltramiField(self.grid, self.values * t, self.sup_norm * abs(t))

    def with_values(self, values) -> "BeltramiField":
        """Same support, sampler and subsampling with replaced cell values (used for controls)."""
        v = np.asarray(values, dtype=complex)
        return BeltramiField(self.grid, v, max(self.sup_norm, float(np.abs(v).max(initial=0.0))),
                             self.sampler, self.declared_support, self.subsamples)

    def save(self, path) -> Path:
        return write_grid(path, KIND_BELTRAMI, self.grid, self.values, self.sup_norm)

    @classmethod
    def load(cls, path) -> "BeltramiField":
        kind, grid, values, extra = read_grid(path)
        if kind != KIND_BELTRAMI:
            raise ValueError(f"{path}: kind tag {kind} is not a Beltrami field")
        return cls(grid, values, extra)


def write_grid(path, kind: int, grid: GridSpec, values: np.ndarray, extra: float = 0.0) -> Path:
    """Kind byte, 8 little-endian doubles (nx, ny, xmin, xmax, ymin, ymax, h, extra), data."""
    path = Path(path)
    v = np.ascontiguousarray(values, dtype="<c16")
    with path.open("wb") as fh:
        fh.write(bytes([kind]))
        fh.write(struct.pack(HEADER_FMT, grid.nx, grid.ny, grid.xmin, grid.xmax,
                             grid.ymin, grid.ymax, grid.h, extra))
        fh.write(v.tobytes())
    return path


def read_grid(path):
    raw = Path(path).read_bytes()
    kind = raw[0]
    nx, ny, xmin, _xmax, ymin, _ymax, h, extra = struct.unpack_from(HEADER_FMT, raw, 1)
    nx, ny = int(nx), int(ny)
    off = 1 + struct.calcsize(HEADER_FMT)
    values = np.frombuffer(raw, dtype="<c16", offset=off, count=nx * ny).reshape(ny, nx).copy()
    return kind, GridSpec(xmin, ymin, h, nx, ny), values, extra


# ---------------------------------------------------------------------------
# measurable Riemann mapping
# ---------------------------------------------------------------------------

def fd_derivatives(grid: GridSpec, f: np.ndarray):
    """Central-difference (d f, d-bar f) on interior cells; edges are nan."""
    fx = np.full(f.shape, np.nan, dtype=complex)
    fy = np.full(f.shape, np.nan, dtype=complex)
    fx[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / (2 * grid.h)
    fy[1:-1, :] = (f[2:, :] - f[:-2, :]) / (2 * grid.h)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)


@dataclass(frozen=True, eq=False)
class NormalizedQcMap:
    """Quasiconformal map fixing 0, 1 and infinity.

    f(z) = A (z + C h(z)) + B where h = d-bar of the unnormalised map.
    ``displacement`` holds f(z) - z at cell centres; inside the lattice the
    map is evaluated by bilinear interpolation of it, outside (or on
    request) by the exact cell-integrated Cauchy sum.
    """
    displacement: GridField
    density: np.ndarray  # h on the lattice
    scale: complex
    shift: complex
    residual: float = float("nan")
    iterations: int = 0
    trace: tuple = ()

    @property
    def grid(self) -> GridSpec:
        return self.displacement.grid

    def exact(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return self.scale * (z + cauchy_at(self.grid, self.density, z).reshape(z.shape)) + self.shift

    def __call__(self, z, exact: bool = False):
        z = np.asarray(z, dtype=complex)
        if exact:
            return self.exact(z)
        out = np.array(z + bilinear(self.grid, self.displacement.values, z, outside=np.nan), dtype=complex)
        far = ~np.isfinite(out)
        if far.any():
            out[far] = self.exact(z[far])
        return out

    def inverse(self, w, exact: bool = True, tol: float = 1e-13, max_iter: int = 200):
        """Solve f(z) = w by the fixed-point iteration z <- w - (f(z) - z)."""
        w = np.asarray(w, dtype=complex)
        ev = self.exact if exact else self
        z = w.copy()
        for _ in range(max_iter):
            step = w - ev(z)
            z = z + step
            if np.max(np.abs(step), initial=0.0) < tol * max(1.0, np.max(np.abs(w), initial=0.0)):
                break
        return z

    @property
    def sup_displacement(self) -> float:
        return float(np.abs(self.displacement.values).max())

    def save(self, path) -> Path:
        return write_grid(path, KIND_DISPLACEMENT, self.grid, self.displacement.values, self.residual)


def solve_mrmt(mu: BeltramiField, max_iter: int = 200, tol: float = 1e-8) -> NormalizedQcMap:
    """Neumann-series solution of d-bar f = mu d f, normalised to fix 0 and 1."""
    if mu.sup_norm > 0.95:
        raise ValueError(f"sup norm {mu.sup_norm:.4f} exceeds 0.95")
    grid = mu.grid
    m = mu.values
    field_ = GridField(grid, m)
    _check_frame(field_)
    S = _convolver(grid, "beurling")
    h = m.copy()
    trace = []
    it = 0
    if np.any(m != 0):
        for it in range(1, max_iter + 1):
            new = m * (1.0 + S(h))
            inc = float(np.abs(new - h).max())
            h = new
            trace.append(inc)
            if inc < tol:
                break
        else:
            raise ConvergenceError(f"Neumann series did not reach {tol} in {max_iter} steps "
                                   f"(last increment {trace[-1]:.3e})", trace)
    centers = grid.centers()
    g = centers + _convolver(grid, "cauchy")(h) if np.any(h != 0) else centers.copy()
    # affine normalisation from the exact values at 0 and 1
    g0, g1 = (np.array([0.0, 1.0], dtype=complex) + cauchy_at(grid, h, np.array([0.0, 1.0]))
              if np.any(h != 0) else (0j, 1 + 0j))
    scale = 1.0 / (g1 - g0)
    shift = -g0 * scale
    f = scale * g + shift
    disp = GridField(grid, f - centers)
    fz, fzb = fd_derivatives(grid, f)
    residual_field = np.abs(fzb - m * fz)
    smooth = _smooth_cells(m)
    finite = np.isfinite(residual_field) & smooth
    residual = float(residual_field[finite].max(initial=0.0))
    return NormalizedQcMap(disp, h, complex(scale), complex(shift), residual, it, tuple(trace))


def _smooth_cells(m: np.ndarray) -> np.ndarray:
    """Cells whose 3x3 neighbourhood has no jump in mu (finite differences are meaningful)."""
    jump = np.zeros(m.shape, dtype=bool)
    d_x = np.abs(np.diff(m, axis=1)) > 1e-12
    d_y = np.abs(np.diff(m, axis=0)) > 1e-12
    jump[:, 1:] |= d_x
    jump[:, :-1] |= d_x
    jump[1:, :] |= d_y
    jump[:-1, :] |= d_y
    grown = jump.copy()
    grown[1:, :] |= jump[:-1, :]
    grown[:-1, :] |= jump[1:, :]
    grown[:, 1:] |= jump[:, :-1]
    grown[:, :-1] |= jump[:, 1:]
    return ~grown


def dilatation_of(qc: NormalizedQcMap) -> np.ndarray:
    """Finite-difference dilatation of the solver output (nan on the frame)."""
    f = qc.grid.centers() + qc.displacement.values
    fz, fzb = fd_derivatives(qc.grid, f)
    with np.errstate(invalid="ignore", divide="ignore"):
        return fzb / fz


# ---------------------------------------------------------------------------
# rational fitting and straightening
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RationalFit:
    fitted: RationalMap
    residual: float
    degree: int
    qc: NormalizedQcMap | None = field(default=None, repr=False)
    sample_radii: tuple = ()

    def __post_init__(self):
        if not self.residual >= 0:
            raise ValueError("residual must be non-negative")


def _fit_fixed(zs, w, num_deg, den_deg):
    """Least squares for N - w (D - z^m) = w z^m with D monic of degree m."""
    V = np.vander(zs, max(num_deg, den_deg) + 1, increasing=True)
    A = np.hstack([V[:, :num_deg + 1], -w[:, None] * V[:, :den_deg]])
    rhs = w * V[:, den_deg]
    col = np.linalg.norm(A, axis=0)
    col[col == 0] = 1.0
    sol = np.linalg.lstsq(A / col, rhs, rcond=None)[0] / col
    num = sol[:num_deg + 1]
    den = np.append(sol[num_deg + 1:], 1.0)
    with np.errstate(all="ignore"):
        approx = np.polyval(num[::-1], zs) / np.polyval(den[::-1], zs)
    return num, den, float(np.max(np.abs(approx - w)))


def fit_rational(z: np.ndarray, w: np.ndarray, degree: int, drop_factor: float = 2.0) -> RationalMap:
    """Least-squares rational fit w ~ N(z) / D(z), deg N <= degree, D monic.

    The cross-multiplied system is linear in the coefficients.  Denominator
    degrees are tried from 0 upwards and the smallest one whose sample
    residual is within ``drop_factor`` of the full-degree residual wins;
    this is how a rank-deficient (lower degree) answer shows up, e.g. a
    polynomial conjugate comes back with denominator 1.
    """
    z = np.asarray(z, dtype=complex).ravel()
    w = np.asarray(w, dtype=complex).ravel()
    s = float(np.max(np.abs(z)))
    zs = z / s
    fits = [_fit_fixed(zs, w, degree, m) for m in range(degree + 1)]
    floor = min(f[2] for f in fits) + 1e-13 * float(np.max(np.abs(w)))
    num, den, _ = next(f for f in fits if f[2] <= drop_factor * floor)
    num = _trim_small(num / s ** np.arange(len(num)))
    den = _trim_small(den / s ** np.arange(len(den)))
    if len(den) == 1:
        return RationalMap(Polynomial(num / den[0]))
    return RationalMap(Polynomial(num), Polynomial(den))


def _trim_small(c, rel=1e-13):
    c = np.asarray(c, dtype=complex)
    big = np.abs(c).max()
    k = len(c)
    while k > 1 and abs(c[k - 1]) <= rel * big:
        k -= 1
    return c[:k]


def _support_radius(sigma: BeltramiField) -> float:
    supp = sigma.values != 0
    if supp.any():
        return float(np.abs(sigma.grid.centers()[supp]).max())
    return 0.25 * min(sigma.grid.xmax - sigma.grid.xmin, sigma.grid.ymax - sigma.grid.ymin)


def straighten(P, sigma: BeltramiField, fit_degree: int | None = None, qc: NormalizedQcMap | None = None,
               tolerance: float = 0.05, samples_per_unknown: int = 16, test_points: int = 200,
               seed: int = 0) -> RationalFit:
    """Conjugate the quasiregular map P by the solution of the Beltrami equation for sigma.

    Samples of f o P o f^-1 are taken on an annulus outside the support of
    sigma (where the discretisation error of f is smallest and the samples
    stay clear of the Julia set) and fitted; the residual is the maximum
    mismatch on a separate random set of points in a wider annulus.
    """
    base = getattr(P, "base", P)  # a plain RationalMap is its own (holomorphic) P
    deg = base.degree if fit_degree is None else int(fit_degree)
    if qc is None:
        qc = solve_mrmt(sigma)
    r0 = _support_radius(sigma)
    r1, r2 = 1.25 * r0, 2.0 * r0
    n = samples_per_unknown * (2 * deg + 2)
    t = 2 * np.pi * (np.arange(n // 2) + 0.5) / (n // 2)
    w = np.concatenate([r1 * np.exp(1j * t), r2 * np.exp(1j * (t + np.pi / n))])
    target = qc.exact(P(qc.inverse(w)))
    fitted = fit_rational(w, target, deg)
    rng = np.random.default_rng(seed)
    wt = np.sqrt(rng.uniform(r1 ** 2, (2.5 * r0) ** 2, test_points)) * np.exp(2j * np.pi * rng.random(test_points))
    resid = float(np.max(np.abs(qc.exact(P(qc.inverse(wt))) - fitted(wt))))
    if resid > tolerance:
        raise StraighteningError(f"fit residual {resid:.3e} exceeds {tolerance}")
    return RationalFit(fitted, resid, fitted.degree, qc, (r1, r2))
