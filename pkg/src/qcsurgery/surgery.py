"""The surgery map and the invariant Beltrami field.

In the unit disk the blend map f_p is the Mobius map M_a(z) = (z + a)/(1 + a z)
on |z| <= p, the identity on |z| >= 1, and a quasiconformal mollifier F
post-composed with M_a on the ring p <= |z| <= 1.  The mollifier is written
in logarithmic coordinates w = log(z/p) = s + i theta, t = s / L, L = log(1/p):

    F(z) = p exp(L S(t, theta) + i Theta(t, theta))
    S     = t + t(1-t) sum c_kj t^j cos(k theta)
    Theta = theta + t psi(theta) + t(1-t) sum b_kj t^j sin(k theta)

with psi(theta) = arg(M_-a(e^(i theta)) / e^(i theta)).  For any coefficients
this is the identity on |z| = p and M_-a on |z| = 1, so f_p matches the
Mobius core and the identity on the two boundary circles.  With all b, c = 0
it is the straight log-linear interpolation with a boundary-matching twist;
the coefficients are chosen by minimising an L^q proxy of the sup of the
dilatation, which keeps the sup below 0.95 up to p = 0.7.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from .beltrami import BeltramiField, GridSpec, bilinear
from .curves import JordanCurve
from .rational import RationalMap, green_function

K_MODES = 8
J_MODES = 3
Q_SCHEDULE = (16, 48, 128)
TOO_THIN = 0.95
DEFAULT_HORIZON = 200
# cell-image radius inflation and sub-samples per ring width used when supersampling
REFINE_SAFETY = 2.0
SAMPLES_PER_WIDTH = 4


class SurgeryTooThinError(ValueError):
    """Blend dilatation reaches the 0.95 ceiling."""


class ConfigViolationError(ValueError):
    pass


class SafeCopyViolationError(RuntimeError):
    """An orbit re-entered the support after passing through the Mobius core."""


def blend_parameter(p: float) -> float:
    return (1 + 3 * p) / 4


def mobius(z, a):
    return (z + a) / (1 + a * z)


# ---------------------------------------------------------------------------
# mollifier
# ---------------------------------------------------------------------------

def _psi(theta, a):
    e = np.exp(1j * theta)
    psi = np.angle(mobius(e, -a) / e)
    dpsi = (1 - a * a) / np.abs(1 - a * e) ** 2 - 1
    return psi, dpsi


def _design(p: float, t: np.ndarray, theta: np.ndarray):
    """Partial derivatives of (L S, Theta) in (s, theta) as affine functions of the coefficients.

    Returns base terms and basis matrices for W_s = S_s + i Theta_s and
    W_theta = S_theta + i Theta_theta, flattened over the (t, theta) product.
    """
    a = blend_parameter(p)
    L = math.log(1 / p)
    psi, dpsi = _psi(theta, a)
    T, TH = np.meshgrid(t, theta, indexing="ij")
    T, TH = T.ravel(), TH.ravel()
    PSI = np.broadcast_to(psi, (len(t), len(theta))).ravel()
    DPSI = np.broadcast_to(dpsi, (len(t), len(theta))).ravel()
    wgt = T * (1 - T)
    dwgt = 1 - 2 * T
    k = np.arange(1, K_MODES + 1)[None, :, None]
    j = np.arange(J_MODES)[None, None, :]
    Tt = T[:, None, None]
    Tj = Tt ** j
    dTj = np.where(j > 0, j * Tt ** np.maximum(j - 1, 0), 0.0)
    radial = dwgt[:, None, None] * Tj + wgt[:, None, None] * dTj
    sk = np.sin(k * TH[:, None, None])
    ck = np.cos(k * TH[:, None, None])
    n = len(T)
    th_s = PSI / L
    th_th = 1 + T * DPSI
    b_th_s = (radial * sk / L).reshape(n, -1)
    b_th_th = (wgt[:, None, None] * Tj * k * ck).reshape(n, -1)
    c_s_s = (radial * ck).reshape(n, -1)
    c_s_th = (-L * wgt[:, None, None] * Tj * k * sk).reshape(n, -1)
    return th_s, th_th, b_th_s, b_th_th, c_s_s, c_s_th


def _dilatation(x, design):
    th_s, th_th, b_s, b_th, c_s, c_th = design
    m = b_s.shape[1]
    b, c = x[:m], x[m:]
    Ts = th_s + b_s @ b
    Tt = th_th + b_th @ b
    Ss = 1 + c_s @ c
    St = c_th @ c
    w_w = 0.5 * ((Ss + Tt) + 1j * (Ts - St))
    w_wb = 0.5 * ((Ss - Tt) + 1j * (Ts + St))
    return w_wb / w_w, w_w


def _objective(x, design, q):
    """log(mean |mu|^q) / q and its gradient in the coefficients."""
    _, _, b_s, b_th, c_s, c_th = design
    mu, w_w = _dilatation(x, design)
    m2 = mu.real ** 2 + mu.imag ** 2
    mq = m2 ** (q / 2)
    mean = mq.mean()
    coef = 0.5 * mq / np.maximum(m2, 1e-300) / len(mu) / mean
    v = 2 * np.conj(mu) / w_w * coef
    gb = np.real((v * 0.5) @ (-b_th + 1j * b_s) - (v * mu * 0.5) @ (b_th + 1j * b_s))
    gc = np.real((v * 0.5) @ (c_s + 1j * c_th) - (v * mu * 0.5) @ (c_s - 1j * c_th))
    return math.log(mean) / q, np.concatenate([gb, gc])


@lru_cache(maxsize=32)
def mollifier_coefficients(p: float) -> tuple:
    """Optimised (b, c) coefficients for the ring A(p, 1); deterministic and cached per p."""
    a = blend_parameter(p)
    phi = (np.arange(256) + 0.5) / 256 * 2 * np.pi - np.pi
    # uniform angles plus angles bunched where M_a compresses the circle
    theta = np.sort(np.concatenate([phi, np.angle(mobius(np.exp(1j * phi), a))]))
    t = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, 25))
    design = _design(p, t, theta)
    x = np.zeros(2 * K_MODES * J_MODES)
    for q in Q_SCHEDULE:
        res = minimize(_objective, x, args=(design, q), jac=True, method="L-BFGS-B",
                       options={"maxiter": 300})
        x = res.x
    m = K_MODES * J_MODES
    return tuple(x[:m]), tuple(x[m:])


@dataclass(frozen=True, eq=False)
class Mollifier:
    """The ring map F on p <= |z| <= 1 (identity on |z| = p, M_-a on |z| = 1)."""
    p: float
    b: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(K_MODES, J_MODES))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(K_MODES, J_MODES))

    @property
    def a(self) -> float:
        return blend_parameter(self.p)

    @property
    def L(self) -> float:
        return math.log(1 / self.p)

    def _fields(self, t, theta):
        """S, Theta and their derivatives in (t, theta) at matching arrays."""
        psi, dpsi = _psi(theta, self.a)
        wgt, dwgt = t * (1 - t), 1 - 2 * t
        k = np.arange(1, K_MODES + 1)
        j = np.arange(J_MODES)
        sk = np.sin(np.multiply.outer(theta, k))
        ck = np.cos(np.multiply.outer(theta, k))
        tj = np.power.outer(t, j)
        dtj = np.where(j > 0, j * np.power.outer(t, np.maximum(j - 1, 0)), 0.0)
        # coefficient sums: sum_kj coef_kj * (angular_k) * (radial_j)
        bs = np.einsum("kj,...k,...j->...", self.b, sk, tj)
        bs_dt = np.einsum("kj,...k,...j->...", self.b, sk, dtj)
        bc_k = np.einsum("kj,...k,...j->...", self.b * k[:, None], ck, tj)
        cc = np.einsum("kj,...k,...j->...", self.c, ck, tj)
        cc_dt = np.einsum("kj,...k,...j->...", self.c, ck, dtj)
        cs_k = np.einsum("kj,...k,...j->...", self.c * k[:, None], sk, tj)
        S = t + wgt * cc
        S_t = 1 + dwgt * cc + wgt * cc_dt
        S_th = -wgt * cs_k
        Th = theta + t * psi + wgt * bs
        Th_t = psi + dwgt * bs + wgt * bs_dt
        Th_th = 1 + t * dpsi + wgt * bc_k
        return S, Th, S_t, S_th, Th_t, Th_th

    def jet(self, z):
        """F(z), dF/dz and the dilatation of F at points of the ring."""
        z = np.asarray(z, dtype=complex)
        L = self.L
        t = np.clip(np.log(np.abs(z) / self.p) / L, 0.0, 1.0)
        theta = np.angle(z)
        S, Th, S_t, S_th, Th_t, Th_th = self._fields(t, theta)
        F = self.p * np.exp(L * S + 1j * Th)
        # W = L S + i Theta as a function of w = s + i theta, s = L t
        W_s = S_t + 1j * Th_t / L
        W_th = L * S_th + 1j * Th_th
        W_w = 0.5 * (W_s - 1j * W_th)
        W_wb = 0.5 * (W_s + 1j * W_th)
        dF = F * W_w / z
        mu = (W_wb / W_w) * (z / np.conj(z))
        return F, dF, mu

    def __call__(self, z):
        return self.jet(z)[0]

    def inverse(self, u, tol: float = 1e-14, max_iter: int = 60):
        """Solve F(z) = u for u in the ring by Newton's method in (t, theta)."""
        u = np.asarray(u, dtype=complex)
        L = self.L
        s_target = np.clip(np.log(np.abs(u) / self.p) / L, 0.0, 1.0)
        th_target = np.angle(u)
        t = s_target.copy()
        psi, _ = _psi(th_target, self.a)
        theta = th_target - t * psi
        for _ in range(max_iter):
            S, Th, S_t, S_th, Th_t, Th_th = self._fields(t, theta)
            r1 = S - s_target
            r2 = np.angle(np.exp(1j * (Th - th_target)))
            det = S_t * Th_th - S_th * Th_t
            dt = (Th_th * r1 - S_th * r2) / det
            dth = (-Th_t * r1 + S_t * r2) / det
            t = np.clip(t - dt, 0.0, 1.0)
            theta = theta - dth
            if np.max(np.abs(dt) + np.abs(dth), initial=0.0) < tol:
                break
        return self.p * np.exp(L * t + 1j * theta)


# ---------------------------------------------------------------------------
# blend map
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RadialBlendMap:
    p: float
    mollifier: Mollifier = field(repr=False)
    dilatation: BeltramiField = field(repr=False)
    samples: np.ndarray = field(repr=False)  # f_p at the cell centres of the dilatation grid

    @property
    def a(self) -> float:
        return blend_parameter(self.p)

    @property
    def sup_norm(self) -> float:
        return self.dilatation.sup_norm

    @property
    def grid(self) -> GridSpec:
        return self.dilatation.grid

    def jet(self, z):
        """Values, d/dz and dilatation of f_p at arbitrary points."""
        z = np.asarray(z, dtype=complex)
        a = self.a
        r = np.abs(z)
        val = z.copy()
        dz = np.ones(z.shape, dtype=complex)
        mu = np.zeros(z.shape, dtype=complex)
        core = r <= self.p
        ring = (r > self.p) & (r < 1)
        val[core] = mobius(z[core], a)
        dz[core] = (1 - a * a) / (1 + a * z[core]) ** 2
        if ring.any():
            F, dF, m = self.mollifier.jet(z[ring])
            val[ring] = mobius(F, a)
            dz[ring] = (1 - a * a) / (1 + a * F) ** 2 * dF
            mu[ring] = m
        return val, dz, mu

    def __call__(self, z):
        return self.jet(z)[0]

    def inverse(self, w):
        w = np.asarray(w, dtype=complex)
        a = self.a
        out = w.copy()
        inside = np.abs(w) < 1
        u = mobius(w[inside], -a)
        core = np.abs(u) <= self.p
        res = u.copy()
        if (~core).any():
            res[~core] = self.mollifier.inverse(u[~core])
        out[inside] = res
        return out

    def boundary_deviation(self, n: int = 1024) -> tuple[float, float]:
        """Error of the bilinear reconstruction on |z| = p and |z| = 1.

        Measured in units of one cell's distortion, h times the largest
        local Lipschitz constant |f_z| + |f_zbar| of the map on the circle.
        """
        th = 2 * np.pi * np.arange(n) / n
        out = []
        for radius, exact in ((self.p, lambda q: mobius(q, self.a)), (1.0, lambda q: q)):
            zc = radius * np.exp(1j * th)
            _, dz, mu = self.jet(zc * (1 - 1e-9) if radius == 1.0 else zc * (1 + 1e-9))
            lip = float((np.abs(dz) * (1 + np.abs(mu))).max())
            err = np.abs(bilinear(self.grid, self.samples, zc) - exact(zc)).max()
            out.append(float(err / (self.grid.h * lip)))
        return out[0], out[1]


def _fd_dilatation(fn, z, step):
    fx = (fn(z + step) - fn(z - step)) / (2 * step)
    fy = (fn(z + 1j * step) - fn(z - 1j * step)) / (2 * step)
    fz = 0.5 * (fx - 1j * fy)
    fzb = 0.5 * (fx + 1j * fy)
    return fzb / fz


def blend_sup_norm(p: float, n_t: int = 101, n_theta: int = 4096) -> float:
    """Sup of the blend dilatation on a fine polar sample; never raises."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    b, c = mollifier_coefficients(float(p))
    mol = Mollifier(p, b, c)
    t = np.linspace(0, 1, n_t)
    th = 2 * np.pi * np.arange(n_theta) / n_theta - np.pi
    z = p * np.exp(mol.L * t[:, None] + 1j * th[None, :])
    return float(np.abs(mol.jet(z)[2]).max())


def build_blend(p: float, resolution: int = 256) -> RadialBlendMap:
    """Blend map on a resolution^2 lattice just covering [-1, 1]^2 with finite-difference dilatation."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if resolution < 128:
        raise ValueError("resolution must be >= 128")
    b, c = mollifier_coefficients(float(p))
    mol = Mollifier(p, b, c)
    # a few cells of margin so that bilinear lookups on |z| = 1 stay inside the lattice
    grid = GridSpec.square(0j, resolution / (resolution - 8), resolution)
    z = grid.centers()
    ring = (np.abs(z) > p) & (np.abs(z) < 1)
    blend = RadialBlendMap(p, mol, BeltramiField.from_values(grid, np.zeros(z.shape)), z)
    samples = blend(z)
    mu = np.zeros(z.shape, dtype=complex)
    step = 1e-3 * grid.h
    # the ring map is smooth on the closed ring: keep the stencil inside it
    zr = z[ring]
    r = np.abs(zr)
    zr_in = zr * np.clip(r, p + 2 * step, 1 - 2 * step) / r
    mu[ring] = _fd_dilatation(lambda q: mobius(mol(q), mol.a), zr_in, step)
    sup = float(np.abs(mu).max(initial=0.0))
    if sup >= TOO_THIN:
        raise SurgeryTooThinError(f"blend dilatation sup {sup:.4f} >= {TOO_THIN} at p = {p}")
    field_ = BeltramiField(grid, mu, sup, sampler=lambda q: blend.jet(q)[2], declared_support=ring)
    return RadialBlendMap(p, mol, field_, samples)


# ---------------------------------------------------------------------------
# transplantation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurgeryConfig:
    curve: JordanCurve = field(repr=False)
    b: complex
    disk_center: complex
    disk_radius: float
    p: float
    target: complex
    safe_level: float | None = None

    @classmethod
    def aimed(cls, curve, b, disk_center, disk_radius, p, direction: float = 0.0,
              safe_level: float | None = None) -> "SurgeryConfig":
        """Config whose target is the preimage of a under the disk chart rotated by ``direction``."""
        beta = (complex(b) - disk_center) / disk_radius
        zeta = blend_parameter(p) * np.exp(1j * direction)
        v = (zeta + beta) / (1 + np.conj(beta) * zeta)
        return cls(curve, complex(b), complex(disk_center), float(disk_radius), float(p),
                   complex(disk_center + disk_radius * v), safe_level)

    def _raw_chart(self, w):
        beta = (self.b - self.disk_center) / self.disk_radius
        v = (np.asarray(w, dtype=complex) - self.disk_center) / self.disk_radius
        return (v - beta) / (1 - np.conj(beta) * v)

    def validate(self, rmap: RationalMap | None = None) -> "SurgeryConfig":
        c, r = self.disk_center, self.disk_radius
        if not 0 < self.p < 1:
            raise ConfigViolationError("p must lie in (0, 1)")
        if r <= 0 or abs(self.b - c) >= r:
            raise ConfigViolationError("b is not inside the transplant disk")
        if abs(self.target - c) >= r:
            raise ConfigViolationError("target is not inside the transplant disk")
        if self.curve.distance(np.array([c]))[0] <= r or not bool(self.curve.winding(np.array([c]))[0] == 1):
            raise ConfigViolationError("transplant disk is not inside the curve")
        if abs(abs(self._raw_chart(self.target)) - blend_parameter(self.p)) > 1e-9:
            raise ConfigViolationError("target is not at chart distance a from b")
        if self.safe_level is not None and rmap is not None:
            if float(green_function(rmap, self.target)) < self.safe_level:
                raise ConfigViolationError("target is below the safe Green level")
        return self


@dataclass(frozen=True, eq=False)
class SurgeryMap:
    """f(gamma, p): chart^-1 o f_p o chart on the disk D, identity off it."""
    blend: RadialBlendMap
    config: SurgeryConfig

    @property
    def rotation(self) -> complex:
        z = self.config._raw_chart(self.config.target)
        return abs(z) / z

    def chart(self, w):
        return self.rotation * self.config._raw_chart(w)

    def chart_derivative(self, w):
        cfg = self.config
        beta = (cfg.b - cfg.disk_center) / cfg.disk_radius
        v = (np.asarray(w, dtype=complex) - cfg.disk_center) / cfg.disk_radius
        return self.rotation * (1 - abs(beta) ** 2) / (1 - np.conj(beta) * v) ** 2 / cfg.disk_radius

    def unchart(self, zeta):
        cfg = self.config
        beta = (cfg.b - cfg.disk_center) / cfg.disk_radius
        zeta = np.asarray(zeta, dtype=complex) / self.rotation
        v = (zeta + beta) / (1 + np.conj(beta) * zeta)
        return cfg.disk_center + cfg.disk_radius * v

    def jet(self, w):
        w = np.asarray(w, dtype=complex)
        val = w.copy()
        dz = np.ones(w.shape, dtype=complex)
        mu = np.zeros(w.shape, dtype=complex)
        inD = np.abs(w - self.config.disk_center) < self.config.disk_radius
        if inD.any():
            wi = w[inD]
            zeta = self.chart(wi)
            d1 = self.chart_derivative(wi)
            fv, fd, fm = self.blend.jet(zeta)
            out = self.unchart(fv)
            d2 = self.chart_derivative(out)
            val[inD] = out
            dz[inD] = fd * d1 / d2
            mu[inD] = fm * np.conj(d1) / d1
        return val, dz, mu

    def __call__(self, w):
        return self.jet(w)[0]

    def inverse(self, w):
        w = np.asarray(w, dtype=complex)
        out = w.copy()
        inD = np.abs(w - self.config.disk_center) < self.config.disk_radius
        if inD.any():
            out[inD] = self.unchart(self.blend.inverse(self.chart(w[inD])))
        return out

    def zones(self, w):
        """(ring, core) membership masks."""
        r = np.abs(self.chart(w))
        inD = np.abs(np.asarray(w) - self.config.disk_center) < self.config.disk_radius
        return inD & (r > self.blend.p) & (r < 1), inD & (r <= self.blend.p)


def transplant(blend: RadialBlendMap, config: SurgeryConfig) -> SurgeryMap:
    config.validate()
    if abs(config.p - blend.p) > 1e-12:
        raise ConfigViolationError("blend and config disagree on p")
    return SurgeryMap(blend, config)


@dataclass(frozen=True, eq=False)
class QuasiregularMap:
    base: RationalMap
    blend: RadialBlendMap = field(repr=False)
    config: SurgeryConfig = field(repr=False)
    surgery: SurgeryMap = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "surgery", transplant(self.blend, self.config))

    @property
    def degree(self) -> int:
        return self.base.degree

    def __call__(self, z):
        return self.surgery(self.base(np.asarray(z, dtype=complex)))

    def jet(self, z):
        """P(z), dP/dz and the dilatation of P."""
        z = np.asarray(z, dtype=complex)
        w = self.base(z)
        d = self.base.derivative(z)
        val, df, mu = self.surgery.jet(w)
        return val, df * d, mu * np.conj(d) / d

    def preimages(self, w):
        from .rational import preimage_array
        return preimage_array(self.base, complex(self.surgery.inverse(np.array([w]))[0]))


def build_quasiregular(rmap: RationalMap, blend: RadialBlendMap, config: SurgeryConfig) -> QuasiregularMap:
    config.validate(rmap)
    return QuasiregularMap(rmap, blend, config)


# ---------------------------------------------------------------------------
# the invariant Beltrami field
# ---------------------------------------------------------------------------

def compose_dilatation(mu_inner, phase_inner, mu_outer):
    """Dilatation of g o h from mu_h, the unit phase of h_z and mu_g evaluated at h."""
    theta = np.conj(phase_inner) ** 2
    return (mu_inner + theta * mu_outer) / (1 + np.conj(mu_inner) * theta * mu_outer)


def pull_back(mu_P, dP, sigma_image):
    """The P-pullback of sigma: (mu_P + theta sigma(P)) / (1 + conj(mu_P) theta sigma(P))."""
    theta = np.conj(dP) / dP
    return (mu_P + theta * sigma_image) / (1 + np.conj(mu_P) * theta * sigma_image)


def _escape_radius(P: QuasiregularMap) -> float:
    c = P.base.numerator.coeffs if P.base.is_polynomial else None
    cfg = P.config
    r = abs(cfg.disk_center) + cfg.disk_radius
    if c is not None:
        lead = abs(c[-1])
        r = max(r, 2 * (1 + float(np.sum(np.abs(c[:-1]))) / lead), 2 * lead ** (-1 / (len(c) - 2)))
    return 10.0 * r


@dataclass
class _OrbitResult:
    sigma: np.ndarray
    entered: np.ndarray
    violation: np.ndarray
    refine: np.ndarray  # suggested subsamples per side (1 = none)


def sigma_orbits(P: QuasiregularMap, z, horizon: int = DEFAULT_HORIZON, cell: float = 0.0,
                 max_sub: int = 32) -> _OrbitResult:
    """Follow P-orbits and accumulate the pulled-back dilatation.

    ``cell`` > 0 also tracks the linearised image of a cell of that size
    around each point and proposes a subsample count when that image
    straddles a boundary circle of the support ring.
    """
    z = np.asarray(z, dtype=complex).ravel().copy()
    n = z.size
    sigma = np.zeros(n, dtype=complex)
    phase = np.ones(n, dtype=complex)
    entered = np.zeros(n, dtype=bool)
    cored = np.zeros(n, dtype=bool)
    violation = np.zeros(n, dtype=bool)
    refine = np.ones(n, dtype=int)
    # radius of the tracked image of a cell around each point (second-order near critical points)
    rad = np.full(n, REFINE_SAFETY * cell)
    resolvable = (1 - P.blend.p) * REFINE_SAFETY * max_sub
    sm = P.surgery
    cfg = P.config
    p = P.blend.p
    R = P.base
    esc = _escape_radius(P)
    idx = np.flatnonzero(np.abs(z) < esc)
    for _ in range(horizon):
        if idx.size == 0:
            break
        zz = z[idx]
        w = R(zz)
        d = R.derivative(zz)
        inD = np.abs(w - cfg.disk_center) < cfg.disk_radius
        val = w.copy()
        dP = d.copy()
        muP = np.zeros(idx.size, dtype=complex)
        if cell > 0:
            with np.errstate(over="ignore", invalid="ignore"):
                rw = np.abs(d) * rad[idx] + 0.5 * np.abs(R.second_derivative(zz)) * rad[idx] ** 2
                r_all = np.abs(sm.chart(w))
                rz = rw * np.abs(sm.chart_derivative(w))
            # the ring piece inside this cell is about (1 - p) * rad0 / rz across; pieces
            # thinner than h / max_sub are below what supersampling can resolve
            near = ((np.abs(r_all - p) < rz) | (np.abs(r_all - 1) < rz)) & (rz < resolvable)
            want = np.clip(np.ceil(SAMPLES_PER_WIDTH * rz / (1 - p)), 2, max_sub).astype(int)
            refine[idx[near]] = np.maximum(refine[idx[near]], want[near])
            rad[idx] = rw
        if inD.any():
            wi = w[inD]
            fv, fd, fm = sm.jet(wi)
            val[inD] = fv
            dP[inD] = fd * d[inD]
            muP[inD] = fm * np.conj(d[inD]) / d[inD]
            r = np.abs(sm.chart(wi))
            ring = (r > p) & (r < 1)
            core = r <= p
            ii = idx[inD]
            violation[ii[ring]] |= cored[ii[ring]]
            entered[ii[ring]] = True
            cored[ii[core]] = True
            if cell > 0:
                rad[ii] *= np.abs(fd) * (1 + np.abs(fm))
        # mu_P vanishes off the ring, where this reduces to the plain chain rule
        nz = muP != 0
        if nz.any():
            s_old = sigma[idx[nz]]
            ph = phase[idx[nz]]
            sigma[idx[nz]] = compose_dilatation(s_old, ph, muP[nz])
            corr = 1 + muP[nz] * np.conj(s_old) * np.conj(ph) ** 2
            phase[idx[nz]] = ph * corr / np.abs(corr)
        phase[idx] *= dP / np.abs(dP)
        z[idx] = val
        idx = idx[np.abs(val) < esc]
    return _OrbitResult(sigma, entered, violation, refine)


def default_grid(rmap: RationalMap, n: int = 1024, margin: float = 0.2, probe: int = 512) -> GridSpec:
    """Square covering the filled Julia set proxy with a relative margin.

    The proxy is the sublevel set {G <= g*} of the Green function, with g*
    the largest critical Green value (or 0.05 when every critical orbit is
    bounded); unlike a set of non-escaping probe points it does not thin out
    to nothing when the Julia set is a Cantor set.
    """
    from .rational import critical_points
    c = rmap.numerator.coeffs
    bound = 2 * (1 + float(np.sum(np.abs(c[:-1]))) / abs(c[-1]))
    crit = np.array([z for z, _ in critical_points(rmap).points])
    level = max(0.05, float(np.max(green_function(rmap, crit), initial=0.0)))
    xs = np.linspace(-bound, bound, probe)
    z = (xs[None, :] + 1j * xs[:, None]).ravel()
    pts = z[green_function(rmap, z) <= level]
    if pts.size == 0:
        pts = crit
    cx = 0.5 * (pts.real.min() + pts.real.max())
    cy = 0.5 * (pts.imag.min() + pts.imag.max())
    half = 0.5 * max(np.ptp(pts.real), np.ptp(pts.imag)) + 2 * bound / probe
    return GridSpec.square(complex(cx, cy), half * (1 + margin), n)


@dataclass(frozen=True)
class SigmaStats:
    support_cells: int
    refined_cells: int
    subsamples: int
    violations: int


def invariant_beltrami(P: QuasiregularMap, horizon: int = DEFAULT_HORIZON, grid: GridSpec | None = None,
                       max_sub: int = 32, strict: bool = True) -> BeltramiField:
    """Invariant field sigma: P-orbit pullback of the blend dilatation, as cell averages.

    Cells whose linearised image straddles the support ring are supersampled
    (up to max_sub^2 points); the stored value is the mean over the cell's
    samples and sup_norm is the maximum over every sample.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    grid = default_grid(P.base) if grid is None else grid
    centres = grid.centers()
    res = sigma_orbits(P, centres, horizon, cell=grid.h, max_sub=max_sub)
    values = res.sigma.reshape(centres.shape).copy()
    support = res.entered.reshape(centres.shape).copy()
    subs = np.ones(centres.shape, dtype=np.int32)
    sup = float(np.abs(res.sigma).max(initial=0.0))
    violations = int(res.violation.sum())
    refine = res.refine.reshape(centres.shape)
    rows, cols = np.nonzero(refine > 1)
    total = 0
    for m in np.unique(refine[rows, cols]):
        sel = refine[rows, cols] == m
        r_m, c_m = rows[sel], cols[sel]
        off = ((np.arange(m) + 0.5) / m - 0.5) * grid.h
        sub = (off[None, :] + 1j * off[:, None]).ravel()
        chunk = max(1, 2_000_000 // (m * m))
        for s in range(0, r_m.size, chunk):
            rr, cc = r_m[s:s + chunk], c_m[s:s + chunk]
            pts = (centres[rr, cc][:, None] + sub[None, :]).ravel()
            out = sigma_orbits(P, pts, horizon)
            sig = out.sigma.reshape(rr.size, m * m)
            values[rr, cc] = sig.mean(axis=1)
            support[rr, cc] |= out.entered.reshape(rr.size, m * m).any(axis=1)
            subs[rr, cc] = m
            sup = max(sup, float(np.abs(sig).max(initial=0.0)))
            violations += int(out.violation.sum())
            total += pts.size
    if strict and violations:
        raise SafeCopyViolationError(f"{violations} samples re-entered the support after the Mobius core")

    def sampler(q, _P=P, _h=horizon):
        q = np.asarray(q, dtype=complex)
        return sigma_orbits(_P, q, _h).sigma.reshape(q.shape)

    field_ = BeltramiField(grid, values, sup, sampler, support, subs)
    object.__setattr__(field_, "stats", SigmaStats(int(support.sum()), rows.size, total, violations))
    return field_


@dataclass(frozen=True)
class InvarianceReport:
    samples: int
    passed: int
    max_error: float
    tolerance: float

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.samples if self.samples else 1.0


def verify_invariance(sigma: BeltramiField, P: QuasiregularMap, samples: int = 500, seed: int = 0,
                      tolerance: float = 1e-2) -> InvarianceReport:
    """Compare stored cell values with the P-pullback of sigma at random support cells.

    The right-hand side is evaluated at the same sub-cell sample points the
    stored average was built from, with sigma at the image points taken from
    the field's pointwise sampler (sub-cell support pieces cannot be
    interpolated from cell averages).
    """
    grid = sigma.grid
    rows, cols = np.nonzero(sigma.support)
    if rows.size == 0:
        return InvarianceReport(0, 0, 0.0, tolerance)
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.size, size=min(samples, rows.size), replace=False)
    point = sigma.sampler or (lambda q: bilinear(grid, sigma.values, q))
    centres = grid.centers()
    subs = sigma.subsamples if sigma.subsamples is not None else np.ones(centres.shape, dtype=int)
    errors = np.empty(pick.size)
    for n, k in enumerate(pick):
        r, c = rows[k], cols[k]
        m = int(subs[r, c])
        off = ((np.arange(m) + 0.5) / m - 0.5) * grid.h
        pts = centres[r, c] + (off[None, :] + 1j * off[:, None]).ravel()
        val, dP, muP = P.jet(pts)
        rhs = pull_back(muP, dP, np.asarray(point(val))).mean()
        errors[n] = abs(rhs - sigma.values[r, c])
    return InvarianceReport(int(pick.size), int((errors <= tolerance).sum()),
                            float(errors.max()), tolerance)
