"""Fourier symbol of the stable-like generator.

    q(a, xi) = int (1 - cos(z . xi)) <a z, z> |z|^(-d-2-alpha) dz
             = C Tr(a) |xi|^alpha + c <a xih, xih> |xi|^alpha

The radial integral reduces to the master integral
K = 2 int_0^inf (1 - cos s) s^(-1-alpha) ds, and the angular part to the two
spherical moments J_p = int_S |sigma . e|^alpha (sigma . e)^p dS, p = 0, 2:

    int_S |sigma . e|^alpha sigma sigma^T dS = A I + B e e^T,
    A = (J_0 - J_2) / (d - 1),   B = (d J_2 - J_0) / (d - 1),

so that C = K A / 2 and c = K B / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate


class QuadratureError(RuntimeError):
    pass


DEFAULT_TOL = 1e-8


def sphere_area(d: int) -> float:
    """|S^{d-1}|."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _quad(f, a, b, tol, **kw):
    val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=tol / 10, limit=500, **kw)
    if not np.isfinite(val) or err > tol * max(abs(val), 1e-300):
        raise QuadratureError(f"quadrature on [{a}, {b}] did not reach rel. tol {tol:g} (err {err:g})")
    return val, err


@lru_cache(maxsize=None)
def radial_integral(alpha: float, s: float = 1.0, tol: float = DEFAULT_TOL) -> float:
    """int_0^inf (1 - cos(l s)) l^(-1-alpha) dl, split at l = 1.

    [0, 1] carries the algebraic weight l^(1-alpha); the cosine tail on [1, inf)
    goes through the QUADPACK Fourier-integral routine, while
    int_1^inf l^(-1-alpha) dl = 1 / alpha is exact.
    """
    if not 0 < alpha < 2:
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    if s == 0:
        return 0.0

    def smooth(l):
        # (1 - cos(l s)) / l^2 without cancellation
        if l == 0:
            return 0.5 * s * s
        return 2.0 * math.sin(0.5 * l * s) ** 2 / (l * l)

    head, _ = _quad(smooth, 0.0, 1.0, tol, weight="alg", wvar=(1.0 - alpha, 0.0))
    tail, terr = integrate.quad(lambda l: l ** (-1.0 - alpha), 1.0, np.inf, weight="cos", wvar=abs(s), epsabs=tol * 1e-3, limlst=200)
    if not np.isfinite(tail) or terr > tol:
        raise QuadratureError(f"Fourier tail integral did not converge (err {terr:g})")
    return head + 1.0 / alpha - tail


def master_integral(alpha: float, tol: float = DEFAULT_TOL) -> float:
    """K = 2 int_0^inf (1 - cos s) s^(-1-alpha) ds."""
    return 2.0 * radial_integral(float(alpha), 1.0, float(tol))


def sphere_moment(d: int, alpha: float, p: int, tol: float = DEFAULT_TOL) -> float:
    """J_p = int_{S^{d-1}} |sigma . e|^alpha (sigma . e)^p dS for even p."""
    if d == 1:
        return 2.0
    beta = (d - 3) / 2
    val, _ = _quad(lambda t: (1 + t) ** beta, 0.0, 1.0, tol, weight="alg", wvar=(alpha + p, beta))
    return 2.0 * sphere_area(d - 1) * val


@dataclass(frozen=True)
class SymbolConstants:
    d: int
    alpha: float
    C: float
    c: float
    K_master: float
    quad_tol: float

    @property
    def isotropic(self) -> float:
        """d C + c: the symbol of a = I at |xi| = 1."""
        return self.d * self.C + self.c

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "alpha": self.alpha,
            "C_dalpha": self.C,
            "c_dalpha": self.c,
            "K_master": self.K_master,
            "quad_tol": self.quad_tol,
        }


def compute_constants(d: int, alpha: float, tol: float = DEFAULT_TOL) -> SymbolConstants:
    if d not in (1, 2):
        raise ValueError(f"d must be 1 or 2, got {d}")
    if not 0 < alpha < 2:
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    K = master_integral(alpha, tol)
    if d == 1:
        # Tr a and <a e, e> coincide, only the sum C + c is identifiable
        return SymbolConstants(d, float(alpha), 0.0, K, K, tol)
    J0 = sphere_moment(d, alpha, 0, tol)
    J2 = sphere_moment(d, alpha, 2, tol)
    A = (J0 - J2) / (d - 1)
    B = (d * J2 - J0) / (d - 1)
    C, c = 0.5 * K * A, 0.5 * K * B
    if not (C > 0 and c > 0):
        raise QuadratureError(f"non-positive symbol constants C={C}, c={c}")
    return SymbolConstants(d, float(alpha), C, c, K, tol)


@dataclass(frozen=True)
class SymbolValue:
    value: float
    xi: tuple
    method: str


def _as_xi(xi, d: int) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape[-1] != d:
        raise ValueError(f"wave vector of dimension {xi.shape[-1]} does not match d={d}")
    return xi


def closed_form_values(a: np.ndarray, xi: np.ndarray, consts: SymbolConstants) -> np.ndarray:
    """Vectorized closed form; ``a`` is (..., d, d), ``xi`` is (d,) or broadcastable (..., d)."""
    a = np.asarray(a, dtype=float)
    xi = np.asarray(xi, dtype=float)
    r = np.linalg.norm(xi, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    e = xi / safe[..., None]
    tr = np.trace(a, axis1=-2, axis2=-1)
    dirn = np.einsum("...i,...ij,...j->...", e, a, e)
    val = (consts.C * tr + consts.c * dirn) * r**consts.alpha
    return np.where(r > 0, val, 0.0)


def symbol_closed(a, xi, consts: SymbolConstants) -> SymbolValue:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    xi = _as_xi(xi, consts.d)
    return SymbolValue(float(closed_form_values(a, xi, consts)), tuple(xi.tolist()), "closed")


def symbol_quadrature(a, xi, alpha: float, tol: float = DEFAULT_TOL) -> SymbolValue:
    """Direct evaluation of int (1 - cos z.xi) <a z, z> |z|^(-d-2-alpha) dz.

    Spherical coordinates z = l sigma; for each direction the radial integral
    scales to |sigma . xi|^alpha times the master radial integral, and the angular
    integral is done by adaptive quadrature with breakpoints where sigma . xi = 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = a.shape[0]
    xi = _as_xi(xi, d)
    r = float(np.linalg.norm(xi))
    if r == 0:
        return SymbolValue(0.0, tuple(xi.tolist()), "quadrature")
    if d == 1:
        val = 2.0 * a[0, 0] * radial_integral(float(alpha), r, tol)
        return SymbolValue(float(val), tuple(xi.tolist()), "quadrature")
    R = radial_integral(float(alpha), 1.0, tol)
    th0 = math.atan2(xi[1], xi[0])

    def integrand(th):
        s = math.cos(th), math.sin(th)
        proj = abs(s[0] * xi[0] + s[1] * xi[1])
        return proj**alpha * (a[0, 0] * s[0] ** 2 + 2 * a[0, 1] * s[0] * s[1] + a[1, 1] * s[1] ** 2)

    # zeros of sigma . xi on [th0 - pi/2, th0 + 3pi/2)
    lo = th0 - math.pi / 2
    total = 0.0
    for k in range(2):
        v, _ = _quad(integrand, lo + k * math.pi, lo + (k + 1) * math.pi, tol)
        total += v
    return SymbolValue(float(R * total), tuple(xi.tolist()), "quadrature")


def symbol_scaled(f, x, xi, eps: float, consts: SymbolConstants, check: bool = __debug__) -> SymbolValue:
    """q_eps(x, xi) = eps^-alpha q(x/eps, eps xi) = q_closed(a(x/eps), xi)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = f.evaluate(x / eps)
    out = symbol_closed(a, xi, consts)
    if check:
        alt = eps ** (-consts.alpha) * float(closed_form_values(a, eps * _as_xi(xi, consts.d), consts))
        assert abs(alt - out.value) <= 1e-12 * max(1.0, abs(out.value)), (alt, out.value)
    return out


def homogenized_symbol(a_bar, xi, consts: SymbolConstants) -> SymbolValue:
    out = symbol_closed(a_bar, xi, consts)
    return SymbolValue(out.value, out.xi, "homogenized")


def kernel_density(a, z, alpha: float) -> float:
    """<a z, z> / |z|^(d + 2 + alpha)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    r = float(np.linalg.norm(z))
    if r == 0:
        raise ValueError("kernel density is singular at z = 0")
    return float(z @ a @ z) / r ** (a.shape[0] + 2 + alpha)


def fourth_moment_factor(d: int) -> float:
    """|S^{d-1}| / (d (d + 2)) in  int_S sigma sigma^T <a sigma, sigma> dS = factor (Tr a I + 2a)."""
    return sphere_area(d) / (d * (d + 2))


def small_jump_covariance(a: np.ndarray, radius: float, alpha: float) -> np.ndarray:
    """Sigma = int_{|z| < radius} z z^T n(dz) for the kernel <a z, z> |z|^(-d-2-alpha)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = a.shape[-1]
    eye = np.eye(d)
    tr = np.trace(a, axis1=-2, axis2=-1)[..., None, None]
    return radius ** (2 - alpha) / (2 - alpha) * fourth_moment_factor(d) * (tr * eye + 2 * a)
