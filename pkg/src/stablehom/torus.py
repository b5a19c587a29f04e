"""Discretized periodized generator on the torus T^d_M and its invariant density.

The rate from node x to node x + z (z a nonzero lattice offset mod M) is
h^d <a(x), S(z)>_F with the periodized kernel tensor

    S(z) = sum_m w w^T |w|^(-d-2-alpha),   w = z + M m.

Offsets within ``rho`` cells of the origin lose their m = 0 term; the mass they
carried is replaced by a second-difference diffusion with covariance
int_{|z| < r_eff} z z^T n(x, dz), r_eff being the radius of the ball with the
same volume as the folded cells (1.5 h in d = 1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import integrate, special
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .field import EnvironmentField, periodize
from .symbol import SymbolConstants, ball_volume, compute_constants, small_jump_covariance

NEAR_CELLS = 2
DEFAULT_CUTOFF = 8
DENSE_FALLBACK_MAX = 4096


class TorusError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TorusGrid:
    d: int
    M: float
    n_per_axis: int

    def __post_init__(self):
        if self.n_per_axis % 2:
            raise TorusError("n_per_axis must be even")
        if self.d not in (1, 2):
            raise TorusError("d must be 1 or 2")

    @property
    def h(self) -> float:
        return self.M / self.n_per_axis

    @property
    def N(self) -> int:
        return self.n_per_axis**self.d

    @property
    def cell_weight(self) -> float:
        return 1.0 / self.N

    def multi_index(self) -> np.ndarray:
        n = self.n_per_axis
        if self.d == 1:
            return np.arange(n)[:, None]
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return np.stack([i.ravel(), j.ravel()], axis=1)

    @property
    def nodes(self) -> np.ndarray:
        return self.multi_index() * self.h

    def offsets(self) -> np.ndarray:
        """Lattice offsets in cells, one representative per residue in (-n/2, n/2]^d."""
        n = self.n_per_axis
        r = (np.arange(n) + n // 2 - 1) % n - (n // 2 - 1)
        if self.d == 1:
            return r[:, None]
        i, j = np.meshgrid(r, r, indexing="ij")
        return np.stack([i.ravel(), j.ravel()], axis=1)

    def flat(self, idx: np.ndarray) -> np.ndarray:
        idx = np.mod(idx, self.n_per_axis)
        if self.d == 1:
            return idx[..., 0]
        return idx[..., 0] * self.n_per_axis + idx[..., 1]


# --- periodized kernel --------------------------------------------------------


def _image_shifts(d: int, L: int) -> np.ndarray:
    r = np.arange(-L, L + 1)
    if d == 1:
        return r[:, None]
    i, j = np.meshgrid(r, r, indexing="ij")
    return np.stack([i.ravel(), j.ravel()], axis=1)


def _square_exterior_factor(alpha: float) -> float:
    # int over |theta| of max(|cos|, |sin|)^alpha = 8 int_0^{pi/4} cos^alpha
    return 8.0 * integrate.quad(lambda t: math.cos(t) ** alpha, 0.0, math.pi / 4, epsabs=1e-14)[0]


def kernel_tensor(
    z: np.ndarray,
    M: float,
    alpha: float,
    cutoff: int = DEFAULT_CUTOFF,
    include_origin_image: bool = True,
    tail_correction: bool = True,
):
    """Periodized kernel tensors S(z) for offsets z of shape (n, d).

    Returns (S, tail) where S has shape (n, d, d) and already contains the
    analytic correction for the shells |m|_inf > cutoff (unless
    ``tail_correction`` is off), and ``tail`` is the size of that correction.  In d = 1 the tail is
    exact (Hurwitz zeta); in d = 2 it is the integral of the kernel over the
    exterior of the summed square of images.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = z.shape[1]
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    m = _image_shifts(d, cutoff) * M
    w = z[:, None, :] + m[None, :, :]
    r2 = np.einsum("nki,nki->nk", w, w)
    if not include_origin_image:
        origin = np.all(_image_shifts(d, cutoff) == 0, axis=1)
        r2 = r2.copy()
        r2[:, origin] = np.inf
    if np.any(r2 == 0):
        raise TorusError("kernel evaluated at z = 0 mod M")
    weight = r2 ** (-(d + 2 + alpha) / 2)
    S = np.einsum("nk,nki,nkj->nij", weight, w, w)
    if d == 1:
        u = z[:, 0] / M
        s = 1.0 + alpha
        tail = M ** (-s) * (special.zeta(s, cutoff + 1 + u) + special.zeta(s, cutoff + 1 - u))
        if tail_correction:
            S[:, 0, 0] += tail
        tail_mag = np.abs(tail)
    else:
        R = (cutoff + 0.5) * M
        t = 0.5 / M**2 * R ** (-alpha) / alpha * _square_exterior_factor(alpha)
        if tail_correction:
            S[:, 0, 0] += t
            S[:, 1, 1] += t
        tail_mag = np.full(z.shape[0], t)
    return S, tail_mag


def periodized_kernel(
    f: EnvironmentField, x, z, alpha: float, lattice_cutoff: int = DEFAULT_CUTOFF, tail_correction: bool = True
) -> float:
    """n~(x, z) = sum_m <a(x)(z + M m), (z + M m)> / |z + M m|^(d+2+alpha)."""
    if f.period is None:
        raise TorusError("field is not periodic; periodize it first")
    M = f.period
    z = np.atleast_1d(np.asarray(z, dtype=float))
    red = z / M - np.round(z / M)
    if np.all(np.abs(red) < 1e-14):
        raise TorusError("kernel offset z is 0 mod M")
    if lattice_cutoff < 0:
        raise ValueError("lattice_cutoff must be >= 0")
    S, _ = kernel_tensor(z[None, :], M, alpha, lattice_cutoff, tail_correction=tail_correction)
    a = f.evaluate(np.atleast_1d(np.asarray(x, dtype=float)))
    return float(np.sum(a * S[0]))


# --- generator ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RateMatrix:
    Q: np.ndarray
    grid: TorusGrid
    alpha: float
    meta: dict = dc_field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    def max_exit_rate(self) -> float:
        return float(np.abs(np.diag(self.Q)).max())

    def check(self) -> dict:
        Q = self.Q
        off = Q - np.diag(np.diag(Q))
        rows = Q.sum(axis=1)
        scale = self.max_exit_rate()
        offs = self.grid.offsets()
        idx = self.grid.multi_index()
        plus = self.grid.flat(idx[:, None, :] + offs[None, :, :])
        minus = self.grid.flat(idx[:, None, :] - offs[None, :, :])
        r = np.arange(self.N)[:, None]
        asym = np.abs(Q[r, plus] - Q[r, minus])
        asym[:, 0] = 0.0  # the diagonal
        return {
            "min_offdiag": float(off.min()),
            "max_row_sum": float(np.abs(rows).max()),
            "row_sum_tol": 1e-10 * scale,
            "max_asymmetry": float(asym.max()),
            "ok": bool(off.min() >= 0 and np.abs(rows).max() <= 1e-10 * scale and asym.max() <= 1e-12 * scale),
        }

    def is_irreducible(self) -> bool:
        g = csr_matrix(self.Q > 0)
        n, _ = connected_components(g, directed=True, connection="strong")
        return n == 1

    def write_triplets(self, path) -> None:
        rows, cols = np.nonzero(self.Q)
        with open(path, "w") as fh:
            fh.write("# row col rate\n")
            for i, j in zip(rows, cols):
                fh.write(f"{i} {j} {float(self.Q[i, j])!r}\n")


def diffusion_radius(d: int, h: float, rho: int = NEAR_CELLS) -> float:
    """Radius of the ball with the volume of the folded cells (origin included)."""
    r = np.arange(-rho, rho + 1)
    pts = np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1).reshape(-1, d)
    count = int((np.linalg.norm(pts, axis=1) < rho).sum())
    return h * (count / ball_volume(d)) ** (1.0 / d)


def _diffusion_stencil(sigma: np.ndarray, h: float):
    """Monotone second-difference stencil for (1/2) Sigma : D^2.

    Returns (offsets in cells, rates (N, n_offsets)).
    """
    d = sigma.shape[-1]
    if d == 1:
        r = 0.5 * sigma[:, 0, 0] / h**2
        return np.array([[1], [-1]]), np.stack([r, r], axis=1)
    s11, s22, s12 = sigma[:, 0, 0], sigma[:, 1, 1], sigma[:, 0, 1]
    a12 = np.abs(s12)
    axis1 = 0.5 * (s11 - a12) / h**2
    axis2 = 0.5 * (s22 - a12) / h**2
    diag_pp = 0.5 * np.where(s12 > 0, a12, 0.0) / h**2
    diag_pm = 0.5 * np.where(s12 < 0, a12, 0.0) / h**2
    offs = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]])
    rates = np.stack([axis1, axis1, axis2, axis2, diag_pp, diag_pp, diag_pm, diag_pm], axis=1)
    if rates.min() < -1e-14 * np.abs(rates).max():
        raise TorusError("diffusion stencil lost monotonicity")
    return offs, np.maximum(rates, 0.0)


def _average_boundary_images(S, offs, grid: TorusGrid, alpha: float, cutoff: int) -> None:
    """Offsets with a coordinate equal to n/2 have two equivalent representatives
    (+-M/2) whose truncated image sums differ in the outermost shell; average
    over all representatives so that the rates are exactly even in z."""
    half = grid.n_per_axis // 2
    on_edge = np.nonzero(np.any(offs == half, axis=1))[0]
    for k in on_edge:
        reps = [np.array([])]
        for c in offs[k]:
            opts = (c, c - grid.n_per_axis) if c == half else (c,)
            reps = [np.append(r, o) for r in reps for o in opts]
        Z = np.array(reps) * grid.h
        S_all, _ = kernel_tensor(Z, grid.M, alpha, cutoff)
        S[k] = S_all.mean(axis=0)


def build_generator(
    f: EnvironmentField,
    grid: TorusGrid,
    alpha: float,
    consts: Optional[SymbolConstants] = None,
    lattice_cutoff: int = DEFAULT_CUTOFF,
    rho: int = NEAR_CELLS,
) -> RateMatrix:
    if f.period is None:
        raise TorusError("field is not periodic; periodize it first")
    k = grid.M / f.period
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise TorusError(f"field period {f.period} does not divide grid period {grid.M}")
    if f.dim != grid.d:
        raise TorusError("field and grid dimensions differ")
    h, d, N = grid.h, grid.d, grid.N
    if rho * h > grid.M / 4:
        raise TorusError(f"grid too coarse: rho*h = {rho * h:g} > M/4 = {grid.M / 4:g}")
    if N > DENSE_FALLBACK_MAX and d == 2:
        raise TorusError(f"dense generator limited to N <= {DENSE_FALLBACK_MAX} nodes in d = 2")

    offs = grid.offsets()
    z = offs[1:] * h  # drop the zero offset (a jump by a multiple of M is no move)
    near = np.linalg.norm(offs[1:], axis=1) < rho
    S, tail = kernel_tensor(z, grid.M, alpha, lattice_cutoff)
    _average_boundary_images(S, offs[1:], grid, alpha, lattice_cutoff)
    if near.any():
        S_img, _ = kernel_tensor(z[near], grid.M, alpha, lattice_cutoff, include_origin_image=False)
        S[near] = S_img

    a = f.evaluate(grid.nodes)  # (N, d, d)
    rates = h**d * np.einsum("nij,kij->nk", a, S)
    idx = grid.multi_index()
    cols = grid.flat(idx[:, None, :] + offs[None, 1:, :])
    Q = np.zeros((N, N))
    rows = np.arange(N)[:, None]
    Q[rows, cols] = rates

    r_eff = diffusion_radius(d, h, rho)
    sigma = small_jump_covariance(a, r_eff, alpha)
    st_offs, st_rates = _diffusion_stencil(sigma, h)
    st_cols = grid.flat(idx[:, None, :] + st_offs[None, :, :])
    np.add.at(Q, (np.broadcast_to(rows, st_cols.shape), st_cols), st_rates)

    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    gen = RateMatrix(
        Q,
        grid,
        float(alpha),
        meta={"lattice_cutoff": lattice_cutoff, "rho": rho, "diffusion_radius": r_eff, "max_tail": float(tail.max())},
    )
    if not gen.is_irreducible():
        raise TorusError("rate graph is not strongly connected")
    return gen


# --- invariant density ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StationaryDensity:
    phi: np.ndarray
    residual: float
    iterations: int
    method: str

    def lp_norm(self, p: float) -> float:
        w = 1.0 / self.phi.size
        return float((np.sum(self.phi**p) * w) ** (1.0 / p))


def _normalize(phi: np.ndarray) -> np.ndarray:
    return phi / phi.mean()


def null_space_density(Q: np.ndarray) -> np.ndarray:
    """Dense solve of phi Q = 0 with mean(phi) = 1."""
    N = Q.shape[0]
    A = Q.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(N)
    b[-1] = N
    return np.linalg.solve(A, b)


def stationary_density(
    gen: RateMatrix,
    tol: float = 1e-10,
    max_iter: int = 10**6,
    check_every: int = 25,
    fallback: bool = True,
) -> StationaryDensity:
    """Power iteration phi <- phi (I + delta Q) from the uniform density."""
    Q = gen.Q
    N = Q.shape[0]
    delta = 0.9 / gen.max_exit_rate()
    P = np.eye(N) + delta * Q
    if P.min() < 0:
        raise TorusError("I + delta Q has negative entries")
    phi = np.ones(N)
    history = []
    it = 0
    while it < max_iter:
        for _ in range(check_every):
            phi = phi @ P
        it += check_every
        phi = _normalize(phi)
        res = float(np.abs(phi @ Q).max())
        history.append(res)
        if res <= tol:
            break
    else:
        if not (fallback and N <= DENSE_FALLBACK_MAX):
            raise TorusError(f"power iteration did not converge: residual history tail {history[-5:]}")
        phi = null_space_density(Q)
        res = float(np.abs(phi @ Q).max())
        if res > tol:
            raise TorusError(f"dense null-space fallback residual {res:g} > tol {tol:g}")
        return _finish(phi, res, it, "dense")
    return _finish(phi, res, it, "power")


def _finish(phi, res, it, method) -> StationaryDensity:
    if phi.min() <= 0:
        raise TorusError(f"invariant density is not strictly positive (min {phi.min():g})")
    return StationaryDensity(phi, res, it, method)


def homogenized_matrix(f: EnvironmentField, grid: TorusGrid, dens: StationaryDensity) -> np.ndarray:
    """a_bar = sum_i a(x_i) phi_i w_i."""
    a = f.evaluate(grid.nodes)
    abar = np.einsum("n,nij->ij", dens.phi, a) * grid.cell_weight
    return 0.5 * (abar + abar.T)


# --- resolvent and diagnostics ----------------------------------------------


def resolvent(gen: RateMatrix, f: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """u = (beta I - Q)^-1 f."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    A = beta * np.eye(gen.N) - gen.Q
    u = scipy.linalg.solve(A, np.asarray(f, dtype=float))
    res = np.abs(A @ u - f).max()
    if not np.isfinite(res) or res > 1e-10 * max(1.0, np.abs(f).max()) * max(1.0, beta):
        raise TorusError(f"resolvent solve residual {res:g}")
    return u


def lebesgue_norm(f: np.ndarray, p: float) -> float:
    """L^p norm under the normalized (mass one) measure."""
    return float(np.mean(np.abs(f) ** p) ** (1.0 / p))


@dataclass
class AbpReport:
    ratios: dict
    max_ratio: float
    bump_slope: float
    bump_points: list
    refinement: list = dc_field(default_factory=list)
    gamma_hat: Optional[float] = None


def default_test_functions(grid: TorusGrid, n_random: int = 4, seed: int = 0):
    """Constants, random sign fields and centred box bumps of shrinking support."""
    rng = np.random.default_rng(seed)
    N, n = grid.N, grid.n_per_axis
    out = [("const", np.ones(N))]
    for k in range(n_random):
        out.append((f"sign{k}", rng.choice([-1.0, 1.0], size=N)))
    idx = grid.multi_index()
    dist = np.abs((idx + n // 2) % n - n // 2).max(axis=1)
    half = 0
    while 2 * half + 1 <= n // 2:
        out.append((f"bump{2 * half + 1}", (dist <= half).astype(float)))
        half = 2 * half + 1 if half else 1
    return out


def abp_check(gen: RateMatrix, alpha: float, test_functions=None) -> AbpReport:
    grid = gen.grid
    d = grid.d
    if test_functions is None:
        test_functions = default_test_functions(grid)
    if not test_functions:
        raise ValueError("empty test family")
    names = [t[0] for t in test_functions]
    F = np.stack([t[1] for t in test_functions], axis=1)
    lu = scipy.linalg.lu_factor(np.eye(gen.N) - gen.Q)
    U = scipy.linalg.lu_solve(lu, F)
    ratios, bumps = {}, []
    for j, name in enumerate(names):
        f = F[:, j]
        sup = np.abs(f).max()
        if sup == 0:
            continue
        ld = lebesgue_norm(f, d)
        r = np.abs(U[:, j]).max() / (sup ** (1 - alpha / 2) * ld ** (alpha / 2))
        ratios[name] = float(r)
        if name.startswith("bump"):
            bumps.append((ld, float(np.abs(U[:, j]).max())))
    if not all(np.isfinite(v) and v > 0 for v in ratios.values()):
        raise TorusError("non-finite ABP ratio")
    slope = float("nan")
    if len(bumps) >= 2:
        x = np.log([b[0] for b in bumps])
        y = np.log([b[1] for b in bumps])
        slope = float(np.polyfit(x, y, 1)[0])
    return AbpReport(ratios, max(ratios.values()), slope, bumps)


@dataclass
class TightnessReport:
    rows: list
    c_bar: float


def tightness_check(
    f: EnvironmentField,
    grid: TorusGrid,
    dens: StationaryDensity,
    observables: Sequence,
    alpha: float,
) -> TightnessReport:
    """Empirical constant in nu(F) <= c ||F||^(1 - alpha/2d) mu(F)^(alpha/2d).

    ``observables`` is a list of (name, g) with g mapping stacked matrices to [0, 1].
    """
    a = f.evaluate(grid.nodes)
    d = grid.d
    expo = alpha / (2 * d)
    rows, best = [], 0.0
    for name, g in observables:
        v = np.asarray(g(a), dtype=float)
        if v.min() < 0 or v.max() > 1:
            raise ValueError(f"observable {name!r} leaves [0, 1]")
        nu = float(np.mean(v * dens.phi))
        mu = float(np.mean(v))
        sup = float(v.max())
        if mu == 0:
            rows.append({"name": name, "nu": nu, "mu": mu, "ratio": None})
            continue
        ratio = nu / (sup ** (1 - expo) * mu**expo)
        best = max(best, ratio)
        rows.append({"name": name, "nu": nu, "mu": mu, "ratio": ratio})
    return TightnessReport(rows, best)


def default_observables(f: EnvironmentField, grid: TorusGrid):
    a11 = f.evaluate(grid.nodes)[:, 0, 0]
    med = float(np.median(a11))
    q25 = float(np.quantile(a11, 0.25))
    return [
        ("one", lambda a: np.ones(a.shape[0])),
        ("zero", lambda a: np.zeros(a.shape[0])),
        ("a11_above_median", lambda a, m=med: (a[:, 0, 0] > m).astype(float)),
        ("a11_below_q25", lambda a, m=q25: (a[:, 0, 0] < m).astype(float)),
        ("trace_sigmoid", lambda a, m=med: 1.0 / (1.0 + np.exp(-4.0 * (np.trace(a, axis1=1, axis2=2) - m)))),
    ]


# --- pipeline --------------------------------------------------------------


@dataclass(eq=False)
class TorusResult:
    field: EnvironmentField
    grid: TorusGrid
    generator: RateMatrix
    density: StationaryDensity
    a_bar: np.ndarray
    consts: SymbolConstants


def run_pipeline(
    f: EnvironmentField,
    alpha: float,
    n_per_axis: int,
    period: Optional[float] = None,
    consts: Optional[SymbolConstants] = None,
    lattice_cutoff: int = DEFAULT_CUTOFF,
    tol: float = 1e-10,
    max_iter: int = 10**6,
) -> TorusResult:
    """Periodize (if needed), assemble the generator, solve for phi, weight a."""
    M = period if period is not None else f.period
    if M is None:
        raise TorusError("no period given and the field is not periodic")
    if f.period is None or abs(f.period - M) > 1e-12 * M:
        f = periodize(f, M)
    consts = consts or compute_constants(f.dim, alpha)
    grid = TorusGrid(f.dim, float(M), int(n_per_axis))
    gen = build_generator(f, grid, alpha, consts, lattice_cutoff)
    dens = stationary_density(gen, tol=tol, max_iter=max_iter)
    abar = homogenized_matrix(f, grid, dens)
    return TorusResult(f, grid, gen, dens, abar, consts)


def write_density_csv(grid: TorusGrid, dens: StationaryDensity, path) -> None:
    cols = ["x1", "x2"][: grid.d]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["phi"])
        for x, p in zip(grid.nodes, dens.phi):
            w.writerow([repr(float(v)) for v in x] + [repr(float(p))])
