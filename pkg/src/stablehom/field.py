"""Stationary matrix-valued coefficient fields.

Every field is stored as a finite cosine expansion

    a(x) = base + sum_k A_k cos(k_x . x + phi_k)

with symmetric amplitude matrices ``A_k``.  That representation makes shifts,
periodization (frequency snapping) and mollification (multiplication of each
mode by the Fourier coefficient of the bump) exact operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

FAMILIES = ("trig-phase", "gaussian-spectral", "constant")

# slack for floating comparisons against the deterministic bounds
_BOUND_SLACK = 1e-12


class FieldError(ValueError):
    """Raised when a field cannot be built within its declared bounds."""


def matrix_norm(a: np.ndarray) -> np.ndarray:
    """Entrywise l1 norm sum_ij |a_ij| over the last two axes."""
    return np.abs(a).sum(axis=(-2, -1))


@dataclass(frozen=True)
class FieldSpec:
    dim: int = 1
    family: str = "trig-phase"
    base_matrix: Optional[Sequence] = None
    mode_count: int = 1
    frequency_scale: float = 1.0
    amplitude_budget: float = 0.5
    trace_floor: float = 0.25
    norm_cap: float = 2.0
    seed: int = 0
    # explicit modes; when given they replace the random draw (phases stay random
    # unless also given)
    frequencies: Optional[Sequence] = None
    amplitudes: Optional[Sequence] = None
    phases: Optional[Sequence] = None

    def base(self) -> np.ndarray:
        if self.base_matrix is None:
            return np.eye(self.dim)
        b = np.atleast_2d(np.asarray(self.base_matrix, dtype=float))
        if b.shape != (self.dim, self.dim):
            raise FieldError(f"base_matrix must be {self.dim}x{self.dim}, got {b.shape}")
        return b

    def check(self) -> None:
        """Worst-case admissibility of the spec (no sampling involved)."""
        d = self.dim
        if d not in (1, 2):
            raise FieldError(f"dimension must be 1 or 2, got {d}")
        if self.family not in FAMILIES:
            raise FieldError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.mode_count < 0:
            raise FieldError("mode_count must be >= 0")
        if not 0 < self.trace_floor < self.norm_cap:
            raise FieldError(
                f"need 0 < trace_floor < norm_cap, got {self.trace_floor}, {self.norm_cap}"
            )
        b = self.base()
        if not np.allclose(b, b.T, rtol=0, atol=0):
            raise FieldError("base_matrix must be symmetric")
        budget = 0.0 if self.family == "constant" else self.amplitude_budget
        if budget < 0:
            raise FieldError("amplitude_budget must be >= 0")
        tr = float(np.trace(b))
        if tr < self.trace_floor + budget * d - _BOUND_SLACK:
            raise FieldError(
                f"Tr(base)={tr:g} < trace_floor + amplitude_budget*d = "
                f"{self.trace_floor + budget * d:g}"
            )
        lmin = float(np.linalg.eigvalsh(b)[0])
        if lmin < budget - _BOUND_SLACK:
            raise FieldError(
                f"lambda_min(base)={lmin:g} < amplitude_budget={budget:g}; "
                "a(x) could leave the non-negative cone"
            )
        nb = float(matrix_norm(b))
        if nb + budget > self.norm_cap + _BOUND_SLACK:
            raise FieldError(
                f"||base|| + amplitude_budget = {nb + budget:g} > norm_cap={self.norm_cap:g}"
            )


@dataclass(frozen=True, eq=False)
class EnvironmentField:
    """Immutable cosine-expansion field; ``evaluate`` is pure."""

    spec: FieldSpec
    base: np.ndarray
    amplitudes: np.ndarray  # (K, d, d)
    frequencies: np.ndarray  # (K, d)
    phases: np.ndarray  # (K,)
    trace_floor: float
    norm_cap: float
    period: Optional[float] = None
    mollification_radius: Optional[float] = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    @property
    def mode_count(self) -> int:
        return self.phases.shape[0]

    def evaluate(self, x) -> np.ndarray:
        """a(x) for points ``x`` of shape (..., d); returns (..., d, d)."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        lead = x.shape[:-1]
        pts = x.reshape(-1, self.dim)
        out = np.broadcast_to(self.base, (pts.shape[0], self.dim, self.dim)).copy()
        if self.mode_count:
            c = np.cos(pts @ self.frequencies.T + self.phases)
            out += np.einsum("nk,kij->nij", c, self.amplitudes)
        return out.reshape(lead + (self.dim, self.dim))

    __call__ = evaluate

    def eigen_bound(self) -> float:
        """Worst-case upper bound on the largest eigenvalue of a(x)."""
        lmax = float(np.linalg.eigvalsh(self.base)[-1])
        if self.mode_count:
            lmax += float(np.abs(np.linalg.eigvalsh(self.amplitudes)).max(axis=1).sum())
        return lmax

    def is_periodic(self, M: float, atol: float = 1e-9) -> bool:
        if self.mode_count == 0:
            return True
        n = self.frequencies * M / (2 * math.pi)
        return bool(np.all(np.abs(n - np.round(n)) <= atol))

    def arrays(self):
        """Contiguous arrays for the compiled simulation kernels."""
        return (
            np.ascontiguousarray(self.base, dtype=np.float64),
            np.ascontiguousarray(self.amplitudes, dtype=np.float64),
            np.ascontiguousarray(self.frequencies, dtype=np.float64),
            np.ascontiguousarray(self.phases, dtype=np.float64),
        )


def _random_symmetric(rng: np.random.Generator, d: int) -> np.ndarray:
    g = rng.standard_normal((d, d))
    s = g + g.T
    return s / matrix_norm(s)


def sample_environment(spec: FieldSpec) -> EnvironmentField:
    """Build a field from its spec; bounds hold by worst-case accounting."""
    spec.check()
    d = spec.dim
    base = spec.base()
    rng = np.random.default_rng(spec.seed)

    if spec.family == "constant":
        amps = np.zeros((0, d, d))
        freqs = np.zeros((0, d))
        phases = np.zeros(0)
    elif spec.frequencies is not None:
        freqs = np.asarray(spec.frequencies, dtype=float).reshape(-1, d)
        K = freqs.shape[0]
        if spec.amplitudes is None:
            amps = np.stack([_unit_amplitude(rng, d) * spec.amplitude_budget / K for _ in range(K)])
        else:
            amps = np.asarray(spec.amplitudes, dtype=float).reshape(K, d, d)
        phases = (
            rng.uniform(0.0, 2 * math.pi, size=K)
            if spec.phases is None
            else np.asarray(spec.phases, dtype=float).reshape(K)
        )
    else:
        K = spec.mode_count
        # phases first so they depend only on (seed, K)
        phases = rng.uniform(0.0, 2 * math.pi, size=K)
        if spec.family == "trig-phase":
            mags = spec.frequency_scale * (1.0 + rng.uniform(0.0, 1.0, size=K))
            freqs = mags[:, None] * _directions(rng, K, d)
            weights = np.full(K, 1.0 / max(K, 1))
        else:
            freqs = spec.frequency_scale * rng.standard_normal((K, d))
            w = np.abs(rng.standard_normal(K)) + 1e-3
            weights = w / w.sum()
        amps = np.stack([_unit_amplitude(rng, d) * spec.amplitude_budget * weights[k] for k in range(K)]) if K else np.zeros((0, d, d))

    if amps.shape[0] and not np.allclose(amps, np.swapaxes(amps, 1, 2), rtol=0, atol=0):
        raise FieldError("amplitude matrices must be symmetric")
    total = float(matrix_norm(amps).sum()) if amps.shape[0] else 0.0
    if total > spec.amplitude_budget + _BOUND_SLACK and spec.family != "constant":
        raise FieldError(
            f"sum of amplitude norms {total:g} exceeds amplitude_budget={spec.amplitude_budget:g}"
        )
    return EnvironmentField(
        spec=spec,
        base=base,
        amplitudes=amps,
        frequencies=freqs,
        phases=phases,
        trace_floor=spec.trace_floor,
        norm_cap=spec.norm_cap,
    )


def _unit_amplitude(rng: np.random.Generator, d: int) -> np.ndarray:
    if d == 1:
        return np.ones((1, 1))
    return _random_symmetric(rng, d)


def _directions(rng: np.random.Generator, K: int, d: int) -> np.ndarray:
    if d == 1:
        return np.ones((K, 1))
    ang = rng.uniform(0.0, 2 * math.pi, size=K)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def shift(f: EnvironmentField, y) -> EnvironmentField:
    """Translated field s(x) = f(x + y)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if f.mode_count == 0:
        return f
    return replace(f, phases=f.phases + f.frequencies @ y, meta=dict(f.meta))


# --- mollification -----------------------------------------------------------


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def _bump_mass(d: int) -> float:
    if d == 1:
        return integrate.quad(lambda s: float(_bump(s)), -1, 1, epsabs=1e-15, epsrel=1e-13)[0]
    return 2 * math.pi * integrate.quad(lambda s: s * float(_bump(s)), 0, 1, epsabs=1e-15, epsrel=1e-13)[0]


def mollifier(x, r: float, d: int) -> np.ndarray:
    """Unit-mass bump j_r(x) = r^-d j(x/r), j supported on the unit ball; x has shape (..., d)."""
    x = np.asarray(x, dtype=float)
    rad = np.linalg.norm(x, axis=-1)
    return _bump(rad / r) / (_bump_mass(d) * r**d)


def mollifier_fourier(k_norm: float, r: float, d: int) -> float:
    """Fourier coefficient  int j_r(x) cos(k.x) dx  of the radial bump."""
    w = k_norm * r
    if w == 0:
        return 1.0
    if d == 1:
        val = 2 * integrate.quad(lambda s: float(_bump(s)) * math.cos(w * s), 0, 1, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
    else:
        val = 2 * math.pi * integrate.quad(
            lambda s: s * float(_bump(s)) * special.j0(w * s), 0, 1, epsabs=1e-15, epsrel=1e-12, limit=200
        )[0]
    return val / _bump_mass(d)


def mollify(f: EnvironmentField, r: float) -> EnvironmentField:
    """I_r(a) = r I + j_r * a, computed mode by mode."""
    if r <= 0:
        raise FieldError("mollification radius must be > 0")
    d = f.dim
    scale = np.array([mollifier_fourier(float(np.linalg.norm(k)), r, d) for k in f.frequencies])
    amps = f.amplitudes * scale[:, None, None] if f.mode_count else f.amplitudes
    prev = f.mollification_radius or 0.0
    return replace(
        f,
        base=f.base + r * np.eye(d),
        amplitudes=amps,
        trace_floor=f.trace_floor + r * d,
        norm_cap=f.norm_cap + r * d,
        mollification_radius=prev + r,
        meta={**f.meta, "mollifier_scale": scale.tolist()},
    )


# --- periodization -----------------------------------------------------------


def periodize(f: EnvironmentField, M: float, scan_points: int = 2001) -> EnvironmentField:
    """Snap every frequency onto (2 pi / M) Z^d so the field is exactly M-periodic.

    The sup-distance to the original field over the inner box of side M - sqrt(M)
    is stored in ``meta["inner_box_sup_distance"]``.
    """
    if M <= 0:
        raise FieldError("period must be > 0")
    if f.spec.family not in ("trig-phase", "constant", "gaussian-spectral"):
        raise FieldError(f"cannot periodize family {f.spec.family!r}")
    step = 2 * math.pi / M
    freqs = np.round(f.frequencies / step) * step if f.mode_count else f.frequencies
    g = replace(f, frequencies=freqs, period=float(M), meta=dict(f.meta))
    # amplitudes are untouched, so the worst-case bounds are unchanged; keep the guard
    rep = validate_bounds(g, n_probes=256, seed=0)
    if not rep.passed:
        raise FieldError("periodization broke the trace/norm bounds")
    inner = M - math.sqrt(M)
    g.meta["inner_box_sup_distance"] = inner_box_distance(f, g, inner, scan_points)
    g.meta["inner_box_side"] = inner
    return g


def inner_box_distance(f: EnvironmentField, g: EnvironmentField, side: float, n: int = 2001) -> float:
    if side <= 0:
        return 0.0
    if f.dim == 1:
        pts = np.linspace(-side / 2, side / 2, n)[:, None]
    else:
        m = max(int(math.sqrt(n)) * 4, 16)
        s = np.linspace(-side / 2, side / 2, m)
        pts = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    return float(matrix_norm(f.evaluate(pts) - g.evaluate(pts)).max())


# --- diagnostics -------------------------------------------------------------


@dataclass(frozen=True)
class BoundsReport:
    min_trace: float
    max_norm: float
    min_eig: float
    n_probes: int
    passed: bool


def validate_bounds(f: EnvironmentField, n_probes: int = 1000, seed: int = 0, box: float = 100.0) -> BoundsReport:
    """Probe a(x) at random points; violations are reported, never raised."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    side = f.period if f.period is not None else box
    pts = rng.uniform(0.0, side, size=(n_probes, f.dim))
    a = f.evaluate(pts)
    tr = np.trace(a, axis1=-2, axis2=-1)
    nrm = matrix_norm(a)
    eig = np.linalg.eigvalsh(a)[:, 0]
    floor = f.mollification_radius or 0.0
    ok = (
        tr.min() >= f.trace_floor - _BOUND_SLACK
        and nrm.max() <= f.norm_cap + _BOUND_SLACK
        and eig.min() >= floor - 1e-10
        and np.allclose(a, np.swapaxes(a, -1, -2), rtol=0, atol=0)
    )
    return BoundsReport(float(tr.min()), float(nrm.max()), float(eig.min()), n_probes, bool(ok))


def box_average(
    f: EnvironmentField,
    observable: Callable[[np.ndarray], np.ndarray],
    M: float,
    grid_n: int,
) -> float:
    """Midpoint-rule average of observable(a(y)) over Q_M = [-M/2, M/2]^d.

    ``observable`` receives a stack of matrices (n, d, d) and returns n values.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    h = M / grid_n
    s = -M / 2 + h * (np.arange(grid_n) + 0.5)
    if f.dim == 1:
        pts = s[:, None]
    else:
        pts = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    vals = np.asarray(observable(f.evaluate(pts)), dtype=float)
    return float(vals.mean())


def golden_cosine_spec(M: float = 1.0, amplitude: float = 0.5, seed: int = 0, **kw) -> FieldSpec:
    """a(x) = 1 + amplitude cos(2 pi x / M) in d = 1 (pass ``phases`` to shift it)."""
    defaults = dict(trace_floor=0.25, norm_cap=2.0, phases=[0.0])
    defaults.update(kw)
    return FieldSpec(
        dim=1,
        family="trig-phase",
        base_matrix=[[1.0]],
        mode_count=1,
        amplitude_budget=amplitude,
        frequencies=[[2 * math.pi / M]],
        amplitudes=[[[amplitude]]],
        seed=seed,
        **defaults,
    )
