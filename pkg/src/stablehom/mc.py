"""Monte Carlo simulation of the stable-like process by thinning.

Jumps with |z| >= r_min are proposed from the isotropic dominating kernel
Lambda_op |z|^(-d-alpha) dz and accepted with probability <a(x) s, s> / Lambda_op
(s the jump direction).  The jumps below r_min are replaced by a Gaussian
increment with the matching covariance, frozen at the left endpoint of each
event interval and refreshed at least every ``substep_max``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .field import EnvironmentField
from .symbol import SymbolConstants, closed_form_values, sphere_area

_MASK = (1 << 64) - 1


class SimulationError(RuntimeError):
    pass


def stream_key(seed: int, path: int) -> int:
    """64-bit key of the RNG stream for one path."""
    s = _splitmix(int(seed) & _MASK)
    return _splitmix((s ^ ((int(path) * 0x9E3779B97F4A7C15 + 1) & _MASK)) & _MASK)


def _splitmix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_keys(seed: int, paths: Iterable[int]) -> np.ndarray:
    return np.array([stream_key(seed, p) for p in paths], dtype=np.uint64)


@dataclass(frozen=True)
class McParams:
    r_min: float = 1e-3
    gaussian_correction: bool = True
    horizon: float = 1.0
    substep_max: Optional[float] = None  # default: 1e-2 * horizon
    dominating_eig: Optional[float] = None  # default: worst-case eigenvalue bound of the field
    seed: int = 0
    n_paths: int = 1000

    def resolved(self, f: EnvironmentField) -> "McParams":
        sub = self.substep_max if self.substep_max is not None else 1e-2 * self.horizon
        lam = self.dominating_eig if self.dominating_eig is not None else f.eigen_bound()
        p = replace(self, substep_max=float(sub), dominating_eig=float(lam))
        p.validate(f)
        return p

    def validate(self, f: EnvironmentField) -> None:
        if not self.r_min > 0:
            raise SimulationError("r_min must be > 0")
        if self.horizon <= 0:
            raise SimulationError("horizon must be > 0")
        if self.substep_max is not None and not 0 < self.substep_max <= self.horizon:
            raise SimulationError("need 0 < substep_max <= horizon")
        if self.dominating_eig is not None and self.dominating_eig < f.eigen_bound() - 1e-12:
            raise SimulationError(
                f"dominating_eig={self.dominating_eig:g} below the field eigenvalue bound {f.eigen_bound():g}"
            )
        if self.n_paths < 1:
            raise SimulationError("n_paths must be >= 1")

    def total_rate(self, d: int, alpha: float) -> float:
        return self.dominating_eig * sphere_area(d) * self.r_min ** (-alpha) / alpha


@dataclass(frozen=True, eq=False)
class JumpPath:
    times: np.ndarray
    states: np.ndarray
    jump_marks: np.ndarray  # 0 diffusive/sampling event, 1 accepted, 2 rejected proposal
    accepted: int
    rejected: int
    rng_stream_id: int
    horizon: float

    def value_at(self, t: float) -> np.ndarray:
        """Right-continuous path value X_t."""
        if t < 0 or t > self.horizon + 1e-12:
            raise SimulationError(f"time {t} outside [0, {self.horizon}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[i]

    def write_csv(self, path, append: bool = False) -> None:
        d = self.states.shape[1]
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(["path_id", "time"] + [f"x{i + 1}" for i in range(d)] + ["mark"])
            for t, x, m in zip(self.times, self.states, self.jump_marks):
                w.writerow([self.rng_stream_id, repr(float(t))] + [repr(float(v)) for v in x] + [int(m)])


def _check_status(stats: np.ndarray) -> None:
    bad = stats[:, 2] == _kernels.STATUS_DOMINATION
    if bad.any():
        raise SimulationError(
            f"dominating-kernel violation on {int(bad.sum())} path(s): acceptance probability left [0, 1]"
        )
    if (stats[:, 2] != _kernels.STATUS_OK).any():
        raise SimulationError("internal path buffer overflow")


def simulate_path(f: EnvironmentField, x0, params: McParams, stream: int, alpha: float) -> JumpPath:
    """One recorded path; ``stream`` is the path index within the run seed."""
    p = params.resolved(f)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    key = np.uint64(stream_key(p.seed, stream))
    arrs = f.arrays()
    common = (alpha, p.dominating_eig, p.r_min, p.gaussian_correction, p.substep_max, p.horizon)
    samp = np.empty((0, f.dim))
    integ = np.empty((f.dim, f.dim))
    empty = np.empty(0)
    _, _, n_ev, status, _ = _kernels.run_path(
        key, x0, *arrs, *common, empty, samp, integ, 0.0, empty, np.empty((0, f.dim)), np.empty(0, dtype=np.int8)
    )
    if status == _kernels.STATUS_DOMINATION:
        raise SimulationError("dominating-kernel violation: acceptance probability left [0, 1]")
    rt = np.empty(n_ev)
    rx = np.empty((n_ev, f.dim))
    rm = np.empty(n_ev, dtype=np.int8)
    acc, rej, n2, status, _ = _kernels.run_path(key, x0, *arrs, *common, empty, samp, integ, 0.0, rt, rx, rm)
    if status != _kernels.STATUS_OK or n2 != n_ev:
        raise SimulationError("path replay mismatch")
    return JumpPath(rt, rx, rm, int(acc), int(rej), int(stream), p.horizon)


def simulate_paths(f, x0, params: McParams, alpha: float, streams: Optional[Sequence[int]] = None):
    streams = range(params.n_paths) if streams is None else streams
    return [simulate_path(f, x0, params, s, alpha) for s in streams]


def _chunks(n: int, workers: int):
    workers = max(1, int(workers))
    size = max(1, math.ceil(n / workers))
    return [(i, min(n, i + size)) for i in range(0, n, size)]


@dataclass(frozen=True, eq=False)
class BatchResult:
    states: np.ndarray  # (n_paths, n_times, d)
    integrals: np.ndarray  # (n_paths, d, d): int_0^horizon a(X_s) ds
    accepted: np.ndarray
    rejected: np.ndarray
    sample_times: np.ndarray


def simulate_batch(
    f: EnvironmentField,
    x0,
    params: McParams,
    alpha: float,
    sample_times: Sequence[float] = (),
    streams: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> BatchResult:
    """States at ``sample_times`` and a(X)-time-integrals for many paths.

    Paths are split into ``workers`` contiguous chunks run on threads; each path
    only reads its own stream, so the output does not depend on ``workers``.
    """
    p = params.resolved(f)
    st = np.asarray(sorted(float(s) for s in sample_times), dtype=float)
    if st.size and (st.min() < 0 or st.max() > p.horizon + 1e-12):
        raise SimulationError("sample times must lie within [0, horizon]")
    ids = np.arange(p.n_paths) if streams is None else np.asarray(streams)
    keys = stream_keys(p.seed, ids)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = f.dim
    n = keys.shape[0]
    states = np.zeros((n, st.size, d))
    integ = np.zeros((n, d, d))
    stats = np.zeros((n, 3), dtype=np.int64)
    arrs = f.arrays()
    common = (alpha, p.dominating_eig, p.r_min, p.gaussian_correction, p.substep_max, p.horizon)

    def work(lo_hi):
        lo, hi = lo_hi
        _kernels.run_batch(keys[lo:hi], x0, *arrs, *common, st, states[lo:hi], integ[lo:hi], stats[lo:hi])

    chunks = _chunks(n, workers)
    if len(chunks) == 1:
        work(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            list(ex.map(work, chunks))
    _check_status(stats)
    return BatchResult(states, integ, stats[:, 0], stats[:, 1], st)


def scale_path(path: JumpPath, eps: float, alpha: float, target_horizon: Optional[float] = None) -> JumpPath:
    """(T_eps zeta)(t) = eps zeta(t / eps^alpha): times * eps^alpha, states * eps."""
    if eps <= 0:
        raise SimulationError("eps must be > 0")
    c = eps**alpha
    if target_horizon is not None and path.horizon * c < target_horizon * (1 - 1e-12):
        raise SimulationError(
            f"source horizon {path.horizon:g} < target horizon / eps^alpha = {target_horizon / c:g}"
        )
    return replace(path, times=path.times * c, states=path.states * eps, horizon=path.horizon * c)


@dataclass(frozen=True)
class CfEstimate:
    xi: tuple
    t: float
    value: complex
    std_error: float
    n_paths: int

    def to_dict(self) -> dict:
        return {
            "xi": list(self.xi),
            "t": self.t,
            "re": self.value.real,
            "im": self.value.imag,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
        }


def empirical_cf(paths, xi, t: float) -> CfEstimate:
    """Mean of exp(i xi . X_t); ``paths`` is a list of JumpPath or an (n, d) array of X_t."""
    if isinstance(paths, np.ndarray):
        X = np.atleast_2d(paths)
    else:
        paths = list(paths)
        if not paths:
            raise SimulationError("empty path list")
        X = np.stack([p.value_at(t) for p in paths])
    if X.shape[0] == 0:
        raise SimulationError("empty path list")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    n = X.shape[0]
    if not np.any(xi):
        return CfEstimate(tuple(xi.tolist()), float(t), complex(1.0, 0.0), 0.0, n)
    ph = X @ xi
    re, im = np.cos(ph), np.sin(ph)
    val = complex(re.mean(), im.mean())
    se = math.sqrt((re.var(ddof=1) + im.var(ddof=1)) / n) if n > 1 else float("inf")
    return CfEstimate(tuple(xi.tolist()), float(t), val, se, n)


def write_cf_json(estimates: Sequence[CfEstimate], path) -> None:
    with open(path, "w") as fh:
        json.dump({"schema": "stablehom.cf/1", "estimates": [e.to_dict() for e in estimates]}, fh, indent=2)


def birkhoff_integrals(
    f: EnvironmentField,
    t: float,
    eps: float,
    params: McParams,
    alpha: float,
    streams: Optional[Sequence[int]] = None,
    workers: int = 1,
    x0=None,
) -> np.ndarray:
    """eps^alpha int_0^{t/eps^alpha} a(X_s) ds per stream, shape (n, d, d).

    The Birkhoff functional for any xi is the closed-form symbol of this matrix,
    by linearity of q in a.
    """
    horizon = t / eps**alpha
    p = replace(params, horizon=horizon)
    x0 = np.zeros(f.dim) if x0 is None else x0
    res = simulate_batch(f, x0, p, alpha, (), streams, workers)
    return res.integrals * eps**alpha


def birkhoff_average(
    f: EnvironmentField,
    xi,
    t: float,
    eps: float,
    consts: SymbolConstants,
    params: McParams,
    stream: int,
    x0=None,
) -> float:
    """eps^alpha int_0^{t/eps^alpha} q(a(X_s), xi) ds along one path."""
    m = birkhoff_integrals(f, t, eps, params, consts.alpha, [stream], 1, x0)[0]
    return float(closed_form_values(m, np.atleast_1d(np.asarray(xi, dtype=float)), consts))


def environment_samples(f: EnvironmentField, path: JumpPath, sample_times: Sequence[float]) -> list:
    """eta_t evaluated at the origin, i.e. a(X_t)."""
    return [f.evaluate(path.value_at(t)) for t in sample_times]


@dataclass(frozen=True)
class ExitEstimate:
    value: float
    std_error: float
    n: int
    radius: float


def exit_time_estimate(
    f: EnvironmentField,
    x0,
    radius: float,
    params: McParams,
    alpha: float,
    streams: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> ExitEstimate:
    """E[exp(-tau_B(x0, radius))] = P(tau < independent Exp(1) clock)."""
    if radius <= 0:
        raise SimulationError("radius must be > 0")
    p = params.resolved(f)
    ids = np.arange(p.n_paths) if streams is None else np.asarray(streams)
    keys = stream_keys(p.seed, ids)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = keys.shape[0]
    out = np.zeros(n, dtype=np.int64)
    stats = np.zeros((n, 3), dtype=np.int64)
    arrs = f.arrays()

    def work(lo_hi):
        lo, hi = lo_hi
        _kernels.run_exit_batch(
            keys[lo:hi], x0, *arrs, alpha, p.dominating_eig, p.r_min, p.gaussian_correction,
            p.substep_max, float(radius), out[lo:hi], stats[lo:hi],
        )

    chunks = _chunks(n, workers)
    if len(chunks) == 1:
        work(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            list(ex.map(work, chunks))
    _check_status(stats)
    v = float(out.mean())
    se = math.sqrt(v * (1 - v) / n) if n > 1 else float("inf")
    return ExitEstimate(v, se, n, float(radius))


def gamma_lower_bound(consts: SymbolConstants, norm_cap: float, C_d: float = 1.0) -> float:
    """(1 - e^-t)/2 with t = (2 C(d) Lambda (d C + c))^-1; C(d) is not computable here."""
    t = 1.0 / (2 * C_d * norm_cap * (consts.d * consts.C + consts.c))
    return 0.5 * (1 - math.exp(-t))
