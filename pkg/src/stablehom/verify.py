"""Experiments that tie the field, symbol, torus and Monte Carlo layers together.

Each experiment returns an :class:`ExperimentReport`; hard rows carry an
explicit tolerance and decide the pass flag, soft rows are report-only.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field as dc_field, is_dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import mc, torus
from .field import FieldSpec, matrix_norm, mollify, periodize, sample_environment
from .symbol import closed_form_values, compute_constants

METRICS_HEADER = ["experiment", "metric", "value", "tolerance", "kind", "passed"]
REPORT_SCHEMA = "stablehom.report/1"


@dataclass
class MetricRow:
    name: str
    value: float
    tolerance: Optional[float] = None
    passed: Optional[bool] = None
    hard: bool = True
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "kind": "hard" if self.hard else "soft",
            "note": self.note,
        }


@dataclass
class ExperimentReport:
    name: str
    params: dict
    rows: list = dc_field(default_factory=list)
    seeds: dict = dc_field(default_factory=dict)
    wall_time: float = 0.0
    extra: dict = dc_field(default_factory=dict)

    def hard(self, name, value, tol, passed, note=""):
        self.rows.append(MetricRow(name, float(value), None if tol is None else float(tol), bool(passed), True, note))

    def soft(self, name, value, passed=None, tol=None, note=""):
        self.rows.append(
            MetricRow(name, float(value), None if tol is None else float(tol), None if passed is None else bool(passed), False, note)
        )

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows if r.hard)

    def failures(self) -> list:
        return [r for r in self.rows if r.hard and not r.passed]

    def warnings(self) -> list:
        return [r for r in self.rows if not r.hard and r.passed is False]

    def row(self, name: str) -> MetricRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "experiment": self.name,
            "passed": self.passed,
            "params": _jsonable(self.params),
            "seeds": self.seeds,
            "wall_time_s": self.wall_time,
            "metrics": [r.to_dict() for r in self.rows],
            "extra": _jsonable(self.extra),
        }

    def write(self, out_dir) -> None:
        """report.json (full record) and metrics.csv (flat, no timing, bit-reproducible)."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        write_metrics_csv([self], os.path.join(out_dir, "metrics.csv"))


def write_metrics_csv(reports: Sequence[ExperimentReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow(
                    [
                        rep.name,
                        r.name,
                        repr(r.value),
                        "" if r.tolerance is None else repr(r.tolerance),
                        "hard" if r.hard else "soft",
                        "" if r.passed is None else int(r.passed),
                    ]
                )


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _fold(name: str, values) -> float:
    """max / min of a positive series; the 'factor' used in stability rows."""
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        return float("inf")
    return float(v.max() / v.min())


def _torus_field(spec: FieldSpec, period: float):
    f = sample_environment(spec)
    return f, periodize(f, period)


def lp_exponent(d: int, alpha: float, fraction: float) -> float:
    """fraction * 2d / (2d - alpha), in units of the integrability threshold."""
    return fraction * 2 * d / (2 * d - alpha)


# --- CLT ---------------------------------------------------------------------


def clt_experiment(
    field_spec: FieldSpec,
    alpha: float,
    xi_list: Sequence,
    t: float,
    eps_list: Sequence[float],
    mc_params: mc.McParams,
    n_per_axis: int = 128,
    period: float = 1.0,
    model_tol: float = 0.02,
    workers: int = 1,
    x0=None,
) -> ExperimentReport:
    """Empirical CF of eps X_{t / eps^alpha} against exp(-t qbar(xi)).

    A single unscaled path per stream is observed at every t / eps^alpha, so all
    scales share common random numbers.
    """
    t0 = time.perf_counter()
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing with at least 3 entries")
    d = field_spec.dim
    consts = compute_constants(d, alpha)
    f, fp = _torus_field(field_spec, period)
    res = torus.run_pipeline(fp, alpha, n_per_axis, period, consts)
    abar = res.a_bar
    rep = ExperimentReport(
        "clt",
        {
            "field": field_spec,
            "alpha": alpha,
            "xi_list": [list(np.atleast_1d(x).astype(float)) for x in xi_list],
            "t": t,
            "eps_list": eps_list,
            "mc": mc_params,
            "n_per_axis": n_per_axis,
            "period": period,
            "model_tol": model_tol,
        },
        seeds={"mc": mc_params.seed, "field": field_spec.seed},
    )
    rep.extra["a_bar"] = abar
    rep.soft("a_bar_trace", float(np.trace(abar)))

    sample_times = [t / e**alpha for e in eps_list]
    params = replace(mc_params, horizon=max(sample_times))
    x0 = np.zeros(d) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    batch = mc.simulate_batch(f, x0, params, alpha, sample_times, workers=workers)
    by_time = {float(v): j for j, v in enumerate(batch.sample_times)}

    curve = {}
    for eps, st in zip(eps_list, sample_times):
        X = eps * batch.states[:, by_time[float(st)]]
        worst = 0.0
        for xi in xi_list:
            xi = np.atleast_1d(np.asarray(xi, dtype=float))
            est = mc.empirical_cf(X - eps * x0, xi, t)
            target = math.exp(-t * float(closed_form_values(abar, xi, consts)))
            disc = abs(est.value - target)
            tag = f"eps={eps:g},xi={_fmt(xi)}"
            rep.soft(f"cf_re[{tag}]", est.value.real)
            rep.soft(f"cf_target[{tag}]", target)
            rep.soft(f"cf_se[{tag}]", est.std_error)
            tol = 3 * est.std_error + model_tol
            if eps == eps_list[-1]:
                rep.hard(f"cf_discrepancy[{tag}]", disc, tol, disc <= tol)
            else:
                rep.soft(f"cf_discrepancy[{tag}]", disc, disc <= tol, tol)
            worst = max(worst, disc)
        curve[eps] = worst
    prev = None
    for eps in eps_list:
        if prev is not None:
            rep.soft(f"discrepancy_nonincreasing[eps={eps:g}]", curve[eps], curve[eps] <= curve[prev])
        prev = eps
    rep.soft("mean_accepted_jumps", float(batch.accepted.mean()))
    rep.wall_time = time.perf_counter() - t0
    return rep


def _fmt(xi) -> str:
    return "(" + ",".join(f"{v:g}" for v in np.atleast_1d(xi)) + ")"


# --- density -----------------------------------------------------------------


def density_experiment(
    field_spec: FieldSpec,
    alpha: float,
    grid_series: Sequence[int],
    period_series: Sequence[float],
    tol: float = 1e-10,
) -> ExperimentReport:
    """Positivity and L^p stability of the invariant density across grids and periods.

    Grid sizes refer to the first period; longer periods scale n_per_axis so the
    mesh width stays fixed.
    """
    t0 = time.perf_counter()
    if len(grid_series) < 2 or len(period_series) < 2:
        raise ValueError("grid_series and period_series need at least 2 entries")
    d = field_spec.dim
    consts = compute_constants(d, alpha)
    f = sample_environment(field_spec)
    p_in = lp_exponent(d, alpha, 0.9)
    p_out = lp_exponent(d, alpha, 1.1)
    rep = ExperimentReport(
        "density",
        {"field": field_spec, "alpha": alpha, "grid_series": list(grid_series), "period_series": list(period_series), "tol": tol},
        seeds={"field": field_spec.seed},
    )
    M0 = float(period_series[0])
    lp, abars, cbars = {}, {}, {}
    for M in period_series:
        fp = periodize(f, M)
        for n0 in grid_series:
            n = int(round(n0 * M / M0))
            n += n % 2
            res = torus.run_pipeline(fp, alpha, n, M, consts, tol=tol)
            tag = f"M={M:g},n={n}"
            phi = res.density.phi
            rep.hard(f"min_phi[{tag}]", phi.min(), 0.0, phi.min() > 0)
            rep.hard(f"residual[{tag}]", res.density.residual, tol, res.density.residual <= tol)
            lp[(M, n0)] = res.density.lp_norm(p_in)
            rep.soft(f"lp_norm_p{p_in:.4g}[{tag}]", lp[(M, n0)])
            rep.soft(f"lp_norm_p{p_out:.4g}[{tag}]", res.density.lp_norm(p_out), note="above the integrability threshold")
            abars[(M, n0)] = res.a_bar
            rep.soft(f"a_bar_trace[{tag}]", float(np.trace(res.a_bar)))
            tr = torus.tightness_check(fp, res.grid, res.density, torus.default_observables(fp, res.grid), alpha)
            cbars[(M, n0)] = tr.c_bar
            rep.soft(f"tightness_c_bar[{tag}]", tr.c_bar)
    fac = _fold("lp", list(lp.values()))
    rep.hard(f"lp_norm_fold_p{p_in:.4g}", fac, 2.0, fac <= 2.0)
    # grid refinement of a_bar at the first period: delta should halve (soft)
    deltas = []
    for n_a, n_b in zip(grid_series, grid_series[1:]):
        deltas.append(float(matrix_norm(abars[(M0, n_b)] - abars[(M0, n_a)])))
        rep.soft(f"a_bar_delta[n={n_a}->{n_b}]", deltas[-1])
    for k in range(1, len(deltas)):
        if deltas[k - 1] > 1e-13:
            ratio = deltas[k] / deltas[k - 1]
            rep.soft(f"a_bar_delta_ratio[{k}]", ratio, 0.25 <= ratio <= 1.0, note="halving within factor 2")
    cf = _fold("c", list(cbars.values()))
    rep.soft("tightness_c_bar_fold", cf, cf <= 2.0, 2.0)
    for M in period_series[1:]:
        dm = float(matrix_norm(abars[(M, grid_series[-1])] - abars[(M0, grid_series[-1])]))
        rep.soft(f"a_bar_period_delta[M={M0:g}->{M:g}]", dm)
    rep.wall_time = time.perf_counter() - t0
    return rep


# --- ABP ---------------------------------------------------------------------


def abp_experiment(
    field_spec: FieldSpec,
    alpha: float,
    grid_series: Sequence[int],
    period: float = 1.0,
    n_seeds: int = 5,
    slope_tol: float = 0.15,
    factor: float = 2.0,
) -> ExperimentReport:
    """Resolvent ratio ||R f||_inf / (||f||_inf^(1-alpha/2) ||f||_d^(alpha/2)) across grids and seeds."""
    t0 = time.perf_counter()
    d = field_spec.dim
    consts = compute_constants(d, alpha)
    seeds = [field_spec.seed + k for k in range(n_seeds)]
    rep = ExperimentReport(
        "abp",
        {"field": field_spec, "alpha": alpha, "grid_series": list(grid_series), "period": period, "n_seeds": n_seeds},
        seeds={"fields": seeds},
    )
    maxr = {}
    for s in seeds:
        fp = periodize(sample_environment(replace(field_spec, seed=s)), period)
        for n in grid_series:
            grid = torus.TorusGrid(d, float(period), int(n))
            gen = torus.build_generator(fp, grid, alpha, consts)
            ab = torus.abp_check(gen, alpha)
            tag = f"seed={s},n={n}"
            c1 = ab.ratios["const"]
            rep.hard(f"const_ratio_minus_one[{tag}]", abs(c1 - 1.0), 1e-10, abs(c1 - 1.0) <= 1e-10)
            rep.hard(f"max_ratio[{tag}]", ab.max_ratio, None, np.isfinite(ab.max_ratio) and ab.max_ratio > 0)
            lo = alpha / 2 - slope_tol
            rep.hard(f"bump_slope[{tag}]", ab.bump_slope, lo, ab.bump_slope >= lo)
            maxr[(s, n)] = ab.max_ratio
            others = [v for k, v in ab.ratios.items() if k != "const"]
            if others:
                rep.soft(f"max_nonconst_ratio[{tag}]", max(others))
    for s in seeds:
        fac = _fold("g", [maxr[(s, n)] for n in grid_series])
        rep.hard(f"grid_fold[seed={s}]", fac, factor, fac <= factor)
    for n in grid_series:
        fac = _fold("s", [maxr[(s, n)] for s in seeds])
        rep.hard(f"seed_fold[n={n}]", fac, factor, fac <= factor)
    rep.wall_time = time.perf_counter() - t0
    return rep


# --- Birkhoff ----------------------------------------------------------------


def birkhoff_experiment(
    field_spec: FieldSpec,
    alpha: float,
    xi,
    t: float,
    eps_list: Sequence[float],
    n_streams: int,
    mc_params: mc.McParams,
    n_per_axis: int = 128,
    period: float = 1.0,
    rel_tol: float = 0.05,
    workers: int = 1,
) -> ExperimentReport:
    """Time average eps^alpha int q(a(X_s), xi) ds over t / eps^alpha against t qbar(xi)."""
    t0 = time.perf_counter()
    d = field_spec.dim
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    consts = compute_constants(d, alpha)
    f, fp = _torus_field(field_spec, period)
    res = torus.run_pipeline(fp, alpha, n_per_axis, period, consts)
    target = t * float(closed_form_values(res.a_bar, xi, consts))
    rep = ExperimentReport(
        "birkhoff",
        {
            "field": field_spec,
            "alpha": alpha,
            "xi": xi.tolist(),
            "t": t,
            "eps_list": list(eps_list),
            "n_streams": n_streams,
            "mc": mc_params,
            "n_per_axis": n_per_axis,
            "period": period,
        },
        seeds={"mc": mc_params.seed, "field": field_spec.seed},
    )
    rep.soft("target", target)
    stds = []
    for eps in eps_list:
        ints = mc.birkhoff_integrals(f, t, eps, replace(mc_params, n_paths=n_streams), alpha, workers=workers)
        vals = closed_form_values(ints, xi, consts)
        mean = float(vals.mean())
        std = float(vals.std(ddof=1)) if n_streams > 1 else 0.0
        stds.append(std)
        rel = abs(mean - target) / abs(target) if target else abs(mean)
        tag = f"eps={eps:g}"
        rep.soft(f"mean[{tag}]", mean)
        rep.soft(f"std[{tag}]", std)
        if eps == eps_list[-1]:
            rep.hard(f"rel_error[{tag}]", rel, rel_tol, rel <= rel_tol)
        else:
            rep.soft(f"rel_error[{tag}]", rel, rel <= rel_tol, rel_tol)
    for k in range(1, len(stds)):
        rep.soft(f"std_decreasing[eps={eps_list[k]:g}]", stds[k], stds[k] <= stds[k - 1])
    rep.wall_time = time.perf_counter() - t0
    return rep


# --- mollification -----------------------------------------------------------


def mollification_experiment(
    field_spec: FieldSpec,
    alpha: float,
    r_list: Sequence[float],
    n_per_axis: int = 128,
    period: float = 1.0,
    factor: float = 2.0,
) -> ExperimentReport:
    """abar(I_r a) along decreasing r; r = 0 means the unmollified field."""
    t0 = time.perf_counter()
    r_list = [float(r) for r in r_list]
    if len(r_list) < 3 or any(b >= a for a, b in zip(r_list, r_list[1:])):
        raise ValueError("r_list must be strictly decreasing with at least 3 entries")
    d = field_spec.dim
    consts = compute_constants(d, alpha)
    _, fp = _torus_field(field_spec, period)
    rep = ExperimentReport(
        "mollification",
        {"field": field_spec, "alpha": alpha, "r_list": r_list, "n_per_axis": n_per_axis, "period": period},
        seeds={"field": field_spec.seed},
    )
    abars = []
    for r in r_list:
        g = mollify(fp, r) if r > 0 else fp
        res = torus.run_pipeline(g, alpha, n_per_axis, period, consts)
        abars.append(res.a_bar)
        rep.soft(f"a_bar_trace[r={r:g}]", float(np.trace(res.a_bar)))
    deltas = [float(matrix_norm(b - a)) for a, b in zip(abars, abars[1:])]
    steps = [a - b for a, b in zip(r_list, r_list[1:])]
    for k, dl in enumerate(deltas):
        rep.soft(f"delta[{r_list[k]:g}->{r_list[k + 1]:g}]", dl)
        rep.soft(f"r_step[{r_list[k]:g}->{r_list[k + 1]:g}]", steps[k])
    for k in range(1, len(deltas)):
        ok = deltas[k] <= factor * deltas[k - 1] + 1e-13
        rep.hard(f"cauchy[{k}]", deltas[k], factor * deltas[k - 1], ok)
        rep.soft(f"delta_shrinks[{k}]", deltas[k], deltas[k] <= deltas[k - 1])
    # linear extrapolation to r -> 0+ from the two smallest positive radii
    pos = [(r, a) for r, a in zip(r_list, abars) if r > 0]
    if len(pos) >= 2:
        (r1, a1), (r2, a2) = pos[-2], pos[-1]
        a0 = a2 - (a1 - a2) * r2 / (r1 - r2)
        rep.extra["a_bar_extrapolated"] = a0
        rep.soft("a_bar_extrapolated_trace", float(np.trace(a0)))
    rep.extra["a_bar_series"] = abars
    rep.wall_time = time.perf_counter() - t0
    return rep
