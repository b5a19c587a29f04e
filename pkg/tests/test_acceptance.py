"""Desk-scale acceptance suite, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import os
import time

import numpy as np
import pytest

from stablehom import cli, torus
from stablehom.field import FieldSpec, golden_cosine_spec, periodize, sample_environment
from stablehom.symbol import closed_form_values, compute_constants, master_integral, symbol_quadrature

from conftest import random_spd

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def run_config(name, command, out, workers=1, **overrides):
    cfg = cli.parse_config(os.path.join(CONFIGS, name), is_text=False)
    for path, value in overrides.items():
        sec, key = path.split("__")
        setattr(getattr(cfg, sec), key, value)
    code = cli.run(cfg, command, str(out), workers)
    with open(os.path.join(out, "report.json")) as fh:
        return code, json.load(fh)


def metrics(report, prefix):
    return {m["name"]: m for m in report["metrics"] if m["name"].startswith(prefix)}


def test_symbol_cross_validation(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for d in (1, 2):
        for alpha in (0.5, 1.0, 1.5):
            consts = compute_constants(d, alpha)
            for _ in range(20):
                a = random_spd(rng, d)
                xi = rng.standard_normal(d) * 2
                qc = float(closed_form_values(a, xi, consts))
                qq = symbol_quadrature(a, xi, alpha).value
                worst = max(worst, abs(qc - qq) / abs(qq))
    k_err = abs(master_integral(1.0) - math.pi) / math.pi
    dt = time.perf_counter() - t0
    ok = worst <= 1e-7 and k_err <= 1e-8 and dt < 30
    assert criterion(1, "symbol cross-validation", ok, f"max rel {worst:.2e}, K(1) rel {k_err:.2e}, {dt:.1f}s")


def test_generator_spectral_consistency(criterion):
    t0 = time.perf_counter()
    n, alpha = 128, 1.0
    f = periodize(sample_environment(FieldSpec(dim=1, family="constant", base_matrix=[[1.0]])), 1.0)
    grid = torus.TorusGrid(1, 1.0, n)
    gen = torus.build_generator(f, grid, alpha)
    consts = compute_constants(1, alpha)
    x = grid.nodes[:, 0]
    worst = 0.0
    for k in range(1, n // 8 + 1):
        v = np.exp(2j * math.pi * k * x)
        lam = (gen.Q @ v) / v
        q = float(closed_form_values(np.eye(1), [2 * math.pi * k], consts))
        worst = max(worst, float(np.max(np.abs(-lam.real - q))) / q, float(np.max(np.abs(lam.imag))) / q)
    dt = time.perf_counter() - t0
    ok = worst <= 0.03 and dt < 10
    assert criterion(2, "generator spectral consistency", ok, f"max rel {worst:.2e} over k=1..{n // 8}, {dt:.1f}s")


def test_stationary_density_correctness(criterion):
    t0 = time.perf_counter()
    golden = periodize(sample_environment(golden_cosine_spec()), 1.0)
    res = torus.run_pipeline(golden, 1.0, 128)
    resid = res.density.residual
    const = sample_environment(FieldSpec(dim=1, family="constant", base_matrix=[[1.0]]))
    uni = torus.run_pipeline(const, 1.0, 128, period=1.0)
    tv = 0.5 * float(np.abs(uni.density.phi - 1.0).mean())
    gen8 = torus.build_generator(golden, torus.TorusGrid(1, 1.0, 8), 1.0)
    dens8 = torus.stationary_density(gen8, tol=1e-12, fallback=False)
    dense = torus.null_space_density(gen8.Q)
    gap = float(np.abs(dens8.phi - dense).max())
    dt = time.perf_counter() - t0
    ok = resid <= 1e-10 and tv <= 1e-10 and gap <= 1e-8 and dt < 10
    assert criterion(3, "stationary density", ok, f"residual {resid:.1e}, uniform TV {tv:.1e}, N=8 gap {gap:.1e}, {dt:.1f}s")


def test_density_positivity_and_lp(criterion, tmp_path):
    t0 = time.perf_counter()
    code, rep = run_config("golden_density.toml", "verify-density", tmp_path)
    dt = time.perf_counter() - t0
    mins = metrics(rep, "min_phi")
    fold = next(iter(metrics(rep, "lp_norm_fold").values()))
    ok = code == 0 and all(m["value"] > 0 for m in mins.values()) and fold["value"] <= 2.0 and dt < 120
    detail = f"min phi {min(m['value'] for m in mins.values()):.3f} over {len(mins)} grids, Lp fold {fold['value']:.4f}, {dt:.1f}s"
    assert criterion(4, "invariant density positivity and Lp", ok, detail)


def test_abp_inequality(criterion, tmp_path):
    t0 = time.perf_counter()
    code, rep = run_config("abp.toml", "verify-abp", tmp_path)
    dt = time.perf_counter() - t0
    const = metrics(rep, "const_ratio_minus_one")
    grid = metrics(rep, "grid_fold")
    seed = metrics(rep, "seed_fold")
    ok = (
        code == 0
        and len(const) == 10
        and all(m["value"] <= 1e-10 for m in const.values())
        and all(m["value"] <= 2.0 for m in {**grid, **seed}.values())
        and dt < 120
    )
    detail = (
        f"grid fold {max(m['value'] for m in grid.values()):.3f}, seed fold {max(m['value'] for m in seed.values()):.3f}, "
        f"|const-1| {max(m['value'] for m in const.values()):.1e}, {dt:.1f}s"
    )
    assert criterion(5, "ABP inequality", ok, detail)


def test_birkhoff_torus_agreement(criterion, tmp_path):
    t0 = time.perf_counter()
    code, rep = run_config("golden_birkhoff.toml", "verify-birkhoff", tmp_path)
    dt = time.perf_counter() - t0
    rel = rep["metrics"][[m["name"] for m in rep["metrics"]].index("rel_error[eps=0.05]")]["value"]
    ok = code == 0 and rel <= 0.05 and dt < 300
    assert criterion(6, "Birkhoff/torus agreement", ok, f"rel error {rel:.4f} at eps=0.05 with 100 streams, {dt:.1f}s")


def test_quenched_clt(criterion, tmp_path):
    t0 = time.perf_counter()
    code, rep = run_config("golden_clt.toml", "verify-clt", tmp_path)
    dt = time.perf_counter() - t0
    hard = {m["name"]: m for m in rep["metrics"] if m["kind"] == "hard"}
    soft_bad = [m["name"] for m in rep["metrics"] if m["name"].startswith("discrepancy_nonincreasing") and m["passed"] is False]
    worst = max(m["value"] - m["tolerance"] for m in hard.values())
    ok = code == 0 and len(hard) == 3 and all(m["passed"] for m in hard.values()) and dt < 600
    detail = f"max(discrepancy - tol) {worst:+.4f} at eps=0.05, {dt:.1f}s"
    if soft_bad:
        detail += f"; soft warning: {', '.join(soft_bad)}"
    assert criterion(7, "quenched CLT surrogate", ok, detail)


REDUCED = [
    ("golden_clt.toml", "verify-clt", {"mc__n_paths": 2000, "torus__n_per_axis": 64}),
    ("golden_birkhoff.toml", "verify-birkhoff", {"experiment__n_streams": 20, "torus__n_per_axis": 64}),
    ("golden_density.toml", "verify-density", {"torus__grid_series": [32, 64]}),
    ("golden_mollify.toml", "verify-mollify", {"torus__n_per_axis": 64}),
    ("abp.toml", "verify-abp", {"torus__grid_series": [32, 64], "experiment__n_seeds": 2}),
    ("simulate_2d.toml", "simulate", {"mc__n_paths": 2000}),
    ("constants_d2.toml", "constants", {}),
]


def test_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    bad = []
    for name, command, overrides in REDUCED:
        blobs = []
        for k, workers in enumerate((1, 4, 1, 4)):
            out = tmp_path / f"{command}-{k}"
            run_config(name, command, out, workers, **overrides)
            blobs.append((out / "metrics.csv").read_bytes())
        if any(b != blobs[0] for b in blobs):
            bad.append(command)
    dt = time.perf_counter() - t0
    ok = not bad
    detail = f"{len(REDUCED)} reduced suites x (1,4,1,4) workers, {dt:.1f}s" + (f"; differing: {bad}" if bad else "")
    assert criterion(8, "determinism", ok, detail)
