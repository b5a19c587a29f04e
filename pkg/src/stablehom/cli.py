"""Command-line entry point: TOML configs, deterministic seeding, structured output.

Seeds: every module seed not fixed in the config is derived from the master seed
by ``derive_seed(master, name)`` = first 8 bytes (little endian) of
BLAKE2b("stablehom:<master>:<name>").  Names in use: "field", "mc", "constants", "probes".
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field as dc_field, fields, replace
from typing import Optional

import numpy as np

from . import mc, torus, verify
from .field import FAMILIES, FieldError, FieldSpec, sample_environment, validate_bounds
from .symbol import closed_form_values, compute_constants, symbol_quadrature

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger("stablehom")

SCHEMA_VERSION = 1
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
COMMANDS = (
    "constants",
    "field-check",
    "torus",
    "simulate",
    "verify-clt",
    "verify-density",
    "verify-abp",
    "verify-birkhoff",
    "verify-mollify",
)


class ConfigError(ValueError):
    pass


def derive_seed(master: int, name: str) -> int:
    h = hashlib.blake2b(f"stablehom:{int(master)}:{name}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


# --- config sections ---------------------------------------------------------


@dataclass
class FieldSection:
    dim: int = 1
    family: str = "trig-phase"
    base_matrix: Optional[list] = None
    mode_count: int = 1
    frequency_scale: float = 1.0
    amplitude_budget: float = 0.5
    trace_floor: float = 0.25
    norm_cap: float = 2.0
    seed: Optional[int] = None
    frequencies: Optional[list] = None
    amplitudes: Optional[list] = None
    phases: Optional[list] = None


@dataclass
class SymbolSection:
    alpha: float = 1.0
    quad_tol: float = 1e-8


@dataclass
class TorusSection:
    period: float = 1.0
    n_per_axis: int = 128
    lattice_cutoff: int = 8
    tol: float = 1e-10
    max_iter: int = 1_000_000
    grid_series: list = dc_field(default_factory=lambda: [64, 128, 256])
    period_series: list = dc_field(default_factory=lambda: [1.0, 2.0])


@dataclass
class McSection:
    r_min: float = 1e-3
    gaussian_correction: bool = True
    horizon: float = 1.0
    substep_max: Optional[float] = None
    dominating_eig: Optional[float] = None
    n_paths: int = 100_000
    seed: Optional[int] = None
    x0: Optional[list] = None


@dataclass
class ExperimentSection:
    name: str = ""
    t: float = 1.0
    eps_list: list = dc_field(default_factory=lambda: [0.5, 0.2, 0.1, 0.05])
    xi_list: Optional[list] = None  # default: |xi| in {0.5, 1, 2} along the first axis
    xi: Optional[list] = None
    model_tol: float = 0.02
    n_streams: int = 100
    rel_tol: float = 0.05
    r_list: list = dc_field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025, 0.0])
    n_seeds: int = 5
    slope_tol: float = 0.15
    factor: float = 2.0
    n_record_paths: int = 10


SECTIONS = {
    "field": FieldSection,
    "symbol": SymbolSection,
    "torus": TorusSection,
    "mc": McSection,
    "experiment": ExperimentSection,
}
TOP_LEVEL = ("schema_version", "seed", "output_dir")
REQUIRED = {"field": ("family",), "symbol": ("alpha",)}


@dataclass
class ExperimentConfig:
    schema_version: int
    seed: int
    output_dir: str
    field: FieldSection
    symbol: SymbolSection
    torus: TorusSection
    mc: McSection
    experiment: ExperimentSection

    def field_spec(self) -> FieldSpec:
        f = self.field
        seed = f.seed if f.seed is not None else derive_seed(self.seed, "field")
        return FieldSpec(
            dim=f.dim,
            family=f.family,
            base_matrix=f.base_matrix,
            mode_count=f.mode_count,
            frequency_scale=f.frequency_scale,
            amplitude_budget=f.amplitude_budget,
            trace_floor=f.trace_floor,
            norm_cap=f.norm_cap,
            seed=seed,
            frequencies=f.frequencies,
            amplitudes=f.amplitudes,
            phases=f.phases,
        )

    def mc_params(self) -> mc.McParams:
        m = self.mc
        seed = m.seed if m.seed is not None else derive_seed(self.seed, "mc")
        return mc.McParams(
            r_min=m.r_min,
            gaussian_correction=m.gaussian_correction,
            horizon=m.horizon,
            substep_max=m.substep_max,
            dominating_eig=m.dominating_eig,
            seed=seed,
            n_paths=m.n_paths,
        )

    def x0(self):
        return np.zeros(self.field.dim) if self.mc.x0 is None else np.asarray(self.mc.x0, dtype=float)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in TOP_LEVEL}
        for name in SECTIONS:
            out[name] = asdict(getattr(self, name))
        out["derived_seeds"] = {"field": self.field_spec().seed, "mc": self.mc_params().seed}
        return out


def _suggest(key: str, options) -> str:
    """Nearest option, also matching against the underscore-separated parts of each name."""

    def score(o):
        return max(difflib.SequenceMatcher(None, key, part).ratio() for part in [o, *o.split("_")])

    return max(options, key=score)


def _check_type(path: str, value, default, annotation: str):
    if value is None:
        return value
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) or "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or annotation == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if "list" in annotation or isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array, got {value!r}")
        return value
    return value


def _build_section(name: str, table: dict):
    cls = SECTIONS[name]
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    known = {f.name: f for f in fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(
                f"unknown key '{name}.{key}' (nearest key: '{name}.{_suggest(key, list(known))}')"
            )
    obj = cls()
    for key, value in table.items():
        f = known[key]
        setattr(obj, key, _check_type(f"{name}.{key}", value, getattr(obj, key), str(f.type)))
    return obj


def _range(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _validate(cfg: ExperimentConfig) -> None:
    f, s, t, m, e = cfg.field, cfg.symbol, cfg.torus, cfg.mc, cfg.experiment
    _range(cfg.schema_version == SCHEMA_VERSION, "schema_version", f"unsupported version (expected {SCHEMA_VERSION})")
    _range(0 <= cfg.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
    _range(f.dim in (1, 2), "field.dim", "must be 1 or 2")
    _range(f.family in FAMILIES, "field.family", f"must be one of {', '.join(FAMILIES)}")
    _range(f.mode_count >= 0, "field.mode_count", "must be >= 0")
    _range(f.frequency_scale > 0, "field.frequency_scale", "must be > 0")
    _range(f.amplitude_budget >= 0, "field.amplitude_budget", "must be >= 0")
    _range(0 < f.trace_floor < f.norm_cap, "field.trace_floor", "need 0 < trace_floor < norm_cap")
    _range(f.seed is None or 0 <= f.seed < 2**64, "field.seed", "must be an unsigned 64-bit integer")
    _range(0 < s.alpha < 2, "symbol.alpha", f"must lie in (0, 2), got {s.alpha}")
    _range(0 < s.quad_tol < 1e-2, "symbol.quad_tol", "must lie in (0, 1e-2)")
    _range(t.period > 0, "torus.period", "must be > 0")
    _range(t.n_per_axis >= 4 and t.n_per_axis % 2 == 0, "torus.n_per_axis", "must be even and >= 4")
    _range(t.lattice_cutoff >= 1, "torus.lattice_cutoff", "must be >= 1")
    _range(0 < t.tol < 1e-3, "torus.tol", "must lie in (0, 1e-3)")
    _range(t.max_iter >= 1, "torus.max_iter", "must be >= 1")
    _range(all(isinstance(n, int) and n >= 4 and n % 2 == 0 for n in t.grid_series), "torus.grid_series", "entries must be even integers >= 4")
    _range(all(isinstance(p, (int, float)) and p > 0 for p in t.period_series), "torus.period_series", "entries must be > 0")
    _range(m.r_min > 0, "mc.r_min", "must be > 0")
    _range(m.horizon > 0, "mc.horizon", "must be > 0")
    _range(m.substep_max is None or 0 < m.substep_max <= m.horizon, "mc.substep_max", "need 0 < substep_max <= horizon")
    _range(m.dominating_eig is None or m.dominating_eig > 0, "mc.dominating_eig", "must be > 0")
    _range(m.n_paths >= 1, "mc.n_paths", "must be >= 1")
    _range(m.seed is None or 0 <= m.seed < 2**64, "mc.seed", "must be an unsigned 64-bit integer")
    _range(m.x0 is None or len(m.x0) == f.dim, "mc.x0", "length must equal field.dim")
    _range(e.t > 0, "experiment.t", "must be > 0")
    _range(all(isinstance(x, (int, float)) and x > 0 for x in e.eps_list), "experiment.eps_list", "entries must be > 0")
    if e.xi_list is None:
        e.xi_list = [[s_] + [0.0] * (f.dim - 1) for s_ in (0.5, 1.0, 2.0)]
    _range(all(isinstance(x, list) and len(x) == f.dim for x in e.xi_list), "experiment.xi_list", "entries must be arrays of length field.dim")
    _range(e.xi is None or len(e.xi) == f.dim, "experiment.xi", "length must equal field.dim")
    _range(e.model_tol >= 0, "experiment.model_tol", "must be >= 0")
    _range(e.n_streams >= 1, "experiment.n_streams", "must be >= 1")
    _range(e.rel_tol > 0, "experiment.rel_tol", "must be > 0")
    _range(all(isinstance(r, (int, float)) and r >= 0 for r in e.r_list), "experiment.r_list", "entries must be >= 0")
    _range(e.n_seeds >= 1, "experiment.n_seeds", "must be >= 1")
    _range(e.factor >= 1, "experiment.factor", "must be >= 1")
    _range(e.n_record_paths >= 1, "experiment.n_record_paths", "must be >= 1")
    try:
        cfg.field_spec().check()
    except FieldError as exc:
        raise ConfigError(f"field: {exc}") from None


def parse_config(source: str, is_text: Optional[bool] = None) -> ExperimentConfig:
    """Parse a TOML file path or TOML text into a validated config."""
    if is_text is None:
        is_text = "\n" in source or "=" in source or not os.path.exists(source)
    if is_text:
        text = source
    else:
        try:
            with open(source, "rb") as fh:
                text = fh.read().decode()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    options = list(TOP_LEVEL) + list(SECTIONS)
    for key in raw:
        if key not in options:
            raise ConfigError(f"unknown key '{key}' (nearest key: '{_suggest(key, options)}')")
    for sec, keys in REQUIRED.items():
        if sec not in raw:
            raise ConfigError(f"missing required section '[{sec}]'")
        for k in keys:
            if k not in raw[sec]:
                raise ConfigError(f"missing required key '{sec}.{k}'")
    sections = {name: _build_section(name, raw.get(name, {})) for name in SECTIONS}
    cfg = ExperimentConfig(
        schema_version=_check_type("schema_version", raw.get("schema_version", SCHEMA_VERSION), 0, "int"),
        seed=_check_type("seed", raw.get("seed", 0), 0, "int"),
        output_dir=_check_type("output_dir", raw.get("output_dir", "runs"), "", "str"),
        **sections,
    )
    _validate(cfg)
    return cfg


# --- subcommands ---------------------------------------------------------------


def _cmd_constants(cfg: ExperimentConfig, out: str, workers: int) -> verify.ExperimentReport:
    d, alpha = cfg.field.dim, cfg.symbol.alpha
    consts = compute_constants(d, alpha, cfg.symbol.quad_tol)
    rep = verify.ExperimentReport("constants", {"d": d, "alpha": alpha, "quad_tol": cfg.symbol.quad_tol})
    rep.soft("C_dalpha", consts.C)
    rep.soft("c_dalpha", consts.c)
    rep.soft("K_master", consts.K_master)
    # self-check: closed form against direct quadrature on a fixed SPD matrix
    rng = np.random.default_rng(derive_seed(cfg.seed, "constants"))
    g = rng.standard_normal((d, d))
    a = g @ g.T + np.eye(d)
    xi = rng.standard_normal(d)
    qc = float(closed_form_values(a, xi, consts))
    qq = symbol_quadrature(a, xi, alpha, cfg.symbol.quad_tol).value
    rel = abs(qc - qq) / abs(qq)
    tol = 10 * cfg.symbol.quad_tol
    rep.hard("closed_vs_quadrature_rel", rel, tol, rel <= tol)
    with open(os.path.join(out, "constants.json"), "w") as fh:
        json.dump({"schema": "stablehom.constants/1", **consts.to_dict()}, fh, indent=2)
    return rep


def _cmd_field_check(cfg, out, workers):
    spec = cfg.field_spec()
    f = sample_environment(spec)
    b = validate_bounds(f, n_probes=1000, seed=derive_seed(cfg.seed, "probes") % 2**32)
    rep = verify.ExperimentReport("field-check", {"field": spec})
    rep.hard("min_trace", b.min_trace, f.trace_floor, b.min_trace >= f.trace_floor - 1e-12)
    rep.hard("max_norm", b.max_norm, f.norm_cap, b.max_norm <= f.norm_cap + 1e-12)
    rep.hard("min_eigenvalue", b.min_eig, 0.0, b.min_eig >= -1e-10)
    rep.soft("eigen_bound", f.eigen_bound())
    with open(os.path.join(out, "field.json"), "w") as fh:
        json.dump(
            {
                "schema": "stablehom.field/1",
                "base": f.base.tolist(),
                "amplitudes": f.amplitudes.tolist(),
                "frequencies": f.frequencies.tolist(),
                "phases": f.phases.tolist(),
                "trace_floor": f.trace_floor,
                "norm_cap": f.norm_cap,
            },
            fh,
            indent=2,
        )
    return rep


def _cmd_torus(cfg, out, workers):
    spec = cfg.field_spec()
    t = cfg.torus
    consts = compute_constants(spec.dim, cfg.symbol.alpha, cfg.symbol.quad_tol)
    res = torus.run_pipeline(
        sample_environment(spec), cfg.symbol.alpha, t.n_per_axis, t.period, consts, t.lattice_cutoff, t.tol, t.max_iter
    )
    rep = verify.ExperimentReport("torus", {"field": spec, "torus": t, "alpha": cfg.symbol.alpha})
    phi = res.density.phi
    chk = res.generator.check()
    rep.hard("generator_max_row_sum", chk["max_row_sum"], None, chk["ok"])
    rep.hard("residual", res.density.residual, t.tol, res.density.residual <= t.tol)
    rep.hard("min_phi", phi.min(), 0.0, phi.min() > 0)
    rep.soft("max_phi", phi.max())
    rep.soft("iterations", res.density.iterations)
    for i in range(spec.dim):
        for j in range(i, spec.dim):
            rep.soft(f"a_bar[{i + 1}{j + 1}]", res.a_bar[i, j])
    rep.extra["a_bar"] = res.a_bar
    torus.write_density_csv(res.grid, res.density, os.path.join(out, "density.csv"))
    if res.grid.N <= 1024:
        res.generator.write_triplets(os.path.join(out, "generator.txt"))
    return rep


def _cmd_simulate(cfg, out, workers):
    spec = cfg.field_spec()
    f = sample_environment(spec)
    params = cfg.mc_params()
    e = cfg.experiment
    alpha = cfg.symbol.alpha
    x0 = cfg.x0()
    rec = min(e.n_record_paths, params.n_paths)
    paths_csv = os.path.join(out, "paths.csv")
    for k, p in enumerate(mc.simulate_paths(f, x0, params, alpha, range(rec))):
        p.write_csv(paths_csv, append=k > 0)
    batch = mc.simulate_batch(f, x0, params, alpha, [e.t], workers=workers)
    ests = [mc.empirical_cf(batch.states[:, 0] - x0, xi, e.t) for xi in e.xi_list]
    mc.write_cf_json(ests, os.path.join(out, "cf.json"))
    rep = verify.ExperimentReport("simulate", {"field": spec, "mc": params, "alpha": alpha, "t": e.t})
    for est in ests:
        tag = ",".join(f"{v:g}" for v in est.xi)
        rep.soft(f"cf_re[xi=({tag})]", est.value.real)
        rep.soft(f"cf_im[xi=({tag})]", est.value.imag)
        bound = 1 + 3 * est.std_error
        rep.hard(f"cf_modulus[xi=({tag})]", abs(est.value), bound, abs(est.value) <= bound)
    n_acc, n_rej = int(batch.accepted.sum()), int(batch.rejected.sum())
    rep.soft("acceptance_rate", n_acc / max(n_acc + n_rej, 1))
    return rep


def _cmd_verify_clt(cfg, out, workers):
    e = cfg.experiment
    return verify.clt_experiment(
        cfg.field_spec(), cfg.symbol.alpha, e.xi_list, e.t, e.eps_list, cfg.mc_params(),
        cfg.torus.n_per_axis, cfg.torus.period, e.model_tol, workers, cfg.x0(),
    )


def _cmd_verify_density(cfg, out, workers):
    return verify.density_experiment(
        cfg.field_spec(), cfg.symbol.alpha, cfg.torus.grid_series, cfg.torus.period_series, cfg.torus.tol
    )


def _cmd_verify_abp(cfg, out, workers):
    e = cfg.experiment
    return verify.abp_experiment(
        cfg.field_spec(), cfg.symbol.alpha, cfg.torus.grid_series, cfg.torus.period, e.n_seeds, e.slope_tol, e.factor
    )


def _cmd_verify_birkhoff(cfg, out, workers):
    e = cfg.experiment
    xi = e.xi if e.xi is not None else e.xi_list[0]
    return verify.birkhoff_experiment(
        cfg.field_spec(), cfg.symbol.alpha, xi, e.t, e.eps_list, e.n_streams, cfg.mc_params(),
        cfg.torus.n_per_axis, cfg.torus.period, e.rel_tol, workers,
    )


def _cmd_verify_mollify(cfg, out, workers):
    e = cfg.experiment
    return verify.mollification_experiment(
        cfg.field_spec(), cfg.symbol.alpha, e.r_list, cfg.torus.n_per_axis, cfg.torus.period, e.factor
    )


HANDLERS = {
    "constants": _cmd_constants,
    "field-check": _cmd_field_check,
    "torus": _cmd_torus,
    "simulate": _cmd_simulate,
    "verify-clt": _cmd_verify_clt,
    "verify-density": _cmd_verify_density,
    "verify-abp": _cmd_verify_abp,
    "verify-birkhoff": _cmd_verify_birkhoff,
    "verify-mollify": _cmd_verify_mollify,
}


def run(cfg: ExperimentConfig, command: str, out_dir: Optional[str] = None, workers: int = 1) -> int:
    """Run one subcommand and write its artifacts; returns the exit status."""
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(verify._jsonable(cfg.to_dict()), fh, indent=2)
    try:
        rep = HANDLERS[command](cfg, out, workers)
    except Exception as exc:  # structured record for any module failure
        _write_error(out, command, exc, EXIT_RUNTIME)
        log.error("%s failed: %s", command, exc)
        return EXIT_RUNTIME
    rep.write(out)
    for r in rep.warnings():
        log.warning("soft check %s = %r did not hold", r.name, r.value)
    for r in rep.failures():
        log.error("hard check %s = %r failed (tolerance %r)", r.name, r.value, r.tolerance)
    return EXIT_PASS if rep.passed else EXIT_FAIL


def _write_error(out: str, command: str, exc: BaseException, code: int) -> None:
    rec = {
        "schema": "stablehom.error/1",
        "command": command,
        "exit_code": code,
        "error_type": type(exc).__name__,
        "message": str(exc),
        "traceback": traceback.format_exception_only(type(exc), exc),
    }
    with open(os.path.join(out, "error.json"), "w") as fh:
        json.dump(rec, fh, indent=2)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablehom", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="master seed override (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=1, help="worker threads for path simulation")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, is_text=False)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed: must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed)
        if args.workers < 1:
            raise ConfigError("workers: must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _write_error(args.out, args.command, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    code = run(cfg, args.command, args.out, args.workers)
    log.info("%s finished with exit code %d", args.command, code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
