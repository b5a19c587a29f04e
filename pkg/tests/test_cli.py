import csv
import json
import math
import os

import numpy as np
import pytest

from stablehom import cli, verify

MINIMAL = """
[field]
family = "constant"
[symbol]
alpha = 1.0
"""

SMALL_SIM = """
seed = 5
[field]
family = "trig-phase"
base_matrix = [[1.0]]
frequencies = [[6.283185307179586]]
amplitudes = [[[0.5]]]
phases = [0.0]
[symbol]
alpha = 1.0
[torus]
n_per_axis = 32
grid_series = [16, 32]
[mc]
r_min = 1e-2
n_paths = 500
[experiment]
eps_list = [0.5, 0.3, 0.2]
n_streams = 8
n_record_paths = 2
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_config_fills_defaults():
    cfg = cli.parse_config(MINIMAL)
    assert cfg.field.family == "constant" and cfg.symbol.alpha == 1.0
    assert cfg.torus.n_per_axis == 128 and cfg.mc.r_min == 1e-3 and cfg.mc.n_paths == 100_000
    assert cfg.experiment.xi_list == [[0.5], [1.0], [2.0]]
    assert cfg.mc_params().seed == cli.derive_seed(0, "mc")


def test_alpha_out_of_range_names_key():
    with pytest.raises(cli.ConfigError, match="symbol.alpha"):
        cli.parse_config(MINIMAL.replace("alpha = 1.0", "alpha = 2.5"))


def test_unknown_key_suggests_nearest():
    with pytest.raises(cli.ConfigError) as ei:
        cli.parse_config(MINIMAL + "[torus]\ngird = 3\n")
    msg = str(ei.value)
    assert "torus.gird" in msg and "torus.grid_series" in msg


def test_missing_section_and_key():
    with pytest.raises(cli.ConfigError, match=r"\[symbol\]"):
        cli.parse_config('[field]\nfamily = "constant"\n')
    with pytest.raises(cli.ConfigError, match="field.family"):
        cli.parse_config("[field]\ndim = 1\n[symbol]\nalpha = 1.0\n")
    with pytest.raises(cli.ConfigError, match="mc.n_paths"):
        cli.parse_config(MINIMAL + '[mc]\nn_paths = "many"\n')


def test_two_dimensional_default_xi():
    cfg = cli.parse_config(MINIMAL.replace('[field]', '[field]\ndim = 2\nnorm_cap = 3.0'))
    assert cfg.experiment.xi_list[0] == [0.5, 0.0]


def test_derive_seed_documented_hash():
    import hashlib

    h = hashlib.blake2b(b"stablehom:7:mc", digest_size=8).digest()
    assert cli.derive_seed(7, "mc") == int.from_bytes(h, "little")
    assert cli.derive_seed(7, "mc") != cli.derive_seed(7, "field") != cli.derive_seed(8, "field")


def test_constants_command(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    out = tmp_path / "out"
    assert cli.main(["constants", "--config", cfg, "--out", str(out)]) == 0
    rec = json.loads((out / "constants.json").read_text())
    assert rec["K_master"] == pytest.approx(math.pi, rel=1e-8)
    assert (out / "config.json").exists() and (out / "report.json").exists()
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == verify.METRICS_HEADER


def test_torus_constant_field_uniform_density(tmp_path):
    cfg = write(tmp_path, MINIMAL + "[torus]\nn_per_axis = 16\n")
    out = tmp_path / "out"
    assert cli.main(["torus", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "density.csv")))
    assert rows[0] == ["x1", "phi"] and len(rows) == 17
    np.testing.assert_allclose([float(r[1]) for r in rows[1:]], 1.0, atol=1e-10)
    assert (out / "generator.txt").exists()


def test_field_check_and_simulate(tmp_path):
    cfg = write(tmp_path, SMALL_SIM)
    out = tmp_path / "out"
    assert cli.main(["field-check", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads((out / "field.json").read_text())["schema"] == "stablehom.field/1"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out), "--workers", "2"]) == 0
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0] == "path_id,time,x1,mark"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"0", "1"}
    cf = json.loads((out / "cf.json").read_text())
    assert cf["schema"] == "stablehom.cf/1" and len(cf["estimates"]) == 3


@pytest.mark.parametrize("command", ["verify-density", "verify-birkhoff", "verify-mollify", "verify-clt"])
def test_verify_commands_run(tmp_path, command):
    cfg = write(tmp_path, SMALL_SIM)
    out = tmp_path / command
    code = cli.main([command, "--config", cfg, "--out", str(out)])
    assert code in (0, 1)
    rec = json.loads((out / "report.json").read_text())
    assert rec["passed"] == (code == 0)


def test_exit_codes(tmp_path):
    bad = write(tmp_path, MINIMAL.replace("alpha = 1.0", "alpha = 2.5"), "bad.toml")
    out = tmp_path / "bad"
    assert cli.main(["constants", "--config", bad, "--out", str(out)]) == 2
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == 2 and "symbol.alpha" in err["message"]
    # a valid config whose torus grid is too coarse for the near-origin stencil: runtime error
    fine = SMALL_SIM.replace("n_per_axis = 32", "n_per_axis = 4")
    cfg = write(tmp_path, fine, "rt.toml")
    out = tmp_path / "rt"
    assert cli.main(["torus", "--config", cfg, "--out", str(out)]) == 3
    assert json.loads((out / "error.json").read_text())["exit_code"] == 3
    assert cli.main(["constants", "--config", str(tmp_path / "missing.toml"), "--out", str(out)]) == 2


def test_seed_override_changes_derived_seeds(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    out = tmp_path / "o"
    cli.main(["constants", "--config", cfg, "--out", str(out), "--seed", "99"])
    rec = json.loads((out / "config.json").read_text())
    assert rec["seed"] == 99 and rec["derived_seeds"]["mc"] == cli.derive_seed(99, "mc")


def test_metrics_rerun_identical_across_workers(tmp_path):
    cfg = write(tmp_path, SMALL_SIM)
    outs = []
    for k, w in enumerate(["1", "4", "1"]):
        out = tmp_path / f"r{k}"
        cli.main(["verify-birkhoff", "--config", cfg, "--out", str(out), "--workers", w])
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_golden_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(root)):
        cli.parse_config(os.path.join(root, name), is_text=False)
