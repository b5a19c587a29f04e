import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stablehom import _kernels, mc
from stablehom.field import FieldSpec, golden_cosine_spec, sample_environment, shift
from stablehom.symbol import closed_form_values, compute_constants, sphere_area

GOLDEN_ABAR = math.sqrt(3) / 2


def const(d=1, base=None, cap=4.0):
    return sample_environment(FieldSpec(dim=d, family="constant", base_matrix=base, norm_cap=cap))


def golden():
    return sample_environment(golden_cosine_spec())


def aniso():
    return sample_environment(FieldSpec(dim=2, family="gaussian-spectral", mode_count=4, frequency_scale=2.0,
                                        amplitude_budget=0.4, norm_cap=3.0, seed=8))


# --- params and keys ---------------------------------------------------------------


def test_params_validation():
    f = golden()
    with pytest.raises(mc.SimulationError):
        mc.McParams(r_min=0.0).resolved(f)
    with pytest.raises(mc.SimulationError):
        mc.McParams(horizon=1.0, substep_max=2.0).resolved(f)
    with pytest.raises(mc.SimulationError, match="eigenvalue bound"):
        mc.McParams(dominating_eig=1.0).resolved(f)
    p = mc.McParams(horizon=4.0).resolved(f)
    assert p.substep_max == pytest.approx(0.04) and p.dominating_eig == pytest.approx(1.5)


def test_stream_keys_distinct_and_stable():
    keys = mc.stream_keys(1, range(1000))
    assert len(set(keys.tolist())) == 1000
    assert mc.stream_key(1, 5) == mc.stream_key(1, 5) != mc.stream_key(2, 5)


def test_uniform_stream_moments():
    key = np.uint64(mc.stream_key(0, 0))
    u = np.array([_kernels.uniform(key, np.uint64(k)) for k in range(20000)])
    assert 0 < u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / u.size)


# --- paths -----------------------------------------------------------------------


@pytest.mark.parametrize("f", [golden(), aniso()])
def test_path_structure(f):
    x0 = np.full(f.dim, 0.3)
    p = mc.simulate_path(f, x0, mc.McParams(r_min=1e-2, horizon=2.0, seed=4), 3, 1.3)
    assert p.times[0] == 0.0 and np.all(np.diff(p.times) > 0) and p.times[-1] == 2.0
    np.testing.assert_array_equal(p.states[0], x0)
    np.testing.assert_array_equal(p.value_at(0.0), x0)
    assert p.accepted == int((p.jump_marks == 1).sum()) and p.rejected == int((p.jump_marks == 2).sum())
    assert p.rng_stream_id == 3 and np.all(np.isfinite(p.states))
    with pytest.raises(mc.SimulationError):
        p.value_at(2.5)


def test_recorded_path_agrees_with_batch_sampler():
    f = aniso()
    params = mc.McParams(r_min=1e-2, horizon=1.0, seed=9, gaussian_correction=False)
    p = mc.simulate_path(f, [0.0, 0.0], params, 2, 1.0)
    ts = [0.0, 0.25, 0.5, 1.0]
    b = mc.simulate_batch(f, [0.0, 0.0], params, 1.0, ts, streams=[2])
    for j, t in enumerate(ts):
        np.testing.assert_array_equal(b.states[0, j], p.value_at(t))


def test_observation_times_do_not_perturb_the_path():
    f = golden()
    params = mc.McParams(r_min=1e-2, horizon=3.0, seed=2, n_paths=200)
    a = mc.simulate_batch(f, [0.0], params, 1.0, [3.0])
    b = mc.simulate_batch(f, [0.0], params, 1.0, [0.5, 1.0, 1.7, 3.0])
    np.testing.assert_array_equal(a.states[:, 0], b.states[:, 3])
    np.testing.assert_array_equal(a.integrals, b.integrals)


def test_determinism_across_workers():
    f = aniso()
    params = mc.McParams(r_min=1e-2, horizon=1.0, seed=11, n_paths=400)
    one = mc.simulate_batch(f, [0.0, 0.0], params, 1.4, [0.5, 1.0], workers=1)
    four = mc.simulate_batch(f, [0.0, 0.0], params, 1.4, [0.5, 1.0], workers=4)
    np.testing.assert_array_equal(one.states, four.states)
    np.testing.assert_array_equal(one.integrals, four.integrals)
    other = mc.simulate_batch(f, [0.0, 0.0], mc.McParams(r_min=1e-2, seed=12, n_paths=400), 1.4, [1.0])
    assert not np.array_equal(other.states[:, 0], one.states[:, 1])


def test_acceptance_rate_is_one_over_dominating_eig():
    f = const()
    params = mc.McParams(r_min=1e-3, horizon=0.25, dominating_eig=2.0, seed=1, n_paths=200)
    b = mc.simulate_batch(f, [0.0], params, 1.0)
    n = int(b.accepted.sum() + b.rejected.sum())
    assert n >= 10**5
    rate = b.accepted.sum() / n
    assert abs(rate - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_domination_violation_is_a_hard_error():
    f = golden()
    keys = mc.stream_keys(0, range(4))
    stats = np.zeros((4, 3), dtype=np.int64)
    _kernels.run_batch(keys, np.zeros(1), *f.arrays(), 1.0, 1.0, 1e-2, True, 0.01, 1.0, np.zeros(0),
                       np.zeros((4, 0, 1)), np.zeros((4, 1, 1)), stats)
    assert (stats[:, 2] == _kernels.STATUS_DOMINATION).any()
    with pytest.raises(mc.SimulationError, match="dominating"):
        mc._check_status(stats)


def test_constant_field_cf_matches_symbol():
    # the truncated-kernel example at its stated sizes
    f = const()
    consts = compute_constants(1, 1.0)
    params = mc.McParams(r_min=1e-3, horizon=1.0, seed=2024, n_paths=10**5)
    b = mc.simulate_batch(f, [0.0], params, 1.0, [1.0])
    for xi in (0.5, 1.0, 2.0):
        est = mc.empirical_cf(b.states[:, 0], [xi], 1.0)
        target = math.exp(-float(closed_form_values(np.eye(1), [xi], consts)))
        assert abs(est.value - target) <= 3 * est.std_error + 0.01
        assert abs(est.value) <= 1 + 3 * est.std_error


def test_gaussian_correction_removes_truncation_bias():
    alpha, r, t, xi = 1.5, 0.5, 0.2, 1.0
    f = const()
    target = math.exp(-t * compute_constants(1, alpha).c * xi**alpha)
    on = mc.simulate_batch(f, [0.0], mc.McParams(r_min=r, horizon=t, seed=3, n_paths=20000), alpha, [t])
    off = mc.simulate_batch(f, [0.0], mc.McParams(r_min=r, horizon=t, seed=3, n_paths=20000, gaussian_correction=False), alpha, [t])
    e_on = mc.empirical_cf(on.states[:, 0], [xi], t)
    e_off = mc.empirical_cf(off.states[:, 0], [xi], t)
    assert abs(e_on.value - target) <= 3 * e_on.std_error + 0.01
    assert abs(e_off.value - target) > 10 * e_off.std_error


def test_truncation_consistency_under_r_min_doubling():
    f = const()
    alpha, xi = 1.0, 1.0
    ests = []
    for r in (1e-2, 2e-2):
        b = mc.simulate_batch(f, [0.0], mc.McParams(r_min=r, seed=5, n_paths=20000), alpha, [1.0])
        ests.append(mc.empirical_cf(b.states[:, 0], [xi], 1.0))
    # int_{r}^{2r} (1 ^ |z xi|^2) n(dz) over both half-lines, a = 1
    bound = 2 * xi**2 * (2e-2 - 1e-2)
    se = math.hypot(ests[0].std_error, ests[1].std_error)
    assert abs(ests[0].value - ests[1].value) <= bound + 3 * se


def test_two_dimensional_constant_cf():
    a0 = np.array([[1.2, 0.3], [0.3, 0.7]])
    f = const(2, a0)
    consts = compute_constants(2, 1.5)
    b = mc.simulate_batch(f, [0.0, 0.0], mc.McParams(r_min=2e-2, seed=6, n_paths=20000), 1.5, [0.5])
    for xi in ([1.0, 0.0], [0.0, 1.0], [0.8, -0.8]):
        est = mc.empirical_cf(b.states[:, 0], xi, 0.5)
        target = math.exp(-0.5 * float(closed_form_values(a0, np.array(xi), consts)))
        assert abs(est.value - target) <= 3 * est.std_error + 0.01


# --- scaling and CF ---------------------------------------------------------------


def some_path():
    return mc.simulate_path(golden(), [0.0], mc.McParams(r_min=1e-2, horizon=4.0, seed=1), 0, 1.0)


def test_scale_path_identity_group_and_jumps():
    p = some_path()
    q = mc.scale_path(p, 1.0, 1.0)
    np.testing.assert_array_equal(q.times, p.times)
    np.testing.assert_array_equal(q.states, p.states)
    a = mc.scale_path(mc.scale_path(p, 0.5, 1.3), 0.2, 1.3)
    b = mc.scale_path(p, 0.1, 1.3)
    np.testing.assert_allclose(a.times, b.times, rtol=1e-15)
    np.testing.assert_allclose(a.states, b.states, rtol=1e-15)
    s = mc.scale_path(p, 0.25, 1.0)
    np.testing.assert_array_equal(np.diff(s.states[:, 0]), np.diff(p.states[:, 0] * 0.25))
    with pytest.raises(mc.SimulationError, match="horizon"):
        mc.scale_path(p, 0.1, 1.0, target_horizon=1.0)
    mc.scale_path(p, 0.25, 1.0, target_horizon=1.0)
    with pytest.raises(mc.SimulationError):
        mc.scale_path(p, 0.0, 1.0)


def test_empirical_cf_examples():
    p = some_path()
    e = mc.empirical_cf([p, p], [0.0], 1.0)
    assert e.value == 1 and e.std_error == 0.0
    x = p.value_at(1.0)
    e = mc.empirical_cf([p], [0.7], 1.0)
    assert e.value == pytest.approx(complex(math.cos(0.7 * x[0]), math.sin(0.7 * x[0])), abs=1e-15)
    with pytest.raises(mc.SimulationError):
        mc.empirical_cf([], [1.0], 1.0)


@given(st.integers(0, 1000), st.floats(-5, 5))
@settings(max_examples=20)
def test_cf_modulus_bound(seed, xi):
    X = np.random.default_rng(seed).standard_cauchy((50, 1))
    e = mc.empirical_cf(X, [xi], 1.0)
    assert abs(e.value) <= 1 + 3 * e.std_error


def test_exports(tmp_path):
    p = some_path()
    path = tmp_path / "p.csv"
    p.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "path_id,time,x1,mark" and len(lines) == len(p.times) + 1
    cf = tmp_path / "cf.json"
    mc.write_cf_json([mc.empirical_cf([p], [1.0], 1.0)], cf)
    rec = json.loads(cf.read_text())
    assert rec["schema"] == "stablehom.cf/1" and set(rec["estimates"][0]) == {"xi", "t", "re", "im", "std_error", "n_paths"}


# --- Birkhoff and environment --------------------------------------------------------


@pytest.mark.parametrize("gauss", [True, False])
def test_birkhoff_constant_field_is_exact(gauss):
    a0 = np.array([[1.2, 0.3], [0.3, 0.7]])
    f = const(2, a0)
    consts = compute_constants(2, 1.0)
    xi = np.array([0.4, 1.1])
    params = mc.McParams(r_min=1e-2, seed=1, gaussian_correction=gauss)
    v = mc.birkhoff_average(f, xi, 1.0, 0.1, consts, params, stream=0)
    assert v == pytest.approx(float(closed_form_values(a0, xi, consts)), rel=1e-12)


def test_birkhoff_golden_within_five_percent():
    consts = compute_constants(1, 1.0)
    ints = mc.birkhoff_integrals(golden(), 1.0, 0.05, mc.McParams(r_min=1e-3, seed=77, n_paths=100), 1.0)
    vals = closed_form_values(ints, np.array([1.0]), consts)
    target = float(closed_form_values(np.array([[GOLDEN_ABAR]]), np.array([1.0]), consts))
    assert abs(vals.mean() - target) <= 0.05 * target


def test_birkhoff_spread_shrinks_with_eps():
    consts = compute_constants(1, 1.0)
    stds = []
    for eps in (0.4, 0.2, 0.1):
        ints = mc.birkhoff_integrals(golden(), 1.0, eps, mc.McParams(r_min=1e-2, seed=78, n_paths=200), 1.0)
        stds.append(closed_form_values(ints, np.array([1.0]), consts).std())
    assert stds[0] > stds[1] > stds[2]


def test_environment_samples():
    f = aniso()
    p = mc.simulate_path(f, [0.2, -0.1], mc.McParams(r_min=1e-2, horizon=2.0, seed=3), 0, 1.2)
    ts = np.sort(np.random.default_rng(0).uniform(0, 2, size=10))
    env = mc.environment_samples(f, p, ts)
    for t, a in zip(ts, env):
        np.testing.assert_allclose(a, shift(f, p.value_at(t)).evaluate(np.zeros(2)), atol=1e-14)
    np.testing.assert_array_equal(mc.environment_samples(f, p, [0.0])[0], f.evaluate(np.array([0.2, -0.1])))
    c = const(2)
    pc = mc.simulate_path(c, [0.0, 0.0], mc.McParams(r_min=1e-2, seed=3), 0, 1.2)
    assert all(np.array_equal(a, np.eye(2)) for a in mc.environment_samples(c, pc, [0.1, 0.5, 0.9]))


# --- exit times -----------------------------------------------------------------------


def test_exit_time_limits():
    f = golden()
    params = mc.McParams(r_min=1e-2, seed=4, n_paths=2000, substep_max=1e-2)
    far = mc.exit_time_estimate(f, [0.0], 1e3, params, 1.5)
    assert 0.0 <= far.value <= 3 * far.std_error + 1e-12
    near = mc.exit_time_estimate(f, [0.0], 1e-2, params, 1.5)
    assert near.value >= 0.95
    mid = mc.exit_time_estimate(f, [0.0], 1.0, params, 1.0, workers=3)
    assert 0.0 <= mid.value <= 1.0
    with pytest.raises(mc.SimulationError):
        mc.exit_time_estimate(f, [0.0], 0.0, params, 1.0)


def test_gamma_bound_reported():
    g = mc.gamma_lower_bound(compute_constants(1, 1.0), 2.0)
    assert 0 < g < 0.5
