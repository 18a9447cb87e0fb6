"""Simulation invariants: purity, adaptedness, exactness, martingales."""

import math

import numpy as np
import pytest

import oracles
from jumpctrl import problem, sim, stream


def load(family, **over):
    doc = {"schema_version": 1, "family": family}
    doc.update(over)
    return problem.load_problem(doc)


# ---------------------------------------------------------------------------
# Random substreams
# ---------------------------------------------------------------------------

def test_uniform_block_row_purity():
    wide = stream.uniform_block(11, stream.STREAM_PI, 9, 40)
    narrow = stream.uniform_block(11, stream.STREAM_PI, 5, 40)
    assert np.array_equal(wide[:5], narrow)
    other_stream = stream.uniform_block(11, stream.STREAM_THETA, 5, 40)
    assert not np.allclose(narrow, other_stream)


def test_normal_block_moments():
    z = stream.normal_block(3, stream.STREAM_BROWNIAN, 200, 500)
    assert abs(z.mean()) < 3.0 / math.sqrt(z.size)
    assert abs(z.std() - 1.0) < 0.005
    assert np.isfinite(z).all()


def test_event_budget_scales():
    assert stream.event_budget(0.0, 1.0) == 20
    assert stream.event_budget(4.0, 1.0) >= 4 + 10 * 2


# ---------------------------------------------------------------------------
# simulate_poisson_measure
# ---------------------------------------------------------------------------

def test_poisson_log_reproducible_and_seed_sensitive():
    spec = load("jump-reward")
    log1 = sim.simulate_poisson_measure(2.0, spec.jump_measure, 1.0, seed=5)
    log2 = sim.simulate_poisson_measure(2.0, spec.jump_measure, 1.0, seed=5)
    log3 = sim.simulate_poisson_measure(2.0, spec.jump_measure, 1.0, seed=6)
    assert np.array_equal(log1.times, log2.times)
    assert np.array_equal(log1.marks, log2.marks)
    assert (log1.times.size != log3.times.size
            or not np.allclose(log1.times, log3.times))


def test_poisson_count_matches_rate():
    rate, horizon, reps = 2.0, 1.0, 10_000
    mean_th, var_th = oracles.poisson_mean_var(rate, horizon)
    spec = load("jump-reward")
    counts = np.array([
        sim.simulate_poisson_measure(rate, spec.jump_measure, horizon,
                                     seed=s).size
        for s in range(reps)])
    se = math.sqrt(var_th / reps)
    assert abs(counts.mean() - mean_th) < 3.0 * se


def test_poisson_log_strictly_increasing_in_window():
    spec = load("jump-reward")
    for s in range(50):
        log = sim.simulate_poisson_measure(5.0, spec.jump_measure, 2.0,
                                           seed=s)
        if log.size:
            assert np.all(np.diff(log.times) > 0)
            assert log.times[0] > 0.0 and log.times[-1] <= 2.0


def test_event_budget_overflow_raises(monkeypatch):
    # the honest budget is unreachable by design; shrink it to test the guard
    monkeypatch.setattr(sim.stream, "event_budget", lambda r, s: 3)
    with pytest.raises(RuntimeError, match="event budget exceeded"):
        sim._poisson_block(50.0, 1.0, 0.0, 0, stream.STREAM_PI, 4)


# ---------------------------------------------------------------------------
# build_control_path
# ---------------------------------------------------------------------------

def test_build_control_path_retains_noop_switches():
    spec = load("bang-drift")
    log = sim.EventLog(times=np.array([0.3, 0.7]),
                       marks=np.array([2, 2]), measure_id="theta",
                       horizon=1.0)
    path = sim.build_control_path(log, spec.randomization)
    assert np.array_equal(path.switch_times, [0.0, 0.3, 0.7])
    assert np.array_equal(path.regimes, [2, 2, 2])
    assert path.regime_at(0.1) == 2          # a0 is index 2 for this family
    spec_mid = load("bang-drift", a0_index=1)
    path_mid = sim.build_control_path(log, spec_mid.randomization)
    assert path_mid.regime_at(0.1) == 1
    assert path_mid.regime_at(0.9) == 2


def test_build_control_path_rejects_pi_log():
    spec = load("bang-drift")
    log = sim.EventLog(times=np.array([0.5]), marks=np.array([0.1]),
                       measure_id="pi", horizon=1.0)
    with pytest.raises(ValueError, match="theta"):
        sim.build_control_path(log, spec.randomization)


def test_event_log_validation():
    with pytest.raises(ValueError, match="increase strictly"):
        sim.EventLog(times=np.array([0.5, 0.5]), marks=np.array([1, 2]),
                     measure_id="theta", horizon=1.0)
    with pytest.raises(ValueError, match="increase strictly"):
        sim.EventLog(times=np.array([0.2, 1.4]), marks=np.array([1, 2]),
                     measure_id="theta", horizon=1.0)


# ---------------------------------------------------------------------------
# Bundles: reproducibility and purity
# ---------------------------------------------------------------------------

def test_bundle_bit_identical_reruns():
    spec = load("jump-reward")
    b1 = sim.simulate_bundle(spec, 64, seed=42)
    b2 = sim.simulate_bundle(spec, 64, seed=42)
    assert np.array_equal(b1.states, b2.states)
    assert np.array_equal(b1.regimes, b2.regimes)
    assert np.array_equal(b1.pi.times, b2.pi.times)
    assert np.array_equal(b1.theta.marks, b2.theta.marks)


def test_bundle_path_prefix_purity():
    """Path i must not depend on how many paths were simulated."""
    spec = load("jump-reward")
    big = sim.simulate_bundle(spec, 50, seed=9)
    small = sim.simulate_bundle(spec, 7, seed=9)
    assert np.array_equal(big.states[:7], small.states)
    assert np.array_equal(big.regimes[:7], small.regimes)
    for i in range(7):
        tb, mb = big.pi.for_path(i)
        ts, ms = small.pi.for_path(i)
        assert np.array_equal(tb, ts) and np.array_equal(mb, ms)


def test_pi_theta_streams_never_coincide():
    spec = load("jump-reward")
    b = sim.simulate_bundle(spec, 400, seed=3)
    for i in range(b.n_paths):
        tp, _ = b.pi.for_path(i)
        tt, _ = b.theta.for_path(i)
        if tp.size and tt.size:
            assert not np.intersect1d(tp, tt).size


# ---------------------------------------------------------------------------
# Integrator exactness
# ---------------------------------------------------------------------------

def test_constant_drift_is_exact():
    """b=+1, sigma noise off via zero increments: X_t = x0 + t exactly."""
    spec = load("bang-drift")
    drivers = (np.zeros((16, 1)), None)
    path = sim.integrate_state(spec, control_source=2, drivers=drivers,
                               x0=[0.25], n_steps=16)
    assert np.allclose(path.states[:, 0],
                       0.25 + path.time_grid, atol=1e-14)


def test_linear_decay_flow_is_exact():
    """dX = -X dt integrates to the exact exponential at grid nodes."""
    spec = load("uncontrolled-decay")
    drivers = (np.zeros((8, 1)), None)
    path = sim.integrate_state(spec, control_source=0, drivers=drivers,
                               x0=[1.0], n_steps=8)
    assert np.allclose(path.states[:, 0], np.exp(-path.time_grid),
                       atol=1e-14)
    assert path.states[-1, 0] == pytest.approx(oracles.DECAY_VALUE_T0)


def test_mid_step_switch_integrates_drift_exactly():
    """Regime flips inside a step: occupation-split drift stays exact."""
    spec = load("bang-drift")
    control = sim.ControlJumpPath(
        switch_times=np.array([0.0, 0.3141]),
        regimes=np.array([2, 0]), horizon=1.0)
    drivers = (np.zeros((4, 1)), None)   # coarse grid: 0.3141 is mid-step
    path = sim.integrate_state(spec, control_source=control,
                               drivers=drivers, x0=[0.0], n_steps=4)
    expected = 0.3141 * 1.0 + (1.0 - 0.3141) * (-1.0)
    assert path.states[-1, 0] == pytest.approx(expected, abs=1e-14)


def test_running_integral_augmentation_trapezoid():
    spec = load("lookback-integral")
    drivers = (np.zeros((32, 1)), None)
    path = sim.integrate_state(spec, control_source=1, drivers=drivers,
                               x0=[0.0], n_steps=32)
    # X_t = t, integral = t^2/2; trapezoid on a linear path is exact
    assert path.states[-1, 1] == pytest.approx(0.5, abs=1e-14)


def test_adaptedness_truncated_drivers_reproduce_prefix():
    """State at t_k depends only on drivers up to t_k."""
    spec = load("jump-reward")
    bundle = sim.simulate_bundle(spec, 6, seed=21, n_steps=32)
    k = 20
    t_k = bundle.time_grid[k]
    for i in range(bundle.n_paths):
        full = bundle.path(i)
        keep = full.pi_log.times <= t_k
        trunc_log = sim.EventLog(times=full.pi_log.times[keep],
                                 marks=full.pi_log.marks[keep],
                                 measure_id="pi", horizon=t_k)
        ctrl_keep = full.control.switch_times <= t_k
        trunc_ctrl = sim.ControlJumpPath(
            switch_times=full.control.switch_times[ctrl_keep],
            regimes=full.control.regimes[ctrl_keep], horizon=t_k)
        spec_k = load("jump-reward", horizon=float(t_k))
        prefix = sim.integrate_state(
            spec_k, control_source=trunc_ctrl,
            drivers=(bundle.brownian_increments[i, :k], trunc_log),
            x0=full.states[0, :1], n_steps=k)
        assert np.allclose(prefix.states[:, 0], full.states[:k + 1, 0],
                           atol=1e-12)


def test_compensated_jumps_are_mean_zero():
    """State-independent jumps: E[X_T] - x0 = 0 within 3 SE."""
    spec = load("jump-reward")
    bundle = sim.simulate_bundle(spec, 40_000, seed=17)
    xt = bundle.terminal_states()[bundle.included(), 0]
    se = xt.std() / math.sqrt(xt.size)
    assert abs(xt.mean()) < 3.0 * se
    assert se < 0.01


def test_uniform_marks_compensator():
    """Nonzero-mean marks force a real compensator; mean must still vanish."""
    m2 = oracles.second_moment_uniform(0.0, 1.0, 2.0)
    spec = load("jump-reward", jump={
        "total_rate": 2.0, "mark_sampler_id": "uniform-interval",
        "mark_parameters": {"low": 0.0, "high": 1.0},
        "rho_envelope": 1.0, "second_moment": m2})
    bundle = sim.simulate_bundle(spec, 40_000, seed=23)
    xt = bundle.terminal_states()[bundle.included(), 0]
    se = xt.std() / math.sqrt(xt.size)
    assert abs(xt.mean()) < 3.0 * se


def test_brownian_martingale_mean():
    """Driftless regimes keep E[X_T] = x0 for the diffusion families."""
    spec = load("ou-switch")
    bundle = sim.simulate_bundle(spec, 20_000, seed=29)
    xt = bundle.terminal_states()[bundle.included(), 0]
    target = oracles.ou_mean(0.5, 0.0, 1.0, 1.0)
    # regimes average out: compare against the mixture mean instead of a
    # single target by checking the OU mean under the mid regime band
    assert xt.mean() == pytest.approx(target, abs=0.02)


def test_overflow_flag_and_exclude():
    spec = load("ou-switch",
                parameters={"reversion": -30.0},
                regularity={"lipschitz_l": 30.0},
                x0=[1e9])
    with pytest.warns(RuntimeWarning, match="overflowed"):
        bundle = sim.simulate_bundle(spec, 8, seed=1, n_steps=64)
    assert bundle.n_excluded == 8
    assert np.isfinite(bundle.states).all()
    with pytest.raises(ValueError, match="no paths"):
        sim.empirical_moment_check(bundle)


def test_empirical_moment_check_reports():
    spec = load("bang-drift", regularity={"moment_cp": 8.0})
    bundle = sim.simulate_bundle(spec, 2_000, seed=2)
    rep = sim.empirical_moment_check(bundle, p=2.0)
    assert rep["pass"] is True
    assert rep["observed"] <= rep["bound"]
    spec2 = load("bang-drift")
    rep2 = sim.empirical_moment_check(sim.simulate_bundle(spec2, 500, seed=2))
    assert rep2["pass"] is None and rep2["ratio"] > 0


def test_occupation_rows_partition_each_step():
    spec = load("bang-drift")
    bundle = sim.simulate_bundle(spec, 300, seed=31, n_steps=16)
    dt = bundle.time_grid[1] - bundle.time_grid[0]
    for k in (0, 7, 15):
        occ = bundle.step_occupation(k)
        assert np.allclose(occ.sum(axis=1), dt, atol=1e-12)
        # regime at the left node owns the first slice of each step
        assert np.all(occ[np.arange(300), bundle.regimes[:, k]] > 0)


def test_running_reward_accumulates_f():
    """f = a: the reward integral equals the signed occupation time."""
    spec = load("jump-reward")
    bundle = sim.simulate_bundle(spec, 200, seed=37, n_steps=32)
    segs = bundle.theta_segments()
    expected = np.zeros(200)
    a_vals = spec.control.points
    np.add.at(expected, segs.path,
              (segs.end - segs.start) * a_vals[segs.regime])
    assert np.allclose(bundle.running_reward, expected, atol=1e-12)


def test_regime_frequencies_match_lambda0():
    """Switch marks follow the normalized intensity weights."""
    spec = load("bang-drift", lambda0_weights=[0.5, 0.3, 0.2])
    bundle = sim.simulate_bundle(spec, 4_000, seed=41)
    marks = bundle.theta.marks.astype(int)
    freq = np.bincount(marks, minlength=3) / marks.size
    se = np.sqrt(np.array([0.5, 0.3, 0.2]) * 0.7 / marks.size)
    assert np.all(np.abs(freq - [0.5, 0.3, 0.2]) < 4 * se + 0.01)


def test_write_bundle_csv_roundtrip(tmp_path):
    spec = load("lookback-integral")
    bundle = sim.simulate_bundle(spec, 3, seed=4, n_steps=8)
    csv_path = tmp_path / "paths.csv"
    side = tmp_path / "paths.json"
    sim.write_bundle_csv(bundle, str(csv_path), str(side))
    text = csv_path.read_bytes()
    assert text.count(b"\r\n") == 3 * 9 + 1  # data rows + header
    header = text.split(b"\r\n")[0].decode()
    assert header == "path,t,x0,running,regime,excluded"
    import json
    meta = json.loads(side.read_text())
    assert meta["schema_version"] == sim.CSV_SCHEMA
    assert meta["n_paths"] == 3
