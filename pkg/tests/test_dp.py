"""Classical dynamic programming lattice and the solver cross-checks."""

import dataclasses

import numpy as np
import pytest

import oracles
from jumpctrl import bsde, dp, girsanov, transition
from jumpctrl.problem import closed_form, load_problem
from jumpctrl.transition import LatticeGrid


def _spec(family, **over):
    cfg = {"schema_version": 1, "family": family}
    cfg.update(over)
    return load_problem(cfg)


@pytest.fixture(scope="module")
def bang_spec():
    return _spec("bang-drift")


@pytest.fixture(scope="module")
def bang_dp(bang_spec):
    return dp.solve_dp_grid(bang_spec, n_time_steps=64)


@pytest.fixture(scope="module")
def bang_ladder(bang_spec):
    return bsde.minimal_value(bang_spec, levels=(1, 2, 4, 8, 16),
                              n_time_steps=64)


# ---------------------------------------------------------------------------
# Lattice values
# ---------------------------------------------------------------------------

def test_dp_uncontrolled_matches_closed_form_on_the_lattice():
    spec = _spec("uncontrolled-decay")
    fld = dp.solve_dp_grid(spec, n_time_steps=32)
    cf = closed_form(spec)["value"]
    for k in (0, 16, 32):
        t = float(fld.time_grid[k])
        want = np.array([cf(t, x) for x in fld.grid.nodes()])
        np.testing.assert_allclose(fld.values[k].ravel(), want, atol=1e-9)


def test_dp_uncontrolled_argmax_breaks_ties_toward_low_index():
    spec = _spec("uncontrolled-decay")
    fld = dp.solve_dp_grid(spec, n_time_steps=16)
    assert np.all(fld.argmax == 0)


def test_dp_bang_value_and_policy(bang_spec, bang_dp):
    assert abs(bang_dp.value_at_origin(bang_spec)
               - oracles.BANG_VALUE_T0) < 1e-2
    # reward is increasing in the state, so the maximal drift wins at
    # every node the boundary clamp cannot reach
    interior = transition.interior_mask(bang_dp.grid)
    assert np.all(bang_dp.argmax[:, interior] == 2)


def test_dp_jump_reward_matches_moment_ode():
    spec = _spec("jump-reward")
    fld = dp.solve_dp_grid(spec, n_time_steps=64)
    assert abs(fld.value_at_origin(spec)
               - oracles.JUMP_REWARD_VALUE_T0) < 2e-2
    k_mid = fld.n_steps // 2
    origin = np.argmin(np.abs(fld.grid.axes[0]))
    assert fld.argmax[k_mid, origin] == 2


def test_dp_lookback_running_integral():
    spec = _spec("lookback-integral")
    fld = dp.solve_dp_grid(spec, n_time_steps=64)
    assert abs(fld.value_at_origin(spec)
               - oracles.LOOKBACK_VALUE_T0) < 2e-2


def test_dp_dominates_penalized_field_nodewise(bang_spec):
    grid = transition.default_state_grid(bang_spec, seed=0)
    fld_dp = dp.solve_dp_grid(bang_spec, n_time_steps=64, grid=grid)
    fld_pen = bsde.solve_penalized_grid(bang_spec, 16, n_time_steps=64,
                                        grid=grid)
    gap = fld_pen.values.max(axis=-1) - fld_dp.values
    assert float(gap.max()) <= 1e-9


def test_dp_mc_inner_mode_is_deterministic_and_close(bang_spec):
    f1 = dp.solve_dp_grid(bang_spec, n_time_steps=32, mc_inner=256,
                          mc_seed=3)
    f2 = dp.solve_dp_grid(bang_spec, n_time_steps=32, mc_inner=256,
                          mc_seed=3)
    np.testing.assert_array_equal(f1.values, f2.values)
    assert abs(f1.value_at_origin(bang_spec) - oracles.BANG_VALUE_T0) < 0.05


def test_dp_policy_at_picks_nearest_node():
    grid = LatticeGrid(axes=(np.array([0.0, 1.0, 2.0]),))
    fld = dp.DpField(time_grid=np.array([0.0, 1.0]), grid=grid,
                     values=np.zeros((2, 3)),
                     argmax=np.array([[0, 1, 2]]), metadata={})
    got = fld.policy_at(0, np.array([[0.4], [0.6], [1.9], [2.7]]))
    np.testing.assert_array_equal(got, [0, 1, 2, 2])


# ---------------------------------------------------------------------------
# Equality of the two value constructions
# ---------------------------------------------------------------------------

def test_value_equality_bang(bang_spec, bang_dp, bang_ladder):
    out = dp.value_equality_check(bang_dp, bang_ladder, bang_spec)
    assert out["ok"]
    assert abs(out["diff"]) <= 2e-2
    assert abs(out["v_dp"] - oracles.BANG_VALUE_T0) < 1e-2


def test_value_equality_with_tilted_upper_estimate(bang_spec, bang_dp,
                                                   bang_ladder):
    fld = bang_ladder.last_field
    nu = girsanov.IntensityControl.argmax_tilt(
        fld.time_grid, fld.grid.axes, fld.values, strength=8.0)
    est = girsanov.randomized_gain(bang_spec, nu, 4_000, seed=5,
                                   mode="tilted")
    out = dp.value_equality_check(bang_dp, bang_ladder, bang_spec,
                                  tilt_estimate=est)
    assert out["tilt_bound_ok"]
    assert out["ok"]


def test_value_equality_uncontrolled_is_exact():
    spec = _spec("uncontrolled-decay")
    fld = dp.solve_dp_grid(spec, n_time_steps=32)
    ladder = bsde.minimal_value(spec, levels=(1, 2), n_time_steps=32)
    out = dp.value_equality_check(fld, ladder, spec)
    assert out["ok"]
    assert abs(out["diff"]) < 1e-9


def test_value_equality_rejects_foreign_spec(bang_dp, bang_ladder):
    other = _spec("uncontrolled-decay")
    with pytest.raises(ValueError, match="spec mismatch"):
        dp.value_equality_check(bang_dp, bang_ladder, other)


def test_value_equality_rejects_kernel_drift(bang_spec, bang_dp,
                                             bang_ladder):
    tampered = dataclasses.replace(bang_ladder, kernel="0" * 16)
    with pytest.raises(AssertionError, match="kernels differ"):
        dp.value_equality_check(bang_dp, tampered, bang_spec)


def test_solvers_share_one_kernel(bang_dp, bang_ladder):
    want = transition.kernel_checksum()
    assert bang_dp.metadata["kernel"] == want
    assert bang_ladder.kernel == want


# ---------------------------------------------------------------------------
# Feedback policy rollout
# ---------------------------------------------------------------------------

def test_rollout_uncontrolled_is_deterministic():
    spec = _spec("uncontrolled-decay")
    fld = dp.solve_dp_grid(spec, n_time_steps=32)
    out = dp.policy_rollout(fld, spec, n_paths=200, seed=1)
    assert out["ok"]
    assert out["j_se"] == 0.0
    assert abs(out["j_mean"] - oracles.DECAY_VALUE_T0) < 1e-6


def test_rollout_bang_reaches_the_lattice_value(bang_spec, bang_dp):
    out = dp.policy_rollout(bang_dp, bang_spec, n_paths=20_000, seed=2)
    assert out["ok"]
    assert abs(out["j_mean"] - out["v0"]) <= 3 * out["j_se"] + 1e-2


def test_rollout_mean_reverting_switch_self_consistent():
    # curved value: per-step interpolation bias scales like
    # n_steps * dx^2, so the node count must grow with the step count
    # for the rollout to sit inside the noise band
    spec = _spec("ou-switch")
    fld = dp.solve_dp_grid(spec, n_time_steps=64, n_state_nodes=401)
    out = dp.policy_rollout(fld, spec, n_paths=20_000, seed=4)
    assert out["ok"]
    assert abs(out["j_mean"] - out["v0"]) < 5e-3


def test_rollout_rejects_empty_path_set(bang_spec, bang_dp):
    with pytest.raises(ValueError, match="no paths"):
        dp.policy_rollout(bang_dp, bang_spec, n_paths=0, seed=0)
