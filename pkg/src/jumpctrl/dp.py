"""Dynamic-programming oracle on the same lattice as the penalized solver.

The backward recursion maximizes over the control grid at every node,

    v(t_k, x) = max_a { E[v(t_{k+1}, X') | X = x, control a] + f(t_k,x,a) dt },

and goes through the exact same one-step kernel as the penalized route
(``transition.expect_next``), so discrepancies between the two values can
only come from the control handling, never from the transition machinery.
Ties in the maximum resolve to the lowest control index, and the rollout
policy uses the same rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import sim, transition
from .problem import ProblemSpec
from .transition import LatticeGrid


@dataclass(frozen=True)
class DpField:
    """Value and argmax-control lattice of the classical problem."""

    time_grid: np.ndarray          # (Nt+1,)
    grid: LatticeGrid
    values: np.ndarray             # (Nt+1, *shape)
    argmax: np.ndarray             # (Nt, *shape) control indices
    metadata: dict

    @property
    def n_steps(self) -> int:
        return self.time_grid.size - 1

    def value_at_node(self, k: int, points: np.ndarray) -> np.ndarray:
        vals, _ = transition.multilinear(self.grid.axes, self.values[k],
                                         np.atleast_2d(points))
        return vals

    def value_at_origin(self, spec: ProblemSpec) -> float:
        x0 = spec.initial_augmented(spec.initial_law.mean[None, :])
        return float(self.value_at_node(0, x0)[0])

    def policy_at(self, k: int, points: np.ndarray) -> np.ndarray:
        """Argmax control index at the nearest lattice node."""
        points = np.atleast_2d(points)
        cells = []
        for j, ax in enumerate(self.grid.axes):
            x = np.clip(points[:, j], ax[0], ax[-1])
            i = np.clip(np.searchsorted(ax, x, side="right") - 1,
                        0, ax.size - 2)
            near = i + (x - ax[i] > ax[i + 1] - x)
            cells.append(near)
        return self.argmax[k][tuple(cells)]


def solve_dp_grid(spec: ProblemSpec, n_time_steps: int | None = None,
                  grid: LatticeGrid | None = None,
                  n_state_nodes: int | None = None, seed: int = 0,
                  hermite_nodes: int = 8, mc_inner: int | None = None,
                  mc_seed: int = 0) -> DpField:
    """Backward value iteration over the control grid."""
    if n_time_steps is None:
        n_time_steps = spec.default_steps()
    if grid is None:
        grid = transition.default_state_grid(spec, n_state_nodes, seed)
    time_grid = np.linspace(0.0, spec.horizon, n_time_steps + 1)
    dt = spec.horizon / n_time_steps

    shape = grid.shape
    n_controls = spec.control.size
    nodes = grid.nodes()
    p_cnt = nodes.shape[0]
    core = nodes[:, :spec.dim]

    values = np.empty((n_time_steps + 1, *shape))
    argmax = np.empty((n_time_steps, *shape), dtype=np.int64)
    values[-1] = spec.coefficients.g(nodes).reshape(shape)

    clamp_mass = 0.0
    n_calls = 0
    interior = transition.interior_mask(grid)
    n_interior = int(interior.sum())

    q = np.empty((p_cnt, n_controls))
    for k in range(n_time_steps - 1, -1, -1):
        t_k = time_grid[k]
        mc_nodes = None
        if mc_inner is not None:
            mc_nodes = transition.monte_carlo_nodes(spec, dt, k, mc_inner,
                                                    mc_seed)
        for a in range(n_controls):
            a_val = float(spec.control.points[a])
            cont, c = transition.expect_next(
                spec, t_k, dt, a, grid, values[k + 1],
                hermite_nodes=hermite_nodes, mc_nodes=mc_nodes,
                clamp_mask=interior)
            clamp_mass += c
            n_calls += 1
            q[:, a] = cont + spec.coefficients.f(t_k, core, a_val) * dt
        values[k] = q.max(axis=1).reshape(shape)
        argmax[k] = q.argmax(axis=1).reshape(shape)   # lowest index wins

    clamp_fraction = clamp_mass / max(n_calls * n_interior, 1)
    if clamp_fraction >= 0.01:
        warnings.warn(f"state grid missed {100 * clamp_fraction:.2f}% of "
                      f"one-step transition mass ({clamp_mass:.0f} clamped "
                      "lookups); widen the grid", RuntimeWarning)
    metadata = {
        "solver": "dp", "dt": dt, "clamp_fraction": clamp_fraction,
        "kernel": transition.kernel_checksum(),
        "fingerprint": spec.fingerprint(), "hermite_nodes": hermite_nodes,
        "mc_inner": mc_inner, "seed": seed,
    }
    return DpField(time_grid=time_grid, grid=grid, values=values,
                   argmax=argmax, metadata=metadata)


def value_equality_check(dp_field: DpField, ladder, spec: ProblemSpec,
                         tilt_estimate=None,
                         se_mult: float | None = None) -> dict:
    """Compare the classical value with the randomized-formulation limit.

    ``ladder`` is the report from the penalized level ladder; the check
    passes when the two initial values agree within the value tolerance
    (plus Monte Carlo noise for regression ladders) and, when a tilted gain
    estimate is supplied, that gain does not beat the classical value
    beyond noise.
    """
    if se_mult is None:
        se_mult = spec.tolerances["se_multiplier"]
    if dp_field.metadata["fingerprint"] != spec.fingerprint():
        raise ValueError("spec mismatch")
    if ladder.fingerprint != spec.fingerprint():
        raise ValueError("spec mismatch")
    if ladder.kernel and ladder.kernel != dp_field.metadata["kernel"]:
        raise AssertionError("transition kernels differ between solvers")

    tol = spec.tolerances["tol_value"]
    v_dp = dp_field.value_at_origin(spec)
    diff = abs(v_dp - ladder.value_limit)
    band = tol + se_mult * (ladder.ses[-1] if ladder.ses else 0.0)
    out = {
        "v_dp": v_dp, "v_randomized": ladder.value_limit,
        "diff": diff, "band": band, "value_equal_ok": bool(diff <= band),
    }
    if tilt_estimate is not None:
        # float-level slack keeps zero-variance (deterministic) tilts honest
        slack = se_mult * tilt_estimate.se + 1e-12 * (1.0 + abs(v_dp))
        out["tilt_gain"] = tilt_estimate.mean
        out["tilt_bound_ok"] = bool(tilt_estimate.mean <= v_dp + slack)
        out["ok"] = out["value_equal_ok"] and out["tilt_bound_ok"]
    else:
        out["ok"] = out["value_equal_ok"]
    return out


def policy_rollout(dp_field: DpField, spec: ProblemSpec, n_paths: int,
                   seed: int, n_steps: int | None = None,
                   se_mult: float | None = None) -> dict:
    """Simulate the argmax feedback policy and band-check its gain.

    Near-optimality verification: the rollout gain J must not beat the
    solved value beyond noise and must reach it up to noise plus the value
    tolerance.
    """
    if se_mult is None:
        se_mult = spec.tolerances["se_multiplier"]
    if n_steps is None:
        n_steps = dp_field.n_steps
    field_grid = dp_field.time_grid
    last = dp_field.n_steps - 1

    def policy(k: int, t_k: float, states: np.ndarray) -> np.ndarray:
        kf = int(np.clip(np.searchsorted(field_grid, t_k + 1e-12) - 1,
                         0, last))
        return dp_field.policy_at(kf, states)

    bundle = sim._simulate_core(spec, n_paths, seed, n_steps=n_steps,
                                control="policy", policy=policy)
    keep = bundle.included()
    gains = sim.total_gain(bundle)[keep]
    if gains.size == 0:
        raise ValueError("no paths")
    j_mean = float(gains.mean())
    j_se = float(gains.std(ddof=1) / math.sqrt(gains.size))
    v0 = dp_field.value_at_origin(spec)
    tol = spec.tolerances["tol_value"]
    # float-level slack keeps zero-variance (deterministic) rollouts honest
    slack = 1e-12 * (1.0 + abs(v0))
    ok = (j_mean <= v0 + se_mult * j_se + slack
          and j_mean >= v0 - se_mult * j_se - tol)
    return {
        "j_mean": j_mean, "j_se": j_se, "v0": v0, "ok": bool(ok),
        "n_paths": int(gains.size), "n_excluded": int(bundle.n_excluded),
    }
