"""Penalized backward solvers for the regime-randomized control problem.

The switching constraint is enforced softly: at penalization level ``n`` the
backward step first takes a conditional expectation plus running reward,
then applies the penalty operator

    (T_n u)(a) = u(a) + n * dt * sum_b (u(b) - u(a))^+ * lambda0(b),

which charges the estimated advantage of jumping to a better regime.  Under
``n * dt * lambda0_mass <= 1`` the composed step is monotone, so values
computed on a common time grid increase nodewise in ``n`` and stay below
the dynamic-programming value.  Two independent routes are provided:

* a lattice recursion through the shared one-step kernel
  (:func:`solve_penalized_grid`), and
* a regression Monte Carlo recursion on simulated reference paths
  (:func:`solve_penalized_lsmc`), which never touches that kernel.

:func:`minimal_value` runs a ladder of levels and takes a limit;
:func:`constraint_gap` quantifies how hard the penalty is working; and
:func:`check_randomized_dpp` replays an intermediate-horizon optimization
against the solved field.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import girsanov, sim, transition
from .problem import ProblemSpec
from .transition import LatticeGrid


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PenalizedField:
    """Lattice solution of one penalization level."""

    level_n: int
    time_grid: np.ndarray          # (Nt+1,)
    grid: LatticeGrid
    values: np.ndarray             # (Nt+1, *shape, A) after penalty
    continuation: np.ndarray       # (Nt, *shape, A) pre-penalty
    metadata: dict

    @property
    def n_steps(self) -> int:
        return self.time_grid.size - 1

    def value_at_node(self, k: int, points: np.ndarray,
                      a_index: int) -> np.ndarray:
        vals, _ = transition.multilinear(self.grid.axes,
                                         self.values[k][..., a_index],
                                         np.atleast_2d(points))
        return vals

    def value_at_origin(self, spec: ProblemSpec) -> float:
        x0 = spec.initial_augmented(spec.initial_law.mean[None, :])
        return float(self.value_at_node(0, x0, spec.randomization.a0_index)[0])

    def snap_time(self, t: float) -> tuple[int, float]:
        """Nearest time node (index, node time)."""
        k = int(np.argmin(np.abs(self.time_grid - t)))
        return k, float(self.time_grid[k])


@dataclass(frozen=True)
class BsdeQuintuple:
    """Regression Monte Carlo solution summary at one level.

    ``y0``/``y0_se`` estimate the value at the initial point; the per-node
    means trace the value, the martingale integrands, the nonnegative
    constraint charge and its accumulated compensator along the reference
    paths.  ``k_terminal`` keeps the pathwise terminal compensator so the
    constraint report can form second moments.
    """

    level_n: int
    time_grid: np.ndarray
    y0: float
    y0_se: float
    n_paths: int
    n_excluded: int
    y_mean: np.ndarray             # (Nt+1,)
    z_mean: np.ndarray             # (Nt, m)
    l_mean: np.ndarray             # (Nt,)
    k_mean: np.ndarray             # (Nt+1,) nondecreasing
    r_pos_mean: np.ndarray         # (Nt,) mean of sum_b (R)^+ lambda0_b
    constraint_integral: np.ndarray  # (M,) int sum_b (R)^+ lambda0_b dt
    k_terminal: np.ndarray         # (M,) = level_n * constraint_integral
    ridge_events: tuple
    carried_cells: tuple           # (step, regime) cells with no data
    metadata: dict


@dataclass(frozen=True)
class ConstraintReport:
    """How strongly the penalty binds at one level."""

    level_n: int
    phi: float                     # squared mean constraint integral
    k_ratio: float                 # E|K_T|^2 / n^2
    mean_integral: float
    se_integral: float
    n_paths: int


@dataclass(frozen=True)
class LadderReport:
    """Increasing-level summary with its limit."""

    solver: str
    levels: tuple
    values: tuple
    ses: tuple
    regime_spreads: tuple
    growth_ratios: tuple
    growth_bound: float
    monotone_ok: bool
    monotone_max_violation: float
    value_limit: float
    extrapolation: str
    n_time_steps: int
    fingerprint: str
    kernel: str
    last_field: object = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "solver": self.solver, "levels": list(self.levels),
            "values": list(self.values), "ses": list(self.ses),
            "regime_spreads": list(self.regime_spreads),
            "growth_ratios": list(self.growth_ratios),
            "growth_bound": self.growth_bound,
            "monotone_ok": self.monotone_ok,
            "monotone_max_violation": self.monotone_max_violation,
            "value_limit": self.value_limit,
            "extrapolation": self.extrapolation,
            "n_time_steps": self.n_time_steps,
            "fingerprint": self.fingerprint, "kernel": self.kernel,
        }


# ---------------------------------------------------------------------------
# Lattice route
# ---------------------------------------------------------------------------

def _stability(level_n: int, dt: float, mass: float) -> float:
    return level_n * dt * mass


def default_time_steps(spec: ProblemSpec, max_level: int) -> int:
    """Common grid fine enough for the integrator and the stability bound."""
    mass = spec.randomization.total_mass
    return max(spec.default_steps(),
               int(math.ceil(2.0 * max_level * mass * spec.horizon)))


def solve_penalized_grid(spec: ProblemSpec, level_n: int,
                         n_time_steps: int | None = None,
                         grid: LatticeGrid | None = None,
                         n_state_nodes: int | None = None, seed: int = 0,
                         hermite_nodes: int = 8,
                         mc_inner: int | None = None,
                         mc_seed: int = 0) -> PenalizedField:
    """Backward lattice recursion at one penalization level.

    Runs on [0, horizon] with ``n_time_steps`` uniform steps (default keeps
    the monotonicity bound with slack 2).  ``mc_inner`` switches the inner
    conditional expectation to common-random-number Monte Carlo with that
    many draws per step.
    """
    if level_n < 1:
        raise ValueError("penalization level must be >= 1")
    mass = spec.randomization.total_mass
    if n_time_steps is None:
        n_time_steps = default_time_steps(spec, level_n)
    if grid is None:
        grid = transition.default_state_grid(spec, n_state_nodes, seed)
    time_grid = np.linspace(0.0, spec.horizon, n_time_steps + 1)
    dt = spec.horizon / n_time_steps
    stability = _stability(level_n, dt, mass)
    if stability > 1.0 + 1e-12:
        warnings.warn("penalty step exceeds the monotone stability bound; "
                      "values may lose nodewise comparability",
                      RuntimeWarning)

    shape = grid.shape
    n_controls = spec.control.size
    nodes = grid.nodes()
    p_cnt = nodes.shape[0]
    core = nodes[:, :spec.dim]
    weights = spec.randomization.lambda0_weights

    values = np.empty((n_time_steps + 1, *shape, n_controls))
    continuation = np.empty((n_time_steps, *shape, n_controls))
    terminal = spec.coefficients.g(nodes)
    for a in range(n_controls):
        values[-1][..., a] = terminal.reshape(shape)

    clamp_mass = 0.0
    n_calls = 0
    interior = transition.interior_mask(grid)
    n_interior = int(interior.sum())

    flat_u = np.empty((p_cnt, n_controls))
    for k in range(n_time_steps - 1, -1, -1):
        t_k = time_grid[k]
        mc_nodes = None
        if mc_inner is not None:
            mc_nodes = transition.monte_carlo_nodes(spec, dt, k, mc_inner,
                                                    mc_seed)
        for a in range(n_controls):
            a_val = float(spec.control.points[a])
            cont, c = transition.expect_next(
                spec, t_k, dt, a, grid, values[k + 1][..., a],
                hermite_nodes=hermite_nodes, mc_nodes=mc_nodes,
                clamp_mask=interior)
            clamp_mass += c
            n_calls += 1
            flat_u[:, a] = cont + spec.coefficients.f(t_k, core, a_val) * dt
        continuation[k] = flat_u.reshape(*shape, n_controls)
        gain = np.maximum(flat_u[:, None, :] - flat_u[:, :, None], 0.0)
        penalty = level_n * dt * (gain @ weights)
        values[k] = (flat_u + penalty).reshape(*shape, n_controls)

    clamp_fraction = clamp_mass / max(n_calls * n_interior, 1)
    if clamp_fraction >= 0.01:
        warnings.warn(f"state grid missed {100 * clamp_fraction:.2f}% of "
                      f"one-step transition mass ({clamp_mass:.0f} clamped "
                      "lookups); widen the grid", RuntimeWarning)
    metadata = {
        "solver": "grid", "level_n": level_n, "dt": dt,
        "stability": stability, "monotone_safe": stability <= 1.0 + 1e-12,
        "clamp_fraction": clamp_fraction,
        "kernel": transition.kernel_checksum(),
        "fingerprint": spec.fingerprint(), "hermite_nodes": hermite_nodes,
        "mc_inner": mc_inner, "seed": seed,
    }
    return PenalizedField(level_n=level_n, time_grid=time_grid, grid=grid,
                          values=values, continuation=continuation,
                          metadata=metadata)


# ---------------------------------------------------------------------------
# Regression Monte Carlo route
# ---------------------------------------------------------------------------

def _monomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of the state coordinates up to total degree."""
    n, d = x.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            col = np.ones(n)
            for j in combo:
                col = col * x[:, j]
            cols.append(col)
    return np.column_stack(cols)


def _fit_regime(phi: np.ndarray, y: np.ndarray, ridge: float):
    """Least squares with a logged ridge fallback on rank deficiency."""
    beta, _, rank, _ = np.linalg.lstsq(phi, y, rcond=None)
    if rank < phi.shape[1]:
        gram = phi.T @ phi + ridge * np.eye(phi.shape[1])
        beta = np.linalg.solve(gram, phi.T @ y)
        return beta, True
    return beta, False


def solve_penalized_lsmc(spec: ProblemSpec, level_n: int, bundle,
                         degree: int = 2,
                         ridge: float = 1e-8) -> BsdeQuintuple:
    """Regression Monte Carlo recursion at one penalization level.

    ``bundle`` holds reference-measure paths; reusing one bundle across
    levels keeps ladder comparisons on common random numbers.  Each
    backward step regresses the next-step value, read at the path's
    *current* regime, on polynomial state features per regime, then applies
    the same explicit penalization as the lattice route.  Evaluating the
    next value at the current regime (rather than the switched one) is what
    makes both routes estimate the same frozen-regime recursion, so their
    initial values are directly comparable.  The step-0 standard error
    covers the Monte Carlo scatter of the step-0 regression targets.
    """
    if level_n < 1:
        raise ValueError("penalization level must be >= 1")
    keep = bundle.included()
    states = bundle.states[keep]
    regimes = bundle.regimes[keep]
    brownian = bundle.brownian_increments[keep]
    m_used = states.shape[0]
    if m_used == 0:
        raise ValueError("no paths")
    n_excluded = int(bundle.n_excluded)
    n_time_steps = bundle.n_steps

    time_grid = bundle.time_grid
    dt = float(time_grid[1] - time_grid[0])
    weights = spec.randomization.lambda0_weights
    n_controls = spec.control.size
    ctrl_pts = spec.control.points
    n_brownian = spec.brownian_dim
    rows_idx = np.arange(m_used)

    pi_counts = _pi_counts_per_step(bundle, keep, n_time_steps)

    # value matrix at the next node: V[i, b] = v^n(t_{k+1}, X_{i,k+1}, b)
    g_terminal = spec.coefficients.g(states[:, -1, :])
    v_next = np.repeat(g_terminal[:, None], n_controls, axis=1)
    y_mean = np.empty(n_time_steps + 1)
    y_mean[-1] = g_terminal.mean()
    z_mean = np.zeros((n_time_steps, n_brownian))
    l_mean = np.zeros(n_time_steps)
    r_pos_mean = np.zeros(n_time_steps)
    pen_means = np.zeros(n_time_steps)
    s_int = np.zeros(m_used)
    ridge_events = []
    carried = []
    betas_prev = [None] * n_controls
    y0_se = 0.0

    for k in range(n_time_steps - 1, -1, -1):
        t_k = float(time_grid[k])
        x_k = states[:, k, :]
        i_k = regimes[:, k]
        phi = _monomial_features(x_k, degree)
        target = v_next[rows_idx, i_k]
        if k == 0:
            y0_se = float(target.std(ddof=1) / math.sqrt(m_used))

        tilde = np.empty((m_used, n_controls))
        betas = [None] * n_controls
        have_data = np.zeros(n_controls)
        pooled = None
        for a in range(n_controls):
            sel = i_k == a
            if np.any(sel):
                beta, used_ridge = _fit_regime(phi[sel], target[sel], ridge)
                betas[a] = beta
                have_data[a] = 1.0
                if used_ridge:
                    ridge_events.append((k, a))
            else:
                # no rows in this regime: fill the value column from the
                # previous step's fit (or a pooled fit), but keep the cell
                # out of the advantage estimate - no data, no advantage
                if betas_prev[a] is not None:
                    betas[a] = betas_prev[a]
                else:
                    if pooled is None:
                        pooled, _ = _fit_regime(phi, target, ridge)
                    betas[a] = pooled
                carried.append((k, a))
            f_a = spec.coefficients.f(t_k, x_k[:, :spec.dim],
                                      float(ctrl_pts[a]))
            tilde[:, a] = phi @ betas[a] + f_a * dt

        w_eff = weights * have_data
        own = tilde[rows_idx, i_k]
        r_pos = np.maximum(tilde - own[:, None], 0.0) @ w_eff
        gain = np.maximum(tilde[:, None, :] - tilde[:, :, None], 0.0)
        v_next = tilde + level_n * dt * (gain @ w_eff)

        pen_own = level_n * dt * r_pos
        s_int += dt * r_pos
        r_pos_mean[k] = r_pos.mean()
        pen_means[k] = pen_own.mean()
        y_mean[k] = v_next[rows_idx, i_k].mean()
        dw = brownian[:, k, :]
        z_mean[k] = (target[:, None] * dw).mean(axis=0) / dt
        rate = spec.jump_measure.total_rate
        if rate > 0.0:
            dn = pi_counts[:, k] - rate * dt
            l_mean[k] = float((target * dn).mean() / (rate * dt))
        betas_prev = betas

    k_mean = np.zeros(n_time_steps + 1)
    k_mean[1:] = np.cumsum(pen_means)
    y0 = float(v_next[rows_idx, regimes[:, 0]].mean())
    metadata = {
        "solver": "lsmc", "level_n": level_n, "dt": dt, "degree": degree,
        "stability": _stability(level_n, dt, spec.randomization.total_mass),
        "fingerprint": spec.fingerprint(), "seed": bundle.seed,
        "n_time_steps": n_time_steps,
    }
    return BsdeQuintuple(
        level_n=level_n, time_grid=time_grid, y0=y0, y0_se=y0_se,
        n_paths=m_used, n_excluded=n_excluded, y_mean=y_mean,
        z_mean=z_mean, l_mean=l_mean, k_mean=k_mean, r_pos_mean=r_pos_mean,
        constraint_integral=s_int, k_terminal=level_n * s_int,
        ridge_events=tuple(ridge_events), carried_cells=tuple(carried),
        metadata=metadata)


def _pi_counts_per_step(bundle, keep: np.ndarray,
                        n_steps: int) -> np.ndarray:
    """(M_kept, Nt) jump counts of the driving measure per step."""
    time_grid = bundle.time_grid
    pi = bundle.pi
    m_all = bundle.states.shape[0]
    counts = np.zeros((m_all, n_steps))
    if pi is not None and pi.times.size:
        path_ids = np.repeat(np.arange(m_all), np.diff(pi.indptr))
        step = np.clip(np.searchsorted(time_grid, pi.times, side="right")
                       - 1, 0, n_steps - 1)
        np.add.at(counts, (path_ids, step), 1.0)
    return counts[keep]


# ---------------------------------------------------------------------------
# Constraint diagnostics
# ---------------------------------------------------------------------------

def constraint_gap(source, spec: ProblemSpec | None = None,
                   n_paths: int = 20_000, seed: int = 0) -> ConstraintReport:
    """Penalty pressure at one level.

    ``phi`` is the squared mean of the pathwise constraint integral
    int sum_b (advantage)^+ lambda0(b) dt; ``k_ratio`` is the second moment
    of the accumulated compensator divided by the squared level.  Both are
    expected to shrink as the level grows.  Accepts either regression
    output (pathwise integrals already recorded) or a lattice field, in
    which case reference paths are simulated and the field's pre-penalty
    advantages are read off the lattice.
    """
    if isinstance(source, BsdeQuintuple):
        s = source.constraint_integral
        n = s.size
        return ConstraintReport(
            level_n=source.level_n, phi=float(s.mean() ** 2),
            k_ratio=float((s ** 2).mean()), mean_integral=float(s.mean()),
            se_integral=float(s.std(ddof=1) / math.sqrt(n)), n_paths=n)
    if not isinstance(source, PenalizedField):
        raise TypeError("source must be a BsdeQuintuple or PenalizedField")
    if spec is None:
        raise ValueError("a problem spec is required with a lattice field")
    if spec.fingerprint() != source.metadata["fingerprint"]:
        raise ValueError("spec mismatch between solver artifacts")

    n_steps = source.n_steps
    bundle = sim.simulate_bundle(spec, n_paths, seed, n_steps=n_steps)
    keep = bundle.included()
    states = bundle.states[keep]
    regimes = bundle.regimes[keep]
    m_used = states.shape[0]
    if m_used == 0:
        raise ValueError("no paths")
    dt = float(source.time_grid[1] - source.time_grid[0])
    weights = spec.randomization.lambda0_weights
    n_controls = spec.control.size
    s = np.zeros(m_used)
    for k in range(n_steps):
        x_k = states[:, k, :]
        cont = np.empty((m_used, n_controls))
        for a in range(n_controls):
            cont[:, a], _ = transition.multilinear(
                source.grid.axes, source.continuation[k][..., a], x_k)
        own = cont[np.arange(m_used), regimes[:, k]]
        s += dt * (np.maximum(cont - own[:, None], 0.0) @ weights)
    return ConstraintReport(
        level_n=source.level_n, phi=float(s.mean() ** 2),
        k_ratio=float((s ** 2).mean()), mean_integral=float(s.mean()),
        se_integral=float(s.std(ddof=1) / math.sqrt(m_used)),
        n_paths=m_used)


# ---------------------------------------------------------------------------
# Level ladder
# ---------------------------------------------------------------------------

def _aitken_limit(values) -> float:
    v0, v1, v2 = values[-3:]
    denom = (v2 - v1) - (v1 - v0)
    if abs(denom) < 1e-14:
        return float(v2)
    return float(v2 - (v2 - v1) ** 2 / denom)


def minimal_value(spec: ProblemSpec, levels=(1, 2, 4, 8, 16),
                  solver: str = "grid", extrapolation: str = "last",
                  n_time_steps: int | None = None,
                  n_state_nodes: int | None = None, seed: int = 0,
                  n_paths: int = 50_000,
                  hermite_nodes: int = 8,
                  mc_inner: int | None = None) -> LadderReport:
    """Ladder of penalization levels on one common time grid.

    The common grid keeps levels nodewise comparable (lattice route), so
    monotonicity in the level is checked exactly rather than statistically.
    ``extrapolation`` is ``last`` (largest level) or ``richardson``
    (one Aitken step on the last three levels, needs >= 3).
    """
    levels = tuple(int(n) for n in levels)
    if sorted(levels) != list(levels) or len(set(levels)) != len(levels):
        raise ValueError("levels must be strictly increasing")
    if extrapolation not in ("last", "richardson"):
        raise ValueError("unknown extrapolation rule")
    if extrapolation == "richardson" and len(levels) < 3:
        raise ValueError("need at least 3 levels for extrapolation")
    if n_time_steps is None:
        n_time_steps = default_time_steps(spec, max(levels))
    pbar = spec.regularity.growth_pbar

    values, ses, spreads, ratios = [], [], [], []
    monotone_violation = 0.0
    growth_bound = None
    last_field = None
    kernel = ""

    if solver == "grid":
        grid = transition.default_state_grid(spec, n_state_nodes, seed)
        node_norm = 1.0 + np.max(np.abs(grid.nodes()), axis=1) ** pbar
        prev_values = None
        for n in levels:
            fld = solve_penalized_grid(spec, n, n_time_steps=n_time_steps,
                                       grid=grid, seed=seed,
                                       hermite_nodes=hermite_nodes,
                                       mc_inner=mc_inner)
            values.append(fld.value_at_origin(spec))
            ses.append(0.0)
            at0 = _origin_values(fld, spec)
            spreads.append(float(at0.max() - at0.min()))
            flat = np.abs(fld.values.reshape(n_time_steps + 1, -1,
                                             spec.control.size))
            ratio = float((flat / node_norm[None, :, None]).max())
            ratios.append(ratio)
            if growth_bound is None:
                growth_bound = 1.5 * ratio
            if prev_values is not None:
                monotone_violation = max(
                    monotone_violation,
                    float((prev_values - fld.values).max()))
            prev_values = fld.values
            last_field = fld
            kernel = fld.metadata["kernel"]
    elif solver == "lsmc":
        bundle = sim.simulate_bundle(spec, n_paths, seed,
                                     n_steps=n_time_steps)
        for n in levels:
            quint = solve_penalized_lsmc(spec, n, bundle)
            values.append(quint.y0)
            ses.append(quint.y0_se)
            spreads.append(float("nan"))
            ratio = float(np.max(np.abs(quint.y_mean))
                          / (1.0 + abs(_x0_norm(spec)) ** pbar))
            ratios.append(ratio)
            if growth_bound is None:
                growth_bound = 1.5 * ratio
            if len(values) >= 2:
                drop = values[-2] - values[-1]
                slack = 3.0 * math.hypot(ses[-1], ses[-2])
                monotone_violation = max(monotone_violation,
                                         float(drop - slack))
            last_field = quint
    else:
        raise ValueError("solver must be 'grid' or 'lsmc'")

    limit = (values[-1] if extrapolation == "last"
             else _aitken_limit(values))
    return LadderReport(
        solver=solver, levels=levels, values=tuple(values), ses=tuple(ses),
        regime_spreads=tuple(spreads), growth_ratios=tuple(ratios),
        growth_bound=float(growth_bound),
        monotone_ok=monotone_violation <= spec.tolerances["tol_monotone"],
        monotone_max_violation=float(monotone_violation),
        value_limit=float(limit), extrapolation=extrapolation,
        n_time_steps=n_time_steps, fingerprint=spec.fingerprint(),
        kernel=kernel, last_field=last_field)


def _origin_values(fld: PenalizedField, spec: ProblemSpec) -> np.ndarray:
    x0 = spec.initial_augmented(spec.initial_law.mean[None, :])
    return np.array([fld.value_at_node(0, x0, a)[0]
                     for a in range(spec.control.size)])


def _x0_norm(spec: ProblemSpec) -> float:
    x0 = spec.initial_augmented(spec.initial_law.mean[None, :])[0]
    return float(np.max(np.abs(x0)))


# ---------------------------------------------------------------------------
# Dynamic-programming consistency of the randomized formulation
# ---------------------------------------------------------------------------

def check_randomized_dpp(fld: PenalizedField, spec: ProblemSpec,
                         t_prime: float, n_paths: int = 20_000,
                         seed: int = 0, se_mult: float | None = None,
                         tol: float | None = None) -> dict:
    """Restart-at-``t_prime`` consistency of the solved field.

    Simulates the controlled system to an interior time under a small
    family of intensity tilts (reference, and advantage-seeking tilts at
    two strengths built from the field itself), adds the field value at the
    reached point, and compares the best achieved gain with the field's
    initial value.  The two agree within Monte Carlo noise plus tolerance
    when the field is internally time-consistent.
    """
    if se_mult is None:
        se_mult = spec.tolerances["se_multiplier"]
    if tol is None:
        tol = spec.tolerances["tol_value"]
    k_prime, t_snap = fld.snap_time(t_prime)
    if k_prime < 1 or k_prime > fld.n_steps:
        raise ValueError("t_prime must snap to an interior time node")
    if fld.metadata["fingerprint"] != spec.fingerprint():
        raise ValueError("spec mismatch between solver artifacts")

    level_n = fld.level_n
    cands = [girsanov.IntensityControl.const(1.0)]
    for strength in {max(2.0, level_n / 4.0), float(max(2, level_n))}:
        cands.append(girsanov.IntensityControl.argmax_tilt(
            fld.time_grid, fld.grid.axes, fld.values, strength))
    spec_cut = dataclasses.replace(spec, horizon=t_snap)

    estimates = []
    for i, nu in enumerate(cands):
        bundle = girsanov.simulate_tilted_theta(
            nu, spec_cut, seed + 7919 * i, n_paths, n_steps=k_prime)
        keep = bundle.included()
        x_end = bundle.states[keep][:, -1, :]
        i_end = bundle.regimes[keep][:, -1]
        tail = np.empty(x_end.shape[0])
        for a in range(spec.control.size):
            rows = i_end == a
            if np.any(rows):
                tail[rows] = fld.value_at_node(k_prime, x_end[rows], a)
        total = bundle.running_reward[keep] + tail
        estimates.append({
            "nu_id": nu.nu_id, "mean": float(total.mean()),
            "se": float(total.std(ddof=1) / math.sqrt(total.size)),
            "n_paths": int(total.size)})

    best = max(estimates, key=lambda e: e["mean"])
    v0 = fld.value_at_origin(spec)
    diff = best["mean"] - v0
    band = se_mult * best["se"] + tol
    return {
        "t_prime": t_snap, "step_index": k_prime, "v0": v0,
        "best_gain": best["mean"], "best_nu": best["nu_id"],
        "diff": diff, "band": band, "ok": bool(abs(diff) <= band),
        "estimates": estimates,
    }
