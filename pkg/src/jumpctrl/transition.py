"""Shared one-step transition kernel for the backward solvers.

Both the penalized backward recursion and the dynamic-programming iteration
advance values through this module: the same lattice geometry, the same
quadrature nodes, the same interpolation.  ``kernel_checksum`` hashes the
bytecode of the functions involved; solver artifacts record it so
cross-checks can assert that no second kernel crept in.

The conditional expectation over one step combines a Gauss-Hermite rule for
the Brownian factor with a truncated-Poisson enumeration of jump outcomes
(per-jump marks from the atom list or a small Gauss rule).  Every jump in a
step displaces by gamma evaluated at the step's left node, exactly as the
path integrator does.  Optionally the node set is replaced by common Monte
Carlo draws (one set per time step, shared across lattice nodes, regimes
and penalization levels, so comparisons stay coherent).
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import stream
from .problem import ProblemSpec, update_running_functional

#: per-jump quadrature nodes for continuous mark laws, by jump count
_NODES_BY_COUNT = {1: 8, 2: 4, 3: 3, 4: 2}
MAX_JUMPS_PER_STEP = 4


# ---------------------------------------------------------------------------
# Lattice geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeGrid:
    """Uniform product lattice over the (possibly augmented) state."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
        for ax in axes:
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise ValueError("each axis must be an increasing 1-d grid")
        object.__setattr__(self, "axes", axes)

    @property
    def shape(self) -> tuple:
        return tuple(ax.size for ax in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def nodes(self) -> np.ndarray:
        """(P, D) array of all lattice points, C-order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def bounds(self) -> list:
        return [(float(ax[0]), float(ax[-1])) for ax in self.axes]


def default_node_count(spec: ProblemSpec) -> int:
    """Per-axis node count: dense in 1-d, moderate for product lattices."""
    return 201 if spec.total_dim == 1 else 45


def default_state_grid(spec: ProblemSpec, n_nodes: int | None = None,
                       seed: int = 0, n_pilot: int = 256,
                       sd_multiplier: float = 5.0) -> LatticeGrid:
    """Lattice bounds from a pilot bundle under the reference dynamics.

    Bounds are the running envelope of the pilot mean plus/minus
    ``sd_multiplier`` marginal standard deviations, padded by
    ``max(0.5, 0.05 |x0|)`` so degenerate (deterministic) families still get
    a usable axis.  Deterministic in (spec, seed).
    """
    if n_nodes is None:
        n_nodes = default_node_count(spec)
    from . import sim  # local import: sim does not depend on this module

    pilot_seed = (seed * 0x9E3779B9 + 0x7F4A7C15) & 0x7FFFFFFFFFFFFFFF
    bundle = sim.simulate_bundle(spec, n_pilot, seed=pilot_seed,
                                 n_steps=max(16, spec.default_steps() // 4))
    states = bundle.states[bundle.included()]
    mean = states.mean(axis=0)                    # (N+1, D)
    sd = states.std(axis=0)
    lo = (mean - sd_multiplier * sd).min(axis=0)
    hi = (mean + sd_multiplier * sd).max(axis=0)
    x0 = np.abs(spec.initial_augmented(
        spec.initial_law.mean[None, :]))[0]
    pad = np.maximum(0.5, 0.05 * x0)
    axes = tuple(np.linspace(lo[j] - pad[j], hi[j] + pad[j], n_nodes)
                 for j in range(states.shape[2]))
    return LatticeGrid(axes=axes)


# ---------------------------------------------------------------------------
# Interpolation (clamped multilinear)
# ---------------------------------------------------------------------------

def multilinear(axes: tuple, values: np.ndarray, points: np.ndarray,
                count_in: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Clamped multilinear interpolation; returns (values, n_clamped).

    Clamping to the lattice box keeps the operator monotone: the output is
    a convex combination of stored values with nonnegative weights.  The
    clamp count covers all points, or only those flagged by ``count_in``
    (so callers can ignore the box's own boundary layer).
    """
    points = np.atleast_2d(points)
    n, d = points.shape
    if d != len(axes):
        raise ValueError("point dimension does not match the lattice")
    outside = np.zeros(n, dtype=bool)
    idx = []
    frac = []
    for j, ax in enumerate(axes):
        x = points[:, j]
        outside |= (x < ax[0]) | (x > ax[-1])
        xc = np.clip(x, ax[0], ax[-1])
        i = np.clip(np.searchsorted(ax, xc, side="right") - 1, 0, ax.size - 2)
        idx.append(i)
        frac.append((xc - ax[i]) / (ax[i + 1] - ax[i]))
    if count_in is not None:
        outside = outside & count_in
    clamped = int(np.count_nonzero(outside))
    out = np.zeros(n)
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(n)
        loc = []
        for j, c in enumerate(corner):
            w = w * (frac[j] if c else 1.0 - frac[j])
            loc.append(idx[j] + c)
        out += w * values[tuple(loc)]
    return out, clamped


# ---------------------------------------------------------------------------
# One-step outcome enumeration
# ---------------------------------------------------------------------------

def _poisson_truncated(rate_dt: float, k_max: int) -> np.ndarray:
    """Poisson(rate_dt) pmf truncated at k_max and renormalized."""
    ks = np.arange(k_max + 1)
    logp = ks * math.log(rate_dt) - rate_dt - np.array(
        [math.lgamma(k + 1) for k in ks]) if rate_dt > 0 else None
    if rate_dt <= 0:
        p = np.zeros(k_max + 1)
        p[0] = 1.0
        return p
    p = np.exp(logp)
    return p / p.sum()


def _jump_outcomes(spec: ProblemSpec, dt: float):
    """[(probability, marks tuple)] outcomes of the step's jump factor."""
    jump = spec.jump_measure
    if jump.total_rate <= 0.0 or spec.coefficients.gamma is None:
        return [(1.0, ())]
    pk = _poisson_truncated(jump.total_rate * dt, MAX_JUMPS_PER_STEP)
    atoms = jump.atoms()
    outcomes = [(float(pk[0]), ())]
    for k in range(1, MAX_JUMPS_PER_STEP + 1):
        if atoms is not None:
            z_nodes, z_weights = atoms
        else:
            z_nodes, z_weights = jump.gauss_nodes(_NODES_BY_COUNT[k])
        for combo in itertools.product(range(len(z_nodes)), repeat=k):
            w = float(pk[k]) * float(np.prod([z_weights[c] for c in combo]))
            outcomes.append((w, tuple(float(z_nodes[c]) for c in combo)))
    return outcomes


def _hermite_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def one_step_points(spec: ProblemSpec, t: float, dt: float, a_index: int,
                    x_nodes: np.ndarray, hermite_nodes: int = 8,
                    mc_nodes=None):
    """Reachable points and weights of one backward step from lattice nodes.

    ``x_nodes`` is (P, D) with D = core + augmentation; returns a list of
    (weight, points (P, D)) outcomes whose weights sum to 1.  With
    ``mc_nodes`` (from :func:`monte_carlo_nodes`) the quadrature is replaced
    by equally weighted common random draws.
    """
    x_nodes = np.atleast_2d(x_nodes)
    p_cnt, d_tot = x_nodes.shape
    d = spec.dim
    a_val = float(spec.control.points[a_index])
    coeff = spec.coefficients
    core = x_nodes[:, :d]
    decay = spec.decay_factor(dt)[None, :]

    drift = coeff.b(t, core, a_val) * dt
    jump = spec.jump_measure
    has_jumps = jump.total_rate > 0.0 and coeff.gamma is not None
    if has_jumps:
        z_nodes, z_weights = jump.gauss_nodes(32)
        comp = np.zeros((p_cnt, d))
        for zi, zw in zip(z_nodes, z_weights):
            comp += zw * coeff.gamma(t, core, a_val, np.full(p_cnt, zi))
        drift = drift - jump.total_rate * dt * comp

    sig = np.asarray(coeff.sigma(t, core, a_val))    # (P, d, m)
    sig_norm = float(np.max(np.abs(sig))) if sig.size else 0.0

    def finish(base_core, marks):
        out_core = base_core
        for z in marks:
            out_core = out_core + coeff.gamma(t, core, a_val,
                                              np.full(p_cnt, z))
        if d_tot > d:
            aug = update_running_functional(
                spec.augmentation, x_nodes[:, d], core[:, 0],
                out_core[:, 0], dt)
            return np.concatenate([out_core, aug[:, None]], axis=1)
        return out_core

    outcomes = []
    if mc_nodes is not None:
        xi_draws, mark_draws = mc_nodes
        w = 1.0 / len(xi_draws)
        for xi, marks in zip(xi_draws, mark_draws):
            shock = np.einsum("pdm,m->pd", sig, xi) * math.sqrt(dt)
            base = decay * (core + drift + shock)
            outcomes.append((w, finish(base, marks)))
        return outcomes

    if sig_norm > 0.0:
        h_nodes, h_weights = _hermite_nodes(hermite_nodes)
    else:
        h_nodes, h_weights = np.zeros(1), np.ones(1)
    jumps = _jump_outcomes(spec, dt)
    m_brown = spec.brownian_dim
    for h_combo in itertools.product(range(h_nodes.size), repeat=m_brown):
        xi = np.array([h_nodes[c] for c in h_combo])
        wh = float(np.prod([h_weights[c] for c in h_combo]))
        shock = np.einsum("pdm,m->pd", sig, xi) * math.sqrt(dt)
        base = decay * (core + drift + shock)
        for wj, marks in jumps:
            outcomes.append((wh * wj, finish(base, marks)))
    return outcomes


def monte_carlo_nodes(spec: ProblemSpec, dt: float, step_index: int,
                      n_draws: int, seed: int):
    """Common random nodes for the inner expectation of one time step.

    One draw is a Brownian shock plus a jump count with marks; the same set
    serves every lattice node, regime, and penalization level, which keeps
    ladder comparisons coherent under the Monte Carlo kernel too.
    """
    m = spec.brownian_dim
    cols = m + 1 + MAX_JUMPS_PER_STEP
    u = stream.uniform_block(seed * 1_000_003 + step_index,
                             stream.STREAM_INNER, n_draws, cols)
    from scipy.special import ndtri
    xi = ndtri(np.clip(u[:, :m], 1e-300, 1 - 1e-16))
    jump = spec.jump_measure
    mark_draws = []
    if jump.total_rate > 0.0 and spec.coefficients.gamma is not None:
        pk = _poisson_truncated(jump.total_rate * dt, MAX_JUMPS_PER_STEP)
        counts = np.searchsorted(np.cumsum(pk), u[:, m], side="right")
        for i in range(n_draws):
            k = int(counts[i])
            zs = jump.sample_marks(u[i, m + 1:m + 1 + k]) if k else ()
            mark_draws.append(tuple(float(z) for z in np.atleast_1d(zs))
                              if k else ())
    else:
        mark_draws = [()] * n_draws
    return list(xi), mark_draws


def expect_next(spec: ProblemSpec, t: float, dt: float, a_index: int,
                grid: LatticeGrid, next_values: np.ndarray,
                hermite_nodes: int = 8, mc_nodes=None,
                clamp_mask: np.ndarray | None = None) -> tuple[np.ndarray,
                                                               float]:
    """E[ v(t+dt, X') | X = lattice nodes, regime a ].

    ``next_values`` holds v(t+dt, .) on the lattice (same shape as the
    grid); the result is flat over the lattice's C-order nodes.  The second
    return is the probability-weighted count of one-step transitions that
    left the lattice box (dividing by the counted node count gives the
    fraction of transition mass the clamping touched).  ``clamp_mask``
    restricts that accounting to a flat subset of nodes, typically the
    interior (transitions from the outermost layer leave the box by
    construction and say nothing about sizing).
    """
    nodes = grid.nodes()
    outcomes = one_step_points(spec, t, dt, a_index, nodes,
                               hermite_nodes=hermite_nodes,
                               mc_nodes=mc_nodes)
    total = np.zeros(nodes.shape[0])
    clamp_mass = 0.0
    for w, pts in outcomes:
        vals, c = multilinear(grid.axes, next_values, pts,
                              count_in=clamp_mask)
        total += w * vals
        clamp_mass += w * c
    return total, clamp_mass


def interior_mask(grid: LatticeGrid) -> np.ndarray:
    """Flat mask of lattice nodes not on the outermost layer."""
    mask = np.ones(grid.shape, dtype=bool)
    for j in range(grid.ndim):
        sl = [slice(None)] * grid.ndim
        sl[j] = np.array([0, grid.shape[j] - 1])
        mask[tuple(sl)] = False
    return mask.ravel()


def kernel_checksum() -> str:
    """Bytecode hash of the kernel path shared by the backward solvers."""
    blobs = []
    for fn in (multilinear, _poisson_truncated, _jump_outcomes,
               _hermite_nodes, one_step_points, expect_next):
        blobs.append(fn.__code__.co_code)
    return hashlib.sha256(b"".join(blobs)).hexdigest()[:16]
