"""Per-agent density fusion over a network.

Each tick every agent predicts its posterior through the target kernel, forms
a normalized likelihood from its own measurement, fuses the neighbors'
previous fusion states with its likelihood increment, raises the fusion state
to the agent count to approximate the joint likelihood, and runs the Bayes
update. The fusion recursion for agent i at tick k (k >= 2) is

    U_k^i = normalize( prod_j (U_{k-1}^j)^{A[i, j]} * L_k^i / L_{k-1}^i ),

with U_1^i = L_1^i. The power estimate T_k^i = normalize((U_k^i)^n) tracks
the normalized product of all agents' current likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .density import (
    DensityGrid,
    LOG_FLOOR,
    ParticleSet,
    StateGrid,
    _check_same_grid,
    l1_distance,
)
from .errors import KernelInvalid, WeightRowInvalid
from .pools import joint_likelihood, logop, PoolWeights

_KERNEL_TOL = 1e-6
_ROW_TOL = 1e-9


@dataclass(frozen=True)
class TargetModel:
    """Target motion: a state sampler and a grid-to-grid transition kernel.

    ``kernel[j, i]`` is the transition density from cell j to cell i, so each
    row integrates to one over the grid.
    """

    sample: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    kernel: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise KernelInvalid("kernel must be square")
        if np.any(k < 0) or np.any(np.isnan(k)):
            raise KernelInvalid("kernel entries must be nonnegative")
        object.__setattr__(self, "kernel", k)

    def validate_rows(self, grid: StateGrid) -> None:
        rows = self.kernel.sum(axis=1) * grid.cell_volume
        if np.abs(rows - 1.0).max() > _KERNEL_TOL:
            raise KernelInvalid(
                f"kernel rows integrate to 1 within {np.abs(rows - 1.0).max():.3g} > {_KERNEL_TOL}"
            )

    @classmethod
    def static(cls, grid: StateGrid) -> "TargetModel":
        """Identity dynamics: the state does not move."""
        k = np.eye(grid.n_cells) / grid.cell_volume
        return cls(sample=lambda x, rng: x, kernel=k)

    @classmethod
    def gaussian_walk(cls, grid: StateGrid, cov) -> "TargetModel":
        """Random walk with Gaussian increments, truncated to the grid box.

        Rows are renormalized so mass leaving the box is reflected back
        instead of lost.
        """
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        cells = grid.cells
        diff = cells[None, :, :] - cells[:, None, :]
        sol = np.einsum("abi,ij->abj", diff, np.linalg.inv(cov))
        log_k = -0.5 * np.einsum("abi,abi->ab", diff, sol)
        k = np.exp(log_k - logsumexp(log_k, axis=1, keepdims=True)) / grid.cell_volume
        chol = np.linalg.cholesky(cov)

        def sample(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            noise = rng.standard_normal(x.shape) @ chol.T
            return np.clip(x + noise, grid.lower, grid.upper)

        return cls(sample=sample, kernel=k)


@dataclass(frozen=True)
class SensorModel:
    """A measurement sampler plus a log likelihood evaluator on a grid."""

    measure: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_likelihood: Callable[[np.ndarray, StateGrid], np.ndarray]


@dataclass(frozen=True)
class ChannelNoise:
    """Bounded multiplicative corruption of exchanged and modeled densities.

    Each corrupted cell picks up a factor in [exp(-eps), exp(eps)].
    """

    eps_u: float
    eps_l: float
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if self.eps_u < 0 or self.eps_l < 0:
            raise ValueError("noise bounds must be nonnegative")

    @classmethod
    def from_seed(cls, eps_u: float, eps_l: float, seed: int) -> "ChannelNoise":
        return cls(eps_u, eps_l, np.random.default_rng(seed))


def _perturb(pdf: DensityGrid, eps: float, rng: np.random.Generator) -> DensityGrid:
    if eps == 0.0:
        return pdf
    xi = rng.uniform(-eps, eps, size=pdf.grid.n_cells)
    return DensityGrid.from_log(pdf.grid, pdf.log_values + xi)


def inject_channel_noise(u: DensityGrid, noise: ChannelNoise) -> DensityGrid:
    """Corrupt a communicated fusion density within the channel budget."""
    return _perturb(u, noise.eps_u, noise.rng)


@dataclass(frozen=True)
class AgentState:
    """One agent's densities after a tick.

    ``w`` is the posterior, ``s`` the predicted prior, ``l`` the latest
    normalized likelihood, ``u`` the fusion state, ``t`` the power estimate
    of the joint likelihood. ``particles`` optionally mirrors ``w``.
    """

    w: DensityGrid
    s: DensityGrid | None = None
    l: DensityGrid | None = None
    u: DensityGrid | None = None
    t: DensityGrid | None = None
    particles: ParticleSet | None = None

    @classmethod
    def initial(cls, prior: DensityGrid) -> "AgentState":
        return cls(w=prior)


def predict(w: DensityGrid, tm: TargetModel) -> DensityGrid:
    """Push a posterior through the transition kernel (Chapman-Kolmogorov)."""
    tm.validate_rows(w.grid)
    vals = (w.values @ tm.kernel) * w.grid.cell_volume
    return DensityGrid.from_values(w.grid, vals)


def normalized_likelihood(
    sm: SensorModel | None,
    y: np.ndarray | None,
    grid: StateGrid,
) -> DensityGrid:
    """Normalized likelihood of a measurement; uniform without a sensor."""
    if sm is None or y is None:
        return DensityGrid.uniform(grid)
    return DensityGrid.from_log(grid, sm.log_likelihood(y, grid))


def _check_row(weights: Sequence[float]) -> None:
    w = np.asarray(weights, dtype=float)
    if np.any(w < -1e-15) or abs(w.sum() - 1.0) > _ROW_TOL:
        raise WeightRowInvalid("fusion weights must be nonnegative and sum to 1")


def fuse(
    likelihood: DensityGrid,
    likelihood_prev: DensityGrid | None,
    received: Sequence[tuple[DensityGrid, float]],
    k: int,
) -> DensityGrid:
    """One fusion step; ``received`` holds (U_{k-1}^j, A[i, j]) incl. self.

    At k = 1 the fusion state is the likelihood itself.
    """
    if k < 1:
        raise ValueError("tick index is 1 based")
    if k == 1:
        return likelihood
    if likelihood_prev is None:
        raise ValueError("previous likelihood required after the first tick")
    _check_row([w for _, w in received])
    _check_same_grid(likelihood, likelihood_prev, *[u for u, _ in received])
    acc = np.zeros(likelihood.grid.n_cells)
    for u, w in received:
        acc += w * u.log_values
    acc += likelihood.log_values - likelihood_prev.log_values
    return DensityGrid.from_log(likelihood.grid, acc)


def power_estimate(u: DensityGrid, n_agents: int) -> DensityGrid:
    """Normalize U^n, the estimate of the joint likelihood."""
    if n_agents < 1:
        raise ValueError("need at least one agent")
    return DensityGrid.from_log(u.grid, n_agents * u.log_values)


def update(s: DensityGrid, t: DensityGrid) -> DensityGrid:
    """Bayes update of the predicted prior with the fused likelihood power."""
    _check_same_grid(s, t)
    return DensityGrid.from_log(s.grid, s.log_values + t.log_values)


@dataclass(frozen=True)
class StepDiagnostics:
    joint: DensityGrid
    l1_to_joint: np.ndarray


def dbf_step(
    agents: Sequence[AgentState],
    adjacency,
    k: int,
    target_model: TargetModel | None,
    sensor_models: Sequence[SensorModel | None],
    measurements: Sequence[np.ndarray | None],
    channel_noise: ChannelNoise | None = None,
) -> tuple[list[AgentState], StepDiagnostics]:
    """Advance every agent one tick and report distances to the joint.

    ``adjacency`` is the weight matrix for this tick; row i gives agent i's
    fusion weights. Channel noise corrupts each received copy independently
    and the agent's own modeled likelihood, never the diagnostics reference.
    """
    n = len(agents)
    a = adjacency.values if hasattr(adjacency, "values") else np.asarray(adjacency, dtype=float)
    if a.shape != (n, n):
        raise ValueError("adjacency size does not match agent count")
    grid = agents[0].w.grid

    true_l = [
        normalized_likelihood(sensor_models[i], measurements[i], grid) for i in range(n)
    ]
    if channel_noise is not None and channel_noise.eps_l > 0:
        used_l = [_perturb(l, channel_noise.eps_l, channel_noise.rng) for l in true_l]
    else:
        used_l = true_l

    new_agents: list[AgentState] = []
    for i in range(n):
        state = agents[i]
        s = state.w if target_model is None else predict(state.w, target_model)
        if k == 1:
            u = used_l[i]
        else:
            received = []
            for j in range(n):
                if a[i, j] <= 0.0:
                    continue
                u_j = agents[j].u
                if u_j is None:
                    raise ValueError("fusion state missing; was tick 1 run?")
                if channel_noise is not None and j != i:
                    u_j = inject_channel_noise(u_j, channel_noise)
                received.append((u_j, float(a[i, j])))
            u = fuse(used_l[i], state.l, received, k)
        t = power_estimate(u, n)
        w = update(s, t)
        new_agents.append(AgentState(w=w, s=s, l=used_l[i], u=u, t=t, particles=None))

    joint = joint_likelihood(true_l)
    errs = np.array([l1_distance(st.t, joint) for st in new_agents])
    return new_agents, StepDiagnostics(joint=joint, l1_to_joint=errs)


@dataclass(frozen=True)
class MultiloopResult:
    fusion: list[DensityGrid]
    estimates: list[DensityGrid]
    error_norms: np.ndarray


def multiloop_fuse(
    likelihoods: Sequence[DensityGrid],
    adjacency,
    n_loop: int,
) -> MultiloopResult:
    """Repeated within-tick fusion loops toward the joint likelihood.

    Loop 1 sets each agent's fusion state to its own likelihood; every later
    loop applies the weighted log pool of the neighbors' states. Returns the
    per-loop L2 norms of the vector of per-agent L1 errors to the joint.
    """
    if n_loop < 1:
        raise ValueError("n_loop must be at least 1")
    n = len(likelihoods)
    a = adjacency.values if hasattr(adjacency, "values") else np.asarray(adjacency, dtype=float)
    joint = joint_likelihood(likelihoods)
    u = list(likelihoods)
    norms = []
    for loop in range(1, n_loop + 1):
        if loop > 1:
            nxt = []
            for i in range(n):
                idx = np.flatnonzero(a[i] > 0.0)
                w = PoolWeights(tuple(a[i, idx] / a[i, idx].sum()))
                nxt.append(logop([u[j] for j in idx], w))
            u = nxt
        t = [power_estimate(ui, n) for ui in u]
        e = np.array([l1_distance(ti, joint) for ti in t])
        norms.append(float(np.linalg.norm(e)))
    return MultiloopResult(fusion=u, estimates=t, error_norms=np.asarray(norms))


def consensus_update(
    log_u_prev: np.ndarray,
    log_l: np.ndarray,
    log_l_prev: np.ndarray | None,
    a: np.ndarray,
    cell_volume: float,
) -> np.ndarray:
    """Stacked fusion for all agents at once; rows are per-agent log fields.

    Equivalent to per-agent ``fuse`` followed by normalization and flooring,
    but runs as one matrix product. Pass ``log_l_prev=None`` for tick 1.
    """
    if log_l_prev is None:
        raw = log_l.copy()
    else:
        raw = a @ log_u_prev + (log_l - log_l_prev)
    raw -= logsumexp(raw, axis=1, keepdims=True) + np.log(cell_volume)
    np.maximum(raw, LOG_FLOOR, out=raw)
    raw -= logsumexp(raw, axis=1, keepdims=True) + np.log(cell_volume)
    return np.maximum(raw, LOG_FLOOR)


def power_rows(log_u: np.ndarray, n_agents: int, cell_volume: float) -> np.ndarray:
    """Stacked power estimate rows from stacked fusion rows."""
    raw = n_agents * log_u
    raw = raw - (logsumexp(raw, axis=1, keepdims=True) + np.log(cell_volume))
    return np.maximum(raw, LOG_FLOOR)
