"""Distributed linear-Gaussian filtering in information form.

The density fusion recursion specializes to a Kalman filter on information
pairs when dynamics and sensors are linear with Gaussian noise: the log
opinion pool of Gaussians is a weighted sum of information vectors and
matrices, so consensus runs directly on the measurement information and the
Bayes update is an addition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    SingularF,
    SingularPosterior,
    SingularR,
    SingularSum,
    WeightRowInvalid,
)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _spd_inverse(m: np.ndarray, err) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(_sym(m))
    except np.linalg.LinAlgError:
        raise err
    inv = np.linalg.inv(chol)
    return inv.T @ inv


@dataclass(frozen=True)
class LinearModel:
    """Linear dynamics x' = F x + w, w ~ N(0, Q), with per-agent sensors.

    ``h[i]`` may be None for an agent without a sensor; its information
    contribution is zero. F must be invertible and Q, R_i symmetric positive
    definite.
    """

    f: np.ndarray
    q: np.ndarray
    h: tuple
    r: tuple

    def __post_init__(self) -> None:
        f = np.asarray(self.f, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ValueError("F must be square")
        if np.linalg.matrix_rank(f) < f.shape[0]:
            raise SingularF("state transition matrix is singular")
        _spd_inverse(q, SingularSum("process noise covariance is not SPD"))
        h = tuple(None if hi is None else np.asarray(hi, dtype=float) for hi in self.h)
        r = tuple(None if ri is None else np.asarray(ri, dtype=float) for ri in self.r)
        if len(h) != len(r):
            raise ValueError("need one R per H")
        for hi, ri in zip(h, r):
            if hi is None:
                continue
            if ri is None:
                raise ValueError("sensor without noise covariance")
            _spd_inverse(ri, SingularR("measurement noise covariance is not SPD"))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "r", r)

    @property
    def n_agents(self) -> int:
        return len(self.h)

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.f))


@dataclass(frozen=True)
class InfoState:
    """One agent's information-filter state.

    ``z``/``Z`` are the information vector and matrix (prior after predict,
    posterior after update); ``u``/``U`` the consensus pair; ``t``/``T`` the
    scaled consensus used in the update; ``i_prev``/``I_prev`` the last
    measurement information, which the dynamic consensus differences against.
    """

    z: np.ndarray
    Z: np.ndarray
    u: np.ndarray | None = None
    U: np.ndarray | None = None
    t: np.ndarray | None = None
    T: np.ndarray | None = None
    i_prev: np.ndarray | None = None
    I_prev: np.ndarray | None = None

    @classmethod
    def from_moments(cls, x0: np.ndarray, p0: np.ndarray) -> "InfoState":
        z_mat = _spd_inverse(np.asarray(p0, dtype=float), SingularPosterior("prior covariance is not SPD"))
        return cls(z=z_mat @ np.asarray(x0, dtype=float), Z=z_mat)


def info_predict(s: InfoState, m: LinearModel) -> InfoState:
    """Propagate the information pair through the dynamics.

    M = F^{-T} Z F^{-1}; the predicted pair is (I - M (M + Q^{-1})^{-1})
    applied to M and to F^{-T} z.
    """
    try:
        f_inv = np.linalg.inv(m.f)
    except np.linalg.LinAlgError:
        raise SingularF("state transition matrix is singular")
    big_m = _sym(f_inv.T @ s.Z @ f_inv)
    q_inv = _spd_inverse(m.q, SingularSum("process noise covariance is not SPD"))
    try:
        gain = np.linalg.solve(big_m + q_inv, big_m.T).T
    except np.linalg.LinAlgError:
        raise SingularSum("M + Q^{-1} is singular")
    shrink = np.eye(m.dim) - gain
    z_pred = shrink @ (f_inv.T @ s.z)
    z_mat_pred = _sym(shrink @ big_m)
    return replace(s, z=z_pred, Z=z_mat_pred)


def info_measurement(y: np.ndarray | None, m: LinearModel, agent: int) -> tuple[np.ndarray, np.ndarray]:
    """Measurement information pair (H^T R^{-1} y, H^T R^{-1} H)."""
    h = m.h[agent]
    if h is None or y is None:
        return np.zeros(m.dim), np.zeros((m.dim, m.dim))
    r_inv = _spd_inverse(m.r[agent], SingularR("measurement noise covariance is not SPD"))
    hr = h.T @ r_inv
    return hr @ np.asarray(y, dtype=float), _sym(hr @ h)


def info_fuse(
    s: InfoState,
    i_new: np.ndarray,
    big_i_new: np.ndarray,
    received: Sequence[tuple[np.ndarray, np.ndarray, float]],
    k: int,
    n_agents: int,
) -> InfoState:
    """Dynamic average consensus on measurement information.

    ``received`` holds (u_{k-1}^j, U_{k-1}^j, A[i, j]) including the agent's
    own pair. At k = 1 the consensus pair is the measurement pair itself. The
    scaled pair multiplies by the agent count.
    """
    if k < 1:
        raise ValueError("tick index is 1 based")
    if k == 1:
        u, big_u = i_new, big_i_new
    else:
        weights = np.array([w for _, _, w in received])
        if np.any(weights < -1e-15) or abs(weights.sum() - 1.0) > 1e-9:
            raise WeightRowInvalid("fusion weights must be nonnegative and sum to 1")
        if s.i_prev is None or s.I_prev is None:
            raise ValueError("previous measurement information missing")
        mix_u = sum(w * uj for uj, _, w in received)
        mix_big = sum(w * bj for _, bj, w in received)
        # associate so that the single-agent case telescopes exactly
        u = i_new + (mix_u - s.i_prev)
        big_u = big_i_new + (mix_big - s.I_prev)
    return replace(
        s,
        u=u,
        U=big_u,
        t=n_agents * u,
        T=n_agents * big_u,
        i_prev=i_new,
        I_prev=big_i_new,
    )


def info_update(s: InfoState) -> tuple[np.ndarray, np.ndarray, InfoState]:
    """Add the scaled consensus pair and recover moments.

    Returns (state estimate, covariance, posterior state).
    """
    if s.t is None or s.T is None:
        raise ValueError("fuse before updating")
    z_post = s.z + s.t
    z_mat_post = _sym(s.Z + s.T)
    p = _spd_inverse(z_mat_post, SingularPosterior("posterior information matrix is not invertible"))
    x_hat = p @ z_post
    return x_hat, p, replace(s, z=z_post, Z=z_mat_post)


def centralized_info_step(
    s: InfoState,
    m: LinearModel,
    measurements: Sequence[np.ndarray | None],
) -> tuple[np.ndarray, np.ndarray, InfoState]:
    """Centralized multi-sensor information filter tick: predict then add all."""
    pred = info_predict(s, m)
    z, z_mat = pred.z.copy(), pred.Z.copy()
    for agent, y in enumerate(measurements):
        iv, im = info_measurement(y, m, agent)
        z = z + iv
        z_mat = z_mat + im
    z_mat = _sym(z_mat)
    p = _spd_inverse(z_mat, SingularPosterior("posterior information matrix is not invertible"))
    x_hat = p @ z
    return x_hat, p, replace(pred, z=z, Z=z_mat)
