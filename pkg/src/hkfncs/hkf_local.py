"""Sensor-side processing of the hypothesizing distributed Kalman filter.

Every node filters with gains derived from a shared hypothesis about the
global measurement information (the HGMM) instead of its own model.  The
resulting local vector ``x_info`` is biased; the correction matrix ``delta``
tracks that bias so that ``delta^-1 x_info`` is unbiased for input-free
dynamics.  Sensors never see control inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .model import PlantModel, SensorModel, rcond

# Reciprocal condition number below which a schedule inversion is rejected.
SCHEDULE_RCOND_MIN = 1e-14


class ScheduleError(ValueError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class StageError(RuntimeError):
    """Predict and filter calls must alternate."""


@dataclass(frozen=True)
class Hgmm:
    """Hypothesized global measurement information (C^z_k)^-1.

    ``info_matrix`` is either one ``(n, n)`` matrix for all steps or a
    per-step stack ``(K+1, n, n)``.
    """

    info_matrix: np.ndarray

    def __post_init__(self):
        M = np.array(self.info_matrix, dtype=float)
        if M.ndim == 0:
            M = M.reshape(1, 1)
        if M.ndim not in (2, 3) or M.shape[-1] != M.shape[-2]:
            raise ValueError(f"HGMM must be square, got shape {M.shape}")
        if not np.allclose(M, np.swapaxes(M, -1, -2), atol=1e-12 * max(1.0, np.abs(M).max())):
            raise ValueError("HGMM must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
            raise ValueError("HGMM must be positive semi-definite")
        M.setflags(write=False)
        object.__setattr__(self, "info_matrix", M)

    @classmethod
    def matched(cls, sensors: Sequence[SensorModel], scale: float = 1.0) -> "Hgmm":
        """``scale`` times the summed information of all sensors."""
        return cls(scale * sum(s.information for s in sensors))

    def at(self, k: int) -> np.ndarray:
        M = self.info_matrix
        return M if M.ndim == 2 else M[k]


@dataclass(frozen=True)
class HypothesizedSchedule:
    """Covariances and gains for steps 0..horizon, identical at every node.

    Entries that do not exist are NaN: under measurement initialization step 0
    carries no covariance and the step-1 prediction has zero information,
    which makes ``K[1]`` the zero matrix.
    """

    Cx: np.ndarray  # (K+1, n, n)
    Cx_pred: np.ndarray  # (K+1, n, n)
    K: np.ndarray  # (K+1, n, n)
    L: tuple  # per sensor, (K+1, n, q_i)
    hgmm: np.ndarray  # (K+1, n, n)
    init: Literal["measurement", "prior"]

    @property
    def horizon(self) -> int:
        return self.Cx.shape[0] - 1

    @property
    def first_step(self) -> int:
        return 1 if self.init == "measurement" else 0

    def check_step(self, k: int) -> None:
        if not 0 <= k <= self.horizon:
            raise ScheduleError(k, f"outside schedule horizon 0..{self.horizon}")


def _inv_checked(M: np.ndarray, step: int, what: str) -> np.ndarray:
    if rcond(M) < SCHEDULE_RCOND_MIN:
        raise ScheduleError(step, f"{what} is singular")
    return np.linalg.inv(M)


def build_schedule(
    model: PlantModel,
    sensors: Sequence[SensorModel],
    hgmm: Hgmm,
    horizon: int,
    prior_cov: np.ndarray | None = None,
) -> HypothesizedSchedule:
    """Precompute C^x, C^x_pred, K and L^i for the whole horizon.

    Without ``prior_cov`` the filter starts from the first measurement with
    ``Cx[1] = hgmm^-1``; with it, ``Cx[0] = prior_cov`` and step 1 is an
    ordinary predict/filter cycle.
    """
    if horizon < 1:
        raise ScheduleError(horizon, "horizon must be at least 1")
    n = model.n
    H = np.broadcast_to(hgmm.info_matrix, (horizon + 1, n, n)) if hgmm.info_matrix.ndim == 2 else hgmm.info_matrix
    if H.shape != (horizon + 1, n, n):
        raise ScheduleError(0, f"HGMM has shape {H.shape}, expected ({horizon + 1}, {n}, {n}) or ({n}, {n})")
    nan = np.full((n, n), np.nan)
    Cx = np.empty((horizon + 1, n, n))
    Cx_pred = np.empty_like(Cx)
    K = np.empty_like(Cx)
    Cx_pred[0] = K[0] = nan

    if prior_cov is None:
        init = "measurement"
        Cx[0] = nan
        Cx[1] = _inv_checked(H[1], 1, "HGMM at initialization")
        Cx_pred[1] = nan
        K[1] = np.zeros((n, n))
        start = 2
    else:
        init = "prior"
        Cx[0] = np.asarray(prior_cov, dtype=float)
        _inv_checked(Cx[0], 0, "prior covariance")
        start = 1

    for k in range(start, horizon + 1):
        A = model.A_at(k - 1)
        Cx_pred[k] = A @ Cx[k - 1] @ A.T + model.Xi
        info_pred = _inv_checked(Cx_pred[k], k, "predicted covariance")
        Cx[k] = _inv_checked(info_pred + H[k], k, "filtered information")
        Cx[k] = 0.5 * (Cx[k] + Cx[k].T)
        K[k] = Cx[k] @ info_pred

    L = []
    for s in sensors:
        Li = Cx @ (s.H.T @ s.Theta_inv)
        Li[0] = np.nan  # no measurement is taken at step 0
        Li.setflags(write=False)
        L.append(Li)
    for arr in (Cx, Cx_pred, K):
        arr.setflags(write=False)
    H = np.array(H)
    H.setflags(write=False)
    return HypothesizedSchedule(Cx, Cx_pred, K, tuple(L), H, init)


@dataclass(frozen=True)
class LocalEstimateState:
    x_info: np.ndarray  # (..., n)
    delta: np.ndarray  # (..., n, n)
    k: int
    sensor_id: int
    stage: Literal["filtered", "predicted"] = "filtered"


def init_from_measurement(schedule: HypothesizedSchedule, sensor: SensorModel, z1) -> LocalEstimateState:
    """Step-1 state from the first local measurement: x = L_1 z_1, delta = L_1 H."""
    if schedule.init != "measurement":
        raise ScheduleError(1, "schedule was built for prior initialization")
    L1 = schedule.L[sensor.id][1]
    z1 = np.asarray(z1, dtype=float)
    return LocalEstimateState(z1 @ L1.T, L1 @ sensor.H, 1, sensor.id)


def init_from_prior(
    schedule: HypothesizedSchedule, prior_mean, prior_cov, sensor_id: int = 0
) -> LocalEstimateState:
    """Step-0 state from a local prior estimate.

    x = Cx_0 prior_cov^-1 prior_mean and delta = Cx_0 prior_cov^-1, where Cx_0
    is the schedule's (hypothesized, fused) prior covariance.
    """
    if schedule.init != "prior":
        raise ScheduleError(0, "schedule was built for measurement initialization")
    prior_cov = np.asarray(prior_cov, dtype=float)
    if rcond(prior_cov) < SCHEDULE_RCOND_MIN:
        raise ScheduleError(0, "prior covariance is singular")
    gain = schedule.Cx[0] @ np.linalg.inv(prior_cov)
    return LocalEstimateState(np.asarray(prior_mean, dtype=float) @ gain.T, gain, 0, sensor_id)


def predict(state: LocalEstimateState, model: PlantModel) -> LocalEstimateState:
    """x <- A x, delta <- A delta A^-1; advances to step k+1 (predicted stage)."""
    if state.stage != "filtered":
        raise StageError(f"sensor {state.sensor_id}: predict called twice at step {state.k}")
    A = model.A_at(state.k)
    A_inv = model.A_inv
    return replace(
        state,
        x_info=state.x_info @ A.T,
        delta=A @ state.delta @ A_inv,
        k=state.k + 1,
        stage="predicted",
    )


def filter_step(
    state: LocalEstimateState, schedule: HypothesizedSchedule, sensor: SensorModel, z
) -> LocalEstimateState:
    """x <- K_k x + L_k z, delta <- K_k delta + L_k H."""
    if state.stage != "predicted":
        raise StageError(f"sensor {state.sensor_id}: filter without prediction at step {state.k}")
    k = state.k
    schedule.check_step(k)
    Kk = schedule.K[k]
    Lk = schedule.L[sensor.id][k]
    return replace(
        state,
        x_info=state.x_info @ Kk.T + np.asarray(z, dtype=float) @ Lk.T,
        delta=Kk @ state.delta + Lk @ sensor.H,
        stage="filtered",
    )
