"""Brute-force references for the recursive estimator.

Everything here is evaluated literally from products and sums, O(k^2) per
call, and is meant for test-scale horizons only.

Index convention (fixed once, used everywhere):

* ``transition_product(l, k)`` is ``A_{k-1} ... A_l`` with ``Phi(k, k) = I``.
* ``gain_product(l, k)`` is ``K_k A_{k-1} K_{k-1} ... K_{l+1} A_l`` with
  ``G(k, k) = I``; it consumes gains of steps l+1..k and dynamics of steps
  l..k-1.  For ``l > k`` both return the inverse of the swapped product.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .hkf_local import HypothesizedSchedule
from .model import PlantModel, SensorModel


def transition_product(model: PlantModel, l: int, k: int) -> np.ndarray:
    if l > k:
        return inverse_transition(model, k, l)
    P = np.eye(model.n)
    for t in range(l, k):
        P = model.A_at(t) @ P
    return P


def inverse_transition(model: PlantModel, l: int, k: int) -> np.ndarray:
    """Phi(l, k)^-1 = A_l^-1 ... A_{k-1}^-1."""
    if l > k:
        return transition_product(model, k, l)
    P = np.eye(model.n)
    for t in range(l, k):
        P = P @ np.linalg.inv(model.A_at(t))
    return P


def gain_product(schedule: HypothesizedSchedule, model: PlantModel, l: int, k: int) -> np.ndarray:
    if l > k:
        return np.linalg.inv(gain_product(schedule, model, k, l))
    if l < 0 or k > schedule.horizon:
        raise IndexError(f"gain product ({l}, {k}) outside 0..{schedule.horizon}")
    G = np.eye(model.n)
    for t in range(l, k):
        G = schedule.K[t + 1] @ model.A_at(t) @ G
    return G


def _cutoff(upto: Mapping[int, int] | None, i: int, k: int) -> int:
    return k if upto is None else min(k, upto[i])


def x_sum_formula(
    schedule: HypothesizedSchedule,
    model: PlantModel,
    measurements: Mapping[int, np.ndarray],
    group: Sequence[int],
    k: int,
    upto: Mapping[int, int] | None = None,
    initial: Mapping[int, np.ndarray] | None = None,
) -> np.ndarray:
    """sum_{t=1..k} G(t,k) sum_i L^i_t z^i_t.

    ``measurements[i][t]`` is sensor i's measurement at step t.  ``upto[i]``
    drops sensor i's terms after that step (its last delivered estimate);
    ``initial[i]`` is a prior-initialized step-0 vector.
    """
    total = np.zeros(model.n)
    for i in group:
        last = _cutoff(upto, i, k)
        if initial is not None and last >= 0:
            total = total + gain_product(schedule, model, 0, k) @ initial[i]
        for t in range(1, last + 1):
            total = total + gain_product(schedule, model, t, k) @ schedule.L[i][t] @ measurements[i][t]
    return total


def delta_sum_formula(
    schedule: HypothesizedSchedule,
    model: PlantModel,
    sensors: Sequence[SensorModel],
    group: Sequence[int],
    k: int,
    upto: Mapping[int, int] | None = None,
    initial: Mapping[int, np.ndarray] | None = None,
) -> np.ndarray:
    """sum_{t=1..k} G(t,k) (sum_i L^i_t H^i) Phi(t,k)^-1."""
    by_id = {s.id: s for s in sensors}
    total = np.zeros((model.n, model.n))
    for i in group:
        last = _cutoff(upto, i, k)
        if initial is not None and last >= 0:
            total = total + gain_product(schedule, model, 0, k) @ initial[i] @ inverse_transition(model, 0, k)
        for t in range(1, last + 1):
            total = total + (
                gain_product(schedule, model, t, k)
                @ schedule.L[i][t]
                @ by_id[i].H
                @ inverse_transition(model, t, k)
            )
    return total


def xu_sum_formula(
    schedule: HypothesizedSchedule,
    model: PlantModel,
    deltas: Sequence[np.ndarray],
    inputs: np.ndarray,
    k: int,
) -> np.ndarray:
    """sum_{t=0..k-1} G(t,k) Delta(t) A_t^-1 B u_t, with ``deltas[t]`` = Delta(t)."""
    total = np.zeros(model.n)
    for t in range(k):
        total = total + (
            gain_product(schedule, model, t, k)
            @ deltas[t]
            @ np.linalg.inv(model.A_at(t))
            @ model.B
            @ inputs[t]
        )
    return total


def input_inner_term(
    schedule: HypothesizedSchedule,
    model: PlantModel,
    sensors: Sequence[SensorModel],
    group: Sequence[int],
    l: int,
    k: int,
    initial: Mapping[int, np.ndarray] | None = None,
) -> np.ndarray:
    """sum_{t=1..l} G(t,k) (sum_i L^i_t H^i) Phi(t, l+1)^-1.

    Equals G(l,k) Delta_f(l) A_l^-1; this is how the input-correction term
    splits into measurement contributions.  ``initial`` adds the step-0
    correction matrices of prior-initialized nodes.
    """
    by_id = {s.id: s for s in sensors}
    total = np.zeros((model.n, model.n))
    if initial is not None:
        D0 = sum(initial[i] for i in group)
        total = total + gain_product(schedule, model, 0, k) @ D0 @ inverse_transition(model, 0, l + 1)
    for t in range(1, l + 1):
        LH = sum(schedule.L[i][t] @ by_id[i].H for i in group)
        total = total + gain_product(schedule, model, t, k) @ LH @ inverse_transition(model, t, l + 1)
    return total


def measurement_mean(model: PlantModel, sensor: SensorModel, inputs, k: int, x0=None) -> np.ndarray:
    """H (sum_{l<k} Phi(l+1,k) B u_l + Phi(0,k) x0), the noise-free measurement."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.m)
    x0 = model.x0_mean if x0 is None else np.asarray(x0, dtype=float)
    x = transition_product(model, 0, k) @ x0
    for l in range(k):
        x = x + transition_product(model, l + 1, k) @ model.B @ inputs[l]
    return sensor.H @ x


def central_kf_step(
    mean,
    cov,
    measurements: Sequence,
    u_prev,
    model: PlantModel,
    sensors: Sequence[SensorModel],
    form: str = "information",
):
    """Predict with u_prev, then update with all available measurements.

    ``mean``/``cov`` of None means no prior information (first step of a
    filter started from measurements).  ``measurements[j]`` belongs to
    ``sensors[j]``; None entries are skipped.  ``mean`` and each measurement
    may carry leading batch axes.  ``form`` is ``"information"``,
    ``"covariance"`` (stacked innovation update) or ``"sequential"``
    (covariance form, one sensor at a time).
    """
    present = [(s, np.asarray(z, dtype=float)) for s, z in zip(sensors, measurements) if z is not None]
    if cov is None:
        if form != "information":
            raise ValueError("covariance-form update needs a prior covariance")
        info_pred = np.zeros((model.n, model.n))
        shift = 0.0
    else:
        A = model.A
        mean_pred = np.asarray(mean, dtype=float) @ A.T + np.asarray(u_prev, dtype=float) @ model.B.T
        cov_pred = A @ cov @ A.T + model.Xi
        if not present:
            return mean_pred, cov_pred
        if form == "covariance":
            H = np.vstack([s.H for s, _ in present])
            Theta = scipy.linalg.block_diag(*[s.Theta for s, _ in present])
            z = np.concatenate([z for _, z in present], axis=-1)
            S = H @ cov_pred @ H.T + Theta
            gain = np.linalg.solve(S, H @ cov_pred).T
            new_mean = mean_pred + (z - mean_pred @ H.T) @ gain.T
            I_KH = np.eye(model.n) - gain @ H
            new_cov = I_KH @ cov_pred @ I_KH.T + gain @ Theta @ gain.T
            return new_mean, new_cov
        if form == "sequential":
            m, P = mean_pred, cov_pred
            for s, z in present:
                S = s.H @ P @ s.H.T + s.Theta
                gain = np.linalg.solve(S, s.H @ P).T
                m = m + (z - m @ s.H.T) @ gain.T
                I_KH = np.eye(model.n) - gain @ s.H
                P = I_KH @ P @ I_KH.T + gain @ s.Theta @ gain.T
            return m, P
        info_pred = np.linalg.inv(cov_pred)
        shift = mean_pred @ info_pred.T
    info = info_pred + sum((s.information for s, _ in present), np.zeros((model.n, model.n)))
    try:
        new_cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("central filter: singular posterior information") from exc
    if np.linalg.cond(info) > 1e14:
        raise np.linalg.LinAlgError("central filter: singular posterior information")
    vec = shift + sum(z @ (s.H.T @ s.Theta_inv).T for s, z in present)
    return vec @ new_cov.T, new_cov

