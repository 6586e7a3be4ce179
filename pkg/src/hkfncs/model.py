"""Linear plant and sensor models with seeded noise generation.

All array arguments may carry leading batch dimensions (one per Monte Carlo
lane); matrices never do.  Vectors are applied as ``x @ M.T`` so that a
stack of states of shape ``(..., n)`` is handled in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

# Reciprocal condition number below which A is rejected.
A_RCOND_MIN = 1e-12


class ConfigurationError(ValueError):
    """Raised for inconsistent model or scenario definitions.

    ``field`` names the offending entry, e.g. ``"sensors[1].H"``.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def rcond(M: np.ndarray) -> np.ndarray:
    """Reciprocal 2-norm condition number, batched over leading axes."""
    s = np.linalg.svd(M, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = s[..., -1] / s[..., 0]
    return np.where(s[..., 0] > 0, r, 0.0)


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (eigenvalues clipped at 0)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _matrix(value, name: str, shape: tuple[int | None, int | None] | None = None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigurationError(name, f"expected a matrix, got shape {arr.shape}")
    if shape is not None:
        for got, want in zip(arr.shape, shape):
            if want is not None and got != want:
                raise ConfigurationError(name, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(name, "entries must be finite")
    arr.setflags(write=False)
    return arr


def _vector(value, name: str, size: int) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ConfigurationError(name, f"expected length {size}, got {arr.size}")
    arr.setflags(write=False)
    return arr


def _check_psd(M: np.ndarray, name: str, definite: bool = False) -> None:
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ConfigurationError(name, "must be symmetric")
    w = np.linalg.eigvalsh(M)
    tol = 1e-12 * max(1.0, np.abs(w).max())
    if definite and w.min() <= tol:
        raise ConfigurationError(name, "must be positive definite")
    if w.min() < -tol:
        raise ConfigurationError(name, "must be positive semi-definite")


@dataclass(frozen=True)
class PlantModel:
    """x[k+1] = A x[k] + B u[k] + w[k],  w ~ N(0, Xi),  x[0] ~ N(x0_mean, P0)."""

    A: np.ndarray
    B: np.ndarray
    Xi: np.ndarray
    x0_mean: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        A = _matrix(self.A, "plant.A")
        n = A.shape[0]
        if A.shape[1] != n:
            raise ConfigurationError("plant.A", f"must be square, got {A.shape}")
        B = _matrix(self.B, "plant.B", (n, None))
        Xi = _matrix(self.Xi, "plant.Xi", (n, n))
        P0 = _matrix(self.P0, "plant.P0", (n, n))
        x0 = _vector(self.x0_mean, "plant.x0_mean", n)
        if rcond(A) < A_RCOND_MIN:
            raise ConfigurationError("plant.A", "must be invertible (reciprocal condition number < 1e-12)")
        _check_psd(Xi, "plant.Xi")
        _check_psd(P0, "plant.P0")
        for name, value in (("A", A), ("B", B), ("Xi", Xi), ("x0_mean", x0), ("P0", P0)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def A_at(self, k: int) -> np.ndarray:
        # Time-invariant; the index keeps call sites ready for per-step matrices.
        return self.A

    @cached_property
    def A_inv(self) -> np.ndarray:
        return np.linalg.inv(self.A)

    @cached_property
    def noise_factor(self) -> np.ndarray:
        return psd_sqrt(self.Xi)

    @cached_property
    def initial_factor(self) -> np.ndarray:
        return psd_sqrt(self.P0)


@dataclass(frozen=True)
class SensorModel:
    """y[k] = H x[k] + v[k],  v ~ N(0, Theta)."""

    id: int
    H: np.ndarray
    Theta: np.ndarray

    def __post_init__(self):
        H = _matrix(self.H, f"sensors[{self.id}].H")
        Theta = _matrix(self.Theta, f"sensors[{self.id}].Theta", (H.shape[0], H.shape[0]))
        _check_psd(Theta, f"sensors[{self.id}].Theta", definite=True)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Theta", Theta)

    @property
    def q(self) -> int:
        return self.H.shape[0]

    @cached_property
    def Theta_inv(self) -> np.ndarray:
        return np.linalg.inv(self.Theta)

    @cached_property
    def information(self) -> np.ndarray:
        """H^T Theta^-1 H, this sensor's measurement information matrix."""
        return self.H.T @ self.Theta_inv @ self.H

    @cached_property
    def noise_factor(self) -> np.ndarray:
        return psd_sqrt(self.Theta)

    def check_state_dim(self, n: int) -> None:
        if self.H.shape[1] != n:
            raise ConfigurationError(
                f"sensors[{self.id}].H", f"expected {n} columns, got {self.H.shape[1]}"
            )


@dataclass(frozen=True)
class TrueTrajectory:
    states: np.ndarray  # (K+1, n)
    inputs_applied: np.ndarray  # (K, m)
    noise: np.ndarray = field(default=None)  # (K, n) process noise draws, if recorded


def _check_vec(x: np.ndarray, size: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (size,):
        raise ConfigurationError(name, f"expected trailing dimension {size}, got shape {x.shape}")
    return x


def step_plant(model: PlantModel, x, u, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """One plant transition.

    The process noise is ``noise_factor @ e`` with ``e = rng.standard_normal(n)``,
    so a caller holding the same generator can replay the draw exactly.  Passing
    ``noise`` directly skips the generator.
    """
    x = _check_vec(x, model.n, "x")
    u = _check_vec(u, model.m, "u")
    out = x @ model.A.T + u @ model.B.T
    if noise is not None:
        out = out + noise
    elif rng is not None:
        out = out + rng.standard_normal(x.shape) @ model.noise_factor.T
    return out


def measure(sensor: SensorModel, x, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    x = _check_vec(x, sensor.H.shape[1], "x")
    y = x @ sensor.H.T
    if noise is not None:
        y = y + noise
    elif rng is not None:
        y = y + rng.standard_normal(x.shape[:-1] + (sensor.q,)) @ sensor.noise_factor.T
    return y


def rollout_true_state(model: PlantModel, inputs, k: int, x0=None, noise=None) -> np.ndarray:
    """State at step k as the closed sum over inputs (and optional noise).

    x_k = sum_{t<k} A^(k-1-t) (B u_t + w_t) + A^k x_0.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.m)
    if k > len(inputs):
        raise ConfigurationError("k", f"needs {k} inputs, got {len(inputs)}")
    x0 = model.x0_mean if x0 is None else np.asarray(x0, dtype=float)
    phi = np.eye(model.n)  # A^(k-1-t), built from t = k-1 downwards
    total = np.zeros(model.n)
    for t in range(k - 1, -1, -1):
        term = model.B @ inputs[t]
        if noise is not None:
            term = term + noise[t]
        total += phi @ term
        phi = phi @ model.A_at(t)
    return total + phi @ x0


def run_streams(base_seed: int, run_index: int, count: int) -> list[np.random.Generator]:
    """Independent generators for one Monte Carlo run.

    Stream ``s`` of run ``r`` is PCG64 seeded with
    ``SeedSequence(base_seed, spawn_key=(r, s))``; results therefore do not
    depend on how runs are batched or parallelised.
    """
    return [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(base_seed, spawn_key=(run_index, s))))
        for s in range(count)
    ]


def simulate_open_loop(model: PlantModel, inputs: Sequence, rng: np.random.Generator, x0=None) -> TrueTrajectory:
    """Ground-truth trajectory under a fixed input sequence."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.m)
    if x0 is None:
        x0 = model.x0_mean + model.initial_factor @ rng.standard_normal(model.n)
    states = [np.asarray(x0, dtype=float)]
    noise = rng.standard_normal((len(inputs), model.n)) @ model.noise_factor.T
    for t, u in enumerate(inputs):
        states.append(step_plant(model, states[-1], u, noise=noise[t]))
    return TrueTrajectory(np.array(states), inputs, noise)
