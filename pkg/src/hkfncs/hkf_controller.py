"""Controller-side fusion of HKF variables with subsequent input inclusion.

Sensors only ship ``x_info``.  The controller mirrors every node's
correction matrix (it depends on the schedule alone) and maintains the
node's input correction ``xu``, the part of the known control inputs that
the input-free local recursion never saw.  The de-biased estimate is
``delta_f^-1 (x_f + xu_f)`` over whichever nodes have delivered something.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hkf_local import HypothesizedSchedule
from .model import PlantModel, SensorModel, rcond

DEFAULT_COND_THRESHOLD = 1e-10


class FusionError(ValueError):
    pass


class EstimateUnavailable(ArithmeticError):
    """The fused correction matrix is not (yet) invertible."""


class BookkeepingError(RuntimeError):
    pass


def _mv(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (M @ x[..., None])[..., 0]


@dataclass(frozen=True)
class NodeEntry:
    """What the controller holds for one node, valid at ``step``.

    Arrays may carry a leading lane axis.
    """

    step: int
    x_info: np.ndarray
    delta: np.ndarray
    xu: np.ndarray


def fuse(states: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Sum the information vectors and correction matrices of a fusion group.

    Accepts :class:`LocalEstimateState` or :class:`NodeEntry` items.
    """
    if not states:
        raise FusionError("empty fusion group")
    steps = {getattr(s, "k", getattr(s, "step", None)) for s in states}
    stages = {getattr(s, "stage", "filtered") for s in states}
    if len(steps) != 1 or len(stages) != 1:
        raise FusionError(f"cannot fuse estimates from steps {sorted(steps)} / stages {sorted(stages)}")
    x_f = sum(s.x_info for s in states)
    delta_f = sum(s.delta for s in states)
    return x_f, delta_f


def update_input_correction(
    xu_prev, delta_prev, u_prev, schedule: HypothesizedSchedule, model: PlantModel, k: int
) -> np.ndarray:
    """xu(k) = K_k A (xu(k-1) + Delta(k-1) A^-1 B u_{k-1})."""
    if u_prev is None:
        raise BookkeepingError(f"input u_{k - 1} missing")
    KA = schedule.K[k] @ model.A_at(k - 1)
    Bu = np.asarray(u_prev, dtype=float) @ (model.A_inv @ model.B).T
    return _mv(KA, np.asarray(xu_prev, dtype=float) + _mv(delta_prev, Bu))


def debias(x_f, delta_f, xu_f, cond_threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Delta_f^-1 (x_f + xu_f) for a single lane."""
    if rcond(delta_f) < cond_threshold:
        raise EstimateUnavailable("fused correction matrix is not invertible")
    return np.linalg.solve(delta_f, np.asarray(x_f) + np.asarray(xu_f))


def debias_lanes(x_f, delta_f, xu_f, cond_threshold: float = DEFAULT_COND_THRESHOLD):
    """Batched :func:`debias`; returns ``(estimates, available)``.

    Rows that are not available hold NaN.
    """
    ok = rcond(delta_f) >= cond_threshold
    est = np.full(np.shape(x_f), np.nan)
    if ok.any():
        est[ok] = np.linalg.solve(delta_f[ok], (x_f + xu_f)[ok][..., None])[..., 0]
    return est, ok


def catch_up(
    entry: NodeEntry, schedule: HypothesizedSchedule, model: PlantModel, inputs: Sequence, k: int
) -> NodeEntry:
    """Map a node's last delivered variables from ``entry.step`` to ``k``.

    The node's measurement contributions after ``entry.step`` are absent,
    so each step is a gain-weighted prediction only:
    x <- G(t,k) x,  Delta <- G(t,k) Delta Phi(t,k)^-1,
    xu <- G(t,k) (xu + Delta sum_l Phi(t,l+1)^-1 B u_l).
    ``inputs`` holds u_t .. u_{k-1}.
    """
    t = entry.step
    if k < t:
        raise BookkeepingError(f"cannot catch up backwards from {t} to {k}")
    if len(inputs) < k - t:
        raise BookkeepingError(f"catch-up {t}->{k} needs {k - t} inputs, got {len(inputs)}")
    x, delta, xu = entry.x_info, entry.delta, entry.xu
    A_inv_B = model.A_inv @ model.B
    for s in range(t + 1, k + 1):
        KA = schedule.K[s] @ model.A_at(s - 1)
        Bu = np.asarray(inputs[s - 1 - t], dtype=float) @ A_inv_B.T
        xu = _mv(KA, xu + _mv(delta, Bu))
        x = _mv(KA, x)
        delta = KA @ delta @ model.A_inv
    return NodeEntry(k, x, delta, xu)


def constant_input_transfer(transfer_prev, delta_prev, schedule: HypothesizedSchedule, model: PlantModel, k: int):
    """M(k) = K_k A (M(k-1) + Delta(k-1) A^-1); xu(k) = M(k) B b when u = b throughout."""
    KA = schedule.K[k] @ model.A_at(k - 1)
    return KA @ (transfer_prev + delta_prev @ model.A_inv)


def adapt_hgmm(
    hgmm: np.ndarray,
    delta_history: Sequence[np.ndarray],
    window: int,
    margin: float = 0.1,
    max_ratio: float = 4.0,
) -> np.ndarray:
    """Heuristic HGMM update from a persistent deviation of Delta_f from I.

    The symmetrized window average of Delta_f is diagonalised; along
    eigendirections below ``1 - margin`` the HGMM is shrunk, above
    ``1 + margin`` enlarged, by the eigenvalue (clipped to ``max_ratio``).
    Returns ``hgmm`` unchanged when the window is not yet full.
    """
    hgmm = np.asarray(hgmm, dtype=float)
    if len(delta_history) < window or window < 1:
        return hgmm
    recent = np.asarray(delta_history[-window:], dtype=float)
    mean = recent.mean(axis=0)
    d, V = np.linalg.eigh(0.5 * (mean + mean.T))
    factor = np.where(np.abs(d - 1.0) > margin, np.clip(d, 1.0 / max_ratio, max_ratio), 1.0)
    if np.all(factor == 1.0):
        return hgmm
    S = (V * np.sqrt(factor)) @ V.T
    out = S @ hgmm @ S
    return 0.5 * (out + out.T)


class ControllerEstimator:
    """Per-node ledgers for a batch of independent lanes.

    Step protocol: :meth:`start` at the schedule's first step, then for every
    later step :meth:`advance` with the input applied in the previous step,
    :meth:`receive` once per node with the newest delivered origin per lane,
    and :meth:`estimate`.
    """

    def __init__(
        self,
        schedule: HypothesizedSchedule,
        model: PlantModel,
        sensors: Sequence[SensorModel],
        lanes: int,
        cond_threshold: float = DEFAULT_COND_THRESHOLD,
        prior_deltas: Sequence[np.ndarray] | None = None,
    ):
        self.schedule = schedule
        self.model = model
        self.sensors = list(sensors)
        self.lanes = lanes
        self.cond_threshold = cond_threshold
        self._prior_deltas = prior_deltas
        n, M = model.n, len(self.sensors)
        self.k = None
        self.inputs: list[np.ndarray] = []  # inputs[t] = u_t per lane
        self.delta_hist: list[list[np.ndarray]] = [[] for _ in range(M)]
        self.xu_hist: list[list[np.ndarray]] = [[] for _ in range(M)]
        self.has = np.zeros((lanes, M), dtype=bool)
        self.origin = np.full((lanes, M), -1, dtype=int)
        self.x = np.zeros((lanes, M, n))
        self.delta = np.zeros((lanes, M, n, n))
        self.xu = np.zeros((lanes, M, n))

    def start(self) -> None:
        s = self.schedule
        k0 = s.first_step
        n = self.model.n
        # Steps before the first filter carry Delta = 0 and xu = 0.
        for i, sensor in enumerate(self.sensors):
            for t in range(k0):
                self.delta_hist[i].append(np.zeros((n, n)))
                self.xu_hist[i].append(np.zeros((self.lanes, n)))
            if s.init == "measurement":
                d0 = s.L[sensor.id][1] @ sensor.H
            else:
                d0 = np.asarray(self._prior_deltas[i], dtype=float)
            self.delta_hist[i].append(d0)
            self.xu_hist[i].append(np.zeros((self.lanes, n)))
        self.k = k0

    def record_input(self, step: int, u: np.ndarray) -> None:
        """Input applied at ``step``, known through the acknowledgment."""
        if len(self.inputs) != step:
            raise BookkeepingError(f"input for step {step} recorded out of order")
        self.inputs.append(np.asarray(u, dtype=float))

    def advance(self) -> None:
        """Move every node variable from step k to k+1 using the recorded u_k."""
        k = self.k + 1
        if len(self.inputs) < k:
            raise BookkeepingError(f"input u_{k - 1} missing")
        s, model = self.schedule, self.model
        u_prev = self.inputs[k - 1]
        KA = s.K[k] @ model.A_at(k - 1)
        for i, sensor in enumerate(self.sensors):
            d_prev = self.delta_hist[i][-1]
            self.xu_hist[i].append(update_input_correction(self.xu_hist[i][-1], d_prev, u_prev, s, model, k))
            self.delta_hist[i].append(KA @ d_prev @ model.A_inv + s.L[sensor.id][k] @ sensor.H)
        entry = NodeEntry(k - 1, self.x, self.delta, self.xu)
        moved = catch_up(entry, s, model, [u_prev[:, None, :]], k)
        self.x, self.delta, self.xu = moved.x_info, moved.delta, moved.xu
        self.k = k

    def receive(self, i: int, origins: np.ndarray, payloads: np.ndarray) -> np.ndarray:
        """Adopt node i's newest delivered variables where they are newer.

        ``origins[r]`` is the newest origin step delivered to lane r in this
        step (-1 for none) and ``payloads[r]`` its ``x_info``.  Returns the
        mask of lanes whose ledger changed.
        """
        origins = np.asarray(origins)
        fresh = origins > self.origin[:, i]
        for t in np.unique(origins[fresh]):
            lanes = np.flatnonzero(fresh & (origins == t))
            entry = NodeEntry(
                int(t),
                payloads[lanes],
                np.broadcast_to(self.delta_hist[i][t], (len(lanes),) + self.delta_hist[i][t].shape),
                self.xu_hist[i][t][lanes],
            )
            gap = [u[lanes] for u in self.inputs[t : self.k]]
            caught = catch_up(entry, self.schedule, self.model, gap, self.k)
            self.x[lanes, i] = caught.x_info
            self.delta[lanes, i] = caught.delta
            self.xu[lanes, i] = caught.xu
            self.origin[lanes, i] = t
            self.has[lanes, i] = True
        return fresh

    def fused(self):
        """(x_f, delta_f, xu_f) over each lane's fusion group."""
        mask = self.has[..., None]
        x_f = (self.x * mask).sum(axis=1)
        delta_f = (self.delta * mask[..., None]).sum(axis=1)
        xu_f = (self.xu * mask).sum(axis=1)
        return x_f, delta_f, xu_f

    def estimate(self):
        """(estimates, available, x_f, delta_f, xu_f) for the current step."""
        x_f, delta_f, xu_f = self.fused()
        est, ok = debias_lanes(x_f, delta_f, xu_f, self.cond_threshold)
        return est, ok, x_f, delta_f, xu_f

    def replace_schedule(self, schedule: HypothesizedSchedule) -> None:
        self.schedule = schedule
