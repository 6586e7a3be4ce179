"""Sequence-based networked control loop with lossy, delayed channels.

Time-triggered loop, per step k::

    sensors measure x_k, filter locally, send x_info      (SE channels)
    controller catches up / fuses / de-biases, sends U_k  (CA channel)
    actuator applies the buffered input for k (or u_default)
    plant advances to x_{k+1}; cost accumulates

All randomness is drawn up front from per-run generator streams, so the
loop itself is deterministic and runs many independent lanes at once.
Streams of run r (see :func:`hkfncs.model.run_streams`): 0 plant (initial
state, then process noise), 1..M sensor noise, M+1..2M SE channels,
2M+1 CA channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
import scipy.linalg

from .hkf_controller import DEFAULT_COND_THRESHOLD, ControllerEstimator, adapt_hgmm
from .hkf_local import (
    Hgmm,
    HypothesizedSchedule,
    build_schedule,
    filter_step,
    init_from_measurement,
    init_from_prior,
    predict,
)
from .model import ConfigurationError, PlantModel, run_streams
from .oracle import central_kf_step

LOST = -1


# --------------------------------------------------------------------------
# packets and channels


@dataclass(frozen=True)
class ControlPacket:
    origin_step: int
    sequence: np.ndarray  # (N_A + 1, m): u_{k|k}, ..., u_{k+N_A|k}


@dataclass(frozen=True)
class MeasurementPacket:
    sensor_id: int
    origin_step: int
    payload: np.ndarray  # the sender's x_info at origin_step


@dataclass(frozen=True)
class Channel:
    """Independent per-packet loss and delay.

    ``delay_pmf[d]`` is the probability of a delay of d steps.  A ``script``
    (one entry per send step: delay, or None for a loss) replaces the random
    draws entirely.
    """

    loss_prob: float = 0.0
    delay_pmf: tuple = (1.0,)
    ack_mode: Literal["tcp_like", "none"] = "none"
    script: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigurationError("loss_prob", f"must lie in [0, 1], got {self.loss_prob}")
        pmf = tuple(float(p) for p in self.delay_pmf)
        if not pmf or any(p < 0 for p in pmf):
            raise ConfigurationError("delay_pmf", "must be a non-empty list of non-negative probabilities")
        if abs(sum(pmf) - 1.0) > 1e-12:
            raise ConfigurationError("delay_pmf", f"must sum to 1, sums to {sum(pmf)!r}")
        object.__setattr__(self, "delay_pmf", pmf)
        if self.ack_mode not in ("tcp_like", "none"):
            raise ConfigurationError("ack_mode", f"unknown mode {self.ack_mode!r}")
        if self.script is not None:
            script = tuple(None if d is None else int(d) for d in self.script)
            if any(d is not None and d < 0 for d in script):
                raise ConfigurationError("script", "delays must be non-negative")
            object.__setattr__(self, "script", script)

    @property
    def max_delay(self) -> int:
        if self.script is not None:
            return max((d for d in self.script if d is not None), default=0)
        return len(self.delay_pmf) - 1


def _delay_from_uniforms(channel: Channel, u: np.ndarray) -> np.ndarray:
    # u[..., 0] decides loss, u[..., 1] the delay by inverse CDF.
    cdf = np.cumsum(channel.delay_pmf)
    delay = np.minimum(np.searchsorted(cdf, u[..., 1], side="right"), len(cdf) - 1)
    return np.where(u[..., 0] < channel.loss_prob, LOST, delay)


def draw_outcomes(channel: Channel, rng: np.random.Generator | None, count: int) -> np.ndarray:
    """Delays for ``count`` consecutive sends (LOST for dropped packets).

    Consumes two uniforms per send, so it matches ``count`` calls of
    :func:`channel_send` on the same generator.
    """
    if channel.script is not None:
        if len(channel.script) < count:
            raise ConfigurationError("script", f"covers {len(channel.script)} sends, {count} needed")
        return np.array([LOST if d is None else d for d in channel.script[:count]], dtype=int)
    return _delay_from_uniforms(channel, rng.random((count, 2))).astype(int)


@dataclass(frozen=True)
class Delivery:
    packet: object
    arrival_step: int | None
    ack: bool | None  # tcp_like: receipt known to the sender in the arrival step


def channel_send(channel: Channel, packet, step: int, rng: np.random.Generator | None) -> Delivery:
    if channel.script is not None:
        d = channel.script[step]
        d = LOST if d is None else d
    else:
        d = int(_delay_from_uniforms(channel, rng.random(2)))
    arrival = None if d == LOST else step + d
    ack = (arrival is not None) if channel.ack_mode == "tcp_like" else None
    return Delivery(packet, arrival, ack)


def newest_arrivals(delays: np.ndarray, horizon: int) -> np.ndarray:
    """Newest origin step arriving at each step.

    ``delays[..., t]`` is the delay of the packet sent at t (LOST if dropped);
    returns ``(..., horizon)`` with -1 where nothing arrives.
    """
    delays = np.asarray(delays)
    lead = delays.shape[:-1]
    out = np.full(lead + (horizon,), -1, dtype=int)
    flat_out = out.reshape(-1, horizon)
    flat_d = delays.reshape(-1, delays.shape[-1])
    rows = np.arange(flat_d.shape[0])
    for t in range(flat_d.shape[1]):  # ascending t: later assignment is the newer origin
        arrival = t + flat_d[:, t]
        ok = (flat_d[:, t] != LOST) & (arrival < horizon)
        flat_out[rows[ok], arrival[ok]] = t
    return out


# --------------------------------------------------------------------------
# actuator


@dataclass
class ActuatorBuffer:
    u_default: np.ndarray
    packet: ControlPacket | None = None

    def receive(self, packets: Sequence[ControlPacket]) -> None:
        for p in packets:
            if self.packet is None or p.origin_step > self.packet.origin_step:
                self.packet = p

    def input_for(self, k: int) -> np.ndarray:
        if self.packet is not None:
            j = k - self.packet.origin_step
            if 0 <= j < len(self.packet.sequence):
                return np.asarray(self.packet.sequence[j])
        return np.asarray(self.u_default, dtype=float)


def actuator_step(buffer: ActuatorBuffer, arriving: Sequence[ControlPacket], k: int) -> np.ndarray:
    """Keep the newest sequence received so far and apply its entry for k."""
    buffer.receive(arriving)
    return buffer.input_for(k)


# --------------------------------------------------------------------------
# controller


@dataclass(frozen=True)
class AugmentedState:
    """Plant estimate plus every still-applicable input already sent.

    ``sent[..., j-1, :, :]`` is the packet generated j steps ago (zeros before
    the first packet); only its entries for steps >= k are part of the state.
    """

    x: np.ndarray  # (..., n)
    sent: np.ndarray  # (..., N_A, N_A + 1, m)
    u_default: np.ndarray  # (m,)

    @property
    def horizon_len(self) -> int:
        return self.sent.shape[-3]

    def as_vector(self) -> np.ndarray:
        """[x; U_{k-1}[1:]; U_{k-2}[2:]; ...; U_{k-N_A}[N_A:]; u_default].

        Length n + m N_A (N_A + 1) / 2 + m.
        """
        lead = self.x.shape[:-1]
        parts = [self.x]
        for j in range(1, self.horizon_len + 1):
            parts.append(self.sent[..., j - 1, j:, :].reshape(lead + (-1,)))
        parts.append(np.broadcast_to(self.u_default, lead + self.u_default.shape))
        return np.concatenate(parts, axis=-1)


class FeedbackLaw(Protocol):
    def __call__(self, xi: AugmentedState) -> np.ndarray:
        """Control sequence (..., N_A + 1, m) for the estimated augmented state."""


@dataclass(frozen=True)
class LinearSequenceLaw:
    """U_k[j] = gains[j] @ x_hat, j = 0..N_A."""

    gains: np.ndarray  # (N_A + 1, m, n)

    def __call__(self, xi: AugmentedState) -> np.ndarray:
        return np.einsum("jmn,...n->...jm", self.gains, xi.x)


@dataclass(frozen=True)
class ConstantLaw:
    sequence: np.ndarray  # (N_A + 1, m)

    def __call__(self, xi: AugmentedState) -> np.ndarray:
        return np.broadcast_to(self.sequence, xi.x.shape[:-1] + self.sequence.shape).copy()


def _stabilizable(A: np.ndarray, B: np.ndarray) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-12:
            if np.linalg.matrix_rank(np.hstack([A - lam * np.eye(n), B]), tol=1e-9) < n:
                return False
    return True


def lqr_gain(A, B, Q, R, horizon: int | None = None) -> np.ndarray:
    """State-feedback gain L with u = -L x.

    Infinite-horizon (discrete ARE) when (A, B) is stabilizable and no
    horizon is given; otherwise the first gain of a backward Riccati
    recursion over ``horizon`` steps (default 100).
    """
    A, B, Q, R = (np.asarray(M, dtype=float) for M in (A, B, Q, R))
    if horizon is None and _stabilizable(A, B):
        P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    else:
        P = Q.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(horizon or 100):
                S = R + B.T @ P @ B
                P = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
                P = 0.5 * (P + P.T)
                if not np.all(np.isfinite(P)):
                    raise ConfigurationError("controller", "Riccati recursion diverged")
    if not np.all(np.isfinite(P)):
        raise ConfigurationError("controller", "Riccati solution is not finite")
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def default_feedback_law(model: PlantModel, Q, R, N_A: int, horizon: int | None = None) -> LinearSequenceLaw:
    """Certainty-equivalent receding-horizon LQR sequence.

    u_{k+j|k} = -L (A - B L)^j x_hat for j = 0..N_A.
    """
    L = lqr_gain(model.A, model.B, Q, R, horizon)
    closed = model.A - model.B @ L
    gains = []
    power = np.eye(model.n)
    for _ in range(N_A + 1):
        gains.append(-L @ power)
        power = closed @ power
    return LinearSequenceLaw(np.array(gains))


def controller_step(xi: AugmentedState, law: Callable, step: int) -> ControlPacket:
    """Single-lane convenience wrapper: U_k = law(xi)."""
    return ControlPacket(step, np.asarray(law(xi), dtype=float))


@dataclass
class CostAccumulator:
    """sum_k x^T Q x + u^T R u, plus x_K^T Q x_K on finalization."""

    Q: np.ndarray
    R: np.ndarray
    total: np.ndarray | float = 0.0
    finalized: bool = False

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() < -1e-12:
            raise ConfigurationError("controller.Q", "must be positive semi-definite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T)).min() <= 0:
            raise ConfigurationError("controller.R", "must be positive definite")


def _quad(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", x, M, x)


def accumulate_cost(acc: CostAccumulator, x_true, u_applied) -> CostAccumulator:
    acc.total = acc.total + _quad(np.asarray(x_true, float), acc.Q) + _quad(np.asarray(u_applied, float), acc.R)
    return acc


def finalize_cost(acc: CostAccumulator, x_final) -> CostAccumulator:
    acc.total = acc.total + _quad(np.asarray(x_final, float), acc.Q)
    acc.finalized = True
    return acc


# --------------------------------------------------------------------------
# scenario and closed loop


@dataclass(frozen=True)
class AdaptSettings:
    enabled: bool = False
    window: int = 10
    margin: float = 0.1


@dataclass(frozen=True)
class Scenario:
    model: PlantModel
    sensors: tuple
    hgmm: Hgmm
    horizon: int
    se_channels: tuple  # one Channel per sensor
    ca_channel: Channel
    N_A: int
    Q: np.ndarray
    R: np.ndarray
    u_default: np.ndarray
    feedback: str = "lqr"  # "lqr" | "constant" | "none"
    constant_input: np.ndarray | None = None
    estimator: str = "hkf"  # "hkf" | "central"
    init: str = "measurement"  # "measurement" | "prior"
    adapt: AdaptSettings = field(default_factory=AdaptSettings)
    cond_threshold: float = DEFAULT_COND_THRESHOLD
    seed: int = 0
    simulate_noise: bool = True  # False: x0 = x0_mean, no process or measurement noise

    @property
    def first_step(self) -> int:
        return 1 if self.init == "measurement" else 0

    def feedback_law(self):
        m = self.model.m
        if self.feedback == "lqr":
            return default_feedback_law(self.model, self.Q, self.R, self.N_A)
        if self.feedback == "constant":
            u = np.zeros(m) if self.constant_input is None else np.asarray(self.constant_input, float)
            return ConstantLaw(np.tile(u, (self.N_A + 1, 1)))
        if self.feedback == "none":
            return ConstantLaw(np.zeros((self.N_A + 1, m)))
        raise ConfigurationError("controller.feedback", f"unknown law {self.feedback!r}")

    def build_schedule(self, hgmm: Hgmm | None = None) -> HypothesizedSchedule:
        prior = self.model.P0 if self.init == "prior" else None
        return build_schedule(self.model, self.sensors, hgmm or self.hgmm, self.horizon, prior_cov=prior)

    def sensor_prior_cov(self) -> np.ndarray:
        # Each node holds an equal share of the prior information, so the
        # fused prior covariance equals P0.
        return len(self.sensors) * self.model.P0


@dataclass
class LaneDraws:
    x0: np.ndarray  # (R, n)
    process: np.ndarray  # (R, K, n)
    sensor: list  # per sensor (R, K, q_i); row k is the noise of the step-k measurement
    se_delays: np.ndarray  # (R, M, K)
    ca_delays: np.ndarray  # (R, K)


def draw_lanes(scenario: Scenario, runs: Sequence[int], seed: int | None = None) -> LaneDraws:
    seed = scenario.seed if seed is None else seed
    model, sensors, K = scenario.model, scenario.sensors, scenario.horizon
    M = len(sensors)
    x0, proc, se, ca = [], [], [], []
    sens = [[] for _ in sensors]
    for r in runs:
        streams = run_streams(seed, int(r), 2 * M + 2)
        plant = streams[0]
        x0.append(model.x0_mean + model.initial_factor @ plant.standard_normal(model.n))
        proc.append(plant.standard_normal((K, model.n)) @ model.noise_factor.T)
        for i, s in enumerate(sensors):
            sens[i].append(streams[1 + i].standard_normal((K, s.q)) @ s.noise_factor.T)
        se.append([draw_outcomes(ch, streams[1 + M + i], K) for i, ch in enumerate(scenario.se_channels)])
        ca.append(draw_outcomes(scenario.ca_channel, streams[2 * M + 1], K))
    draws = LaneDraws(
        np.array(x0).reshape(len(runs), model.n),
        np.array(proc).reshape(len(runs), K, model.n),
        [np.array(v).reshape(len(runs), K, s.q) for v, s in zip(sens, sensors)],
        np.array(se, dtype=int).reshape(len(runs), M, K),
        np.array(ca, dtype=int).reshape(len(runs), K),
    )
    if not scenario.simulate_noise:
        draws.x0[:] = model.x0_mean
        draws.process[:] = 0.0
        for v in draws.sensor:
            v[:] = 0.0
    return draws


@dataclass
class SimulationResult:
    """Arrays indexed (lane, step, ...) for steps 0..K-1 unless noted."""

    runs: np.ndarray  # run indices of the lanes
    x_true: np.ndarray  # (R, K+1, n)
    u: np.ndarray  # (R, K, m)
    estimate: np.ndarray  # (R, K, n), NaN where unavailable
    available: np.ndarray  # (R, K)
    x_hat: np.ndarray  # (R, K, n) estimate used by the controller (fallback included)
    measurements: list  # per sensor (R, K, q_i), NaN where not taken
    received: np.ndarray  # (R, K, M) fresh packet adopted at this step
    origin: np.ndarray  # (R, K, M) newest delivered origin (-1 none)
    delta_dev: np.ndarray  # (R, K) ||Delta_f - I||_F, NaN with no data
    running_cost: np.ndarray  # (R, K)
    total_cost: np.ndarray  # (R,) including the terminal term
    actuator_origin: np.ndarray  # (R, K) origin of the applied sequence, -1 for default
    sent: np.ndarray  # (R, K, N_A+1, m)
    internals: dict = field(default_factory=dict)
    hgmm_history: list = field(default_factory=list)
    schedules: list = field(default_factory=list)  # final schedule of each lane


def _propagate(model: PlantModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return x @ model.A.T + u @ model.B.T


def run_closed_loop(
    scenario: Scenario,
    runs: Sequence[int] | int = 1,
    seed: int | None = None,
    record_internals: bool = False,
    draws: LaneDraws | None = None,
) -> SimulationResult:
    """Simulate the closed loop for a batch of runs (lanes).

    ``runs`` is a count (runs 0..runs-1) or explicit run indices.  Each lane
    depends only on (seed, run index).  With HGMM adaptation enabled the
    lanes are simulated one after the other, since each lane then follows
    its own schedule.
    """
    runs = np.arange(runs) if np.isscalar(runs) else np.asarray(runs, dtype=int)
    if draws is None:
        draws = draw_lanes(scenario, runs, seed)
    if scenario.adapt.enabled and scenario.estimator == "hkf" and len(runs) > 1:
        parts = [
            run_closed_loop(scenario, [r], seed, record_internals, _slice_draws(draws, j))
            for j, r in enumerate(runs)
        ]
        return _concat_results(parts)
    return _Loop(scenario, runs, draws, record_internals).run()


def _slice_draws(d: LaneDraws, j: int) -> LaneDraws:
    s = slice(j, j + 1)
    return LaneDraws(d.x0[s], d.process[s], [v[s] for v in d.sensor], d.se_delays[s], d.ca_delays[s])


def _concat_results(parts: list[SimulationResult]) -> SimulationResult:
    first = parts[0]
    kw = {}
    for name in first.__dataclass_fields__:
        vals = [getattr(p, name) for p in parts]
        if name == "measurements":
            kw[name] = [np.concatenate(v) for v in zip(*vals)]
        elif name == "internals":
            kw[name] = {key: np.concatenate([v[key] for v in vals]) for key in first.internals}
        elif name in ("hgmm_history", "schedules"):
            kw[name] = [h for v in vals for h in v]
        else:
            kw[name] = np.concatenate(vals)
    return SimulationResult(**kw)


class _Loop:
    def __init__(self, sc: Scenario, runs: np.ndarray, draws: LaneDraws, record: bool):
        self.sc, self.runs, self.d, self.record = sc, runs, draws, record
        self.model = sc.model
        self.sensors = list(sc.sensors)
        self.R = len(runs)
        self.K = sc.horizon
        self.law = sc.feedback_law()

    def run(self) -> SimulationResult:
        sc, model, sensors, R, K = self.sc, self.model, self.sensors, self.R, self.K
        n, m, M, N_A = model.n, model.m, len(sensors), sc.N_A
        k0 = sc.first_step
        hgmm = sc.hgmm
        schedule = sc.build_schedule()

        se_arrivals = newest_arrivals(self.d.se_delays, K)  # (R, M, K)
        ca_arrivals = newest_arrivals(self.d.ca_delays, K)  # (R, K)
        act_origin = np.maximum.accumulate(ca_arrivals, axis=1)

        x_true = np.zeros((R, K + 1, n))
        x_true[:, 0] = self.d.x0
        u_hist = np.zeros((R, K, m))
        est_hist = np.full((R, K, n), np.nan)
        avail = np.zeros((R, K), dtype=bool)
        xhat_hist = np.zeros((R, K, n))
        z_hist = [np.full((R, K, s.q), np.nan) for s in sensors]
        payload = np.zeros((M, K, R, n))
        received = np.zeros((R, K, M), dtype=bool)
        origin = np.full((R, K, M), -1, dtype=int)
        delta_dev = np.full((R, K), np.nan)
        running = np.zeros((R, K))
        sent = np.zeros((R, K, N_A + 1, m))
        internals = {}
        if self.record:
            internals = {
                "x_f": np.zeros((R, K, n)),
                "delta_f": np.zeros((R, K, n, n)),
                "xu_f": np.zeros((R, K, n)),
                "xu_nodes": np.zeros((R, K, M, n)),
                "x_nodes": np.zeros((R, K, M, n)),
                "delta_nodes": np.zeros((R, K, M, n, n)),
                "sensor_delta": np.full((R, K, M, n, n), np.nan),
                "payload": None,
            }

        local = [None] * M
        prior_cov = sc.sensor_prior_cov() if sc.init == "prior" else None
        ctrl = None
        if sc.estimator == "hkf":
            prior_deltas = None
            if sc.init == "prior":
                prior_deltas = [schedule.Cx[0] @ np.linalg.inv(prior_cov)] * M
            ctrl = ControllerEstimator(schedule, model, sensors, R, sc.cond_threshold, prior_deltas)
        elif sc.estimator != "central":
            raise ConfigurationError("estimator.kind", f"unknown estimator {sc.estimator!r}")
        kf_mean, kf_cov = None, None
        delta_f_log: list[np.ndarray] = []
        hgmm_history = [np.array(hgmm.info_matrix)]
        cost = np.zeros(R)
        x_hat_prev = None

        for k in range(K):
            xk = x_true[:, k]
            # sensors
            zs = [None] * M
            if k >= 1:
                for i, s in enumerate(sensors):
                    zs[i] = xk @ s.H.T + self.d.sensor[i][:, k]
                    z_hist[i][:, k] = zs[i]
            if k >= k0:
                for i, s in enumerate(sensors):
                    if k == 0:
                        local[i] = init_from_prior(schedule, np.broadcast_to(model.x0_mean, (R, n)), prior_cov, s.id)
                    elif k == 1 and k0 == 1:
                        local[i] = init_from_measurement(schedule, s, zs[i])
                    else:
                        local[i] = filter_step(predict(local[i], model), schedule, s, zs[i])
                    payload[i, k] = local[i].x_info
                    if self.record:
                        internals["sensor_delta"][:, k, i] = local[i].delta

            # controller estimate
            available = np.zeros(R, dtype=bool)
            est = np.full((R, n), np.nan)
            if sc.estimator == "hkf" and k >= k0:
                if k == k0:
                    ctrl.start()
                else:
                    ctrl.advance()
                for i in range(M):
                    t_new = se_arrivals[:, i, k]
                    fresh = ctrl.receive(i, t_new, payload[i, np.maximum(t_new, 0), np.arange(R)])
                    received[:, k, i] = fresh
                origin[:, k] = ctrl.origin
                est, available, x_f, delta_f, xu_f = ctrl.estimate()
                has_any = ctrl.has.any(axis=1)
                dev = np.linalg.norm(delta_f - np.eye(n), axis=(-2, -1))
                delta_dev[:, k] = np.where(has_any, dev, np.nan)
                if self.record:
                    internals["x_f"][:, k] = x_f
                    internals["delta_f"][:, k] = delta_f
                    internals["xu_f"][:, k] = xu_f
                    internals["xu_nodes"][:, k] = ctrl.xu * ctrl.has[..., None]
                    internals["x_nodes"][:, k] = ctrl.x * ctrl.has[..., None]
                    internals["delta_nodes"][:, k] = ctrl.delta * ctrl.has[..., None, None]
                if sc.adapt.enabled:
                    delta_f_log.append(delta_f[0])
                    done = k - k0 + 1
                    if done % sc.adapt.window == 0 and k < K - 1:
                        current = hgmm.at(k + 1)
                        new = adapt_hgmm(current, delta_f_log, sc.adapt.window, sc.adapt.margin)
                        if not np.array_equal(new, current):
                            stack = np.array(np.broadcast_to(hgmm.info_matrix, (K + 1, n, n)))
                            stack[k + 1 :] = new
                            hgmm = Hgmm(stack)
                            schedule = sc.build_schedule(hgmm)
                            ctrl.replace_schedule(schedule)
                        hgmm_history.append(np.array(new))
            elif sc.estimator == "central":
                if k == 0 and sc.init == "prior":
                    kf_mean, kf_cov = np.broadcast_to(model.x0_mean, (R, n)).copy(), model.P0
                elif k >= 1:
                    if kf_cov is None:
                        kf_mean, kf_cov = central_kf_step(None, None, zs, None, model, sensors)
                    else:
                        kf_mean, kf_cov = central_kf_step(kf_mean, kf_cov, zs, u_hist[:, k - 1], model, sensors)
                if kf_mean is not None:
                    est, available = kf_mean.copy(), np.ones(R, dtype=bool)

            if x_hat_prev is None:
                fallback = np.broadcast_to(model.x0_mean, (R, n))
            else:
                fallback = _propagate(model, x_hat_prev, u_hist[:, k - 1])
            x_hat = np.where(available[:, None], est, fallback)
            est_hist[:, k] = est
            avail[:, k] = available
            xhat_hist[:, k] = x_hat
            x_hat_prev = x_hat

            # control sequence
            history = np.zeros((R, N_A, N_A + 1, m))
            for j in range(1, N_A + 1):
                if k - j >= 0:
                    history[:, j - 1] = sent[:, k - j]
            xi = AugmentedState(x_hat, history, np.asarray(sc.u_default, float))
            sent[:, k] = np.asarray(self.law(xi), dtype=float).reshape(R, N_A + 1, m)

            # actuator (the acknowledgment makes the applied input known)
            c = act_origin[:, k]
            age = k - c
            use = (c >= 0) & (age <= N_A)
            chosen = sent[np.arange(R), np.maximum(c, 0), np.clip(age, 0, N_A)]
            u = np.where(use[:, None], chosen, np.asarray(sc.u_default, float))
            u_hist[:, k] = u
            if ctrl is not None:
                ctrl.record_input(k, u)

            cost = cost + _quad(xk, sc.Q) + _quad(u, sc.R)
            running[:, k] = cost
            x_true[:, k + 1] = _propagate(model, xk, u) + self.d.process[:, k]

        total = cost + _quad(x_true[:, K], sc.Q)
        if self.record:
            internals["payload"] = np.transpose(payload, (2, 1, 0, 3))  # (R, K, M, n)
        return SimulationResult(
            runs=self.runs,
            x_true=x_true,
            u=u_hist,
            estimate=est_hist,
            available=avail,
            x_hat=xhat_hist,
            measurements=z_hist,
            received=received,
            origin=origin,
            delta_dev=delta_dev,
            running_cost=running,
            total_cost=total,
            actuator_origin=np.where(act_origin - np.arange(K) >= -N_A, act_origin, -1),
            sent=sent,
            internals=internals,
            hgmm_history=hgmm_history,
            schedules=[schedule] * R,
        )
