"""Monte Carlo batches, HGMM sensitivity sweeps and the oracle verification suite."""

from __future__ import annotations

import contextlib
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ncs
from .hkf_controller import constant_input_transfer, update_input_correction
from .hkf_local import Hgmm, LocalEstimateState
from .model import ConfigurationError
from .ncs import Scenario, draw_lanes, run_closed_loop
from .oracle import (
    delta_sum_formula,
    gain_product,
    input_inner_term,
    x_sum_formula,
    xu_sum_formula,
)
from .records import SUMMARY_SCHEMA, SWEEP_SCHEMA

Z95 = 1.959963984540054


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class BatchErrors:
    """Raw per-run results, rows in run-index order."""

    runs: np.ndarray
    error: np.ndarray  # (R, K, n) estimate - x_true, NaN where unavailable
    cost: np.ndarray  # (R,)


def _run_chunk(args) -> BatchErrors:
    scenario, runs, seed = args
    res = run_closed_loop(scenario, runs, seed)
    K = scenario.horizon
    return BatchErrors(res.runs, res.estimate - res.x_true[:, :K], res.total_cost)


def collect_errors(
    scenario: Scenario, runs: int, seed: int | None = None, chunk: int = 1000, parallel: int = 1
) -> BatchErrors:
    """Run ``runs`` lanes in chunks; the result does not depend on chunking or ``parallel``."""
    seed = scenario.seed if seed is None else seed
    if runs < 1:
        raise ConfigurationError("runs", "must be at least 1")
    jobs = [(scenario, np.arange(a, min(a + chunk, runs)), seed) for a in range(0, runs, chunk)]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            parts = list(pool.map(_run_chunk, jobs))  # map keeps submission order
    else:
        parts = [_run_chunk(j) for j in jobs]
    return BatchErrors(
        np.concatenate([p.runs for p in parts]),
        np.concatenate([p.error for p in parts]),
        np.concatenate([p.cost for p in parts]),
    )


def _mean_stderr(values: np.ndarray, axis: int = 0):
    """Mean, standard error and count along ``axis`` ignoring NaN."""
    count = np.sum(~np.isnan(values), axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(values, axis=axis) / count
        dev = np.where(np.isnan(values), 0.0, values - np.expand_dims(mean, axis))
        var = np.sum(dev**2, axis=axis) / (count - 1)
        stderr = np.sqrt(var / count)
    return mean, stderr, count


def _interval(mean, stderr) -> dict:
    return {"mean": mean, "stderr": stderr, "ci95": [mean - Z95 * stderr, mean + Z95 * stderr]}


def summarize(batch: BatchErrors, seed: int) -> dict:
    err = batch.error
    R, K, n = err.shape
    mean_k, se_k, count_k = _mean_stderr(err, axis=0)  # (K, n)
    sq = np.sum(err**2, axis=-1)  # (R, K)
    mse_k, mse_se_k, _ = _mean_stderr(sq, axis=0)

    avail = ~np.isnan(err[..., 0])
    with np.errstate(invalid="ignore"):
        per_run_err = np.nanmean(np.where(avail[..., None], err, np.nan), axis=1) if K else err[:, 0]
        per_run_mse = np.nanmean(np.where(avail, sq, np.nan), axis=1)
    pooled_mean, pooled_se, pooled_count = _mean_stderr(per_run_err, axis=0)
    mse_mean, mse_se, _ = _mean_stderr(per_run_mse, axis=0)
    cost_mean, cost_se, _ = _mean_stderr(batch.cost, axis=0)
    return {
        "schema": SUMMARY_SCHEMA,
        "runs": int(R),
        "seed": int(seed),
        "horizon": int(K),
        "state_dim": int(n),
        "per_step": {
            "mean_error": mean_k,
            "stderr": se_k,
            "mse": mse_k,
            "mse_stderr": mse_se_k,
            "count": count_k[:, 0] if K else [],
        },
        "pooled": {
            "mean_error": pooled_mean,
            "stderr": pooled_se,
            "runs_with_estimate": int(pooled_count[0]) if n else 0,
        },
        "mse": _interval(float(mse_mean), float(mse_se)),
        "cost": _interval(float(cost_mean), float(cost_se)),
        "availability": float(avail.mean()) if avail.size else 0.0,
    }


def monte_carlo(scenario: Scenario, runs: int, seed: int | None = None, parallel: int = 1, chunk: int = 1000) -> dict:
    """Summary statistics of ``runs`` independent closed-loop runs."""
    seed = scenario.seed if seed is None else seed
    return summarize(collect_errors(scenario, runs, seed, chunk, parallel), seed)


def hgmm_sweep(
    scenario: Scenario,
    alphas: Sequence[float],
    runs: int,
    seed: int | None = None,
    parallel: int = 1,
    chunk: int = 1000,
) -> list[dict]:
    """MSE versus the scale alpha of the matched HGMM.

    Every alpha uses the same run indices and seed (common random numbers).
    """
    seed = scenario.seed if seed is None else seed
    rows = []
    for a in alphas:
        if not a > 0:
            raise ConfigurationError("alphas", f"scale must be positive, got {a}")
        sc = dataclasses.replace(scenario, hgmm=Hgmm.matched(scenario.sensors, float(a)))
        s = summarize(collect_errors(sc, runs, seed, chunk, parallel), seed)
        mse = s["mse"]
        rows.append(
            {
                "schema": SWEEP_SCHEMA,
                "alpha": float(a),
                "mse": mse["mean"],
                "stderr": mse["stderr"],
                "ci_low": mse["ci95"][0],
                "ci_high": mse["ci95"][1],
                "runs": runs,
            }
        )
    return rows


SWEEP_COLUMNS = ("schema", "alpha", "mse", "stderr", "ci_low", "ci_high", "runs")


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class IdentityResult:
    name: str
    worst: float
    tolerance: float
    checked: int  # number of compared items; 0 means not applicable
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.checked == 0 or self.worst <= self.tolerance


def relative_residuals(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """||a_j - b_j|| / ||b_j|| over the leading axis.

    Reference norms below 1e-12 of the largest one count as that floor, so
    items that are zero up to rounding do not dominate.
    """
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    if a.size == 0:
        return np.zeros(0)
    ref = np.linalg.norm(b, axis=1)
    floor = 1e-12 * ref.max()
    diff = np.linalg.norm(a - b, axis=1)
    if floor == 0.0:
        return diff
    return diff / np.maximum(ref, floor)


class _Collector:
    def __init__(self):
        self.data: dict[str, list] = {}
        self.notes: dict[str, str] = {}

    def add(self, name: str, a, b):
        self.data.setdefault(name, [[], []])
        self.data[name][0].append(np.asarray(a, dtype=float))
        self.data[name][1].append(np.asarray(b, dtype=float))

    def skip(self, name: str, note: str):
        self.data.setdefault(name, [[], []])
        self.notes[name] = note

    def result(self, name: str, tol: float) -> IdentityResult:
        a, b = self.data.get(name, [[], []])
        if not a:
            return IdentityResult(name, 0.0, tol, 0, self.notes.get(name, "not exercised"))
        res = relative_residuals(np.array(a), np.array(b))
        return IdentityResult(name, float(res.max()), tol, len(a), self.notes.get(name, ""))


TOLERANCES = {
    "gain_identity": 1e-10,
    "local_x_sum": 1e-8,
    "local_delta_sum": 1e-8,
    "input_correction_sum": 1e-8,
    "inner_term": 1e-9,
    "catch_up_x": 1e-8,
    "catch_up_delta": 1e-8,
    "catch_up_input": 1e-8,
    "debiased_estimate": 1e-8,
    "additivity": 1e-10,
    "exactness": 1e-8,
    "constant_input_transfer": 1e-10,
    "central_equivalence": 1e-9,
}


def _lossless(scenario: Scenario) -> bool:
    return all(ch.script is None and ch.loss_prob == 0.0 and ch.delay_pmf[0] == 1.0 for ch in scenario.se_channels)


def _matched(scenario: Scenario) -> bool:
    target = sum(s.information for s in scenario.sensors)
    H = scenario.hgmm.info_matrix
    return bool(np.allclose(H, target, rtol=1e-12, atol=1e-14 * np.abs(target).max()))


class _Tables:
    """Memoized oracle quantities of one schedule."""

    def __init__(self, scenario: Scenario, schedule, prior_deltas):
        self.sc, self.s, self.model = scenario, schedule, scenario.model
        self.prior = prior_deltas
        self._delta: dict = {}

    def initial(self, i):
        return None if self.prior is None else {i: self.prior[i]}

    def delta(self, i: int, t: int, origin: int | None = None) -> np.ndarray:
        """Node i's correction matrix at t, measurement terms cut after ``origin``."""
        cut = t if origin is None or origin >= t else origin
        key = (i, t, cut)
        if key not in self._delta:
            if t < self.s.first_step and (origin is None or origin >= t):
                self._delta[key] = np.zeros((self.model.n,) * 2)
            else:
                self._delta[key] = delta_sum_formula(
                    self.s, self.model, self.sc.sensors, [i], t, upto={i: cut}, initial=self.initial(i)
                )
        return self._delta[key]


def verify(
    scenario: Scenario, runs: int = 2, seed: int | None = None, horizon_cap: int = 40
) -> list[IdentityResult]:
    """Compare the recursive estimator against the brute-force oracle.

    Steps 0..K of the configured system are checked (K capped at
    ``horizon_cap``), on ``runs`` seeded closed-loop runs and on the same
    runs with all noise removed.
    """
    K = min(scenario.horizon, horizon_cap)
    sc = dataclasses.replace(scenario, horizon=K + 1, adapt=ncs.AdaptSettings())
    if sc.estimator != "hkf":
        sc = dataclasses.replace(sc, estimator="hkf")
    model, sensors = sc.model, list(sc.sensors)
    n, k0 = model.n, sc.first_step
    run_ids = np.arange(runs)
    schedule = sc.build_schedule()
    prior_deltas = None
    if sc.init == "prior":
        prior_deltas = {s.id: schedule.Cx[0] @ np.linalg.inv(sc.sensor_prior_cov()) for s in sensors}
    tab = _Tables(sc, schedule, prior_deltas)
    col = _Collector()
    eye = np.eye(n)

    for k in range(max(k0, 1), K + 1):
        col.add("gain_identity", schedule.K[k] + schedule.Cx[k] @ schedule.hgmm[k], eye)

    draws = draw_lanes(sc, run_ids, seed)
    res = run_closed_loop(sc, run_ids, seed, record_internals=True, draws=draws)
    quiet = dataclasses.replace(sc, simulate_noise=False)
    clean = run_closed_loop(quiet, run_ids, seed, record_internals=True, draws=draw_lanes(quiet, run_ids, seed))
    ins = res.internals

    # full (uncut) fused correction matrices from the oracle
    delta_f = {t: sum(tab.delta(s.id, t) for s in sensors) for t in range(K + 1)}

    for r in range(runs):
        z = {s.id: res.measurements[j][r] for j, s in enumerate(sensors)}
        init_x = None
        if prior_deltas is not None:
            init_x = {s.id: prior_deltas[s.id] @ model.x0_mean for s in sensors}
        u = res.u[r]
        for k in range(k0, K + 1):
            for j, s in enumerate(sensors):
                ini = None if init_x is None else {s.id: init_x[s.id]}
                col.add("local_x_sum", ins["payload"][r, k, j], x_sum_formula(schedule, model, z, [s.id], k, initial=ini))
                col.add("local_delta_sum", ins["sensor_delta"][r, k, j], tab.delta(s.id, k))
                if res.origin[r, k, j] < 0:
                    continue
                o = int(res.origin[r, k, j])
                col.add(
                    "catch_up_x",
                    ins["x_nodes"][r, k, j],
                    x_sum_formula(schedule, model, z, [s.id], k, upto={s.id: o}, initial=ini),
                )
                col.add("catch_up_delta", ins["delta_nodes"][r, k, j], tab.delta(s.id, k, o))
                deltas = [tab.delta(s.id, t, o) for t in range(k)]
                col.add("catch_up_input", ins["xu_nodes"][r, k, j], xu_sum_formula(schedule, model, deltas, u, k))
            col.add("additivity", ins["xu_nodes"][r, k].sum(axis=0), ins["xu_f"][r, k])
            if res.available[r, k]:
                col.add(
                    "debiased_estimate",
                    res.estimate[r, k],
                    np.linalg.solve(ins["delta_f"][r, k], ins["x_f"][r, k] + ins["xu_f"][r, k]),
                )

        for k in range(k0, K + 1):
            # full-group input correction, recursion vs sum
            deltas_full = [sum(tab.delta(s.id, t) for s in sensors) for t in range(k)]
            xu_rec = np.zeros(n)
            for t in range(k0 + 1, k + 1):
                xu_rec = update_input_correction(xu_rec, deltas_full[t - 1], u[t - 1], schedule, model, t)
            col.add("input_correction_sum", xu_rec, xu_sum_formula(schedule, model, deltas_full, u, k))

        # exactness on the noise-free replica
        ci = clean.internals
        for k in range(k0, K + 1):
            if clean.origin[r, k].max() < 0:
                continue
            col.add("exactness", ci["x_f"][r, k] + ci["xu_f"][r, k], ci["delta_f"][r, k] @ clean.x_true[r, k])
            col.add("additivity", ci["xu_nodes"][r, k].sum(axis=0), ci["xu_f"][r, k])

    # inner-term identity: G(l,k) Delta_f(l) A^-1 = sum of measurement terms
    group = [s.id for s in sensors]
    for k in range(k0, K + 1):
        for l in range(k0, k):
            lhs = gain_product(schedule, model, l, k) @ delta_f[l] @ model.A_inv
            col.add("inner_term", lhs, input_inner_term(schedule, model, sensors, group, l, k, initial=prior_deltas))

    # constant input: M(k) B b against the general recursion with u = b
    b = np.ones(model.m)
    transfer = np.zeros((n, n))
    xu = np.zeros(n)
    for k in range(k0 + 1, K + 1):
        transfer = constant_input_transfer(transfer, delta_f[k - 1], schedule, model, k)
        xu = update_input_correction(xu, delta_f[k - 1], b, schedule, model, k)
        col.add("constant_input_transfer", transfer @ model.B @ b, xu)

    # central equivalence
    if _matched(sc) and _lossless(sc):
        central = run_closed_loop(dataclasses.replace(sc, estimator="central"), run_ids, seed, draws=draws)
        for r in range(runs):
            for k in range(k0, K + 1):
                if res.available[r, k]:
                    col.add("central_equivalence", res.estimate[r, k], central.estimate[r, k])
    else:
        col.skip("central_equivalence", "needs matched HGMM and lossless sensor channels")

    return [col.result(name, tol) for name, tol in TOLERANCES.items()]


@contextlib.contextmanager
def fault_injection(kind: str, size: float = 1e-3) -> Iterator[None]:
    """Test hook: corrupt a sensor-side recursion inside the closed loop.

    ``kind="delta"`` adds ``size * I`` to every filtered correction matrix.
    """
    if kind != "delta":
        raise ConfigurationError("inject-fault", f"unknown fault {kind!r}")
    original = ncs.filter_step

    def corrupted(state, schedule, sensor, z) -> LocalEstimateState:
        out = original(state, schedule, sensor, z)
        return dataclasses.replace(out, delta=out.delta + size * np.eye(out.delta.shape[-1]))

    ncs.filter_step = corrupted
    try:
        yield
    finally:
        ncs.filter_step = original
