"""Scenario configuration: a JSON object, matrices as row-major nested lists.

Sensors are numbered by their position in ``sensors`` (0-based).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .hkf_controller import DEFAULT_COND_THRESHOLD
from .hkf_local import Hgmm
from .model import ConfigurationError, PlantModel, SensorModel
from .ncs import AdaptSettings, Channel, Scenario


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(str(path), f"invalid JSON ({exc})") from exc


def _get(cfg: dict, key: str, where: str, default: Any = ...):
    if key in cfg:
        return cfg[key]
    if default is ...:
        raise ConfigurationError(f"{where}{key}", "missing")
    return default


def _retag(exc: ConfigurationError, prefix: str) -> ConfigurationError:
    name = exc.field if exc.field.startswith(prefix) else f"{prefix}.{exc.field}"
    return ConfigurationError(name, str(exc).split(": ", 1)[-1])


def _channel(cfg: dict, where: str, ack_mode: str) -> Channel:
    if "ack_mode" in cfg and cfg["ack_mode"] != ack_mode:
        raise ConfigurationError(f"{where}.ack_mode", f"must be {ack_mode!r}")
    try:
        return Channel(
            loss_prob=float(cfg.get("loss_prob", 0.0)),
            delay_pmf=tuple(cfg.get("delay_pmf", (1.0,))),
            ack_mode=ack_mode,
            script=cfg.get("script"),
        )
    except ConfigurationError as exc:
        raise _retag(exc, where) from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(where, str(exc)) from None


def _matrix(value, where: str, shape: tuple[int, int]) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise ConfigurationError(where, f"expected shape {shape}, got {arr.shape}")
    return arr


def scenario_from_config(cfg: dict) -> Scenario:
    """Validate a configuration object and build the scenario."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("config", "must be a JSON object")
    horizon = int(_get(cfg, "horizon", ""))
    if horizon < 1:
        raise ConfigurationError("horizon", "must be at least 1")

    p = _get(cfg, "plant", "")
    model = PlantModel(
        A=_get(p, "A", "plant."),
        B=_get(p, "B", "plant."),
        Xi=_get(p, "Xi", "plant."),
        x0_mean=_get(p, "x0_mean", "plant."),
        P0=_get(p, "P0", "plant."),
    )
    n, m = model.n, model.m

    raw_sensors = _get(cfg, "sensors", "")
    if not raw_sensors:
        raise ConfigurationError("sensors", "at least one sensor is required")
    sensors = []
    for i, s in enumerate(raw_sensors):
        sensor = SensorModel(i, _get(s, "H", f"sensors[{i}]."), _get(s, "Theta", f"sensors[{i}]."))
        sensor.check_state_dim(n)
        sensors.append(sensor)

    h = cfg.get("hgmm", "matched")
    try:
        if h == "matched":
            hgmm = Hgmm.matched(sensors)
        elif isinstance(h, dict) and "scaled" in h:
            hgmm = Hgmm.matched(sensors, float(h["scaled"]))
        else:
            hgmm = Hgmm(_matrix(h, "hgmm", (n, n)))
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError("hgmm", str(exc)) from None

    net = cfg.get("network", {})
    se_cfg = dict(net.get("se", {}))
    overrides = se_cfg.pop("overrides", {}) or {}
    se = []
    for i in range(len(sensors)):
        merged = {**se_cfg, **overrides.get(str(i), {})}
        se.append(_channel(merged, f"network.se[{i}]", "none"))
    ca = _channel(net.get("ca", {}), "network.ca", "tcp_like")

    c = cfg.get("controller", {})
    N_A = int(c.get("N_A", 0))
    if N_A < 0:
        raise ConfigurationError("controller.N_A", "must be non-negative")
    Q = _matrix(c.get("Q", np.eye(n).tolist()), "controller.Q", (n, n))
    R = _matrix(c.get("R", np.eye(m).tolist()), "controller.R", (m, m))
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise ConfigurationError("controller.Q", "must be positive semi-definite")
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ConfigurationError("controller.R", "must be positive definite")
    u_default = np.array(c.get("u_default", [0.0] * m), dtype=float).reshape(-1)
    if u_default.shape != (m,):
        raise ConfigurationError("controller.u_default", f"expected length {m}")
    feedback = c.get("feedback", "lqr")
    if feedback not in ("lqr", "constant", "none"):
        raise ConfigurationError("controller.feedback", f"unknown law {feedback!r}")
    constant = c.get("constant_input")
    if constant is not None:
        constant = np.array(constant, dtype=float).reshape(-1)
        if constant.shape != (m,):
            raise ConfigurationError("controller.constant_input", f"expected length {m}")

    e = cfg.get("estimator", {})
    kind = e.get("kind", "hkf")
    if kind not in ("hkf", "central"):
        raise ConfigurationError("estimator.kind", f"unknown estimator {kind!r}")
    init = e.get("init", "measurement")
    if init not in ("measurement", "prior"):
        raise ConfigurationError("estimator.init", f"unknown initialization {init!r}")
    adapt = AdaptSettings(
        enabled=bool(e.get("adapt_hgmm", False)),
        window=int(e.get("adapt_window", 10)),
        margin=float(e.get("adapt_margin", 0.1)),
    )
    if adapt.window < 1:
        raise ConfigurationError("estimator.adapt_window", "must be at least 1")

    scenario = Scenario(
        model=model,
        sensors=tuple(sensors),
        hgmm=hgmm,
        horizon=horizon,
        se_channels=tuple(se),
        ca_channel=ca,
        N_A=N_A,
        Q=Q,
        R=R,
        u_default=u_default,
        feedback=feedback,
        constant_input=constant,
        estimator=kind,
        init=init,
        adapt=adapt,
        cond_threshold=float(e.get("cond_threshold", DEFAULT_COND_THRESHOLD)),
        seed=int(cfg.get("seed", 0)),
        simulate_noise=bool(cfg.get("simulate_noise", True)),
    )
    try:
        scenario.build_schedule()
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError("hgmm", str(exc)) from None
    scenario.feedback_law()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_config(load_config(path))
