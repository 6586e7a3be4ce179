"""Hypothesizing distributed Kalman filter (HKF) estimation for sequence-based networked control."""

from .config import load_scenario, scenario_from_config
from .hkf_controller import (
    ControllerEstimator,
    EstimateUnavailable,
    NodeEntry,
    catch_up,
    constant_input_transfer,
    debias,
    fuse,
    update_input_correction,
)
from .hkf_local import Hgmm, HypothesizedSchedule, build_schedule, filter_step, init_from_measurement, init_from_prior, predict
from .model import ConfigurationError, PlantModel, SensorModel, run_streams
from .ncs import Channel, Scenario, SimulationResult, run_closed_loop

__all__ = [
    "Channel",
    "ConfigurationError",
    "ControllerEstimator",
    "EstimateUnavailable",
    "Hgmm",
    "HypothesizedSchedule",
    "NodeEntry",
    "PlantModel",
    "Scenario",
    "SensorModel",
    "SimulationResult",
    "build_schedule",
    "catch_up",
    "constant_input_transfer",
    "debias",
    "filter_step",
    "fuse",
    "init_from_measurement",
    "init_from_prior",
    "load_scenario",
    "predict",
    "run_closed_loop",
    "run_streams",
    "scenario_from_config",
    "update_input_correction",
]
