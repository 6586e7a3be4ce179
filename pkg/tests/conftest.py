import dataclasses

import numpy as np
import pytest

from hkfncs.hkf_local import Hgmm
from hkfncs.model import PlantModel, SensorModel
from hkfncs.ncs import AdaptSettings, Channel, Scenario


def spd(rng, n, scale=1.0, floor=0.3):
    G = rng.standard_normal((n, n))
    return scale * (G @ G.T / n + floor * np.eye(n))


def random_system(seed, n, M, m=1, spread=0.1):
    """Seeded plant with singular values of A in [1 - spread, 1 + spread] and M sensors.

    The stacked measurement matrix always has at least n rows, so the summed
    sensor information is invertible.
    """
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = U @ np.diag(rng.uniform(1 - spread, 1 + spread, n)) @ V.T
    model = PlantModel(
        A=A,
        B=rng.standard_normal((n, m)),
        Xi=spd(rng, n, 0.1),
        x0_mean=rng.standard_normal(n),
        P0=spd(rng, n),
    )
    qs = rng.integers(1, n + 1, size=M)
    if qs.sum() < n:
        qs[0] = n
    sensors = tuple(SensorModel(i, rng.standard_normal((q, n)), spd(rng, q, 0.5)) for i, q in enumerate(qs))
    return model, sensors


def scalar_model(A=1.0, B=1.0, Xi=1.0, x0=0.0, P0=1.0):
    return PlantModel(A=[[A]], B=[[B]], Xi=[[Xi]], x0_mean=[x0], P0=[[P0]])


def make_scenario(model, sensors, horizon, hgmm=None, se=None, ca=None, **kw):
    M = len(sensors)
    se = se if se is not None else Channel()
    se_channels = tuple(se) if isinstance(se, (list, tuple)) else (se,) * M
    base = dict(
        model=model,
        sensors=tuple(sensors),
        hgmm=hgmm if hgmm is not None else Hgmm.matched(sensors),
        horizon=horizon,
        se_channels=se_channels,
        ca_channel=ca if ca is not None else Channel(ack_mode="tcp_like"),
        N_A=0,
        Q=np.eye(model.n),
        R=np.eye(model.m),
        u_default=np.zeros(model.m),
        adapt=AdaptSettings(),
    )
    base.update(kw)
    return Scenario(**base)


def rel(a, b):
    """||a - b|| / ||b|| (absolute when b is exactly zero)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    nb = np.linalg.norm(b)
    return np.linalg.norm(a - b) / nb if nb > 0 else np.linalg.norm(a - b)


@pytest.fixture
def scalar_case():
    """A=1, Xi=1, one sensor H=Theta=1, HGMM=1."""
    model = scalar_model()
    sensor = SensorModel(0, [[1.0]], [[1.0]])
    return model, sensor


replace = dataclasses.replace


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
