"""Per-step trace records and their CSV form.

CSV columns, in order (n states, m inputs, M sensors)::

    schema, step, x_0..x_{n-1}, u_0..u_{m-1}, estimate_available,
    est_0..est_{n-1}, received_0..received_{M-1}, origin_0..origin_{M-1},
    delta_dev, running_cost

``schema`` is :data:`TRACE_SCHEMA` on every row.  Floats are written with
``repr`` so values round-trip exactly; an unavailable estimate is written as
empty cells, ``delta_dev`` is empty before any node has delivered.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .ncs import SimulationResult

TRACE_SCHEMA = "hkfncs.trace.v1"
SUMMARY_SCHEMA = "hkfncs.summary.v1"
SWEEP_SCHEMA = "hkfncs.sweep.v1"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    x_true: tuple
    u: tuple
    estimate: tuple | None  # None: unavailable
    received: tuple
    origin: tuple
    delta_dev: float | None
    running_cost: float


def trace_records(result: SimulationResult, lane: int = 0) -> list[TraceRecord]:
    out = []
    K = result.u.shape[1]
    for k in range(K):
        dev = result.delta_dev[lane, k]
        out.append(
            TraceRecord(
                step=k,
                x_true=tuple(float(v) for v in result.x_true[lane, k]),
                u=tuple(float(v) for v in result.u[lane, k]),
                estimate=tuple(float(v) for v in result.estimate[lane, k]) if result.available[lane, k] else None,
                received=tuple(bool(v) for v in result.received[lane, k]),
                origin=tuple(int(v) for v in result.origin[lane, k]),
                delta_dev=None if math.isnan(dev) else float(dev),
                running_cost=float(result.running_cost[lane, k]),
            )
        )
    return out


def header(n: int, m: int, M: int) -> list[str]:
    return (
        ["schema", "step"]
        + [f"x_{j}" for j in range(n)]
        + [f"u_{j}" for j in range(m)]
        + ["estimate_available"]
        + [f"est_{j}" for j in range(n)]
        + [f"received_{i}" for i in range(M)]
        + [f"origin_{i}" for i in range(M)]
        + ["delta_dev", "running_cost"]
    )


def _f(v: float) -> str:
    return repr(float(v))


def trace_csv(records: list[TraceRecord]) -> str:
    r0 = records[0]
    n, m, M = len(r0.x_true), len(r0.u), len(r0.received)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header(n, m, M))
    for r in records:
        est = [_f(v) for v in r.estimate] if r.estimate is not None else [""] * n
        w.writerow(
            [TRACE_SCHEMA, r.step]
            + [_f(v) for v in r.x_true]
            + [_f(v) for v in r.u]
            + [int(r.estimate is not None)]
            + est
            + [int(v) for v in r.received]
            + list(r.origin)
            + ["" if r.delta_dev is None else _f(r.delta_dev), _f(r.running_cost)]
        )
    return buf.getvalue()


def read_trace_csv(text: str) -> list[TraceRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    head, body = rows[0], rows[1:]
    n = sum(h.startswith("x_") for h in head)
    m = sum(h.startswith("u_") for h in head)
    M = sum(h.startswith("received_") for h in head)
    out = []
    for row in body:
        if row[0] != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {row[0]!r}")
        i = 2
        x = tuple(float(v) for v in row[i : i + n]); i += n
        u = tuple(float(v) for v in row[i : i + m]); i += m
        avail = row[i] == "1"; i += 1
        est = tuple(float(v) for v in row[i : i + n]) if avail else None; i += n
        rec = tuple(v == "1" for v in row[i : i + M]); i += M
        org = tuple(int(v) for v in row[i : i + M]); i += M
        dev = None if row[i] == "" else float(row[i])
        out.append(TraceRecord(int(row[1]), x, u, est, rec, org, dev, float(row[i + 1])))
    return out


def jsonable(value):
    """Convert numpy values for ``json``; non-finite floats become None."""
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value
