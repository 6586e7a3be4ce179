"""Rewrite the golden traces from their configs: python3 tests/golden/regenerate.py"""

from pathlib import Path

from hkfncs.config import load_scenario
from hkfncs.ncs import run_closed_loop
from hkfncs.records import trace_csv, trace_records

HERE = Path(__file__).parent
NAMES = ("lqg_perfect", "scripted", "reference")


def render(name: str) -> str:
    return trace_csv(trace_records(run_closed_loop(load_scenario(HERE / f"{name}.json"), [0])))


if __name__ == "__main__":
    for name in NAMES:
        (HERE / f"{name}.csv").write_text(render(name))
        print("wrote", name)
