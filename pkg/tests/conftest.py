from __future__ import annotations

import sys
from pathlib import Path

import pytest

from fairthresh.data import COMPAS, GERMAN, load_table

ROOT = Path(__file__).resolve().parents[1]
DATA_RAW = ROOT / "data" / "raw"
PACKS = ROOT / "data" / "packs"

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def german_table():
    return load_table(DATA_RAW / "german.data", GERMAN)


@pytest.fixture(scope="session")
def compas_table():
    return load_table(DATA_RAW / "compas-scores-two-years.csv", COMPAS)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
