from __future__ import annotations

import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.cfg"

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _isolated_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("DMSSD_RUN_DIR", str(tmp_path / "runs"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The desk configuration trained for seeds 0, 1, 2 (map seed = training seed)."""
    from dmssd.config import load_config
    from dmssd.ppo import train

    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for seed in (0, 1, 2):
        cfg = load_config(DESK_CONFIG, extra={"map_seed": seed, "seed": seed})
        runs[seed] = (cfg, train(cfg.env, cfg.ppo, seed=seed, out_dir=root / f"seed{seed}"))
    return runs
