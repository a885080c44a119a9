"""Local test harness: a model server thread plus one process per robot."""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError
from ..gridmap import Coord, GridMap
from ..neural import load_model
from .robot import TRACE_COLUMNS, RobotConfig, RobotReport, read_trace, robot_loop
from .server import ModelServer

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    success: bool
    meeting_cell: Optional[Coord]
    reports: dict[int, RobotReport]
    exit_codes: dict[int, Optional[int]]
    trace_path: Optional[Path]
    starts: list[Coord]
    failures: list[str] = field(default_factory=list)

    @property
    def survivors(self) -> list[int]:
        return sorted(self.reports)


def sample_starts(grid: GridMap, n: int, rng: np.random.Generator) -> list[Coord]:
    """Distinct cells of the largest component, avoiding dynamic obstacles."""
    comp = grid.largest_component().copy()
    for x, y in grid.dynamic:
        comp[x, y] = False
    cells = np.argwhere(comp)
    if len(cells) < n:
        raise ValueError("map has too few free cells")
    idx = rng.choice(len(cells), size=n, replace=False)
    return [(int(cells[i][0]), int(cells[i][1])) for i in idx]


def _child(grid, cfg: RobotConfig, sock, trace_path, report_path, ready):
    logging.getLogger().handlers.clear()
    robot_loop(None, grid, cfg, sock=sock, trace_path=trace_path, report_path=report_path,
               ready=ready)


def orchestrate(n: int, grid: GridMap, model_path, seed: int = 0, run_dir=None,
                starts: Optional[Sequence[Coord]] = None, tick_period: float = 0.1,
                max_ticks: Optional[int] = None, coordinate_scale: float = 100.0,
                greedy: bool = False, fail_at: Optional[dict] = None,
                stop_server_after_start: bool = False, stale_timeout: float = 1.0,
                dead_after: int = 3, join_timeout: Optional[float] = None) -> RunReport:
    """Spawn the server and ``n`` robots, wait for them and merge their traces.

    Success means every surviving robot reported rendezvous at one cell.
    """
    n_p = load_model(model_path).n_p
    if not 1 <= n <= n_p:
        raise ConfigError(f"robot count {n} must lie in [1, {n_p}] for this model")
    rng = np.random.default_rng([seed, 7])
    starts = list(starts) if starts is not None else sample_starts(grid, n, rng)
    if len(starts) != n:
        raise ValueError(f"need {n} start cells, got {len(starts)}")
    if max_ticks is None:
        max_ticks = 8 * (grid.width + grid.height)
    fail_at = fail_at or {}
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        work = run_dir
    else:
        import tempfile
        tmp = tempfile.TemporaryDirectory(prefix="dmssd-swarm-")
        work = Path(tmp.name)

    socks = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    addrs = {i: s.getsockname() for i, s in enumerate(socks)}

    ctx = mp.get_context("fork")
    server = ModelServer(model_path).start()
    procs, readies = {}, {}
    try:
        for i in range(n):
            cfg = RobotConfig(
                robot_id=i, start=starts[i], peers={j: a for j, a in addrs.items() if j != i},
                tick_period=tick_period, max_ticks=max_ticks, seed=seed,
                coordinate_scale=coordinate_scale, greedy=greedy, stale_timeout=stale_timeout,
                dead_after=dead_after, fail_at_tick=fail_at.get(i), model_server=server.address)
            readies[i] = ctx.Event()
            p = ctx.Process(target=_child, name=f"robot-{i}",
                            args=(grid, cfg, socks[i], work / f"trace_{i}.csv",
                                  work / f"report_{i}.json", readies[i]))
            p.start()
            procs[i] = p
        for s in socks:
            s.close()
        if stop_server_after_start:
            for e in readies.values():
                e.wait(timeout=30)
            server.stop()
            server = None
        budget = join_timeout
        if budget is None:
            budget = 30.0 + max_ticks * (tick_period + 0.01) + 10 * stale_timeout * dead_after
        deadline = time.monotonic() + budget
        for p in procs.values():
            p.join(timeout=max(0.0, deadline - time.monotonic()))
        failures = []
        for i, p in procs.items():
            if p.is_alive():
                p.kill()
                p.join()
                failures.append(f"robot {i} did not finish in time")
    finally:
        if server is not None:
            server.stop()

    reports = {}
    exit_codes = {i: p.exitcode for i, p in procs.items()}
    for i in range(n):
        path = work / f"report_{i}.json"
        if path.exists():
            reports[i] = RobotReport.from_json(path.read_text())
        elif i not in fail_at:
            failures.append(f"robot {i} exited with code {exit_codes[i]} and no report")

    rows = []
    for i in range(n):
        path = work / f"trace_{i}.csv"
        if path.exists():
            rows.extend(read_trace(path))
    rows.sort(key=lambda r: (int(r["tick"]), int(r["robot_id"])))
    trace_path = None
    if run_dir is not None:
        trace_path = run_dir / "trace.csv"
        with trace_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    else:
        tmp.cleanup()

    for i, r in sorted(reports.items()):
        if not r.success:
            failures.append(f"robot {i} did not observe rendezvous within {r.ticks} ticks")
    cells = {r.final_cell for r in reports.values()}
    if len(cells) > 1:
        failures.append(f"robots reported different cells: {sorted(cells)}")
    if not reports:
        failures.append("no robot reported")
    meeting = next(iter(cells)) if len(cells) == 1 and not failures else None
    return RunReport(not failures, meeting, reports, exit_codes, trace_path, starts, failures)
