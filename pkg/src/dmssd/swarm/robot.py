"""One robot of the deployed swarm.

Each robot keeps its own copy of the policy, broadcasts its cell once per
tick over UDP and decides its next move locally from the freshest peer
states it holds. A receive thread is the single writer of the peer table;
the decide/act loop only reads it.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..env import STAY, EnvState, _apply, _mask_at, build_observation, compute_target
from ..gridmap import Coord, GridMap
from ..neural import PolicyValueNet
from .protocol import ProtocolError, StateMessage, decode, encode
from .server import ModelClient

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("tick", "robot_id", "x", "y", "action", "target_x", "target_y", "known_peers",
                 "degraded")
UNANIMOUS_TICKS = 2
FAIL_EXIT_CODE = 17


@dataclass
class RobotConfig:
    robot_id: int
    start: Coord
    peers: dict  # robot id -> (host, port), excluding self
    tick_period: float = 0.1
    max_ticks: int = 240
    seed: int = 0
    coordinate_scale: float = 100.0
    greedy: bool = False
    stale_timeout: float = 1.0   # wait for a tick's peer states before going stale
    startup_timeout: float = 10.0
    dead_after: int = 3          # consecutive stale ticks before a peer is dropped
    resend_interval: float = 0.02
    fail_at_tick: Optional[int] = None
    model_server: Optional[tuple] = None
    model_poll_ticks: int = 0


@dataclass
class RobotReport:
    robot_id: int
    success: bool
    final_cell: Coord
    ticks: int
    steps: Optional[int]
    degraded: bool
    dropped_peers: list = field(default_factory=list)
    model_version: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["final_cell"] = list(self.final_cell)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RobotReport":
        d = json.loads(text)
        d["final_cell"] = tuple(d["final_cell"])
        return cls(**d)


class PeerTable:
    """Per-peer tick history with last-writer-wins and stale-tick dropping."""

    def __init__(self, peer_ids, width: int, height: int, keep: int = 4):
        self.cond = threading.Condition()
        self.history: dict[int, dict[int, Coord]] = {p: {} for p in peer_ids}
        self.last_tick: dict[int, int] = {p: -1 for p in peer_ids}
        self.width, self.height = width, height
        self.keep = keep
        self.dropped_messages = 0

    def offer(self, msg: StateMessage) -> bool:
        with self.cond:
            rid = msg.robot_id
            if rid not in self.history or msg.tick <= self.last_tick[rid]:
                self.dropped_messages += 1
                return False
            if not (msg.x < self.width and msg.y < self.height):
                self.dropped_messages += 1
                return False
            self.last_tick[rid] = msg.tick
            hist = self.history[rid]
            hist[msg.tick] = msg.cell
            for old in [t for t in hist if t < msg.tick - self.keep]:
                del hist[old]
            self.cond.notify_all()
            return True

    def has_tick(self, rid: int, tick: int) -> bool:
        return tick in self.history[rid] or self.last_tick[rid] > tick

    def cell_at(self, rid: int, tick: int) -> tuple[Optional[Coord], bool]:
        """State for ``tick``, else the newest older one. Second value: fresh."""
        hist = self.history[rid]
        if tick in hist:
            return hist[tick], True
        older = [t for t in hist if t < tick]
        if older:
            return hist[max(older)], False
        if hist:
            return hist[min(hist)], False
        return None, False


def _receiver(sock: socket.socket, table: PeerTable, stop: threading.Event):
    sock.settimeout(0.05)
    while not stop.is_set():
        try:
            data, _ = sock.recvfrom(1024)
        except socket.timeout:
            continue
        except OSError:
            return
        try:
            msg = decode(data)
        except ProtocolError:
            table.dropped_messages += 1
            continue
        if isinstance(msg, StateMessage):
            table.offer(msg)


def robot_loop(net: Optional[PolicyValueNet], grid: GridMap, config: RobotConfig,
               sock: Optional[socket.socket] = None, bind: Optional[tuple] = None,
               trace_path=None, report_path=None, ready=None) -> RobotReport:
    """Run until unanimity holds for two consecutive ticks or the budget ends.

    Dynamic obstacles in the map file are treated as free cells: robots share
    no simulation of their motion.
    """
    cfg = config
    me = cfg.robot_id
    client = None
    if cfg.model_server is not None:
        client = ModelClient(tuple(cfg.model_server))
        client.fetch()
        net = client.net
    if net is None:
        raise ValueError("robot needs a model or a model server")
    if sock is None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(bind or ("127.0.0.1", 0))
    if ready is not None:
        ready.set()

    world = grid.with_dynamic(())
    peers = {int(k): tuple(v) for k, v in cfg.peers.items() if int(k) != me}
    table = PeerTable(peers, grid.width, grid.height)
    stop = threading.Event()
    rx = threading.Thread(target=_receiver, args=(sock, table, stop), daemon=True)
    rx.start()

    rng = np.random.default_rng([cfg.seed, me])
    target_rng = np.random.default_rng([cfg.seed, me, 1])
    live = set(peers)
    misses = {p: 0 for p in peers}
    pos = tuple(cfg.start)
    streak = 0
    steps: Optional[int] = None
    degraded = False
    dropped: list[int] = []
    rows: list[dict] = []
    success = False
    tick = 0
    try:
        if not peers:
            success, steps = True, 0
        while not success and tick < cfg.max_ticks:
            t0 = time.monotonic()
            if cfg.fail_at_tick is not None and tick >= cfg.fail_at_tick:
                os._exit(FAIL_EXIT_CODE)
            if client is not None and cfg.model_poll_ticks and tick and tick % cfg.model_poll_ticks == 0:
                try:
                    if client.fetch():
                        net = client.net
                except ConnectionError:
                    pass

            wire = encode(StateMessage(me, tick, pos[0], pos[1]))
            timeout = cfg.startup_timeout if tick == 0 else cfg.stale_timeout
            deadline = time.monotonic() + timeout
            with table.cond:
                while True:
                    for p in live:
                        sock.sendto(wire, peers[p])
                    waiting = [p for p in live if not table.has_tick(p, tick)]
                    left = deadline - time.monotonic()
                    if not waiting or left <= 0:
                        break
                    table.cond.wait(min(cfg.resend_interval, left))
                known: dict[int, Coord] = {me: pos}
                stale_now = False
                for p in sorted(live):
                    cell, fresh = table.cell_at(p, tick)
                    if fresh:
                        misses[p] = 0
                    else:
                        misses[p] += 1
                        stale_now = True
                    if cell is not None:
                        known[p] = cell
            for p in sorted(live):
                if misses[p] >= cfg.dead_after:
                    live.discard(p)
                    known.pop(p, None)
                    dropped.append(p)
                    log.info("robot %d drops silent peer %d at tick %d", me, p, tick)
            degraded = degraded or stale_now

            ids = sorted(known)
            positions = [known[i] for i in ids]
            target = compute_target(positions, world, target_rng)
            if len(known) <= len(live):
                # a live peer has never been heard from: hold position, no unanimity
                streak = 0
                steps = None
                action = STAY
            elif len(set(positions)) == 1:
                streak += 1
                if steps is None:
                    steps = tick
                action = STAY
            else:
                streak = 0
                steps = None
                state = EnvState(grid=world, positions=positions, target=target)
                idx = ids.index(me)
                obs = build_observation(state, world, idx, net.n_p, cfg.coordinate_scale)
                mask = _mask_at(world, pos, set())
                action = int(net.act(obs[None], mask[None], rng, greedy=cfg.greedy)[0])
            rows.append({"tick": tick, "robot_id": me, "x": pos[0], "y": pos[1], "action": action,
                         "target_x": target[0], "target_y": target[1],
                         "known_peers": len(known) - 1, "degraded": int(stale_now)})
            if streak >= UNANIMOUS_TICKS:
                success = True
                break
            pos, _ = _apply(world, pos, action, set())
            tick += 1
            rest = cfg.tick_period - (time.monotonic() - t0)
            if rest > 0:
                time.sleep(rest)
    finally:
        stop.set()
        rx.join(timeout=1)
    report = RobotReport(me, success, pos, tick, steps, degraded, dropped,
                         client.version if client else 0)
    if trace_path is not None:
        write_trace(rows, trace_path)
    if report_path is not None:
        Path(report_path).write_text(report.to_json())
    return report


def write_trace(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return path


def read_trace(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
