"""Command-line entry point: ``dmssd <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 acceptance threshold not met. Artifacts go to a fresh run directory
``<root>/<timestamp>-seed<seed>-<verb>`` where ``<root>`` is ``$DMSSD_RUN_DIR``
or ``./runs``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, DmssdError
from .gridmap import generate_map, load_map, save_map

log = logging.getLogger("dmssd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ACCEPTANCE = 4
RUN_DIR_ENV = "DMSSD_RUN_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")


def _cell(text: str) -> tuple[int, int]:
    try:
        x, y = text.split(",")
        return (int(x), int(y))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y, got {text!r}")


def _peer(text: str) -> tuple[int, tuple[str, int]]:
    rid, _, addr = text.partition("=")
    try:
        return int(rid), _addr(addr)
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"expected id=host:port, got {text!r}")


def _kill(text: str) -> tuple[int, int]:
    rid, _, tick = text.partition("@")
    try:
        return int(rid), int(tick)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected id@tick, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    common.add_argument("--run-dir", help="explicit output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--model", required=True, help="model file")

    p = _Parser(prog="dmssd", description="Learned multi-robot rendezvous on grid maps.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-map", parents=[common], help="generate a random map file")
    s.add_argument("--x", type=int, required=True)
    s.add_argument("--y", type=int, required=True)
    s.add_argument("--static", type=float, default=0.05)
    s.add_argument("--dynamic", type=float, default=0.02)
    s.add_argument("--out", help="map path (default: <run dir>/map.txt)")

    s = sub.add_parser("train", parents=[common], help="train a policy")

    s = sub.add_parser("eval", parents=[common, model], help="success rate and steps of a model")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")

    s = sub.add_parser("gap", parents=[common, model], help="optimality gap against the oracle")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--max-median", type=float, default=5.0)

    s = sub.add_parser("bench", parents=[common, model], help="per-action inference latency")
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--sizes", type=int, nargs="+", default=[20, 70])

    s = sub.add_parser("baseline", parents=[common], help="reward-setting ablation")
    s.add_argument("--variants", nargs="+", default=None)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    s = sub.add_parser("compat", parents=[common, model], help="success with fewer robots than n_p")
    s.add_argument("--k", type=int, nargs="+", default=None)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--threshold", type=float, default=0.9)

    s = sub.add_parser("serve-model", parents=[common, model], help="serve a model over TCP")
    s.add_argument("--bind", type=_addr, default=("127.0.0.1", 7070))

    s = sub.add_parser("robot", parents=[common], help="run one swarm robot")
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--map", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--server", type=_addr)
    s.add_argument("--bind", type=_addr, required=True)
    s.add_argument("--peer", type=_peer, action="append", default=[])
    s.add_argument("--start", type=_cell, required=True)
    s.add_argument("--tick-period", type=float, default=0.1)
    s.add_argument("--greedy", action="store_true")

    s = sub.add_parser("orchestrate", parents=[common, model], help="local swarm runs")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--map", help="map file (default: generated from the config)")
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--tick-period", type=float, default=0.1)
    s.add_argument("--kill", type=_kill, action="append", default=[], metavar="ID@TICK")
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--min-success", type=float, default=0.95)

    s = sub.add_parser("plot-data", parents=[common], help="curve CSV from metrics files")
    s.add_argument("--curve", action="append", required=True, metavar="LABEL=PATH[,PATH...]")
    return p


def make_run_dir(verb: str, seed: int, explicit: Optional[str] = None) -> Path:
    if explicit:
        path = Path(explicit)
        path.mkdir(parents=True, exist_ok=True)
        return path
    root = Path(os.environ.get(RUN_DIR_ENV) or "runs")
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}-{verb}"
    path = root / base
    n = 1
    while path.exists():
        n += 1
        path = root / f"{base}-{n}"
    path.mkdir(parents=True)
    return path


def _write_rows(path: Path, rows: Sequence[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def _load_net(path):
    from .neural import load_model

    if not Path(path).exists():
        raise ConfigError(f"model file not found: {path}")
    return load_model(path)


def _check_n_p(net, cfg: RunConfig):
    if net.n_p != cfg.env.n_p:
        raise ConfigError(f"model was built for n_p={net.n_p} but config has n_p={cfg.env.n_p}; "
                          f"pass --set n_p={net.n_p}")


def cmd_gen_map(args, cfg: RunConfig, run: Path) -> int:
    grid = generate_map(args.x, args.y, args.static, args.dynamic, cfg.seed)
    out = Path(args.out) if args.out else run / "map.txt"
    save_map(grid, out)
    print(out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, run: Path) -> int:
    from .ppo import train

    res = train(cfg.env, cfg.ppo, seed=cfg.seed, out_dir=run, variant=cfg.reward_variant)
    print(run / "model.bin")
    return EXIT_OK if res.metrics or cfg.ppo.iterations == 0 else EXIT_RUNTIME


def cmd_eval(args, cfg: RunConfig, run: Path) -> int:
    from .env import RendezvousEnv
    from .evalsuite import run_episode

    net = _load_net(args.model)
    _check_n_p(net, cfg)
    env = RendezvousEnv(cfg.env, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 3])
    rows = []
    for i in range(args.episodes):
        e = run_episode(env, net, rng, greedy=args.greedy)
        rows.append({"episode": i, "n_robots": len(e.initial_positions), "steps": e.length,
                     "achieved": int(e.achieved), "reward_sum": repr(e.reward_sum),
                     "optimal_steps": e.optimal_steps})
    _write_rows(run / "eval.csv", rows)
    won = [r for r in rows if r["achieved"]]
    mst = np.mean([r["steps"] for r in won]) if won else float("nan")
    print(f"success {len(won)}/{len(rows)}  mst {mst:.2f}")
    return EXIT_OK


def cmd_gap(args, cfg: RunConfig, run: Path) -> int:
    from .evalsuite import optimality_gap

    net = _load_net(args.model)
    _check_n_p(net, cfg)
    rep = optimality_gap(net, cfg.env, trials=args.trials, seed=cfg.seed, greedy=args.greedy)
    rep.write_csv(run / "gap.csv")
    summary = rep.summary()
    _write_rows(run / "gap_summary.csv", [summary])
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    ok = rep.median <= args.max_median and summary["lower_bound_holds"]
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_bench(args, cfg: RunConfig, run: Path) -> int:
    from .evalsuite import bench_inference

    net = _load_net(args.model)
    rows = []
    for size in args.sizes:
        st = bench_inference(net, args.samples, size, size, seed=cfg.seed,
                             coordinate_scale=cfg.env.coordinate_scale)
        rows.append({"size": size, **st.as_row()})
        print(f"{size}x{size}: mean {st.mean_us:.1f} us  p99 {st.p99_us:.1f} us")
    _write_rows(run / "bench.csv", rows)
    means = [r["mean_us"] for r in rows]
    ratio = max(means) / min(means)
    ok = all(r["p99_under_30ms"] for r in rows) and ratio <= 2.0
    print(f"mean ratio across sizes {ratio:.3f}")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_baseline(args, cfg: RunConfig, run: Path) -> int:
    from .evalsuite import plot_data, reward_ablation
    from .rewards import VARIANTS

    variants = args.variants or list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    res = reward_ablation(cfg.env, cfg.ppo, args.seeds, variants, out_dir=run)
    ranking = res.ranking()
    _write_rows(run / "ablation.csv", [{"variant": v, "final_mst": repr(m)} for v, m in ranking])
    curves = {v: [m for (vv, _), m in res.runs.items() if vv == v] for v in variants}
    plot_data(curves, run / "curves.csv")
    for v, m in ranking:
        print(f"{v:14s} final MST {m:.2f}")
    if "ours" in variants and len(ranking) > 1:
        best, second = ranking[0], ranking[1]
        if best[0] != "ours" or best[1] >= second[1]:
            return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_compat(args, cfg: RunConfig, run: Path) -> int:
    from .evalsuite import padding_compat

    net = _load_net(args.model)
    _check_n_p(net, cfg)
    ks = args.k or list(range(2, cfg.env.n_p + 1))
    bad = [k for k in ks if not 2 <= k <= cfg.env.n_p]
    if bad:
        raise ConfigError(f"--k values {bad} outside [2, {cfg.env.n_p}]")
    rows = []
    for k in ks:
        rate = padding_compat(net, cfg.env, k, episodes=args.episodes, seed=cfg.seed,
                              greedy=args.greedy)
        rows.append({"k": k, "n_p": cfg.env.n_p, "success_rate": rate})
        print(f"k={k}: success {rate:.2%}")
    _write_rows(run / "compat.csv", rows)
    return EXIT_OK if all(r["success_rate"] >= args.threshold for r in rows) else EXIT_ACCEPTANCE


def cmd_serve_model(args, cfg: RunConfig, run: Optional[Path]) -> int:
    from .swarm.server import ModelServer

    _load_net(args.model)
    server = ModelServer(args.model, *args.bind)
    print(f"serving {args.model} on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_robot(args, cfg: RunConfig, run: Path) -> int:
    from .swarm.robot import RobotConfig, robot_loop

    grid = load_map(args.map)
    net = _load_net(args.model) if args.model else None
    rc = RobotConfig(robot_id=args.id, start=args.start, peers=dict(args.peer),
                     tick_period=args.tick_period, max_ticks=cfg.env.episode_budget, seed=cfg.seed,
                     coordinate_scale=cfg.env.coordinate_scale, greedy=args.greedy,
                     model_server=args.server)
    rep = robot_loop(net, grid, rc, bind=args.bind, trace_path=run / f"trace_{args.id}.csv",
                     report_path=run / f"report_{args.id}.json")
    print(rep.to_json())
    return EXIT_OK if rep.success else EXIT_ACCEPTANCE


def cmd_orchestrate(args, cfg: RunConfig, run: Path) -> int:
    from .swarm.orchestrate import orchestrate

    net = _load_net(args.model)
    grid = load_map(args.map) if args.map else cfg.env.build_map()
    save_map(grid, run / "map.txt")
    rows = []
    for i in range(args.runs):
        seed = cfg.seed + i
        rep = orchestrate(args.n, grid, args.model, seed=seed, run_dir=run / f"run{i:03d}",
                          tick_period=args.tick_period, max_ticks=cfg.env.episode_budget,
                          coordinate_scale=cfg.env.coordinate_scale, greedy=args.greedy,
                          fail_at=dict(args.kill))
        cell = rep.meeting_cell or ("NA", "NA")
        steps = [r.steps for r in rep.reports.values() if r.steps is not None]
        rows.append({"run": i, "seed": seed, "success": int(rep.success), "meeting_x": cell[0],
                     "meeting_y": cell[1], "steps": max(steps) if steps else "NA",
                     "survivors": len(rep.reports), "failures": "; ".join(rep.failures)})
        if not rep.success:
            log.warning("run %d failed: %s", i, "; ".join(rep.failures))
    _write_rows(run / "orchestrate.csv", rows)
    rate = sum(r["success"] for r in rows) / len(rows)
    print(f"rendezvous {sum(r['success'] for r in rows)}/{len(rows)} (model n_p={net.n_p})")
    return EXIT_OK if rate >= args.min_success else EXIT_ACCEPTANCE


def cmd_plot_data(args, cfg: RunConfig, run: Path) -> int:
    from .evalsuite import plot_data

    curves = {}
    for item in args.curve:
        label, _, paths = item.partition("=")
        if not label or not paths:
            raise ConfigError(f"--curve expects LABEL=PATH[,PATH...], got {item!r}")
        files = paths.split(",")
        for f in files:
            if not Path(f).exists():
                raise ConfigError(f"metrics file not found: {f}")
        curves[label] = files
    out = plot_data(curves, run / "curves.csv")
    print(out)
    return EXIT_OK


COMMANDS = {
    "gen-map": cmd_gen_map,
    "train": cmd_train,
    "eval": cmd_eval,
    "gap": cmd_gap,
    "bench": cmd_bench,
    "baseline": cmd_baseline,
    "compat": cmd_compat,
    "serve-model": cmd_serve_model,
    "robot": cmd_robot,
    "orchestrate": cmd_orchestrate,
    "plot-data": cmd_plot_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.overrides, {"seed": args.seed})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    run = None
    try:
        if args.verb != "serve-model":
            run = make_run_dir(args.verb, cfg.seed, args.run_dir)
            cfg.save(run / "config.cfg")
        return COMMANDS[args.verb](args, cfg, run)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DmssdError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
