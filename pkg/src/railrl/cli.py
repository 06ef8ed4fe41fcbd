"""Command-line entry points.

Subcommands: generate (scenario files), eval (staged greedy evaluation),
bench-obs (fast vs naive observation builder), replay (verify and render
recorded episodes), and train (curriculum phase driver).  Exit codes: 0 on
success, 1 for domain errors, 2 for I/O and format errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass

import numpy as np

from .env import RailEnv
from .errors import DomainError, FormatError
from .grid import Direction, has_transition
from .mapgen import MalfunctionParams, MapConfig, generate_scenario
from .obs import DEFAULT_MAX_DEPTH, DEFAULT_MAX_NODES, ObsBuilder
from .replay import Replay, verify_replay
from .scenario import Scenario
from .trainer import PhaseConfig, run_phase, evaluate


@dataclass(frozen=True)
class StageSpec:
    name: str
    n_agents: int
    height: int
    width: int
    n_cities: int


# The challenge's 15 evaluation stages (agent count, rows x cols, cities).
STAGES = [
    StageSpec("Test_00", 7, 30, 30, 2),
    StageSpec("Test_01", 10, 30, 30, 2),
    StageSpec("Test_02", 20, 30, 30, 3),
    StageSpec("Test_03", 50, 30, 35, 3),
    StageSpec("Test_04", 80, 35, 30, 5),
    StageSpec("Test_05", 80, 45, 35, 7),
    StageSpec("Test_06", 80, 40, 60, 9),
    StageSpec("Test_07", 80, 60, 40, 13),
    StageSpec("Test_08", 80, 60, 60, 17),
    StageSpec("Test_09", 100, 80, 120, 21),
    StageSpec("Test_10", 100, 100, 80, 25),
    StageSpec("Test_11", 200, 100, 100, 29),
    StageSpec("Test_12", 200, 150, 150, 33),
    StageSpec("Test_13", 400, 150, 150, 37),
    StageSpec("Test_14", 425, 158, 158, 41),
]

ARRIVAL_GATE = 0.25  # qualification bar: a quarter of the trains must arrive


def cmd_generate(args) -> int:
    config = MapConfig(
        width=args.width,
        height=args.height,
        n_cities=args.cities,
        n_trains=args.trains,
        seed=args.seed,
        malfunction=MalfunctionParams(
            rate=args.malfunction_rate,
            min_duration=args.malfunction_min,
            max_duration=args.malfunction_max,
        ),
    )
    scenario = generate_scenario(config)
    scenario.save(args.out)
    print(
        f"wrote {args.out}: {scenario.grid.width}x{scenario.grid.height} grid, "
        f"{len(scenario.grid.cities)} cities, {scenario.n_trains} trains, "
        f"t_max {scenario.t_max}, digest {scenario.digest()[:12]}"
    )
    return 0


def _stage_phase(stage: StageSpec, args) -> PhaseConfig:
    return PhaseConfig(
        name=stage.name,
        n_agents=stage.n_agents,
        width=stage.width,
        height=stage.height,
        n_cities=stage.n_cities,
        obs_depth=args.depth,
        obs_max_nodes=args.max_nodes,
    )


def cmd_eval(args) -> int:
    from .nn import policy_from_checkpoint

    model = policy_from_checkpoint(args.checkpoint)
    if args.stages == "all":
        stages = STAGES
    else:
        by_name = {s.name: s for s in STAGES}
        try:
            stages = [by_name[name] for name in args.stages.split(",")]
        except KeyError as exc:
            raise DomainError(f"unknown stage {exc.args[0]}") from exc
    rows = []
    header = (
        f"{'stage':<9} {'agents':>6} {'map':>9} {'cities':>6} "
        f"{'arrival%':>15} {'reward':>15} {'time/s':>8}  gate"
    )
    print(header)
    for stage in stages:
        t0 = time.perf_counter()
        m = evaluate(model, _stage_phase(stage, args), args.episodes, args.seed)
        wall = time.perf_counter() - t0
        arrival = 100 * m["arrival"]
        row = {
            "stage": stage.name,
            "n_agents": stage.n_agents,
            "map": f"{stage.height}x{stage.width}",
            "n_cities": stage.n_cities,
            "arrival_mean": round(arrival, 3),
            "arrival_std": round(100 * m["arrival_std"], 3),
            "reward_mean": round(m["env_reward_mean"], 4),
            "reward_std": round(m["env_reward_std"], 4),
            "wall_time_s": round(wall, 3),
            "gate": "PASS" if m["arrival"] >= ARRIVAL_GATE else "FAIL",
        }
        rows.append(row)
        print(
            f"{row['stage']:<9} {row['n_agents']:>6} {row['map']:>9} "
            f"{row['n_cities']:>6} "
            f"{row['arrival_mean']:>7.1f}±{row['arrival_std']:<6.1f} "
            f"{row['reward_mean']:>7.3f}±{row['reward_std']:<6.3f} "
            f"{row['wall_time_s']:>8.1f}  {row['gate']}"
        )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.out}")
    return 0


def cmd_bench_obs(args) -> int:
    from .naive_obs import naive_build_all

    scenario = Scenario.load(args.scenario)
    env = RailEnv(scenario)
    env.reset(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    for _ in range(10):
        if env.done:
            break
        env.step(list(rng.integers(0, 5, env.n_trains)))

    fast_out = ObsBuilder(env, args.depth, args.max_nodes).build_all()
    naive_out = naive_build_all(env, args.depth, args.max_nodes)
    if not np.array_equal(fast_out[0], naive_out[0]) or any(
        not (a == b) for a, b in zip(fast_out[1], naive_out[1])
    ):
        raise DomainError("fast and naive observation outputs differ")
    print("equivalence: fast output == naive output")

    def clock(fn):
        times = []
        for _ in range(args.iterations):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    fast = clock(lambda: ObsBuilder(env, args.depth, args.max_nodes).build_all())
    naive = clock(lambda: naive_build_all(env, args.depth, args.max_nodes))
    print(
        f"agents {env.n_trains}, depth {args.depth}, max nodes {args.max_nodes}, "
        f"{args.iterations} iterations"
    )
    print(f"fast : {1e3 * fast:8.2f} ms/step")
    print(f"naive: {1e3 * naive:8.2f} ms/step")
    print(f"speedup: {naive / fast:.1f}x")
    return 0


_GLYPH_CACHE: dict = {}


def _cell_glyph(cell: int) -> str:
    got = _GLYPH_CACHE.get(cell)
    if got is None:
        if cell == 0:
            got = " "
        else:
            outs = {
                out
                for d in Direction
                for out in Direction
                if has_transition(cell, d, out)
            }
            vertical = outs <= {Direction.NORTH, Direction.SOUTH}
            horizontal = outs <= {Direction.EAST, Direction.WEST}
            got = "|" if vertical else "-" if horizontal else "+"
        _GLYPH_CACHE[cell] = got
    return got


def _render(env: RailEnv) -> str:
    grid = env.grid
    canvas = [
        [_cell_glyph(int(grid.cells[r, c])) for c in range(grid.width)]
        for r in range(grid.height)
    ]
    for tr in env.trains:
        if tr.on_map:
            r, c = tr.position
            canvas[r][c] = str(tr.spec.id % 10)
    return "\n".join("".join(row) for row in canvas)


def cmd_replay(args) -> int:
    scenario = Scenario.load(args.scenario)
    replay = Replay.load(args.replay)
    verify_replay(replay, scenario)
    env = RailEnv(scenario)
    env.reset(seed=replay.seed)
    for tick, acts in enumerate(replay.actions):
        info = env.step(acts)
        if args.render:
            print(f"--- tick {info.t} ---")
            print(_render(env))
    arrived = sum(tr.arrival_time is not None for tr in env.trains)
    departed = sum(tr.departed for tr in env.trains)
    print(
        f"verified {len(replay.actions)} ticks: {arrived}/{env.n_trains} arrived, "
        f"{departed} departed, final reward {env.normalized_reward():.6f}"
    )
    return 0


def cmd_train(args) -> int:
    phase = PhaseConfig.load(args.phase_config)
    if args.seed is not None:
        phase.seed = args.seed
    path = run_phase(phase, args.out, log=print)
    print(f"checkpoint: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railrl", description="rail network multi-agent RL toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a scenario file")
    p.add_argument("--width", type=int, default=30)
    p.add_argument("--height", type=int, default=30)
    p.add_argument("--cities", type=int, default=2)
    p.add_argument("--trains", type=int, default=7)
    p.add_argument("--malfunction-rate", type=float, default=0.0)
    p.add_argument("--malfunction-min", type=int, default=20)
    p.add_argument("--malfunction-max", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint over test stages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stages", default="Test_00", help="comma list or 'all'")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--depth", type=int, default=DEFAULT_MAX_DEPTH)
    p.add_argument("--max-nodes", type=int, default=DEFAULT_MAX_NODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the report as CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-obs", help="time fast vs naive observation builds")
    p.add_argument("--scenario", required=True)
    p.add_argument("--depth", type=int, default=DEFAULT_MAX_DEPTH)
    p.add_argument("--max-nodes", type=int, default=DEFAULT_MAX_NODES)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_obs)

    p = sub.add_parser("replay", help="verify and optionally render a replay")
    p.add_argument("replay", help="replay file path")
    p.add_argument("--scenario", required=True)
    p.add_argument("--render", action="store_true")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("train", help="run one curriculum phase")
    p.add_argument("--phase-config", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
