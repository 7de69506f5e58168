"""Command-line entry point: scene/task generation, episode runs,
benchmark sweeps, trace replay and SVG rendering.

Config precedence is flags > config file > defaults, and the effective
config is echoed into every output for provenance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench as benchmod
from . import render as rendermod
from .decision import BackendUnavailableError, OracleBackend, RemoteBackend
from .episode import EpisodeConfig, load_trace, replay_trace, run_episode, save_trace
from .planner import load_affordance_pgm
from .scenegen import (
    ConfigInfeasibleError,
    SceneGenConfig,
    config_to_dict,
    generate_scene,
    load_config,
)
from .sim import NoiseConfig, load_scene, save_scene

SUMMARY_SCHEMA_VERSION = 1

_EPISODE_FLAGS = [
    ("eps_dis", float), ("len_max", int), ("n_tolerance", int), ("tau_obs", float),
    ("slow_interval", int), ("fast_burst", int), ("max_replans", int), ("seed", int),
    ("sense_range", float), ("structure_range", float), ("n_rays", int),
    ("dilation_radius", float), ("cost_weight", float), ("n_waypoint", int),
    ("n_block", int), ("fine_prefix_len", float),
]


def _add_episode_flags(p: argparse.ArgumentParser):
    for name, typ in _EPISODE_FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    p.add_argument("--step-counting", choices=["primitive", "waypoint"], default=None)
    p.add_argument("--no-corrector", action="store_true")
    p.add_argument("--noise-drop", type=float, default=None)
    p.add_argument("--noise-jitter", type=float, default=None)
    p.add_argument("--noise-mislabel", type=float, default=None)
    p.add_argument("--config", type=Path, default=None, help="episode config JSON")
    p.add_argument("--backend", choices=["oracle", "remote"], default="oracle")
    p.add_argument("--model", default="default-model", help="remote model id")


def _episode_config(args) -> EpisodeConfig:
    cfg = EpisodeConfig()
    if args.config is not None:
        with open(args.config) as f:
            cfg = EpisodeConfig.from_dict(json.load(f))
    for name, _typ in _EPISODE_FLAGS:
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.step_counting is not None:
        cfg.step_counting = args.step_counting
    if args.no_corrector:
        cfg.corrector_enabled = False
    noise = dict(drop_prob=cfg.noise.drop_prob, jitter_sigma=cfg.noise.jitter_sigma,
                 mislabel_prob=cfg.noise.mislabel_prob)
    if args.noise_drop is not None:
        noise["drop_prob"] = args.noise_drop
    if args.noise_jitter is not None:
        noise["jitter_sigma"] = args.noise_jitter
    if args.noise_mislabel is not None:
        noise["mislabel_prob"] = args.noise_mislabel
    cfg.noise = NoiseConfig(**noise)
    return cfg


def _make_backend(name: str, task, cfg: EpisodeConfig, model: str):
    if name == "oracle":
        return OracleBackend(task.subtasks, eps_dis=cfg.eps_dis)
    return RemoteBackend(model=model)


def _load_scenes(scene_dir: Path) -> dict:
    scenes = {}
    for path in sorted(scene_dir.glob("scene-*.json")):
        scene = load_scene(path)
        scenes[scene.id] = scene
    if not scenes:
        raise FileNotFoundError(f"no scene-*.json files in {scene_dir}")
    return scenes


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_scenes(args) -> int:
    cfg = load_config(args.config) if args.config else SceneGenConfig()
    if args.width is not None:
        cfg.width = args.width
    if args.height is not None:
        cfg.height = args.height
    if args.rooms is not None:
        cfg.room_range = (args.rooms[0], args.rooms[1])
    if args.objects_per_room is not None:
        cfg.objects_per_room = (args.objects_per_room[0], args.objects_per_room[1])
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(args.seed + i, cfg)
        save_scene(scene, args.out / f"{scene.id}.json")
    with open(args.out / "scene_gen_config.json", "w") as f:
        json.dump(config_to_dict(cfg), f, sort_keys=True, indent=1)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_gen_tasks(args) -> int:
    scenes = list(_load_scenes(args.scenes).values())
    tasks = benchmod.generate_tasks(scenes, args.count, args.seed, eps_dis=args.eps_dis)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    benchmod.save_tasks(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_run(args) -> int:
    scene = load_scene(args.scene)
    tasks = benchmod.load_tasks(args.tasks)
    if args.task_id:
        tasks = [t for t in tasks if t.task_id == args.task_id]
        if not tasks:
            raise ValueError(f"task {args.task_id!r} not found")
    task = tasks[0]
    if task.scene_id != scene.id:
        raise ValueError(f"task {task.task_id} belongs to scene {task.scene_id}, not {scene.id}")
    cfg = _episode_config(args)
    backend = _make_backend(args.backend, task, cfg, args.model)
    affordance_dir = None
    if args.export_affordance:
        args.export_affordance.mkdir(parents=True, exist_ok=True)
        affordance_dir = str(args.export_affordance)
    result, trace = run_episode(scene, task, cfg, backend, affordance_dir=affordance_dir)
    if args.trace:
        args.trace.parent.mkdir(parents=True, exist_ok=True)
        save_trace(trace, args.trace)
    flags = "".join("1" if s.success else "0" for s in result.subtasks)
    print(f"{task.task_id}: subtasks={flags} steps={result.steps}")
    return 0


def _bench_one(packed):
    scene, task, cfg_dict, backend_name, model = packed
    cfg = EpisodeConfig.from_dict(cfg_dict)
    backend = _make_backend(backend_name, task, cfg, model)
    result, trace = run_episode(scene, task, cfg, backend)
    return task.task_id, result, trace


def cmd_bench(args) -> int:
    scenes = _load_scenes(args.scenes)
    tasks = benchmod.load_tasks(args.tasks)
    cfg = _episode_config(args)
    if args.backend == "remote":
        # fail fast before any episode if the endpoint is not configured
        _make_backend("remote", tasks[0], cfg, args.model).close()
    args.out.mkdir(parents=True, exist_ok=True)
    trace_dir = args.out / "traces"
    trace_dir.mkdir(exist_ok=True)
    run_metrics = []
    for rep in range(args.repeats):
        jobs = [
            (scenes[t.scene_id], t, cfg.to_dict(), args.backend, args.model) for t in tasks
        ]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                outputs = list(pool.map(_bench_one, jobs))
        else:
            outputs = [_bench_one(j) for j in jobs]
        outputs.sort(key=lambda o: o[0])
        results = [r for _, r, _ in outputs]
        for task_id, _, trace in outputs:
            save_trace(trace, trace_dir / f"{task_id}-rep{rep}.jsonl")
        benchmod.write_results_csv(results, args.out / f"results-rep{rep}.csv")
        run_metrics.append(benchmod.compute_metrics(results, args.ispl_pooling))
    mean = {
        k: sum(m.to_dict()[k] for m in run_metrics) / len(run_metrics)
        for k in ("SR", "ISR", "ISPL", "STL")
    }
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "backend": args.backend,
        "config": cfg.to_dict(),
        "ispl_pooling": args.ispl_pooling,
        "repeats": args.repeats,
        "tasks": len(tasks),
        "runs": [m.to_dict() for m in run_metrics],
        "mean": mean,
    }
    with open(args.out / "summary.json", "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
    print(
        f"SR={mean['SR']:.2f} ISR={mean['ISR']:.2f} "
        f"ISPL={mean['ISPL']:.2f} STL={mean['STL']:.2f} "
        f"({len(tasks)} tasks x {args.repeats} runs)"
    )
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    records = load_trace(args.trace) if args.trace else None
    affordance = None
    if args.affordance:
        affordance = load_affordance_pgm(args.affordance)
    svg = rendermod.render_svg(scene, records, affordance)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(svg)
    print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    scene = load_scene(args.scene)
    records = load_trace(args.trace)
    n = replay_trace(scene, records)
    print(f"replay ok: {n} actions verified")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demandnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate deterministic scenes")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", type=Path, default=None, help="scene gen config JSON")
    g.add_argument("--width", type=float, default=None)
    g.add_argument("--height", type=float, default=None)
    g.add_argument("--rooms", type=int, nargs=2, default=None, metavar=("MIN", "MAX"))
    g.add_argument("--objects-per-room", type=int, nargs=2, default=None, metavar=("MIN", "MAX"))
    g.set_defaults(func=cmd_gen_scenes)

    g = sub.add_parser("gen-tasks", help="generate solvable multi-demand tasks")
    g.add_argument("--scenes", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps-dis", type=float, default=1.5)
    g.set_defaults(func=cmd_gen_tasks)

    g = sub.add_parser("run", help="run one episode")
    g.add_argument("--scene", type=Path, required=True)
    g.add_argument("--tasks", type=Path, required=True)
    g.add_argument("--task-id", default=None)
    g.add_argument("--trace", type=Path, default=None)
    g.add_argument("--export-affordance", type=Path, default=None)
    _add_episode_flags(g)
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("bench", help="run all tasks and compute metrics")
    g.add_argument("--scenes", type=Path, required=True)
    g.add_argument("--tasks", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--repeats", type=int, default=1)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--ispl-pooling", choices=["within_task", "pooled"], default="within_task")
    _add_episode_flags(g)
    g.set_defaults(func=cmd_bench)

    g = sub.add_parser("render", help="render a scene/trace to SVG")
    g.add_argument("--scene", type=Path, required=True)
    g.add_argument("--trace", type=Path, default=None)
    g.add_argument("--affordance", type=Path, default=None, help="exported PGM heat layer")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_render)

    g = sub.add_parser("replay", help="verify a trace against its scene")
    g.add_argument("--scene", type=Path, required=True)
    g.add_argument("--trace", type=Path, required=True)
    g.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        BackendUnavailableError,
        ConfigInfeasibleError,
        benchmod.BenchError,
        FileNotFoundError,
        NotADirectoryError,
        ValueError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
