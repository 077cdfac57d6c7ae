"""Command-line entry point: ``viperkit <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 replay miss, 4 I/O error.
Task-level failures are report rows, not exit failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backends import Role
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .harness import (BaselineError, InputError, ReportError, atomic_write, dump_json, intervention_to_csv,
                      load_report, run_benchmark, run_intervention, task_prompt, write_report)
from .scene import SceneError, generate_scenes, save_scene
from .synthesis import PromptConfigError, ReplayMiss, get_preset
from .tasks import TaskFileError, load_tasks

EXIT_OK, EXIT_CONFIG, EXIT_REPLAY_MISS, EXIT_IO = 0, 2, 3, 4
TRACE_SCHEMA_VERSION = 1

log = logging.getLogger("viperkit")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for generation and noisy backends")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viperkit", description="Compose perception modules with generated programs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="write synthetic scenes")
    _common(p)
    p.add_argument("--count", type=int, required=True)

    p = sub.add_parser("gen-suite", help="write a task suite with inputs and curated programs")
    _common(p)
    p.add_argument("--kind", required=True, choices=("grounding", "image_qa", "knowledge_qa", "video_mcq"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--preset", help="preset whose prompts key the replay store")

    p = sub.add_parser("prompt", help="render the prompt for every task")
    _common(p)
    p.add_argument("tasks")
    p.add_argument("--preset")

    for name, help_ in (("run", "run a benchmark"), ("intervene", "ablate backend roles against a baseline")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("tasks")
        p.add_argument("--preset")
        p.add_argument("--backends", choices=("exact", "default", "remote", "noisy"))
        p.add_argument("--trace-dir")
        p.add_argument("--jobs", type=int)
        p.add_argument("--dry-run", action="store_true", help="resolve and print the configuration only")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")
        if name == "intervene":
            p.add_argument("--roles", default=",".join(r.value for r in Role),
                           help="comma-separated roles (default: all)")
            p.add_argument("--baseline", help="baseline report (default: <out>/report.json)")

    p = sub.add_parser("trace", help="print one task's module calls and intermediates")
    _common(p)
    p.add_argument("trace_file")
    p.add_argument("task_id")
    return parser


# -- configuration -------------------------------------------------------------------

def resolve_config(args, tasks_path: Path | None = None) -> RunConfig:
    if args.config:
        config = load_config(args.config)
    else:
        data: dict = {"generator": {"client": "template"}}
        replay = tasks_path.parent / "replay" if tasks_path is not None else None
        if replay is not None and replay.is_dir():
            data = {"generator": {"client": "replay", "replay_dir": str(replay)}}
        config = config_from_dict(data)
    changes = {}
    if getattr(args, "preset", None):
        get_preset(args.preset)
        changes["preset"] = args.preset
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    if getattr(args, "trace_dir", None):
        changes["trace_dir"] = args.trace_dir
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        changes["jobs"] = args.jobs
    config = replace(config, **changes)
    if getattr(args, "backends", None):
        config = config.with_backends(args.backends)
    elif args.seed is not None:
        # keep noisy backends in step with --seed
        config = replace(config, backends={r: replace(b, params={**b.params, "seed": args.seed})
                                           if b.kind == "noisy-exact" else b for r, b in config.backends.items()})
    return config


# -- commands --------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    config = resolve_config(args)
    seed = config.seed
    out = Path(args.out or config.out)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    scenes = generate_scenes(seed, args.count, config.scene_generator)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}.json"
        save_scene(sc, out / name)
        manifest.append({"file": name, "digest": sc.digest, "objects": len(sc.objects)})
    text = dump_json({"seed": seed, "count": len(scenes), "scenes": manifest})
    atomic_write(out / "manifest.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_suite(args) -> int:
    from .suites import build_suite, write_suite

    config = resolve_config(args)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    out = Path(args.out or config.out)
    items = build_suite(args.kind, config.seed, args.count, config.scene_generator)
    write_suite(items, out, seed=config.seed, preset=args.preset)
    print(f"wrote {len(items)} {args.kind} tasks to {out}")
    return EXIT_OK


def cmd_prompt(args) -> int:
    tasks_path = Path(args.tasks)
    config = resolve_config(args, tasks_path)
    tasks = load_tasks(tasks_path)
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        _, prompt = task_prompt(t, config.preset)
        atomic_write(out / f"{t.id}.prompt.txt", prompt)
    print(f"wrote {len(tasks)} prompts to {out}")
    return EXIT_OK


def _dry_run(config: RunConfig, tasks_path: Path) -> int:
    load_tasks(tasks_path)
    sys.stdout.write(dump_json({"config_digest": config.digest(), "config": config.to_dict()}))
    return EXIT_OK


def cmd_run(args) -> int:
    tasks_path = Path(args.tasks)
    config = resolve_config(args, tasks_path)
    if args.dry_run:
        return _dry_run(config, tasks_path)
    run = run_benchmark(tasks_path, config)
    out = Path(config.out)
    write_report(run.report, out / "report.json", out / "report.csv")
    trace_dir = Path(config.trace_dir) if config.trace_dir else out
    atomic_write(trace_dir / "traces.json",
                 dump_json({"schema_version": TRACE_SCHEMA_VERSION,
                            "results": [r.to_dict() for r in run.results]}))
    run.timings["finished_at"] = datetime.now(timezone.utc).isoformat()
    atomic_write(out / "report.timings.json", dump_json(run.timings))
    if args.figures:
        from .plotting import plot_run_report

        plot_run_report(run.report, out / "figures")
    agg = run.report["aggregates"]
    print(f"{agg['n_tasks']} tasks: mean IoU {agg['mean_iou']:.4f}, acc@0.5 {agg['accuracy_at_iou_0.5']:.4f}, "
          f"exact match {agg['exact_match_accuracy']:.4f}, MCQ {agg['mcq_accuracy']:.4f}; report in {out}")
    return EXIT_OK


def cmd_intervene(args) -> int:
    tasks_path = Path(args.tasks)
    config = resolve_config(args, tasks_path)
    try:
        roles = [Role(r.strip()) for r in args.roles.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"--roles: {exc}") from None
    if args.dry_run:
        return _dry_run(config, tasks_path)
    out = Path(config.out)
    baseline_path = Path(args.baseline) if args.baseline else out / "report.json"
    if not baseline_path.exists():
        raise BaselineError(f"no baseline report at {baseline_path}; run `viperkit run` first")
    report = run_intervention(tasks_path, config, roles, load_report(baseline_path))
    atomic_write(out / "intervention.json", dump_json(report))
    atomic_write(out / "intervention.csv", intervention_to_csv(report))
    if args.figures:
        from .plotting import plot_intervention

        plot_intervention(report, out / "figures")
    for role, data in report["roles"].items():
        print(f"{role:18s} affected {data['n_affected']:4d}  baseline {data['baseline_metric']:.4f}  "
              f"intervened {data['intervened_metric']:.4f}  delta {data['delta']:+.4f}")
    return EXIT_OK


def format_trace(result: dict) -> str:
    lines = [f"task {result['task_id']}", f"status {result['status']}",
             f"answer {json.dumps(result['answer'])}", f"trace_digest {result['trace_digest']}", "calls:"]
    for c in result["calls"]:
        lines.append(f"  {c['seq']:3d}  {c['role']:<17s} {c['op']:<16s} {c['output_summary']}")
    if not result["calls"]:
        lines.append("  (none)")
    lines.append("intermediates:")
    for name, summary in result["intermediates"]:
        lines.append(f"  {name} = {summary}")
    if not result["intermediates"]:
        lines.append("  (none)")
    for w in result["warnings"]:
        lines.append(f"warning: {w}")
    if result.get("exception"):
        lines.append(f"exception: {result['exception']}")
    return "\n".join(lines) + "\n"


def cmd_trace(args) -> int:
    try:
        data = json.loads(Path(args.trace_file).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{args.trace_file}: malformed trace file ({exc})") from None
    if data.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise ReportError(f"{args.trace_file}: unsupported schema_version {data.get('schema_version')!r}")
    for r in data["results"]:
        if r["task_id"] == args.task_id:
            sys.stdout.write(format_trace(r))
            return EXIT_OK
    raise UsageError(f"task {args.task_id!r} is not in {args.trace_file}")


COMMANDS = {"gen-scenes": cmd_gen_scenes, "gen-suite": cmd_gen_suite, "prompt": cmd_prompt, "run": cmd_run,
            "intervene": cmd_intervene, "trace": cmd_trace}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ReplayMiss as exc:
        print(f"viperkit: replay miss: {exc}", file=sys.stderr)
        return EXIT_REPLAY_MISS
    except (ConfigError, PromptConfigError, TaskFileError, SceneError, BaselineError, ReportError,
            UsageError) as exc:
        print(f"viperkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"viperkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
