"""Benchmark driver, metrics and module interventions.

``run_benchmark`` pushes every task through prompt -> generate -> validate
-> execute against one shared batch scheduler and scores the answers.
``run_intervention`` re-runs the same validated programs with one backend
role at a time swapped for its no-information default and reports how far
the per-task score moves on the tasks whose programs call that role.

Report rows hold only deterministic fields. Wall times, batch ids and
scheduler batching statistics go to a separate timings document.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import string
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import geometry
from .backends import Role, ops_for_role
from .engine import ExecutionEngine, ExecutionResult
from .scene import Scene, SceneError, VideoScene, load_input
from .scheduler import BatchScheduler
from .synthesis import (DEFAULT_PRESET_FOR_KIND, GenerationError, Program, PromptConfig, ReplayMiss,
                        build_prompt, generate, get_preset)
from .tasks import TaskInstance, load_tasks
from .validator import validate

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
ACCURACY_IOU = 0.5


class InputError(OSError):
    """A task input could not be read."""


class ReportError(ValueError):
    pass


class BaselineError(RuntimeError):
    """The baseline needed for an intervention is missing or does not match."""


# -- metrics ------------------------------------------------------------------

def iou(box_a: Sequence[int], box_b: Sequence[int]) -> float:
    return geometry.iou(tuple(box_a), tuple(box_b))


_STRIP = str.maketrans("", "", string.punctuation)
_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    text = _WS.sub(" ", str(text).lower().translate(_STRIP)).strip()
    for article in ("a ", "an ", "the "):
        if text.startswith(article):
            text = text[len(article):]
            break
    return text.strip()


def score_qa(answer: str, truth: str) -> bool:
    return normalize_answer(answer) == normalize_answer(truth)


def score_row(kind: str, answer: Any, truth: Any) -> tuple[bool, float | None]:
    """(correct, IoU or None) for one answer."""
    if kind == "grounding":
        value = iou(answer, truth) if answer is not None else 0.0
        return value >= ACCURACY_IOU, value
    if answer is None:
        return False, None
    if kind == "video_mcq":
        return answer == truth, None
    return score_qa(answer, truth), None


def task_score(row: dict) -> float:
    """Per-task metric used for interventions: IoU for grounding, 0/1 otherwise."""
    return float(row["iou"]) if row["kind"] == "grounding" else float(bool(row["correct"]))


def _mean(xs: list[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def compute_aggregates(rows: Sequence[dict]) -> dict:
    ground = [r for r in rows if r["kind"] == "grounding"]
    qa = [r for r in rows if r["kind"] in ("image_qa", "knowledge_qa")]
    mcq = [r for r in rows if r["kind"] == "video_mcq"]
    statuses = {s: sum(r["status"] == s for r in rows) for s in ("ok", "fallback_used", "error")}
    return {
        "n_tasks": len(rows),
        "n_grounding": len(ground),
        "n_qa": len(qa),
        "n_mcq": len(mcq),
        "mean_iou": _mean([r["iou"] for r in ground]),
        "accuracy_at_iou_0.5": _mean([float(r["correct"]) for r in ground]),
        "exact_match_accuracy": _mean([float(r["correct"]) for r in qa]),
        "mcq_accuracy": _mean([float(r["correct"]) for r in mcq]),
        "status_counts": statuses,
    }


# -- inputs and programs ------------------------------------------------------------

class InputCache:
    def __init__(self, base_dir: str | Path | None):
        self.base = Path(base_dir) if base_dir is not None else Path(".")
        self._cache: dict[str, Scene | VideoScene] = {}
        self._lock = threading.Lock()

    def get(self, ref: str) -> Scene | VideoScene:
        with self._lock:
            if ref not in self._cache:
                path = Path(ref) if Path(ref).is_absolute() else self.base / ref
                try:
                    self._cache[ref] = load_input(path)
                except OSError as exc:
                    raise InputError(f"{path}: {exc.strerror or exc}") from None
                except SceneError as exc:
                    raise InputError(f"{path}: {exc}") from None
            return self._cache[ref]


def prompt_config_for(task: TaskInstance, preset: str | None) -> PromptConfig:
    """The preset for ``task``: the named one if it targets the task's kind, else the kind's default."""
    cfg = None
    if preset is not None:
        cfg = get_preset(preset)
        if cfg.name == "full":
            cfg = PromptConfig(task.kind, cfg.api_subset, cfg.usage_examples, None, None, "full")
        elif cfg.task_kind != task.kind:
            cfg = None
    if cfg is None:
        cfg = get_preset(DEFAULT_PRESET_FOR_KIND[task.kind])
    return cfg.with_context(task.context)


def task_prompt(task: TaskInstance, preset: str | None) -> tuple[PromptConfig, str]:
    cfg = prompt_config_for(task, preset)
    return cfg, build_prompt(cfg, task.query, task.options if task.kind == "video_mcq" else None)


def prepare_program(task: TaskInstance, config, client) -> Program:
    """Generate and validate the program for one task.

    Replay misses propagate (they are configuration problems, not task
    failures). Other generation errors and invalid programs come back as a
    Program with ``validation`` set accordingly.
    """
    cfg, prompt = task_prompt(task, config.preset)
    attempts = 1 + config.retries
    program = None
    for _ in range(attempts):
        try:
            program = generate(prompt, client, task.id, task)
        except ReplayMiss:
            raise
        except GenerationError as exc:
            program = Program(task.id, "", getattr(client, "name", "?"), "", "generation_failed", str(exc))
            continue
        report = validate(program.source, cfg)
        program.validation = report.verdict
        program.reason = report.reason()
        program.api_calls_used = report.api_calls_used
        if report.valid:
            break
    return program


# -- benchmark -----------------------------------------------------------------------

@dataclass
class BenchmarkRun:
    report: dict
    results: list[ExecutionResult]
    programs: list[Program]
    timings: dict = field(default_factory=dict)


def _row(task: TaskInstance, program: Program, result: ExecutionResult) -> dict:
    correct, value = score_row(task.kind, result.answer, task.ground_truth)
    answer = list(result.answer) if isinstance(result.answer, tuple) else result.answer
    truth = list(task.ground_truth) if isinstance(task.ground_truth, tuple) else task.ground_truth
    reason = result.trace.exception or ""
    if program.validation != "valid":
        reason = f"{program.validation}: {program.reason}"
    return {
        "task_id": task.id,
        "kind": task.kind,
        "status": result.status,
        "validation": program.validation,
        "reason": reason,
        "answer": answer,
        "truth": truth,
        "correct": bool(correct),
        "iou": value,
        "program_digest": program.source_digest if program.source else "",
        "api_calls": sorted(program.api_calls_used),
        "n_calls": len(result.trace.calls),
        "trace_digest": result.trace.digest(),
    }


def _execute_all(tasks, programs, config, registry, inputs: InputCache):
    results: list[ExecutionResult | None] = [None] * len(tasks)
    loaded = [inputs.get(t.input_ref) for t in tasks]  # fail fast on unreadable inputs
    scheduler = BatchScheduler(registry, config.scheduler).run_consumers()
    try:
        engine = ExecutionEngine(scheduler, timeout=config.timeout, isolation=config.isolation,
                                 verify_threshold=config.verify_threshold)

        def one(i: int) -> None:
            task, program = tasks[i], programs[i]
            if program.validation == "valid":
                results[i] = engine.execute(program, task, loaded[i])
            else:
                results[i] = engine.fallback_result(task, loaded[i], f"program {program.validation}")

        with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as pool:
            for fut in [pool.submit(one, i) for i in range(len(tasks))]:
                fut.result()
    finally:
        stats = scheduler.drain_and_shutdown()
    return results, stats


def run_benchmark(tasks: str | Path | Sequence[TaskInstance], config, base_dir: str | Path | None = None,
                  registry=None, client=None) -> BenchmarkRun:
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.monotonic()
    if isinstance(tasks, (str, Path)):
        base_dir = base_dir if base_dir is not None else Path(tasks).parent
        tasks = load_tasks(tasks)
    tasks = list(tasks)
    client = client or config.generator.build()
    registry = registry or config.registry()
    programs = [prepare_program(t, config, client) for t in tasks]
    results, stats = _execute_all(tasks, programs, config, registry, InputCache(base_dir))
    rows = [_row(t, p, r) for t, p, r in zip(tasks, programs, results)]
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_digest": config.digest(),
        "backends": registry.kinds(),
        "rows": rows,
        "aggregates": compute_aggregates(rows),
        "scheduler": {role: {"tickets": s["tickets"]} for role, s in stats.items()},
    }
    timings = {
        "started_at": started,
        "wall_time_s": time.monotonic() - t0,
        "scheduler": stats,
        "tasks": {r.task_id: {"wall_time_s": r.wall_time,
                              "calls": [[c.seq, c.batch_id, c.elapsed] for c in r.trace.calls]}
                  for r in results},
    }
    return BenchmarkRun(report, results, programs, timings)


# -- report files ------------------------------------------------------------------

def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(value: Any) -> str:
    return json.dumps(value, indent=1, sort_keys=True) + "\n"


REPORT_CSV_FIELDS = ("task_id", "kind", "status", "validation", "correct", "iou", "answer", "truth",
                     "api_calls", "n_calls", "trace_digest", "program_digest", "reason")


def rows_to_csv(rows: Iterable[dict], fields: Sequence[str] = REPORT_CSV_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in rows:
        out = []
        for f in fields:
            v = r.get(f)
            if isinstance(v, (list, dict)):
                v = json.dumps(v, sort_keys=True)
            elif v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            out.append(v)
        writer.writerow(out)
    return buf.getvalue()


def write_report(report: dict, path: str | Path, csv_path: str | Path | None = None) -> None:
    atomic_write(path, dump_json(report))
    if csv_path is not None:
        atomic_write(csv_path, rows_to_csv(report["rows"]))


def load_report(path: str | Path) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: malformed report ({exc})") from None
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ReportError(f"{path}: unsupported schema_version {report.get('schema_version')!r}")
    if compute_aggregates(report["rows"]) != report["aggregates"]:
        raise ReportError(f"{path}: aggregates do not match the rows")
    return report


# -- interventions ---------------------------------------------------------------------

INTERVENTION_SCHEMA_VERSION = 1


def affected_tasks(rows: Sequence[dict], role: Role) -> list[str]:
    ops = ops_for_role(role)
    return [r["task_id"] for r in rows if r["validation"] == "valid" and ops & set(r["api_calls"])]


def run_intervention(tasks: str | Path | Sequence[TaskInstance], config, roles: Sequence[Role | str],
                     baseline: dict | None, base_dir: str | Path | None = None, client=None,
                     registry=None) -> dict:
    if baseline is None:
        raise BaselineError("an intervention needs a baseline run report for the same tasks")
    if isinstance(tasks, (str, Path)):
        base_dir = base_dir if base_dir is not None else Path(tasks).parent
        tasks = load_tasks(tasks)
    tasks = list(tasks)
    roles = [Role(r) for r in roles]
    if baseline.get("config_digest") != config.digest():
        raise BaselineError("baseline was produced with a different configuration")
    by_id = {r["task_id"]: r for r in baseline["rows"]}
    missing = [t.id for t in tasks if t.id not in by_id]
    if missing:
        raise BaselineError(f"baseline has no rows for tasks {missing[:5]}")

    client = client or config.generator.build()
    programs = {t.id: prepare_program(t, config, client) for t in tasks}
    for t in tasks:
        p = programs[t.id]
        if (p.source_digest if p.source else "") != by_id[t.id]["program_digest"]:
            raise BaselineError(f"task {t.id}: program differs from the baseline's")
    registry = registry or config.registry()
    inputs = InputCache(base_dir)
    task_by_id = {t.id: t for t in tasks}
    rows = [by_id[t.id] for t in tasks]

    out = {"schema_version": INTERVENTION_SCHEMA_VERSION, "config_digest": config.digest(),
           "metric": "mean per-task score (IoU for grounding, 0/1 correctness otherwise)", "roles": {}}
    for role in roles:
        ids = affected_tasks(rows, role)
        sub = [task_by_id[i] for i in ids]
        results, _ = _execute_all(sub, [programs[i] for i in ids], config,
                                  registry.with_binding(role, "default"), inputs) if sub else ([], {})
        per_task = []
        for task, res in zip(sub, results):
            row = _row(task, programs[task.id], res)
            per_task.append({"task_id": task.id, "baseline": task_score(by_id[task.id]),
                             "intervened": task_score(row), "status": row["status"], "answer": row["answer"]})
        base = _mean([p["baseline"] for p in per_task])
        new = _mean([p["intervened"] for p in per_task])
        out["roles"][role.value] = {"affected": ids, "n_affected": len(ids), "baseline_metric": base,
                                    "intervened_metric": new, "delta": new - base, "tasks": per_task}
    return out


INTERVENTION_CSV_FIELDS = ("role", "n_affected", "baseline_metric", "intervened_metric", "delta")


def intervention_to_csv(report: dict) -> str:
    rows = [{"role": role, **{k: v for k, v in data.items() if k in INTERVENTION_CSV_FIELDS}}
            for role, data in report["roles"].items()]
    return rows_to_csv(rows, INTERVENTION_CSV_FIELDS)
