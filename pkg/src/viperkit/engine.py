"""Running validated programs.

:class:`ExecutionEngine` executes ``execute_command`` with the runtime bound
to a dispatcher, enforces a wall-clock budget, records every backend call in
a :class:`Trace`, coerces the return value to the task's answer type and
falls back to a direct module query when anything goes wrong.

Two isolation modes exist. ``thread`` runs the program in the calling thread
and interrupts it through a trace hook once the budget is spent. ``process``
runs it in a child process whose backend calls are proxied over a pipe to
the parent, so the child can be killed outright and a crash cannot take the
host down; the trace is recorded on the parent side of the pipe.
"""

from __future__ import annotations

import ast
import builtins
import logging
import multiprocessing as mp
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .backends import BackendError, Request, Role
from .runtime import (ImagePatch, PatchRef, Runtime, SegmentRef, bool_to_yesno, full_patch,
                      program_namespace)
from .scene import Scene, VideoScene, canonical_json, sha256_hex
from .scheduler import CallTimeout
from .synthesis import Program
from .validator import ALLOWED_BUILTINS, ENTRY_POINT, EXCEPTION_NAMES

logger = logging.getLogger(__name__)

PROGRAM_FILENAME = "<viperkit-program>"
DEFAULT_TIMEOUT = 60.0
TRACE_SCHEMA_VERSION = 1
_RECORD = "_vk_record"


class InvalidProgramError(RuntimeError):
    """Execution was requested for a program that did not pass validation."""


class CoercionError(TypeError):
    """The program returned a value that is not an answer for its task."""


class ProgramTimeout(BaseException):
    """Raised inside a program once its budget is spent.

    Derives from BaseException so ``except Exception`` in generated code
    cannot swallow it.
    """


# -- trace ----------------------------------------------------------------

@dataclass
class ModuleCall:
    seq: int
    role: str
    op: str
    input_digest: str
    output_digest: str
    output_summary: str
    output: Any = None
    error: str | None = None
    batch_id: int | None = None
    elapsed: float = 0.0

    def to_dict(self, timings: bool = False) -> dict:
        d = {"seq": self.seq, "role": self.role, "op": self.op, "input_digest": self.input_digest,
             "output_digest": self.output_digest, "output_summary": self.output_summary,
             "output": self.output, "error": self.error}
        if timings:
            d.update(batch_id=self.batch_id, elapsed=self.elapsed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleCall":
        return cls(**{k: d.get(k) for k in ("seq", "role", "op", "input_digest", "output_digest",
                                            "output_summary", "output", "error", "batch_id")},
                   elapsed=d.get("elapsed", 0.0))


@dataclass
class Trace:
    calls: list[ModuleCall] = field(default_factory=list)
    intermediates: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    exception: str | None = None

    def digest(self) -> str:
        body = {
            "calls": [[c.seq, c.role, c.op, c.input_digest, c.output_digest, c.error] for c in self.calls],
            "intermediates": [list(x) for x in self.intermediates],
            "warnings": self.warnings,
            "exception": self.exception,
        }
        return sha256_hex(canonical_json(body))


@dataclass
class ExecutionResult:
    task_id: str
    status: str  # ok | fallback_used | error
    answer: Any
    trace: Trace
    wall_time: float = 0.0

    def to_dict(self, timings: bool = False) -> dict:
        d = {
            "task_id": self.task_id,
            "status": self.status,
            "answer": list(self.answer) if isinstance(self.answer, tuple) else self.answer,
            "trace_digest": self.trace.digest(),
            "calls": [c.to_dict(timings) for c in self.trace.calls],
            "intermediates": [list(x) for x in self.trace.intermediates],
            "warnings": self.trace.warnings,
            "exception": self.trace.exception,
        }
        if timings:
            d["wall_time"] = self.wall_time
        return d


def encode_output(role: Role, value: Any) -> tuple[Any, str, str]:
    """(JSON-able output, digest, short summary) for a backend result."""
    if role is Role.DEPTH_ESTIMATOR:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        digest = sha256_hex(canonical_json(list(arr.shape)) + arr.tobytes())
        med = float(np.median(arr))
        return {"shape": list(arr.shape), "median": med}, digest, f"depth map {arr.shape}, median {med:.4f}"
    if role is Role.OBJECT_DETECTOR:
        enc = [[*map(int, box), float(score)] for box, score in value]
        summary = f"{len(enc)} detection(s)" + (": " + " ".join(str(tuple(e[:4])) for e in enc[:4]) if enc else "")
    elif role is Role.IMAGE_TEXT_SCORER:
        enc = float(value)
        summary = f"score {enc:.3f}"
    else:
        enc = str(value)
        summary = repr(enc if len(enc) <= 80 else enc[:77] + "...")
    return enc, sha256_hex(canonical_json(enc)), summary


def decode_output(role: Role, enc: Any) -> Any:
    if role is Role.DEPTH_ESTIMATOR:
        return np.full((1, 1), enc["median"])
    if role is Role.OBJECT_DETECTOR:
        return [(tuple(int(v) for v in e[:4]), float(e[4])) for e in enc]
    if role is Role.IMAGE_TEXT_SCORER:
        return float(enc)
    return enc


class Tracer:
    """Dispatcher wrapper recording each backend call exactly once."""

    def __init__(self, upstream, trace: Trace, deadline: float | None = None):
        self.upstream = upstream
        self.trace = trace
        self.deadline = deadline

    def remaining(self) -> float | None:
        if self.deadline is None:
            return None
        return max(0.0, self.deadline - time.monotonic())

    def call(self, request: Request, timeout: float | None = None):
        remaining = self.remaining()
        if remaining is not None and remaining <= 0:
            raise ProgramTimeout("time budget exhausted before a module call")
        seq = len(self.trace.calls) + 1
        t0 = time.perf_counter()
        try:
            result, batch_id = self.upstream.call(request, timeout=remaining)
        except CallTimeout as exc:
            self._record_error(seq, request, exc, time.perf_counter() - t0)
            raise ProgramTimeout(str(exc)) from None
        except Exception as exc:
            self._record_error(seq, request, exc, time.perf_counter() - t0)
            raise
        enc, digest, summary = encode_output(request.role, result)
        self.trace.calls.append(ModuleCall(seq, request.role.value, request.op, request.digest, digest,
                                           summary, enc, None, batch_id, time.perf_counter() - t0))
        return result, batch_id

    def _record_error(self, seq: int, request: Request, exc: BaseException, elapsed: float) -> None:
        msg = f"{type(exc).__name__}: {exc}"
        self.trace.calls.append(ModuleCall(seq, request.role.value, request.op, request.digest, "",
                                           "error: " + msg, None, msg, None, elapsed))

    def warn(self, message: str) -> None:
        self.trace.warnings.append(message)


class TraceReplayDispatcher:
    """Serves recorded outputs back in order, checking each request digest."""

    def __init__(self, calls: list[ModuleCall]):
        self.calls = list(calls)
        self.pos = 0

    def call(self, request: Request, timeout: float | None = None):
        if self.pos >= len(self.calls):
            raise BackendError("replayed trace is exhausted")
        rec = self.calls[self.pos]
        self.pos += 1
        if rec.input_digest != request.digest or rec.op != request.op:
            raise BackendError(f"replay divergence at call {rec.seq}: expected {rec.op}")
        if rec.error is not None:
            raise BackendError(rec.error)
        return decode_output(Role(rec.role), rec.output), rec.batch_id


# -- compiling --------------------------------------------------------------

def summarize_value(value: Any, limit: int = 160) -> str:
    if isinstance(value, ImagePatch):
        text = repr(value)
    elif isinstance(value, (list, tuple)) and value and all(isinstance(v, ImagePatch) for v in value):
        text = f"{len(value)} patch(es): " + ", ".join(repr(v) for v in value[:3]) + (" ..." if len(value) > 3 else "")
    else:
        try:
            text = repr(value)
        except Exception:  # repr of arbitrary runtime values
            text = f"<{type(value).__name__}>"
    return text if len(text) <= limit else text[:limit - 3] + "..."


class _Instrument(ast.NodeTransformer):
    """Snapshot every top-level assignment of the entry point by name."""

    def visit_FunctionDef(self, node: ast.FunctionDef) -> ast.FunctionDef:
        body = []
        for stmt in node.body:
            body.append(stmt)
            targets = stmt.targets if isinstance(stmt, ast.Assign) else \
                [stmt.target] if isinstance(stmt, (ast.AugAssign, ast.AnnAssign)) else []
            for name in _target_names(targets):
                call = ast.Expr(ast.Call(ast.Name(_RECORD, ast.Load()),
                                         [ast.Constant(name), ast.Name(name, ast.Load())], []))
                body.append(ast.copy_location(call, stmt))
        node.body = body
        return node


def _target_names(targets) -> list[str]:
    names = []
    for t in targets:
        for n in ast.walk(t):
            if isinstance(n, ast.Name) and isinstance(n.ctx, ast.Store):
                names.append(n.id)
    return names


_FUTURE_ANNOTATIONS = __import__("__future__").annotations.compiler_flag


def compile_program(source: str):
    tree = _Instrument().visit(ast.parse(source))
    ast.fix_missing_locations(tree)
    return compile(tree, PROGRAM_FILENAME, "exec", flags=_FUTURE_ANNOTATIONS, dont_inherit=True)


SAFE_BUILTINS = {name: getattr(builtins, name) for name in ALLOWED_BUILTINS | EXCEPTION_NAMES}


def run_program(code, runtime: Runtime, task, input_obj, record: Callable[[str, Any], None]) -> Any:
    namespace = {"__builtins__": dict(SAFE_BUILTINS), "__name__": "viperkit_program",
                 _RECORD: record, **program_namespace(runtime)}
    exec(code, namespace)
    fn = namespace[ENTRY_POINT]
    if task.kind == "video_mcq":
        return fn(input_obj, list(task.options), task.query)
    return fn(input_obj)


def _deadline_hook(deadline: float):
    def local(frame, event, arg):
        if time.monotonic() > deadline:
            raise ProgramTimeout("program exceeded its time budget")
        return local

    def global_(frame, event, arg):
        if frame.f_code.co_filename != PROGRAM_FILENAME:
            return None
        if time.monotonic() > deadline:
            raise ProgramTimeout("program exceeded its time budget")
        return local

    return global_


# -- answers ------------------------------------------------------------------

def coerce_answer(raw: Any, task) -> Any:
    kind = task.kind
    if kind == "grounding":
        if isinstance(raw, (list, tuple)) and raw:
            raw = raw[0]
        if isinstance(raw, ImagePatch):
            return raw.ref.box
        if isinstance(raw, PatchRef):
            return raw.box
        raise CoercionError(f"grounding answer must be an ImagePatch, got {type(raw).__name__}")
    if kind == "video_mcq":
        if isinstance(raw, (tuple, list)) and raw:
            raw = raw[0]  # programs may return (answer, info)
        if isinstance(raw, str):
            for opt in task.options:
                if opt.strip().lower() == raw.strip().lower():
                    return opt
        raise CoercionError(f"answer {raw!r} is not one of the options")
    if isinstance(raw, bool):
        return bool_to_yesno(raw)
    if isinstance(raw, str):
        return raw
    if isinstance(raw, (int, np.integer)):
        return str(int(raw))
    if isinstance(raw, (float, np.floating)):
        return str(int(raw)) if float(raw).is_integer() else repr(float(raw))
    raise CoercionError(f"QA answer must be text, got {type(raw).__name__}")


def fallback_answer(task, input_obj, runtime: Runtime) -> Any:
    if task.kind == "grounding":
        return full_patch(input_obj).box
    if task.kind == "video_mcq":
        n = len(input_obj.frames)
        mid = n // 2
        return runtime.select_answer(SegmentRef(input_obj, mid, mid + 1), {}, task.query, list(task.options))
    return runtime.simple_query(full_patch(input_obj), task.query)


# -- engine ---------------------------------------------------------------------

class ExecutionEngine:
    def __init__(self, dispatcher, timeout: float = DEFAULT_TIMEOUT, isolation: str = "thread",
                 verify_threshold: float = 0.6, mp_context: str | None = None):
        if isolation not in ("thread", "process"):
            raise ValueError(f"isolation must be 'thread' or 'process', got {isolation!r}")
        self.dispatcher = dispatcher
        self.timeout = timeout
        self.isolation = isolation
        self.verify_threshold = verify_threshold
        self.mp_context = mp_context

    def _runtime(self, tracer: Tracer, input_obj) -> Runtime:
        return Runtime(tracer, knowledge_source=input_obj, verify_threshold=self.verify_threshold,
                       on_warning=tracer.warn)

    def execute(self, program: Program, task, input_obj: Scene | VideoScene) -> ExecutionResult:
        if program.validation != "valid":
            raise InvalidProgramError(f"program for task {task.id} is {program.validation}: {program.reason}")
        t0 = time.monotonic()
        trace = Trace()
        tracer = Tracer(self.dispatcher, trace, t0 + self.timeout)
        if self.isolation == "process":
            answer, error = self._run_in_process(program.source, task, input_obj, tracer)
        else:
            answer, error = self._run_in_thread(program.source, task, input_obj, tracer)
        if error is None:
            return ExecutionResult(task.id, "ok", answer, trace, time.monotonic() - t0)
        trace.exception = error
        return self._fallback(task, input_obj, trace, t0)

    def fallback_result(self, task, input_obj, reason: str) -> ExecutionResult:
        """Answer by the fallback policy alone (no usable program)."""
        t0 = time.monotonic()
        trace = Trace(exception=reason)
        return self._fallback(task, input_obj, trace, t0)

    def _fallback(self, task, input_obj, trace: Trace, t0: float) -> ExecutionResult:
        tracer = Tracer(self.dispatcher, trace, time.monotonic() + self.timeout)
        try:
            answer = fallback_answer(task, input_obj, self._runtime(tracer, input_obj))
        except (Exception, ProgramTimeout) as exc:
            trace.exception = f"{trace.exception}; fallback failed: {type(exc).__name__}: {exc}"
            return ExecutionResult(task.id, "error", None, trace, time.monotonic() - t0)
        return ExecutionResult(task.id, "fallback_used", answer, trace, time.monotonic() - t0)

    def _run_in_thread(self, source: str, task, input_obj, tracer: Tracer):
        def record(name, value):
            tracer.trace.intermediates.append((name, summarize_value(value)))

        runtime = self._runtime(tracer, input_obj)
        previous = sys.gettrace()
        try:
            code = compile_program(source)
            sys.settrace(_deadline_hook(tracer.deadline))
            try:
                raw = run_program(code, runtime, task, input_obj, record)
            finally:
                sys.settrace(previous)
            return coerce_answer(raw, task), None
        except ProgramTimeout as exc:
            return None, f"ProgramTimeout: {exc}"
        except Exception as exc:  # anything the program raises triggers the fallback
            return None, f"{type(exc).__name__}: {exc}"

    def _run_in_process(self, source: str, task, input_obj, tracer: Tracer):
        if self.mp_context:
            ctx = mp.get_context(self.mp_context)
        else:
            methods = mp.get_all_start_methods()
            ctx = mp.get_context("forkserver" if "forkserver" in methods else "spawn")
        if ctx.get_start_method() == "forkserver":
            ctx.set_forkserver_preload(["viperkit.engine"])  # children fork with numpy already loaded
        parent, child = ctx.Pipe()
        proc = ctx.Process(target=_child_main,
                           args=(child, source, task, input_obj, self.verify_threshold), daemon=True)
        proc.start()
        child.close()
        try:
            while True:
                remaining = tracer.deadline - time.monotonic()
                if remaining <= 0:
                    return None, "ProgramTimeout: program exceeded its time budget"
                if not parent.poll(min(remaining, 0.05)):
                    if not proc.is_alive() and not parent.poll():
                        return None, f"WorkerDied: program process exited with code {proc.exitcode}"
                    continue
                try:
                    msg = parent.recv()
                except (EOFError, OSError):
                    return None, f"WorkerDied: program process exited with code {proc.exitcode}"
                kind = msg[0]
                if kind == "call":
                    parent.send(self._serve_call(msg, input_obj, tracer))
                elif kind == "warn":
                    tracer.warn(msg[1])
                elif kind == "done":
                    tracer.trace.intermediates.extend(msg[2])
                    answer = tuple(msg[1]) if isinstance(msg[1], list) else msg[1]
                    return answer, None
                elif kind == "raised":
                    tracer.trace.intermediates.extend(msg[2])
                    return None, msg[1]
        finally:
            if proc.is_alive():
                proc.kill()
            proc.join(timeout=5)
            parent.close()

    def _serve_call(self, msg, input_obj, tracer: Tracer):
        _, role, op, ref, box, text, frame_idx = msg
        image = input_obj if ref is None else input_obj.frames[ref]
        request = Request(Role(role), op, image, box, text, frame_idx)
        try:
            result, _ = tracer.call(request)
        except ProgramTimeout as exc:
            return ("err", "ProgramTimeout", str(exc))
        except Exception as exc:
            return ("err", type(exc).__name__, str(exc))
        return ("ok", result)


# -- process-mode child ----------------------------------------------------------

class _PipeDispatcher:
    def __init__(self, conn, input_obj):
        self.conn = conn
        self.input_obj = input_obj

    def _ref(self, image) -> int | None:
        if image is None or image is self.input_obj:
            return None
        for i, fr in enumerate(getattr(self.input_obj, "frames", ())):
            if fr is image:
                return i
        raise BackendError("request image is not part of the task input")

    def call(self, request: Request, timeout: float | None = None):
        self.conn.send(("call", request.role.value, request.op, self._ref(request.image),
                        request.box, request.text, request.frame))
        reply = self.conn.recv()
        if reply[0] == "ok":
            return reply[1], None
        raise BackendError(f"{reply[1]}: {reply[2]}")


def _child_main(conn, source, task, input_obj, verify_threshold) -> None:
    intermediates: list[tuple[str, str]] = []

    def record(name, value):
        intermediates.append((name, summarize_value(value)))

    runtime = Runtime(_PipeDispatcher(conn, input_obj), knowledge_source=input_obj,
                      verify_threshold=verify_threshold, on_warning=lambda m: conn.send(("warn", m)))
    try:
        raw = run_program(compile_program(source), runtime, task, input_obj, record)
        conn.send(("done", coerce_answer(raw, task), intermediates))
    except BaseException as exc:
        conn.send(("raised", f"{type(exc).__name__}: {exc}", intermediates))
    finally:
        conn.close()
