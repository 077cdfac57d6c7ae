import os
import time

import pytest

from conftest import obj
from viperkit import api_spec, engine
from viperkit.backends import BackendError, BackendRegistry
from viperkit.engine import (CoercionError, ExecutionEngine, InvalidProgramError, ProgramTimeout,
                             TraceReplayDispatcher, coerce_answer)
from viperkit.runtime import PatchRef
from viperkit.scene import Scene
from viperkit.scheduler import DirectDispatcher
from viperkit.synthesis import Program
from viperkit.tasks import TaskInstance


def program(source: str, validation: str = "valid") -> Program:
    return Program("t", source, "test", "", validation=validation)


def task(kind="grounding", query="the thing", options=()):
    return TaskInstance(id="t", kind=kind, query=query, input_ref="x.json", options=tuple(options))


def exact_engine(**kw) -> ExecutionEngine:
    return ExecutionEngine(DirectDispatcher(BackendRegistry.uniform("exact")), **kw)


class Failing:
    def call(self, request, timeout=None):
        raise BackendError("service down")


CANVAS = Scene(10, 10, (), 0.5, {}, "")
REFCOCO = api_spec.split_example(api_spec.REFCOCO_EXAMPLE)[1]
DIVIDE = "def execute_command(image):\n    x = 1 / 0\n    return ImagePatch(image)\n"
SPIN = """\
def execute_command(image):
    n = 0
    while True:
        try:
            n += 1
        except:
            n = 0
"""


@pytest.fixture
def chair_room() -> Scene:
    return Scene(120, 80, (obj("c", "chair", (30, 5, 60, 45), 0.4, ("wooden",)),), 0.9, {}, "a room")


def test_refcoco_listing_finds_the_chair(chair_room):
    result = exact_engine().execute(program(REFCOCO), task(), chair_room)
    assert result.status == "ok"
    assert result.answer == (30, 5, 60, 45)
    assert [c.op for c in result.trace.calls] == ["find", "compute_depth"]
    assert [c.seq for c in result.trace.calls] == [1, 2]


def test_intermediates_follow_assignment_order(chair_room):
    result = exact_engine().execute(program(REFCOCO), task(), chair_room)
    names = [n for n, _ in result.trace.intermediates]
    assert names == ["image_patch", "chair_patches", "chair_patch"]


def test_runtime_error_falls_back_to_whole_image(chair_room):
    result = exact_engine().execute(program(DIVIDE), task(), chair_room)
    assert result.status == "fallback_used"
    assert result.answer == (0, 0, 120, 80)
    assert result.trace.exception.startswith("ZeroDivisionError")


def test_runaway_loop_times_out_despite_bare_except(chair_room):
    t0 = time.monotonic()
    result = exact_engine(timeout=0.3).execute(program(SPIN), task(), chair_room)
    assert time.monotonic() - t0 < 5
    assert result.status == "fallback_used"
    assert result.answer == (0, 0, 120, 80)
    assert "ProgramTimeout" in result.trace.exception


def test_program_timeout_is_not_an_exception():
    assert not issubclass(ProgramTimeout, Exception)


def test_invalid_program_is_never_run(chair_room):
    with pytest.raises(InvalidProgramError):
        exact_engine().execute(program("import os", validation="invalid"), task(), chair_room)


def test_fallback_failure_gives_error_status(street):
    eng = ExecutionEngine(Failing())
    src = "def execute_command(image):\n    return ImagePatch(image).simple_query('what?')\n"
    result = eng.execute(program(src), task("image_qa", "What is the weather like?"), street)
    assert result.status == "error"
    assert result.answer is None
    assert "fallback failed" in result.trace.exception
    assert all(c.error for c in result.trace.calls)


def test_qa_fallback_uses_simple_query(street):
    result = exact_engine().execute(program(DIVIDE.replace("ImagePatch(image)", "'x'")),
                                    task("image_qa", "What is the weather like?"), street)
    assert (result.status, result.answer) == ("fallback_used", "sunny")
    assert result.trace.calls[-1].op == "simple_query"


def test_mcq_tuple_answer(clip):
    src = api_spec.split_example(api_spec.NEXTQA_EXAMPLE)[1].replace("ImagePatch(video_segment, -1)",
                                                                       "frame(video_segment, 0)")
    t = task("video_mcq", "Where is this?", ["a field", "a street", "a beach"])
    result = exact_engine().execute(program(src), t, clip)
    assert result.status == "ok"
    assert result.answer == "a street"


def test_reference_video_constructor_falls_back(clip):
    src = api_spec.split_example(api_spec.NEXTQA_EXAMPLE)[1]
    t = task("video_mcq", "Where is this?", ["a field", "a street"])
    result = exact_engine().execute(program(src), t, clip)
    assert result.status == "fallback_used"
    assert result.trace.exception.startswith("TypeError")
    assert result.trace.calls[-1].op == "select_answer"


@pytest.mark.parametrize("raw,kind,expected", [
    (True, "image_qa", "yes"),
    (False, "knowledge_qa", "no"),
    (3, "image_qa", "3"),
    (2.0, "image_qa", "2"),
    (2.5, "image_qa", "2.5"),
    ("blue", "image_qa", "blue"),
    (PatchRef(CANVAS, 1, 2, 3, 4), "grounding", (1, 2, 3, 4)),
    ([PatchRef(CANVAS, 1, 2, 3, 4), PatchRef(CANVAS, 0, 0, 9, 9)], "grounding", (1, 2, 3, 4)),
    ("A STREET", "video_mcq", "a street"),
    (("a street", {"k": "v"}), "video_mcq", "a street"),
])
def test_coercion(raw, kind, expected):
    assert coerce_answer(raw, task(kind, options=["a field", "a street"])) == expected


@pytest.mark.parametrize("raw,kind", [
    (None, "image_qa"),
    ([1, 2], "image_qa"),
    ("a street", "grounding"),
    ([], "grounding"),
    ("a forest", "video_mcq"),
    ({"answer": "a street"}, "video_mcq"),
])
def test_coercion_failures(raw, kind):
    with pytest.raises(CoercionError):
        coerce_answer(raw, task(kind, options=["a field", "a street"]))


def test_uncoercible_return_falls_back(street):
    src = "def execute_command(image):\n    return ImagePatch(image).find('car')[0].compute_depth() > 9\n"
    result = exact_engine().execute(program(src), task("grounding", "the car"), street)
    assert result.status == "fallback_used"
    assert result.trace.exception.startswith("CoercionError")


def test_trace_replay_is_faithful(street):
    _, src = api_spec.split_example(api_spec.GQA_EXAMPLE)
    t = task("image_qa", "Is there a backpack to the right of the man?")
    first = exact_engine().execute(program(src), t, street)
    replayed = ExecutionEngine(TraceReplayDispatcher(first.trace.calls)).execute(program(src), t, street)
    assert replayed.answer == first.answer
    assert replayed.trace.digest() == first.trace.digest()


def test_trace_replay_detects_divergence(street):
    src = "def execute_command(image):\n    return ImagePatch(image).find('car')\n"
    first = exact_engine().execute(program(src), task(), street)
    other = src.replace("'car'", "'dog'")
    result = ExecutionEngine(TraceReplayDispatcher(first.trace.calls)).execute(program(other), task(), street)
    assert result.status == "fallback_used"
    assert "divergence" in result.trace.exception


def test_trace_digest_ignores_timings(street):
    src = "def execute_command(image):\n    return ImagePatch(image).find('car')\n"
    a = exact_engine().execute(program(src), task(), street)
    b = exact_engine().execute(program(src), task(), street)
    b.trace.calls[0].elapsed += 5
    b.trace.calls[0].batch_id = 99
    assert a.trace.digest() == b.trace.digest()


def test_process_isolation_matches_thread(street):
    _, src = api_spec.split_example(api_spec.GQA_EXAMPLE)
    t = task("image_qa", "Is there a backpack to the right of the man?")
    a = exact_engine().execute(program(src), t, street)
    b = exact_engine(isolation="process").execute(program(src), t, street)
    assert b.to_dict() == a.to_dict()


def test_process_isolation_stops_builtin_spin(street):
    src = "def execute_command(image):\n    return str(sum(range(10 ** 12)))\n"
    result = exact_engine(isolation="process", timeout=1.0).execute(program(src), task("image_qa", "x?"), street)
    assert result.status == "fallback_used"
    assert "ProgramTimeout" in result.trace.exception


def _crash(conn, *args):
    os._exit(3)


def test_process_worker_death_falls_back(street, monkeypatch):
    monkeypatch.setattr(engine, "_child_main", _crash)
    src = "def execute_command(image):\n    return ImagePatch(image)\n"
    result = exact_engine(isolation="process", mp_context="fork").execute(program(src), task(), street)
    assert result.status == "fallback_used"
    assert result.trace.exception.startswith("WorkerDied")
    assert result.answer == (0, 0, 200, 100)


def test_unknown_isolation_mode():
    with pytest.raises(ValueError):
        exact_engine(isolation="vm")
