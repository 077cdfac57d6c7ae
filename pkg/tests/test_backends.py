from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from viperkit.backends import (BackendBinding, BackendError, BackendRegistry, DefaultBackend, ExactBackend,
                               NoisyExactBackend, RateLimitError, RemoteBackend, Request, Role, depth_raster,
                               dominant_object, ops_for_role, parse_lm_prompt)
from viperkit.scene import mcq_fact_key


def req(scene, role, text="", box=None, op=None):
    op = op or next(iter(sorted(ops_for_role(role))))
    return Request(role, op, scene, box or (0, 0, scene.width, scene.height), text)


class TestExact:
    def test_detect_by_name_synonym_and_attribute(self, street):
        ex = ExactBackend()
        assert [b for b, _ in ex.run(req(street, Role.OBJECT_DETECTOR, "car"))] == [(10, 10, 50, 40),
                                                                                     (120, 10, 190, 60)]
        assert [b for b, _ in ex.run(req(street, Role.OBJECT_DETECTOR, "automobile"))] == [(10, 10, 50, 40),
                                                                                            (120, 10, 190, 60)]
        assert [b for b, _ in ex.run(req(street, Role.OBJECT_DETECTOR, "blue car"))] == [(120, 10, 190, 60)]
        assert ex.run(req(street, Role.OBJECT_DETECTOR, "giraffe")) == []

    def test_detect_clips_to_region(self, street):
        out = ExactBackend().run(req(street, Role.OBJECT_DETECTOR, "car", box=(0, 0, 30, 100)))
        assert out == [((10, 10, 30, 40), 1.0)]

    def test_empty_phrase_is_an_error(self, street):
        with pytest.raises(BackendError):
            ExactBackend().run(req(street, Role.OBJECT_DETECTOR, "  "))

    def test_scorer_uses_dominant_object(self, street):
        ex = ExactBackend()
        car = (10, 10, 50, 40)
        assert ex.run(req(street, Role.IMAGE_TEXT_SCORER, "red car", car)) == 1.0
        assert ex.run(req(street, Role.IMAGE_TEXT_SCORER, "shiny", car)) == 1.0
        assert ex.run(req(street, Role.IMAGE_TEXT_SCORER, "blue car", car)) == 0.0
        assert dominant_object(street, (0, 0, 200, 100)).id == "b"  # largest area

    def test_depth_raster_painter_order(self, street):
        r = depth_raster(street, (0, 0, 60, 50))
        assert r.shape == (50, 60)
        assert r[10, 10] == 0.3 and r[0, 0] == 0.95
        assert (r == 0.3).sum() == 40 * 30

    def test_vqa(self, street):
        ex = ExactBackend()
        dog = (60, 50, 100, 90)
        assert ex.run(req(street, Role.VQA, "What is this?", dog)) == "a brown dog"
        assert ex.run(req(street, Role.VQA, "What color is it?", dog)) == "brown"
        assert ex.run(req(street, Role.VQA, "What is the weather like?")) == "sunny"
        assert ex.run(req(street, Role.VQA, "Why?")) == "unknown"

    def test_knowledge_lm(self, street):
        ex = ExactBackend()
        assert ex.run(Request(Role.KNOWLEDGE_LM, "llm_query", street, None, "What is the weather like?")) == "sunny"
        guesses = "Question: q\nGuesses:\n- one\n- two\nFinal answer:"
        assert ex.run(Request(Role.KNOWLEDGE_LM, "process_guesses", street, None, guesses)) == "two"

    def test_parse_lm_prompt(self):
        p = parse_lm_prompt("Intro\nQuestion: Why?\nOptions: a b | c\nAnswer:")
        assert p == {"question": "Why?", "options": ["a b", "c"], "guesses": None}
        assert parse_lm_prompt("plain question\n")["question"] == "plain question"

    def test_select_answer_prompt_lookup(self, clip):
        key = mcq_fact_key("What now?", ["x", "y"])
        from viperkit.scene import Scene, VideoScene
        f0 = clip.frames[0]
        video = VideoScene((Scene(f0.width, f0.height, facts={key: "y"}),) + clip.frames[1:])
        prompt = "Question: What now?\nOptions: x | y\nAnswer:"
        assert ExactBackend().run(Request(Role.KNOWLEDGE_LM, "select_answer", video, None, prompt)) == "y"


class TestDefaultAndNoisy:
    def test_default_reads_only_the_box(self, street):
        d = DefaultBackend()
        box = (5, 5, 25, 15)
        assert d.run(req(street, Role.OBJECT_DETECTOR, "anything", box)) == [(box, 1.0)]
        assert d.run(req(street, Role.IMAGE_TEXT_SCORER, "anything", box)) == 1.0
        assert np.all(d.run(req(street, Role.DEPTH_ESTIMATOR, "", box)) == 0.5)
        assert d.run(req(street, Role.VQA, "what?")) == ""

    def test_noisy_is_a_pure_function_of_seed_and_request(self, street):
        r = req(street, Role.OBJECT_DETECTOR, "car")
        a = NoisyExactBackend(seed=1, jitter=3, false_positive_rate=0.5)
        assert a.run(r) == NoisyExactBackend(seed=1, jitter=3, false_positive_rate=0.5).run(r)
        for box, _ in a.run(r):
            assert 0 <= box[0] < box[2] <= 200 and 0 <= box[1] < box[3] <= 100

    def test_noisy_drop_all(self, street):
        assert NoisyExactBackend(drop_rate=1.0).run(req(street, Role.OBJECT_DETECTOR, "car")) == []


class TestRegistry:
    def test_defaults_to_exact(self):
        reg = BackendRegistry()
        assert set(reg.kinds().values()) == {"exact"}

    def test_with_binding_changes_one_role(self):
        reg = BackendRegistry().with_binding(Role.VQA, "default")
        assert reg.kinds()["vqa"] == "default" and reg.kinds()["object_detector"] == "exact"

    def test_bad_kind(self):
        with pytest.raises(ValueError, match="unknown kind"):
            BackendBinding(Role.VQA, "magic")

    def test_remote_needs_endpoint(self):
        with pytest.raises(ValueError, match="endpoint"):
            BackendBinding(Role.VQA, "remote")


class _Service(BaseHTTPRequestHandler):
    scenes: dict = {}
    fail_first = 0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, self.headers.get("Authorization"), len(body["items"])))
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(429)
            self.end_headers()
            return
        items = []
        for it in body["items"]:
            scene = self.scenes[it["image"]]
            r = Request(Role(it["role"]), it["op"], scene, tuple(it["box"]), it["text"])
            if it["text"] == "explode":
                items.append({"ok": False, "error": "model failure"})
                continue
            res = ExactBackend().run(r)
            items.append({"ok": True, "result": [{"box": list(b), "score": s} for b, s in res]})
        data = json.dumps({"items": items}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def service(street):
    _Service.scenes = {street.digest: street}
    _Service.seen = []
    _Service.fail_first = 0
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Service)
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestRemote:
    def test_batch_round_trip(self, service, street, monkeypatch):
        monkeypatch.setenv("VIPERKIT_BACKEND_TOKEN", "s3cret")
        rb = RemoteBackend(Role.OBJECT_DETECTOR, service, backoff=0.01)
        out = rb.run_batch([req(street, Role.OBJECT_DETECTOR, "car"), req(street, Role.OBJECT_DETECTOR, "explode")])
        assert out[0] == ExactBackend().run(req(street, Role.OBJECT_DETECTOR, "car"))
        assert isinstance(out[1], BackendError)
        assert _Service.seen == [("/detect", "Bearer s3cret", 2)]

    def test_rate_limit_is_retried(self, service, street):
        _Service.fail_first = 1
        rb = RemoteBackend(Role.OBJECT_DETECTOR, service, retries=2, backoff=0.01)
        assert rb.run(req(street, Role.OBJECT_DETECTOR, "dog")) == [((60, 50, 100, 90), 1.0)]
        assert len(_Service.seen) == 2

    def test_rate_limit_exhausted(self, service, street):
        _Service.fail_first = 5
        rb = RemoteBackend(Role.OBJECT_DETECTOR, service, retries=1, backoff=0.01)
        with pytest.raises(RateLimitError):
            rb.run(req(street, Role.OBJECT_DETECTOR, "dog"))

    def test_unreachable(self, street):
        rb = RemoteBackend(Role.OBJECT_DETECTOR, "http://127.0.0.1:9", retries=0, timeout=1)
        with pytest.raises(BackendError):
            rb.run(req(street, Role.OBJECT_DETECTOR, "dog"))
