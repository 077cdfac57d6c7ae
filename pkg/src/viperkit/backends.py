"""Perception and knowledge backends.

Each runtime operation is served by one :class:`Role`. A role is bound to one
backend kind:

* ``exact`` answers from the synthetic scene's ground truth,
* ``noisy-exact`` is ``exact`` plus seeded detector noise,
* ``default`` returns a fixed uninformative value and never reads the scene
  (used for interventions),
* ``remote`` forwards batches to a model service over JSON/HTTP.

Backends receive batches (``run_batch``) so that the scheduler can coalesce
requests; each item yields either a result or an exception instance.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import random
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

from .geometry import Box, area, intersection
from .scene import (Scene, SceneObject, VideoScene, canonical_json, mcq_fact_key,
                    normalize_phrase, normalize_question, sha256_hex)

logger = logging.getLogger(__name__)

TOKEN_ENV = "VIPERKIT_BACKEND_TOKEN"
PROTOCOL_VERSION = 1

UNKNOWN_ANSWER = "unknown"


class Role(str, enum.Enum):
    OBJECT_DETECTOR = "object_detector"
    IMAGE_TEXT_SCORER = "image_text_scorer"
    DEPTH_ESTIMATOR = "depth_estimator"
    VQA = "vqa"
    KNOWLEDGE_LM = "knowledge_lm"

    def __str__(self) -> str:
        return self.value


ROLE_OF_OP = {
    "find": Role.OBJECT_DETECTOR,
    "exists": Role.OBJECT_DETECTOR,
    "verify_property": Role.IMAGE_TEXT_SCORER,
    "best_text_match": Role.IMAGE_TEXT_SCORER,
    "best_image_match": Role.IMAGE_TEXT_SCORER,
    "compute_depth": Role.DEPTH_ESTIMATOR,
    "simple_query": Role.VQA,
    "llm_query": Role.KNOWLEDGE_LM,
    "select_answer": Role.KNOWLEDGE_LM,
    "process_guesses": Role.KNOWLEDGE_LM,
}


def ops_for_role(role: Role) -> frozenset[str]:
    return frozenset(op for op, r in ROLE_OF_OP.items() if r == role)


class BackendError(RuntimeError):
    """A backend could not serve a request."""


class RateLimitError(BackendError):
    pass


@dataclass(frozen=True)
class Request:
    """One module call as seen by a backend.

    ``image`` is the scene behind the region (a frame for video patches), or the
    task input for knowledge-LM calls. ``box`` is the absolute region, ``text``
    the phrase/question/prompt.
    """

    role: Role
    op: str
    image: Scene | VideoScene | None
    box: Box | None = None
    text: str = ""
    frame: int | None = None

    @cached_property
    def digest(self) -> str:
        return sha256_hex(canonical_json(self.describe()))

    def describe(self) -> dict:
        return {
            "role": self.role.value,
            "op": self.op,
            "image": None if self.image is None else self.image.digest,
            "frame": self.frame,
            "box": None if self.box is None else list(self.box),
            "text": self.text,
        }


class Backend:
    kind = "abstract"

    def run(self, request: Request) -> Any:
        handler = getattr(self, "_" + request.role.value)
        return handler(request)

    def run_batch(self, requests: Sequence[Request]) -> list:
        out = []
        for req in requests:
            try:
                out.append(self.run(req))
            except Exception as exc:  # per-item failure travels to its ticket
                out.append(exc)
        return out


# -- exact --------------------------------------------------------------

def dominant_object(scene: Scene, box: Box) -> SceneObject | None:
    """Object with the largest intersection with ``box``; ties go to list order."""
    best, best_area = None, 0
    for obj in scene.objects:
        inter = intersection(obj.box, box)
        a = area(inter) if inter else 0
        if a > best_area:
            best, best_area = obj, a
    return best


def phrase_matches(obj: SceneObject, phrase: str) -> bool:
    phrase = normalize_phrase(phrase)
    if phrase in obj.names:
        return True
    head, _, rest = phrase.partition(" ")
    return bool(rest) and rest in obj.names and head in obj.attributes


def text_matches(obj: SceneObject, text: str) -> bool:
    """Whether ``text`` describes ``obj``: an attribute, a name, or ``attribute name``."""
    text = normalize_phrase(text)
    if text in obj.attributes or text in obj.names:
        return True
    return any(text == f"{attr} {n}" for attr in obj.attributes for n in obj.names)


_FINAL_Q = re.compile(r"^question:\s*(.*)$", re.IGNORECASE)
_OPTIONS = re.compile(r"^options:\s*(.*)$", re.IGNORECASE)


def parse_lm_prompt(prompt: str) -> dict:
    """Pull the question, options and guesses out of a rendered prompt.

    Plain prompts (``llm_query``) are their own question: the last non-empty
    line is used.
    """
    lines = [ln.strip() for ln in prompt.splitlines()]
    question = options = None
    guesses: list[str] | None = None
    for i, ln in enumerate(lines):
        m = _FINAL_Q.match(ln)
        if m:
            question = m.group(1)
        m = _OPTIONS.match(ln)
        if m:
            options = [o.strip() for o in m.group(1).split(" | ")]
        if ln.lower() == "guesses:":
            guesses = []
            for g in lines[i + 1:]:
                if not g.startswith("- "):
                    break
                guesses.append(g[2:])
    if question is None:
        nonempty = [ln for ln in lines if ln]
        question = nonempty[-1] if nonempty else ""
    return {"question": question, "options": options, "guesses": guesses}


class ExactBackend(Backend):
    """Answers straight from the scene ground truth."""

    kind = "exact"

    def _object_detector(self, req: Request) -> list[tuple[Box, float]]:
        if not req.text.strip():
            raise BackendError("detect: empty phrase")
        out = []
        for obj in req.image.objects:
            if phrase_matches(obj, req.text):
                clipped = intersection(obj.box, req.box)
                if clipped is not None:
                    out.append((clipped, 1.0))
        return out

    def _image_text_scorer(self, req: Request) -> float:
        obj = dominant_object(req.image, req.box)
        return 1.0 if obj is not None and text_matches(obj, req.text) else 0.0

    def _depth_estimator(self, req: Request) -> np.ndarray:
        return depth_raster(req.image, req.box)

    def _vqa(self, req: Request) -> str:
        scene: Scene = req.image
        q = normalize_question(req.text)
        obj = dominant_object(scene, req.box)
        if q in ("what is this", "what is that"):
            return obj.caption if obj is not None else scene.caption
        if q.startswith("what color") or q.startswith("what colour"):
            if obj is not None and obj.color():
                return obj.color()
        return scene.fact_index.get(q, UNKNOWN_ANSWER)

    def _knowledge_lm(self, req: Request) -> str:
        parsed = parse_lm_prompt(req.text)
        if parsed["guesses"] is not None:
            return parsed["guesses"][-1] if parsed["guesses"] else UNKNOWN_ANSWER
        facts = req.image.fact_index if req.image is not None else {}
        if parsed["options"] is not None:
            key = mcq_fact_key(parsed["question"], parsed["options"])
            if key in facts:
                return facts[key]
        return facts.get(normalize_question(parsed["question"]), UNKNOWN_ANSWER)


def depth_raster(scene: Scene, box: Box) -> np.ndarray:
    """Per-pixel depth over ``box``; later objects paint over earlier ones.

    Row ``r`` covers ``y = lower + r`` and column ``c`` covers ``x = left + c``.
    """
    left, lower, right, upper = box
    raster = np.full((upper - lower, right - left), scene.background_depth, dtype=np.float64)
    for obj in scene.objects:
        inter = intersection(obj.box, box)
        if inter is None:
            continue
        l, lo, r, up = inter
        raster[lo - lower:up - lower, l - left:r - left] = obj.depth
    return raster


# -- default --------------------------------------------------------------

DEFAULT_DEPTH = 0.5


class DefaultBackend(Backend):
    """Uninformative constants. Only the request's region box is read."""

    kind = "default"

    def _object_detector(self, req: Request):
        return [(tuple(req.box), 1.0)]

    def _image_text_scorer(self, req: Request) -> float:
        return 1.0

    def _depth_estimator(self, req: Request) -> np.ndarray:
        left, lower, right, upper = req.box
        return np.full((upper - lower, right - left), DEFAULT_DEPTH)

    def _vqa(self, req: Request) -> str:
        return ""

    def _knowledge_lm(self, req: Request) -> str:
        return ""


# -- noisy exact ------------------------------------------------------------

class NoisyExactBackend(ExactBackend):
    """Exact answers with seeded detector jitter, drops and false positives.

    The noise is a pure function of ``(seed, request digest)``.
    """

    kind = "noisy-exact"

    def __init__(self, seed: int = 0, jitter: int = 2, drop_rate: float = 0.0,
                 false_positive_rate: float = 0.0):
        self.seed = seed
        self.jitter = jitter
        self.drop_rate = drop_rate
        self.false_positive_rate = false_positive_rate

    def _rng(self, req: Request) -> random.Random:
        return random.Random(f"{self.seed}:{req.digest}")

    def _object_detector(self, req: Request):
        rng = self._rng(req)
        rl, rlo, rr, rup = req.box
        out = []
        for box, score in super()._object_detector(req):
            if rng.random() < self.drop_rate:
                continue
            j = [rng.randint(-self.jitter, self.jitter) for _ in range(4)]
            l = min(max(box[0] + j[0], rl), rr - 1)
            lo = min(max(box[1] + j[1], rlo), rup - 1)
            r = max(min(box[2] + j[2], rr), l + 1)
            up = max(min(box[3] + j[3], rup), lo + 1)
            out.append(((l, lo, r, up), score))
        if rng.random() < self.false_positive_rate:
            w = rng.randint(1, rr - rl)
            h = rng.randint(1, rup - rlo)
            l = rng.randint(rl, rr - w)
            lo = rng.randint(rlo, rup - h)
            out.append(((l, lo, l + w, lo + h), 0.5))
        return out


# -- remote ---------------------------------------------------------------

ROLE_ENDPOINT = {
    Role.OBJECT_DETECTOR: "detect",
    Role.IMAGE_TEXT_SCORER: "score",
    Role.DEPTH_ESTIMATOR: "depth",
    Role.VQA: "vqa",
    Role.KNOWLEDGE_LM: "complete",
}


def encode_remote_item(req: Request) -> dict:
    item = req.describe()
    if req.image is not None:
        item["size"] = [req.image.width, req.image.height]
    return item


def decode_remote_result(role: Role, value: Any) -> Any:
    if role is Role.OBJECT_DETECTOR:
        return [(tuple(int(v) for v in d["box"]), float(d["score"])) for d in value]
    if role is Role.IMAGE_TEXT_SCORER:
        return float(value)
    if role is Role.DEPTH_ESTIMATOR:
        return np.asarray(value, dtype=np.float64)
    return str(value)


class RemoteBackend(Backend):
    """Batch client for the JSON/HTTP model-service protocol (see docs/)."""

    kind = "remote"

    def __init__(self, role: Role, endpoint: str, timeout: float = 30.0, retries: int = 2,
                 max_in_flight: int = 4, backoff: float = 0.5):
        self.role = role
        self.url = endpoint.rstrip("/") + "/" + ROLE_ENDPOINT[role]
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        data = json.dumps(body).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
            try:
                with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                last = RateLimitError(f"{self.url}: rate limited") if exc.code == 429 else \
                    BackendError(f"{self.url}: HTTP {exc.code}")
                if exc.code != 429 and exc.code < 500:
                    raise last from None
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = BackendError(f"{self.url}: {exc}")
            if attempt < self.retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise last

    def run_batch(self, requests: Sequence[Request]) -> list:
        body = {"schema_version": PROTOCOL_VERSION, "role": self.role.value,
                "items": [encode_remote_item(r) for r in requests]}
        reply = self._post(body)
        items = reply.get("items")
        if not isinstance(items, list) or len(items) != len(requests):
            raise BackendError(f"{self.url}: expected {len(requests)} items in reply")
        out = []
        for item in items:
            if item.get("ok"):
                try:
                    out.append(decode_remote_result(self.role, item["result"]))
                except (KeyError, TypeError, ValueError) as exc:
                    out.append(BackendError(f"{self.url}: malformed result ({exc})"))
            else:
                out.append(BackendError(f"{self.url}: {item.get('error', 'unknown error')}"))
        return out

    def run(self, request: Request) -> Any:
        result = self.run_batch([request])[0]
        if isinstance(result, Exception):
            raise result
        return result


# -- registry ----------------------------------------------------------------

BACKEND_KINDS = ("exact", "default", "remote", "noisy-exact")


@dataclass(frozen=True)
class BackendBinding:
    role: Role
    kind: str = "exact"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backends.{self.role.value}.kind: unknown kind {self.kind!r}")
        if self.kind == "remote" and "endpoint" not in self.params:
            raise ValueError(f"backends.{self.role.value}.endpoint: required for remote kind")


def build_backend(binding: BackendBinding) -> Backend:
    p = dict(binding.params)
    if binding.kind == "exact":
        return ExactBackend()
    if binding.kind == "default":
        return DefaultBackend()
    if binding.kind == "noisy-exact":
        return NoisyExactBackend(**p)
    return RemoteBackend(binding.role, **p)


class BackendRegistry:
    """One backend per role."""

    def __init__(self, bindings: Mapping[Role, BackendBinding] | None = None):
        bindings = dict(bindings or {})
        self.bindings = {role: bindings.get(role, BackendBinding(role)) for role in Role}
        self._backends = {role: build_backend(b) for role, b in self.bindings.items()}

    @classmethod
    def uniform(cls, kind: str, **params) -> "BackendRegistry":
        return cls({role: BackendBinding(role, kind, params) for role in Role})

    def with_binding(self, role: Role, kind: str, **params) -> "BackendRegistry":
        bindings = dict(self.bindings)
        bindings[role] = BackendBinding(role, kind, params)
        return BackendRegistry(bindings)

    def backend(self, role: Role) -> Backend:
        return self._backends[role]

    def kinds(self) -> dict[str, str]:
        return {role.value: b.kind for role, b in self.bindings.items()}
