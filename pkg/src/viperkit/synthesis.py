"""Prompt construction and program generation.

The prompt is the API rendered as stubs (signatures and docstrings, no
bodies) followed by the preset's usage examples, optional context as a
comment, the query as a comment, and the ``execute_command`` signature for
the generator to complete.

Three generator clients are provided: a content-addressed replay store (the
offline test vehicle), a fixed one-line template per task kind, and a remote
completion service.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import api_spec
from .api_spec import ENTRIES, ENTRY_BY_NAME, IMAGE_PATCH, VIDEO_SEGMENT, ApiEntry
from .scene import sha256_hex

logger = logging.getLogger(__name__)

TASK_KINDS = ("grounding", "image_qa", "knowledge_qa", "video_mcq")
LLM_TOKEN_ENV = "VIPERKIT_LLM_TOKEN"

SIGNATURES = {
    "grounding": "def execute_command(image) -> ImagePatch:",
    "image_qa": "def execute_command(image) -> str:",
    "knowledge_qa": "def execute_command(image) -> str:",
    "video_mcq": "def execute_command(video, possible_answers, question) -> [str, dict]:",
}


class PromptConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class ReplayMiss(GenerationError):
    """The replay store has no program for a prompt digest."""

    def __init__(self, digest: str, task_id: str = ""):
        super().__init__(f"replay store has no program for prompt {digest}"
                         + (f" (task {task_id})" if task_id else ""))
        self.digest = digest
        self.task_id = task_id


@dataclass(frozen=True)
class PromptConfig:
    task_kind: str
    api_subset: tuple[str, ...]
    usage_examples: tuple[tuple[str, str], ...] = ()
    context: str | None = None
    signature: str | None = None
    name: str = "custom"

    def __post_init__(self):
        from .validator import extract_api_usage

        if self.task_kind not in TASK_KINDS:
            raise PromptConfigError(f"task_kind: unknown kind {self.task_kind!r}")
        unknown = [n for n in self.api_subset if n not in ENTRY_BY_NAME]
        if unknown:
            raise PromptConfigError(f"api_subset: unknown operations {unknown}")
        for query, source in self.usage_examples:
            stray = extract_api_usage(source) - set(self.api_subset)
            if stray:
                raise PromptConfigError(f"usage example {query!r} uses {sorted(stray)} outside api_subset")

    @property
    def resolved_signature(self) -> str:
        return self.signature or SIGNATURES[self.task_kind]

    def with_context(self, context: str | None) -> "PromptConfig":
        return PromptConfig(self.task_kind, self.api_subset, self.usage_examples, context,
                            self.signature, self.name)


def _example(source: str) -> tuple[str, str]:
    return api_spec.split_example(source)


# The video usage example calls frame(); the runtime has no
# ImagePatch(segment, index) constructor.
_NEXTQA_USAGE = api_spec.NEXTQA_EXAMPLE.replace("ImagePatch(video_segment, -1)", "frame(video_segment, -1)")

PRESETS: dict[str, PromptConfig] = {
    "refcoco": PromptConfig(
        "grounding",
        ("find", "exists", "verify_property", "compute_depth", "crop", "overlaps_with",
         "best_image_match", "distance"),
        (_example(api_spec.REFCOCO_EXAMPLE),),
        name="refcoco",
    ),
    "gqa": PromptConfig(
        "image_qa",
        ("find", "exists", "verify_property", "best_text_match", "simple_query", "compute_depth",
         "crop", "overlaps_with", "best_image_match", "distance", "bool_to_yesno"),
        (_example(api_spec.GQA_EXAMPLE),),
        name="gqa",
    ),
    "okvqa": PromptConfig(
        "knowledge_qa",
        ("simple_query", "llm_query", "process_guesses"),
        (_example(api_spec.OKVQA_EXAMPLE),),
        name="okvqa",
    ),
    "nextqa": PromptConfig(
        "video_mcq",
        ("find", "exists", "best_text_match", "simple_query", "best_image_match",
         "frame_iterator", "trim", "select_answer", "frame"),
        (_example(_NEXTQA_USAGE),),
        name="nextqa",
    ),
}
PRESETS["full"] = PromptConfig("image_qa", api_spec.OPERATION_NAMES, name="full")

DEFAULT_PRESET_FOR_KIND = {"grounding": "refcoco", "image_qa": "gqa", "knowledge_qa": "okvqa",
                           "video_mcq": "nextqa"}


def get_preset(name: str) -> PromptConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise PromptConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- rendering ------------------------------------------------------------------

def _indent(text: str, prefix: str) -> str:
    return "\n".join(prefix + ln if ln else ln for ln in text.splitlines())


def _docstring(doc: str, examples: Sequence[str], indent: str) -> str:
    parts = [doc]
    if examples:
        parts.append("\nExamples\n--------")
        for ex in examples:
            parts.append("\n".join(">>> " + ln for ln in ex.strip("\n").splitlines()))
    body = "\n".join(parts)
    return _indent('"""' + body + '\n"""', indent)


def _usable_examples(entry: ApiEntry, subset: set[str]) -> list[str]:
    from .validator import extract_api_usage

    return [ex for ex in entry.examples if extract_api_usage(ex) <= subset]


def _render_entry(entry: ApiEntry, subset: set[str], indent: str) -> str:
    head = _indent(entry.signature, indent)
    doc = _docstring(entry.doc, _usable_examples(entry, subset), indent + "    ")
    return head + "\n" + doc + "\n"


def render_api(api_subset: Sequence[str]) -> str:
    """API stubs for the given operations, in canonical order, bodies omitted."""
    subset = set(api_subset)
    blocks = []
    methods = [e for e in ENTRIES if e.owner == IMAGE_PATCH and e.name in subset]
    blocks.append("class ImagePatch:\n" + _docstring(api_spec.IMAGE_PATCH_DOC, (), "    ") + "\n\n"
                  + "\n".join(_render_entry(e, subset, "    ")
                              for e in [api_spec.IMAGE_PATCH_INIT, *methods]))
    for e in ENTRIES:
        if e.owner is None and e.name in subset:
            blocks.append(_render_entry(e, subset, ""))
    seg = [e for e in ENTRIES if e.owner == VIDEO_SEGMENT and e.name in subset]
    if seg:
        blocks.append("class VideoSegment:\n" + _docstring(api_spec.VIDEO_SEGMENT_DOC, (), "    ") + "\n\n"
                      + "\n".join(_render_entry(e, subset, "    ")
                                  for e in [api_spec.VIDEO_SEGMENT_INIT, *seg]))
    return "\n\n".join(blocks)


def build_prompt(config: PromptConfig, query: str, options: Sequence[str] | None = None) -> str:
    if not query or not query.strip():
        raise PromptConfigError("query is empty")
    parts = [render_api(config.api_subset)]
    if config.usage_examples:
        parts.append("\n".join(f"# {q}\n{src.rstrip()}\n" for q, src in config.usage_examples))
    tail = []
    if config.context:
        tail.append(f"# Context: {' '.join(config.context.split())}")
    tail.append(f"# {' '.join(query.split())}")
    if config.task_kind == "video_mcq" and options is not None:
        tail.append(f"# possible answers: {list(options)!r}")
    tail.append(config.resolved_signature)
    parts.append("\n".join(tail))
    return "\n\n".join(parts) + "\n"


def cache_key(prompt: str) -> str:
    """Lowercase hex SHA-256 of the UTF-8 prompt."""
    return sha256_hex(prompt.encode("utf-8"))


# -- programs and clients -----------------------------------------------------------

@dataclass
class Program:
    task_id: str
    source: str
    generator: str
    prompt_digest: str
    validation: str = "pending"
    reason: str = ""
    api_calls_used: frozenset[str] = field(default_factory=frozenset)

    @property
    def source_digest(self) -> str:
        return sha256_hex(self.source.encode("utf-8"))


def truncate_completion(text: str) -> str:
    """Keep text up to the end of the first top-level function definition."""
    lines = text.splitlines()
    out: list[str] = []
    in_def = False
    for ln in lines:
        if not in_def:
            if ln.startswith("def "):
                in_def = True
                out.append(ln)
            continue
        if ln.strip() and not ln[0].isspace():
            break
        out.append(ln)
    while out and not out[-1].strip():
        out.pop()
    return "\n".join(out) + "\n" if out else ""


class ReplayStore:
    """Directory of ``<digest>.src`` programs plus ``index.json`` (task id -> digest)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        index = self.root / "index.json"
        self.index: dict[str, str] = json.loads(index.read_text()) if index.exists() else {}

    def path_for(self, digest: str) -> Path:
        return self.root / f"{digest}.src"

    def get(self, digest: str) -> str | None:
        p = self.path_for(digest)
        return p.read_text(encoding="utf-8") if p.exists() else None

    def put(self, task_id: str, prompt: str, source: str) -> str:
        digest = cache_key(prompt)
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            self.path_for(digest).write_text(source, encoding="utf-8")
            self.index[task_id] = digest
        return digest

    def flush(self) -> None:
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / "index.json").write_text(json.dumps(self.index, indent=1, sort_keys=True) + "\n")


class ReplayClient:
    name = "replay"

    def __init__(self, store: ReplayStore | str | Path):
        self.store = store if isinstance(store, ReplayStore) else ReplayStore(store)

    def complete(self, prompt: str, task=None) -> str:
        digest = cache_key(prompt)
        source = self.store.get(digest)
        if source is None:
            raise ReplayMiss(digest, getattr(task, "id", ""))
        return source


def template_program(kind: str, query: str = "") -> str:
    """One-statement program that hands the query straight to a module."""
    if kind == "grounding":
        return f"def execute_command(image) -> ImagePatch:\n    return ImagePatch(image).find({query!r})\n"
    if kind == "video_mcq":
        return ("def execute_command(video, possible_answers, question) -> str:\n"
                "    return VideoSegment(video).select_answer({}, question, possible_answers)\n")
    return f"def execute_command(image) -> str:\n    return ImagePatch(image).simple_query({query!r})\n"


class TemplateClient:
    name = "template"

    def complete(self, prompt: str, task=None) -> str:
        if task is None:
            raise GenerationError("template client needs the task")
        return template_program(task.kind, task.query)


class RemoteClient:
    """Completion service: POST ``{prompt, max_tokens, temperature, stop}`` -> ``{completion}``."""

    name = "remote"

    def __init__(self, endpoint: str, max_tokens: int = 512, timeout: float = 60.0,
                 stop: Sequence[str] = ("\n\n\n", "\n# "), max_in_flight: int = 4):
        self.endpoint = endpoint
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.stop = list(stop)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, prompt: str, task=None) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": self.max_tokens, "temperature": 0,
                           "stop": self.stop}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(LLM_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise GenerationError(f"{self.endpoint}: {exc}") from None
        completion = reply.get("completion")
        if not isinstance(completion, str):
            raise GenerationError(f"{self.endpoint}: reply has no completion")
        if not completion.lstrip().startswith("def "):
            signature = prompt.rstrip("\n").splitlines()[-1]
            completion = signature + "\n" + completion
        return truncate_completion(completion)


def generate(prompt: str, client, task_id: str = "", task=None) -> Program:
    if not prompt:
        raise GenerationError("prompt is empty")
    source = client.complete(prompt, task)
    return Program(task_id=task_id, source=source, generator=client.name, prompt_digest=cache_key(prompt))
