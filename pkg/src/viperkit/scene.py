"""Synthetic ground-truth worlds.

A :class:`Scene` is a list of labelled boxes with attributes, depths and
captions plus a small fact table. Scenes stand in for real images: the exact
perception backends answer from them, and :func:`oracle_answer` evaluates a
closed grammar of queries against them by brute force so that program
results can be checked independently of the runtime.

Coordinates have their origin at the bottom-left corner, ``y`` grows upward,
and boxes are ``(left, lower, right, upper)`` in integer pixels.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

Box = tuple[int, int, int, int]

COLORS = ("red", "blue", "green", "white", "black", "yellow", "brown", "pink")


class SceneError(ValueError):
    """A scene file or scene value is malformed or violates an invariant."""


class _Unanswerable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNANSWERABLE"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Unanswerable, ())


UNANSWERABLE = _Unanswerable()


def canonical_json(value: Any) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


_PUNCT = re.compile(r"[^\w\s']")
_SPACE = re.compile(r"\s+")


def normalize_question(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace. Used for fact keys."""
    text = _PUNCT.sub(" ", text.lower())
    return _SPACE.sub(" ", text).strip()


def normalize_phrase(text: str) -> str:
    """Noun-phrase normalization: lowercase, collapse spaces, drop a leading article."""
    text = _SPACE.sub(" ", text.lower()).strip()
    for article in ("the ", "a ", "an "):
        if text.startswith(article):
            return text[len(article):]
    return text


def mcq_fact_key(question: str, options: Sequence[str]) -> str:
    """Fact-table key for a multiple-choice question; insensitive to option order."""
    opts = " | ".join(sorted(normalize_question(o) for o in options))
    return f"{normalize_question(question)} || {opts}"


def normalize_fact_key(key: str) -> str:
    if " || " in key:
        question, opts = key.split(" || ", 1)
        return mcq_fact_key(question, opts.split(" | "))
    return normalize_question(key)


@dataclass(frozen=True)
class SceneObject:
    id: str
    name: str
    box: Box
    depth: float
    synonyms: tuple[str, ...] = ()
    attributes: frozenset[str] = frozenset()
    caption: str = ""

    @property
    def names(self) -> tuple[str, ...]:
        return (self.name, *self.synonyms)

    @property
    def horizontal_center(self) -> float:
        return (self.box[0] + self.box[2]) / 2

    def color(self) -> str | None:
        colors = sorted(a for a in self.attributes if a in COLORS)
        return colors[0] if colors else None


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...] = ()
    background_depth: float = 0.5
    facts: Mapping[str, str] = field(default_factory=dict)
    caption: str = ""

    def __post_init__(self):
        check_scene(self)

    @cached_property
    def digest(self) -> str:
        return sha256_hex(canonical_json(scene_to_dict(self)))

    @cached_property
    def fact_index(self) -> dict[str, str]:
        return {normalize_fact_key(k): v for k, v in self.facts.items()}


@dataclass(frozen=True)
class VideoScene:
    frames: tuple[Scene, ...]
    frame_rate_hint: float = 1.0

    def __post_init__(self):
        if not self.frames:
            raise SceneError("frames: a video needs at least one frame")
        w, h = self.frames[0].width, self.frames[0].height
        for i, fr in enumerate(self.frames):
            if (fr.width, fr.height) != (w, h):
                raise SceneError(f"frames[{i}]: size {fr.width}x{fr.height} differs from frame 0 ({w}x{h})")

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @cached_property
    def digest(self) -> str:
        return sha256_hex(canonical_json(video_to_dict(self)))

    @cached_property
    def fact_index(self) -> dict[str, str]:
        # earlier frames win on key collisions
        merged: dict[str, str] = {}
        for fr in reversed(self.frames):
            merged.update(fr.fact_index)
        return merged


def check_scene(scene: Scene) -> None:
    if not isinstance(scene.width, int) or scene.width < 1:
        raise SceneError(f"width: must be an integer >= 1, got {scene.width!r}")
    if not isinstance(scene.height, int) or scene.height < 1:
        raise SceneError(f"height: must be an integer >= 1, got {scene.height!r}")
    if not 0 < scene.background_depth <= 1:
        raise SceneError(f"background_depth: must lie in (0, 1], got {scene.background_depth!r}")
    seen = set()
    for i, obj in enumerate(scene.objects):
        where = f"objects[{i}]"
        if obj.id in seen:
            raise SceneError(f"{where}.id: duplicate id {obj.id!r}")
        seen.add(obj.id)
        if len(obj.box) != 4 or not all(isinstance(v, int) for v in obj.box):
            raise SceneError(f"{where}.box: expected four integers, got {obj.box!r}")
        left, lower, right, upper = obj.box
        if not 0 <= left < right <= scene.width:
            raise SceneError(f"{where}.box: need 0 <= left < right <= width={scene.width}, got {obj.box}")
        if not 0 <= lower < upper <= scene.height:
            raise SceneError(f"{where}.box: need 0 <= lower < upper <= height={scene.height}, got {obj.box}")
        if not 0 < obj.depth <= 1:
            raise SceneError(f"{where}.depth: must lie in (0, 1], got {obj.depth!r}")


# -- serialization -------------------------------------------------------

def object_to_dict(obj: SceneObject) -> dict:
    return {
        "id": obj.id,
        "name": obj.name,
        "synonyms": list(obj.synonyms),
        "box": list(obj.box),
        "attributes": sorted(obj.attributes),
        "depth": obj.depth,
        "caption": obj.caption,
    }


def scene_to_dict(scene: Scene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "background_depth": scene.background_depth,
        "caption": scene.caption,
        "facts": dict(scene.facts),
        "objects": [object_to_dict(o) for o in scene.objects],
    }


def video_to_dict(video: VideoScene) -> dict:
    return {"frames": [scene_to_dict(f) for f in video.frames], "frame_rate_hint": video.frame_rate_hint}


def _require(data: Mapping, key: str, kind, where: str):
    if key not in data:
        raise SceneError(f"{where}{key}: missing field")
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise SceneError(f"{where}{key}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def object_from_dict(data: Mapping, where: str = "") -> SceneObject:
    if not isinstance(data, Mapping):
        raise SceneError(f"{where}: expected an object")
    box = _require(data, "box", list, where + ".")
    if len(box) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
        raise SceneError(f"{where}.box: expected [left, lower, right, upper] integers, got {box!r}")
    return SceneObject(
        id=_require(data, "id", str, where + "."),
        name=_require(data, "name", str, where + "."),
        synonyms=tuple(data.get("synonyms", [])),
        box=tuple(box),
        attributes=frozenset(data.get("attributes", [])),
        depth=_require(data, "depth", float, where + "."),
        caption=data.get("caption", ""),
    )


def scene_from_dict(data: Mapping) -> Scene:
    if not isinstance(data, Mapping):
        raise SceneError("scene: expected a JSON object")
    objects = _require(data, "objects", list, "")
    facts = _require(data, "facts", dict, "")
    return Scene(
        width=_require(data, "width", int, ""),
        height=_require(data, "height", int, ""),
        objects=tuple(object_from_dict(o, f"objects[{i}]") for i, o in enumerate(objects)),
        background_depth=_require(data, "background_depth", float, ""),
        facts={str(k): str(v) for k, v in facts.items()},
        caption=_require(data, "caption", str, ""),
    )


def video_from_dict(data: Mapping) -> VideoScene:
    frames = _require(data, "frames", list, "")
    out = []
    for i, fr in enumerate(frames):
        try:
            out.append(scene_from_dict(fr))
        except SceneError as exc:
            raise SceneError(f"frames[{i}].{exc}") from None
    return VideoScene(frames=tuple(out), frame_rate_hint=float(data.get("frame_rate_hint", 1.0)))


def _read_json(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: malformed JSON ({exc})") from None


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(_read_json(path))


def load_video(path: str | Path) -> VideoScene:
    return video_from_dict(_read_json(path))


def load_input(path: str | Path) -> Scene | VideoScene:
    """Load either a scene or a video file, telling them apart by the ``frames`` key."""
    data = _read_json(path)
    if isinstance(data, Mapping) and "frames" in data:
        return video_from_dict(data)
    return scene_from_dict(data)


def save_scene(scene: Scene | VideoScene, path: str | Path) -> None:
    data = video_to_dict(scene) if isinstance(scene, VideoScene) else scene_to_dict(scene)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- generation ----------------------------------------------------------

DEFAULT_VOCABULARY = {
    "cup": ["mug"],
    "chair": ["seat"],
    "car": ["automobile"],
    "dog": ["puppy"],
    "cat": ["kitten"],
    "bottle": [],
    "book": [],
    "lamp": [],
    "bear": [],
    "man": [],
    "woman": [],
    "backpack": ["bag"],
}

DEFAULT_EXTRA_ATTRIBUTES = ("striped", "shiny", "wooden", "small", "large", "old")

DEFAULT_FACT_POOL = {
    "What is the weather like?": ("sunny", "rainy", "cloudy", "snowy"),
    "What room is this?": ("kitchen", "bedroom", "office", "garage"),
    "What time of day is it?": ("morning", "evening", "night", "noon"),
    "What season is it?": ("summer", "winter", "spring", "autumn"),
}


@dataclass(frozen=True)
class GeneratorSpec:
    width: int = 640
    height: int = 480
    min_objects: int = 2
    max_objects: int = 6
    min_box: int = 20
    max_box: int = 160
    vocabulary: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_VOCABULARY))
    colors: Sequence[str] = COLORS
    extra_attributes: Sequence[str] = DEFAULT_EXTRA_ATTRIBUTES
    fact_pool: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_FACT_POOL))
    facts_per_scene: int = 2
    placement_attempts: int = 200

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "GeneratorSpec":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"scene_generator: unknown keys {sorted(unknown)}")
        return cls(**data)

    def check(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SceneError("scene_generator: width and height must be >= 1")
        if self.min_box < 1 or self.min_box > self.max_box:
            raise SceneError("scene_generator: need 1 <= min_box <= max_box")
        if self.min_box > min(self.width, self.height):
            raise SceneError(
                f"scene_generator: min_box={self.min_box} exceeds canvas {self.width}x{self.height}")
        if self.min_objects < 0 or self.min_objects > self.max_objects:
            raise SceneError("scene_generator: need 0 <= min_objects <= max_objects")
        if not self.vocabulary:
            raise SceneError("scene_generator: vocabulary is empty")
        if not self.colors:
            raise SceneError("scene_generator: colors is empty")
        if self.facts_per_scene > len(self.fact_pool):
            raise SceneError("scene_generator: facts_per_scene exceeds the fact pool size")


def _disjoint(a: Box, b: Box) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _random_scene(rng: random.Random, spec: GeneratorSpec) -> Scene:
    n_objects = rng.randint(spec.min_objects, spec.max_objects)
    names = sorted(spec.vocabulary)
    objects: list[SceneObject] = []
    used_depths: set[float] = set()
    for k in range(n_objects):
        max_w = min(spec.max_box, spec.width)
        max_h = min(spec.max_box, spec.height)
        box = None
        for _ in range(spec.placement_attempts):
            w = rng.randint(spec.min_box, max_w)
            h = rng.randint(spec.min_box, max_h)
            left = rng.randint(0, spec.width - w)
            lower = rng.randint(0, spec.height - h)
            cand = (left, lower, left + w, lower + h)
            if all(_disjoint(cand, o.box) for o in objects):
                box = cand
                break
        if box is None:
            break
        name = rng.choice(names)
        color = rng.choice(list(spec.colors))
        attrs = {color}
        if spec.extra_attributes and rng.random() < 0.5:
            attrs.add(rng.choice(list(spec.extra_attributes)))
        depth = round(rng.uniform(0.05, 0.95), 4)
        while depth in used_depths:
            depth = round(rng.uniform(0.05, 0.95), 4)
        used_depths.add(depth)
        objects.append(SceneObject(
            id=f"o{k}",
            name=name,
            synonyms=tuple(spec.vocabulary[name]),
            box=box,
            attributes=frozenset(attrs),
            depth=depth,
            caption=f"a {color} {name}",
        ))
    questions = sorted(spec.fact_pool)
    facts = {q: rng.choice(list(spec.fact_pool[q])) for q in rng.sample(questions, spec.facts_per_scene)}
    background = round(rng.uniform(0.9, 1.0), 4)
    caption = "a scene with " + ", ".join(o.caption for o in objects) if objects else "an empty scene"
    return Scene(spec.width, spec.height, tuple(objects), background, facts, caption)


def generate_scenes(seed: int, count: int, spec: GeneratorSpec | None = None) -> list[Scene]:
    """Deterministically generate ``count`` scenes with pairwise-disjoint boxes."""
    spec = spec or GeneratorSpec()
    if count < 1:
        raise SceneError(f"count: must be >= 1, got {count}")
    spec.check()
    rng = random.Random(seed)
    return [_random_scene(rng, spec) for _ in range(count)]


# -- brute-force oracle ----------------------------------------------------

_SIDE = re.compile(r"^(?P<np>.+?) on the (?P<side>left|right)$")
_DEPTH = re.compile(r"^(?P<np>.+?) (?:at|in) the (?P<side>front|back)$")
_EXISTS = re.compile(r"^is there an? (?P<np>.+)$")
_COUNT = re.compile(r"^how many (?P<np>.+) are there$")
_COLOR = re.compile(r"^what colou?r is (?P<np>.+)$")
_VERIFY = re.compile(r"^is (?P<np>.+) (?P<attr>\S+)$")


def _match_phrase(scene: Scene, phrase: str) -> list[SceneObject] | None:
    """Objects matching ``phrase`` as ``name`` or ``attr name``; None if no vocabulary word fits."""
    phrase = normalize_phrase(phrase)
    vocab = {n for o in scene.objects for n in o.names}
    hits = [o for o in scene.objects if phrase in o.names]
    if hits or phrase in vocab:
        return hits
    head, _, rest = phrase.partition(" ")
    if rest:
        return [o for o in scene.objects if rest in o.names and head in o.attributes]
    return []


def _ground(scene: Scene, query: str):
    text = normalize_question(query)
    for pattern, key in ((_SIDE, "h"), (_DEPTH, "d")):
        m = pattern.match(text)
        if m:
            cands = _match_phrase(scene, m["np"])
            if not cands:
                return UNANSWERABLE
            if key == "h":
                values = [o.horizontal_center for o in cands]
                best = min(values) if m["side"] == "left" else max(values)
            else:
                values = [o.depth for o in cands]
                best = min(values) if m["side"] == "front" else max(values)
            winners = [o for o, v in zip(cands, values) if v == best]
            return winners[0].box if len(winners) == 1 else UNANSWERABLE
    cands = _match_phrase(scene, text)
    if cands and len(cands) == 1:
        return cands[0].box
    return UNANSWERABLE


def _qa(scene: Scene, query: str):
    text = normalize_question(query)
    m = _EXISTS.match(text)
    if m:
        return "yes" if _match_phrase(scene, m["np"]) else "no"
    m = _COUNT.match(text)
    if m:
        phrase = normalize_phrase(m["np"])
        if phrase.endswith("s") and not any(phrase in o.names for o in scene.objects):
            phrase = phrase[:-1]  # "how many cups", plural by a trailing s only
        return str(len(_match_phrase(scene, phrase)))
    m = _COLOR.match(text)
    if m:
        cands = _match_phrase(scene, m["np"])
        if len(cands) == 1 and cands[0].color():
            return cands[0].color()
        return UNANSWERABLE
    m = _VERIFY.match(text)
    if m:
        cands = _match_phrase(scene, m["np"])
        if len(cands) == 1:
            return "yes" if m["attr"] in cands[0].attributes else "no"
        # fall through: may still be a stored fact
    if text in scene.fact_index:
        return scene.fact_index[text]
    return UNANSWERABLE


def oracle_answer(scene_or_video: Scene | VideoScene, task) -> Any:
    """Ground truth for ``task`` by exhaustive search over the scene.

    Returns a box for grounding, a string for QA, the stored option for
    multiple choice, or :data:`UNANSWERABLE` when the query is outside the
    grammar or has no unique answer.
    """
    kind = task.kind
    if kind == "video_mcq":
        truth = task.ground_truth
        return truth if isinstance(truth, str) and truth in task.options else UNANSWERABLE
    if not isinstance(scene_or_video, Scene):
        return UNANSWERABLE
    if kind == "grounding":
        return _ground(scene_or_video, task.query)
    if kind == "image_qa":
        return _qa(scene_or_video, task.query)
    if kind == "knowledge_qa":
        return scene_or_video.fact_index.get(normalize_question(task.query), UNANSWERABLE)
    return UNANSWERABLE
