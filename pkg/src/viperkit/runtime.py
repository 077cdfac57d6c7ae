"""Image-patch and video-segment runtime exposed to generated programs.

:class:`PatchRef` and :class:`SegmentRef` are immutable values holding
absolute coordinates. Pure geometry (``crop``, ``overlaps_with``,
``distance``, ``trim`` ...) lives at module level; anything that needs a model
goes through :class:`Runtime`, which turns the call into a backend
:class:`~viperkit.backends.Request` and hands it to a dispatcher.

Generated programs never see these types directly. They use the
``ImagePatch``/``VideoSegment`` classes returned by :func:`program_namespace`,
thin wrappers bound to one runtime.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from . import geometry
from .backends import Request, Role
from .scene import Scene, VideoScene

DEFAULT_VERIFY_THRESHOLD = 0.6
DEFAULT_QUESTION = "What is this?"


class RuntimeContractError(ValueError):
    """An API operation was called outside its preconditions."""


class DegenerateRegionError(RuntimeContractError):
    """A crop or trim produced an empty region."""


@dataclass(frozen=True)
class PatchRef:
    image: Scene
    left: int
    lower: int
    right: int
    upper: int
    frame_index: int | None = None

    def __post_init__(self):
        if not (0 <= self.left < self.right <= self.image.width
                and 0 <= self.lower < self.upper <= self.image.height):
            raise DegenerateRegionError(
                f"patch {self.box} is empty or outside the {self.image.width}x{self.image.height} image")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.left, self.lower, self.right, self.upper)

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.upper - self.lower

    @property
    def horizontal_center(self) -> float:
        return (self.left + self.right) / 2

    @property
    def vertical_center(self) -> float:
        return (self.lower + self.upper) / 2


def full_patch(image: Scene, frame_index: int | None = None) -> PatchRef:
    return PatchRef(image, 0, 0, image.width, image.height, frame_index)


@dataclass(frozen=True)
class SegmentRef:
    video: VideoScene
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end <= len(self.video.frames):
            raise DegenerateRegionError(
                f"segment [{self.start}, {self.end}) is empty or outside a {len(self.video.frames)}-frame video")

    @property
    def num_frames(self) -> int:
        return self.end - self.start


def full_segment(video: VideoScene) -> SegmentRef:
    return SegmentRef(video, 0, len(video.frames))


# -- pure geometry ------------------------------------------------------------

def crop(patch: PatchRef, left: int, lower: int, right: int, upper: int) -> PatchRef:
    """Sub-patch from patch-relative coordinates, stored absolute and clamped to the parent.

    Keeping boxes absolute means nested crops, distances and traces all share
    one frame of reference.
    """
    l = min(max(patch.left + int(left), patch.left), patch.right)
    lo = min(max(patch.lower + int(lower), patch.lower), patch.upper)
    r = min(max(patch.left + int(right), patch.left), patch.right)
    up = min(max(patch.lower + int(upper), patch.lower), patch.upper)
    if l >= r or lo >= up:
        raise DegenerateRegionError(f"crop ({left}, {lower}, {right}, {upper}) of {patch.box} is empty")
    return PatchRef(patch.image, l, lo, r, up, patch.frame_index)


def overlaps_with(patch: PatchRef, left: int, lower: int, right: int, upper: int) -> bool:
    return patch.left <= right and patch.right >= left and patch.lower <= upper and patch.upper >= lower


def distance(a: PatchRef, b: PatchRef) -> float:
    """Negative IoU when the patches overlap with positive area, else the edge gap."""
    if a.image is not b.image and (a.image.digest, a.frame_index) != (b.image.digest, b.frame_index):
        raise RuntimeContractError("distance: patches come from different images")
    if geometry.intersection(a.box, b.box) is not None:
        return -geometry.iou(a.box, b.box)
    return geometry.edge_gap(a.box, b.box)


def bool_to_yesno(bool_answer: bool) -> str:
    return "yes" if bool_answer else "no"


def trim(seg: SegmentRef, start: int | None = None, end: int | None = None) -> SegmentRef:
    """Sub-segment from segment-relative frame indices, clamped, stored absolute."""
    if start is not None:
        start = max(start, 0)
    if end is not None:
        end = min(end, seg.num_frames)
    start = 0 if start is None else start
    end = seg.num_frames if end is None else end
    if start >= end:
        raise DegenerateRegionError(f"trim({start}, {end}) of a {seg.num_frames}-frame segment is empty")
    return SegmentRef(seg.video, seg.start + start, seg.start + end)


def frame(seg: SegmentRef, index: int) -> PatchRef:
    """Full-frame patch for a segment-relative index; negative indices count from the end."""
    n = seg.num_frames
    if not -n <= index < n:
        raise RuntimeContractError(f"frame index {index} outside a {n}-frame segment")
    absolute = seg.start + (index % n)
    return full_patch(seg.video.frames[absolute], absolute)


def frame_iterator(seg: SegmentRef) -> Iterator[PatchRef]:
    for i in range(seg.num_frames):
        yield full_patch(seg.video.frames[seg.start + i], seg.start + i)


# -- prompt assets -------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def load_prompt_asset(name: str) -> str:
    return resources.files("viperkit.assets.prompts").joinpath(name).read_text(encoding="utf-8")


SELECT_ANSWER_TEMPLATE = "select_answer.v1.txt"
PROCESS_GUESSES_TEMPLATE = "process_guesses.v1.txt"

_TOKEN = re.compile(r"[a-z0-9]+")
OVERLAP_STOPWORDS = frozenset({"a", "an", "the", "is", "are", "answer", "of", "to", "and", "it"})


def render_select_answer(info: Mapping[str, Any], question: str, options: Sequence[str]) -> str:
    info_lines = "\n".join(f"- {k}: {v}" for k, v in info.items()) or "- (none)"
    return load_prompt_asset(SELECT_ANSWER_TEMPLATE).format(
        info=info_lines, question=question, options=" | ".join(options))


def render_process_guesses(question: str, guesses: Sequence[str]) -> str:
    return load_prompt_asset(PROCESS_GUESSES_TEMPLATE).format(
        question=question, guesses="\n".join(f"- {g}" for g in guesses))


def overlap_tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower())) - OVERLAP_STOPWORDS


def map_reply_to_option(reply: str, options: Sequence[str]) -> str:
    """Exact (case-insensitive) match, else most shared words, else the first option."""
    clean = reply.strip().lower()
    for opt in options:
        if opt.strip().lower() == clean:
            return opt
    words = overlap_tokens(reply)
    best, best_score = 0, 0
    for i, opt in enumerate(options):
        score = len(words & overlap_tokens(opt))
        if score > best_score:
            best, best_score = i, score
    return options[best]


# -- model-backed operations -----------------------------------------------------

class Runtime:
    """Model-backed API operations bound to one dispatcher.

    ``knowledge_source`` is the task input the knowledge LM may consult (the
    exact backend reads its fact table; real models ignore it).
    """

    def __init__(self, dispatcher, knowledge_source: Scene | VideoScene | None = None,
                 verify_threshold: float = DEFAULT_VERIFY_THRESHOLD,
                 on_warning: Callable[[str], None] | None = None):
        self.dispatcher = dispatcher
        self.knowledge_source = knowledge_source
        self.verify_threshold = verify_threshold
        self.on_warning = on_warning or (lambda msg: None)

    def _call(self, role: Role, op: str, patch: PatchRef | None, text: str,
              image: Scene | VideoScene | None = None) -> Any:
        if patch is not None:
            req = Request(role, op, patch.image, patch.box, text, patch.frame_index)
        else:
            req = Request(role, op, image, None, text, None)
        result, _ = self.dispatcher.call(req)
        return result

    def find(self, patch: PatchRef, object_name: str) -> list[PatchRef]:
        detections = self._call(Role.OBJECT_DETECTOR, "find", patch, object_name)
        found = []
        for box, score in detections:
            inter = geometry.intersection(tuple(box), patch.box)
            if inter is not None:
                found.append((score, PatchRef(patch.image, *inter, patch.frame_index)))
        found.sort(key=lambda sp: (-sp[0], sp[1].left, sp[1].lower))
        return [p for _, p in found]

    def exists(self, patch: PatchRef, object_name: str) -> bool:
        return len(self.find(patch, object_name)) > 0

    def score(self, patch: PatchRef, text: str, op: str) -> float:
        return float(self._call(Role.IMAGE_TEXT_SCORER, op, patch, text))

    def verify_property(self, patch: PatchRef, object_name: str, property: str) -> bool:
        return self.score(patch, f"{property} {object_name}", "verify_property") >= self.verify_threshold

    def best_text_match(self, patch: PatchRef, option_list: Sequence[str], prefix: str | None = None) -> str:
        if not option_list:
            raise RuntimeContractError("best_text_match: option_list is empty")
        best, best_score = option_list[0], None
        for opt in option_list:
            text = f"{prefix} {opt}" if prefix else opt
            s = self.score(patch, text, "best_text_match")
            if best_score is None or s > best_score:
                best, best_score = opt, s
        return best

    def best_image_match(self, patches: Sequence[PatchRef], content: Sequence[str],
                         return_index: bool = False) -> PatchRef | int:
        if not patches:
            raise RuntimeContractError("best_image_match: list_patches is empty")
        if not content:
            raise RuntimeContractError("best_image_match: content is empty")
        totals = [sum(self.score(p, c, "best_image_match") for c in content) for p in patches]
        idx = int(np.argmax(totals))
        return idx if return_index else patches[idx]

    def simple_query(self, patch: PatchRef, question: str | None = None) -> str:
        return str(self._call(Role.VQA, "simple_query", patch, question or DEFAULT_QUESTION))

    def compute_depth(self, patch: PatchRef) -> float:
        raster = self._call(Role.DEPTH_ESTIMATOR, "compute_depth", patch, "")
        return float(np.median(raster))

    def llm_query(self, question: str) -> str:
        if re.search(r"\bthe (image|photo|picture)\b", question, re.IGNORECASE):
            self.on_warning(f"llm_query question refers to the image: {question!r}")
        return str(self._call(Role.KNOWLEDGE_LM, "llm_query", None, question, self.knowledge_source))

    def select_answer(self, seg: SegmentRef, info: Mapping[str, Any], question: str,
                      options: Sequence[str]) -> str:
        if not options:
            raise RuntimeContractError("select_answer: options is empty")
        prompt = render_select_answer(info, question, options)
        reply = str(self._call(Role.KNOWLEDGE_LM, "select_answer", None, prompt, seg.video))
        return map_reply_to_option(reply, list(options))

    def process_guesses(self, question: str, guesses: Sequence[str]) -> str:
        if not guesses:
            raise RuntimeContractError("process_guesses: guesses is empty")
        prompt = render_process_guesses(question, guesses)
        return str(self._call(Role.KNOWLEDGE_LM, "process_guesses", None, prompt, self.knowledge_source))


# -- program-facing classes -----------------------------------------------------

class ImagePatch:
    """Crop of an image, as generated programs see it.

    Coordinates are absolute in the original image. Use
    :func:`program_namespace` to get a subclass bound to a runtime.
    """

    _runtime: Runtime = None

    def __init__(self, image, left: int = None, lower: int = None, right: int = None, upper: int = None):
        if isinstance(image, (VideoSegment, VideoScene, SegmentRef)):
            raise TypeError("ImagePatch expects an image; use frame(video_segment, index) to take one frame")
        if isinstance(image, PatchRef):
            ref = image
        elif isinstance(image, ImagePatch):
            ref = image.ref
        elif isinstance(image, Scene):
            ref = full_patch(image)
        else:
            raise TypeError(f"ImagePatch expects an image, got {type(image).__name__}")
        if not (left is None and lower is None and right is None and upper is None):
            coords = [ref.left if left is None else left, ref.lower if lower is None else lower,
                      ref.right if right is None else right, ref.upper if upper is None else upper]
            ref = PatchRef(ref.image, *(int(c) for c in coords), ref.frame_index)
        self.ref = ref

    @classmethod
    def _wrap(cls, ref: PatchRef) -> "ImagePatch":
        return cls(ref)

    @property
    def left(self) -> int:
        return self.ref.left

    @property
    def lower(self) -> int:
        return self.ref.lower

    @property
    def right(self) -> int:
        return self.ref.right

    @property
    def upper(self) -> int:
        return self.ref.upper

    @property
    def width(self) -> int:
        return self.ref.width

    @property
    def height(self) -> int:
        return self.ref.height

    @property
    def horizontal_center(self) -> float:
        return self.ref.horizontal_center

    @property
    def vertical_center(self) -> float:
        return self.ref.vertical_center

    @property
    def frame_index(self) -> int | None:
        return self.ref.frame_index

    def find(self, object_name: str) -> list["ImagePatch"]:
        return [self._wrap(p) for p in self._runtime.find(self.ref, object_name)]

    def exists(self, object_name: str) -> bool:
        return self._runtime.exists(self.ref, object_name)

    def verify_property(self, object_name: str, property: str) -> bool:
        return self._runtime.verify_property(self.ref, object_name, property)

    def best_text_match(self, option_list: list[str], prefix: str = None) -> str:
        return self._runtime.best_text_match(self.ref, option_list, prefix)

    def simple_query(self, question: str = None) -> str:
        return self._runtime.simple_query(self.ref, question)

    def compute_depth(self) -> float:
        return self._runtime.compute_depth(self.ref)

    def crop(self, left: int, lower: int, right: int, upper: int) -> "ImagePatch":
        return self._wrap(crop(self.ref, left, lower, right, upper))

    def overlaps_with(self, left, lower, right, upper) -> bool:
        return overlaps_with(self.ref, left, lower, right, upper)

    def __repr__(self) -> str:
        return "ImagePatch({}, {}, {}, {})".format(*self.ref.box)


class VideoSegment:
    """Contiguous frames of a video, as generated programs see it."""

    _runtime: Runtime = None
    _patch_class: type = ImagePatch

    def __init__(self, video, start: int = None, end: int = None):
        if isinstance(video, VideoSegment):
            ref = video.ref
        elif isinstance(video, SegmentRef):
            ref = video
        elif isinstance(video, VideoScene):
            ref = full_segment(video)
        else:
            raise TypeError(f"VideoSegment expects a video, got {type(video).__name__}")
        if start is not None or end is not None:
            ref = trim(ref, start, end)
        self.ref = ref

    @property
    def start(self) -> int:
        return self.ref.start

    @property
    def end(self) -> int:
        return self.ref.end

    @property
    def num_frames(self) -> int:
        return self.ref.num_frames

    def frame_iterator(self) -> Iterator[ImagePatch]:
        for p in frame_iterator(self.ref):
            yield self._patch_class(p)

    def trim(self, start: int | None = None, end: int | None = None) -> "VideoSegment":
        return type(self)(trim(self.ref, start, end))

    def select_answer(self, info: dict, question: str, options: list[str]) -> str:
        return self._runtime.select_answer(self.ref, info, question, options)

    def __repr__(self) -> str:
        return "VideoSegment({}, {})".format(self.start, self.end)


def program_namespace(runtime: Runtime) -> dict[str, Any]:
    """Names a generated program may call, bound to ``runtime``."""
    patch_cls = type("ImagePatch", (ImagePatch,), {"_runtime": runtime})
    segment_cls = type("VideoSegment", (VideoSegment,), {"_runtime": runtime, "_patch_class": patch_cls})

    def best_image_match(list_patches, content, return_index=False):
        idx = runtime.best_image_match([p.ref for p in list_patches], content, return_index=True)
        return idx if return_index else list_patches[idx]

    def distance_(patch_a, patch_b):
        return distance(patch_a.ref, patch_b.ref)

    def frame_(video_segment, index):
        return patch_cls(frame(video_segment.ref, index))

    return {
        "ImagePatch": patch_cls,
        "VideoSegment": segment_cls,
        "best_image_match": best_image_match,
        "distance": distance_,
        "bool_to_yesno": bool_to_yesno,
        "llm_query": runtime.llm_query,
        "process_guesses": runtime.process_guesses,
        "frame": frame_,
    }
