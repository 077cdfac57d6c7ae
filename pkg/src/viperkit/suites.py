"""Synthetic benchmark suites with curated programs.

Each suite is a directory::

    tasks.jsonl        one task per line, ground truth from the scene oracle
    inputs/<id>.json   the scene (or video) for each task
    replay/            content-addressed programs, one per task prompt
    manifest.json      template and reply mode used for every task
    config.yaml        a run config pointing at ``replay/`` with exact backends

Programs follow the style of the preset's usage examples. Ground truths come
from the oracle alone, never from running the programs, so a run of the
suite with exact backends is an end-to-end check of the runtime.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .scene import (COLORS, UNANSWERABLE, GeneratorSpec, Scene, SceneError, SceneObject, VideoScene,
                    generate_scenes, mcq_fact_key, oracle_answer, save_scene)
from .synthesis import ReplayStore
from .tasks import TaskInstance, save_tasks

SUITE_KINDS = ("grounding", "image_qa", "knowledge_qa", "video_mcq")
KIND_PREFIX = {"grounding": "g", "image_qa": "q", "knowledge_qa": "k", "video_mcq": "v"}

# Actions share no content words, so token overlap with a reply picks at most one.
ACTIONS = (
    "runs away", "sits down", "jumps high", "waves hello", "eats lunch", "drinks water",
    "falls asleep", "reads quietly", "climbs upstairs", "sings loudly", "opens door",
    "throws ball", "paints picture", "washes dishes", "rides bicycle",
)
REPLY_MODES = ("exact", "overlap", "unintelligible")
N_OPTIONS = 5


@dataclass
class SuiteItem:
    task: TaskInstance
    input: Scene | VideoScene
    program: str
    template: str
    reply_mode: str | None = None


def _var(word: str) -> str:
    return word.replace(" ", "_")


def _counts(scene: Scene) -> dict[str, int]:
    out: dict[str, int] = {}
    for o in scene.objects:
        out[o.name] = out.get(o.name, 0) + 1
    return out


def _word(rng: random.Random, obj: SceneObject) -> str:
    return rng.choice(obj.names)


# -- grounding ------------------------------------------------------------------

HEADER_GROUNDING = "def execute_command(image) -> ImagePatch:\n    image_patch = ImagePatch(image)\n"
HEADER_QA = "def execute_command(image) -> str:\n    image_patch = ImagePatch(image)\n"


def _ground_name(rng, scene):
    counts = _counts(scene)
    objs = [o for o in scene.objects if counts[o.name] == 1]
    if not objs:
        return None
    w = _word(rng, rng.choice(objs))
    v = _var(w)
    query = rng.choice([f"the {w}", w])
    src = (HEADER_GROUNDING
           + f"    {v}_patches = image_patch.find({w!r})\n"
           + f"    if len({v}_patches) == 0:\n        # fall back to the whole image\n        return image_patch\n"
           + f"    return {v}_patches[0]\n")
    return query, src


def _ground_attr(rng, scene):
    cands = []
    for o in scene.objects:
        same = [p for p in scene.objects if p.name == o.name]
        for a in sorted(o.attributes):
            if sum(a in p.attributes for p in same) == 1:
                cands.append((o, a, len(same)))
    if not cands:
        return None
    # prefer genuinely ambiguous names
    multi = [c for c in cands if c[2] > 1]
    o, attr, _ = rng.choice(multi or cands)
    w = _word(rng, o)
    query = f"{attr} {w}"
    if rng.random() < 0.5:
        src = (HEADER_GROUNDING
               + f"    {_var(w)}_patches = image_patch.find({w!r})\n"
               + f"    if len({_var(w)}_patches) == 0:\n        return image_patch\n"
               + f"    return best_image_match({_var(w)}_patches, [{query!r}])\n")
    else:
        src = (HEADER_GROUNDING
               + f"    for patch in image_patch.find({w!r}):\n"
               + f"        if patch.verify_property({w!r}, {attr!r}):\n"
               + "            return patch\n"
               + "    return image_patch\n")
    return query, src


def _ground_side(rng, scene):
    o = rng.choice(scene.objects)
    w = _word(rng, o)
    side = rng.choice(["left", "right"])
    query = rng.choice([f"{w} on the {side}", f"the {w} on the {side}"])
    idx = "0" if side == "left" else "-1"
    src = (HEADER_GROUNDING
           + f"    {_var(w)}_patches = image_patch.find({w!r})\n"
           + f"    if len({_var(w)}_patches) == 0:\n        return image_patch\n"
           + "    # sort from left to right\n"
           + f"    {_var(w)}_patches = sorted({_var(w)}_patches, key=lambda p: p.horizontal_center)\n"
           + f"    return {_var(w)}_patches[{idx}]\n")
    return query, src


def _ground_depth(rng, scene):
    o = rng.choice(scene.objects)
    w = _word(rng, o)
    front = rng.random() < 0.5
    query = f"{w} in the front" if front else f"{w} at the back"
    src = (HEADER_GROUNDING
           + f"    {_var(w)}_patches = image_patch.find({w!r})\n"
           + f"    if len({_var(w)}_patches) == 0:\n        return image_patch\n"
           + f"    {_var(w)}_patches = sorted({_var(w)}_patches, key=lambda p: p.compute_depth())\n"
           + f"    return {_var(w)}_patches[{'0' if front else '-1'}]\n")
    return query, src


GROUNDING_TEMPLATES: dict[str, Callable] = {
    "name": _ground_name, "attribute": _ground_attr, "side": _ground_side, "depth": _ground_depth,
}


# -- image QA -----------------------------------------------------------------------

def _qa_exists(rng, scene, vocab):
    w = rng.choice(sorted({n for ns in vocab.items() for n in (ns[0], *ns[1])}))
    art = "an" if w[0] in "aeiou" else "a"
    return f"Is there {art} {w}?", HEADER_QA + f"    return bool_to_yesno(image_patch.exists({w!r}))\n"


def _qa_count(rng, scene, vocab):
    regular = sorted(n for n in vocab if not n.endswith(("s", "man")))
    name = rng.choice(regular or sorted(vocab))
    v = _var(name)
    ret = f"len({v}_patches)" if rng.random() < 0.5 else f"str(len({v}_patches))"
    return (f"How many {name}s are there?",
            HEADER_QA + f"    {v}_patches = image_patch.find({name!r})\n    return {ret}\n")


def _qa_color(rng, scene, vocab):
    counts = _counts(scene)
    objs = [o for o in scene.objects if counts[o.name] == 1]
    if not objs:
        return None
    w = _word(rng, rng.choice(objs))
    q = f"What color is the {w}?"
    src = (HEADER_QA
           + f"    {_var(w)}_patches = image_patch.find({w!r})\n"
           + f"    if len({_var(w)}_patches) == 0:\n        return image_patch.simple_query({q!r})\n"
           + f"    return {_var(w)}_patches[0].simple_query(\"What color is this?\")\n")
    return q, src


def _qa_verify(rng, scene, vocab):
    counts = _counts(scene)
    objs = [o for o in scene.objects if counts[o.name] == 1]
    if not objs:
        return None
    o = rng.choice(objs)
    w = _word(rng, o)
    own = sorted(o.attributes)
    other = [c for c in COLORS if c not in o.attributes]
    attr = rng.choice(own) if rng.random() < 0.5 or not other else rng.choice(other)
    src = (HEADER_QA
           + f"    {_var(w)}_patches = image_patch.find({w!r})\n"
           + f"    if len({_var(w)}_patches) == 0:\n        return \"no\"\n"
           + f"    return bool_to_yesno({_var(w)}_patches[0].verify_property({w!r}, {attr!r}))\n")
    return f"Is the {w} {attr}?", src


def _qa_fact(rng, scene, vocab):
    if not scene.facts:
        return None
    q = rng.choice(sorted(scene.facts))
    return q, HEADER_QA + f"    return image_patch.simple_query({q!r})\n"


QA_TEMPLATES: dict[str, Callable] = {
    "exists": _qa_exists, "count": _qa_count, "color": _qa_color, "verify": _qa_verify, "fact": _qa_fact,
}


def _knowledge(rng, scene, vocab):
    if not scene.facts:
        return None
    q = rng.choice(sorted(scene.facts))
    if rng.random() < 0.5:
        return q, HEADER_QA.split("\n")[0] + f"\n    return llm_query({q!r})\n", "llm"
    src = (HEADER_QA
           + f"    guess = image_patch.simple_query({q!r})\n"
           + f"    return process_guesses({q!r}, [guess])\n")
    return q, src, "guesses"


# -- video MCQ ------------------------------------------------------------------------

MCQ_PROGRAM_CAPTION = '''\
def execute_command(video, possible_answers, question) -> [str, dict]:
    video_segment = VideoSegment(video)
    # caption the last frame (end of the video)
    last_frame = frame(video_segment, -1)
    last_caption = last_frame.simple_query("What is this?")
    info = {"Caption of last frame": last_caption}
    answer = video_segment.select_answer(info, question, possible_answers)
    return answer, info
'''

MCQ_PROGRAM_TRIM = '''\
def execute_command(video, possible_answers, question) -> str:
    video_segment = VideoSegment(video)
    second_half = video_segment.trim(video_segment.num_frames // 2, video_segment.num_frames)
    info = {{}}
    for i, f in enumerate(second_half.frame_iterator()):
        if f.exists({name!r}):
            info["Frame " + str(second_half.start + i)] = f.simple_query("What is this?")
    return second_half.select_answer(info, question, possible_answers)
'''


def _mcq_item(rng: random.Random, frames: list[Scene], idx: int, task_id: str, input_ref: str):
    names = sorted({o.name for fr in frames for o in fr.objects}) or ["person"]
    name = rng.choice(names)
    question = f"What does the {name} do at the end of the video?"
    mode = REPLY_MODES[idx % len(REPLY_MODES)]
    options = rng.sample(ACTIONS, N_OPTIONS)
    truth = options[0] if mode == "unintelligible" else rng.choice(options)
    reply = {"exact": truth, "overlap": f"The answer is: {truth.upper()}.",
             "unintelligible": "hmm, hard to tell"}[mode]
    first = frames[0]
    first = Scene(first.width, first.height, first.objects, first.background_depth,
                  {**first.facts, mcq_fact_key(question, options): reply}, first.caption)
    video = VideoScene(tuple([first, *frames[1:]]))
    if rng.random() < 0.5:
        template, src = "last_frame_caption", MCQ_PROGRAM_CAPTION
    else:
        template, src = "second_half", MCQ_PROGRAM_TRIM.format(name=name)
    task = TaskInstance(task_id, "video_mcq", question, input_ref, truth, tuple(options))
    return SuiteItem(task, video, src, template, mode)


# -- driver --------------------------------------------------------------------------------

def _scene_stream(seed: int, spec: GeneratorSpec, batch: int = 64):
    k = 0
    while True:
        for sc in generate_scenes(seed * 1_000_003 + k, batch, spec):
            yield sc
        k += 1


def build_suite(kind: str, seed: int, count: int, spec: GeneratorSpec | None = None) -> list[SuiteItem]:
    """Generate ``count`` tasks of ``kind`` whose oracle answer is defined."""
    if kind not in SUITE_KINDS:
        raise SceneError(f"kind: unknown suite kind {kind!r}; choose from {list(SUITE_KINDS)}")
    if count < 1:
        raise SceneError(f"count: must be >= 1, got {count}")
    spec = spec or GeneratorSpec()
    rng = random.Random(f"suite:{kind}:{seed}")
    scenes = _scene_stream(seed, spec)
    prefix = KIND_PREFIX[kind]
    items: list[SuiteItem] = []
    misses = 0
    while len(items) < count:
        task_id = f"{prefix}{len(items):04d}"
        ref = f"inputs/{task_id}.json"
        if kind == "video_mcq":
            frames = [next(scenes) for _ in range(rng.randint(3, 8))]
            items.append(_mcq_item(rng, frames, len(items), task_id, ref))
            continue
        scene = next(scenes)
        if not scene.objects:
            continue
        if kind == "grounding":
            template = rng.choice(sorted(GROUNDING_TEMPLATES))
            made = GROUNDING_TEMPLATES[template](rng, scene)
        elif kind == "image_qa":
            template = rng.choice(sorted(QA_TEMPLATES))
            made = QA_TEMPLATES[template](rng, scene, spec.vocabulary)
        else:
            made = _knowledge(rng, scene, spec.vocabulary)
            template = made[2] if made else ""
            made = made[:2] if made else None
        if made is None:
            misses += 1
            if misses > 100 * count:
                raise SceneError("scene generator cannot produce answerable tasks for this suite")
            continue
        query, src = made
        probe = TaskInstance(task_id, kind, query, ref)
        truth = oracle_answer(scene, probe)
        if truth is UNANSWERABLE:
            continue
        task = TaskInstance(task_id, kind, query, ref, truth)
        items.append(SuiteItem(task, scene, src, template))
    return items


SUITE_CONFIG = """\
# exact backends, curated programs from the replay store
generator:
  client: replay
  replay_dir: replay
backends: exact
seed: {seed}
out: out
"""


def write_suite(items: list[SuiteItem], out_dir: str | Path, seed: int = 0,
                preset: str | None = None) -> Path:
    from .harness import task_prompt  # late: harness imports this package's engine stack

    out = Path(out_dir)
    (out / "inputs").mkdir(parents=True, exist_ok=True)
    store = ReplayStore(out / "replay")
    manifest = []
    for it in items:
        save_scene(it.input, out / it.task.input_ref)
        _, prompt = task_prompt(it.task, preset)
        digest = store.put(it.task.id, prompt, it.program)
        manifest.append({"task_id": it.task.id, "template": it.template, "reply_mode": it.reply_mode,
                         "prompt_digest": digest})
    store.flush()
    save_tasks([it.task for it in items], out / "tasks.jsonl")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (out / "config.yaml").write_text(SUITE_CONFIG.format(seed=seed), encoding="utf-8")
    return out
