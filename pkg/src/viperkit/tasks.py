"""Task instances and the JSON-Lines task file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .synthesis import TASK_KINDS


class TaskFileError(ValueError):
    pass


@dataclass(frozen=True)
class TaskInstance:
    id: str
    kind: str
    query: str
    input_ref: str
    ground_truth: Any = None
    options: tuple[str, ...] = field(default=())
    context: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskFileError(f"task {self.id}: unknown kind {self.kind!r}")
        if self.kind == "video_mcq":
            if not self.options:
                raise TaskFileError(f"task {self.id}: video_mcq needs options")
            if self.ground_truth is not None and self.ground_truth not in self.options:
                raise TaskFileError(f"task {self.id}: ground_truth is not one of the options")
        if self.kind == "grounding" and self.ground_truth is not None:
            gt = self.ground_truth
            if len(gt) != 4 or not (gt[0] < gt[2] and gt[1] < gt[3]):
                raise TaskFileError(f"task {self.id}: ground_truth {gt!r} is not a valid box")

    def to_dict(self) -> dict:
        gt = list(self.ground_truth) if self.kind == "grounding" and self.ground_truth is not None \
            else self.ground_truth
        return {"id": self.id, "kind": self.kind, "query": self.query, "input_ref": self.input_ref,
                "options": list(self.options), "ground_truth": gt, "context": self.context}

    @classmethod
    def from_dict(cls, data: dict) -> "TaskInstance":
        try:
            gt = data.get("ground_truth")
            if data["kind"] == "grounding" and gt is not None:
                gt = tuple(int(v) for v in gt)
            return cls(id=str(data["id"]), kind=data["kind"], query=data["query"],
                       input_ref=data["input_ref"], ground_truth=gt,
                       options=tuple(data.get("options") or ()), context=data.get("context"))
        except KeyError as exc:
            raise TaskFileError(f"task record missing field {exc}") from None


def load_tasks(path: str | Path) -> list[TaskInstance]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskFileError(f"{path}:{lineno}: malformed JSON ({exc})") from None
            tasks.append(TaskInstance.from_dict(data))
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise TaskFileError(f"{path}: duplicate task ids")
    return tasks


def save_tasks(tasks: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
