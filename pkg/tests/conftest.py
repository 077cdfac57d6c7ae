from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from viperkit.config import load_config
from viperkit.scene import Scene, SceneObject, VideoScene
from viperkit.suites import build_suite, write_suite

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SUITE_SIZES = {"grounding": 100, "image_qa": 100, "video_mcq": 50, "knowledge_qa": 20}


@pytest.fixture(scope="session")
def suites(tmp_path_factory) -> dict[str, Path]:
    """Synthetic suites (seed 7) with curated replay programs."""
    root = tmp_path_factory.mktemp("suites")
    out = {}
    for kind, n in SUITE_SIZES.items():
        out[kind] = write_suite(build_suite(kind, 7, n), root / kind, seed=7)
    return out


@pytest.fixture(scope="session")
def suite_config(suites):
    return {kind: load_config(path / "config.yaml") for kind, path in suites.items()}


def obj(id_, name, box, depth=0.5, attrs=("red",), synonyms=(), caption=None):
    return SceneObject(id_, name, tuple(box), depth, tuple(synonyms), frozenset(attrs),
                       caption or f"a {' '.join(sorted(attrs))} {name}")


@pytest.fixture
def street() -> Scene:
    """Two cars, a dog and a cup on a 200x100 canvas."""
    return Scene(200, 100, (
        obj("a", "car", (10, 10, 50, 40), 0.3, ("red", "shiny"), ("automobile",)),
        obj("b", "car", (120, 10, 190, 60), 0.7, ("blue",), ("automobile",)),
        obj("c", "dog", (60, 50, 100, 90), 0.5, ("brown",), ("puppy",)),
        obj("d", "cup", (160, 70, 175, 90), 0.2, ("white",), ("mug",)),
    ), background_depth=0.95, facts={"What is the weather like?": "sunny"}, caption="a street")


@pytest.fixture
def clip(street) -> VideoScene:
    frames = []
    for i in range(6):
        frames.append(Scene(street.width, street.height, street.objects, street.background_depth,
                            {"Where is this?": "a street"} if i == 0 else {}, f"frame {i}"))
    return VideoScene(tuple(frames))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
