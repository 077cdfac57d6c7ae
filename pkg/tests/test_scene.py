from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viperkit import geometry
from viperkit.scene import (UNANSWERABLE, GeneratorSpec, Scene, SceneError, VideoScene, generate_scenes,
                            load_input, mcq_fact_key, normalize_phrase, normalize_question, oracle_answer,
                            save_scene, scene_from_dict, scene_to_dict)
from viperkit.tasks import TaskInstance

from conftest import obj


def raster(box, size=64):
    m = np.zeros((size, size), dtype=bool)
    m[box[1]:box[3], box[0]:box[2]] = True
    return m


boxes = st.tuples(st.integers(0, 62), st.integers(0, 62), st.integers(1, 32), st.integers(1, 32)).map(
    lambda t: (t[0], t[1], min(64, t[0] + t[2]), min(64, t[1] + t[3])))


class TestGeometry:
    def test_iou_examples(self):
        assert geometry.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
        assert geometry.iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
        assert geometry.iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_touching_boxes_do_not_intersect(self):
        assert geometry.intersection((0, 0, 10, 10), (10, 0, 20, 10)) is None
        assert geometry.edge_gap((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0

    def test_edge_gap_diagonal(self):
        assert geometry.edge_gap((0, 0, 10, 10), (13, 14, 20, 20)) == 5.0

    @settings(max_examples=300)
    @given(boxes, boxes)
    def test_iou_matches_pixel_count(self, a, b):
        ra, rb = raster(a), raster(b)
        union = (ra | rb).sum()
        assert geometry.iou(a, b) == pytest.approx((ra & rb).sum() / union, abs=1e-12)


class TestSceneValidation:
    def test_box_outside_canvas_names_the_field(self):
        with pytest.raises(SceneError, match=r"objects\[0\]\.box"):
            Scene(100, 100, (obj("a", "cup", (90, 0, 110, 10)),))

    def test_duplicate_ids(self):
        with pytest.raises(SceneError, match="duplicate id"):
            Scene(100, 100, (obj("a", "cup", (0, 0, 5, 5)), obj("a", "dog", (10, 10, 20, 20))))

    def test_depth_range(self):
        with pytest.raises(SceneError, match="depth"):
            Scene(100, 100, (obj("a", "cup", (0, 0, 5, 5), depth=0.0),))

    def test_video_frames_must_share_size(self):
        with pytest.raises(SceneError, match=r"frames\[1\]"):
            VideoScene((Scene(10, 10), Scene(20, 10)))

    def test_round_trip(self, street, tmp_path):
        assert scene_from_dict(json.loads(json.dumps(scene_to_dict(street)))) == street
        save_scene(street, tmp_path / "s.json")
        assert load_input(tmp_path / "s.json").digest == street.digest

    def test_video_round_trip(self, clip, tmp_path):
        save_scene(clip, tmp_path / "v.json")
        back = load_input(tmp_path / "v.json")
        assert isinstance(back, VideoScene) and back.digest == clip.digest


class TestGenerator:
    def test_same_seed_same_scenes(self):
        a = generate_scenes(3, 5)
        b = generate_scenes(3, 5)
        assert [s.digest for s in a] == [s.digest for s in b]
        assert [s.digest for s in generate_scenes(4, 5)] != [s.digest for s in a]

    def test_boxes_disjoint_and_depths_unique(self):
        for sc in generate_scenes(11, 30):
            for i, o in enumerate(sc.objects):
                for p in sc.objects[i + 1:]:
                    assert geometry.intersection(o.box, p.box) is None
            depths = [o.depth for o in sc.objects]
            assert len(set(depths)) == len(depths)
            assert all(o.color() is not None for o in sc.objects)

    def test_zero_count_rejected(self):
        with pytest.raises(SceneError, match="count"):
            generate_scenes(0, 0)

    def test_infeasible_spec(self):
        with pytest.raises(SceneError, match="min_box"):
            generate_scenes(0, 1, GeneratorSpec(width=10, height=10, min_box=20, max_box=30))

    def test_unknown_spec_key(self):
        with pytest.raises(SceneError, match="unknown keys"):
            GeneratorSpec.from_dict({"colour": "red"})


def task(kind, query, options=(), truth=None):
    return TaskInstance("t", kind, query, "x.json", truth, tuple(options))


class TestOracle:
    @pytest.mark.parametrize("query, box", [
        ("the dog", (60, 50, 100, 90)),
        ("puppy", (60, 50, 100, 90)),
        ("the car on the left", (10, 10, 50, 40)),
        ("automobile on the right", (120, 10, 190, 60)),
        ("car in the front", (10, 10, 50, 40)),
        ("car at the back", (120, 10, 190, 60)),
        ("blue car", (120, 10, 190, 60)),
        ("the shiny car", (10, 10, 50, 40)),
    ])
    def test_grounding(self, street, query, box):
        assert oracle_answer(street, task("grounding", query)) == box

    @pytest.mark.parametrize("query", ["car", "green car", "the giraffe", "the tallest tree"])
    def test_grounding_unanswerable(self, street, query):
        assert oracle_answer(street, task("grounding", query)) is UNANSWERABLE

    @pytest.mark.parametrize("query, answer", [
        ("Is there a mug?", "yes"),
        ("Is there a cat?", "no"),
        ("How many cars are there?", "2"),
        ("How many cats are there?", "0"),
        ("What color is the dog?", "brown"),
        ("Is the cup white?", "yes"),
        ("Is the cup red?", "no"),
        ("What is the weather like?", "sunny"),
    ])
    def test_qa(self, street, query, answer):
        assert oracle_answer(street, task("image_qa", query)) == answer

    def test_color_of_ambiguous_object(self, street):
        assert oracle_answer(street, task("image_qa", "What color is the car?")) is UNANSWERABLE

    def test_mcq_truth_must_be_an_option(self, clip):
        t = task("video_mcq", "q?", ("a", "b"), "b")
        assert oracle_answer(clip, t) == "b"

    def test_video_fact_merge(self, clip):
        assert clip.fact_index["where is this"] == "a street"

    def test_mcq_fact_key_ignores_option_order(self):
        assert mcq_fact_key("Why?", ["B x", "a"]) == mcq_fact_key("why", ["a", "b x"])

    def test_mcq_fact_key_survives_scene_normalization(self):
        key = mcq_fact_key("What now?", ["runs away", "sits down"])
        sc = Scene(10, 10, facts={key: "sits down"})
        assert sc.fact_index[key] == "sits down"

    def test_normalizers(self):
        assert normalize_question("  What's   THIS? ") == "what's this"
        assert normalize_phrase("The Red  Car") == "red car"
