import json
import subprocess
import sys

import pytest

from viperkit.cli import main


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "g"
    assert main(["gen-suite", "--kind", "grounding", "--count", "12", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def baseline(suite, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", str(suite / "tasks.jsonl"), "--out", str(out), "--figures"]) == 0
    return out


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_gen_scenes_repeatable(tmp_path, capsys):
    assert main(["gen-scenes", "--seed", "7", "--count", "3", "--out", str(tmp_path / "a")]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["count"] == 3 and len(manifest["scenes"]) == 3
    assert main(["gen-scenes", "--seed", "7", "--count", "3", "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_gen_scenes_count_zero(tmp_path, capsys):
    assert main(["gen-scenes", "--count", "0", "--out", str(tmp_path)]) == 2
    assert "--count" in capsys.readouterr().err


def test_prompt_files_repeatable(tmp_path):
    assert main(["gen-suite", "--kind", "image_qa", "--count", "4", "--out", str(tmp_path / "qa")]) == 0
    args = ["prompt", str(tmp_path / "qa" / "tasks.jsonl"), "--preset", "gqa"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = files(tmp_path / "a")
    assert len(a) == 4 and a == files(tmp_path / "b")
    text = next(iter(a.values())).decode()
    assert "simple_query" in text and "llm_query" not in text


def test_prompt_renders_context(tmp_path):
    tasks = tmp_path / "tasks.jsonl"
    tasks.write_text(json.dumps({"id": "uk", "kind": "image_qa", "query": "Which side is the car on?",
                                 "input_ref": "x.json", "context": "Taken in the UK."}) + "\n")
    assert main(["prompt", str(tasks), "--out", str(tmp_path / "p")]) == 0
    assert "# Context: Taken in the UK.\n# Which side is the car on?" in (tmp_path / "p" / "uk.prompt.txt").read_text()


def test_run_outputs(baseline):
    report = json.loads((baseline / "report.json").read_text())
    assert report["aggregates"]["accuracy_at_iou_0.5"] == 1.0
    assert (baseline / "report.csv").read_text().startswith("task_id,")
    assert "started_at" in json.loads((baseline / "report.timings.json").read_text())
    for png in ("iou_histogram.png", "status_by_kind.png"):
        assert (baseline / "figures" / png).read_bytes()[:4] == b"\x89PNG"


def test_run_repeatable_apart_from_sidecar(suite, baseline, tmp_path):
    assert main(["run", str(suite / "tasks.jsonl"), "--out", str(tmp_path)]) == 0
    for name in ("report.json", "report.csv", "traces.json"):
        assert (tmp_path / name).read_bytes() == (baseline / name).read_bytes(), name


def test_replay_miss_exit_code(suite, tmp_path, capsys):
    assert main(["run", str(suite / "tasks.jsonl"), "--preset", "full", "--out", str(tmp_path)]) == 3
    assert "replay miss" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


def test_dry_run(suite, tmp_path, capsys):
    assert main(["run", str(suite / "tasks.jsonl"), "--dry-run", "--backends", "noisy", "--seed", "5",
                 "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["config"]["backends"]["object_detector"]["kind"] == "noisy-exact"
    assert list(tmp_path.iterdir()) == []


def test_bad_config_exit_code(suite, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("backends: {object_detector: {kind: quantum}}\n")
    assert main(["run", str(suite / "tasks.jsonl"), "--config", str(cfg), "--dry-run"]) == 2


def test_unknown_preset_exit_code(suite):
    assert main(["run", str(suite / "tasks.jsonl"), "--preset", "nope", "--dry-run"]) == 2


def test_intervene_without_baseline(suite, tmp_path, capsys):
    assert main(["intervene", str(suite / "tasks.jsonl"), "--out", str(tmp_path)]) == 2
    assert "baseline" in capsys.readouterr().err


def test_intervene(suite, baseline, capsys):
    assert main(["intervene", str(suite / "tasks.jsonl"), "--out", str(baseline), "--figures",
                 "--roles", "object_detector,vqa"]) == 0
    report = json.loads((baseline / "intervention.json").read_text())
    assert report["roles"]["vqa"]["delta"] == 0.0
    assert report["roles"]["object_detector"]["n_affected"] == 12
    assert (baseline / "intervention.csv").read_text().count("\n") == 3
    assert (baseline / "figures" / "intervention_drop.png").exists()


def test_trace_ok(baseline, capsys):
    data = json.loads((baseline / "traces.json").read_text())
    task_id = data["results"][0]["task_id"]
    assert main(["trace", str(baseline / "traces.json"), task_id]) == 0
    out = capsys.readouterr().out
    seqs = [int(ln.split()[0]) for ln in out.split("calls:\n")[1].split("intermediates:")[0].splitlines()]
    assert seqs == sorted(seqs) and seqs[0] == 1 and len(set(seqs)) == len(seqs)
    assert "status ok" in out


def test_trace_fallback_shows_exception(tmp_path, capsys):
    trace = {"schema_version": 1, "results": [{
        "task_id": "t1", "status": "fallback_used", "answer": [0, 0, 5, 5], "trace_digest": "d",
        "calls": [], "intermediates": [], "warnings": [], "exception": "ZeroDivisionError: division by zero"}]}
    path = tmp_path / "traces.json"
    path.write_text(json.dumps(trace))
    assert main(["trace", str(path), "t1"]) == 0
    assert "exception: ZeroDivisionError: division by zero" in capsys.readouterr().out.splitlines()


def test_trace_unknown_task(baseline):
    assert main(["trace", str(baseline / "traces.json"), "no-such-task"]) == 2


def test_missing_task_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path)]) != 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "viperkit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("viperkit ")
