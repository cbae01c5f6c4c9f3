import json

import numpy as np
import pytest

from dragedit.cli import main
from dragedit.codec import save_frames
from dragedit.pipeline import Project

from test_pipeline import make_ready_project, tiny_source_video


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["drag", "--data-root", "/tmp/x", "--project", "p", "--frobnicate"])
    assert err.value.code == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["transmogrify"])
    assert err.value.code == 2


def test_preprocess_then_full_flow(tmp_path, capsys):
    video = tiny_source_video()
    src = tmp_path / "src"
    save_frames(video, src)
    code = main(["preprocess", "--data-root", str(tmp_path / "data"), "--project", "clip",
                 "--video", str(src), "--kps", "6", "--source-fps", "12"])
    assert code == 0
    assert "6 frames" in capsys.readouterr().out

    code = main(["train-lora", "--data-root", str(tmp_path / "data"), "--project", "clip",
                 "--epochs", "2", "--batch-size", "2", "--rank", "4"])
    assert code == 0

    instruction = {
        "frames": 6,
        "extension_radius": 2,
        "keyframes": {
            "first": {"pairs": [{"handle": [12.0, 24.0], "target": [18.0, 24.0]}],
                      "positive": [], "negative": []},
            "last": {"pairs": [{"handle": [32.0, 24.0], "target": [38.0, 24.0]}],
                     "positive": [], "negative": []},
        },
    }
    instr_path = tmp_path / "instruction.json"
    instr_path.write_text(json.dumps(instruction))
    code = main(["propagate", "--data-root", str(tmp_path / "data"), "--project", "clip",
                 "--instruction", str(instr_path)])
    assert code == 0

    code = main(["drag", "--data-root", str(tmp_path / "data"), "--project", "clip",
                 "--epochs", "2", "--batch-size", "2", "--rank", "4",
                 "--max-steps", "2", "--t-opt", "8", "--inversion-steps", "12"])
    assert code == 0
    out = capsys.readouterr().out
    assert "score=" in out
    project = Project.load(tmp_path / "data", "clip")
    assert project.status == "done"


def test_drag_failure_names_stage(tmp_path, capsys):
    code = main(["drag", "--data-root", str(tmp_path), "--project", "missing"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_run_failure_exit_code(tmp_path, capsys):
    project = make_ready_project(tmp_path, "cli-fail")
    code = main(["drag", "--data-root", str(tmp_path), "--project", "cli-fail",
                 "--t-opt", "40", "--inversion-steps", "12"])
    assert code == 1
    err = capsys.readouterr().err
    assert "error" in err


def test_score_command_emits_csv(tmp_path, capsys):
    video = tiny_source_video()
    baseline_dir = tmp_path / "baseline"
    edited_dir = tmp_path / "edited"
    save_frames(video, baseline_dir)
    save_frames(video, edited_dir)
    out = tmp_path / "report.csv"
    code = main(["score", "--baseline", str(baseline_dir), "--edited", str(edited_dir),
                 "--sample", "clip", "--out", str(out)])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "sample,baseline_score,dragvideo_score"
    assert lines[1].startswith("clip,")
    assert out.with_suffix(".json").exists()


def test_score_requires_some_input(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["score", "--out", str(tmp_path / "r.csv")])
    assert err.value.code == 2
