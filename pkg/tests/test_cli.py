import json

import pytest

from biteacq.cli import main
from biteacq.model import load_checkpoint


def files_of(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_scenes_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-scenes", "--n", "3", "--seed", "7", "--noise-sigma", "2", "--out", str(tmp_path / name)]) == 0
    a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    assert len([k for k in a if k.endswith("rgb.ppm")]) == 3


def test_gen_scenes_zero(tmp_path):
    assert main(["gen-scenes", "--n", "0", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text()) == {"scenes": []}


def test_gen_trials_rows(tmp_path):
    assert main(["gen-trials", "--trials-per-config", "10", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "trials.csv").read_text().splitlines()
    assert len(lines) == 721
    assert (tmp_path / "oracle.csv").exists()
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["command"] == "gen-trials" and cfg["trials_per_config"] == 10


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"train.learning_rate": 0.1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "train.learning_rate" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.span"), "--out", str(tmp_path / "o")]) == 1
    assert main(["gen-scenes", "--n", "-1", "--out", str(tmp_path / "o")]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["gen-scenes", "--jobs", "0", "--out", str(tmp_path / "o")]) == 1


def test_config_file_layering(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 5, "scene.n_items": 2}))
    assert main(["gen-scenes", "--config", str(cfg), "--n", "1", "--out", str(tmp_path / "o")]) == 0
    used = json.loads((tmp_path / "o" / "config.json").read_text())
    assert used["n"] == 1 and used["scene.n_items"] == 2


def test_runtime_error_exit_2(tmp_path):
    bad = tmp_path / "t.csv"
    bad.write_text("trial_id,item,category,macro,roll,env,outcome\na,grape,non-flat,VS,45,ISO,success\n")
    assert main(["analyze", "--trials", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_analyze_stack_example(tmp_path):
    assert main(["gen-trials", "--trials-per-config", "100", "--out", str(tmp_path / "t")]) == 0
    hyp = tmp_path / "h.json"
    hyp.write_text(json.dumps([{"name": "non-flat TA-0: STACK vs ISO+WALL", "factor": "env",
                                "groups": [["STACK"], ["ISO", "WALL"]],
                                "where": {"category": ["non-flat"], "macro": ["TA"], "roll": ["0"]}}]))
    args = ["analyze", "--trials", str(tmp_path / "t" / "trials.csv"), "--hypotheses", str(hyp), "--m", "21"]
    # 300 trials exceed the default enumeration bound
    assert main(args + ["--out", str(tmp_path / "a")]) == 2
    assert main(args + ["--max-total", "400", "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    (test,) = rep["tests"]
    # rows are success / failure, columns the STACK and pooled groups
    assert [sum(c) for c in zip(*test["table"])] == [100, 200]
    assert test["p_value"] < 0.05


@pytest.mark.slow
def test_tiny_train_eval_deterministic(tmp_path):
    common = ["--tiny", "--scenes", "4", "--epochs", "2", "--seed", "3"]
    for name in ("a", "b"):
        assert main(["train", *common, "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "model.span").read_bytes()
    assert a == (tmp_path / "b" / "model.span").read_bytes()
    model, meta = load_checkpoint(tmp_path / "a" / "model.span")
    assert meta["best_epoch"] >= 1
    for name in ("ea", "eb"):
        assert main(["eval", "--checkpoint", str(tmp_path / "a" / "model.span"), "--scenes", "3",
                     "--out", str(tmp_path / name)]) == 0
    ma = json.loads((tmp_path / "ea" / "metrics.json").read_text())
    assert ma == json.loads((tmp_path / "eb" / "metrics.json").read_text())
    assert 0 <= ma["regret"] <= ma["best_possible"]
