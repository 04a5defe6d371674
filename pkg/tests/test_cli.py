import csv
import json
import math

import pytest

from oodrecovery.cli import main
from oodrecovery.config import RunConfig

TINY = ["--total-steps", "60", "--eval-interval", "30", "--eval-episodes", "1", "--batch-size", "16",
        "--hidden", "16", "--checkpoint-interval", "60"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def snapshot_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("snap")
    assert main(["capture-ood", "--env", "cartpole", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def org_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("org")
    assert main(["train-original", *TINY, "--random-steps", "20", "--out", str(out)]) == 0
    return out


def test_show_defaults(capsys):
    assert main(["config", "show-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == RunConfig().to_dict()
    assert doc["gamma"] == 0.99 and doc["beta2"] == 0.99 and doc["temperature"] == 0.0
    assert doc["eval_interval"] == 5000 and doc["eval_episodes"] == 5 and doc["lam"] is None


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train-original", "--env", "hopper"],
    ["retrain", "--checkpoint", "x.json"],
    ["train-original", "--total-steps", "ten"],
    ["train-original", "--seeds", "0"],
    ["config"],
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_unknown_env_message_lists_choices(capsys):
    assert main(["capture-ood", "--env", "hopper"]) == 1
    assert "cartpole, flipbot" in capsys.readouterr().err


def test_config_file_unknown_key_and_precedence(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gama": 0.9}))
    assert main(["--config", str(bad), "capture-ood"]) == 1
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"env": "flipbot", "out": str(tmp_path / "file")}))
    assert main(["--config", str(good), "capture-ood", "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "flag" / "state.json").read_text())["env"] == "flipbot"
    assert not (tmp_path / "file").exists()


def test_capture_ood_writes_hanging_state(snapshot_dir):
    state = json.loads((snapshot_dir / "state.json").read_text())
    assert state["values"][2] == math.pi and state["values"][3] == 0.0
    assert "hanging downward" in (snapshot_dir / "snapshot.txt").read_text()
    assert (snapshot_dir / "snapshot.png").read_bytes()[:4] == b"\x89PNG"


def test_generate_recorded_is_byte_identical(snapshot_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--snapshot", str(snapshot_dir), "--out", str(out)]) == 0
    assert tree(a) == tree(b)
    for name in ("d_ood.txt", "d_recovery.txt", "d_env.txt", "reward.dsl", "eval.dsl", "transcript.jsonl"):
        assert name in tree(a)


def test_generate_record_then_replay(snapshot_dir, tmp_path):
    rec = tmp_path / "rec.json"
    assert main(["generate", "--snapshot", str(snapshot_dir), "--out", str(tmp_path / "a"), "--record", str(rec)]) == 0
    assert main(["generate", "--snapshot", str(snapshot_dir), "--out", str(tmp_path / "b"),
                 "--transcript", str(rec)]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_generate_unrecorded_prompt_is_runtime_error(snapshot_dir, tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"note": "", "responses": {}}))
    assert main(["generate", "--snapshot", str(snapshot_dir), "--out", str(tmp_path / "o"),
                 "--transcript", str(empty)]) == 2
    assert "unrecorded prompt" in capsys.readouterr().err


def test_generate_snapshot_env_mismatch(snapshot_dir, tmp_path):
    assert main(["generate", "--env", "flipbot", "--snapshot", str(snapshot_dir), "--out", str(tmp_path)]) == 1


def test_generate_unreachable_live_endpoint_aborts(snapshot_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OODRECOVERY_LLM_API_KEY", "sk-very-secret")
    code = main(["generate", "--snapshot", str(snapshot_dir), "--backend", "live",
                 "--endpoint", "http://127.0.0.1:9/v1", "--model", "m", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "sk-very-secret" not in capsys.readouterr().err
    assert (tmp_path / "o" / "errors.txt").exists()
    assert "sk-very-secret" not in (tmp_path / "o" / "transcript.jsonl").read_text()


def test_train_original_outputs(org_dir):
    names = tree(org_dir)
    for name in ("policy.json", "policy_final.json", "curve.csv", "curve.jsonl", "manifest.json",
                 "checkpoints/policy_00000060.json"):
        assert name in names
    rows = list(csv.DictReader((org_dir / "curve.csv").open()))
    assert [int(r["step"]) for r in rows] == [0, 30, 60]


def test_train_original_multiple_seeds(tmp_path, capsys):
    assert main(["train-original", *TINY, "--random-steps", "20", "--seeds", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "seed_0" / "policy.json").exists() and (tmp_path / "seed_1" / "policy.json").exists()
    best = (tmp_path / "best.txt").read_text().strip()
    assert best in ("seed_0", "seed_1")
    assert (tmp_path / "best").resolve() == (tmp_path / best).resolve()


def test_retrain_evaluate_export(org_dir, snapshot_dir, tmp_path, capsys):
    arts = tmp_path / "arts"
    assert main(["generate", "--snapshot", str(snapshot_dir), "--out", str(arts)]) == 0
    run = tmp_path / "run"
    assert main(["retrain", *TINY, "--learning-starts", "16", "--checkpoint", str(org_dir / "policy.json"),
                 "--artifacts", str(arts), "--out", str(run)]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["lam"] == 0.05 and "curve.csv" in manifest["artifacts"]

    assert main(["evaluate", "--checkpoint", str(run / "policy.json"), "-n", "2", "--artifacts", str(arts),
                 "--report", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["n_episodes"] == 2 and 0.0 <= rep["recovery_fraction"] <= 1.0

    capsys.readouterr()
    assert main(["export-curve", "--run", str(run), "--delimiter", ";"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step;mean_return;std_return;recovery_fraction"
    assert [int(x.split(";")[0]) for x in lines[1:]] == [0, 30, 60]


def test_retrain_lambda_zero_accepted(org_dir, snapshot_dir, tmp_path):
    arts = tmp_path / "arts"
    main(["generate", "--snapshot", str(snapshot_dir), "--out", str(arts)])
    assert main(["retrain", *TINY, "--lam", "0", "--checkpoint", str(org_dir / "policy.json"),
                 "--artifacts", str(arts), "--out", str(tmp_path / "run")]) == 0
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["lam"] == 0.0
    assert main(["retrain", "--lam", "-1", "--checkpoint", str(org_dir / "policy.json"),
                 "--artifacts", str(arts), "--out", str(tmp_path / "neg")]) == 1


def test_evaluate_zero_episodes(org_dir, tmp_path):
    assert main(["evaluate", "--checkpoint", str(org_dir / "policy.json"), "-n", "0", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["episodes"] == []
    assert main(["evaluate", "--checkpoint", str(org_dir / "policy.json"), "-n", "-1", "--out", str(tmp_path)]) == 1


def test_evaluate_mismatched_checkpoint(org_dir, tmp_path, capsys):
    code = main(["evaluate", "--env", "flipbot", "--checkpoint", str(org_dir / "policy.json"), "-n", "1",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "action dimension 1, environment has 2" in capsys.readouterr().err


def test_export_curve_missing_run(tmp_path):
    assert main(["export-curve", "--run", str(tmp_path)]) == 2
