from __future__ import annotations

import json
import logging

import pytest

from hvlm.cli import main
from hvlm.config import ExperimentConfig
from hvlm.pipeline import MissingArtifact, RunDir

TINY = {
    "cohort": {"n_studies": 40},
    "tokenizer": {"steps": 10, "max_patches_per_sequence": 4},
    "text": {"lm_epochs": 1, "name_steps": 5},
    "objective": {"steps": 4, "eval_every": 2, "batch_size": 8},
    "head": {"epochs": 2},
    "explain": {"n_samples": 60, "max_studies": 2},
    "fairness": {"iters": 3, "n": 20},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    run = d / "run"
    code = main(["--config", str(cfg), "--stage", "all", "--run-dir", str(run)])
    return cfg, run, code


def test_all_stages_produce_artifacts(tiny_run):
    cfg, run, code = tiny_run
    assert code == 0
    for name in ("cohort", "clip", "probe", "evaluate", "explain", "fairness"):
        assert (run / "metrics" / f"{name}.json").exists(), name
    reg = json.loads((run / "checkpoints" / "artifacts.json").read_text())
    assert set(reg) == {"cohort", "tokenizer", "tokens", "text", "clip", "heads"}


def test_resume_skips_finished_stages(tiny_run, capsys):
    cfg, run, _ = tiny_run
    assert main(["--config", str(cfg), "--stage", "train-clip", "--run-dir", str(run), "--resume"]) == 0
    assert "up to date, skipped" in capsys.readouterr().out


def test_embedding_cache_hit_on_rerun(tiny_run, caplog):
    cfg, run, _ = tiny_run
    with caplog.at_level(logging.INFO, logger="hvlm"):
        assert main(["--config", str(cfg), "--stage", "evaluate", "--run-dir", str(run), "-v"]) == 0
    events = [json.loads(r.getMessage()) for r in caplog.records if r.getMessage().startswith("{")]
    assert {"event": "embedding_cache", "status": "hit"}.items() <= next(
        e for e in events if e["event"] == "embedding_cache").items()


def test_missing_artifact_names_producer(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    code = main(["--config", str(cfg), "--stage", "train-clip", "--run-dir", str(tmp_path / "empty")])
    assert code == 3
    err = capsys.readouterr().err
    assert "run `hvlm --stage" in err


def test_corrupted_artifact_detected(tiny_run):
    _, run, _ = tiny_run
    cfg = ExperimentConfig().replace(**TINY)
    rd = RunDir.open(cfg, run_dir=run)
    path = rd.require("heads")
    raw = path.read_bytes()
    try:
        path.write_bytes(raw + b"x")
        with pytest.raises(MissingArtifact, match="checksum"):
            rd.require("heads")
        assert not rd.has("heads")
    finally:
        path.write_bytes(raw)


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("objective:\n  stepz: 3\n")
    assert main(["--config", str(bad), "--stage", "generate", "--run-dir", str(tmp_path / "r")]) == 2
    assert "stepz" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "nope.yaml"), "--stage", "generate"]) == 2


def test_run_dir_config_mismatch(tiny_run, tmp_path):
    _, run, _ = tiny_run
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "seed": 9}))
    assert main(["--config", str(other), "--stage", "generate", "--run-dir", str(run)]) == 2


def test_ablate_requires_name(tiny_run):
    cfg, run, _ = tiny_run
    assert main(["--config", str(cfg), "--stage", "ablate", "--run-dir", str(run)]) == 2
    with pytest.raises(SystemExit):
        main(["--stage", "ablate", "--ablation", "bogus"])
