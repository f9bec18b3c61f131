import json
import subprocess
import sys

import numpy as np
import pytest

from cissbench import experiment
from cissbench.cli import main
from cissbench.config import ConfigError, ExperimentConfig, apply_overrides, parse_override
from cissbench.report import render_report

TINY = [
    "dataset.num_train=40", "dataset.num_val=4", "dataset.num_test=12", "dataset.image_size=[32,32]",
    "train.epochs=1", "train.width=8", "diagnostics.retrain_epochs=1", "diagnostics.cka_positions=64",
]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("CISSBENCH_OUT", str(tmp_path))
    return tmp_path


def _sets(*extra):
    args = []
    for s in TINY + list(extra):
        args += ["--set", s]
    return args


def _json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


# ---------------------------------------------------------------------------
# configuration


def test_hash_ignores_key_order_and_output_location():
    a = ExperimentConfig.preset()
    raw = a.to_dict()
    shuffled = {k: (dict(reversed(list(v.items()))) if isinstance(v, dict) else v) for k, v in reversed(list(raw.items()))}
    b = ExperimentConfig.from_dict(shuffled)
    assert a.hash() == b.hash() and a.run_id() == b.run_id()
    c = ExperimentConfig.preset(overrides=["output_dir=\"elsewhere\"", "diagnostics.retrain_epochs=3"])
    assert c.hash() == a.hash()
    assert ExperimentConfig.preset(seed=1).hash() != a.hash()
    assert ExperimentConfig.preset(overrides=["train.method=\"ewc\""]).hash() != a.hash()


def test_overrides_and_method_defaults():
    assert parse_override("train.lam=5") == (["train", "lam"], 5)
    assert parse_override("train.method=ewc") == (["train", "method"], "ewc")
    with pytest.raises(ConfigError):
        parse_override("nokey")
    assert apply_overrides({"a": {"b": 1}}, ["a.c=[1,2]"]) == {"a": {"b": 1, "c": [1, 2]}}
    ewc = ExperimentConfig.preset(overrides=["train.method=ewc"]).train_config()
    assert ewc.lam > 0 and ewc.grad_clip_norm == 10.0
    mine = ExperimentConfig.preset(overrides=["train.method=ewc", "train.lam=7"]).train_config()
    assert mine.lam == 7
    off = ExperimentConfig.preset(overrides=["train.method=offline"])
    assert off.method == "offline" and off.train_config().method == "finetune"
    paper = ExperimentConfig.preset(overrides=["train.method=mas"], paper_protocol=True).train_config()
    assert (paper.lr_first, paper.lr_later, paper.epochs, paper.batch_size, paper.lam) == (0.07, 5e-4, 100, 16, 5000)


def test_invalid_configs_list_valid_values():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.preset(overrides=["train.method=bogus"])
    assert "ewc" in e.value.valid
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.preset(overrides=["tasks.regime=partial"])
    assert "full_disjoint" in e.value.valid
    with pytest.raises(ConfigError):
        ExperimentConfig.preset("nope")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"dataset": {}, "tasks": {"splits": [[1]]}})


def test_config_file_with_preset_base(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "voc15-5-mini", "train": {"method": "lwf"}, "seed": 4}))
    cfg = ExperimentConfig.load(p, overrides=["train.epochs=2"])
    assert cfg.method == "lwf" and cfg.seed == 4 and cfg.train["epochs"] == 2
    assert cfg.dataset["num_classes"] == 7


# ---------------------------------------------------------------------------
# command line


def test_cli_config_errors_exit_2(out, capsys):
    assert main(["train", "--set", "train.method=bogus"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and "finetune" in err["valid"]
    assert main(["train", "--config", str(out / "missing.json")]) == 2
    assert main(["matrix", "--methods", "finetune,nope"]) == 2


def test_cli_runtime_error_exit_3(out, capsys, monkeypatch):
    assert main(["diagnose", str(out / "no-such-run")] + _sets()) == 2
    capsys.readouterr()

    def boom(cfg, force=False):
        raise RuntimeError("training diverged")

    monkeypatch.setattr(experiment, "cmd_train", boom)
    assert main(["train"] + _sets()) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "runtime" and err["type"] == "RuntimeError"


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cissbench.cli", "train", "--set", "tasks.regime=bogus"],
                          capture_output=True, text=True, env={"CISSBENCH_OUT": str(tmp_path), "PATH": "/usr/bin:/bin"})
    assert proc.returncode == 2 and "overlapped" in proc.stderr


def test_end_to_end_train_diagnose_report(out, capsys):
    assert main(["generate"] + _sets()) == 0
    assert main(["train"] + _sets()) == 0
    run = _json_lines(capsys.readouterr().out)[-1]["run_dir"]
    metrics = json.loads((out / "runs" / run.split("/")[-1] / "metrics.json").read_text())
    for key in ("run_id", "config_hash", "final", "records", "miou_convention"):
        assert key in metrics
    for name in ("f0.ckpt", "f1.ckpt", "config.json", "confusion_f1.csv"):
        assert (out / "runs" / metrics["run_id"] / name).exists()

    # second invocation is a no-op
    before = (out / "runs" / metrics["run_id"] / "metrics.json").stat().st_mtime_ns
    assert main(["train"] + _sets()) == 0
    cap = capsys.readouterr()
    assert _json_lines(cap.out)[-1]["skipped"] is True and "skip:" in cap.err
    assert (out / "runs" / metrics["run_id"] / "metrics.json").stat().st_mtime_ns == before

    assert main(["diagnose", run] + _sets()) == 0
    written = _json_lines(capsys.readouterr().out)[-1]["written"]
    assert set(written) >= {"confusion_f1.csv", "stitch.json", "bias.json", "predictions.npz", "metrics.json"}
    done = json.loads((out / "runs" / metrics["run_id"] / "metrics.json").read_text())["diagnostics"]
    assert {"miou_initial", "miou_retrained"} <= set(done["decoder_retrain"])
    assert main(["diagnose", run] + _sets()) == 0
    assert _json_lines(capsys.readouterr().out)[-1]["written"] == []

    rep = out / "rep"
    assert main(["report", run, "--out", str(rep)] + _sets()) == 0
    for stem in ("stitch_profiles", "bias_values", f"confusion_{metrics['run_id']}", f"predictions_{metrics['run_id']}"):
        assert (rep / f"{stem}.png").exists() and (rep / f"{stem}.svg").exists()
    rows = json.loads((rep / "summary.json").read_text())
    m = json.loads((out / "runs" / metrics["run_id"] / "metrics.json").read_text())
    assert rows[0]["all"] == m["final"]["all"] and rows[0]["old"] == m["final"]["old"]
    assert rows[0]["miou_R"] == m["diagnostics"]["decoder_retrain"]["miou_retrained"]
    assert (rep / "missing.txt").read_text() == ""


def test_report_with_missing_artifacts(tmp_path):
    written = render_report([], tmp_path / "empty")
    assert (tmp_path / "empty" / "summary.md").exists() and written
    assert "no run directories" in (tmp_path / "empty" / "missing.txt").read_text()
    d = tmp_path / "partial"
    d.mkdir()
    (d / "metrics.json").write_text(json.dumps({"method": "finetune", "final": {"all": 0.5}}))
    render_report([d], tmp_path / "r")
    text = (tmp_path / "r" / "summary.md").read_text()
    assert "missing" in text and "stitch.json" in (tmp_path / "r" / "missing.txt").read_text()


def test_matrix_small(out, capsys):
    code = main(["matrix", "--methods", "finetune,lwf", "--regimes", "disjoint", "--probes", "bias"] + _sets())
    assert code == 0
    res = _json_lines(capsys.readouterr().out)[-1]
    assert len(res["runs"]) == 2
    table = (out / "reports").glob("matrix-*/table1.md")
    text = next(table).read_text()
    assert "finetune" in text and "lwf" in text and np.isfinite(float(text.splitlines()[2].split("|")[2]))
