import json
import subprocess
import sys

import pytest
import yaml

from virtdomain.cli import build_parser, config_from_args, main

FAST = ["--pretrain-epochs", "3", "--adapt-epochs", "2", "--samples-per-class", "30", "--disc-widths", "8"]


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"lam": 4.0, "r_percent": 30.0, "dataset": {"rotation_degrees": 10.0}}))
    args = build_parser().parse_args(["run", "--config", str(cfg), "--lambda", "8", "--no-tc"])
    c = config_from_args(args)
    assert c.lam == 8.0 and c.r_percent == 30.0 and c.dataset.rotation_degrees == 10.0 and not c.tc_enabled


def test_json_config_and_resized_dataset(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 7}))
    c = config_from_args(build_parser().parse_args(["run", "--config", str(cfg), "--input-dim", "6", "--num-classes", "3"]))
    assert c.seed == 7 and c.network.input_dim == 6 and c.network.num_classes == 3


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--lambda", "-1"]) == 1
    with pytest.raises(SystemExit) as info:
        main(["run", "--not-a-flag"])
    assert info.value.code == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a list\n")
    assert main(["run", "--config", str(bad)]) == 1
    missing = tmp_path / "nope.csv"
    assert main(["run", "--source-csv", str(missing), "--target-csv", str(missing), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(tmp_path):
    assert main(["run", *FAST, "--eta0", "1e12", "--out", str(tmp_path)]) == 2


def test_stagewise_commands(tmp_path, capsys):
    out = tmp_path
    assert main(["pretrain", *FAST, "--out", str(out / "p")]) == 0
    assert (out / "p" / "source.npz").exists()
    assert main(["adapt", *FAST, "--checkpoint", str(out / "p" / "source.npz"), "--out", str(out / "a")]) == 0
    assert {"adapted.npz", "virtual_domain.txt", "diagnostics.jsonl"} <= {p.name for p in (out / "a").iterdir()}
    capsys.readouterr()
    assert main(["eval", *FAST, "--checkpoint", str(out / "a" / "adapted.npz"), "--out", str(out / "e")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert len(res["per_class_accuracy"]) == 4
    assert main(["plot", *FAST, "--checkpoint", str(out / "a" / "adapted.npz"), "--out", str(out / "pl")]) == 0
    assert (out / "pl" / "features.png").exists()


def test_run_writes_report_and_optional_plot(tmp_path):
    assert main(["run", *FAST, "--out", str(tmp_path / "a")]) == 0
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"report.json", "metrics.json", "diagnostics.jsonl", "source.npz", "adapted.npz"} <= names
    assert "features.png" not in names
    assert main(["run", *FAST, "--plot", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "features.png").exists()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("VIRTDOMAIN_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["pretrain", *FAST]) == 0
    assert (tmp_path / "root" / "pretrain" / "source.npz").exists()


def test_sweep_command(tmp_path):
    assert main(["sweep", *FAST, "--grid", "lam=2,6", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [s["overrides"]["lam"] for s in summary] == [2, 6]
    assert main(["sweep", *FAST, "--out", str(tmp_path)]) == 1


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "virtdomain.cli", "run", *FAST, "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "average_accuracy" in json.loads(proc.stdout)
