import json
import subprocess
import sys

import pytest

from moedet.cli import build_parser, main, parse_dataset_paths
from moedet.data import read_dataset

TINY = ["--hidden-channels", "8", "--num-bins", "4", "--epochs", "1", "--batch-size", "16",
        "--train-per-domain", "16", "--val-per-domain", "4", "--test-per-domain", "4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for dom in "AB":
        assert main(["gen-data", "--domain", dom, "--count", "16", "--output", str(d / f"{dom}.bin")]) == 0
        assert main(["pretrain", *TINY, "--domain", dom, "--train-data", f"{dom}={d / f'{dom}.bin'}",
                     "--checkpoint", str(d / f"{dom}.ckpt")]) == 0
    assert main(["train-moe", *TINY, "--experts", f"{d / 'A.ckpt'},{d / 'B.ckpt'}",
                 "--checkpoint", str(d / "moe.ckpt")]) == 0
    return d


def test_parse_dataset_paths():
    assert parse_dataset_paths("A=a.bin, b.bin,") == [("A", "a.bin"), ("", "b.bin")]


def test_every_config_field_is_a_flag():
    args = build_parser().parse_args(["pretrain", "--lambda-lb", "0.3", "--freeze-experts"])
    assert args.lambda_lb == "0.3" and args.freeze_experts == "true"


def test_gen_data(workdir):
    scenes = read_dataset(workdir / "A.bin")
    assert len(scenes) == 16


def test_eval_writes_reports(workdir, capsys):
    out = workdir / "eval"
    code = main(["eval", *TINY, "--checkpoint", str(workdir / "moe.ckpt"),
                 "--test-data", f"A={workdir / 'A.bin'},B={workdir / 'B.bin'}", "--output", str(out)])
    assert code == 0
    kv = dict(line.split("=") for line in (workdir / "eval.kv").read_text().splitlines())
    assert {"A.mAP_50_95", "B.AR_100", "combined.mAP_50", "combined.AP_50_95.class0"} <= kv.keys()
    assert "combined" in (workdir / "eval.txt").read_text()
    assert "combined" in capsys.readouterr().out


def test_inspect_routing_output(workdir, capsys):
    assert main(["inspect-routing", *TINY, "--checkpoint", str(workdir / "moe.ckpt")]) == 0
    text = capsys.readouterr().out
    report = json.loads(text)
    assert len(report["levels"]) == 3
    assert main(["inspect-routing", *TINY, "--checkpoint", str(workdir / "A.ckpt")]) == 2


def test_benchmark_cli(tmp_path):
    out = tmp_path / "bench"
    assert main(["benchmark", *TINY, "--ablation", "--output", str(out)]) == 0
    kv = (tmp_path / "bench.kv").read_text()
    assert "moe_AB_lb0.combined_mAP=" in kv and "routing.moe_AB.entropy=" in kv


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    assert main(["pretrain", *TINY]) == 1  # missing --checkpoint
    assert main(["gen-data", "--count", "2"]) == 1  # missing --output
    assert main(["pretrain", "--lr", "-1", "--checkpoint", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key=1\n")
    assert main(["pretrain", "--config", str(bad), "--checkpoint", str(tmp_path / "x")]) == 1


def test_format_errors(tmp_path, workdir):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a dataset")
    assert main(["eval", *TINY, "--checkpoint", str(workdir / "moe.ckpt"), "--test-data", str(junk)]) == 2
    assert main(["eval", *TINY, "--checkpoint", str(junk)]) == 2
    assert main(["eval", *TINY, "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_numerical_failure_exit_code(monkeypatch, capsys):
    from moedet import gradcheck
    bad = gradcheck.GradCheck("fake", 1.0, 1, {})
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed: [bad])
    assert main(["grad-check"]) == 3
    assert "FAIL fake" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_code(tmp_path):
    assert main(["pretrain", *TINY, "--lr", "1e30", "--optimizer", "sgd", "--epochs", "3",
                 "--checkpoint", str(tmp_path / "x.ckpt")]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "moedet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "grad-check" in res.stdout
