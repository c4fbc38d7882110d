import json
import subprocess
import sys

import pytest

from conftest import tiny_config
from resfri.cli import main
from resfri.config import save_config
from resfri.network import build_network, count_flops, count_params, desk_config
from resfri.trainer import TrainConfig


def run(args, capsys):
    code = main(args)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_cfg_path(tmp_path):
    path = tmp_path / "tiny.json"
    save_config(path, tiny_config(), TrainConfig(batch_size=16, eval_batch_size=64))
    return str(path)


def test_inspect_default_totals(capsys):
    code, out, _ = run(["inspect", "--json"], capsys)
    report = json.loads(out)
    net = build_network(desk_config())
    assert code == 0
    assert report["total_params"] == count_params(net)
    assert report["total_flops"] == count_flops(net)
    assert json.loads(json.dumps(report)) == report
    blocks = [r for r in report["blocks"] if r["name"].startswith("blocks.")]
    assert [b["pruning_ratio"] for b in blocks] == [0.7] * 3


def test_inspect_concatenation_larger(capsys, tmp_path):
    totals = {}
    for fusion in ("addition", "concatenation"):
        cfg = tmp_path / f"{fusion}.json"
        run(["init-config", "--out", str(cfg), "--fusion", fusion], capsys)
        _, out, _ = run(["inspect", "--config", str(cfg), "--json"], capsys)
        totals[fusion] = json.loads(out)["total_params"]
    assert totals["concatenation"] > totals["addition"]


def test_inspect_text_and_figure(capsys, tmp_path):
    fig = tmp_path / "summary.png"
    code, out, _ = run(["inspect", "--preset", "mnist", "--split", "--figure", str(fig)], capsys)
    assert code == 0 and "total" in out and "split=yes" in out
    assert fig.stat().st_size > 0


def test_invalid_config_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 7}')
    code, out, err = run(["inspect", "--config", str(bad)], capsys)
    assert code == 2
    msg = json.loads(err)
    assert msg["code"] == 2 and msg["error"] == "config" and "version" in msg["reason"]
    assert "Traceback" not in err and len(err.strip().splitlines()) == 1


def test_missing_dataset_exit_3(capsys, tmp_path, tiny_cfg_path):
    code, _, err = run(["train", "--config", tiny_cfg_path, "--dataset", "mnist",
                        "--data-root", str(tmp_path / "none"), "--out", str(tmp_path / "o")],
                       capsys)
    assert code == 3
    assert str(tmp_path / "none" / "mnist" / "train-images-idx3-ubyte") in json.loads(err)["reason"]


def test_data_root_env_fallback(capsys, tmp_path, tiny_cfg_path, monkeypatch, mnist_root):
    monkeypatch.setenv("RESFRI_DATA_ROOT", mnist_root)
    code, _, _ = run(["train", "--config", tiny_cfg_path, "--dataset", "mnist", "--epochs", "0",
                      "--out", str(tmp_path / "o"), "--quiet"], capsys)
    assert code == 0


def test_config_errors_exit_2(capsys, tmp_path, tiny_cfg_path, mnist_root):
    code, _, err = run(["train", "--dataset", "mnist", "--config", "/nonexistent.json",
                        "--data-root", mnist_root, "--out", str(tmp_path)], capsys)
    assert code == 2 and "nonexistent" in err
    code, _, err = run(["train", "--dataset", "cifar10", "--config", tiny_cfg_path,
                        "--data-root", mnist_root, "--out", str(tmp_path)], capsys)
    assert code == 2 and "channels" in err


def test_train_zero_epochs(capsys, tmp_path, tiny_cfg_path, mnist_root):
    out_dir = tmp_path / "run"
    code, out, _ = run(["train", "--config", tiny_cfg_path, "--dataset", "mnist",
                        "--data-root", mnist_root, "--epochs", "0", "--out", str(out_dir)],
                       capsys)
    assert code == 0
    assert (out_dir / "metrics.csv").read_text().splitlines() == \
        ["epoch,train_loss,val_loss,top1_err,top5_err,lr,wall_seconds"]
    for f in ("best.ckpt", "last.ckpt", "config.json", "test_metrics.json"):
        assert (out_dir / f).exists()


def test_train_resume_reproduces_rows(capsys, tmp_path, tiny_cfg_path, mnist_root):
    common = ["--config", tiny_cfg_path, "--dataset", "mnist", "--data-root", mnist_root,
              "--no-wall-time", "--quiet"]
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(["train", *common, "--epochs", "2", "--out", str(full)], capsys)[0] == 0
    assert run(["train", *common, "--epochs", "1", "--out", str(part)], capsys)[0] == 0
    assert run(["train", *common, "--epochs", "2", "--out", str(part),
                "--resume", str(part / "last.ckpt")], capsys)[0] == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "curves.png").exists()
    echo = json.loads((full / "config.json").read_text())
    assert echo["train"]["max_epochs"] == 2 and echo["run"]["dataset"] == "mnist"
    assert echo["run"]["policy"]["flip_prob"] == 0.0

    code, out, _ = run(["eval", "--checkpoint", str(full / "best.ckpt"), "--dataset", "mnist",
                        "--data-root", mnist_root, "--json"], capsys)
    res = json.loads(out)
    assert code == 0 and res["n"] == 40 and res["acc"] + res["top1_err"] == 1.0


def test_eval_missing_checkpoint(capsys, tmp_path, mnist_root):
    code, _, err = run(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--dataset", "mnist",
                        "--data-root", mnist_root], capsys)
    assert code == 3 and "x.ckpt" in err


def test_init_config_round_trip(capsys, tmp_path):
    path = tmp_path / "c.json"
    assert run(["init-config", "--out", str(path), "--preset", "mnist"], capsys)[0] == 0
    doc = json.loads(path.read_text())
    assert doc["version"] == 1 and len(doc["network"]["blocks"]) == 2


def test_gradcheck_tolerance_zero_exit_5(capsys):
    code, out, err = run(["gradcheck", "--tolerance", "0", "--no-blocks", "--coords", "3"], capsys)
    assert code == 5
    assert json.loads(err)["code"] == 5 and "[" in json.loads(err)["reason"]


def test_gradcheck_deterministic(capsys):
    a = run(["gradcheck", "--no-blocks", "--coords", "4", "--seed", "3"], capsys)
    b = run(["gradcheck", "--no-blocks", "--coords", "4", "--seed", "3"], capsys)
    assert a[0] == 0 and a[1] == b[1] and "max_rel_err" in a[1]


def test_console_script_installed():
    out = subprocess.run([sys.executable, "-m", "resfri.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
