import json
import re
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from vesselnet import checkpoint, cli
from vesselnet.model import ModelConfig, build
from vesselnet.rng import Rng


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.sau2"
    checkpoint.save_checkpoint(path, build(ModelConfig(), Rng(0)))
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(root), "--n", "3", "--size", "32"]) == 0
    return root


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_summary_reports_budget(capsys):
    code, out, _ = run(capsys, "summary")
    assert code == 0
    assert "params=260521 (0.26M)" in out
    gflops = float(re.search(r"gflops=([\d.]+)", out).group(1))
    assert abs(gflops - 21.19) / 21.19 <= 0.05
    size = int(re.search(r"checkpoint_bytes=(\d+)", out).group(1))
    assert size <= 1_300_000
    assert "attention_blocks=4 x 98 params" in out


def test_summary_without_attention(capsys):
    _, out, _ = run(capsys, "summary", "--skip-attention", "none", "--no-bottleneck-sa")
    assert f"params={260521 - 4 * 98} " in out
    assert "attention_blocks=0" in out


def test_gradcheck_ops_exit_zero(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops-only")
    assert code == 0
    assert "FAIL" not in out
    assert re.search(r"(\d+)/\1 checks passed", out)


def test_predict_writes_probabilities(capsys, model_file, tmp_path):
    img = (np.random.default_rng(0).random((37, 45, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    code, _, _ = run(capsys, "predict", "--model", str(model_file), "--input", str(tmp_path / "in.png"),
                     "--output", str(tmp_path / "p.png"), "--mask-output", str(tmp_path / "m.png"))
    assert code == 0
    params, _ = checkpoint.load_checkpoint(model_file)
    prob = cli.predict_image(params, img.transpose(2, 0, 1).astype(np.float32) / 255)
    written = np.asarray(Image.open(tmp_path / "p.png"))
    assert written.shape == (37, 45)
    np.testing.assert_array_equal(written, np.rint(prob[0] * 255).astype(np.uint8))
    mask = np.asarray(Image.open(tmp_path / "m.png"))
    assert set(np.unique(mask)) <= {0, 255}
    np.testing.assert_array_equal(mask == 255, prob[0] >= 0.5)


def test_predict_timing_line(capsys, model_file):
    code, out, _ = run(capsys, "predict", "--model", str(model_file), "--timing",
                       "--timing-runs", "2", "--timing-size", "64x64")
    assert code == 0
    assert re.fullmatch(r"mean_s=\d+\.\d{4} over 2 runs\n", out)


def test_exit_codes(capsys, tmp_path, model_file):
    assert run(capsys, "train")[0] == 2
    assert run(capsys, "train", "--data-dir", str(tmp_path / "missing"), "--out", str(tmp_path / "o"))[0] == 3
    junk = tmp_path / "junk.sau2"
    junk.write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "predict", "--model", str(junk), "--timing")
    assert code == 4 and "offset 0" in err
    assert run(capsys, "predict", "--model", str(model_file))[0] == 2


def test_train_then_eval(capsys, synth_dir, tmp_path):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "--threads", "1", "train", "--data-dir", str(synth_dir), "--out", str(out),
                        "--epochs", "2", "--augment", "3", "--pad-to", "32x32", "--channels", "8,8,8,8",
                        "--batch-size", "4", "--seed", "3")
    assert code == 0 and text.startswith("best_epoch=")
    manifest = json.loads((out / "run.json").read_text())
    assert len(manifest["validation_ids"]) == 1   # floor(0.1 * 9 + 0.5)
    for name in ("best.sau2", "last.sau2", "history.csv"):
        assert (out / name).exists()

    code, text, _ = run(capsys, "eval", "--model", str(out / "best.sau2"), "--data-dir", str(synth_dir))
    assert code == 0
    record = text.splitlines()[0]
    assert re.fullmatch(r"dataset=drive fov=0 threshold=0\.5( \w+=\d\.\d{4}){7}", record)

    code, text, _ = run(capsys, "eval", "--model", str(out / "best.sau2"), "--run-dir", str(out))
    values = dict(kv.split("=") for kv in text.splitlines()[0].split()[3:])
    for k, v in manifest["best_val_metrics"].items():
        assert float(values[k]) == pytest.approx(v, abs=5e-5)

    code, text, _ = run(capsys, "--threads", "1", "train", "--from-manifest", str(out / "run.json"),
                        "--out", str(tmp_path / "replay"))
    assert code == 0
    assert (tmp_path / "replay" / "best.sau2").read_bytes() == (out / "best.sau2").read_bytes()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vesselnet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "predict", "eval", "summary", "gradcheck"):
        assert cmd in proc.stdout


def test_thread_request_is_capped_at_usable_cores(capsys, caplog):
    with caplog.at_level("WARNING"):
        code, out, _ = run(capsys, "--threads", str(cli.usable_cores() + 3), "summary")
    assert code == 0 and "params=" in out
    assert "usable cores" in caplog.text
