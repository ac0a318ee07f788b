"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line.

Criterion 11 (full-dataset accuracy) is a multi-hour run and is not part of
the gate; see the README for the long-run command.
"""

import re

import numpy as np
import pytest

from oracles import (auc_pairwise, channel_mean_loops, conv2d_loops, group_norm_direct, maxpool_scan,
                     param_count_closed_form)
from vesselnet import checkpoint, cli, gradcheck, ops
from vesselnet.autodiff import Tensor, shadow64
from vesselnet.losses import LossWeights, mcc_loss
from vesselnet.metrics import HardConfusion, auc, confusion, metric_suite
from vesselnet.model import ModelConfig, build, count_params, forward
from vesselnet.optim import AdamState
from vesselnet.rng import Rng
from vesselnet.trainer import train_step


def summary(capsys, *argv):
    assert cli.main(["summary", *argv]) == 0
    return capsys.readouterr().out


def test_c01_parameter_reconciliation(capsys, acceptance):
    default = summary(capsys)
    wide = summary(capsys, "--channels", "16,32,64,128", "--skip-attention", "none")
    n_default = int(re.search(r"params=(\d+) \((\S+)M\)", default).group(1))
    n_wide, label_wide = re.search(r"params=(\d+) \((\S+)M\)", wide).groups()
    acceptance("01 parameter reconciliation", f"default={n_default} wide={n_wide}")
    assert n_default == param_count_closed_form((16, 32, 48, 64)) == 260_521
    assert "(0.26M)" in default
    assert int(n_wide) == param_count_closed_form((16, 32, 64, 128), "none", True) == 537_299
    assert label_wide == "0.54"


def test_c02_attention_budget(acceptance):
    names = build(ModelConfig(), Rng(0))
    gates = {k: names[k].size for k in names if ".sa." in k or ".csa." in k}
    sa_only = build(ModelConfig(skip_attention="sa"), Rng(0))
    gates.update({k: sa_only[k].size for k in sa_only if ".sa." in k})
    acceptance("02 attention budget", f"{len(gates)} gates, sizes {sorted(set(gates.values()))}")
    assert len(gates) == 7 and set(gates.values()) == {98}
    assert [k for k in names if "conv7" in k and not k.endswith("weight")] == []


def test_c03_flops(capsys, acceptance):
    out = summary(capsys)
    g = float(re.search(r"gflops=([\d.]+) at 592x592x3", out).group(1))
    dev = (g - 21.19) / 21.19
    acceptance("03 flops", f"{g:.2f} GFLOPs vs 21.19 ({100 * dev:+.1f}%)")
    assert abs(dev) <= 0.15


def test_c04_gradient_suite(acceptance):
    results = gradcheck.run_suite(seed=0)
    worst = max(results, key=lambda r: r.max_error)
    names = {r.name for r in results}
    acceptance("04 gradient suite", f"{len(results)} checks, worst {worst.name} {worst.max_error:.1e}")
    assert {"model[none]", "model[sa]", "model[csa]", "mcc_loss_near_degenerate"} <= names
    assert all(r.n_coords >= 20 for r in results)
    assert all(r.passed for r in results), [(r.name, r.max_error) for r in results if not r.passed]


def test_c05_oracle_equivalence(acceptance):
    # kernels run in the 64-bit shadow mode so the comparison measures the
    # algorithm, not float32 storage rounding
    with shadow64():
        errs, hand = _oracle_errors()
    acceptance("05 oracle equivalence", " ".join(f"{k}={v:.1e}" for k, v in errs.items()))
    assert max(errs[k] for k in ("conv2d", "maxpool", "channel_mean", "group_norm", "mcc")) < 1e-6
    assert errs["auc"] < 1e-9
    assert (round(hand.f1, 3), round(hand.jacc, 4), round(hand.mcc, 4)) == (0.8, 0.6667, 0.7778)


def _oracle_errors():
    r = np.random.default_rng(5)
    x, w, b = r.normal(size=(2, 3, 9, 7)), r.normal(size=(4, 3, 3, 3)), r.normal(size=4)
    conv = ops.conv2d(Tensor(x), ops.ConvParams(Tensor(w), Tensor(b.reshape(1, 4, 1, 1)))).data
    errs = {"conv2d": np.abs(conv - conv2d_loops(x, w, b)).max()}
    xp = r.normal(size=(2, 3, 8, 6))
    errs["maxpool"] = np.abs(ops.maxpool2(Tensor(xp)).data - maxpool_scan(xp)).max()
    errs["channel_mean"] = np.abs(ops.channel_mean(Tensor(xp)).data - channel_mean_loops(xp)).max()
    xg = r.normal(size=(2, 16, 5, 5))
    gn = ops.group_norm(Tensor(xg), ops.GroupNormParams(Tensor(np.ones((1, 16, 1, 1))),
                                                         Tensor(np.zeros((1, 16, 1, 1)))))
    errs["group_norm"] = np.abs(gn.data - group_norm_direct(xg, 8, 1e-5)).max()
    p, y = np.round(r.random(1000), 3), (r.random(1000) < 0.3).astype(float)
    errs["auc"] = abs(auc(p, y) - auc_pairwise(p, y))
    pb, yb = (r.random((1, 1, 16, 16)) < 0.4).astype(float), (r.random((1, 1, 16, 16)) < 0.2).astype(float)
    errs["mcc"] = abs(metric_suite(confusion(pb, yb)).mcc - (1 - mcc_loss(Tensor(pb), Tensor(yb)).item()))
    return errs, metric_suite(HardConfusion(tp=8, fp=2, fn=2, tn=88))


def test_c06_dropblock_statistics(acceptance):
    cfg = ops.DropBlockConfig(0.15, 7)
    x = Tensor(np.ones((1, 1, 64, 64)))
    base = Rng(0).split("acceptance-dropblock")
    zero = np.mean([np.mean(ops.dropblock(x, cfg, "train", base.split(i)).data == 0) for i in range(200)])
    feats = Tensor(np.random.default_rng(0).normal(size=(2, 4, 64, 64)))
    same = ops.dropblock(feats, cfg, "eval", base).data
    acceptance("06 dropblock statistics", f"zero fraction {zero:.4f}")
    assert 0.13 <= zero <= 0.17
    np.testing.assert_array_equal(same, feats.data)


def test_c07_overfit_smoke(smoke_samples, acceptance):
    params, state = build(ModelConfig(), Rng(0).split("init")), AdamState()
    x = np.stack([s.image for s in smoke_samples])
    y = np.stack([s.label for s in smoke_samples])
    losses = [train_step(params, state, x, y, LossWeights(0.5, 0.5), Rng(0).split("step").split(i))
              for i in range(200)]
    f1 = metric_suite(confusion(forward(params, x).data, y)).f1
    acceptance("07 overfit smoke", f"F1={f1:.4f} loss {losses[0]:.3f} -> step50 {losses[49]:.3f} "
                                   f"-> {losses[-1]:.3f}")
    assert losses[49] < losses[0]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert f1 > 0.95


def test_c08_determinism(tmp_path, capsys, acceptance):
    data_dir = tmp_path / "smoke"
    assert cli.main(["synth", "--out", str(data_dir), "--n", "2", "--size", "64"]) == 0
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli.main(["--threads", "1", "train", "--seed", "7", "--data-dir", str(data_dir),
                         "--pad-to", "64x64", "--epochs", "3", "--out", str(out)])
        assert code == 0
        blobs.append((out / "best.sau2").read_bytes())
    capsys.readouterr()
    acceptance("08 determinism", f"best.sau2 {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}")
    assert blobs[0] == blobs[1]


@pytest.mark.slow
def test_c09_inference_latency(tmp_path, capsys, acceptance):
    path = tmp_path / "m.sau2"
    checkpoint.save_checkpoint(path, build(ModelConfig(), Rng(0)))
    assert cli.main(["--threads", "4", "predict", "--model", str(path), "--timing"]) == 0
    out = capsys.readouterr().out
    mean_s = float(re.search(r"mean_s=([\d.]+) over 20 runs", out).group(1))
    acceptance("09 inference latency", f"mean {mean_s:.3f} s per 592x592 image (reference 0.95 s)")
    assert mean_s <= 3.0


def test_c10_checkpoint(tmp_path, acceptance):
    params = build(ModelConfig(), Rng(0))
    a = tmp_path / "a.sau2"
    size = checkpoint.save_checkpoint(a, params)
    loaded, _ = checkpoint.load_checkpoint(a)
    b = tmp_path / "b.sau2"
    checkpoint.save_checkpoint(b, loaded)
    acceptance("10 checkpoint", f"{size} bytes ({size / 1e6:.3f} MB), round-trip identical")
    assert a.read_bytes() == b.read_bytes()
    assert size <= 1_300_000
    assert count_params(loaded) == 260_521
