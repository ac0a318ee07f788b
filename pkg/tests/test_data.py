import json

import numpy as np
import pytest
from PIL import Image

from vesselnet.data import (DATASETS, GEOMETRIC, NOISE_SIGMA, Sample, apply_variant, augment, crop_back,
                            load_dataset, pad, pad_offsets, read_mask, split_validation, write_cache)
from vesselnet.errors import IngestError, ShapeError
from vesselnet.rng import Rng


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _fake_split(root, n, h, w, seed, fov=True, start=0):
    r = np.random.default_rng(seed)
    for i in range(start, start + n):
        _write(root / "images" / f"{i:02d}.png", r.integers(0, 256, (h, w, 3), dtype=np.uint8))
        _write(root / "labels" / f"{i:02d}.png", (r.random((h, w)) < 0.1).astype(np.uint8) * 255)
        if fov:
            _write(root / "fov" / f"{i:02d}.png", np.full((h, w), 255, np.uint8))


@pytest.fixture(scope="module")
def drive_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("drive")
    _fake_split(root / "training", 20, 584, 565, 0, start=21)
    _fake_split(root / "test", 20, 584, 565, 1, start=1)
    return root


def test_drive_layout(drive_root):
    train, test = load_dataset(drive_root, DATASETS["drive"])
    assert len(train) == len(test) == 20
    s = train[0]
    assert s.image.shape == (3, 584, 565) and s.image.dtype == np.float32
    assert s.label.shape == s.fov.shape == (1, 584, 565)
    assert s.original_size == (584, 565)
    assert 0 <= s.image.min() and s.image.max() <= 1
    assert set(np.unique(s.label)) <= {0.0, 1.0}


def test_stare_flat_layout_first_sixteen(tmp_path):
    _fake_split(tmp_path, 20, 605 // 5, 700 // 5, 2, fov=False)
    train, test = load_dataset(tmp_path, DATASETS["stare"])
    assert [s.id for s in train] == [f"{i:02d}" for i in range(16)]
    assert [s.id for s in test] == [f"{i:02d}" for i in range(16, 20)]
    assert train[0].fov is None


def test_ingest_errors(tmp_path):
    with pytest.raises(IngestError):
        load_dataset(tmp_path / "nope", DATASETS["drive"])
    (tmp_path / "training" / "images").mkdir(parents=True)
    with pytest.raises(IngestError):
        load_dataset(tmp_path, DATASETS["drive"])
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(IngestError):
        read_mask(bad)


def test_non_binary_mask_thresholded_with_warning(tmp_path, caplog):
    _write(tmp_path / "m.png", np.array([[0, 127, 128, 255]], np.uint8))
    with caplog.at_level("WARNING"):
        m = read_mask(tmp_path / "m.png")
    np.testing.assert_array_equal(m, [[[0, 0, 1, 1]]])
    assert "not strictly binary" in caplog.text


def _sample(h, w, seed=0, fov=True):
    r = np.random.default_rng(seed)
    return Sample(r.random((3, h, w), dtype=np.float32),
                  (r.random((1, h, w)) < 0.2).astype(np.float32),
                  np.ones((1, h, w), np.float32) if fov else None, f"s{seed}", (h, w))


def test_pad_offsets():
    assert pad_offsets((584, 565), (592, 592)) == (4, 4, 13, 14)
    assert pad_offsets((605, 700), (704, 704)) == (49, 50, 2, 2)
    with pytest.raises(ShapeError):
        pad_offsets((600, 600), (592, 592))


def test_pad_crop_round_trip():
    s = _sample(37, 29)
    p = pad(s, (48, 40))
    assert p.image.shape == (3, 48, 40)
    np.testing.assert_array_equal(crop_back(p.image, s.original_size), s.image)
    np.testing.assert_array_equal(crop_back(p.label, s.original_size), s.label)
    assert p.image[:, :5].sum() == 0 and p.image[:, :, -6:].sum() == 0


@pytest.mark.parametrize("name", ["hflip", "vflip", "rot180"])
def test_self_inverse_flips(name):
    a = np.arange(24).reshape(1, 4, 6)
    np.testing.assert_array_equal(GEOMETRIC[name](GEOMETRIC[name](a)), a)


def test_rotations_compose_to_identity():
    a = np.arange(16).reshape(1, 4, 4)
    np.testing.assert_array_equal(GEOMETRIC["rot270"](GEOMETRIC["rot90"](a)), a)


def test_augment_preserves_labels_and_order():
    s = _sample(16, 16)
    out = augment([s], rng=Rng(0))
    assert [o.variant for o in out] == ["orig", "hflip", "vflip", "rot180", "rot90", "rot270",
                                        "noise", "gamma0.8", "gamma1.2"]
    for o in out:
        assert set(np.unique(o.label)) <= {0.0, 1.0}
        assert o.label.sum() == s.label.sum()
        assert o.image.min() >= 0 and o.image.max() <= 1
    np.testing.assert_array_equal(out[1].label, s.label[..., ::-1])
    np.testing.assert_array_equal(out[6].label, s.label)
    np.testing.assert_allclose(out[7].image, s.image ** 0.8, rtol=1e-6)
    again = augment([s], rng=Rng(0))
    np.testing.assert_array_equal(out[6].image, again[6].image)
    assert len(augment([s], multiplier=11, rng=Rng(0))) == 11


def test_noise_level():
    s = Sample(np.full((3, 592, 592), 0.5, np.float32), np.zeros((1, 592, 592), np.float32),
               None, "flat", (592, 592))
    diff = apply_variant(s, "noise", Rng(3)).image - s.image
    mad = np.abs(diff).mean()
    expected = NOISE_SIGMA * np.sqrt(2 / np.pi)
    assert abs(mad - expected) / expected < 0.10


def test_validation_split():
    samples = [_sample(8, 8, i, fov=False) for i in range(180)]
    tr, val = split_validation(samples, 0.10, Rng(5))
    assert len(val) == 18 and len(tr) == 162
    assert not {s.id for s in tr} & {s.id for s in val}
    tr2, val2 = split_validation(samples, 0.10, Rng(5))
    assert [s.id for s in val] == [s.id for s in val2]
    _, val3 = split_validation(samples, 0.10, Rng(6))
    assert [s.id for s in val] != [s.id for s in val3]


def test_write_cache(tmp_path):
    out = augment([_sample(16, 16)], multiplier=3, rng=Rng(0))
    manifest = json.loads(write_cache(out, tmp_path, seed=0, multiplier=3).read_text())
    assert manifest["variants"] == ["orig", "hflip", "vflip"]
    assert len(manifest["samples"]) == 3
    for e in manifest["samples"]:
        assert (tmp_path / "images" / e["file"]).exists()
        assert (tmp_path / "labels" / e["file"]).exists()
        assert (tmp_path / "fov" / e["file"]).exists()
