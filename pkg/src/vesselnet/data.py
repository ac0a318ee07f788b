"""Fundus dataset ingestion, padding, offline augmentation and validation split.

Expected layout::

    root/training/{images,labels,fov}/*.png|*.ppm|*.pgm
    root/test/{images,labels,fov}/...

Files are paired by lexicographic order within each directory.  For STARE a
flat ``root/{images,labels}`` layout is also accepted; the first 16 sorted
images train and the rest test.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import IngestError, ShapeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


@dataclass
class Sample:
    image: np.ndarray               # (3, h, w) float32 in [0, 1]
    label: np.ndarray               # (1, h, w) float32 in {0, 1}
    fov: Optional[np.ndarray]       # (1, h, w) float32 in {0, 1} or None
    id: str
    original_size: tuple
    variant: str = "orig"

    def __post_init__(self):
        h, w = self.image.shape[1:]
        if self.label.shape[1:] != (h, w) or (self.fov is not None and self.fov.shape[1:] != (h, w)):
            raise ShapeError(f"{self.id}: image, label and fov sizes disagree")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    pad_to: tuple
    split: str = "official"         # "official" or "first-n"
    n_train: int = 20
    use_fov: bool = True
    batch_size: int = 8

    def __post_init__(self):
        H, W = self.pad_to
        if H % 8 or W % 8:
            raise ShapeError(f"pad_to {self.pad_to} must be divisible by 8")


DATASETS = {
    "drive": DatasetSpec("drive", (592, 592), "official", 20, use_fov=True, batch_size=8),
    "stare": DatasetSpec("stare", (704, 704), "first-n", 16, use_fov=False, batch_size=2),
}


# -- file I/O --------------------------------------------------------------


def _list_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise IngestError(f"missing directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestError(f"no PNG/NetPBM images in {d}")
    return files


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except FileNotFoundError:
        raise IngestError(f"missing file: {path}") from None
    except OSError as exc:
        raise IngestError(f"cannot decode {path}: {exc}") from None


def read_rgb(path):
    arr = np.asarray(_open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_mask(path):
    """8-bit mask thresholded at 0.5 into a (1, h, w) binary float array."""
    raw = np.asarray(_open(path).convert("L"))
    if not np.all((raw == 0) | (raw == 255)):
        log.warning("%s is not strictly binary; thresholding at 0.5", path)
    return (raw >= 128).astype(np.float32)[None]


def write_png(path, arr):
    """Write a (1|3, h, w) float array in [0, 1] as an 8-bit PNG."""
    a = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[0] == 3:
        Image.fromarray(a.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        Image.fromarray(a.reshape(a.shape[-2:]), mode="L").save(path)


def _load_split(root, stems_from=None, with_fov=True):
    images = _list_images(root / "images")
    labels = _list_images(root / "labels")
    if len(images) != len(labels):
        raise IngestError(f"{root}: {len(images)} images but {len(labels)} labels")
    fovs = None
    if with_fov and (root / "fov").is_dir():
        fovs = _list_images(root / "fov")
        if len(fovs) != len(images):
            raise IngestError(f"{root}: {len(images)} images but {len(fovs)} FOV masks")
    out = []
    for i, (ip, lp) in enumerate(zip(images, labels)):
        img = read_rgb(ip)
        out.append(Sample(img, read_mask(lp), read_mask(fovs[i]) if fovs else None,
                          ip.stem, img.shape[1:]))
    return out


def load_dataset(root, spec):
    """Return ``(train, test)`` sample lists at native resolution."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root does not exist: {root}")
    if (root / "training").is_dir() or spec.split == "official":
        train = _load_split(root / "training", with_fov=spec.use_fov)
        test = _load_split(root / "test", with_fov=spec.use_fov)
    else:
        everything = _load_split(root, with_fov=False)
        train, test = everything[:spec.n_train], everything[spec.n_train:]
        if not test:
            raise IngestError(f"{root}: need more than {spec.n_train} images for a test split")
    return train, test


# -- geometry --------------------------------------------------------------


def pad_offsets(size, to):
    (h, w), (H, W) = size, to
    if H < h or W < w:
        raise ShapeError(f"cannot pad {h}x{w} down to {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    return top, H - h - top, left, W - w - left


def pad_array(arr, to):
    top, bottom, left, right = pad_offsets(arr.shape[-2:], to)
    widths = [(0, 0)] * (arr.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(arr, widths)


def pad(s, to):
    """Zero-pad symmetrically; the odd extra row/column goes bottom/right."""
    return replace(
        s,
        image=pad_array(s.image, to),
        label=pad_array(s.label, to),
        fov=None if s.fov is None else pad_array(s.fov, to),
    )


def crop_back(pred, original_size):
    """Undo :func:`pad` on the last two axes of ``pred``."""
    H, W = pred.shape[-2:]
    top, _, left, _ = pad_offsets(original_size, (H, W))
    h, w = original_size
    return pred[..., top:top + h, left:left + w]


# -- augmentation ----------------------------------------------------------

GEOMETRIC = {
    "orig": lambda a: a,
    "hflip": lambda a: a[..., ::-1],
    "vflip": lambda a: a[..., ::-1, :],
    "rot180": lambda a: np.rot90(a, 2, axes=(-2, -1)),
    "rot90": lambda a: np.rot90(a, 1, axes=(-2, -1)),
    "rot270": lambda a: np.rot90(a, 3, axes=(-2, -1)),
}
DEFAULT_VARIANTS = ("orig", "hflip", "vflip", "rot180", "rot90", "rot270",
                    "noise", "gamma0.8", "gamma1.2")
NOISE_SIGMA = 0.02


def _variant_names(k):
    names = list(DEFAULT_VARIANTS[:k])
    names += [f"noise{j}" for j in range(1, k - len(DEFAULT_VARIANTS) + 1)]
    return names


def apply_variant(s, variant, rng):
    if variant in GEOMETRIC:
        if variant in ("rot90", "rot270") and s.image.shape[1] != s.image.shape[2]:
            raise ShapeError(f"{variant} needs a square canvas, got {s.image.shape[1:]}")
        f = GEOMETRIC[variant]
        return replace(s, image=np.ascontiguousarray(f(s.image)),
                       label=np.ascontiguousarray(f(s.label)),
                       fov=None if s.fov is None else np.ascontiguousarray(f(s.fov)),
                       id=f"{s.id}_{variant}", variant=variant)
    if variant.startswith("noise"):
        noise = rng.normal(0.0, NOISE_SIGMA, size=s.image.shape)
        image = np.clip(s.image + noise, 0.0, 1.0).astype(np.float32)
    elif variant.startswith("gamma"):
        image = np.power(s.image, np.float32(float(variant[5:]))).astype(np.float32)
    else:
        raise ValueError(f"unknown augmentation variant {variant!r}")
    return replace(s, image=image, id=f"{s.id}_{variant}", variant=variant)


def augment(samples, multiplier=len(DEFAULT_VARIANTS), rng=None):
    """Expand each sample into ``multiplier`` variants, in a fixed order.

    Geometric variants move the label and FOV with the image; photometric
    ones (noise, gamma) touch the image only.
    """
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    names = _variant_names(multiplier)
    out = []
    for s in samples:
        base = rng.split(s.id) if rng is not None else None
        for name in names:
            if name.startswith("noise") and base is None:
                raise ValueError("noise augmentation needs an rng")
            out.append(apply_variant(s, name, base.split(name) if base is not None else None))
    return out


def split_validation(samples, fraction=0.10, rng=None):
    """Seeded split without replacement; returns ``(train, val)`` in input order."""
    if not samples:
        raise ValueError("cannot split an empty sample list")
    n = len(samples)
    n_val = int(np.floor(fraction * n + 0.5))
    chosen = set(rng.permutation(n)[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in chosen]
    val = [s for i, s in enumerate(samples) if i in chosen]
    return train, val


def write_cache(samples, directory, seed, multiplier):
    """Write ``images|labels|fov/<id>_<variant>.png`` plus ``manifest.json``."""
    d = Path(directory)
    for sub in ("images", "labels", "fov"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        fname = f"{s.id}.png"
        write_png(d / "images" / fname, s.image)
        write_png(d / "labels" / fname, s.label)
        if s.fov is not None:
            write_png(d / "fov" / fname, s.fov)
        entries.append({"file": fname, "variant": s.variant, "original_size": list(s.original_size)})
    manifest = {"seed": seed, "multiplier": multiplier,
                "variants": _variant_names(multiplier), "samples": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d / "manifest.json"


def batches(samples, batch_size, order=None):
    """Yield ``(images, labels)`` float32 batches in ``order`` (default: input order)."""
    idx = range(len(samples)) if order is None else order
    idx = list(idx)
    for start in range(0, len(idx), batch_size):
        chunk = [samples[i] for i in idx[start:start + batch_size]]
        yield (np.stack([s.image for s in chunk]).astype(np.float32),
               np.stack([s.label for s in chunk]).astype(np.float32))


def synthetic_vessels(n, size=64, seed=0):
    """Random branching-line 'vessel' images for smoke tests.

    Vessels are dark curved strokes on a bright reddish background, with the
    label marking the stroke pixels.
    """
    from .rng import Rng

    out = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for i in range(n):
        r = Rng(seed).split("synthetic").split(i)
        label = np.zeros((size, size), dtype=bool)
        for _ in range(4):
            x0, y0 = r.uniform(0, size, 2)
            angle = r.uniform(0, 2 * np.pi)
            curve = r.uniform(-0.05, 0.05)
            width = r.uniform(0.8, 2.2)
            for t in np.linspace(0, size * 1.2, int(size * 3)):
                a = angle + curve * t
                cx, cy = x0 + t * np.cos(a) / 1.2, y0 + t * np.sin(a) / 1.2
                label |= (xx - cx) ** 2 + (yy - cy) ** 2 <= width ** 2
        base = np.stack([0.75 - 0.002 * xx, 0.35 + 0.001 * yy, 0.15 + 0 * xx])
        image = base - 0.25 * label[None]
        image = np.clip(image + r.normal(0, 0.02, image.shape), 0, 1).astype(np.float32)
        out.append(Sample(image, label[None].astype(np.float32), None, f"syn{i:02d}", (size, size)))
    return out
