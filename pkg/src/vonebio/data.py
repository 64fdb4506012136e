"""Directory-tree image datasets, a synthetic grating dataset, and batching.

On-disk layout is ``root/<split>/<class_name>/**/*.{png,jpg,jpeg}``. The
Tiny ImageNet validation layout (``val/images`` plus ``val_annotations.txt``)
is also understood.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


@dataclass
class DatasetIndex:
    root: Path
    class_names: list[str]
    splits: dict[str, list[tuple[Path, int]]]
    image_size: int = IMAGE_SIZE
    skipped: int = 0
    checksum: str = ""

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self, split: str) -> np.ndarray:
        return np.array([lab for _, lab in self.splits[split]], dtype=np.int64)

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.rglob("*") if p.suffix.lower() in EXTENSIONS and p.is_file())


def _readable(p: Path) -> bool:
    try:
        with Image.open(p) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def _tiny_val_entries(split_dir: Path) -> dict[str, list[Path]]:
    ann = split_dir / "val_annotations.txt"
    by_class: dict[str, list[Path]] = {}
    for line in ann.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            by_class.setdefault(parts[1], []).append(split_dir / "images" / parts[0])
    return {k: sorted(v) for k, v in by_class.items()}


def _split_entries(split_dir: Path) -> dict[str, list[Path]]:
    if (split_dir / "val_annotations.txt").exists():
        return _tiny_val_entries(split_dir)
    return {d.name: _image_files(d) for d in sorted(split_dir.iterdir()) if d.is_dir()}


def load_directory_dataset(root, split="train") -> DatasetIndex:
    """Index one or more splits of a class-subdirectory dataset.

    ``split`` may be a name or a sequence of names. Labels are the sorted
    class names across all requested splits. Unreadable files are skipped
    and counted; a class directory without images is an error.
    """
    root = Path(root)
    names = [split] if isinstance(split, str) else list(split)
    per_split = {}
    for s in names:
        sd = root / s
        if not sd.is_dir():
            raise FileNotFoundError(f"split directory {sd} does not exist")
        per_split[s] = _split_entries(sd)
    classes = sorted(set().union(*[set(e) for e in per_split.values()]))
    if not classes:
        raise ValueError(f"no class directories under {root}")
    label_of = {c: i for i, c in enumerate(classes)}

    splits: dict[str, list[tuple[Path, int]]] = {}
    skipped = 0
    h = hashlib.sha256()
    for s in names:
        items = []
        for cname, files in sorted(per_split[s].items()):
            good = []
            for p in files:
                if _readable(p):
                    good.append(p)
                else:
                    skipped += 1
                    log.warning("skipping unreadable image %s", p)
            if not good:
                raise ValueError(f"class {cname!r} in split {s!r} has no readable images")
            items.extend((p, label_of[cname]) for p in good)
        splits[s] = items
        for p, lab in items:
            h.update(f"{s}/{p.relative_to(root).as_posix()}:{lab}\n".encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return DatasetIndex(root=root, class_names=classes, splits=splits, skipped=skipped, checksum=h.hexdigest())


def decode_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode to float32 ``[3, size, size]`` in [0, 1]; grayscale is replicated."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_arrays(index: DatasetIndex, split: str) -> tuple[np.ndarray, np.ndarray]:
    items = index.splits[split]
    x = np.empty((len(items), 3, index.image_size, index.image_size), dtype=np.float32)
    for i, (p, _) in enumerate(items):
        x[i] = decode_image(p, index.image_size)
    return x, index.labels(split)


def save_image(arr: np.ndarray, path) -> None:
    """Write a ``[3, H, W]`` float image in [0, 1] as 8-bit PNG."""
    u8 = np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def batch_iterator(n: int, batch_size: int, seed: int | None = None, epoch: int = 0):
    """Yield index arrays covering ``range(n)`` once; the last batch may be short.

    The permutation depends only on ``(seed, epoch)``; ``seed=None`` keeps
    the natural order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def iter_image_batches(index: DatasetIndex, split: str, batch_size: int, seed=None, epoch: int = 0):
    """Decode and yield ``(images [B,3,H,W], labels [B])`` batches."""
    items = index.splits[split]
    for idx in batch_iterator(len(items), batch_size, seed, epoch):
        x = np.stack([decode_image(items[i][0], index.image_size) for i in idx])
        y = np.array([items[i][1] for i in idx], dtype=np.int64)
        yield x, y


# --- synthetic dataset --------------------------------------------------

SYNTH_ORIENTATIONS = (0.0, 36.0, 72.0, 108.0, 144.0)
SYNTH_SFS = (1.5, 4.5)


@dataclass(frozen=True)
class SynthClass:
    theta: float
    sf: float


def synthetic_classes(n_classes: int = 10) -> list[SynthClass]:
    """Class ``c`` gets orientation ``c mod 5`` and SF ``c // 5`` of the base grid."""
    out = []
    for c in range(n_classes):
        o = SYNTH_ORIENTATIONS[c % len(SYNTH_ORIENTATIONS)]
        s = SYNTH_SFS[(c // len(SYNTH_ORIENTATIONS)) % len(SYNTH_SFS)]
        # past 10 classes, nudge orientation so every class stays distinct
        o += 18.0 * (c // (len(SYNTH_ORIENTATIONS) * len(SYNTH_SFS)))
        out.append(SynthClass(o % 180.0, s))
    return out


def render_synthetic(cls: SynthClass, rng: np.random.Generator, size: int = IMAGE_SIZE, ppd: float = 32.0) -> np.ndarray:
    """One windowed-grating texture with position, phase and color jitter."""
    c = (size - 1) / 2
    cx, cy = c + rng.uniform(-3, 3, 2)
    idx = np.arange(size, dtype=np.float64)
    x = (idx[None, :] - cx) / ppd
    y = (cy - idx[:, None]) / ppd
    th = math.radians(cls.theta)
    xr = x * math.cos(th) + y * math.sin(th)
    phase = rng.uniform(-math.pi / 2, math.pi / 2)
    carrier = np.cos(2 * math.pi * cls.sf * xr + phase)
    # weaker second harmonic gives a texture rather than a pure sinusoid
    carrier += 0.3 * np.cos(4 * math.pi * cls.sf * xr + 2 * phase)
    window = np.exp(-((x**2 + y**2) / (2 * 0.55**2)))
    contrast = rng.uniform(0.25, 0.4)
    background = rng.uniform(0.3, 0.7, 3)
    tint = rng.uniform(0.6, 1.0, 3)
    img = background[:, None, None] + contrast * tint[:, None, None] * (window * carrier)[None]
    img += rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_dataset(
    root,
    n_classes: int = 10,
    n_per_class: int = 100,
    seed: int = 0,
    n_val_per_class: int = 20,
) -> DatasetIndex:
    """Render the synthetic dataset to ``root/{train,val}/class_XX/*.png`` and index it."""
    root = Path(root)
    classes = synthetic_classes(n_classes)
    for split, n, tag in (("train", n_per_class, 0), ("val", n_val_per_class, 1)):
        if n <= 0:
            continue
        for ci, cls in enumerate(classes):
            d = root / split / f"class_{ci:02d}"
            d.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng([seed, tag, ci])
            for k in range(n):
                save_image(render_synthetic(cls, rng), d / f"{k:05d}.png")
    splits = ["train"] + (["val"] if n_val_per_class > 0 else [])
    return load_directory_dataset(root, splits)
