"""Common image corruptions at five severities and per-severity evaluation."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class Kind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    PIXELATE = "pixelate"
    DEFOCUS_BLUR = "defocus_blur"


NOISE_KINDS = (Kind.GAUSSIAN_NOISE, Kind.SHOT_NOISE, Kind.IMPULSE_NOISE)
_KIND_ID = {k: i for i, k in enumerate(Kind)}


def load_constants(path=None) -> dict:
    if path is None:
        raw = resources.files("vonebio").joinpath("data/corruptions.json").read_text()
    else:
        raw = Path(path).read_text()
    table = json.loads(raw)
    for k in Kind:
        if k.value not in table:
            raise ValueError(f"corruption constants missing {k.value!r}")
        for name, vals in table[k.value].items():
            if len(vals) != 5:
                raise ValueError(f"{k.value}.{name} needs 5 severities, has {len(vals)}")
    return table


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption kind at one severity.

    Severity 0 is the identity. ``params`` overrides the per-severity
    constants, e.g. ``{"offset": 0.0}`` for a neutral brightness shift.
    """

    kind: Kind
    severity: int
    params: dict | None = field(default=None, hash=False, compare=False)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Kind(self.kind))
        except ValueError:
            raise ValueError(f"unknown corruption kind {self.kind!r}") from None
        if int(self.severity) != self.severity or not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in [0, 5], got {self.severity}")

    def resolve(self, constants: dict | None = None) -> dict:
        if self.params is not None:
            return dict(self.params)
        constants = constants or _default_constants()
        return {k: v[self.severity - 1] for k, v in constants[self.kind.value].items()}


_CONSTANTS = None


def _default_constants() -> dict:
    global _CONSTANTS
    if _CONSTANTS is None:
        _CONSTANTS = load_constants()
    return _CONSTANTS


def disk_kernel(radius: float, alias_sigma: float = 0.0) -> np.ndarray:
    r = max(int(math.ceil(radius)) + 1, 3)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = ((ax[None, :] ** 2 + ax[:, None] ** 2) <= radius**2).astype(np.float64)
    k /= k.sum()
    if alias_sigma > 0:
        k = ndimage.gaussian_filter(k, alias_sigma, mode="constant")
        k /= k.sum()
    return k


def _pixelate(x: np.ndarray, ratio: float) -> np.ndarray:
    _, h, w = x.shape
    small = (max(1, int(w * ratio)), max(1, int(h * ratio)))
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        im = Image.fromarray(x[c].astype(np.float32), mode="F")
        out[c] = np.asarray(im.resize(small, Image.BOX).resize((w, h), Image.NEAREST))
    return out


def corrupt(image, spec: CorruptionSpec, rng: np.random.Generator, constants: dict | None = None) -> np.ndarray:
    """Corrupt one ``[C, H, W]`` image in [0, 1]; the result is clamped to [0, 1]."""
    x = np.asarray(image, dtype=np.float32)
    if spec.severity == 0 and spec.params is None:
        return x.copy()
    p = spec.resolve(constants)
    k = spec.kind
    if k is Kind.GAUSSIAN_NOISE:
        out = x + rng.normal(0.0, p["sigma"], x.shape)
    elif k is Kind.SHOT_NOISE:
        lam = p["rate"]
        out = rng.poisson(x.astype(np.float64) * lam) / lam
    elif k is Kind.IMPULSE_NOISE:
        u = rng.random(x.shape)
        amount = p["amount"]
        out = x.copy()
        out[u < amount / 2] = 0.0
        out[(u >= amount / 2) & (u < amount)] = 1.0
    elif k is Kind.CONTRAST:
        c = p["factor"]
        means = x.mean(axis=(1, 2), keepdims=True)
        out = x * c + means * (1.0 - c)
    elif k is Kind.BRIGHTNESS:
        out = x + p["offset"]
    elif k is Kind.PIXELATE:
        out = _pixelate(x, p["ratio"])
    elif k is Kind.DEFOCUS_BLUR:
        ker = disk_kernel(p["radius"], p.get("alias_sigma", 0.0))
        out = np.stack([ndimage.convolve(ch.astype(np.float64), ker, mode="reflect") for ch in x])
    else:  # pragma: no cover - Kind is exhaustive
        raise ValueError(f"unknown corruption kind {k!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def image_rng(seed: int, spec: CorruptionSpec, index: int) -> np.random.Generator:
    """RNG stream for one image, independent of processing order."""
    return np.random.default_rng([seed, _KIND_ID[spec.kind], spec.severity, index])


def corrupt_batch(images, spec: CorruptionSpec, seed: int = 0, offset: int = 0, constants=None) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    return np.stack([
        corrupt(img, spec, image_rng(seed, spec, offset + i), constants) for i, img in enumerate(images)
    ])


def all_specs(kinds=None, severities=range(1, 6)) -> list[CorruptionSpec]:
    kinds = list(Kind) if kinds is None else [Kind(k) for k in kinds]
    return [CorruptionSpec(k, s) for k in kinds for s in severities]


@dataclass
class RobustnessResult:
    """Top-1 per ``(kind, severity)``; ``clean`` is stored as severity 0."""

    clean: float
    cells: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def kind_means(self) -> dict:
        by_kind: dict = {}
        for (kind, _), acc in self.cells.items():
            by_kind.setdefault(kind, []).append(acc)
        return {k: float(np.mean(v)) for k, v in by_kind.items()}

    def rows(self) -> list[tuple[str, int, float]]:
        out = [("clean", 0, self.clean)]
        out += [(k.value if isinstance(k, Kind) else k, s, a) for (k, s), a in sorted(
            self.cells.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))]
        return out


def _predict(model, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    import torch

    from .vone_block import normalize

    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = normalize(torch.as_tensor(x[i:i + batch_size], dtype=torch.float32))
            preds.append(model(xb).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_robustness(model, images, labels, specs=None, seed: int = 0, constants=None, batch_size: int = 100) -> RobustnessResult:
    """Top-1 accuracy of ``model`` (images -> logits) on every corruption spec.

    Corruptions are generated batch by batch so memory stays bounded.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    specs = all_specs() if specs is None else specs
    clean_pred = _predict(model, images, batch_size)
    res = RobustnessResult(clean=float((clean_pred == labels).mean()))
    res.counts[("clean", 0)] = len(clean_pred)
    for spec in specs:
        preds = []
        for i in range(0, len(images), batch_size):
            xc = corrupt_batch(images[i:i + batch_size], spec, seed=seed, offset=i, constants=constants)
            preds.append(_predict(model, xc, batch_size))
        p = np.concatenate(preds)
        res.cells[(spec.kind, spec.severity)] = float((p == labels).mean())
        res.counts[(spec.kind, spec.severity)] = len(p)
    return res


def evaluate_precorrupted(model, root, class_names, kinds=None) -> RobustnessResult:
    """Evaluate on an on-disk ``root/<kind>/<severity>/<class>/*`` tree (Tiny ImageNet-C layout)."""
    from .data import load_arrays, load_directory_dataset

    root = Path(root)
    res = RobustnessResult(clean=float("nan"))
    label_of = {c: i for i, c in enumerate(class_names)}
    kind_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    for kd in kind_dirs:
        if kinds is not None and kd.name not in kinds:
            continue
        for sd in sorted(d for d in kd.iterdir() if d.is_dir() and d.name.isdigit()):
            idx = load_directory_dataset(kd, sd.name)
            x, y_local = load_arrays(idx, sd.name)
            y = np.array([label_of[idx.class_names[i]] for i in y_local])
            p = _predict(model, x)
            key = (Kind(kd.name) if kd.name in Kind._value2member_map_ else kd.name, int(sd.name))
            res.cells[key] = float((p == y).mean())
            res.counts[key] = len(p)
    return res


RESULT_FIELDS = ["model", "seed", "kind", "severity", "top1"]


def write_results_csv(path, results: list[tuple[str, int, RobustnessResult]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for name, seed, res in results:
            for kind, sev, acc in res.rows():
                w.writerow([name, seed, kind, sev, f"{acc:.6f}"])


def read_results_csv(path) -> list[dict]:
    with open(path) as fh:
        return [
            {"model": r["model"], "seed": int(r["seed"]), "kind": r["kind"], "severity": int(r["severity"]), "top1": float(r["top1"])}
            for r in csv.DictReader(fh)
        ]
