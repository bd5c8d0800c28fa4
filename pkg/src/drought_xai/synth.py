"""Synthetic two-class corpora and finite-difference oracles for desk-scale testing.

The generator paints green (healthy) and yellow-brown (stressed) regions onto
a soil-coloured background and writes the result in exactly the formats the
ingest module reads: one PNG plus one VOC XML per scene, and a shared CSV.
"""

from __future__ import annotations

import csv
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from torch import nn

from .ingest import CSV_COLUMNS, HEALTHY, STRESSED, AnnotatedScene, BoundingBox


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 10
    image_size: tuple[int, int] = (160, 160)
    boxes_per_scene: int = 4
    patch_size: tuple[int, int] = (28, 44)
    healthy_rgb: tuple[float, float, float] = (0.22, 0.55, 0.20)
    stressed_rgb: tuple[float, float, float] = (0.70, 0.60, 0.25)
    soil_rgb: tuple[float, float, float] = (0.42, 0.36, 0.30)
    noise_sigma: float = 0.06
    texture_amplitude: float = 0.05
    texture_frequency: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1 or self.boxes_per_scene < 1:
            raise ValueError("n_per_class and boxes_per_scene must be >= 1")
        gap = np.abs(np.subtract(self.stressed_rgb, self.healthy_rgb)).max()
        if gap < 4 * self.noise_sigma:
            raise ValueError(f"class means are only {gap / self.noise_sigma:.2f} sigma apart; need >= 4")
        lo, hi = self.patch_size
        if not 1 <= lo <= hi or hi > self.cell_size:
            raise ValueError(f"patch_size {self.patch_size} does not fit a {self.cell_size}px grid cell")

    @property
    def grid(self) -> int:
        return int(np.ceil(np.sqrt(self.boxes_per_scene)))

    @property
    def cell_size(self) -> int:
        return min(self.image_size) // self.grid

    def class_mean(self, label: str) -> np.ndarray:
        return np.asarray(self.healthy_rgb if label == HEALTHY else self.stressed_rgb)


def sample_patch(spec: SynthSpec, label: str, rng: np.random.Generator,
                 size: tuple[int, int]) -> np.ndarray:
    """One textured H x W x 3 region of class ``label``, values clipped to [0, 1]."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * spec.texture_frequency * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    patch = spec.class_mean(label)[None, None, :] + spec.texture_amplitude * stripes[..., None]
    patch = patch + rng.normal(0.0, spec.noise_sigma, size=(h, w, 3))
    return np.clip(patch, 0.0, 1.0)


def mean_channel_classifier(spec: SynthSpec) -> Callable[[np.ndarray], str]:
    """Threshold the mean of the most separating channel at the midpoint of the class means."""
    h, s = np.asarray(spec.healthy_rgb), np.asarray(spec.stressed_rgb)
    channel = int(np.argmax(np.abs(s - h)))
    threshold = (h[channel] + s[channel]) / 2
    stressed_high = s[channel] > h[channel]

    def classify(patch: np.ndarray) -> str:
        above = float(np.asarray(patch)[..., channel].mean()) > threshold
        return STRESSED if above == stressed_high else HEALTHY

    return classify


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def _voc_document(filename: str, width: int, height: int, boxes: list[BoundingBox]) -> ET.ElementTree:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = "3"
    for box in boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = box.label
        ET.SubElement(obj, "difficult").text = "0"
        bnd = ET.SubElement(obj, "bndbox")
        for key in ("xmin", "ymin", "xmax", "ymax"):
            ET.SubElement(bnd, key).text = str(getattr(box, key))
    ET.indent(root)
    return ET.ElementTree(root)


def generate_dataset(spec: SynthSpec, out: str | Path, prefix: str = "scene") -> list[AnnotatedScene]:
    """Write scenes, per-scene XML and ``annotations.csv`` under ``out``.

    Boxes sit in disjoint cells of a square grid, so they never overlap and
    always lie fully inside the image.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    labels = [HEALTHY] * spec.n_per_class + [STRESSED] * spec.n_per_class
    labels = [labels[i] for i in rng.permutation(len(labels))]
    height, width = spec.image_size
    cell = spec.cell_size
    lo, hi = spec.patch_size

    scenes = []
    csv_rows = []
    for index, start in enumerate(range(0, len(labels), spec.boxes_per_scene)):
        scene_labels = labels[start:start + spec.boxes_per_scene]
        canvas = spec.soil_rgb + rng.normal(0.0, spec.noise_sigma, size=(height, width, 3))
        cells = rng.permutation(spec.grid * spec.grid)[:len(scene_labels)]
        boxes = []
        for label, c in zip(scene_labels, cells):
            bh, bw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            top = (c // spec.grid) * cell + int(rng.integers(0, cell - bh + 1))
            left = (c % spec.grid) * cell + int(rng.integers(0, cell - bw + 1))
            canvas[top:top + bh, left:left + bw] = sample_patch(spec, label, rng, (bh, bw))
            boxes.append(BoundingBox(label, left, top, left + bw, top + bh))

        name = f"{prefix}_{index:04d}"
        Image.fromarray(_to_uint8(canvas)).save(out / f"{name}.png")
        _voc_document(f"{name}.png", width, height, boxes).write(out / f"{name}.xml")
        csv_rows.extend([f"{name}.png", b.label, b.xmin, b.ymin, b.xmax, b.ymax, width, height] for b in boxes)
        scenes.append(AnnotatedScene(out / f"{name}.png", width, height, tuple(boxes)))

    with open(out / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*CSV_COLUMNS, "width", "height"])
        writer.writerows(csv_rows)
    return scenes


# --------------------------------------------------------------------------
# oracle models and finite differences


class LinearProbe(nn.Module):
    """theta = sigmoid(w . mean_over_space(x) + b); gradient is w_c * sigma' / (H*W) at every pixel."""

    def __init__(self, weights, bias: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.as_tensor(weights, dtype=torch.float64).reshape(-1))
        self.bias = nn.Parameter(torch.tensor(float(bias), dtype=torch.float64))

    def forward(self, x):
        return torch.sigmoid(x.mean(dim=(2, 3)) @ self.weight + self.bias)


class ConstantModel(nn.Module):
    def __init__(self, value: float = 0.5):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0],), self.value, dtype=x.dtype) + 0 * x.sum(dim=(1, 2, 3))


def scalar_function(model: nn.Module | Callable) -> Callable[[np.ndarray], float]:
    """Wrap a network taking NCHW batches as ``f(image HWC) -> float`` in the model's dtype, eval mode."""
    if not isinstance(model, nn.Module):
        return model
    model.eval()
    dtype = next(iter(model.parameters()), torch.zeros((), dtype=torch.float64)).dtype

    def f(image: np.ndarray) -> float:
        x = torch.as_tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            return float(model(x).reshape(-1)[0])

    return f


def sample_pixels(shape: tuple[int, int], n: int = 100, seed: int = 0) -> np.ndarray:
    """``n`` distinct (row, col) locations, drawn reproducibly."""
    h, w = shape[:2]
    flat = np.random.default_rng(seed).choice(h * w, size=min(n, h * w), replace=False)
    return np.stack(np.unravel_index(flat, (h, w)), axis=1)


def brute_force_grad(model, image: np.ndarray, h: float = 1e-4, pixels: np.ndarray | None = None,
                     n_pixels: int = 100, seed: int = 0) -> np.ndarray:
    """Central differences of theta w.r.t. the input at sampled pixels (all channels).

    Returns an H x W x C float64 grid; entries outside the sample are NaN.
    Pass ``pixels="all"`` to difference every location.
    """
    f = scalar_function(model)
    x = np.array(image, dtype=np.float64)
    if isinstance(pixels, str) and pixels == "all":
        pixels = np.argwhere(np.ones(x.shape[:2], dtype=bool))
    elif pixels is None:
        pixels = sample_pixels(x.shape, n_pixels, seed)
    grad = np.full(x.shape, np.nan)
    for r, c in pixels:
        for k in range(x.shape[2]):
            orig = x[r, c, k]
            x[r, c, k] = orig + h
            up = f(x)
            x[r, c, k] = orig - h
            down = f(x)
            x[r, c, k] = orig
            grad[r, c, k] = (up - down) / (2 * h)
    return grad

