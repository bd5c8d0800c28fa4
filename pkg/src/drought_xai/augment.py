"""Training-time geometric augmentation and batch streaming.

Random transforms are composed in a fixed order (rotate, shear, shift, flip)
about the image centre and resampled bilinearly, with vacated pixels filled
by edge replication. Evaluation streams only resize and rescale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageReadError
from .ingest import STRESSED, PatchRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationPolicy:
    rescale: float = 1.0 / 255.0
    shear_range: float = 0.2
    rotation_range_deg: float = 30.0
    width_shift_range: float = 0.2
    height_shift_range: float = 0.2
    horizontal_flip: bool = True
    vertical_flip: bool = True
    fill_mode: str = "nearest"
    seed: int = 42

    def __post_init__(self):
        ranges = (self.shear_range, self.rotation_range_deg, self.width_shift_range, self.height_shift_range)
        if any(r < 0 for r in ranges):
            raise ValueError("augmentation ranges must be non-negative")
        if self.rescale <= 0:
            raise ValueError("rescale must be positive")
        if self.fill_mode != "nearest":
            raise ValueError(f"unsupported fill_mode {self.fill_mode!r}; only 'nearest' is implemented")

    @classmethod
    def identity(cls, seed: int = 0) -> AugmentationPolicy:
        return cls(shear_range=0.0, rotation_range_deg=0.0, width_shift_range=0.0,
                   height_shift_range=0.0, horizontal_flip=False, vertical_flip=False, seed=seed)


@dataclass(frozen=True)
class BatchSpec:
    target_size: tuple[int, int] = (224, 224)
    batch_size: int = 128
    class_mode: str = "binary"
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(int(v) for v in self.target_size))
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ValueError(f"bad target_size {self.target_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.class_mode != "binary":
            raise ValueError("only binary class_mode is supported")


@dataclass(frozen=True)
class TransformParams:
    """One draw of the random transform. Shear is an angle in radians, shifts are pixels."""

    rotation_deg: float = 0.0
    shear: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation_deg == 0 and self.shear == 0 and self.dx == 0 and self.dy == 0


def sample_transform(policy: AugmentationPolicy, rng: np.random.Generator,
                     shape: tuple[int, int]) -> TransformParams:
    """Draw parameters uniformly within the policy's ranges for an image of ``shape`` (H, W).

    Exactly six uniforms are consumed per call whatever the policy, so the
    stream position never depends on which ranges are zero.
    """
    height, width = shape[:2]
    u = rng.random(6)
    return TransformParams(
        rotation_deg=policy.rotation_range_deg * (2 * u[0] - 1),
        shear=policy.shear_range * (2 * u[1] - 1),
        dx=policy.width_shift_range * width * (2 * u[2] - 1),
        dy=policy.height_shift_range * height * (2 * u[3] - 1),
        flip_horizontal=bool(policy.horizontal_flip and u[4] < 0.5),
        flip_vertical=bool(policy.vertical_flip and u[5] < 0.5),
    )


def _forward_matrix(params: TransformParams) -> np.ndarray:
    """Homogeneous (x, y) map from input to output coordinates, centred on the image."""
    t = math.radians(params.rotation_deg)
    rotate = np.array([[math.cos(t), -math.sin(t), 0.0],
                       [math.sin(t), math.cos(t), 0.0],
                       [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, -math.sin(params.shear), 0.0],
                      [0.0, math.cos(params.shear), 0.0],
                      [0.0, 0.0, 1.0]])
    shift = np.array([[1.0, 0.0, params.dx],
                      [0.0, 1.0, params.dy],
                      [0.0, 0.0, 1.0]])
    return shift @ shear @ rotate


def apply_transform(image: np.ndarray, params: TransformParams, fill: str = "nearest") -> np.ndarray:
    """Warp an H x W (x C) image; output has the input's shape and dtype."""
    if fill != "nearest":
        raise ValueError(f"unsupported fill mode {fill!r}")
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    out = image.copy()

    if not params.is_geometric_identity:
        h, w = image.shape[:2]
        centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        inverse = np.linalg.inv(_forward_matrix(params))
        lin_xy, t_xy = inverse[:2, :2], inverse[:2, 2]
        # ndimage works in (row, col) = (y, x); input = M @ (out - c) + c + t
        swap = np.array([[0, 1], [1, 0]])
        matrix = swap @ lin_xy @ swap
        c_rc = centre[::-1]
        offset = c_rc - matrix @ c_rc + t_xy[::-1]
        src = image.astype(np.float64)
        channels = src[..., None] if src.ndim == 2 else src
        warped = np.stack([ndimage.affine_transform(channels[..., k], matrix, offset=offset,
                                                    order=1, mode="nearest")
                           for k in range(channels.shape[-1])], axis=-1)
        if image.ndim == 2:
            warped = warped[..., 0]
        if np.issubdtype(image.dtype, np.integer):
            info = np.iinfo(image.dtype)
            warped = np.clip(np.rint(warped), info.min, info.max)
        out = warped.astype(image.dtype)

    if params.flip_horizontal:
        out = out[:, ::-1]
    if params.flip_vertical:
        out = out[::-1]
    return np.ascontiguousarray(out)


def load_image(path, target_size: tuple[int, int]) -> np.ndarray:
    """Decode to RGB and resize bilinearly to ``target_size`` (H, W); float32 in [0, 255]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            height, width = target_size
            if im.size != (width, height):
                im = im.resize((width, height), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc


def label_value(label: str) -> float:
    return 1.0 if label == STRESSED else 0.0


class BatchStream:
    """One epoch of ``(images, labels)`` batches over a manifest partition.

    Images are NHWC float32 in [0, 1]; labels are 0 (healthy) / 1 (stressed).
    The record order comes from a generator seeded by ``(seed, epoch)`` and the
    transform draws from one seeded by ``(policy.seed, epoch)``, so the whole
    sequence is fixed before any decoding happens.
    Unreadable images are skipped and counted in ``skipped``.
    """

    def __init__(self, records: Sequence[PatchRecord], policy: AugmentationPolicy | None,
                 spec: BatchSpec, seed: int = 0, epoch: int = 0,
                 rescale: float = 1.0 / 255.0, cache: dict | None = None):
        if not records:
            raise ValueError("cannot stream an empty partition")
        self.records = list(records)
        self.policy = policy
        self.spec = spec
        self.seed = seed
        self.epoch = epoch
        self.rescale = policy.rescale if policy is not None else rescale
        self.cache = cache
        self.skipped = 0

    def __len__(self) -> int:
        return math.ceil(len(self.records) / self.spec.batch_size)

    def order(self) -> list[int]:
        idx = np.arange(len(self.records))
        if self.spec.shuffle:
            idx = np.random.default_rng([self.seed, self.epoch]).permutation(idx)
        return idx.tolist()

    def plan(self) -> list[tuple[PatchRecord, TransformParams | None]]:
        """The (record, transform) sequence this epoch will emit."""
        aug_seed = self.policy.seed if self.policy is not None else self.seed
        rng = np.random.default_rng([aug_seed, self.epoch, 1])
        plan = []
        for i in self.order():
            params = None
            if self.policy is not None:
                params = sample_transform(self.policy, rng, self.spec.target_size)
            plan.append((self.records[i], params))
        return plan

    def _load(self, record: PatchRecord) -> np.ndarray:
        key = str(record.patch_path)
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        image = load_image(record.patch_path, self.spec.target_size)
        if self.cache is not None:
            self.cache[key] = image
        return image

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        plan = self.plan()
        bs = self.spec.batch_size
        for start in range(0, len(plan), bs):
            images, labels = [], []
            for record, params in plan[start:start + bs]:
                try:
                    image = self._load(record)
                except ImageReadError as exc:
                    self.skipped += 1
                    logger.warning("skipping %s", exc)
                    continue
                if params is not None:
                    image = apply_transform(image, params)
                images.append(image * np.float32(self.rescale))
                labels.append(label_value(record.label))
            if images:
                yield np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.float32)


def batch_stream(records: Sequence[PatchRecord], policy: AugmentationPolicy | None,
                 spec: BatchSpec, seed: int = 0, epoch: int = 0, **kwargs) -> BatchStream:
    return BatchStream(records, policy, spec, seed=seed, epoch=epoch, **kwargs)
