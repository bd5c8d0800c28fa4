"""Annotation parsing, patch extraction and deterministic dataset manifests.

Scenes are annotated LabelImg/VOC style: one XML document per image, or a
single CSV covering many images. Every box becomes one patch image on disk,
filed under ``<out_dir>/<label>/``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from PIL import Image, UnidentifiedImageError

from .errors import (
    DegenerateBoxWarning,
    EmptyClass,
    ImageReadError,
    InconsistentDimensions,
    MalformedAnnotation,
    UnknownLabel,
)

logger = logging.getLogger(__name__)

HEALTHY = "healthy"
STRESSED = "stressed"
LABELS = (HEALTHY, STRESSED)
PARTITIONS = ("train", "val", "test")

CSV_COLUMNS = ("filename", "label", "xmin", "ymin", "xmax", "ymax")
_CSV_ALIASES = {
    "filename": ("filename", "file", "image", "image_name", "image_path"),
    "label": ("label", "class", "name"),
    "xmin": ("xmin",),
    "ymin": ("ymin",),
    "xmax": ("xmax",),
    "ymax": ("ymax",),
    "width": ("width", "image_width"),
    "height": ("height", "image_height"),
}


def normalize_label(name: str) -> str:
    label = (name or "").strip().lower()
    if label not in LABELS:
        raise UnknownLabel(f"label {name!r} is not one of {LABELS}")
    return label


@dataclass(frozen=True)
class BoundingBox:
    """Labeled rectangle in pixel coordinates, inclusive-exclusive, origin top-left."""

    label: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        if self.label not in LABELS:
            raise UnknownLabel(f"label {self.label!r} is not one of {LABELS}")
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise MalformedAnnotation(
                f"reversed or empty box ({self.xmin},{self.ymin})-({self.xmax},{self.ymax})"
            )

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    @property
    def area(self) -> int:
        return self.width * self.height

    def clamp(self, width: int, height: int) -> BoundingBox | None:
        """Clip to ``[0, width) x [0, height)``; ``None`` if nothing is left."""
        xmin, xmax = max(0, self.xmin), min(width, self.xmax)
        ymin, ymax = max(0, self.ymin), min(height, self.ymax)
        if xmax <= xmin or ymax <= ymin:
            return None
        return BoundingBox(self.label, xmin, ymin, xmax, ymax)


@dataclass(frozen=True)
class AnnotatedScene:
    image_path: Path
    width: int
    height: int
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MalformedAnnotation(f"{self.image_path}: non-positive size {self.width}x{self.height}")
        object.__setattr__(self, "image_path", Path(self.image_path))
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class PatchRecord:
    patch_path: Path
    label: str
    source_scene: Path
    source_box: BoundingBox


@dataclass
class DatasetManifest:
    train: list[PatchRecord] = field(default_factory=list)
    val: list[PatchRecord] = field(default_factory=list)
    test: list[PatchRecord] = field(default_factory=list)
    seed: int = 42
    split_fraction: float = 0.2
    stratified: bool = True

    def partition(self, name: str) -> list[PatchRecord]:
        if name not in PARTITIONS:
            raise KeyError(name)
        return getattr(self, name)


# --------------------------------------------------------------------------
# annotation parsing


def _to_int(text: str | None, what: str, source) -> int:
    if text is None or not str(text).strip():
        raise MalformedAnnotation(f"{source}: missing {what}")
    try:
        value = float(str(text).strip())
    except ValueError:
        raise MalformedAnnotation(f"{source}: non-numeric {what} {text!r}") from None
    if not math.isfinite(value):
        raise MalformedAnnotation(f"{source}: non-finite {what} {text!r}")
    return int(round(value))


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, UnidentifiedImageError) as exc:
        raise MalformedAnnotation(f"no size given and image {path} is unreadable: {exc}") from exc


def parse_annotations_xml(file: str | Path, image_dir: str | Path | None = None) -> AnnotatedScene:
    """Read one VOC-style annotation document.

    The image path is ``<image_dir>/<filename>``; ``image_dir`` defaults to the
    directory holding the XML (the ``<path>`` element is ignored since
    LabelImg records the annotator's own filesystem there).
    """
    file = Path(file)
    try:
        root = ET.parse(file).getroot()
    except (ET.ParseError, OSError) as exc:
        raise MalformedAnnotation(f"{file}: {exc}") from exc

    filename = (root.findtext("filename") or "").strip()
    if not filename:
        raise MalformedAnnotation(f"{file}: missing <filename>")
    image_path = Path(image_dir or file.parent) / filename

    size = root.find("size")
    if size is not None and size.findtext("width") is not None:
        width = _to_int(size.findtext("width"), "width", file)
        height = _to_int(size.findtext("height"), "height", file)
    else:
        width, height = _image_size(image_path)

    boxes = []
    for obj in root.iter("object"):
        label = normalize_label(obj.findtext("name"))
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MalformedAnnotation(f"{file}: object {label!r} has no <bndbox>")
        coords = [_to_int(bnd.findtext(k), k, file) for k in ("xmin", "ymin", "xmax", "ymax")]
        boxes.append(BoundingBox(label, *coords))
    return AnnotatedScene(image_path, width, height, tuple(boxes))


def _resolve_columns(fieldnames: Sequence[str] | None, file) -> dict[str, str]:
    if not fieldnames:
        raise MalformedAnnotation(f"{file}: empty CSV")
    lowered = {name.strip().lower(): name for name in fieldnames}
    columns = {}
    for key, aliases in _CSV_ALIASES.items():
        for alias in aliases:
            if alias in lowered:
                columns[key] = lowered[alias]
                break
    missing = [c for c in CSV_COLUMNS if c not in columns]
    if missing:
        raise MalformedAnnotation(f"{file}: CSV header lacks {missing}")
    return columns


def parse_annotations_csv(file: str | Path, image_dir: str | Path | None = None) -> list[AnnotatedScene]:
    """Read a multi-image CSV; scenes come out in order of first appearance.

    Optional ``width``/``height`` columns are checked for consistency per
    image; when absent the size is read from the image header.
    """
    file = Path(file)
    base = Path(image_dir or file.parent)
    grouped: dict[str, list[BoundingBox]] = {}
    sizes: dict[str, tuple[int, int]] = {}
    with open(file, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = _resolve_columns(reader.fieldnames, file)
        for lineno, row in enumerate(reader, start=2):
            where = f"{file}:{lineno}"
            name = (row.get(cols["filename"]) or "").strip()
            if not name:
                raise MalformedAnnotation(f"{where}: missing filename")
            label = normalize_label(row.get(cols["label"]))
            coords = [_to_int(row.get(cols[k]), k, where) for k in ("xmin", "ymin", "xmax", "ymax")]
            grouped.setdefault(name, []).append(BoundingBox(label, *coords))
            if "width" in cols and "height" in cols:
                dims = (_to_int(row.get(cols["width"]), "width", where),
                        _to_int(row.get(cols["height"]), "height", where))
                if sizes.setdefault(name, dims) != dims:
                    raise InconsistentDimensions(
                        f"{where}: {name} listed as {dims[0]}x{dims[1]} and {sizes[name][0]}x{sizes[name][1]}"
                    )

    scenes = []
    for name, boxes in grouped.items():
        path = base / name
        width, height = sizes[name] if name in sizes else _image_size(path)
        scenes.append(AnnotatedScene(path, width, height, tuple(boxes)))
    return scenes


def load_annotations(source: str | Path, image_dir: str | Path | None = None) -> list[AnnotatedScene]:
    """Accept a CSV file, a single XML file, or a directory of XML files."""
    source = Path(source)
    if source.is_dir():
        return [parse_annotations_xml(p, image_dir) for p in sorted(source.glob("*.xml"))]
    if source.suffix.lower() == ".csv":
        return parse_annotations_csv(source, image_dir)
    return [parse_annotations_xml(source, image_dir)]


# --------------------------------------------------------------------------
# patch extraction


def _open_rgb(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc


def extract_patches(scene: AnnotatedScene, out_dir: str | Path) -> list[PatchRecord]:
    """Crop every box of ``scene`` into ``out_dir/<label>/<stem>_<index>.png``.

    Boxes are clamped to the image; those that collapse to zero area are
    skipped with a :class:`DegenerateBoxWarning`.
    """
    out_dir = Path(out_dir)
    image = _open_rgb(scene.image_path)
    width, height = image.size
    if (width, height) != (scene.width, scene.height):
        logger.warning("%s: annotated as %dx%d but image is %dx%d; clamping to the image",
                       scene.image_path, scene.width, scene.height, width, height)

    records = []
    skipped = 0
    for index, box in enumerate(scene.boxes):
        clamped = box.clamp(width, height)
        if clamped is None:
            skipped += 1
            continue
        target = out_dir / clamped.label / f"{scene.image_path.stem}_{index:04d}.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        image.crop((clamped.xmin, clamped.ymin, clamped.xmax, clamped.ymax)).save(target)
        records.append(PatchRecord(target, clamped.label, scene.image_path, clamped))
    if skipped:
        warnings.warn(f"{scene.image_path}: skipped {skipped} degenerate box(es)", DegenerateBoxWarning)
    return records


def extract_corpus(scenes: Iterable[AnnotatedScene], out_dir: str | Path) -> list[PatchRecord]:
    records: list[PatchRecord] = []
    for scene in scenes:
        records.extend(extract_patches(scene, out_dir))
    return records


# --------------------------------------------------------------------------
# deterministic split

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int) -> Iterator[int]:
    """SplitMix64 stream (Steele, Lea & Flood 2014): 64-bit outputs from a 64-bit seed."""
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def fisher_yates(items: Sequence, rng: Iterator[int]) -> list:
    """Shuffle a copy of ``items``: for i = n-1..1 swap i with ``next(rng) % (i + 1)``."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = next(rng) % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def _n_val(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def split_manifest(
    patches: Sequence[PatchRecord],
    fraction: float = 0.2,
    seed: int = 42,
    stratify: bool = True,
    test: Sequence[PatchRecord] = (),
) -> DatasetManifest:
    """Split ``patches`` into train/val; ``test`` is carried through untouched.

    Records are sorted by patch path, shuffled with :func:`fisher_yates` driven
    by ``splitmix64(seed)``, and the last ``round(fraction * n)`` go to
    validation. With ``stratify`` each class is handled separately, healthy
    first, both drawing from the same stream.
    """
    if not patches:
        raise EmptyClass("no patches to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    by_label = {label: sorted((p for p in patches if p.label == label), key=lambda p: p.patch_path.as_posix())
                for label in LABELS}
    for label, group in by_label.items():
        if not group:
            raise EmptyClass(f"no {label!r} patches")

    rng = splitmix64(seed)
    groups = [by_label[label] for label in LABELS] if stratify else [
        sorted(patches, key=lambda p: p.patch_path.as_posix())]
    train: list[PatchRecord] = []
    val: list[PatchRecord] = []
    for group in groups:
        shuffled = fisher_yates(group, rng)
        cut = len(shuffled) - _n_val(len(shuffled), fraction)
        train.extend(shuffled[:cut])
        val.extend(shuffled[cut:])
    return DatasetManifest(train, val, list(test), seed, fraction, stratify)


def class_counts(manifest: DatasetManifest) -> dict[tuple[str, str], int]:
    counts = {(part, label): 0 for part in PARTITIONS for label in LABELS}
    for part in PARTITIONS:
        for record, n in Counter(r.label for r in manifest.partition(part)).items():
            counts[(part, record)] = n
    return counts


# --------------------------------------------------------------------------
# manifest serialization

MANIFEST_HEADER = ("partition", "label", "patch_path", "source_scene", "xmin", "ymin", "xmax", "ymax")


def _rel(path: Path, root: Path) -> str:
    # relative (possibly via ..) so a manifest is independent of where the run directory lives
    return Path(os.path.relpath(path.resolve(), root.resolve())).as_posix()


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a tab-separated manifest; paths are stored relative to its directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    lines = [
        f"# seed={manifest.seed}",
        f"# split_fraction={manifest.split_fraction!r}",
        f"# stratified={str(manifest.stratified).lower()}",
        "\t".join(MANIFEST_HEADER),
    ]
    for part in PARTITIONS:
        for r in manifest.partition(part):
            b = r.source_box
            lines.append("\t".join([part, r.label, _rel(r.patch_path, root), _rel(r.source_scene, root),
                                    str(b.xmin), str(b.ymin), str(b.xmax), str(b.ymax)]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    manifest = DatasetManifest()
    header_seen = False
    for raw in path.read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            key, _, value = raw[1:].strip().partition("=")
            if key == "seed":
                manifest.seed = int(value)
            elif key == "split_fraction":
                manifest.split_fraction = float(value)
            elif key == "stratified":
                manifest.stratified = value == "true"
            continue
        fields = raw.split("\t")
        if not header_seen:
            if tuple(fields) != MANIFEST_HEADER:
                raise MalformedAnnotation(f"{path}: unexpected manifest header {fields}")
            header_seen = True
            continue
        if len(fields) != len(MANIFEST_HEADER):
            raise MalformedAnnotation(f"{path}: bad manifest row {raw!r}")
        part, label, patch, scene = fields[:4]
        box = BoundingBox(normalize_label(label), *(int(v) for v in fields[4:]))
        record = PatchRecord(Path(os.path.normpath(root / patch)), box.label,
                             Path(os.path.normpath(root / scene)), box)
        manifest.partition(part).append(record)
    return manifest

