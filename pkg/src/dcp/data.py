"""Segmentation datasets: procedural shapes, on-disk folders, PASCAL/COCO adapters.

Every dataset exposes the same small surface:

* ``classes``: sorted class ids (1-based; 0 is background, 255 is ignore)
* ``image_ids``: list of string ids
* ``image(i)``: ``H x W x 3`` uint8 array
* ``label(i)``: ``H x W`` integer class map
* ``areas(i)``: ``{class_id: foreground pixel count}``
"""

import colorsys
import functools
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from dcp.errors import ValidationError

IGNORE_LABEL = 255
DEFAULT_MIN_FG_AREA = 2 * 32 * 32
INDEX_FILE = "index.json"


def data_root(root=None):
    root = root or os.environ.get("DCP_DATA_ROOT")
    if not root:
        raise ValidationError("no dataset root given and DCP_DATA_ROOT is not set")
    return Path(root)


# ---------------------------------------------------------------- synthetic shapes


SHAPE_FAMILIES = ("disc", "square", "triangle", "diamond", "cross", "ring")
# radius multipliers that give every family roughly the area of a disc
_FAMILY_SCALE = {"disc": 1.0, "square": 1.1, "triangle": 1.35, "diamond": 1.14, "cross": 1.13, "ring": 1.14}


def _shape_mask(family, yy, xx, cy, cx, r, angle):
    r = r * _FAMILY_SCALE[family]
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if family == "disc":
        return u * u + v * v <= r * r
    if family == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if family == "triangle":
        return (v <= 0.7 * r) & (v >= 1.7 * np.abs(u) - r)
    if family == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1 * r
    if family == "cross":
        arm = 0.38 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if family == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(family)


class SyntheticShapes:
    """Procedural scenes of textured geometric objects with exact label maps.

    Class ``c`` fixes a hue, a stripe texture and a shape family. Each image
    has one large primary object plus one to three smaller objects of other
    classes that act as distractors. Distractors stay below
    ``default_min_fg_area``, so a sampled episode always targets the primary
    object of its images. With probability ``companion_prob`` one distractor is the
    primary class's companion, the one other class of the same hue, so scenes
    regularly contain a look-alike of the target. Images are generated on
    demand from ``(seed, image index)``.
    """

    n_classes = 12
    default_min_fg_area = 200

    def __init__(self, images_per_class=60, size=64, seed=0, companion_prob=0.0):
        self.images_per_class = int(images_per_class)
        self.companion_prob = float(companion_prob)
        self.size = int(size)
        self.seed = int(seed)
        self.classes = list(range(1, self.n_classes + 1))
        self.image_ids = [f"syn{i:05d}" for i in range(self.n_classes * self.images_per_class)]
        self._style = {c: self._class_style(c) for c in self.classes}

    def _class_style(self, c):
        # classes c and c + 6 share a hue and differ in shape and stripes
        half = self.n_classes // 2
        i, pair = (c - 1) % half, (c - 1) // half
        hue = i / half
        angle = (i % 2 + 2 * pair) * np.pi / 4
        freq = (0.3, 0.75)[pair]
        family = SHAPE_FAMILIES[(i + 3 * pair) % len(SHAPE_FAMILIES)]
        return hue, angle, freq, family

    def companion(self, c):
        """The other class painted in ``c``'s hue."""
        return (c - 1 + self.n_classes // 2) % self.n_classes + 1

    def _index(self, image_id):
        if isinstance(image_id, (int, np.integer)):
            return int(image_id)
        return int(str(image_id)[3:])

    @functools.lru_cache(maxsize=None)
    def _render(self, idx):
        rng = np.random.default_rng([self.seed, idx])
        n = self.size
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

        base = rng.uniform(0.15, 0.45)
        bg_rgb = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), base))
        img = bg_rgb[None, None, :] * (1 + 0.25 * rng.standard_normal((n, n, 1)))
        label = np.zeros((n, n), np.int64)

        primary = self.classes[idx // self.images_per_class]
        others = [c for c in self.classes if c != primary]
        n_extra = int(rng.integers(1, 4))
        extra = list(rng.choice(others, size=n_extra, replace=False))
        if rng.random() < self.companion_prob and self.companion(primary) not in extra:
            extra[0] = self.companion(primary)
        for c in extra + [primary]:
            hue, angle, freq, family = self._style[c]
            r = rng.uniform(10, 15) if c == primary else rng.uniform(4.5, 7.5)
            cy, cx = rng.uniform(r * 0.6, n - r * 0.6, size=2)
            shape = _shape_mask(family, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi))
            sat = rng.uniform(0.65, 0.95)
            val = rng.uniform(0.7, 1.0)
            rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
            stripes = 0.75 + 0.25 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
            obj = rgb[None, None, :] * stripes[..., None]
            img[shape] = obj[shape]
            label[shape] = c
        img = img + 0.03 * rng.standard_normal(img.shape)
        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        return img, label

    def image(self, image_id):
        return self._render(self._index(image_id))[0]

    def label(self, image_id):
        return self._render(self._index(image_id))[1]

    def areas(self, image_id):
        lab = self.label(image_id)
        ids, counts = np.unique(lab, return_counts=True)
        return {int(c): int(k) for c, k in zip(ids, counts) if c not in (0, IGNORE_LABEL)}


# ---------------------------------------------------------------- on-disk folders


def write_dataset(dataset, root):
    """Write ``images/``, ``annotations/`` and ``index.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    index = {}
    for image_id in dataset.image_ids:
        Image.fromarray(dataset.image(image_id)).save(root / "images" / f"{image_id}.png")
        Image.fromarray(dataset.label(image_id).astype(np.uint8)).save(root / "annotations" / f"{image_id}.png")
        index[image_id] = {str(c): a for c, a in dataset.areas(image_id).items()}
    meta = {"classes": list(dataset.classes), "images": index}
    (root / INDEX_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


class FolderDataset:
    """Dataset stored as ``images/<id>.png``, ``annotations/<id>.png`` and ``index.json``.

    ``index.json`` holds ``{"classes": [...], "images": {id: {class: area}}}``.
    Annotation PNGs store class ids directly (0 background, 255 ignore).
    """

    image_suffixes = (".png", ".jpg", ".jpeg")

    def __init__(self, root, images_dir="images", annotations_dir="annotations"):
        self.root = Path(root)
        self.images_dir = self.root / images_dir
        self.annotations_dir = self.root / annotations_dir
        meta = json.loads((self.root / INDEX_FILE).read_text())
        self._index = {k: {int(c): int(a) for c, a in v.items()} for k, v in meta["images"].items()}
        self.classes = sorted(int(c) for c in meta["classes"])
        self.image_ids = sorted(self._index)

    def _image_path(self, image_id):
        for suffix in self.image_suffixes:
            p = self.images_dir / f"{image_id}{suffix}"
            if p.exists():
                return p
        raise FileNotFoundError(self.images_dir / f"{image_id}.*")

    def image(self, image_id):
        return np.asarray(Image.open(self._image_path(image_id)).convert("RGB"))

    def label(self, image_id):
        return np.asarray(Image.open(self.annotations_dir / f"{image_id}.png")).astype(np.int64)

    def areas(self, image_id):
        return self._index[image_id]


def build_index(image_ids, label_fn):
    return {i: {c: a for c, a in _label_areas(label_fn(i)).items()} for i in image_ids}


def _label_areas(label):
    ids, counts = np.unique(label, return_counts=True)
    return {int(c): int(k) for c, k in zip(ids, counts) if c not in (0, IGNORE_LABEL)}


class Pascal5iDataset(FolderDataset):
    """PASCAL VOC 2012 + SBD augmented labels in the usual few-shot layout.

    Expected under ``root``::

        JPEGImages/<id>.jpg
        SegmentationClassAug/<id>.png     # class ids 0..20, 255 = ignore
        index.json                        # optional; built and cached if absent

    Nothing is downloaded.
    """

    n_classes = 20
    default_min_fg_area = DEFAULT_MIN_FG_AREA

    def __init__(self, root):
        root = Path(root)
        if not (root / INDEX_FILE).exists():
            _cache_index(root, "JPEGImages", "SegmentationClassAug", range(1, self.n_classes + 1))
        super().__init__(root, "JPEGImages", "SegmentationClassAug")


class Coco20iDataset(FolderDataset):
    """COCO 2014 converted to per-image label PNGs with contiguous ids 1..80.

    Expected under ``root``::

        images/<id>.jpg
        annotations/<id>.png              # class ids 1..80, 0 background, 255 ignore
        index.json                        # optional; built and cached if absent
    """

    n_classes = 80
    default_min_fg_area = DEFAULT_MIN_FG_AREA

    def __init__(self, root):
        root = Path(root)
        if not (root / INDEX_FILE).exists():
            _cache_index(root, "images", "annotations", range(1, self.n_classes + 1))
        super().__init__(root, "images", "annotations")


def _cache_index(root, images_dir, annotations_dir, classes):
    ann = root / annotations_dir
    if not ann.is_dir():
        raise ValidationError(f"{ann} not found; datasets must be prepared locally")
    ids = sorted(p.stem for p in ann.glob("*.png"))
    index = build_index(ids, lambda i: np.asarray(Image.open(ann / f"{i}.png")))
    meta = {"classes": list(classes), "images": {k: {str(c): a for c, a in v.items()} for k, v in index.items()}}
    (root / INDEX_FILE).write_text(json.dumps(meta))


def open_dataset(name, root=None, images_per_class=60, seed=0, companion_prob=0.0):
    if name == "synthetic":
        if root is not None and (Path(root) / INDEX_FILE).exists():
            ds = FolderDataset(root)
            ds.default_min_fg_area = SyntheticShapes.default_min_fg_area
            return ds
        return SyntheticShapes(images_per_class=images_per_class, seed=seed, companion_prob=companion_prob)
    if name == "pascal5i":
        return Pascal5iDataset(data_root(root))
    if name == "coco20i":
        return Coco20iDataset(data_root(root))
    raise ValidationError(f"unknown dataset {name!r}")
