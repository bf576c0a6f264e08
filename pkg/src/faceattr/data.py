"""Datasets: manifests, cropping, resizing, augmentation, splits, loaders.

A dataset is a JSON-lines manifest (one record per line with keys
``image``, optional ``bbox`` as [x0, y0, x1, y1], optional ``labels``)
plus a separate schema document naming each attribute's classes in
index order.  Records may carry any subset of the attributes; training
for one attribute filters to the records that have it.

Also here: a CelebA list-file reader, and a synthetic image generator
whose labels are recoverable visual properties, used to exercise the
whole pipeline without any external data.
"""

import colorsys
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (AttributeCoverageError, ContractError, IngestError,
                     LabelError, ManifestError)
from .tensor import Tensor

# ---------------------------------------------------------------------------
# records and manifests


@dataclass(frozen=True)
class SampleRecord:
    """One dataset entry: image path, optional face box, optional labels.

    ``bbox`` is (x0, y0, x1, y1) in pixels, inclusive-exclusive.
    """

    image: str
    bbox: tuple = None
    labels: dict = None

    def to_obj(self):
        obj = {"image": self.image}
        if self.bbox is not None:
            obj["bbox"] = list(self.bbox)
        if self.labels is not None:
            obj["labels"] = dict(self.labels)
        return obj


_RECORD_KEYS = {"image", "bbox", "labels"}


def _record_from_obj(obj, where):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: record must be an object, got {type(obj).__name__}")
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise ManifestError(f"{where}: unknown record keys {sorted(unknown)}")
    image = obj.get("image")
    if not isinstance(image, str) or not image:
        raise ManifestError(f"{where}: 'image' must be a non-empty string")
    bbox = obj.get("bbox")
    if bbox is not None:
        ok = (isinstance(bbox, list) and len(bbox) == 4
              and all(isinstance(v, int) and not isinstance(v, bool) for v in bbox))
        if not ok:
            raise ManifestError(f"{where}: 'bbox' must be four integers [x0, y0, x1, y1]")
        bbox = tuple(bbox)
    labels = obj.get("labels")
    if labels is not None:
        if not isinstance(labels, dict) or not labels:
            raise ManifestError(f"{where}: 'labels' must be a non-empty object")
        for k, v in labels.items():
            if not isinstance(k, str) or not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ManifestError(f"{where}: label {k!r} must map to a non-negative integer")
    return SampleRecord(image=image, bbox=bbox, labels=labels)


def load_manifest(path, schema=None):
    """Read a JSON-lines manifest; strict about structure and keys.

    With ``schema`` (a sequence of AttributeSchema) labels are also
    checked: unknown attribute names and out-of-range class indices are
    rejected.
    """
    by_name = {s.name: s for s in schema} if schema else None
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                where = f"{path}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{where}: not valid JSON ({exc.msg})") from exc
                rec = _record_from_obj(obj, where)
                if by_name is not None and rec.labels:
                    for name, idx in rec.labels.items():
                        if name not in by_name:
                            raise ManifestError(f"{where}: label {name!r} not in schema")
                        k = len(by_name[name].classes)
                        if idx >= k:
                            raise ManifestError(
                                f"{where}: class index {idx} out of range for "
                                f"{name!r} ({k} classes)")
                records.append(rec)
    except OSError as exc:
        raise IngestError(path, f"cannot read manifest: {exc}") from exc
    return records


def save_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_obj(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# attribute schema


@dataclass(frozen=True)
class AttributeSchema:
    """One attribute: ordered class names and which head predicts it."""

    name: str
    classes: tuple
    head: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.name:
            raise ContractError("attribute name must be non-empty")
        if len(self.classes) < 2:
            raise ContractError(f"attribute {self.name!r} needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ContractError(f"attribute {self.name!r} has duplicate class names")
        if self.head not in ("softmax", "sigmoid"):
            raise ContractError(f"attribute {self.name!r}: head must be softmax or sigmoid")
        if self.head == "sigmoid" and len(self.classes) != 2:
            raise ContractError(f"attribute {self.name!r}: sigmoid head needs exactly 2 classes")

    @property
    def num_outputs(self):
        """Units in the network head: one sigmoid node, or one per class."""
        return 1 if self.head == "sigmoid" else len(self.classes)


def default_schema():
    """The five physical attributes with their class layouts."""
    return (
        AttributeSchema("body_type", ("average", "curvy", "large")),
        AttributeSchema("gender", ("female", "male")),
        AttributeSchema("ethnicity", ("black", "asian", "white", "indian",
                                      "hispanic_latino", "middle_eastern",
                                      "native_american")),
        AttributeSchema("height", ("under_5ft7", "5ft7_to_6ft1", "over_6ft1")),
        AttributeSchema("weight", ("under_141lbs", "141_to_201lbs", "over_201lbs")),
    )


def save_schema(schemas, path):
    doc = {"attributes": [
        {"name": s.name, "classes": list(s.classes), "head": s.head} for s in schemas]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_schema(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IngestError(path, f"cannot read schema: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: schema is not valid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or set(doc) != {"attributes"}:
        raise ManifestError(f"{path}: schema must be an object with one key 'attributes'")
    out = []
    names = set()
    for i, entry in enumerate(doc["attributes"]):
        if not isinstance(entry, dict) or set(entry) - {"name", "classes", "head"}:
            raise ManifestError(f"{path}: attribute #{i} has unknown keys")
        try:
            schema = AttributeSchema(entry["name"], tuple(entry["classes"]),
                                     entry.get("head", "softmax"))
        except (KeyError, TypeError, ContractError) as exc:
            raise ManifestError(f"{path}: attribute #{i} is malformed: {exc}") from exc
        if schema.name in names:
            raise ManifestError(f"{path}: duplicate attribute {schema.name!r}")
        names.add(schema.name)
        out.append(schema)
    return tuple(out)


def schema_for(schemas, name):
    for s in schemas:
        if s.name == name:
            return s
    raise AttributeCoverageError(
        f"attribute {name!r} not in schema ({', '.join(s.name for s in schemas)})")


# ---------------------------------------------------------------------------
# cropping and resizing


@dataclass(frozen=True)
class CropRule:
    """Fractional padding around a face box, of the box's own size."""

    pad_left: float = 0.40
    pad_right: float = 0.40
    pad_top: float = 0.40
    pad_bottom: float = 0.30

    def __post_init__(self):
        for side in ("pad_left", "pad_right", "pad_top", "pad_bottom"):
            if getattr(self, side) < 0:
                raise ContractError(f"{side} must be non-negative")


def _round_half_up(v):
    # Pads are non-negative, so half-up and half-away-from-zero agree.
    return int(math.floor(v + 0.5))


def padded_crop(width, height, bbox, rule=None):
    """Expand a face box by the padding rule, clipped per side to the image.

    Returns the crop rectangle (x0, y0, x1, y1).  Pads are fractions of
    the box's own width (horizontally) and height (vertically); a side
    that would leave the image keeps whatever room is available there,
    without affecting the other sides.
    """
    rule = rule or CropRule()
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ContractError(
            f"bbox {bbox} invalid for a {width}x{height} image")
    bw, bh = x1 - x0, y1 - y0
    cx0 = max(0, x0 - _round_half_up(rule.pad_left * bw))
    cx1 = min(width, x1 + _round_half_up(rule.pad_right * bw))
    cy0 = max(0, y0 - _round_half_up(rule.pad_top * bh))
    cy1 = min(height, y1 + _round_half_up(rule.pad_bottom * bh))
    return cx0, cy0, cx1, cy1


def decode_image(path):
    """Read an image file as uint8 RGB [H, W, 3]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestError(path, f"cannot decode image: {exc}") from exc


def resize_rescale(image, target):
    """uint8 RGB [H, W, 3] -> float32 [3, target, target] in [0, 1].

    Bilinear, not aspect-preserving.  An already-target-sized image is
    passed through exactly (rescale only).
    """
    h, w = image.shape[:2]
    if (h, w) != (target, target):
        image = np.asarray(
            Image.fromarray(image).resize((target, target), Image.BILINEAR))
    return (image.astype(np.float32) / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Training-phase augmentation: flip, zoom, shift (in that order)."""

    flip: bool = True
    shift: bool = True
    zoom: bool = True
    flip_prob: float = 0.5
    max_shift: float = 0.1
    max_zoom: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.max_shift < 0 or self.max_zoom < 0:
            raise ContractError("max_shift and max_zoom must be non-negative")
        if self.max_zoom >= 1.0:
            raise ContractError(f"max_zoom must be below 1, got {self.max_zoom}")


def _bilinear_zoom(img, scale):
    """Resample a CHW image about its center; outside pixels read as 0."""
    c, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = (np.arange(h) - cy) / scale + cy
    xs = (np.arange(w) - cx) / scale + cx
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)

    def take(yi, xi):
        inside = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        vals = img[:, np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
        return vals * inside[None, :, :]

    top = take(y0, x0) * (1 - wx)[None, None, :] + take(y0, x0 + 1) * wx[None, None, :]
    bot = take(y0 + 1, x0) * (1 - wx)[None, None, :] + take(y0 + 1, x0 + 1) * wx[None, None, :]
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def _shift(img, dy, dx):
    c, h, w = img.shape
    out = np.zeros_like(img)
    ys0, yd0 = max(0, -dy), max(0, dy)
    xs0, xd0 = max(0, -dx), max(0, dx)
    hh, ww = h - abs(dy), w - abs(dx)
    if hh > 0 and ww > 0:
        out[:, yd0:yd0 + hh, xd0:xd0 + ww] = img[:, ys0:ys0 + hh, xs0:xs0 + ww]
    return out


def augment(img, cfg, rng):
    """Apply the configured random transforms to a CHW float image.

    Deterministic given the rng state; values stay in [0, 1] (empty
    areas from shift and zoom-out fill with 0).
    """
    if cfg.flip and rng.random() < cfg.flip_prob:
        img = img[:, :, ::-1]
    if cfg.zoom and cfg.max_zoom > 0:
        scale = 1.0 + rng.uniform(-cfg.max_zoom, cfg.max_zoom)
        img = _bilinear_zoom(img, scale)
    if cfg.shift and cfg.max_shift > 0:
        c, h, w = img.shape
        dy = _round_half_up(rng.uniform(-cfg.max_shift, cfg.max_shift) * h)
        dx = _round_half_up(rng.uniform(-cfg.max_shift, cfg.max_shift) * w)
        img = _shift(img, dy, dx)
    return np.ascontiguousarray(img, dtype=np.float32)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Hold out a test fraction first, then a validation slice of the rest."""

    test_fraction: float = 0.20
    val_fraction: float = 0.20
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ContractError(f"{name} must be in (0, 1), got {v}")


def _carve(records, spec, rng):
    order = rng.permutation(len(records))
    n_test = int(len(records) * spec.test_fraction)
    rest = order[n_test:]
    n_val = int(len(rest) * spec.val_fraction)
    test = [records[i] for i in order[:n_test]]
    val = [records[i] for i in rest[:n_val]]
    train = [records[i] for i in rest[n_val:]]
    return train, val, test


def split_manifest(records, attribute, spec=None):
    """(train, val, test) over the records labeled with ``attribute``.

    Unlabeled records are excluded first.  The stratified variant
    carves each class separately, keeping per-class proportions.
    """
    spec = spec or SplitSpec()
    labeled = [r for r in records if r.labels and attribute in r.labels]
    if not labeled:
        raise AttributeCoverageError(
            f"no records carry attribute {attribute!r}; cannot split")
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        return _carve(labeled, spec, rng)
    by_class = {}
    for r in labeled:
        by_class.setdefault(r.labels[attribute], []).append(r)
    train, val, test = [], [], []
    for cls in sorted(by_class):
        tr, va, te = _carve(by_class[cls], spec, rng)
        train += tr
        val += va
        test += te
    for part in (train, val, test):
        rng.shuffle(part)
    return train, val, test


# ---------------------------------------------------------------------------
# CelebA list files


CELEBA_PARTITIONS = {0: "train", 1: "val", 2: "test"}


class CelebA:
    """Parsed CelebA attribute and partition lists.

    Holds one row per image with all 40 binary attribute values
    (stored 0/1) and the official split code; per-attribute manifests
    are materialized on demand.
    """

    def __init__(self, names, filenames, values, partitions, images_dir=""):
        self.names = tuple(names)
        self.filenames = list(filenames)
        self.values = values
        self.partitions = partitions
        self.images_dir = images_dir

    @classmethod
    def parse(cls, attr_text, partition_text, images_dir=""):
        lines = [ln for ln in attr_text.splitlines() if ln.strip()]
        if len(lines) < 2:
            raise ManifestError("attribute list needs a count line and a header line")
        try:
            count = int(lines[0].split()[0])
        except (ValueError, IndexError) as exc:
            raise ManifestError(f"bad image count line: {lines[0]!r}") from exc
        names = tuple(lines[1].split())
        if not names:
            raise ManifestError("attribute header line is empty")
        rows = lines[2:]
        if len(rows) != count:
            raise ManifestError(f"attribute list declares {count} rows, found {len(rows)}")

        filenames = []
        values = np.zeros((count, len(names)), dtype=np.int8)
        for i, row in enumerate(rows):
            parts = row.split()
            if len(parts) != len(names) + 1:
                raise ManifestError(
                    f"attribute row {i + 3} has {len(parts)} fields, expected {len(names) + 1}")
            filenames.append(parts[0])
            for j, tok in enumerate(parts[1:]):
                if tok == "1":
                    values[i, j] = 1
                elif tok == "-1":
                    values[i, j] = 0
                else:
                    raise ManifestError(
                        f"attribute row {i + 3}: value {tok!r} is not 1 or -1")

        part_map = {}
        for lineno, ln in enumerate((l for l in partition_text.splitlines() if l.strip()),
                                    start=1):
            parts = ln.split()
            if len(parts) != 2:
                raise ManifestError(f"partition row {lineno} is malformed: {ln!r}")
            fname, code = parts
            if code not in ("0", "1", "2"):
                raise ManifestError(f"partition row {lineno}: unknown code {code!r}")
            part_map[fname] = int(code)
        if set(part_map) != set(filenames):
            raise ManifestError(
                f"attribute list has {len(filenames)} images, partition list "
                f"has {len(part_map)}, and they must name the same files")
        partitions = np.array([part_map[f] for f in filenames], dtype=np.int8)
        return cls(names, filenames, values, partitions, images_dir)

    def manifest(self, attribute):
        """{'train': [...], 'val': [...], 'test': [...]} for one attribute."""
        if attribute not in self.names:
            raise AttributeCoverageError(f"attribute {attribute!r} not in the CelebA header")
        j = self.names.index(attribute)
        out = {"train": [], "val": [], "test": []}
        for i, fname in enumerate(self.filenames):
            path = os.path.join(self.images_dir, fname) if self.images_dir else fname
            rec = SampleRecord(image=path,
                               labels={attribute: int(self.values[i, j])})
            out[CELEBA_PARTITIONS[int(self.partitions[i])]].append(rec)
        return out

    def schema(self):
        return tuple(AttributeSchema(n, ("absent", "present"), head="sigmoid")
                     for n in self.names)

    def serialize(self):
        """Back to the (attr_text, partition_text) row formats."""
        attr_lines = [str(len(self.filenames)), " ".join(self.names)]
        for i, fname in enumerate(self.filenames):
            vals = " ".join("1" if v else "-1" for v in self.values[i])
            attr_lines.append(f"{fname} {vals}")
        part_lines = [f"{f} {int(p)}" for f, p in zip(self.filenames, self.partitions)]
        return "\n".join(attr_lines) + "\n", "\n".join(part_lines) + "\n"


def load_celeba(attr_file, partition_file, images_dir):
    try:
        with open(attr_file, "r", encoding="utf-8") as fh:
            attr_text = fh.read()
    except OSError as exc:
        raise IngestError(attr_file, f"cannot read attribute list: {exc}") from exc
    try:
        with open(partition_file, "r", encoding="utf-8") as fh:
            partition_text = fh.read()
    except OSError as exc:
        raise IngestError(partition_file, f"cannot read partition list: {exc}") from exc
    return CelebA.parse(attr_text, partition_text, images_dir)


# ---------------------------------------------------------------------------
# synthetic data


# Geometry per class index; all sizes are fractions of the content box.
_BAR_FRACTIONS = (0.30, 0.55, 0.80)       # height: vertical bar length
_SQUARE_FRACTIONS = (0.15, 0.28, 0.40)    # weight: square side
_ASPECTS = (0.6, 1.0, 1.6)                # body_type: center glyph width/height


def render_synthetic_image(size, labels, rng, noise=0.03):
    """Draw one sample as uint8 RGB [size, size, 3].

    Each labeled attribute controls an independent visual property:
    height sets the length of a left-side bar, weight the area of a
    right-side square, gender the center glyph's shape (ellipse or
    diamond), body_type its aspect ratio, ethnicity the hue of a frame
    around the content box.  Attributes absent from ``labels`` leave
    their glyph out (the center glyph defaults to an ellipse of aspect
    1 when only one of gender/body_type is present).
    """
    img = np.full((size, size, 3), 0.5, dtype=np.float64)
    m = size // 8
    b = size - 2 * m

    if "ethnicity" in labels:
        hue = labels["ethnicity"] / 7.0
        color = np.array(colorsys.hsv_to_rgb(hue, 1.0, 1.0))
        t = max(1, b // 12)
        img[m:m + t, m:size - m] = color
        img[size - m - t:size - m, m:size - m] = color
        img[m:size - m, m:m + t] = color
        img[m:size - m, size - m - t:size - m] = color

    if "height" in labels:
        bar = int(round(_BAR_FRACTIONS[labels["height"]] * b))
        y0 = m + (b - bar) // 2
        x0 = m + max(2, b // 8)
        img[y0:y0 + bar, x0:x0 + max(2, b // 12)] = 1.0

    if "weight" in labels:
        side = int(round(_SQUARE_FRACTIONS[labels["weight"]] * b))
        x1 = size - m - max(2, b // 8)
        y0 = m + (b - side) // 2
        img[y0:y0 + side, x1 - side:x1] = 0.0

    if "gender" in labels or "body_type" in labels:
        aspect = _ASPECTS[labels.get("body_type", 1)]
        shape = labels.get("gender", 0)
        r = 0.18 * b
        rx, ry = r * aspect, r
        cy = cx = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        dx = (xx - cx) / rx
        dy = (yy - cy) / ry
        inside = (dx * dx + dy * dy <= 1.0) if shape == 0 else (np.abs(dx) + np.abs(dy) <= 1.0)
        img[inside] = np.array([0.85, 0.15, 0.55])

    img += rng.uniform(-noise, noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _balanced_classes(n, k, rng):
    reps = -(-n // k)
    seq = np.tile(np.arange(k), reps)[:n]
    return seq[rng.permutation(n)]


def gen_synthetic(out_dir, count, size=32, attributes=None, seed=0, noise=0.03,
                  label_coverage=1.0, with_bbox=True):
    """Write a synthetic dataset: PNGs, manifest.jsonl, schema.json.

    Class assignment is balanced per attribute (counts differ by at
    most one) and independent across attributes.  ``label_coverage``
    below 1 drops each (record, attribute) label with that probability
    kept, so subset-labeled manifests can be exercised.  Returns the
    record list and the schema.
    """
    if size < 16:
        raise ContractError(f"synthetic images need size >= 16, got {size}")
    if count < 1:
        raise ContractError(f"count must be positive, got {count}")
    if not 0.0 < label_coverage <= 1.0:
        raise ContractError(f"label_coverage must be in (0, 1], got {label_coverage}")
    schemas = default_schema()
    if attributes is not None:
        schemas = tuple(schema_for(schemas, a) for a in attributes)

    rng = np.random.default_rng(seed)
    assign = {s.name: _balanced_classes(count, len(s.classes), rng) for s in schemas}

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    m = size // 8
    records = []
    for i in range(count):
        labels = {name: int(cls[i]) for name, cls in assign.items()}
        pixels = render_synthetic_image(size, labels, rng, noise=noise)
        fname = f"{i:05d}.png"
        Image.fromarray(pixels).save(os.path.join(img_dir, fname))
        if label_coverage < 1.0:
            labels = {k: v for k, v in labels.items() if rng.random() < label_coverage}
            if not labels:
                labels = None
        bbox = (m, m, size - m, size - m) if with_bbox else None
        records.append(SampleRecord(image=os.path.join("images", fname),
                                    bbox=bbox, labels=labels))

    save_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    save_schema(schemas, os.path.join(out_dir, "schema.json"))
    return records, schemas


# ---------------------------------------------------------------------------
# batching


class DataSource:
    """Turns records into image tensors: decode, padded crop, resize."""

    def __init__(self, root, target=224, crop_rule=None):
        self.root = root
        self.target = target
        self.crop_rule = crop_rule or CropRule()

    def image_tensor(self, record):
        path = record.image
        if not os.path.isabs(path):
            path = os.path.join(self.root, path)
        img = decode_image(path)
        if record.bbox is not None:
            h, w = img.shape[:2]
            x0, y0, x1, y1 = padded_crop(w, h, record.bbox, self.crop_rule)
            img = img[y0:y1, x0:x1]
        return resize_rescale(img, self.target)


def batch_iterator(records, source, attribute, batch_size=32, phase="eval",
                   seed=0, epoch=0, augment_cfg=None):
    """Yield (images Tensor [N,3,T,T], labels int64 [N]) batches.

    Train phase reshuffles from (seed, epoch) and augments each sample
    with its own (seed, epoch, index) stream; eval phase is the stable
    record order with no augmentation.  The last partial batch is
    emitted.  An unreadable image aborts the run.
    """
    if phase not in ("train", "eval"):
        raise ContractError(f"phase must be 'train' or 'eval', got {phase!r}")
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    n = len(records)
    if phase == "train":
        order = np.random.default_rng((seed, epoch)).permutation(n)
    else:
        order = np.arange(n)
    cfg = augment_cfg if augment_cfg is not None else AugmentConfig()

    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = []
        labels = []
        for i in idx:
            rec = records[int(i)]
            if not rec.labels or attribute not in rec.labels:
                raise LabelError(
                    f"record {rec.image} lacks attribute {attribute!r}; filter before batching")
            img = source.image_tensor(rec)
            if phase == "train":
                img = augment(img, cfg, np.random.default_rng((seed, epoch, int(i))))
            images.append(img)
            labels.append(rec.labels[attribute])
        yield Tensor(np.stack(images)), np.asarray(labels, dtype=np.int64)
