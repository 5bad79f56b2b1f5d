"""Point-cloud data types, the synthetic long-tail generator, splitting,
the dataset file format and the 24-bit mask pixel codec."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")

DATASET_MAGIC = b"C3DS"
DATASET_VERSION = 1

MIN_POINTS_PER_PART = 8
MAX_TEMPLATE_PARTS = 6

SHAPE_NAMES = [
    "chair", "table", "sofa", "lamp", "bed", "cabinet", "bench", "stool",
    "desk", "shelf", "vase", "bottle", "mug", "bowl", "car", "bicycle",
    "scooter", "airplane", "boat", "guitar", "clock", "mirror", "door",
    "faucet", "knife", "teapot", "wardrobe", "dresser", "planter", "trolley",
]

PART_NAMES = [
    "leg", "seat", "back", "arm", "top", "drawer", "door", "handle", "shelf",
    "base", "frame", "shade", "bulb", "body", "neck", "lid", "spout", "wheel",
    "seat cushion", "backrest", "headboard", "footboard", "mattress", "rail",
    "knob", "hinge", "panel", "stretcher", "cap", "blade", "hull", "mast",
    "wing", "tail", "fuselage", "fork", "pedal", "chain", "string", "bridge",
    "dial", "hand", "glass", "rim", "foot", "column", "bracket", "cover",
]

# Material name -> color word; also the source of canonical point colors.
DEFAULT_COLOR_MAP = {
    "oak wood": "brown",
    "leather": "black",
    "steel": "silver",
    "plastic": "white",
    "fabric": "blue",
    "glass": "clear",
    "marble": "gray",
    "brass": "golden",
    "velvet": "red",
    "rubber": "dark",
    "walnut wood": "chocolate",
    "ceramic": "ivory",
    "copper": "orange",
    "wicker": "tan",
    "jade stone": "green",
    "lacquer": "purple",
}

COLOR_RGB = {
    "brown": (0.55, 0.35, 0.17),
    "black": (0.08, 0.08, 0.08),
    "silver": (0.75, 0.75, 0.78),
    "white": (0.95, 0.95, 0.95),
    "blue": (0.15, 0.30, 0.80),
    "clear": (0.80, 0.92, 0.95),
    "gray": (0.50, 0.50, 0.50),
    "golden": (0.85, 0.68, 0.20),
    "red": (0.75, 0.10, 0.12),
    "dark": (0.25, 0.22, 0.20),
    "chocolate": (0.36, 0.20, 0.10),
    "ivory": (0.98, 0.94, 0.82),
    "orange": (0.90, 0.50, 0.15),
    "tan": (0.82, 0.70, 0.52),
    "green": (0.20, 0.60, 0.30),
    "purple": (0.50, 0.20, 0.60),
}


class DatasetFormatError(ValueError):
    """Base class for dataset file load failures."""


class MagicMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class InvalidPixelError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.colors = np.asarray(self.colors)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if self.colors.shape != self.coords.shape:
            raise ValueError("colors must match coords in shape")
        if len(self.coords) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not (np.all(np.isfinite(self.coords)) and np.all(np.isfinite(self.colors))):
            raise ValueError("point cloud contains non-finite values")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise ValueError("color channels must lie in [0, 1]")

    def __len__(self):
        return len(self.coords)

    def features(self, dtype=np.float64) -> np.ndarray:
        """The N x 6 (x, y, z, r, g, b) matrix fed to the encoder."""
        return np.concatenate([self.coords, self.colors], axis=1).astype(dtype, copy=False)


@dataclass
class LabeledShape:
    cloud: PointCloud
    part_labels: np.ndarray
    material_labels: np.ndarray
    shape_class: int

    def __post_init__(self):
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.material_labels = np.asarray(self.material_labels, dtype=np.int64)
        n = len(self.cloud)
        if self.part_labels.shape != (n,) or self.material_labels.shape != (n,):
            raise ValueError("label arrays must have one entry per point")
        self.shape_class = int(self.shape_class)

    def __len__(self):
        return len(self.cloud)

    def check_labels(self, n_parts: int, n_materials: int, n_shapes: int) -> None:
        if self.part_labels.min() < 0 or self.part_labels.max() >= n_parts:
            raise LabelRangeError(f"part label outside [0, {n_parts})")
        if self.material_labels.min() < 0 or self.material_labels.max() >= n_materials:
            raise LabelRangeError(f"material label outside [0, {n_materials})")
        if not 0 <= self.shape_class < n_shapes:
            raise LabelRangeError(f"shape class {self.shape_class} outside [0, {n_shapes})")


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("vocabulary must not be empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, idx: int) -> str:
        return self.names[idx]

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class Dataset:
    shapes: list
    part_vocab: LabelVocabulary
    material_vocab: LabelVocabulary
    shape_vocab: LabelVocabulary
    split_of: np.ndarray = None

    def __post_init__(self):
        if self.split_of is None:
            self.split_of = np.zeros(len(self.shapes), dtype=np.int64)
        self.split_of = np.asarray(self.split_of, dtype=np.int64)
        if self.split_of.shape != (len(self.shapes),):
            raise ValueError("need exactly one split tag per shape")
        if np.any((self.split_of < 0) | (self.split_of > 2)):
            raise ValueError("split tags must be 0 (train), 1 (valid) or 2 (test)")
        for s in self.shapes:
            s.check_labels(len(self.part_vocab), len(self.material_vocab), len(self.shape_vocab))

    def __len__(self):
        return len(self.shapes)

    def indices(self, split: int | str) -> np.ndarray:
        if isinstance(split, str):
            split = SPLIT_NAMES.index(split)
        return np.flatnonzero(self.split_of == split)

    def subset(self, split: int | str) -> list:
        return [self.shapes[i] for i in self.indices(split)]

    def class_counts(self) -> np.ndarray:
        return np.bincount([s.shape_class for s in self.shapes], minlength=len(self.shape_vocab))


@dataclass(frozen=True)
class GeneratorConfig:
    n_shape_classes: int = 20
    n_part_classes: int = 40
    n_material_classes: int = 12
    shapes_total: int = 1000
    points_per_shape: int = 2048
    zipf_exponent: float = 1.5
    seed: int = 0
    compositions_per_shape: int = 1

    def validate(self) -> None:
        for name in ("n_shape_classes", "n_part_classes", "n_material_classes",
                     "shapes_total", "points_per_shape", "compositions_per_shape"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_part_classes < 2 or self.n_material_classes < 2:
            raise ValueError("need at least 2 part classes and 2 material classes")
        if self.shapes_total < self.n_shape_classes:
            raise ValueError(
                f"shapes_total={self.shapes_total} cannot give each of "
                f"{self.n_shape_classes} classes at least one shape")
        if not np.isfinite(self.zipf_exponent) or self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be a finite real >= 0")
        if self.points_per_shape < MIN_POINTS_PER_PART * MAX_TEMPLATE_PARTS:
            raise ValueError(
                f"points_per_shape must be >= {MIN_POINTS_PER_PART * MAX_TEMPLATE_PARTS}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def extend_names(base: Sequence[str], n: int, stem: str) -> list:
    """First n names of base, padded with numbered names when base runs out."""
    names = list(base[:n])
    for i in range(len(names), n):
        names.append(f"{stem} {i}")
    return names


def default_color_map(material_names: Sequence[str]) -> dict:
    colors = list(COLOR_RGB)
    out = {}
    for i, name in enumerate(material_names):
        out[name] = DEFAULT_COLOR_MAP.get(name, colors[i % len(colors)])
    return out


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    All-coincident clouds are returned centered but unscaled.
    """
    coords = np.asarray(cloud.coords, dtype=np.float64)
    centered = coords - coords.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale > 0:
        centered = centered / scale
    return PointCloud(centered, cloud.colors.copy())


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(exponent))
    return w / w.sum()


def zipf_class_counts(total: int, n_classes: int, exponent: float) -> np.ndarray:
    """Deterministic Zipf allocation: one shape per class, the rest by largest remainder.

    Counts are non-increasing in rank (class 0 is rank 1).
    """
    if total < n_classes:
        raise ValueError("total must be at least the number of classes")
    shares = zipf_weights(n_classes, exponent) * (total - n_classes)
    counts = np.floor(shares).astype(np.int64)
    rest = (total - n_classes) - counts.sum()
    order = np.lexsort((np.arange(n_classes), -(shares - counts)))
    counts[order[:rest]] += 1
    return counts + 1


def _allocate(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    n = len(weights)
    free = total - minimum * n
    shares = weights / weights.sum() * free
    counts = np.floor(shares).astype(np.int64)
    rest = free - counts.sum()
    order = np.lexsort((np.arange(n), -(shares - counts)))
    counts[order[:rest]] += 1
    return counts + minimum


@dataclass
class PartTemplate:
    part_id: int
    kind: str
    center: np.ndarray
    size: np.ndarray
    materials: np.ndarray

    def area(self) -> float:
        a, b, c = self.size
        if self.kind == "box":
            return 2 * (a * b + b * c + a * c)
        if self.kind == "cylinder":
            return 2 * np.pi * a * c + 2 * np.pi * a * a
        return 4 * np.pi * a * a

    def sample(self, n: int, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a, b, c = self.size * scale
        if self.kind == "box":
            half = np.array([a, b, c]) / 2
            face_area = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
            face = rng.choice(6, size=n, p=face_area / face_area.sum())
            pts = rng.uniform(-1, 1, size=(n, 3)) * half
            axis = face // 2
            sign = np.where(face % 2 == 0, -1.0, 1.0)
            pts[np.arange(n), axis] = sign * half[axis]
        elif self.kind == "cylinder":
            r, h = a, c
            side, cap = 2 * np.pi * r * h, np.pi * r * r
            which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
            theta = rng.uniform(0, 2 * np.pi, size=n)
            rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
            z = np.where(which == 0, rng.uniform(-h / 2, h / 2, size=n),
                         np.where(which == 1, -h / 2, h / 2))
            pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        else:
            v = rng.normal(size=(n, 3))
            pts = v / np.linalg.norm(v, axis=1, keepdims=True) * a
        return pts + self.center


def _class_template(cfg: GeneratorConfig, k: int, compat: list) -> list:
    rng = np.random.default_rng([cfg.seed, 0, k])
    n_parts = int(rng.integers(2, min(MAX_TEMPLATE_PARTS, cfg.n_part_classes) + 1))
    parts = rng.choice(cfg.n_part_classes, size=n_parts, replace=False,
                       p=zipf_weights(cfg.n_part_classes, 1.0))
    kinds = ("box", "cylinder", "sphere")
    out = []
    for q in parts:
        out.append(PartTemplate(
            part_id=int(q),
            kind=kinds[int(rng.integers(3))],
            center=rng.uniform(-1.0, 1.0, size=3),
            size=rng.uniform(0.2, 0.7, size=3),
            materials=compat[int(q)],
        ))
    return out


def _material_compatibility(cfg: GeneratorConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 3])
    out = []
    hi = min(4, cfg.n_material_classes)
    for _ in range(cfg.n_part_classes):
        m = int(rng.integers(2, hi + 1))
        out.append(np.sort(rng.choice(cfg.n_material_classes, size=m, replace=False)))
    return out


def _make_shape(cfg, template, shape_class, geo_key, mat_key, material_rgb):
    geo = np.random.default_rng([cfg.seed, 1, shape_class, geo_key])
    mat = np.random.default_rng([cfg.seed, 2, mat_key])
    counts = _allocate(cfg.points_per_shape, np.array([p.area() for p in template]),
                       MIN_POINTS_PER_PART)
    coords, colors, parts, mats = [], [], [], []
    for part, n in zip(template, counts):
        scale = geo.uniform(0.9, 1.1, size=3)
        coords.append(part.sample(int(n), scale, geo))
        w = zipf_weights(len(part.materials), 1.0)
        m = int(part.materials[mat.choice(len(part.materials), p=w)])
        noise = mat.uniform(-0.05, 0.05, size=(int(n), 3))
        colors.append(np.clip(material_rgb[m] + noise, 0.0, 1.0))
        parts.append(np.full(int(n), part.part_id))
        mats.append(np.full(int(n), m))
    cloud = normalize_cloud(PointCloud(np.concatenate(coords), np.concatenate(colors)))
    cloud = PointCloud(cloud.coords.astype(np.float32), cloud.colors.astype(np.float32))
    return LabeledShape(cloud, np.concatenate(parts), np.concatenate(mats), shape_class)


def generate_synthetic_dataset(cfg: GeneratorConfig) -> Dataset:
    """Build a long-tail dataset of primitive-assembled shapes.

    Shape class k has Zipf rank k + 1. Every shape is derived from its own
    RNG stream, so the result depends only on ``cfg``. All shapes are tagged
    train; use :func:`split_dataset` to assign splits.
    """
    cfg.validate()
    part_vocab = LabelVocabulary(extend_names(PART_NAMES, cfg.n_part_classes, "part"))
    mat_names = extend_names(list(DEFAULT_COLOR_MAP), cfg.n_material_classes, "material")
    material_vocab = LabelVocabulary(mat_names)
    shape_vocab = LabelVocabulary(extend_names(SHAPE_NAMES, cfg.n_shape_classes, "shape"))

    color_map = default_color_map(mat_names)
    material_rgb = np.array([COLOR_RGB[color_map[m]] for m in mat_names])
    compat = _material_compatibility(cfg)
    templates = [_class_template(cfg, k, compat) for k in range(cfg.n_shape_classes)]

    counts = zipf_class_counts(cfg.shapes_total, cfg.n_shape_classes, cfg.zipf_exponent)
    shapes = []
    for k, count in enumerate(counts):
        for j in range(int(count)):
            idx = len(shapes)
            shapes.append(_make_shape(cfg, templates[k], k, j // cfg.compositions_per_shape,
                                      idx, material_rgb))
    return Dataset(shapes, part_vocab, material_vocab, shape_vocab)


def split_dataset(ds: Dataset, fractions: Sequence[float], seed: int) -> Dataset:
    """Stratified train/valid/test assignment; every class keeps >= 1 train shape."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative reals summing to 1")
    classes = np.array([s.shape_class for s in ds.shapes], dtype=np.int64)
    split_of = np.zeros(len(ds.shapes), dtype=np.int64)
    for k in np.unique(classes):
        members = np.flatnonzero(classes == k)
        rng = np.random.default_rng([seed, int(k)])
        members = members[rng.permutation(len(members))]
        n = len(members)
        shares = fr * n
        sizes = np.floor(shares).astype(np.int64)
        order = np.lexsort((np.arange(3), -(shares - sizes)))
        sizes[order[: n - sizes.sum()]] += 1
        if sizes[TRAIN] == 0:
            donor = VALID if sizes[VALID] >= sizes[TEST] else TEST
            sizes[donor] -= 1
            sizes[TRAIN] += 1
        bounds = np.cumsum(sizes)
        split_of[members[:bounds[0]]] = TRAIN
        split_of[members[bounds[0]:bounds[1]]] = VALID
        split_of[members[bounds[1]:]] = TEST
    return Dataset(ds.shapes, ds.part_vocab, ds.material_vocab, ds.shape_vocab, split_of)


def pack_mask_pixel(part_id: int, coarse_mat_id: int, fine_mat_id: int) -> tuple:
    """Pack label ids into an (R, G, B) byte triple.

    Word layout: part in bits 0-10, coarse material in bits 11-15, fine
    material in bits 16-22; bit 23 stays zero. R holds the top byte.
    """
    for value, bits, name in ((part_id, 11, "part_id"), (coarse_mat_id, 5, "coarse_mat_id"),
                              (fine_mat_id, 7, "fine_mat_id")):
        if not 0 <= int(value) < (1 << bits):
            raise ValueError(f"{name}={value} does not fit in {bits} bits")
    word = int(part_id) | (int(coarse_mat_id) << 11) | (int(fine_mat_id) << 16)
    return (word >> 16) & 0xFF, (word >> 8) & 0xFF, word & 0xFF


def unpack_mask_pixel(r: int, g: int, b: int) -> tuple:
    for v in (r, g, b):
        if not 0 <= int(v) <= 255:
            raise ValueError(f"{v} is not a byte")
    word = (int(r) << 16) | (int(g) << 8) | int(b)
    fine = word >> 16
    if fine >= 1 << 7:
        raise InvalidPixelError(f"reserved bit set in pixel ({r}, {g}, {b})")
    return word & 0x7FF, (word >> 11) & 0x1F, fine


def _write_vocab(fh, vocab: LabelVocabulary) -> None:
    fh.write(struct.pack("<I", len(vocab)))
    for name in vocab.names:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` in the little-endian C3DS binary format."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HIIII", DATASET_VERSION, len(ds.shapes), len(ds.part_vocab),
                             len(ds.material_vocab), len(ds.shape_vocab)))
        for vocab in (ds.part_vocab, ds.material_vocab, ds.shape_vocab):
            _write_vocab(fh, vocab)
        for shape, tag in zip(ds.shapes, ds.split_of):
            n = len(shape)
            fh.write(struct.pack("<IBH", n, int(tag), shape.shape_class))
            fh.write(shape.cloud.features(np.float32).astype("<f4").tobytes())
            fh.write(shape.part_labels.astype("<u2").tobytes())
            fh.write(shape.material_labels.astype("<u2").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_vocab(rd: _Reader, expected: int) -> LabelVocabulary:
    (count,) = rd.unpack("<I")
    if count != expected:
        raise DatasetFormatError(f"vocabulary size {count} disagrees with header {expected}")
    names = []
    for _ in range(count):
        (length,) = rd.unpack("<H")
        names.append(rd.take(length).decode("utf-8"))
    return LabelVocabulary(names)


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if len(buf) < 4 or rd.take(4) != DATASET_MAGIC:
        raise MagicMismatchError(f"{path} is not a C3DS dataset file")
    version, n_shapes, c_part, c_mat, c_shape = rd.unpack("<HIIII")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    part_vocab = _read_vocab(rd, c_part)
    material_vocab = _read_vocab(rd, c_mat)
    shape_vocab = _read_vocab(rd, c_shape)
    shapes, tags = [], []
    for _ in range(n_shapes):
        n, tag, cls = rd.unpack("<IBH")
        feats = np.frombuffer(rd.take(24 * n), dtype="<f4").reshape(n, 6).astype(np.float32)
        parts = np.frombuffer(rd.take(2 * n), dtype="<u2").astype(np.int64)
        mats = np.frombuffer(rd.take(2 * n), dtype="<u2").astype(np.int64)
        if n and (parts.max() >= c_part or mats.max() >= c_mat):
            raise LabelRangeError("point label outside its vocabulary")
        if cls >= c_shape:
            raise LabelRangeError(f"shape class {cls} outside its vocabulary")
        if tag > 2:
            raise DatasetFormatError(f"bad split tag {tag}")
        shapes.append(LabeledShape(PointCloud(feats[:, :3], feats[:, 3:]), parts, mats, cls))
        tags.append(tag)
    if rd.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - rd.pos} trailing bytes after last shape")
    return Dataset(shapes, part_vocab, material_vocab, shape_vocab, np.array(tags, dtype=np.int64))


def export_vocabularies(ds: Dataset, directory) -> None:
    """Write parts.json / materials.json / classes.json name arrays."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for fname, vocab in (("parts.json", ds.part_vocab), ("materials.json", ds.material_vocab),
                         ("classes.json", ds.shape_vocab)):
        (d / fname).write_text(json.dumps(list(vocab.names), indent=1) + "\n")


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.part_vocab, a.material_vocab, a.shape_vocab) != (b.part_vocab, b.material_vocab,
                                                          b.shape_vocab):
        return False
    if len(a.shapes) != len(b.shapes) or not np.array_equal(a.split_of, b.split_of):
        return False
    for s, t in zip(a.shapes, b.shapes):
        if s.shape_class != t.shape_class:
            return False
        for x, y in ((s.cloud.coords, t.cloud.coords), (s.cloud.colors, t.cloud.colors),
                     (s.part_labels, t.part_labels), (s.material_labels, t.material_labels)):
            if x.dtype != y.dtype or not np.array_equal(x, y):
                return False
    return True
