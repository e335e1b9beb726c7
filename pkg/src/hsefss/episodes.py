"""Synthetic shape benchmark, directory loader and episode sampling.

Directory layout::

    <root>/manifest.json
    <root>/<phase>/<class>/img_<id>.png    8-bit RGB
    <root>/<phase>/<class>/mask_<id>.png   8-bit grayscale, {0, 255}

``phase`` is ``train`` or ``test``. Every class appears in both phases; folds
decide which classes episodes may draw from.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, SamplingError
from .semantics import descriptor_embedding, save_embeddings

DEFAULT_CLASSES = ("circle", "square", "triangle", "ring", "cross", "bar", "diamond", "ellipse", "L-shape")
PHASES = ("train", "test")

# roundness, has a hole, corner count, elongation, concavity
SHAPE_ATTRIBUTES = {
    "circle": (1.0, 0.0, 0, 0.0, 0.0),
    "square": (0.0, 0.0, 4, 0.0, 0.0),
    "triangle": (0.0, 0.0, 3, 0.0, 0.0),
    "ring": (1.0, 1.0, 0, 0.0, 0.0),
    "cross": (0.0, 0.0, 12, 0.0, 1.0),
    "bar": (0.0, 0.0, 4, 1.0, 0.0),
    "diamond": (0.0, 0.0, 4, 0.0, 0.0),
    "ellipse": (1.0, 0.0, 0, 1.0, 0.0),
    "L-shape": (0.0, 0.0, 6, 0.5, 1.0),
}
N_FOLDS = 3
EMBEDDINGS_FILE = "embeddings.jsonl"


def default_folds(classes) -> list[list[str]]:
    return [list(part) for part in np.array_split(np.array(classes, dtype=object), N_FOLDS)]


@dataclass
class DatasetSpec:
    classes: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    folds: list[list[str]] | None = None
    extent: int = 64
    train_per_class: int = 60
    test_per_class: int = 20

    def __post_init__(self):
        if self.folds is None:
            self.folds = default_folds(self.classes)
        flat = [c for f in self.folds for c in f]
        if sorted(flat) != sorted(self.classes) or len(set(flat)) != len(flat):
            raise ValueError("folds must be disjoint and cover all classes")
        if len(self.folds) != N_FOLDS:
            raise ValueError(f"expected {N_FOLDS} folds, got {len(self.folds)}")

    def count(self, phase: str) -> int:
        return self.train_per_class if phase == "train" else self.test_per_class


# --------------------------------------------------------------------------
# rasterization


def _local_coords(kind_params: dict, extent: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:extent, 0:extent] + 0.5
    dx, dy = xs - kind_params["cx"], ys - kind_params["cy"]
    a = kind_params["angle"]
    ca, sa = math.cos(a), math.sin(a)
    return ca * dx + sa * dy, -sa * dx + ca * dy


def rasterize(shape: dict, extent: int) -> np.ndarray:
    """Boolean mask of one shape instance described by its parameter dict."""
    u, v = _local_coords(shape, extent)
    s = shape["size"]
    kind = shape["kind"]
    r2 = u * u + v * v
    if kind == "circle":
        return r2 <= s * s
    if kind == "square":
        return (np.abs(u) <= 0.8 * s) & (np.abs(v) <= 0.8 * s)
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            th = math.pi / 2 + k * 2 * math.pi / 3 + math.pi / 3
            # edge normal points away from the centroid; inradius is s/2
            inside &= u * math.cos(th) + v * math.sin(th) <= 0.5 * s
        return inside
    if kind == "ring":
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if kind == "cross":
        arm = 0.33 * s
        return ((np.abs(u) <= s) & (np.abs(v) <= arm)) | ((np.abs(v) <= s) & (np.abs(u) <= arm))
    if kind == "bar":
        return (np.abs(u) <= s) & (np.abs(v) <= 0.35 * s)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= s
    if kind == "ellipse":
        return (u / s) ** 2 + (v / (0.55 * s)) ** 2 <= 1.0
    if kind == "L-shape":
        upright = (u >= -s) & (u <= -0.25 * s) & (np.abs(v) <= s)
        foot = (np.abs(u) <= s) & (v >= 0.3 * s) & (v <= s)
        return upright | foot
    raise ValueError(f"unknown shape kind {kind!r}")


def class_hues(classes, folds) -> dict[str, float]:
    """Characteristic hue per class, interleaved so each fold spans the colour wheel."""
    n = len(classes)
    hues = {}
    for f, members in enumerate(folds):
        for j, cls in enumerate(members):
            hues[cls] = ((j * len(folds) + f) / n) % 1.0
    return hues


def class_descriptor(cls: str, hue: float) -> np.ndarray:
    """Attribute vector a description of the class would convey: colour plus shape traits."""
    round_, hole, corners, elong, concave = SHAPE_ATTRIBUTES[cls]
    a = 2 * math.pi * hue
    return np.array([2 * math.cos(a), 2 * math.sin(a), round_, hole, corners / 6, elong, concave])


def _shape_color(hue: float, rng: np.random.Generator) -> list[int]:
    h = (hue + rng.uniform(-0.03, 0.03)) % 1.0
    rgb = colorsys.hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0))
    return [int(round(255 * c)) for c in rgb]


def _random_shape(kind: str, extent: int, rng: np.random.Generator, hues: dict) -> dict:
    s = float(rng.uniform(0.11, 0.22) * extent)
    return {
        "kind": kind,
        "cx": float(rng.uniform(s, extent - s)),
        "cy": float(rng.uniform(s, extent - s)),
        "size": s,
        "angle": float(rng.uniform(0, 2 * math.pi)),
        "color": _shape_color(hues[kind], rng),
    }


def _background(extent: int, rng: np.random.Generator) -> np.ndarray:
    base = 255 * np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0, 0.3), rng.uniform(0.3, 0.8)))
    coarse = rng.normal(0, 20, size=(3, 8, 8))
    ys = (np.arange(extent) + 0.5) * 8 / extent - 0.5
    idx = np.clip(ys, 0, 7)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 7)
    f = idx - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i1, :] * f[None, :, None]
    tex = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]
    return base[:, None, None] + tex + rng.normal(0, 6, size=(3, extent, extent))


def render_sample(target: str, others, extent: int, rng: np.random.Generator, hues: dict, max_fraction: float = 0.5):
    """Draw one image: 1-3 instances of ``target`` plus 0-2 distractors from ``others``.

    Shapes are coloured around ``hues[kind]`` with per-instance jitter in hue,
    saturation and value. Returns (uint8 image HxWx3, uint8 mask HxW in {0,1}, record dict).
    """
    others = list(others)
    for _ in range(200):
        img = _background(extent, rng)
        n_distract = int(rng.integers(0, 3)) if others else 0
        distractors = [_random_shape(str(rng.choice(others)), extent, rng, hues) for _ in range(n_distract)]
        targets = [_random_shape(target, extent, rng, hues) for _ in range(int(rng.integers(1, 4)))]
        mask = mask_from_shapes(targets, extent)
        frac = mask.mean()
        if not 0.01 <= frac <= max_fraction:
            continue
        for shape in distractors + targets:
            m = rasterize(shape, extent)
            img[:, m] = np.asarray(shape["color"], dtype=float)[:, None] + rng.normal(0, 8, size=(3, int(m.sum())))
        image = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        return image, mask.astype(np.uint8), {"shapes": targets, "distractors": distractors}
    raise RuntimeError("could not place shapes within the foreground budget")


def mask_from_shapes(shapes, extent: int) -> np.ndarray:
    mask = np.zeros((extent, extent), dtype=bool)
    for shape in shapes:
        mask |= rasterize(shape, extent)
    return mask


def generate_dataset(spec: DatasetSpec, seed: int, out_dir, embed_dim: int = 16) -> dict:
    """Write the synthetic benchmark under ``out_dir`` and return its manifest.

    Also writes ``embeddings.jsonl``: descriptor embeddings of the shape
    classes (hue and shape attributes), standing in for exported text
    embeddings of the class names.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    hues = class_hues(spec.classes, spec.folds)
    samples: dict = {}
    counts: dict = {}
    for pi, phase in enumerate(PHASES):
        samples[phase], counts[phase] = {}, {}
        for ci, cls in enumerate(spec.classes):
            cls_dir = out / phase / cls
            cls_dir.mkdir(parents=True, exist_ok=True)
            # distractors come from the target's own fold so held-out classes never
            # appear, even unlabeled, in another fold's images
            fold = next(f for f in spec.folds if cls in f)
            others = [c for c in fold if c != cls]
            records = []
            for i in range(spec.count(phase)):
                rng = np.random.default_rng([int(seed), pi, ci, i])
                image, mask, rec = render_sample(cls, others, spec.extent, rng, hues)
                Image.fromarray(image, "RGB").save(cls_dir / f"img_{i:04d}.png")
                Image.fromarray(mask * 255, "L").save(cls_dir / f"mask_{i:04d}.png")
                records.append({"id": f"{i:04d}", **rec})
            samples[phase][cls] = records
            counts[phase][cls] = len(records)
    manifest = {"spec": asdict(spec), "seed": int(seed), "counts": counts, "samples": samples}
    manifest["hues"] = hues
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    described = [c for c in spec.classes if c in SHAPE_ATTRIBUTES]
    if described:
        embeds = [descriptor_embedding(c, class_descriptor(c, hues[c]), embed_dim, seed) for c in described]
        save_embeddings(out / EMBEDDINGS_FILE, embeds)
    return manifest


# --------------------------------------------------------------------------
# loading


@dataclass
class Sample:
    key: tuple[str, str, str]  # (phase, class, id)
    image: np.ndarray  # float32, 3 x H x W in [0, 1]
    mask: np.ndarray  # uint8, H x W in {0, 1}


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    folds: list[list[str]]
    samples: dict[str, dict[str, list[Sample]]]
    manifest: dict | None = None

    def count(self, phase: str, cls: str) -> int:
        return len(self.samples.get(phase, {}).get(cls, []))

    def fold_classes(self, fold: int) -> list[str]:
        if not 0 <= fold < len(self.folds):
            raise ValueError(f"fold must be in [0, {len(self.folds) - 1}], got {fold}")
        return list(self.folds[fold])


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset directory {root} does not exist")
    manifest = None
    mpath = root / "manifest.json"
    if mpath.exists():
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath}: {exc}") from exc
    if manifest is not None:
        classes = list(manifest["spec"]["classes"])
        folds = [list(f) for f in manifest["spec"]["folds"]]
    else:
        found = set()
        for phase in PHASES:
            if (root / phase).is_dir():
                found.update(p.name for p in (root / phase).iterdir() if p.is_dir())
        classes = sorted(found)
        if len(classes) < N_FOLDS:
            raise FormatError(f"{root}: need at least {N_FOLDS} class directories, found {len(classes)}")
        folds = default_folds(classes)

    samples: dict[str, dict[str, list[Sample]]] = {}
    for phase in PHASES:
        samples[phase] = {}
        for cls in classes:
            d = root / phase / cls
            if not d.is_dir():
                samples[phase][cls] = []
                continue
            names = sorted(os.listdir(d))
            img_ids = [n[4:-4] for n in names if n.startswith("img_") and n.endswith(".png")]
            mask_ids = {n[5:-4] for n in names if n.startswith("mask_") and n.endswith(".png")}
            for n in mask_ids - set(img_ids):
                raise FormatError(f"{d / f'mask_{n}.png'} has no matching image")
            items = []
            for i in img_ids:
                ipath, mpath_ = d / f"img_{i}.png", d / f"mask_{i}.png"
                if i not in mask_ids:
                    raise FormatError(f"{ipath} has no matching mask {mpath_.name}")
                img = _read_png(ipath, "RGB")
                mask = _read_png(mpath_, "L")
                if img.shape[:2] != mask.shape:
                    raise FormatError(f"{mpath_}: mask extent {mask.shape} != image extent {img.shape[:2]}")
                items.append(
                    Sample(
                        (phase, cls, i),
                        (img.transpose(2, 0, 1).astype(np.float32) / 255.0),
                        (mask >= 128).astype(np.uint8),
                    )
                )
            samples[phase][cls] = items
    return Dataset(root, classes, folds, samples, manifest)


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    support: list[tuple[np.ndarray, np.ndarray]]
    query_image: np.ndarray
    query_mask: np.ndarray
    class_name: str
    support_keys: list = field(default_factory=list)
    query_key: tuple | None = None

    @property
    def shots(self) -> int:
        return len(self.support)


def episode_rng(seed: int, index: int, phase: str, fold: int) -> np.random.Generator:
    """Generator addressed by (seed, index): episode i never depends on episodes < i."""
    return np.random.default_rng([int(seed), int(index), PHASES.index(phase), int(fold)])


def eligible_classes(dataset: Dataset, fold: int, phase: str) -> list[str]:
    held_out = set(dataset.fold_classes(fold))
    if phase == "test":
        return [c for c in dataset.classes if c in held_out]
    if phase == "train":
        return [c for c in dataset.classes if c not in held_out]
    raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")


def sample_episode(dataset: Dataset, fold: int, phase: str, shots: int, seed: int, index: int) -> Episode:
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    classes = eligible_classes(dataset, fold, phase)
    if not classes:
        raise SamplingError(f"no {phase} classes available for fold {fold}")
    rng = episode_rng(seed, index, phase, fold)
    cls = classes[int(rng.integers(len(classes)))]
    pool = dataset.samples[phase][cls]
    if len(pool) < shots + 1:
        raise SamplingError(f"class {cls!r} has {len(pool)} {phase} samples; {shots}-shot needs {shots + 1}")
    picks = rng.choice(len(pool), size=shots + 1, replace=False)
    support = [pool[int(i)] for i in picks[:shots]]
    query = pool[int(picks[-1])]
    return Episode(
        support=[(s.image, s.mask) for s in support],
        query_image=query.image,
        query_mask=query.mask,
        class_name=cls,
        support_keys=[s.key for s in support],
        query_key=query.key,
    )
