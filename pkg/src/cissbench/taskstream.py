"""Class-incremental task sequences and the synthetic shapes dataset."""

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels

BACKGROUND_ID = 0
IGNORE_ID = 255
REGIMES = ("overlapped", "disjoint", "full_disjoint")


class InvalidSampleError(ValueError):
    pass


class EmptyTaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    class_ids: tuple
    names: tuple = None
    background_id: int = BACKGROUND_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        object.__setattr__(self, "class_ids", ids)
        if ids != tuple(range(len(ids))):
            raise ValueError(f"class ids must be unique and contiguous from 0, got {ids}")
        if self.background_id not in ids:
            raise ValueError("background id missing from catalog")
        if self.ignore_id in ids:
            raise ValueError("ignore id must not be a class id")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
            if len(self.names) != len(ids):
                raise ValueError("one name per class id required")

    @classmethod
    def with_size(cls, num_classes, names=None):
        return cls(tuple(range(num_classes)), names)

    def __len__(self):
        return len(self.class_ids)

    def name(self, c):
        if self.names is None:
            return "background" if c == self.background_id else f"class{c}"
        return self.names[c]


@dataclass(frozen=True)
class TaskDefinition:
    index: int
    new_classes: frozenset
    seen_classes: frozenset
    regime: str

    def __post_init__(self):
        object.__setattr__(self, "new_classes", frozenset(int(c) for c in self.new_classes))
        object.__setattr__(self, "seen_classes", frozenset(int(c) for c in self.seen_classes))
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; valid: {', '.join(REGIMES)}")
        if self.index < 0:
            raise ValueError("task index must be >= 0")
        if not self.new_classes <= self.seen_classes:
            raise ValueError("new classes must be part of the seen classes")

    @property
    def old_classes(self):
        """C_{t-1}, including the background."""
        return self.seen_classes - self.new_classes


def make_tasks(splits, regime, background_id=BACKGROUND_ID):
    """Build cumulative task definitions from per-step lists of new class ids.

    ``make_tasks([[1, 2, 3, 4], [5, 6]], "disjoint")`` gives the two-step
    sequence used by the ``voc15-5-mini`` preset.
    """
    tasks = []
    seen = {background_id}
    for t, new in enumerate(splits):
        new = frozenset(int(c) for c in new)
        seen = seen | new
        tasks.append(TaskDefinition(t, new, frozenset(seen), regime))
    validate_tasks(tasks, background_id)
    return tasks


def validate_tasks(tasks, background_id=BACKGROUND_ID):
    prev = frozenset()
    for t, task in enumerate(tasks):
        if task.index != t:
            raise ValueError(f"task {t} carries index {task.index}")
        if background_id not in task.seen_classes:
            raise ValueError(f"task {t}: background missing from seen classes")
        if background_id in task.new_classes:
            raise ValueError(f"task {t}: background cannot be a new class")
        if task.new_classes & prev:
            raise ValueError(f"task {t}: new classes overlap previously seen classes")
        expected = (prev | task.new_classes | {background_id})
        if task.seen_classes != expected:
            raise ValueError(f"task {t}: seen classes are not C_(t-1) plus the new classes")
        if not task.new_classes:
            raise ValueError(f"task {t}: no new classes")
        if task.regime != tasks[0].regime:
            raise ValueError("all tasks of a stream share one regime")
        prev = task.seen_classes


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InvalidSampleError(f"image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.label.shape:
            raise InvalidSampleError(f"image {self.image.shape[:2]} and label {self.label.shape} sizes differ")


@dataclass
class SegDataset:
    """A stack of images and label maps.

    ``source_index`` points back into the split the samples were drawn from
    and ``orig_labels`` keeps the unrelabelled masks when a transform was
    applied.
    """

    images: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray = None
    orig_labels: np.ndarray = None

    def __post_init__(self):
        if self.images.shape[:3] != self.labels.shape:
            raise InvalidSampleError("images and labels differ in count or size")
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels))
        if self.orig_labels is None:
            self.orig_labels = self.labels

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return SegSample(self.images[i], self.labels[i])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SegDataset(self.images[idx], self.labels[idx], self.source_index[idx], self.orig_labels[idx])

    def with_labels(self, labels):
        return SegDataset(self.images, labels, self.source_index, self.orig_labels)

    @property
    def image_size(self):
        return tuple(self.labels.shape[1:])


# ---------------------------------------------------------------------------
# synthetic scenes

_BASE_SHAPES = ("circle", "rect", "triangle", "cross", "diamond", "ring")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_classes: int = 7
    image_size: tuple = (64, 64)
    shapes_per_image: tuple = (1, 3)
    num_train: int = 400
    num_val: int = 80
    num_test: int = 120
    seed: int = 0
    size_range: tuple = (7.0, 13.0)
    twin_fraction: float = 1 / 3
    twin_hue_offset: float = 0.04
    pixel_noise: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        object.__setattr__(self, "size_range", tuple(float(v) for v in self.size_range))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background included)")
        if self.num_classes > 255:
            raise ValueError("num_classes must fit below the ignore id")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ValueError("shapes_per_image must be a range with 1 <= lo <= hi")
        smin, smax = self.size_range
        if smin <= 0 or smax < smin:
            raise ValueError("size_range must satisfy 0 < min <= max")
        template = 2 * math.ceil(smax) + 1
        if min(self.image_size) < template:
            raise ValueError(
                f"image_size {self.image_size} is smaller than the largest shape template ({template} px)"
            )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassDesign:
    shape: str
    hue: float
    saturation: float
    value: float
    aspect: tuple
    twin_of: int = None


def class_designs(num_classes, twin_fraction=1 / 3, twin_hue_offset=0.04):
    """Appearance of every foreground class, keyed by class id.

    The last ``floor(twin_fraction * n_fg)`` classes are twins of the first
    base classes: same shape family, elongated, with a hue a few hundredths
    away.  They are the look-alike pairs for inter-task confusion.
    """
    n_fg = num_classes - 1
    n_twins = int(math.floor(twin_fraction * n_fg)) if n_fg >= 3 else 0
    n_base = n_fg - n_twins
    designs = {}
    golden = 0.61803398875
    for b in range(n_base):
        c = b + 1
        shape = _BASE_SHAPES[b % len(_BASE_SHAPES)]
        hue = (b * golden) % 1.0
        # Reuse of a shape family past the first cycle gets a distinct saturation band.
        sat = 0.85 if (b // len(_BASE_SHAPES)) % 2 == 0 else 0.55
        designs[c] = ClassDesign(shape, hue, sat, 0.9, (0.85, 1.15))
    for j in range(n_twins):
        c = n_base + 1 + j
        src = 1 + (j % n_base)
        base = designs[src]
        designs[c] = ClassDesign(
            base.shape, (base.hue + twin_hue_offset) % 1.0, base.saturation, 0.8, (0.5, 0.7), twin_of=src
        )
    return designs


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _background(rng, h, w):
    grid = rng.uniform(0.25, 0.6, size=(8, 8, 1)) + rng.uniform(-0.06, 0.06, size=(8, 8, 3))
    tex = ndimage.zoom(grid, (h / 8, w / 8, 1), order=1, mode="nearest")[:h, :w]
    return tex + rng.normal(0.0, 0.04, size=(h, w, 3))


def _render_split(config, designs, n_images, rng):
    h, w = config.image_size
    n_fg = config.num_classes - 1
    images = np.empty((n_images, h, w, 3), dtype=np.float32)
    labels = np.zeros((n_images, h, w), dtype=np.uint8)
    lead_order = rng.permutation(n_fg) + 1
    lo, hi = config.shapes_per_image
    smin, smax = config.size_range
    for k in range(n_images):
        img = _background(rng, h, w).astype(np.float32)
        lab = labels[k]
        n_shapes = int(rng.integers(lo, hi + 1))
        lead = int(lead_order[k % n_fg])
        others = [c for c in rng.permutation(n_fg) + 1 if c != lead]
        # The round-robin class is painted last so it is never occluded.
        chosen = list(others[: min(n_shapes - 1, n_fg - 1)]) + [lead]
        for c in chosen:
            d = designs[int(c)]
            size = rng.uniform(smin, smax)
            aspect = rng.uniform(*d.aspect)
            cy = rng.uniform(size, h - size)
            cx = rng.uniform(size, w - size)
            angle = rng.uniform(0.0, math.pi)
            hue = (d.hue + rng.uniform(-0.015, 0.015)) % 1.0
            sat = float(np.clip(d.saturation + rng.uniform(-0.08, 0.08), 0, 1))
            val = float(np.clip(d.value + rng.uniform(-0.08, 0.08), 0, 1))
            rgb = np.array(_hsv_to_rgb(hue, sat, val), dtype=np.float32)
            kernels.paint_shape(img, lab, kernels.SHAPE_CODES[d.shape], cy, cx, size, aspect, angle, c, rgb)
        img += rng.normal(0.0, config.pixel_noise, size=img.shape).astype(np.float32)
        # 8-bit quantisation keeps the in-memory data identical to its PNG form.
        images[k] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SegDataset(images, labels)


@dataclass
class SyntheticDataset:
    config: SyntheticSceneConfig
    catalog: ClassCatalog
    train: SegDataset
    val: SegDataset
    test: SegDataset

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def generate_synthetic_dataset(config):
    """Render train/val/test splits deterministically from ``config.seed``."""
    designs = class_designs(config.num_classes, config.twin_fraction, config.twin_hue_offset)
    names = ["background"] + [
        f"{designs[c].shape}{'_twin' if designs[c].twin_of else ''}_{c}" for c in range(1, config.num_classes)
    ]
    catalog = ClassCatalog.with_size(config.num_classes, names)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    splits = [
        _render_split(config, designs, n, np.random.default_rng(s))
        for n, s in zip((config.num_train, config.num_val, config.num_test), seeds)
    ]
    return SyntheticDataset(config, catalog, *splits)


# ---------------------------------------------------------------------------
# relabelling and stream construction


def _check_labels(labels, catalog):
    present = np.flatnonzero(kernels.class_pixel_counts(labels.reshape((-1,) + labels.shape[-2:])).sum(0))
    bad = [int(v) for v in present if v not in catalog.class_ids and v != catalog.ignore_id]
    if bad:
        raise InvalidSampleError(f"label values {bad} are outside the catalog")


def task_lut(task, catalog):
    """Lookup table for training labels of ``task``."""
    lut = np.full(256, catalog.ignore_id, dtype=np.uint8)
    off = catalog.ignore_id if task.regime == "full_disjoint" else catalog.background_id
    for c in catalog.class_ids:
        lut[c] = c if (c in task.new_classes or c == catalog.background_id) else off
    return lut


def eval_lut(seen_classes, catalog):
    """Lookup table for step-t evaluation: unseen classes become ignore."""
    lut = np.full(256, catalog.ignore_id, dtype=np.uint8)
    for c in catalog.class_ids:
        if c in seen_classes:
            lut[c] = c
    return lut


def relabel_for_task(sample, task, catalog):
    """Return ``sample`` with labels as seen during training of ``task``."""
    _check_labels(sample.label, catalog)
    return SegSample(sample.image, kernels.remap_labels(sample.label, task_lut(task, catalog)))


def select_task_images(labels, task, catalog):
    """Indices of images that enter the training set of ``task``."""
    counts = kernels.class_pixel_counts(labels)
    has_current = counts[:, sorted(task.new_classes)].sum(1) > 0
    if task.regime == "overlapped":
        return np.flatnonzero(has_current)
    future = [c for c in catalog.class_ids if c not in task.seen_classes]
    has_future = counts[:, future].sum(1) > 0 if future else np.zeros(len(labels), dtype=bool)
    return np.flatnonzero(has_current & ~has_future)


@dataclass
class TaskData:
    task: TaskDefinition
    train: SegDataset
    val: SegDataset
    test: SegDataset
    select: SegDataset

    @property
    def old_eval_classes(self):
        return sorted(self.task.old_classes)


@dataclass
class TaskStream:
    catalog: ClassCatalog
    tasks: list
    steps: list
    joint: TaskData = field(default=None)

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, t):
        return self.steps[t]


def _carve(n, fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(n * fraction)) if n >= 2 else 0
    n_val = min(max(n_val, 1 if n >= 10 else 0), n - 1) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def build_task_stream(dataset, tasks, catalog=None, val_fraction=0.1, seed=0):
    """Per-task train/val/test data for a class-incremental sequence.

    ``dataset`` needs ``train``, ``val`` and ``test`` splits labelled with the
    full catalog.  Each step gets its filtered and relabelled training data,
    a plateau-validation split carved from it, the cumulative test split and
    a held-out selection split (from ``dataset.val``) for hyperparameter
    search.  ``stream.joint`` holds the all-class offline task.
    """
    catalog = catalog or dataset.catalog
    validate_tasks(tasks, catalog.background_id)
    for name in ("train", "val", "test"):
        _check_labels(dataset.split(name).labels, catalog)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    steps = []
    for task in tasks:
        src = dataset.train
        keep = select_task_images(src.labels, task, catalog)
        if len(keep) == 0:
            raise EmptyTaskError(f"task {task.index} has no training images under regime {task.regime!r}")
        tr_idx, va_idx = _carve(len(keep), val_fraction, rng)
        lut = task_lut(task, catalog)
        chosen = src.subset(keep)
        relabelled = chosen.with_labels(kernels.remap_labels(chosen.labels, lut))
        elut = eval_lut(task.seen_classes, catalog)
        test = dataset.test.with_labels(kernels.remap_labels(dataset.test.labels, elut))
        select = dataset.val.with_labels(kernels.remap_labels(dataset.val.labels, elut))
        steps.append(TaskData(task, relabelled.subset(tr_idx), relabelled.subset(va_idx), test, select))
    all_classes = frozenset(catalog.class_ids)
    joint_task = TaskDefinition(0, all_classes - {catalog.background_id}, all_classes, tasks[0].regime)
    # Separate stream so the joint split does not depend on the regime.
    joint_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    tr_idx, va_idx = _carve(len(dataset.train), val_fraction, joint_rng)
    joint = TaskData(joint_task, dataset.train.subset(tr_idx), dataset.train.subset(va_idx), dataset.test, dataset.val)
    return TaskStream(catalog, list(tasks), steps, joint)


# ---------------------------------------------------------------------------
# persistence

_SPLITS = ("train", "val", "test")


def save_dataset(dataset, path):
    """Write ``images/%06d.png``, ``labels/%06d.png`` and ``manifest.json``."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "labels").mkdir(parents=True, exist_ok=True)
    membership = {}
    k = 0
    for name in _SPLITS:
        part = dataset.split(name)
        ids = []
        for i in range(len(part)):
            rgb = np.round(part.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(path / "images" / f"{k:06d}.png")
            Image.fromarray(part.labels[i], mode="L").save(path / "labels" / f"{k:06d}.png")
            ids.append(k)
            k += 1
        membership[name] = ids
    manifest = {
        "config": dataset.config.to_dict() if dataset.config is not None else None,
        "class_names": list(dataset.catalog.names or [dataset.catalog.name(c) for c in dataset.catalog.class_ids]),
        "background_id": dataset.catalog.background_id,
        "ignore_id": dataset.catalog.ignore_id,
        "seed": dataset.config.seed if dataset.config is not None else None,
        "splits": membership,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    catalog = ClassCatalog.with_size(len(manifest["class_names"]), manifest["class_names"])
    parts = {}
    for name in _SPLITS:
        ids = manifest["splits"][name]
        if ids:
            imgs = np.stack([np.asarray(Image.open(path / "images" / f"{k:06d}.png").convert("RGB")) for k in ids])
            labs = np.stack([np.asarray(Image.open(path / "labels" / f"{k:06d}.png")) for k in ids])
        else:
            h, w = manifest["config"]["image_size"]
            imgs = np.zeros((0, h, w, 3), dtype=np.uint8)
            labs = np.zeros((0, h, w), dtype=np.uint8)
        parts[name] = SegDataset((imgs.astype(np.float32) / 255.0), labs.astype(np.uint8))
    config = SyntheticSceneConfig(**manifest["config"]) if manifest.get("config") else None
    return SyntheticDataset(config, catalog, parts["train"], parts["val"], parts["test"])


def load_voc2012(root):
    """Placeholder for PascalVOC-2012 ingestion.

    Expected layout (as used by the 15-5 benchmark)::

        root/JPEGImages/<id>.jpg
        root/SegmentationClassAug/<id>.png   # class ids 0-20, 255 = ignore
        root/splits/{train,val}.txt

    Convert such a tree into the ``images/ labels/ manifest.json`` layout
    read by :func:`load_dataset` to run the toolkit on it.  Paper-scale
    training is not supported here.
    """
    root = Path(root)
    missing = [d for d in ("JPEGImages", "SegmentationClassAug") if not (root / d).is_dir()]
    if missing:
        raise FileNotFoundError(f"{root}: missing {', '.join(missing)}")
    warnings.warn("PascalVOC ingestion is not implemented; convert to the dataset directory format first")
    raise NotImplementedError("PascalVOC-scale runs are out of scope for this toolkit")
