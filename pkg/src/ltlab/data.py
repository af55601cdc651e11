"""Synthetic long-tail datasets and the two augmentation pipelines.

Images are procedural: each class owns a smooth template built from a
shared low-frequency pattern bank, and samples add seeded Gaussian pixel
noise. Classes generated under different dataset seeds share the bank, so
features learned on one class set transfer to another; that is what makes
a separately pretrained backbone a useful starting point here.

Augmentation comes in two flavors: square-only crops whose minimum scale
grows over the epochs under a scheduling function, and the conventional
random-resized-crop-plus-flip baseline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import bilinear_resize

__all__ = [
    "GROUPS",
    "SCHEDULE_FUNCTIONS",
    "LongTailDataset",
    "AugSchedule",
    "longtail_counts",
    "class_templates",
    "generate_longtail",
    "group_split",
    "crop_side",
    "mda_schedule_delta",
    "mda_crop",
    "rrc_crop",
    "save_dataset",
    "load_dataset",
]

GROUPS = ("head", "medium", "tail")

DATASET_MAGIC = b"LFDS"
DATASET_VERSION = 1

# shared across every dataset seed; this is what makes backbones transferable
_BANK_SEED = 0x17AB
_BANK_SIZE = 24
_BANK_GRID = 4
_PATTERNS_PER_CLASS = 3

# within-class sample variation: component-weight jitter, circular shift
# (fraction of the image side), and intensity gain
_COMPONENT_JITTER = (0.6, 1.4)
_SHIFT_FRACTION = 0.25
_GAIN_JITTER = (0.7, 1.3)

SCHEDULE_FUNCTIONS = {
    "minimal": lambda x: 0.0,
    "convex": lambda x: 1.0 - math.sqrt(max(0.0, 1.0 - x * x)),
    "linear": lambda x: x,
    "concave": lambda x: math.sqrt(max(0.0, 1.0 - (1.0 - x) ** 2)),
    "maximal": lambda x: 1.0,
}


@dataclass
class LongTailDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_counts: np.ndarray
    image_side: int
    channels: int
    groups: list = field(default_factory=list)

    def __post_init__(self):
        if not self.groups:
            self.groups = group_split(self.class_counts)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def group_indices(self, name: str) -> np.ndarray:
        return np.array([k for k, g in enumerate(self.groups) if g == name], dtype=int)


@dataclass(frozen=True)
class AugSchedule:
    lambda0: float = 0.08
    lambda1: float = 1.0
    g: str = "convex"
    epochs: int = 5

    def __post_init__(self):
        if not 0.0 < self.lambda0 < self.lambda1 <= 1.0:
            raise ValueError("crop-scale bounds need 0 < lambda0 < lambda1 <= 1")
        if self.g not in SCHEDULE_FUNCTIONS:
            raise ValueError(f"unknown scheduling function {self.g!r}")
        if self.epochs < 1:
            raise ValueError("schedule needs at least one epoch")


def longtail_counts(num_classes: int, n_max: int, imbalance: float) -> np.ndarray:
    """Exponential class-size profile from n_max down to n_max/imbalance."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if imbalance < 1:
        raise ValueError("imbalance ratio must be >= 1")
    ks = np.arange(num_classes)
    counts = np.round(n_max * imbalance ** (-ks / (num_classes - 1))).astype(int)
    if np.any(counts < 1):
        raise ValueError("profile reaches zero samples; raise n_max or lower the ratio")
    return counts


def _pattern_bank(image_side: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((_BANK_SEED,)))
    bank = np.empty((_BANK_SIZE, image_side, image_side, channels), dtype=np.float64)
    for i in range(_BANK_SIZE):
        coarse = rng.uniform(0.0, 1.0, size=(_BANK_GRID, _BANK_GRID, channels))
        bank[i] = bilinear_resize(coarse, image_side, image_side)
    return bank


@dataclass(frozen=True)
class _ClassRecipe:
    picks: np.ndarray
    weights: np.ndarray
    lo: float
    hi: float


def _class_recipe(bank: np.ndarray, seed: int, k: int) -> _ClassRecipe:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1A5, k)))
    picks = rng.choice(len(bank), size=_PATTERNS_PER_CLASS, replace=False)
    weights = rng.uniform(0.5, 1.5, size=_PATTERNS_PER_CLASS)
    template = np.tensordot(weights, bank[picks], axes=1)
    return _ClassRecipe(picks, weights, float(template.min()), float(template.max()))


def _class_template(bank: np.ndarray, seed: int, k: int) -> np.ndarray:
    recipe = _class_recipe(bank, seed, k)
    template = np.tensordot(recipe.weights, bank[recipe.picks], axes=1)
    return (template - recipe.lo) / max(recipe.hi - recipe.lo, 1e-9)


def _class_sample(
    bank: np.ndarray, recipe: _ClassRecipe, seed: int, k: int, index: int, noise: float
) -> np.ndarray:
    """One image: jittered component mix, circular shift, gain, pixel noise.

    Sample-level variation spans a several-dimensional within-class
    manifold, so classes with a handful of training images genuinely
    undersample their own distribution.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A11, k, index)))
    jitter = rng.uniform(*_COMPONENT_JITTER, size=_PATTERNS_PER_CLASS)
    img = np.tensordot(recipe.weights * jitter, bank[recipe.picks], axes=1)
    img = (img - recipe.lo) / max(recipe.hi - recipe.lo, 1e-9)
    max_shift = int(round(_SHIFT_FRACTION * img.shape[0]))
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    img = np.roll(img, (dy, dx), axis=(0, 1))
    img = img * rng.uniform(*_GAIN_JITTER)
    return img + noise * rng.standard_normal(img.shape)


def class_templates(num_classes: int, image_side: int, seed: int, channels: int = 3) -> np.ndarray:
    """The noise-free class patterns a dataset seed implies, (K, a, a, c)."""
    bank = _pattern_bank(image_side, channels)
    return np.stack([_class_template(bank, seed, k) for k in range(num_classes)])


def generate_longtail(
    num_classes: int,
    n_max: int,
    imbalance: float,
    test_per_class: int,
    image_side: int,
    seed: int,
    channels: int = 3,
    noise: float = 0.3,
    thresholds: tuple = (100, 20),
) -> LongTailDataset:
    """Procedural long-tail training set plus a class-balanced test set.

    Each class mixes a few bank patterns; each sample re-jitters the mix,
    shifts it circularly, scales it, and adds pixel noise. Train and test
    samples are disjoint by construction: per class, sample indices
    0..n_k-1 are train and the next test_per_class are test.
    """
    counts = longtail_counts(num_classes, n_max, imbalance)
    bank = _pattern_bank(image_side, channels)
    recipes = [_class_recipe(bank, seed, k) for k in range(num_classes)]

    train_images, train_labels = [], []
    test_images, test_labels = [], []
    for k in range(num_classes):
        for i in range(counts[k]):
            train_images.append(_class_sample(bank, recipes[k], seed, k, i, noise))
            train_labels.append(k)
        for i in range(test_per_class):
            test_images.append(_class_sample(bank, recipes[k], seed, k, counts[k] + i, noise))
            test_labels.append(k)

    return LongTailDataset(
        train_images=np.stack(train_images).astype(np.float32),
        train_labels=np.array(train_labels, dtype=np.int64),
        test_images=np.stack(test_images).astype(np.float32),
        test_labels=np.array(test_labels, dtype=np.int64),
        class_counts=counts,
        image_side=image_side,
        channels=channels,
        groups=group_split(counts, *thresholds),
    )


def group_split(counts, hi: int = 100, lo: int = 20) -> list:
    """Frequency groups: above hi is head, below lo is tail, else medium."""
    if lo >= hi:
        raise ValueError("group thresholds need lo < hi")
    return ["head" if n > hi else "tail" if n < lo else "medium" for n in np.asarray(counts)]


def mda_schedule_delta(t: int, total_epochs: int, schedule: AugSchedule) -> float:
    """Lower-bound increment for the crop scale at epoch t (1-based)."""
    if not 1 <= t <= total_epochs:
        raise ValueError(f"epoch {t} outside 1..{total_epochs}")
    progress = 1.0 if total_epochs == 1 else (t - 1) / (total_epochs - 1)
    g = SCHEDULE_FUNCTIONS[schedule.g]
    return (schedule.lambda1 - schedule.lambda0) * g(progress)


def crop_side(h: int, w: int, lam: float) -> int:
    """Square crop side sqrt(h*w*lam), rounded and clamped to the image."""
    side = int(round(math.sqrt(h * w * lam)))
    return max(1, min(side, h, w))


def mda_crop(
    image: np.ndarray,
    t: int,
    total_epochs: int,
    schedule: AugSchedule,
    rng: np.random.Generator,
    out_side: int,
) -> np.ndarray:
    """Square crop at a scheduled scale, resized to out_side; no flipping."""
    h, w, _ = image.shape
    lo = schedule.lambda0 + mda_schedule_delta(t, total_epochs, schedule)
    lam = rng.uniform(lo, schedule.lambda1)
    side = crop_side(h, w, lam)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = image[top : top + side, left : left + side]
    return bilinear_resize(crop, out_side, out_side)


def rrc_crop(
    image: np.ndarray,
    out_side: int,
    rng: np.random.Generator,
    scale: tuple = (0.08, 1.0),
    ratio: tuple = (3.0 / 4.0, 4.0 / 3.0),
    flip_p: float = 0.5,
) -> np.ndarray:
    """Conventional baseline: area/aspect-jittered crop plus horizontal flip."""
    h, w, _ = image.shape
    area = h * w
    crop_h = crop_w = None
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            crop_h, crop_w = ch, cw
            break
    if crop_h is None:
        # center fallback at the closest representable aspect
        in_ratio = w / h
        if in_ratio < ratio[0]:
            crop_w, crop_h = w, min(h, int(round(w / ratio[0])))
        elif in_ratio > ratio[1]:
            crop_h, crop_w = h, min(w, int(round(h * ratio[1])))
        else:
            crop_h, crop_w = h, w
        top = (h - crop_h) // 2
        left = (w - crop_w) // 2
    else:
        top = int(rng.integers(0, h - crop_h + 1))
        left = int(rng.integers(0, w - crop_w + 1))
    crop = image[top : top + crop_h, left : left + crop_w]
    out = bilinear_resize(crop, out_side, out_side)
    if flip_p > 0 and rng.uniform() < flip_p:
        out = out[:, ::-1, :].copy()
    return out


# -- dataset container io --------------------------------------------------------


def save_dataset(path, ds: LongTailDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<HIIIII",
                DATASET_VERSION,
                ds.image_side,
                ds.channels,
                ds.num_classes,
                len(ds.train_labels),
                len(ds.test_labels),
            )
        )
        fh.write(np.asarray(ds.class_counts, dtype="<u4").tobytes())
        fh.write(ds.train_images.astype("<f4").tobytes())
        fh.write(ds.train_labels.astype("<u4").tobytes())
        fh.write(ds.test_images.astype("<f4").tobytes())
        fh.write(ds.test_labels.astype("<u4").tobytes())


def load_dataset(path, thresholds: tuple = (100, 20)) -> LongTailDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset container (bad magic)")
    version, side, channels, k, n_train, n_test = struct.unpack_from("<HIIIII", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset container version {version}")
    offset = 4 + struct.calcsize("<HIIIII")
    pixels = side * side * channels

    def take(count, dtype, shape):
        nonlocal offset
        width = np.dtype(dtype).itemsize
        end = offset + count * width
        if end > len(blob):
            raise ValueError("dataset container is truncated")
        arr = np.frombuffer(blob[offset:end], dtype=dtype).reshape(shape)
        offset = end
        return arr.copy()

    counts = take(k, "<u4", (k,)).astype(int)
    train_images = take(n_train * pixels, "<f4", (n_train, side, side, channels))
    train_labels = take(n_train, "<u4", (n_train,)).astype(np.int64)
    test_images = take(n_test * pixels, "<f4", (n_test, side, side, channels))
    test_labels = take(n_test, "<u4", (n_test,)).astype(np.int64)
    return LongTailDataset(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        class_counts=counts,
        image_side=side,
        channels=channels,
        groups=group_split(counts, *thresholds),
    )
