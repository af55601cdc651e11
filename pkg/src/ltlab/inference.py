"""Test-time ensembling, group-wise evaluation, and feature diagnostics."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import GROUPS, LongTailDataset
from .kernels import bilinear_resize

__all__ = [
    "EvalReport",
    "RepresentationDiagnostics",
    "five_crops",
    "tte_predict",
    "evaluate",
    "interclass_similarity",
    "intraclass_shift",
    "np_log_softmax",
]


def np_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def five_crops(image: np.ndarray, out_side: int, expand: int) -> np.ndarray:
    """Center and four-corner crops of the image resized to out_side + expand.

    Returns (5, out_side, out_side, c) in the order center, top-left,
    top-right, bottom-left, bottom-right. A patch-size multiple of `expand`
    makes the crops share most patches; warn rather than reject.
    """
    if expand < 0:
        raise ValueError("expanded size must be non-negative")
    a = out_side
    big = bilinear_resize(image, a + expand, a + expand)
    e = expand
    c = e // 2
    offsets = [(c, c), (0, 0), (0, e), (e, 0), (e, e)]
    return np.stack([big[top : top + a, left : left + a] for top, left in offsets])


def warn_if_patch_multiple(expand: int, patch: int) -> None:
    if expand > 0 and patch > 0 and expand % patch == 0:
        warnings.warn(
            f"expanded size {expand} is a multiple of the patch size {patch}; "
            "the five crops will share most patches",
            stacklevel=2,
        )


def tte_predict(model, image: np.ndarray, expand: int) -> np.ndarray:
    """Averaged per-crop log-probabilities over the five-crop ensemble."""
    crops = five_crops(image, model.input_side, expand)
    logits = model.predict_logits(crops)
    return np_log_softmax(logits).mean(axis=0)


@dataclass
class EvalReport:
    """Accuracy overall and per frequency group, plus per-class detail."""

    overall: float
    group_accuracy: dict
    per_class: np.ndarray
    group_sizes: dict
    num_samples: int

    @property
    def head(self):
        return self.group_accuracy.get("head")

    @property
    def medium(self):
        return self.group_accuracy.get("medium")

    @property
    def tail(self):
        return self.group_accuracy.get("tail")

    def as_record(self) -> dict:
        rec = {"overall": self.overall, "num_samples": self.num_samples}
        for name in GROUPS:
            rec[name] = self.group_accuracy.get(name)
        return rec


def _predict_batches(model, images: np.ndarray, use_tte: bool, expand: int, workers: int):
    n = images.shape[0]
    preds = np.empty(n, dtype=np.int64)
    batch = 64
    spans = [(s, min(s + batch, n)) for s in range(0, n, batch)]

    def run(span):
        s, e = span
        if use_tte:
            out = np.stack([tte_predict(model, images[i], expand) for i in range(s, e)])
        else:
            out = model.predict_logits(images[s:e])
        preds[s:e] = out.argmax(axis=-1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return preds


def evaluate(
    model,
    dataset: LongTailDataset,
    use_tte: bool = False,
    expand: int = 24,
    workers: int = 1,
) -> EvalReport:
    """Argmax accuracy on the test split, grouped by class frequency.

    Group accuracy is the unweighted mean of per-class accuracies inside
    the group; groups with no classes are reported as absent.
    """
    images, labels = dataset.test_images, dataset.test_labels
    preds = _predict_batches(model, images, use_tte, expand, workers)
    correct = preds == labels

    k = dataset.num_classes
    per_class = np.zeros(k)
    for c in range(k):
        members = labels == c
        if members.any():
            per_class[c] = correct[members].mean()

    group_acc, group_sizes = {}, {}
    for name in GROUPS:
        idx = dataset.group_indices(name)
        group_sizes[name] = len(idx)
        if len(idx):
            group_acc[name] = float(per_class[idx].mean())

    return EvalReport(
        overall=float(correct.mean()),
        group_accuracy=group_acc,
        per_class=per_class,
        group_sizes=group_sizes,
        num_samples=len(labels),
    )


# -- representation diagnostics ---------------------------------------------------


@dataclass
class RepresentationDiagnostics:
    """Inter-class similarity matrix and per-class train/test cosine spreads."""

    similarity: np.ndarray  # (K, K) between class-mean features
    train_sims: list = field(default_factory=list)  # per class, cos(sample, class mean)
    test_sims: list = field(default_factory=list)
    shift: np.ndarray | None = None  # |mean train sim - mean test sim| per class

    def tail_shift(self, groups: list) -> float:
        idx = [k for k, g in enumerate(groups) if g == "tail"]
        vals = [self.shift[k] for k in idx if not np.isnan(self.shift[k])]
        return float(np.mean(vals)) if vals else float("nan")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise FloatingPointError("zero-norm feature encountered")
    return x / norms


def interclass_similarity(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cosine similarity between class-mean features, (K, K)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    unit = _normalize_rows(means)
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim


def intraclass_shift(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    num_classes: int,
) -> RepresentationDiagnostics:
    """Cosine spreads around the train class mean, for train and test samples.

    The per-class shift statistic is the absolute difference between the
    mean train similarity and the mean test similarity; classes missing
    from either split are skipped with a warning and reported as NaN.
    """
    sim_matrix = interclass_similarity(train_features, train_labels)
    shift = np.full(num_classes, np.nan)
    train_sims: list = [np.array([])] * num_classes
    test_sims: list = [np.array([])] * num_classes
    for k in range(num_classes):
        tr = train_features[train_labels == k]
        te = test_features[test_labels == k]
        if len(tr) == 0 or len(te) == 0:
            warnings.warn(f"class {k} missing from a split; shift skipped", stacklevel=2)
            continue
        mean = tr.mean(axis=0)
        mean = mean / max(np.linalg.norm(mean), 1e-12)
        tr_s = _normalize_rows(tr) @ mean
        te_s = _normalize_rows(te) @ mean
        train_sims[k] = tr_s
        test_sims[k] = te_s
        shift[k] = abs(tr_s.mean() - te_s.mean())
    return RepresentationDiagnostics(
        similarity=sim_matrix, train_sims=train_sims, test_sims=test_sims, shift=shift
    )
