"""Classification heads and the three classifier-initialization strategies.

The cosine head scales the cosine similarity between the feature and each
class row, which removes weight-norm bias; the linear and L2-normalized
variants exist for comparison runs. Initialization can come from stored
class prototypes, from class-mean features, or from a linear probe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

__all__ = [
    "HEAD_KINDS",
    "ClassifierState",
    "PrototypeSet",
    "make_head",
    "classify",
    "init_semantic",
    "init_class_mean",
    "init_linear_probe",
    "init_random",
    "weight_norms",
    "save_prototypes",
    "load_prototypes",
]

HEAD_KINDS = ("linear", "l2_normalized", "cosine")

_NORM_FLOOR = 1e-12

PROTO_MAGIC = b"LFTP"
PROTO_VERSION = 1


@dataclass
class ClassifierState:
    """Head kind plus its trainable tensors ('head.weight', 'head.bias')."""

    kind: str
    sigma: float = 25.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "cosine" and self.sigma <= 0:
            raise ValueError("cosine head needs a positive scaling factor")

    @property
    def num_classes(self) -> int:
        return self.params["head.weight"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["head.weight"].shape[1]


def make_head(kind: str, weight: np.ndarray, sigma: float = 25.0, dtype=None) -> ClassifierState:
    """Build a head around an initial (K, d) weight matrix."""
    weight = np.asarray(weight)
    if weight.ndim != 2 or weight.shape[0] < 2:
        raise ValueError("classifier weight must be (K, d) with K >= 2")
    if dtype is not None:
        weight = weight.astype(dtype)
    params = {"head.weight": Tensor(weight.copy())}
    if kind == "linear":
        params["head.bias"] = Tensor(np.zeros(weight.shape[0], dtype=weight.dtype))
    return ClassifierState(kind=kind, sigma=sigma, params=params)


def _row_normalized(t: Tensor) -> Tensor:
    norms = (t * t).sum(axis=-1, keepdims=True).sqrt().clamp_min(_NORM_FLOOR)
    return t / norms


def classify(features, head: ClassifierState) -> Tensor:
    """Logits for (n, d) features (or a single (d,) vector)."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    single = f.ndim == 1
    if single:
        f = f.reshape(1, -1)
    w = head.params["head.weight"]
    if f.shape[-1] != w.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match head dim {w.shape[1]}")
    if head.kind == "linear":
        out = f @ w.transpose() + head.params["head.bias"]
    elif head.kind == "l2_normalized":
        out = f @ _row_normalized(w).transpose()
    else:
        out = (_row_normalized(f) @ _row_normalized(w).transpose()) * head.sigma
    return out.reshape(-1) if single else out


@dataclass
class PrototypeSet:
    """Per-class prototype vectors plus the two projection matrices."""

    prototypes: np.ndarray  # (K, d_t)
    text_proj: np.ndarray  # (d_t, d_s)
    image_proj: np.ndarray  # (d, d_s)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.text_proj = np.asarray(self.text_proj, dtype=np.float64)
        self.image_proj = np.asarray(self.image_proj, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.text_proj.ndim != 2 or self.image_proj.ndim != 2:
            raise ValueError("prototype set needs three matrices")
        if self.prototypes.shape[1] != self.text_proj.shape[0]:
            raise ValueError("prototype width does not match text projection rows")
        if self.text_proj.shape[1] != self.image_proj.shape[1]:
            raise ValueError("projection latent widths differ")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.image_proj.shape[0]


def init_semantic(prototypes: PrototypeSet, expect_classes: int | None = None) -> np.ndarray:
    """Classifier rows from projected prototypes: row_j = psi_j @ P_T @ P_I^T."""
    if expect_classes is not None and prototypes.num_classes != expect_classes:
        raise ValueError(
            f"prototype file has {prototypes.num_classes} classes, dataset has {expect_classes}"
        )
    return prototypes.prototypes @ prototypes.text_proj @ prototypes.image_proj.T


def init_class_mean(features: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """L2-normalized per-class mean feature rows."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.zeros((num_classes, features.shape[1]))
    for k in range(num_classes):
        members = features[labels == k]
        if members.shape[0] == 0:
            raise ValueError(f"class {k} has no feature to average")
        mean = members.mean(axis=0)
        rows[k] = mean / max(np.linalg.norm(mean), _NORM_FLOOR)
    return rows


def init_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    prior,
    steps: int = 200,
    lr: float = 0.5,
) -> np.ndarray:
    """Weight matrix from gradient descent on the prior-adjusted loss.

    Starts from zeros over frozen features; plain full-batch descent.
    """
    from .losses import la_loss

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = len(prior.probs)
    w = Tensor(np.zeros((num_classes, features.shape[1])), requires_grad=True)
    x = Tensor(features)
    for _ in range(steps):
        w.zero_grad()
        loss = la_loss(x @ w.transpose(), labels, prior)
        loss.backward()
        w.data -= lr * w.grad
    return w.data.copy()


def init_random(num_classes: int, dim: int, seed: int = 0, scale: float = 0.02) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4EAD)))
    return rng.normal(0.0, scale, size=(num_classes, dim))


def weight_norms(weight) -> np.ndarray:
    """Euclidean norm of each classifier row, in class order."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    return np.linalg.norm(w, axis=1)


# -- prototype container io ----------------------------------------------------


def save_prototypes(path, prototypes: PrototypeSet) -> None:
    k, d_t = prototypes.prototypes.shape
    d_s = prototypes.text_proj.shape[1]
    d = prototypes.image_proj.shape[0]
    with open(path, "wb") as fh:
        fh.write(PROTO_MAGIC)
        fh.write(struct.pack("<HIIII", PROTO_VERSION, k, d_t, d_s, d))
        fh.write(prototypes.prototypes.astype("<f8").tobytes())
        fh.write(prototypes.text_proj.astype("<f8").tobytes())
        fh.write(prototypes.image_proj.astype("<f8").tobytes())


def load_prototypes(path) -> PrototypeSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PROTO_MAGIC:
        raise ValueError("not a prototype container (bad magic)")
    version, k, d_t, d_s, d = struct.unpack_from("<HIIII", blob, 4)
    if version != PROTO_VERSION:
        raise ValueError(f"unsupported prototype container version {version}")
    offset = 4 + struct.calcsize("<HIIII")
    need = offset + 8 * (k * d_t + d_t * d_s + d * d_s)
    if len(blob) < need:
        raise ValueError("prototype container is truncated")

    def take(rows, cols):
        nonlocal offset
        n = rows * cols * 8
        arr = np.frombuffer(blob[offset : offset + n], dtype="<f8").reshape(rows, cols)
        offset += n
        return arr.copy()

    return PrototypeSet(take(k, d_t), take(d_t, d_s), take(d, d_s))
