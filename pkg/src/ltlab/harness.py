"""Training harness: configuration, model assembly, SGD, checkpoints, runs.

A run is fully determined by (config, seed): dataset generation, parameter
initialization, batch order, per-sample augmentation, and evaluation all
derive their randomness from the run seed, with per-sample seeds derived
from (seed, epoch, sample index) so worker-thread count never changes the
result. Training state is float32, matching the checkpoint container.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .data import (
    AugSchedule,
    LongTailDataset,
    generate_longtail,
    load_dataset,
    mda_crop,
    rrc_crop,
)
from .heads import (
    ClassifierState,
    classify,
    init_class_mean,
    init_linear_probe,
    init_random,
    init_semantic,
    load_prototypes,
    make_head,
)
from .inference import EvalReport, evaluate, warn_if_patch_multiple
from .losses import ClassPrior, estimate_prior, la_loss, uniform_prior
from .peft import AttachedPolicy, FineTunePolicy, attach_policy
from .vit import BackboneSpec, forward_features, init_backbone_params, param_shapes

__all__ = [
    "ConfigError",
    "IntegrityError",
    "RunConfig",
    "Model",
    "SGD",
    "Checkpoint",
    "TrainResult",
    "METRIC_KEYS",
    "build_model",
    "train",
    "pretrain_backbone",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
]

METRIC_KEYS = ("epoch", "train_loss", "overall", "head", "medium", "tail")

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class IntegrityError(Exception):
    """Checkpoint container fails a structural check."""


@dataclass
class RunConfig:
    # backbone
    blocks: int = 2
    dim: int = 32
    heads: int = 4
    patch: int = 4
    # data: either a container path or generator settings
    data_path: str | None = None
    classes: int = 10
    n_max: int = 100
    imbalance: float = 100.0
    test_per_class: int = 20
    image_side: int = 16
    channels: int = 3
    noise: float = 0.3
    # policy / head / loss
    policy: FineTunePolicy = field(default_factory=lambda: FineTunePolicy("adaptformer"))
    head_kind: str = "cosine"
    sigma: float = 25.0
    head_init: str = "class_mean"  # zero | random | class_mean | linear_probe | semantic
    loss: str = "la"  # la | ce
    # optimization
    epochs: int = 5
    batch_size: int = 32
    lr: float | None = None  # None: base_epochs * base_lr / epochs
    base_lr: float = 0.02
    base_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # augmentation
    aug: str = "mda"  # mda | rrc | none
    aug_g: str = "convex"
    aug_lambda0: float = 0.08
    aug_lambda1: float = 1.0
    # test-time ensembling
    tte: bool = False
    expand: int = 24
    # bookkeeping
    seed: int = 0
    workers: int = 1
    prototypes_path: str | None = None
    backbone_path: str | None = None
    out_dir: str | None = None

    def spec(self) -> BackboneSpec:
        try:
            return BackboneSpec(
                blocks=self.blocks,
                dim=self.dim,
                heads=self.heads,
                patch=self.patch,
                image_side=self.image_side,
                channels=self.channels,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return self.base_epochs * self.base_lr / self.epochs

    def schedule(self) -> AugSchedule:
        return AugSchedule(self.aug_lambda0, self.aug_lambda1, self.aug_g, self.epochs)

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size positive")
        if self.loss not in ("la", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.aug not in ("mda", "rrc", "none"):
            raise ConfigError(f"unknown augmentation {self.aug!r}")
        if self.head_init not in ("zero", "random", "class_mean", "linear_probe", "semantic"):
            raise ConfigError(f"unknown head initialization {self.head_init!r}")
        if self.head_init == "semantic" and not self.prototypes_path:
            raise ConfigError("semantic initialization needs paths.prototypes")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for path_attr in ("data_path", "prototypes_path", "backbone_path"):
            p = getattr(self, path_attr)
            if p and not Path(p).exists():
                raise ConfigError(f"{path_attr.replace('_path', '')} file not found: {p}")
        self.spec()
        if self.aug == "mda" and self.epochs >= 1:
            self.schedule()
        return self


_KEY_MAP = {
    "seed": ("seed", int),
    "workers": ("workers", int),
    "backbone.blocks": ("blocks", int),
    "backbone.dim": ("dim", int),
    "backbone.heads": ("heads", int),
    "backbone.patch": ("patch", int),
    "data.path": ("data_path", str),
    "data.classes": ("classes", int),
    "data.n_max": ("n_max", int),
    "data.imbalance": ("imbalance", float),
    "data.test_per_class": ("test_per_class", int),
    "data.image_side": ("image_side", int),
    "data.channels": ("channels", int),
    "data.noise": ("noise", float),
    "policy.kind": ("_policy_kind", str),
    "policy.k": ("_policy_k", int),
    "policy.alpha": ("_policy_alpha", float),
    "policy.mask_seed": ("_policy_mask_seed", int),
    "policy.p": ("_policy_p", int),
    "policy.r": ("_policy_r", int),
    "policy.s": ("_policy_s", str),
    "head.kind": ("head_kind", str),
    "head.sigma": ("sigma", float),
    "head.init": ("head_init", str),
    "loss": ("loss", str),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.lr": ("lr", float),
    "train.base_lr": ("base_lr", float),
    "train.base_epochs": ("base_epochs", int),
    "train.momentum": ("momentum", float),
    "train.weight_decay": ("weight_decay", float),
    "aug.kind": ("aug", str),
    "aug.g": ("aug_g", str),
    "aug.lambda0": ("aug_lambda0", float),
    "aug.lambda1": ("aug_lambda1", float),
    "tte.enabled": ("tte", None),
    "tte.expand": ("expand", int),
    "paths.prototypes": ("prototypes_path", str),
    "paths.backbone": ("backbone_path", str),
    "paths.out": ("out_dir", str),
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def config_from_file(path) -> RunConfig:
    """Parse a flat key=value config file (see README for the key list)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    policy_kw: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_MAP:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        attr, cast = _KEY_MAP[key]
        if raw == "":
            continue
        try:
            value = _parse_bool(raw) if cast is None else cast(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
        if attr.startswith("_policy_"):
            name = attr.removeprefix("_policy_")
            if name == "s" and raw != "learnable":
                value = float(raw)
            policy_kw[name] = value
        else:
            values[attr] = value
    if policy_kw:
        try:
            values["policy"] = FineTunePolicy(**policy_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid policy settings: {exc}") from exc
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


class Model:
    """Backbone, attached fine-tuning policy, and classifier head."""

    def __init__(
        self,
        spec: BackboneSpec,
        params: dict,
        head: ClassifierState,
        attached: AttachedPolicy | None = None,
    ):
        self.spec = spec
        self.params = params
        self.head = head
        self.attached = attached

    @property
    def input_side(self) -> int:
        return self.spec.image_side

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def hooks(self):
        return self.attached.hooks if self.attached else None

    def features(self, images: np.ndarray) -> Tensor:
        if self.attached is not None:
            return forward_features(images, self.params, self.spec, self.attached.hooks)
        return forward_features(images, self.params, self.spec)

    def logits(self, images: np.ndarray) -> Tensor:
        return classify(self.features(images), self.head)

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(images).data

    def predict_features(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.features(images).data

    def all_params(self) -> dict:
        return {**self.params, **self.head.params}

    def named_arrays(self) -> dict:
        return {name: t.data for name, t in self.all_params().items()}


class SGD:
    """Momentum SGD over partition slots, with optional per-entry update masks."""

    def __init__(self, slots, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.slots = list(slots)
        self.velocity = {e.name: np.zeros_like(t.data) for e, t in self.slots}

    @classmethod
    def for_model(cls, model: Model, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if model.attached is None:
            raise ValueError("model has no attached policy; nothing to optimize")
        lookup = model.all_params()
        slots = [(e, lookup[e.name]) for e in model.attached.partition.entries]
        return cls(slots, lr, momentum, weight_decay)

    def zero_grad(self):
        for _, t in self.slots:
            t.zero_grad()

    def step(self):
        for entry, t in self.slots:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            eff = grad + t.data * np.asarray(self.weight_decay, dtype=t.data.dtype)
            if entry.mask is not None:
                eff = eff * entry.mask.astype(t.data.dtype)
            v = self.velocity[entry.name]
            v *= np.asarray(self.momentum, dtype=t.data.dtype)
            v += eff
            t.data -= np.asarray(self.lr, dtype=t.data.dtype) * v


def _sample_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *path)))


def load_or_generate_dataset(cfg: RunConfig) -> LongTailDataset:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return generate_longtail(
        num_classes=cfg.classes,
        n_max=cfg.n_max,
        imbalance=cfg.imbalance,
        test_per_class=cfg.test_per_class,
        image_side=cfg.image_side,
        seed=cfg.seed,
        channels=cfg.channels,
        noise=cfg.noise,
    )


def _init_head_weight(cfg: RunConfig, spec: BackboneSpec, params: dict,
                      dataset: LongTailDataset, prior: ClassPrior) -> np.ndarray:
    k, d = dataset.num_classes, spec.dim
    if cfg.head_init == "zero":
        return np.zeros((k, d))
    if cfg.head_init == "random":
        return init_random(k, d, seed=cfg.seed)
    if cfg.head_init == "semantic":
        protos = load_prototypes(cfg.prototypes_path)
        if protos.feature_dim != d:
            raise ConfigError(
                f"prototype feature dim {protos.feature_dim} does not match backbone dim {d}"
            )
        try:
            return init_semantic(protos, expect_classes=k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    # feature-based strategies use the frozen starting backbone
    with no_grad():
        feats = forward_features(dataset.train_images, params, spec).data
    if cfg.head_init == "class_mean":
        return init_class_mean(feats, dataset.train_labels, k)
    return init_linear_probe(feats, dataset.train_labels, prior, steps=100, lr=0.5)


def build_model(cfg: RunConfig, dataset: LongTailDataset, dtype=np.float32) -> Model:
    """Assemble backbone, foundation weights, head, and policy for a run."""
    spec = cfg.spec()
    if dataset.image_side != spec.image_side or dataset.channels != spec.channels:
        raise ConfigError(
            f"dataset geometry {dataset.image_side}x{dataset.image_side}x{dataset.channels} "
            f"does not match backbone input {spec.image_side}x{spec.image_side}x{spec.channels}"
        )
    params = init_backbone_params(spec, seed=cfg.seed, dtype=dtype)
    if cfg.backbone_path:
        try:
            ckpt = load_checkpoint(cfg.backbone_path, expect_spec=spec)
        except IntegrityError as exc:
            raise ConfigError(f"foundation checkpoint rejected: {exc}") from exc
        for name, arr in ckpt.arrays.items():
            if name in params:
                params[name].data = arr.astype(dtype)

    prior = estimate_prior(dataset.class_counts)
    weight = _init_head_weight(cfg, spec, params, dataset, prior)
    head = make_head(cfg.head_kind, weight, sigma=cfg.sigma, dtype=dtype)
    try:
        attached = attach_policy(params, spec, cfg.policy, head.params, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Model(spec, params, head, attached)


def _augment_batch(
    cfg: RunConfig, dataset: LongTailDataset, idxs: np.ndarray, epoch: int, workers: int
) -> np.ndarray:
    side = cfg.image_side
    out = np.empty((len(idxs), side, side, dataset.channels), dtype=np.float32)
    if cfg.aug == "none":
        out[:] = dataset.train_images[idxs]
        return out
    schedule = cfg.schedule() if cfg.aug == "mda" else None

    def one(slot: int):
        i = int(idxs[slot])
        rng = _sample_rng(cfg.seed, 0xA06, epoch, i)
        img = dataset.train_images[i]
        if cfg.aug == "mda":
            out[slot] = mda_crop(img, epoch, cfg.epochs, schedule, rng, side)
        else:
            out[slot] = rrc_crop(img, side, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(len(idxs))))
    else:
        for slot in range(len(idxs)):
            one(slot)
    return out


@dataclass
class TrainResult:
    model: Model
    metrics: list
    checkpoint_path: str | None = None
    final_report: EvalReport | None = None


def _epoch_metrics(epoch: int, train_loss: float, report: EvalReport) -> dict:
    return {
        "epoch": epoch,
        "train_loss": train_loss,
        "overall": report.overall,
        "head": report.head,
        "medium": report.medium,
        "tail": report.tail,
    }


def train(cfg: RunConfig, dataset: LongTailDataset | None = None) -> TrainResult:
    """Run the configured fine-tuning job end to end.

    Returns the trained model and one metrics record per epoch; when
    cfg.out_dir is set, also writes metrics.jsonl (append-only, one JSON
    object per line) and checkpoint.lfck.
    """
    cfg.validate()
    if dataset is None:
        dataset = load_or_generate_dataset(cfg)
    model = build_model(cfg, dataset)
    if cfg.tte:
        warn_if_patch_multiple(cfg.expand, cfg.patch)

    prior = estimate_prior(dataset.class_counts) if cfg.loss == "la" else uniform_prior(dataset.num_classes)
    opt = SGD.for_model(model, lr=cfg.effective_lr(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a")

    n = len(dataset.train_labels)
    metrics: list = []
    step = 0
    report = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = _sample_rng(cfg.seed, 0x0BD, epoch).permutation(n)
            total_loss = 0.0
            for start in range(0, n, cfg.batch_size):
                idxs = order[start : start + cfg.batch_size]
                images = _augment_batch(cfg, dataset, idxs, epoch, cfg.workers)
                labels = dataset.train_labels[idxs]
                opt.zero_grad()
                loss = la_loss(model.logits(images), labels, prior)
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"loss became non-finite at epoch {epoch}, step {step}"
                    )
                loss.backward()
                opt.step()
                total_loss += value * len(idxs)
                step += 1
            report = evaluate(model, dataset, use_tte=cfg.tte, expand=cfg.expand, workers=cfg.workers)
            record = _epoch_metrics(epoch, total_loss / n, report)
            metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()

    checkpoint_path = None
    if out_dir:
        checkpoint_path = str(out_dir / "checkpoint.lfck")
        save_checkpoint(checkpoint_path, checkpoint_from_model(model, cfg.epochs, step, cfg.seed))

    return TrainResult(model, metrics, checkpoint_path, report)


def pretrain_backbone(cfg: RunConfig, dataset: LongTailDataset | None = None) -> TrainResult:
    """Train the full backbone plus a linear head on balanced source data.

    The resulting checkpoint holds backbone arrays only and stands in as
    the foundation model for every fine-tuning run.
    """
    source_cfg = replace(
        cfg,
        imbalance=1.0,
        policy=FineTunePolicy("full"),
        head_kind="linear",
        head_init="zero",
        loss="ce",
        backbone_path=None,
        tte=False,
    )
    source_cfg.validate()
    if dataset is None:
        dataset = load_or_generate_dataset(source_cfg)
    if len(set(dataset.class_counts.tolist())) != 1:
        raise ConfigError("pretraining needs a class-balanced source dataset")

    result = train(source_cfg, dataset)
    if source_cfg.out_dir:
        path = Path(source_cfg.out_dir) / "backbone.lfck"
        ckpt = checkpoint_from_model(result.model, source_cfg.epochs, 0, source_cfg.seed)
        ckpt.arrays = {
            name: arr for name, arr in ckpt.arrays.items() if name in param_shapes(result.model.spec)
        }
        ckpt.policy = None
        ckpt.head_meta = None
        save_checkpoint(path, ckpt)
        result.checkpoint_path = str(path)
    return result


# -- checkpoint container ---------------------------------------------------------


@dataclass
class Checkpoint:
    spec: BackboneSpec
    arrays: dict
    policy: FineTunePolicy | None = None
    head_meta: dict | None = None  # {"kind", "sigma"}
    epoch: int = 0
    step: int = 0
    seed: int = 0


def checkpoint_from_model(model: Model, epoch: int, step: int, seed: int) -> Checkpoint:
    policy = model.attached.policy if model.attached else None
    return Checkpoint(
        spec=model.spec,
        arrays={name: arr.copy() for name, arr in model.named_arrays().items()},
        policy=policy,
        head_meta={"kind": model.head.kind, "sigma": model.head.sigma},
        epoch=epoch,
        step=step,
        seed=seed,
    )


def _policy_to_meta(policy: FineTunePolicy | None):
    if policy is None:
        return None
    return {
        "kind": policy.kind,
        "k": policy.k,
        "alpha": policy.alpha,
        "mask_seed": policy.mask_seed,
        "p": policy.p,
        "r": policy.r,
        "s": policy.s,
    }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    spec = ckpt.spec
    meta = {
        "policy": _policy_to_meta(ckpt.policy),
        "head": ckpt.head_meta,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<HIIIIII",
                CHECKPOINT_VERSION,
                spec.blocks,
                spec.dim,
                spec.heads,
                spec.patch,
                spec.image_side,
                spec.channels,
            )
        )
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name, arr in ckpt.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expect_spec: BackboneSpec | None = None) -> Checkpoint:
    """Parse a checkpoint container, verifying structure before returning.

    With expect_spec given, every stored backbone array must match the
    shape that spec implies; the first offender is named in the error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError("not a checkpoint container (bad magic)")
    offset = 4
    try:
        version, blocks, dim, heads, patch, side, channels = struct.unpack_from("<HIIIIII", blob, offset)
        offset += struct.calcsize("<HIIIIII")
        if version != CHECKPOINT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        meta = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arrays: dict = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{max(ndim, 1)}I", blob, offset)
            offset += 4 * max(ndim, 1)
            shape = tuple(dims[:ndim]) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            end = offset + 4 * size
            if end > len(blob):
                raise IntegrityError(f"checkpoint truncated inside array {name!r}")
            arrays[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
            offset = end
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"checkpoint truncated or corrupt: {exc}") from exc

    spec = BackboneSpec(blocks=blocks, dim=dim, heads=heads, patch=patch,
                        image_side=side, channels=channels)
    stored_shapes = param_shapes(spec)
    for name, arr in arrays.items():
        if name in stored_shapes and arr.shape != stored_shapes[name]:
            raise IntegrityError(
                f"array {name!r} has shape {arr.shape}, spec implies {stored_shapes[name]}"
            )
    if expect_spec is not None:
        expected = param_shapes(expect_spec)
        for name, arr in arrays.items():
            if name in expected and arr.shape != expected[name]:
                raise IntegrityError(
                    f"array {name!r} has shape {arr.shape}, expected {expected[name]} "
                    "for the requested backbone"
                )
        if expect_spec != spec:
            raise IntegrityError(
                f"checkpoint backbone {spec} does not match requested {expect_spec}"
            )

    policy = FineTunePolicy(**meta["policy"]) if meta.get("policy") else None
    return Checkpoint(
        spec=spec,
        arrays=arrays,
        policy=policy,
        head_meta=meta.get("head"),
        epoch=meta.get("epoch", 0),
        step=meta.get("step", 0),
        seed=meta.get("seed", 0),
    )


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Model:
    """Rebuild a runnable model from a checkpoint with a policy and head."""
    if ckpt.head_meta is None:
        raise IntegrityError("checkpoint stores a bare backbone, not a full model")
    params = init_backbone_params(ckpt.spec, seed=ckpt.seed, dtype=dtype)
    head_names = [n for n in ckpt.arrays if n.startswith("head.")]
    if "head.weight" not in head_names:
        raise IntegrityError("checkpoint is missing the classifier weight")
    head = make_head(
        ckpt.head_meta["kind"], ckpt.arrays["head.weight"], sigma=ckpt.head_meta["sigma"], dtype=dtype
    )
    attached = None
    if ckpt.policy is not None:
        attached = attach_policy(params, ckpt.spec, ckpt.policy, head.params, seed=ckpt.seed)
    model = Model(ckpt.spec, params, head, attached)
    lookup = model.all_params()
    for name, arr in ckpt.arrays.items():
        if name not in lookup:
            raise IntegrityError(f"checkpoint array {name!r} has no slot in the rebuilt model")
        if lookup[name].shape != arr.shape:
            raise IntegrityError(
                f"array {name!r} has shape {arr.shape}, model expects {lookup[name].shape}"
            )
        lookup[name].data = arr.astype(dtype)
    return model
