"""Fine-tuning policies: which parameters move, and how the forward changes.

A policy attaches to a frozen backbone and yields three things: new module
parameters (prompts, bottlenecks, low-rank factors), a trainable-parameter
partition used by the optimizer and the accounting tools, and block hooks
that splice the policy into the forward pass.

Supported kinds: frozen, classifier_only, full, partial(k), mask(alpha),
bitfit, vpt(p), adapter(r), lora(r), adaptformer(r, s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat, layer_norm
from .vit import MASKABLE_MATRICES, BackboneSpec, BlockHooks, count_params

__all__ = [
    "POLICY_KINDS",
    "FineTunePolicy",
    "PartitionEntry",
    "TrainablePartition",
    "AttachedPolicy",
    "default_bottleneck_dim",
    "build_mask",
    "attach_policy",
    "count_policy_params",
    "adaptformer_forward",
]

POLICY_KINDS = (
    "frozen",
    "classifier_only",
    "full",
    "partial",
    "mask",
    "bitfit",
    "vpt",
    "adapter",
    "lora",
    "adaptformer",
)


@dataclass(frozen=True)
class FineTunePolicy:
    """Tagged fine-tuning choice plus its hyperparameters."""

    kind: str
    k: int = 1  # partial: number of trailing blocks
    alpha: float = 0.1  # mask: trainable fraction per weight matrix
    mask_seed: int = 0
    p: int = 10  # vpt: prompts per layer
    r: int | None = None  # bottleneck dim; None = derive from (K, L)
    s: float | str = "learnable"  # adaptformer scaling

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "partial" and self.k < 0:
            raise ValueError("partial policy needs k >= 0")
        if self.kind == "mask" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("mask fraction must lie in [0, 1]")
        if self.kind == "vpt" and self.p < 1:
            raise ValueError("vpt needs at least one prompt")
        if self.kind in ("adapter", "lora", "adaptformer") and self.r is not None and self.r < 1:
            raise ValueError("bottleneck dimension must be >= 1")
        if self.kind == "adaptformer" and not (self.s == "learnable" or np.isscalar(self.s)):
            raise ValueError("adaptformer scaling must be a real number or 'learnable'")

    def bottleneck(self, num_classes: int, blocks: int) -> int:
        if self.r is not None:
            return self.r
        return default_bottleneck_dim(num_classes, blocks)


def default_bottleneck_dim(num_classes: int, blocks: int) -> int:
    """Largest power of two not exceeding num_classes / (2 * blocks)."""
    if num_classes < 1 or blocks < 1:
        raise ValueError("class and block counts must be positive")
    ratio = num_classes / (2 * blocks)
    if ratio < 1.0:
        raise ValueError(
            f"bottleneck rule undefined for {num_classes} classes over {blocks} blocks; "
            "set r explicitly"
        )
    return 2 ** int(math.floor(math.log2(ratio)))


def build_mask(shape: tuple, alpha: float, seed: int) -> np.ndarray:
    """Binary mask with exactly round(alpha * size) ones, uniform under seed."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("mask fraction must lie in [0, 1]")
    size = int(np.prod(shape))
    ones = int(round(alpha * size))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mask = np.zeros(size, dtype=np.float64)
    if ones:
        mask[rng.choice(size, size=ones, replace=False)] = 1.0
    return mask.reshape(shape)


@dataclass
class PartitionEntry:
    name: str
    trainable: int
    total: int
    mask: np.ndarray | None = None


@dataclass
class TrainablePartition:
    entries: list = field(default_factory=list)

    def add(self, name: str, tensor: Tensor, mask: np.ndarray | None = None):
        trainable = int(mask.sum()) if mask is not None else tensor.size
        self.entries.append(PartitionEntry(name, trainable, tensor.size, mask))

    def names(self) -> list:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> PartitionEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def trainable_count(self, include_head: bool = True) -> int:
        return sum(
            e.trainable for e in self.entries if include_head or not e.name.startswith("head.")
        )


class PolicyHooks(BlockHooks):
    """Forward-pass modifications for mask, lora, vpt, adapter, adaptformer."""

    def __init__(self, policy: FineTunePolicy, spec: BackboneSpec, params: dict, r: int | None):
        self.policy = policy
        self.spec = spec
        self.params = params
        self.r = r
        self.masks: dict[str, np.ndarray] = {}

    def weight(self, name: str, w: Tensor) -> Tensor:
        kind = self.policy.kind
        if kind == "mask" and name in self.masks:
            m = Tensor(self.masks[name].astype(w.dtype))
            inv = Tensor((1.0 - self.masks[name]).astype(w.dtype))
            return w * m + (w * inv).detach()
        if kind == "lora" and (name.endswith("attn.wq") or name.endswith("attn.wv")):
            block, which = name.split(".")[0], name.split(".")[-1][-1]
            down = self.params[f"{block}.lora.{which}.down"]
            up = self.params[f"{block}.lora.{which}.up"]
            return w + down @ up
        return w

    def enter(self, i: int, x: Tensor) -> Tensor:
        if self.policy.kind != "vpt":
            return x
        prompts = self.params[f"block{i}.prompt"]
        n = x.shape[0]
        p, d = prompts.shape
        rows = prompts.reshape(1, p, d).broadcast_to(n, p, d)
        return concat([x[:, :1, :], rows, x[:, 1:, :]], axis=1)

    def exit(self, i: int, x: Tensor) -> Tensor:
        if self.policy.kind != "vpt":
            return x
        p = self.policy.p
        return concat([x[:, :1, :], x[:, 1 + p :, :]], axis=1)

    def _bottleneck_delta(self, i: int, x: Tensor, tag: str) -> Tensor:
        base = f"block{i}.{tag}."
        h = layer_norm(x, self.params[base + "ln.gamma"], self.params[base + "ln.beta"])
        h = (h @ self.params[base + "down.w"] + self.params[base + "down.b"]).relu()
        return h @ self.params[base + "up.w"] + self.params[base + "up.b"]

    def ffn_branch(self, i: int, y: Tensor) -> Tensor:
        if self.policy.kind != "adapter":
            return y
        return y + self._bottleneck_delta(i, y, "adapter")

    def block_extra(self, i: int, x_hat: Tensor):
        if self.policy.kind != "adaptformer":
            return None
        delta = self._bottleneck_delta(i, x_hat, "adaptformer")
        if self.policy.s == "learnable":
            return self.params[f"block{i}.adaptformer.scale"] * delta
        return delta * float(self.policy.s)


@dataclass
class AttachedPolicy:
    policy: FineTunePolicy
    partition: TrainablePartition
    hooks: BlockHooks
    new_params: dict


def _bias_names(spec: BackboneSpec) -> list:
    names = ["embed.bias"]
    for i in range(spec.blocks):
        b = f"block{i}."
        names += [
            b + "ln1.beta",
            b + "attn.bq",
            b + "attn.bk",
            b + "attn.bv",
            b + "attn.bo",
            b + "ln2.beta",
            b + "ffn.b1",
            b + "ffn.b2",
        ]
    names.append("final_ln.beta")
    return names


def attach_policy(
    params: dict,
    spec: BackboneSpec,
    policy: FineTunePolicy,
    head_params: dict,
    seed: int = 0,
) -> AttachedPolicy:
    """Mark trainable parameters and create policy modules.

    Mutates `params` (adds new module parameters) and the requires_grad
    flags of every tensor involved. The classifier is always trainable.
    """
    kind = policy.kind
    dtype = params["embed.weight"].dtype
    d, blocks = spec.dim, spec.blocks
    num_classes = head_params["head.weight"].shape[0]
    r = None
    if kind in ("adapter", "lora", "adaptformer"):
        r = policy.bottleneck(num_classes, blocks)

    for t in params.values():
        t.requires_grad = False
        t.zero_grad()

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFE)))
    partition = TrainablePartition()
    hooks = PolicyHooks(policy, spec, params, r)
    new_params: dict[str, Tensor] = {}

    def make(name: str, array: np.ndarray):
        t = Tensor(array.astype(dtype), requires_grad=True)
        params[name] = t
        new_params[name] = t
        partition.add(name, t)

    def enable(name: str, mask: np.ndarray | None = None):
        params[name].requires_grad = True
        partition.add(name, params[name], mask)

    if kind in ("frozen", "classifier_only"):
        pass
    elif kind == "full":
        for name in params:
            enable(name)
    elif kind == "partial":
        if policy.k > blocks:
            raise ValueError(f"partial policy k={policy.k} exceeds {blocks} blocks")
        for i in range(blocks - policy.k, blocks):
            for name in params:
                if name.startswith(f"block{i}."):
                    enable(name)
        enable("final_ln.gamma")
        enable("final_ln.beta")
    elif kind == "mask":
        for i in range(blocks):
            for suffix in MASKABLE_MATRICES:
                name = f"block{i}.{suffix}"
                mask = build_mask(
                    params[name].shape,
                    policy.alpha,
                    _mask_entry_seed(policy.mask_seed, i, suffix),
                )
                hooks.masks[name] = mask
                enable(name, mask)
    elif kind == "bitfit":
        for name in _bias_names(spec):
            enable(name)
    elif kind == "vpt":
        for i in range(blocks):
            make(f"block{i}.prompt", rng.normal(0.0, 0.02, size=(policy.p, d)))
    elif kind == "lora":
        down_scale = 1.0 / math.sqrt(d)  # fan-in; up starts at zero
        for i in range(blocks):
            for which in ("q", "v"):
                make(f"block{i}.lora.{which}.down", rng.normal(0.0, down_scale, size=(d, r)))
                make(f"block{i}.lora.{which}.up", np.zeros((r, d)))
    elif kind in ("adapter", "adaptformer"):
        tag = kind
        down_scale = 1.0 / math.sqrt(d)
        for i in range(blocks):
            base = f"block{i}.{tag}."
            make(base + "ln.gamma", np.ones(d))
            make(base + "ln.beta", np.zeros(d))
            make(base + "down.w", rng.normal(0.0, down_scale, size=(d, r)))
            make(base + "down.b", np.zeros(r))
            make(base + "up.w", np.zeros((r, d)))
            make(base + "up.b", np.zeros(d))
            if kind == "adaptformer" and policy.s == "learnable":
                make(base + "scale", np.asarray(0.1))

    for name, t in head_params.items():
        t.requires_grad = True
        partition.add(name, t)

    return AttachedPolicy(policy, partition, hooks, new_params)


def _mask_entry_seed(seed: int, block: int, suffix: str) -> int:
    return int(
        np.random.SeedSequence((seed, block, MASKABLE_MATRICES.index(suffix))).generate_state(1)[0]
    )


def count_policy_params(
    policy: FineTunePolicy, spec: BackboneSpec, num_classes: int
) -> int:
    """Trainable backbone-side parameter count; the classifier is excluded."""
    L, d = spec.blocks, spec.dim
    kind = policy.kind
    if kind in ("frozen", "classifier_only"):
        return 0
    if kind == "full":
        return count_params(spec)[0]
    if kind == "partial":
        if policy.k > L:
            raise ValueError(f"partial policy k={policy.k} exceeds {L} blocks")
        return policy.k * (12 * d * d + 13 * d) + 2 * d
    if kind == "mask":
        per_block = 4 * int(round(policy.alpha * d * d)) + 2 * int(round(policy.alpha * 4 * d * d))
        return L * per_block
    if kind == "bitfit":
        return L * 11 * d + 2 * d
    if kind == "vpt":
        return L * policy.p * d
    r = policy.bottleneck(num_classes, L)
    if kind == "lora":
        return L * 4 * r * d
    per_block = 2 * d + (2 * r + 1) * d + r
    if kind == "adaptformer" and policy.s == "learnable":
        per_block += 1
    return L * per_block


def adaptformer_forward(
    x_hat: Tensor,
    block_params: dict,
    module_params: dict,
    s,
    spec: BackboneSpec | None = None,
) -> Tensor:
    """FFN half of a block with the parallel bottleneck branch added.

    `block_params` holds ln2/ffn tensors keyed without a block prefix;
    `module_params` holds ln/down/up tensors for the branch. `s` is a real
    scaling factor or a scalar Tensor.
    """
    h = layer_norm(x_hat, block_params["ln2.gamma"], block_params["ln2.beta"])
    y = (h @ block_params["ffn.w1"] + block_params["ffn.b1"]).relu()
    y = y @ block_params["ffn.w2"] + block_params["ffn.b2"]

    a = layer_norm(x_hat, module_params["ln.gamma"], module_params["ln.beta"])
    a = (a @ module_params["down.w"] + module_params["down.b"]).relu()
    delta = a @ module_params["up.w"] + module_params["up.b"]
    if isinstance(s, Tensor):
        branch = s * delta
    else:
        branch = delta * float(s)
    return y + x_hat + branch
