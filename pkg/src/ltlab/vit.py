"""Minimal Vision Transformer: patch embedding, residual blocks, feature head.

The model is a plain parameter dictionary plus pure forward functions, so
fine-tuning policies can rewrite weight access or splice branches without
subclassing. Sequences are (batch, tokens, dim); token 0 is the class token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, layer_norm, softmax

__all__ = [
    "BackboneSpec",
    "BlockHooks",
    "count_params",
    "count_params_dims",
    "param_shapes",
    "init_backbone_params",
    "extract_patches",
    "embed_patches",
    "forward_block",
    "forward_features",
    "extract_feature",
    "block_param_names",
    "MASKABLE_MATRICES",
]

# weight matrices eligible for sparse-mask fine-tuning, per block
MASKABLE_MATRICES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture hyperparameters of the mini ViT."""

    blocks: int
    dim: int
    heads: int
    patch: int
    image_side: int
    channels: int = 3

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch != 0:
            raise ValueError(
                f"image side {self.image_side} not divisible by patch {self.patch}"
            )

    @property
    def m(self) -> int:
        """Number of patch tokens."""
        return (self.image_side // self.patch) ** 2

    @property
    def d0(self) -> int:
        """Flattened patch dimensionality."""
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def count_params_dims(blocks: int, dim: int, m: int, d0: int):
    """Exact parameter count plus per-component breakdown rows."""
    rows = [
        ("embedding_projection", (d0 + 1) * dim),
        ("class_token", dim),
        ("positional", (m + 1) * dim),
    ]
    per_block = 12 * dim * dim + 13 * dim
    for i in range(blocks):
        rows.append((f"block_{i}", per_block))
    rows.append(("final_norm", 2 * dim))
    total = sum(count for _, count in rows)
    closed_form = 12 * blocks * dim * dim + (13 * blocks + m + d0 + 5) * dim
    assert total == closed_form
    return total, rows


def count_params(spec: BackboneSpec):
    return count_params_dims(spec.blocks, spec.dim, spec.m, spec.d0)


def block_param_names(i: int) -> list[str]:
    base = f"block{i}."
    return [
        base + name
        for name in (
            "ln1.gamma",
            "ln1.beta",
            "attn.wq",
            "attn.bq",
            "attn.wk",
            "attn.bk",
            "attn.wv",
            "attn.bv",
            "attn.wo",
            "attn.bo",
            "ln2.gamma",
            "ln2.beta",
            "ffn.w1",
            "ffn.b1",
            "ffn.w2",
            "ffn.b2",
        )
    ]


def param_shapes(spec: BackboneSpec) -> dict:
    """Shape table of every named backbone parameter, without allocating."""
    d, d0, m = spec.dim, spec.d0, spec.m
    shapes: dict[str, tuple] = {
        "embed.weight": (d0, d),
        "embed.bias": (d,),
        "cls_token": (d,),
        "pos_table": (m + 1, d),
    }
    for i in range(spec.blocks):
        b = f"block{i}."
        shapes[b + "ln1.gamma"] = (d,)
        shapes[b + "ln1.beta"] = (d,)
        shapes[b + "attn.wq"] = (d, d)
        shapes[b + "attn.bq"] = (d,)
        shapes[b + "attn.wk"] = (d, d)
        shapes[b + "attn.bk"] = (d,)
        shapes[b + "attn.wv"] = (d, d)
        shapes[b + "attn.bv"] = (d,)
        shapes[b + "attn.wo"] = (d, d)
        shapes[b + "attn.bo"] = (d,)
        shapes[b + "ln2.gamma"] = (d,)
        shapes[b + "ln2.beta"] = (d,)
        shapes[b + "ffn.w1"] = (d, 4 * d)
        shapes[b + "ffn.b1"] = (4 * d,)
        shapes[b + "ffn.w2"] = (4 * d, d)
        shapes[b + "ffn.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


def init_backbone_params(spec: BackboneSpec, seed: int = 0, dtype=np.float64) -> dict:
    """Fresh named parameter set; count matches count_params exactly.

    Projections use fan-in scaling so signal magnitude survives small
    embedding widths; tokens and positions start near zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F17)))
    d, d0, m = spec.dim, spec.d0, spec.m

    def w(*shape):
        scale = 1.0 / math.sqrt(shape[0]) if len(shape) > 1 else 0.02
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype))

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype))

    def table(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype))

    params: dict[str, Tensor] = {
        "embed.weight": w(d0, d),
        "embed.bias": zeros(d),
        "cls_token": table(d),
        "pos_table": table(m + 1, d),
    }
    for i in range(spec.blocks):
        b = f"block{i}."
        params[b + "ln1.gamma"] = ones(d)
        params[b + "ln1.beta"] = zeros(d)
        params[b + "attn.wq"] = w(d, d)
        params[b + "attn.bq"] = zeros(d)
        params[b + "attn.wk"] = w(d, d)
        params[b + "attn.bk"] = zeros(d)
        params[b + "attn.wv"] = w(d, d)
        params[b + "attn.bv"] = zeros(d)
        params[b + "attn.wo"] = w(d, d)
        params[b + "attn.bo"] = zeros(d)
        params[b + "ln2.gamma"] = ones(d)
        params[b + "ln2.beta"] = zeros(d)
        params[b + "ffn.w1"] = w(d, 4 * d)
        params[b + "ffn.b1"] = zeros(4 * d)
        params[b + "ffn.w2"] = w(4 * d, d)
        params[b + "ffn.b2"] = zeros(d)
    params["final_ln.gamma"] = ones(d)
    params["final_ln.beta"] = zeros(d)

    total = sum(t.size for t in params.values())
    expected, _ = count_params(spec)
    assert total == expected
    return params


class BlockHooks:
    """Extension points fine-tuning policies use to rewrite a block.

    The base class is the identity on every hook, i.e. the plain backbone.
    """

    def weight(self, name: str, w: Tensor) -> Tensor:
        return w

    def enter(self, i: int, x: Tensor) -> Tensor:
        return x

    def exit(self, i: int, x: Tensor) -> Tensor:
        return x

    def ffn_branch(self, i: int, y: Tensor) -> Tensor:
        return y

    def block_extra(self, i: int, x_hat: Tensor):
        return None


_IDENTITY_HOOKS = BlockHooks()


def extract_patches(images: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Flatten (n, a, a, c) images into (n, m, d0) patch rows, row-major."""
    n, h, w, c = images.shape
    if h != spec.image_side or w != spec.image_side or c != spec.channels:
        raise ValueError(
            f"expected images of shape (*, {spec.image_side}, {spec.image_side}, "
            f"{spec.channels}), got {images.shape}"
        )
    p = spec.patch
    g = h // p
    patches = images.reshape(n, g, p, g, p, c)
    patches = patches.transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(n, g * g, p * p * c)


def embed_patches(images: np.ndarray, params: dict, spec: BackboneSpec) -> Tensor:
    """Token sequences (n, m+1, d): class token, projected patches, positions."""
    if images.ndim == 3:
        images = images[None]
    patches = Tensor(extract_patches(images, spec).astype(params["embed.weight"].dtype))
    tokens = patches @ params["embed.weight"] + params["embed.bias"]
    n = images.shape[0]
    cls_rows = params["cls_token"].reshape(1, 1, spec.dim).broadcast_to(n, 1, spec.dim)
    seq = concat([cls_rows, tokens], axis=1)
    return seq + params["pos_table"]


def _msa(x: Tensor, params: dict, prefix: str, spec: BackboneSpec, hooks: BlockHooks) -> Tensor:
    n, t, d = x.shape
    heads, dh = spec.heads, spec.head_dim
    q = x @ hooks.weight(prefix + "attn.wq", params[prefix + "attn.wq"]) + params[prefix + "attn.bq"]
    k = x @ hooks.weight(prefix + "attn.wk", params[prefix + "attn.wk"]) + params[prefix + "attn.bk"]
    v = x @ hooks.weight(prefix + "attn.wv", params[prefix + "attn.wv"]) + params[prefix + "attn.bv"]
    q = q.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
    v = v.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    ctx = softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n, t, d)
    out = ctx @ hooks.weight(prefix + "attn.wo", params[prefix + "attn.wo"])
    return out + params[prefix + "attn.bo"]


def _ffn(x: Tensor, params: dict, prefix: str, hooks: BlockHooks) -> Tensor:
    h = x @ hooks.weight(prefix + "ffn.w1", params[prefix + "ffn.w1"]) + params[prefix + "ffn.b1"]
    h = h.relu()
    return h @ hooks.weight(prefix + "ffn.w2", params[prefix + "ffn.w2"]) + params[prefix + "ffn.b2"]


def forward_block(
    x: Tensor,
    params: dict,
    i: int,
    spec: BackboneSpec,
    hooks: BlockHooks = _IDENTITY_HOOKS,
) -> Tensor:
    """One residual block: attention over normalized tokens, then FFN."""
    squeeze = False
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
        squeeze = True
    p = f"block{i}."
    x = hooks.enter(i, x)
    x_hat = _msa(layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"]), params, p, spec, hooks) + x
    y = _ffn(layer_norm(x_hat, params[p + "ln2.gamma"], params[p + "ln2.beta"]), params, p, hooks)
    y = hooks.ffn_branch(i, y)
    out = y + x_hat
    extra = hooks.block_extra(i, x_hat)
    if extra is not None:
        out = out + extra
    out = hooks.exit(i, out)
    if squeeze:
        out = out.reshape(*out.shape[1:])
    return out


def forward_features(
    images: np.ndarray,
    params: dict,
    spec: BackboneSpec,
    hooks: BlockHooks = _IDENTITY_HOOKS,
) -> Tensor:
    """Features (n, d): the class-token row of the final normalized sequence."""
    x = embed_patches(images, params, spec)
    for i in range(spec.blocks):
        x = forward_block(x, params, i, spec, hooks)
    cls = x[:, 0, :]
    return layer_norm(cls, params["final_ln.gamma"], params["final_ln.beta"])


def extract_feature(
    image: np.ndarray,
    params: dict,
    spec: BackboneSpec,
    hooks: BlockHooks = _IDENTITY_HOOKS,
) -> Tensor:
    """Feature vector (d,) for a single (a, a, c) image."""
    return forward_features(image[None], params, spec, hooks).reshape(-1)
