import numpy as np
import pytest

from ltlab.autograd import Tensor
from ltlab.heads import classify, init_random, make_head
from ltlab.losses import estimate_prior, la_loss
from ltlab.peft import (
    FineTunePolicy,
    adaptformer_forward,
    attach_policy,
    build_mask,
    count_policy_params,
    default_bottleneck_dim,
)
from ltlab.vit import (
    BackboneSpec,
    block_param_names,
    count_params,
    forward_features,
    init_backbone_params,
)

VITB = BackboneSpec(blocks=12, dim=768, heads=12, patch=16, image_side=224)
VITL = BackboneSpec(blocks=24, dim=1024, heads=16, patch=14, image_side=224)
SMALL = BackboneSpec(blocks=2, dim=16, heads=2, patch=4, image_side=8, channels=1)


def _small_model(policy, seed=0, num_classes=3, dtype=np.float64):
    params = init_backbone_params(SMALL, seed=seed, dtype=dtype)
    head = make_head("cosine", init_random(num_classes, SMALL.dim, seed=seed), sigma=25.0, dtype=dtype)
    attached = attach_policy(params, SMALL, policy, head.params, seed=seed)
    return params, head, attached


def test_default_bottleneck_dim_values():
    assert default_bottleneck_dim(1000, 12) == 32
    assert default_bottleneck_dim(8142, 12) == 256
    assert default_bottleneck_dim(365, 12) == 8
    assert default_bottleneck_dim(100, 12) == 4
    assert default_bottleneck_dim(24, 12) == 1  # K = 2L


def test_default_bottleneck_dim_undefined_below_one():
    with pytest.raises(ValueError):
        default_bottleneck_dim(10, 8)


def test_build_mask_extremes_and_count():
    assert build_mask((3, 4), 0.0, seed=0).sum() == 0
    assert build_mask((3, 4), 1.0, seed=0).sum() == 12
    m = build_mask((10, 10), 0.1, seed=7)
    assert m.sum() == 10
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m, build_mask((10, 10), 0.1, seed=7))


@pytest.mark.parametrize(
    "spec,classes,expected",
    [
        (VITB, 1000, 617_868),
        (VITB, 365, 175_212),
        (VITB, 8142, 4_749_324),
        (VITB, 100, 101_436),
        (VITL, 1000, 860_568),
        (VITL, 365, 270_456),
        (VITL, 8142, 6_368_280),
    ],
)
def test_adaptformer_learned_params_match_reported_budgets(spec, classes, expected):
    policy = FineTunePolicy(kind="adaptformer")
    assert count_policy_params(policy, spec, classes) == expected


def test_adaptformer_rounded_millions():
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITB, 1000) / 1e6, 2) == 0.62
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITB, 365) / 1e6, 2) == 0.18
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITB, 8142) / 1e6, 2) == 4.75
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITB, 100) / 1e6, 2) == 0.10
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITL, 1000) / 1e6, 2) == 0.86
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITL, 365) / 1e6, 2) == 0.27
    assert round(count_policy_params(FineTunePolicy("adaptformer"), VITL, 8142) / 1e6, 2) == 6.37


def test_bitfit_per_block_count():
    total = count_policy_params(FineTunePolicy("bitfit"), VITB, 1000)
    # embedding bias and final layer-norm shift sit outside the blocks
    assert (total - 2 * 768) // 12 == 11 * 768 == 8448


def test_lora_per_block_count():
    total = count_policy_params(FineTunePolicy("lora", r=4), VITB, 1000)
    assert total // 12 == 4 * 4 * 768 == 12_288


def test_full_and_frozen_counts():
    assert count_policy_params(FineTunePolicy("full"), VITB, 1000) == count_params(VITB)[0]
    assert count_policy_params(FineTunePolicy("frozen"), VITB, 1000) == 0
    assert count_policy_params(FineTunePolicy("classifier_only"), VITB, 1000) == 0


def test_partial_count_and_bounds():
    assert (
        count_policy_params(FineTunePolicy("partial", k=2), VITB, 1000)
        == 2 * (12 * 768**2 + 13 * 768) + 2 * 768
    )
    with pytest.raises(ValueError):
        count_policy_params(FineTunePolicy("partial", k=13), VITB, 1000)


ALL_POLICIES = [
    FineTunePolicy("frozen"),
    FineTunePolicy("classifier_only"),
    FineTunePolicy("full"),
    FineTunePolicy("partial", k=1),
    FineTunePolicy("mask", alpha=0.1, mask_seed=3),
    FineTunePolicy("bitfit"),
    FineTunePolicy("vpt", p=2),
    FineTunePolicy("adapter", r=2),
    FineTunePolicy("lora", r=2),
    FineTunePolicy("adaptformer", r=2),
]


@pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: p.kind)
def test_partition_matches_analytic_count(policy):
    _, _, attached = _small_model(policy)
    got = attached.partition.trainable_count(include_head=False)
    assert got == count_policy_params(policy, SMALL, 3)


def test_frozen_partition_lists_only_classifier():
    _, _, attached = _small_model(FineTunePolicy("frozen"))
    assert all(name.startswith("head.") for name in attached.partition.names())


def test_mask_partition_entries():
    policy = FineTunePolicy("mask", alpha=0.1, mask_seed=1)
    _, _, attached = _small_model(policy)
    for entry in attached.partition.entries:
        if entry.name.startswith("head."):
            continue
        assert entry.mask is not None
        assert entry.trainable == int(round(0.1 * entry.total))
        assert entry.trainable == int(entry.mask.sum())


def test_mask_gradients_are_sparse():
    policy = FineTunePolicy("mask", alpha=0.2, mask_seed=5)
    params, head, attached = _small_model(policy)
    rng = np.random.default_rng(0)
    images = rng.normal(size=(2, 8, 8, 1))
    prior = estimate_prior([2, 1, 1])
    loss = la_loss(classify(forward_features(images, params, SMALL, attached.hooks), head),
                   np.array([0, 1]), prior)
    loss.backward()
    for entry in attached.partition.entries:
        if entry.mask is None:
            continue
        grad = params[entry.name].grad
        assert grad is not None
        np.testing.assert_array_equal(grad[entry.mask == 0], 0.0)
        assert np.any(grad[entry.mask == 1] != 0.0)


def test_vpt_extends_sequence_inside_block_only():
    policy = FineTunePolicy("vpt", p=3)
    params, head, attached = _small_model(policy)
    x = Tensor(np.random.default_rng(1).normal(size=(2, SMALL.m + 1, SMALL.dim)))
    inside = attached.hooks.enter(0, x)
    assert inside.shape == (2, SMALL.m + 1 + 3, SMALL.dim)
    back = attached.hooks.exit(0, inside)
    assert back.shape == x.shape
    np.testing.assert_array_equal(back.data[:, 0], x.data[:, 0])  # read position intact


def test_vpt_forward_shape_and_prompt_gradients():
    policy = FineTunePolicy("vpt", p=2)
    params, head, attached = _small_model(policy)
    images = np.random.default_rng(2).normal(size=(2, 8, 8, 1))
    feats = forward_features(images, params, SMALL, attached.hooks)
    assert feats.shape == (2, SMALL.dim)
    loss = la_loss(classify(feats, head), np.array([0, 1]), estimate_prior([1, 1, 1]))
    loss.backward()
    for i in range(SMALL.blocks):
        g = params[f"block{i}.prompt"].grad
        assert g is not None and np.any(g != 0.0)


@pytest.mark.parametrize("kind", ["lora", "adapter", "adaptformer"])
def test_zero_initialized_modules_preserve_frozen_forward(kind):
    images = np.random.default_rng(3).normal(size=(2, 8, 8, 1))
    baseline_params = init_backbone_params(SMALL, seed=4)
    baseline = forward_features(images, baseline_params, SMALL).data

    policy = FineTunePolicy(kind, r=2)
    params, head, attached = _small_model(policy, seed=4)
    got = forward_features(images, params, SMALL, attached.hooks).data
    np.testing.assert_array_equal(got, baseline)


def test_adaptformer_forward_zero_branch_cases():
    rng = np.random.default_rng(6)
    d, r = 4, 2
    block = {
        "ln2.gamma": Tensor(rng.normal(size=d) + 1.0),
        "ln2.beta": Tensor(rng.normal(size=d)),
        "ffn.w1": Tensor(rng.normal(size=(d, 4 * d))),
        "ffn.b1": Tensor(rng.normal(size=4 * d)),
        "ffn.w2": Tensor(rng.normal(size=(4 * d, d))),
        "ffn.b2": Tensor(rng.normal(size=d)),
    }
    module = {
        "ln.gamma": Tensor(np.ones(d)),
        "ln.beta": Tensor(np.zeros(d)),
        "down.w": Tensor(rng.normal(size=(d, r))),
        "down.b": Tensor(np.zeros(r)),
        "up.w": Tensor(np.zeros((r, d))),
        "up.b": Tensor(np.zeros(d)),
    }
    x_hat = Tensor(rng.normal(size=(5, d)))

    def plain(x):
        h = x.data
        mu = h.mean(-1, keepdims=True)
        var = ((h - mu) ** 2).mean(-1, keepdims=True)
        n = (h - mu) / np.sqrt(var + 1e-5) * block["ln2.gamma"].data + block["ln2.beta"].data
        y = np.maximum(n @ block["ffn.w1"].data + block["ffn.b1"].data, 0.0)
        return y @ block["ffn.w2"].data + block["ffn.b2"].data + h

    for s in (0.0, 0.7):  # zero weight silences the branch no matter the scale
        out = adaptformer_forward(x_hat, block, module, s)
        np.testing.assert_allclose(out.data, plain(x_hat), atol=1e-12)

    module["up.w"] = Tensor(rng.normal(size=(r, d)))
    out0 = adaptformer_forward(x_hat, block, module, 0.0)
    np.testing.assert_allclose(out0.data, plain(x_hat), atol=1e-12)


def test_adaptformer_forward_matches_oracle():
    rng = np.random.default_rng(7)
    d, r = 4, 2
    block = {
        "ln2.gamma": Tensor(rng.normal(size=d) + 1.0),
        "ln2.beta": Tensor(rng.normal(size=d)),
        "ffn.w1": Tensor(rng.normal(size=(d, 4 * d))),
        "ffn.b1": Tensor(rng.normal(size=4 * d)),
        "ffn.w2": Tensor(rng.normal(size=(4 * d, d))),
        "ffn.b2": Tensor(rng.normal(size=d)),
    }
    module = {
        "ln.gamma": Tensor(rng.normal(size=d) + 1.0),
        "ln.beta": Tensor(rng.normal(size=d)),
        "down.w": Tensor(rng.normal(size=(d, r))),
        "down.b": Tensor(rng.normal(size=r)),
        "up.w": Tensor(rng.normal(size=(r, d))),
        "up.b": Tensor(rng.normal(size=d)),
    }
    x = rng.normal(size=(5, d))
    s = 0.31

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * g + b

    ffn = np.maximum(ln(x, block["ln2.gamma"].data, block["ln2.beta"].data) @ block["ffn.w1"].data
                     + block["ffn.b1"].data, 0.0) @ block["ffn.w2"].data + block["ffn.b2"].data
    branch = np.maximum(ln(x, module["ln.gamma"].data, module["ln.beta"].data) @ module["down.w"].data
                        + module["down.b"].data, 0.0) @ module["up.w"].data + module["up.b"].data
    want = ffn + x + s * branch

    got = adaptformer_forward(Tensor(x), block, module, s).data
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_adapter_stays_smaller_than_classifier():
    for num_classes, blocks, dim in ((1000, 12, 768), (8142, 12, 768), (365, 12, 768)):
        r = default_bottleneck_dim(num_classes, blocks)
        assert r <= num_classes / (2 * blocks)
        assert blocks * 2 * r * dim <= num_classes * dim


def test_partial_policy_validation():
    with pytest.raises(ValueError):
        _small_model(FineTunePolicy("partial", k=3))  # only 2 blocks


def test_partial_partition_contents():
    _, _, attached = _small_model(FineTunePolicy("partial", k=1))
    names = set(attached.partition.names())
    assert "block1.ffn.w1" in names and "final_ln.gamma" in names
    assert not any(n.startswith("block0.") for n in names)
    for i in range(2):
        for n in block_param_names(i):
            assert (n in names) == (i == 1)


def test_policy_validation():
    with pytest.raises(ValueError):
        FineTunePolicy("nonsense")
    with pytest.raises(ValueError):
        FineTunePolicy("mask", alpha=1.5)
    with pytest.raises(ValueError):
        FineTunePolicy("vpt", p=0)
    with pytest.raises(ValueError):
        FineTunePolicy("adapter", r=0)
