import json

import numpy as np
import pytest

from ltlab.autograd import Tensor
from ltlab.harness import (
    Checkpoint,
    ConfigError,
    IntegrityError,
    RunConfig,
    SGD,
    build_model,
    checkpoint_from_model,
    config_from_file,
    load_checkpoint,
    load_or_generate_dataset,
    model_from_checkpoint,
    pretrain_backbone,
    save_checkpoint,
    train,
)
from ltlab.peft import FineTunePolicy, PartitionEntry
from ltlab.vit import BackboneSpec, init_backbone_params


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        blocks=2,
        dim=16,
        heads=2,
        patch=4,
        image_side=8,
        channels=1,
        classes=3,
        n_max=9,
        imbalance=3.0,
        test_per_class=3,
        policy=FineTunePolicy("adaptformer", r=2),
        head_init="class_mean",
        epochs=2,
        batch_size=4,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def test_sgd_hand_step():
    # loss (w - 1)^2 at w=0: gradient -2, one step of lr 0.1 lands on 0.2
    w = Tensor(np.array(0.0), requires_grad=True)
    entry = PartitionEntry("w", 1, 1)
    opt = SGD([(entry, w)], lr=0.1, momentum=0.0, weight_decay=0.0)
    loss = (w - 1.0) * (w - 1.0)
    loss.backward()
    opt.step()
    assert abs(w.data - 0.2) < 1e-15


def test_sgd_momentum_accumulates():
    w = Tensor(np.array(0.0), requires_grad=True)
    entry = PartitionEntry("w", 1, 1)
    opt = SGD([(entry, w)], lr=1.0, momentum=0.5, weight_decay=0.0)
    for expected in (1.0, 2.5):  # constant gradient -1: v = 1, then 1.5
        w.zero_grad()
        (w * -1.0).backward()
        opt.step()
        assert abs(w.data - expected) < 1e-12


def test_train_zero_learning_rate_freezes_everything():
    cfg = tiny_config(lr=0.0, epochs=1)
    ds = load_or_generate_dataset(cfg)
    before = build_model(cfg, ds)
    snapshot = {k: v.copy() for k, v in before.named_arrays().items()}
    result = train(cfg, ds)
    after = result.model.named_arrays()
    assert snapshot.keys() == after.keys()
    for name in snapshot:
        np.testing.assert_array_equal(snapshot[name], after[name])


def test_train_loss_decreases_on_tiny_recipe():
    cfg = tiny_config(epochs=3, n_max=12)
    result = train(cfg)
    assert result.metrics[-1]["train_loss"] < result.metrics[0]["train_loss"]


def test_train_metrics_records_have_fixed_keys():
    result = train(tiny_config(epochs=1))
    assert set(result.metrics[0].keys()) == {"epoch", "train_loss", "overall", "head", "medium", "tail"}


def test_train_is_deterministic_across_workers(tmp_path):
    out1, out2 = tmp_path / "w1", tmp_path / "w4"
    r1 = train(tiny_config(workers=1, out_dir=str(out1)))
    r2 = train(tiny_config(workers=4, out_dir=str(out2)))
    assert json.dumps(r1.metrics) == json.dumps(r2.metrics)
    assert (out1 / "checkpoint.lfck").read_bytes() == (out2 / "checkpoint.lfck").read_bytes()
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()


def test_train_same_seed_reproduces_bitwise(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    train(tiny_config(out_dir=str(out1)))
    train(tiny_config(out_dir=str(out2)))
    assert (out1 / "checkpoint.lfck").read_bytes() == (out2 / "checkpoint.lfck").read_bytes()


def test_metrics_file_is_parseable_jsonl(tmp_path):
    out = tmp_path / "run"
    train(tiny_config(epochs=2, out_dir=str(out)))
    lines = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines, start=1):
        record = json.loads(line)
        assert record["epoch"] == i
        assert set(record) == {"epoch", "train_loss", "overall", "head", "medium", "tail"}


def test_frozen_parameters_unchanged_after_run():
    cfg = tiny_config(policy=FineTunePolicy("lora", r=2), epochs=1)
    ds = load_or_generate_dataset(cfg)
    model = build_model(cfg, ds)
    trainable = set(model.attached.partition.names())
    frozen_before = {
        name: t.data.copy() for name, t in model.all_params().items() if name not in trainable
    }
    result = train(cfg, ds)
    after = result.model.all_params()
    assert frozen_before  # the backbone really is frozen under lora
    for name, arr in frozen_before.items():
        np.testing.assert_array_equal(arr, after[name].data)


def test_mask_policy_moves_only_masked_entries():
    cfg = tiny_config(policy=FineTunePolicy("mask", alpha=0.1, mask_seed=2), epochs=1)
    ds = load_or_generate_dataset(cfg)
    model = build_model(cfg, ds)
    before = {e.name: model.params[e.name].data.copy()
              for e in model.attached.partition.entries if e.mask is not None}
    result = train(cfg, ds)
    for entry in result.model.attached.partition.entries:
        if entry.mask is None:
            continue
        now = result.model.params[entry.name].data
        was = before[entry.name]
        np.testing.assert_array_equal(now[entry.mask == 0], was[entry.mask == 0])
        assert np.any(now[entry.mask == 1] != was[entry.mask == 1])
        assert int(entry.mask.sum()) == int(round(0.1 * entry.total))


def test_nan_loss_aborts_with_step():
    cfg = tiny_config(head_kind="linear", head_init="zero", lr=1e14, epochs=2)
    with pytest.raises(RuntimeError, match="epoch"):
        train(cfg)


def test_pretrain_zero_epochs_equals_initialization(tmp_path):
    cfg = tiny_config(epochs=0, imbalance=1.0, out_dir=str(tmp_path / "pre"))
    result = pretrain_backbone(cfg)
    ckpt = load_checkpoint(result.checkpoint_path)
    fresh = init_backbone_params(cfg.spec(), seed=cfg.seed, dtype=np.float32)
    assert set(ckpt.arrays.keys()) == set(fresh.keys())
    for name, t in fresh.items():
        np.testing.assert_array_equal(ckpt.arrays[name], t.data)


def test_pretrain_learns_balanced_source(tmp_path):
    cfg = tiny_config(
        epochs=10, n_max=20, imbalance=1.0, test_per_class=6,
        aug="none", out_dir=str(tmp_path / "pre"),
    )
    result = pretrain_backbone(cfg)
    assert result.metrics[-1]["overall"] > 3.0 / cfg.classes  # 3x chance
    assert result.checkpoint_path.endswith("backbone.lfck")


def test_pretrain_same_seed_bitwise(tmp_path):
    a = pretrain_backbone(tiny_config(imbalance=1.0, epochs=1, out_dir=str(tmp_path / "p1")))
    b = pretrain_backbone(tiny_config(imbalance=1.0, epochs=1, out_dir=str(tmp_path / "p2")))
    pa = open(a.checkpoint_path, "rb").read()
    pb = open(b.checkpoint_path, "rb").read()
    assert pa == pb


def test_pretrain_rejects_imbalanced_source():
    with pytest.raises(ConfigError):
        cfg = tiny_config(imbalance=1.0)
        ds = load_or_generate_dataset(tiny_config(imbalance=3.0))
        pretrain_backbone(cfg, ds)


def test_finetune_from_pretrained_backbone(tmp_path):
    pre = pretrain_backbone(tiny_config(imbalance=1.0, epochs=2, seed=7, out_dir=str(tmp_path / "pre")))
    cfg = tiny_config(backbone_path=pre.checkpoint_path, seed=8, epochs=1)
    ds = load_or_generate_dataset(cfg)
    model = build_model(cfg, ds)
    loaded = load_checkpoint(pre.checkpoint_path)
    np.testing.assert_array_equal(model.params["embed.weight"].data, loaded.arrays["embed.weight"])


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny_config(epochs=1)
    result = train(cfg)
    ckpt = checkpoint_from_model(result.model, 1, 3, cfg.seed)
    path = tmp_path / "model.lfck"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.spec == result.model.spec
    assert loaded.epoch == 1 and loaded.step == 3 and loaded.seed == cfg.seed
    assert set(loaded.arrays) == set(ckpt.arrays)
    for name, arr in ckpt.arrays.items():
        np.testing.assert_array_equal(arr, loaded.arrays[name])

    rebuilt = model_from_checkpoint(loaded)
    for name, t in result.model.all_params().items():
        np.testing.assert_array_equal(t.data, rebuilt.all_params()[name].data)
    imgs = load_or_generate_dataset(cfg).test_images[:4]
    np.testing.assert_array_equal(result.model.predict_logits(imgs), rebuilt.predict_logits(imgs))


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_config(epochs=1)
    result = train(cfg)
    path = tmp_path / "model.lfck"
    save_checkpoint(path, checkpoint_from_model(result.model, 1, 1, 0))
    blob = path.read_bytes()
    bad = tmp_path / "trunc.lfck"
    bad.write_bytes(blob[: len(blob) - 33])
    with pytest.raises(IntegrityError):
        load_checkpoint(bad)
    garbage = tmp_path / "garbage.lfck"
    garbage.write_bytes(b"ABCD" + blob[4:])
    with pytest.raises(IntegrityError, match="magic"):
        load_checkpoint(garbage)


def test_checkpoint_rejects_mismatched_spec(tmp_path):
    cfg = tiny_config(epochs=1)
    result = train(cfg)
    path = tmp_path / "model.lfck"
    save_checkpoint(path, checkpoint_from_model(result.model, 1, 1, 0))
    other = BackboneSpec(blocks=2, dim=32, heads=2, patch=4, image_side=8, channels=1)
    with pytest.raises(IntegrityError, match="embed.weight"):
        load_checkpoint(path, expect_spec=other)


def test_checkpoint_scalar_array_roundtrip(tmp_path):
    # the learnable scaling parameter is a 0-d array
    spec = BackboneSpec(blocks=1, dim=8, heads=2, patch=4, image_side=8, channels=1)
    ckpt = Checkpoint(spec=spec, arrays={"block0.adaptformer.scale": np.float32(0.1).reshape(())},
                      head_meta={"kind": "cosine", "sigma": 25.0})
    path = tmp_path / "scalar.lfck"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.arrays["block0.adaptformer.scale"].shape == ()
    assert loaded.arrays["block0.adaptformer.scale"] == np.float32(0.1)


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "\n".join(
            [
                "# a desk run",
                "seed=3",
                "backbone.blocks=2",
                "backbone.dim=16",
                "backbone.heads=2",
                "backbone.patch=4",
                "data.classes=3",
                "data.n_max=9",
                "data.imbalance=3",
                "data.test_per_class=2",
                "data.image_side=8",
                "data.channels=1",
                "policy.kind=lora",
                "policy.r=2",
                "head.kind=cosine",
                "head.sigma=25",
                "head.init=class_mean",
                "loss=la",
                "train.epochs=2",
                "train.batch_size=4",
                "aug.kind=mda",
                "aug.g=convex",
                "tte.enabled=false",
            ]
        )
    )
    cfg = config_from_file(path)
    assert cfg.seed == 3
    assert cfg.policy.kind == "lora" and cfg.policy.r == 2
    assert cfg.dim == 16 and cfg.classes == 3
    assert cfg.tte is False


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config_from_file(tmp_path / "missing.cfg")

    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense.key=1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_file(bad)

    weird = tmp_path / "weird.cfg"
    weird.write_text("train.epochs=banana\n")
    with pytest.raises(ConfigError, match="bad value"):
        config_from_file(weird)

    noeq = tmp_path / "noeq.cfg"
    noeq.write_text("just a line\n")
    with pytest.raises(ConfigError, match="key=value"):
        config_from_file(noeq)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        tiny_config(loss="focal").validate()
    with pytest.raises(ConfigError):
        tiny_config(head_init="semantic").validate()  # no prototype path
    with pytest.raises(ConfigError):
        tiny_config(dim=10, heads=4).validate()
    with pytest.raises(ConfigError):
        tiny_config(data_path="/nowhere/data.lfds").validate()
