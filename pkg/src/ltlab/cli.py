"""Command-line interface for the long-tail fine-tuning lab.

Subcommands: gen-data, pretrain, train, eval, diagnose, params, prop1,
sweep. Exit codes: 0 success, 2 configuration or usage error, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import class_templates, generate_longtail, load_dataset, save_dataset
from .harness import (
    ConfigError,
    IntegrityError,
    config_from_file,
    load_checkpoint,
    model_from_checkpoint,
    pretrain_backbone,
    train,
)
from .heads import PrototypeSet, save_prototypes, weight_norms
from .inference import evaluate, intraclass_shift
from .losses import estimate_prior, prop1_simulate
from .peft import FineTunePolicy, count_policy_params, default_bottleneck_dim
from .vit import BackboneSpec, count_params

SPEC_PRESETS = {
    "vitb16": BackboneSpec(blocks=12, dim=768, heads=12, patch=16, image_side=224, channels=3),
    "vitl14": BackboneSpec(blocks=24, dim=1024, heads=16, patch=14, image_side=224, channels=3),
    "desk": BackboneSpec(blocks=2, dim=32, heads=4, patch=4, image_side=16, channels=3),
    "mini": BackboneSpec(blocks=2, dim=16, heads=2, patch=4, image_side=8, channels=1),
}


def _print_record(record: dict) -> None:
    for key, value in record.items():
        print(f"{key}={value}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run configuration file (key=value lines)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="override the output directory")


def _load_config(args) -> "RunConfig":
    if not args.config:
        raise ConfigError("this subcommand needs --config")
    cfg = config_from_file(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg.validate()


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = generate_longtail(
        num_classes=args.classes,
        n_max=args.n_max,
        imbalance=args.imbalance,
        test_per_class=args.test_per_class,
        image_side=args.image_side,
        seed=args.seed or 0,
        channels=args.channels,
        noise=args.noise,
    )
    data_path = out_dir / "data.lfds"
    save_dataset(data_path, ds)
    print(f"dataset={data_path}")
    print(f"train_samples={len(ds.train_labels)}")
    print(f"test_samples={len(ds.test_labels)}")
    print(f"counts={','.join(str(c) for c in ds.class_counts)}")
    print(f"groups={','.join(ds.groups)}")

    if args.prototype_dim:
        rng = np.random.default_rng(np.random.SeedSequence(((args.seed or 0), 0x9607)))
        templates = class_templates(args.classes, args.image_side, args.seed or 0, args.channels)
        flat = templates.reshape(args.classes, -1)
        d_t = flat.shape[1]
        d_s = args.prototype_latent
        q, _ = np.linalg.qr(rng.normal(size=(d_t, d_s)))
        p_i = rng.normal(size=(args.prototype_dim, d_s)) / np.sqrt(d_s)
        proto_path = out_dir / "prototypes.lftp"
        save_prototypes(proto_path, PrototypeSet(flat, q, p_i))
        print(f"prototypes={proto_path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    result = pretrain_backbone(cfg)
    for record in result.metrics:
        print(json.dumps(record))
    if result.checkpoint_path:
        print(f"backbone={result.checkpoint_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg)
    for record in result.metrics:
        print(json.dumps(record))
    if result.checkpoint_path:
        print(f"checkpoint={result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, use_tte=args.tte, expand=args.expand, workers=args.workers)
    _print_record(report.as_record())
    return 0


def cmd_diagnose(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = load_dataset(args.data)
    out_dir = Path(args.out or "diagnostics")
    out_dir.mkdir(parents=True, exist_ok=True)

    def features(images):
        batches = [model.predict_features(images[s : s + 64]) for s in range(0, len(images), 64)]
        return np.concatenate(batches, axis=0)

    train_feats = features(dataset.train_images)
    test_feats = features(dataset.test_images)
    diag = intraclass_shift(
        train_feats, dataset.train_labels, test_feats, dataset.test_labels, dataset.num_classes
    )

    with open(out_dir / "interclass.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"class_{k}" for k in range(dataset.num_classes)])
        writer.writerows(diag.similarity.tolist())

    with open(out_dir / "intraclass.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "split", "similarity"])
        for k in range(dataset.num_classes):
            for value in diag.train_sims[k]:
                writer.writerow([k, "train", value])
            for value in diag.test_sims[k]:
                writer.writerow([k, "test", value])

    norms = weight_norms(model.head.params["head.weight"])
    with open(out_dir / "weight_norms.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "train_count", "group", "norm"])
        for k in range(dataset.num_classes):
            writer.writerow([k, dataset.class_counts[k], dataset.groups[k], norms[k]])

    with open(out_dir / "shift.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "train_count", "group", "shift"])
        for k in range(dataset.num_classes):
            writer.writerow([k, dataset.class_counts[k], dataset.groups[k], diag.shift[k]])

    summary = {
        "tail_mean_shift": diag.tail_shift(dataset.groups),
        "mean_shift": float(np.nanmean(diag.shift)),
        "mean_offdiag_similarity": float(
            (diag.similarity.sum() - dataset.num_classes)
            / max(dataset.num_classes * (dataset.num_classes - 1), 1)
        ),
    }
    with open(out_dir / "summary.txt", "w") as fh:
        for key, value in summary.items():
            fh.write(f"{key}={value}\n")
    _print_record(summary)
    print(f"out={out_dir}")
    return 0


def _spec_from_args(args) -> BackboneSpec:
    if args.spec:
        if args.spec not in SPEC_PRESETS:
            raise ConfigError(
                f"unknown backbone preset {args.spec!r}; choose from {sorted(SPEC_PRESETS)}"
            )
        return SPEC_PRESETS[args.spec]
    return BackboneSpec(
        blocks=args.blocks,
        dim=args.dim,
        heads=args.heads,
        patch=args.patch,
        image_side=args.image_side,
        channels=args.channels,
    )


def cmd_params(args) -> int:
    spec = _spec_from_args(args)
    total, rows = count_params(spec)
    print(f"backbone_total={total:,} ({total / 1e6:.2f}M)")
    if args.breakdown:
        for name, count in rows:
            print(f"  {name}={count:,}")
    if args.policy:
        policy_kw = {"kind": args.policy}
        if args.r is not None:
            policy_kw["r"] = args.r
        if args.alpha is not None:
            policy_kw["alpha"] = args.alpha
        if args.k is not None:
            policy_kw["k"] = args.k
        if args.p is not None:
            policy_kw["p"] = args.p
        try:
            policy = FineTunePolicy(**policy_kw)
            learned = count_policy_params(policy, spec, args.classes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        classifier = args.classes * spec.dim
        if policy.kind in ("adapter", "lora", "adaptformer") and policy.r is None:
            print(f"bottleneck_r={default_bottleneck_dim(args.classes, spec.blocks)}")
        print(f"policy_params={learned:,} ({learned / 1e6:.2f}M)")
        print(f"classifier_params={classifier:,} ({classifier / 1e6:.2f}M)")
        combined = learned + classifier
        print(f"policy_plus_classifier={combined:,} ({combined / 1e6:.2f}M)")
    return 0


def cmd_prop1(args) -> int:
    report = prop1_simulate(
        args.mu_source,
        args.sigma_source,
        args.mu_target,
        args.sigma_target,
        estimate_prior(args.prior_counts),
        quadrature_points=args.points,
    )
    _print_record(report.as_record())
    return 0


_SWEEP_PARAMS = ("alpha", "r", "sigma", "expand", "g", "k")


def _apply_sweep_value(cfg, param: str, raw: str):
    if param == "alpha":
        return replace(cfg, policy=FineTunePolicy("mask", alpha=float(raw), mask_seed=cfg.policy.mask_seed))
    if param == "r":
        return replace(cfg, policy=replace(cfg.policy, r=int(raw)))
    if param == "sigma":
        return replace(cfg, sigma=float(raw))
    if param == "expand":
        return replace(cfg, tte=True, expand=int(raw))
    if param == "g":
        return replace(cfg, aug="mda", aug_g=raw)
    return replace(cfg, policy=FineTunePolicy("partial", k=int(raw)))


def cmd_sweep(args) -> int:
    base = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(args.out or base.out_dir or "sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in values:
        for seed in range(args.seeds):
            cfg = _apply_sweep_value(base, args.param, raw)
            cfg = replace(cfg, seed=base.seed + seed, out_dir=None)
            cfg.validate()
            result = train(cfg)
            last = result.metrics[-1]
            rows.append(
                {
                    "param": args.param,
                    "value": raw,
                    "seed": cfg.seed,
                    "train_loss": last["train_loss"],
                    "overall": last["overall"],
                    "head": last["head"],
                    "medium": last["medium"],
                    "tail": last["tail"],
                }
            )
            print(json.dumps(rows[-1]))
    path = out_dir / f"sweep_{args.param}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep={path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tail dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--n-max", type=int, default=100)
    p.add_argument("--imbalance", type=float, default=100.0)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--image-side", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--prototype-dim", type=int, help="emit a prototype file for this feature dim")
    p.add_argument("--prototype-latent", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the foundation backbone on balanced data")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run a fine-tuning job")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tte", action="store_true")
    p.add_argument("--expand", type=int, default=24)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="emit representation diagnostics for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("params", help="parameter accounting for a backbone and policy")
    _common(p)
    p.add_argument("--spec", help=f"backbone preset: {', '.join(sorted(SPEC_PRESETS))}")
    p.add_argument("--blocks", type=int, default=12)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--image-side", type=int, default=224)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--policy", choices=("frozen", "classifier_only", "full", "partial", "mask",
                                        "bitfit", "vpt", "adapter", "lora", "adaptformer"))
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--r", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--breakdown", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("prop1", help="simulate prediction bias from shifted conditionals")
    _common(p)
    p.add_argument("--mu-source", type=float, nargs=2, default=[0.0, 2.0])
    p.add_argument("--sigma-source", type=float, nargs=2, default=[1.0, 1.0])
    p.add_argument("--mu-target", type=float, nargs=2, default=[0.0, 2.0])
    p.add_argument("--sigma-target", type=float, nargs=2, default=[1.0, 1.0])
    p.add_argument("--prior-counts", type=int, nargs=2, default=[90, 10])
    p.add_argument("--points", type=int, default=20001)
    p.set_defaults(func=cmd_prop1)

    p = sub.add_parser("sweep", help="grid over one knob, training once per value")
    _common(p)
    p.add_argument("--param", choices=_SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
