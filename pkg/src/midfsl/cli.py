"""Command-line entry points: train, eval, pad, make-synth, and plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
The environment variable MIDFSL_SEED, when set, overrides the seed from
config files and flags. Every command writes the fully resolved settings it
ran with next to its outputs, so a run can be reproduced from its artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
from pathlib import Path

import numpy as np
import yaml

from .data import (
    SynthSpec,
    channel_stats,
    generate_synthetic,
    load_manifest,
    load_split,
)
from .domaindist import compute_pad
from .episodic import (
    FEATURE_MODES,
    evaluate,
    extract_features,
    read_results,
    recommend_feature_mode,
    write_results,
)
from .exceptions import ConfigError, MidFslError
from .network import BackboneConfig
from .objectives import LossConfig
from .trainer import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train_base,
    train_baseline,
)

TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "seed": 0,
    "baseline": False,
    "val_every": 0,
    "val_episodes": 50,
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "learning_rate": 0.05,
        "milestones": [],
        "decay": 0.1,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "augment": True,
        "mid_grad_into_backbone": True,
    },
    "loss": {
        "temperature": 10.0,
        "alpha": 0.1,
        "lambda1": 0.5,
        "lambda2": 0.5,
        "splits": 4,
        "neighbors": 4,
    },
    "backbone": {
        "block_widths": [16, 32, 64, 128],
        "input_shape": [32, 32, 1],
        "tap_layers": [1, 2],
    },
    "episodic": {
        "way": 5,
        "shot": 5,
        "queries": 15,
        "episodes": 600,
        "feature_mode": "near",
    },
}

SYNTH_DEFAULTS = {
    "num_base_classes": 8,
    "num_novel_classes": 8,
    "samples_per_class": 30,
    "image_size": 32,
    "domain_style": "texture",
    "noise": 0.02,
    "seed": 0,
}


def merge_config(defaults: dict, given: dict, prefix: str = "") -> dict:
    """Overlay `given` onto `defaults`, rejecting keys not in the schema."""
    merged = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            sub = given.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config key {prefix}{key} must be a map")
            merged[key] = merge_config(default, sub, f"{prefix}{key}.")
        elif key in given:
            merged[key] = given[key]
        else:
            merged[key] = default
    for key in given:
        if key not in defaults:
            raise ConfigError(f"unknown config key: {prefix}{key}")
    return merged


def load_config(path, defaults: dict) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root of {path} must be a map")
    return merge_config(defaults, raw)


def _apply_seed_override(seed: int) -> int:
    value = os.environ.get("MIDFSL_SEED")
    if value is None:
        return seed
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"MIDFSL_SEED must be an integer, got {value!r}")


def write_effective(config: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config, sort_keys=False))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config(config: dict) -> TrainConfig:
    t, b, l = config["train"], config["backbone"], config["loss"]
    try:
        return TrainConfig(
            loss=LossConfig(**l),
            backbone=BackboneConfig(
                block_widths=tuple(b["block_widths"]),
                input_shape=tuple(b["input_shape"]),
                tap_layers=tuple(b["tap_layers"]),
            ),
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            milestones=tuple(t["milestones"]),
            decay=t["decay"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            augment=t["augment"],
            mid_grad_into_backbone=t["mid_grad_into_backbone"],
            seed=config["seed"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from exc


def cmd_train(args) -> int:
    config = load_config(args.config, TRAIN_DEFAULTS)
    if config["data"] is None or config["out"] is None:
        raise ConfigError("config must set both 'data' and 'out'")
    config["seed"] = _apply_seed_override(config["seed"])
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(config)

    manifest = load_manifest(config["data"])
    size = tuple(cfg.backbone.input_shape[:2])
    base = load_split(manifest, "base", size=size)

    val_fn = None
    if config["val_every"] > 0 and manifest.classes_in("val"):
        val = load_split(manifest, "val", size=size)
        ep = config["episodic"]
        norm_mean, norm_std = channel_stats(base.images)

        def val_fn(model):
            snapshot = TrainState(
                model=model, loss=cfg.loss, class_names=base.class_names,
                norm_mean=norm_mean, norm_std=norm_std, epoch=0, history=[],
            )
            summary = evaluate(
                snapshot, val, way=min(ep["way"], val.num_classes),
                shot=ep["shot"], queries=ep["queries"],
                episodes=config["val_episodes"],
                feature_mode=ep["feature_mode"], seed=config["seed"],
            )
            return summary.mean

    trainer = train_baseline if config["baseline"] else train_base
    write_effective(config, out / "effective_config.yaml")
    state = trainer(cfg, base, log_path=out / "train_log.jsonl",
                    val_fn=val_fn, val_every=config["val_every"])
    path = save_checkpoint(state, out / "checkpoint.pt")
    print(f"checkpoint written to {path}")
    print(f"epoch log written to {out / 'train_log.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    seed = _apply_seed_override(args.seed)
    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    size = tuple(state.model.config.input_shape[:2])
    dataset = load_split(manifest, args.split, size=size)

    extractor = None
    if args.oracle_features:
        labels = dataset.labels
        way = dataset.num_classes

        def extractor(images):
            return np.eye(way)[labels]

    if args.recommend_mode:
        base = load_split(manifest, "base", size=size)
        pad = compute_pad(
            extract_features(state, base.images, "final"),
            extract_features(state, dataset.images, "final"),
            seed=seed,
        )
        print(f"PAD(base, {args.split}) = {pad.pad:.3f}; "
              f"recommended mode: {recommend_feature_mode(pad.pad)}")

    summary = evaluate(
        state, dataset, way=args.way, shot=args.shot, queries=args.query,
        episodes=args.episodes, feature_mode=args.mode, seed=seed,
        extractor=extractor,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if extractor is not None:
        feature_dim = dataset.num_classes
    elif args.mode in ("distant", "mid_concat"):
        feature_dim = sum(state.model.config.mid_dims)
    else:
        feature_dim = state.model.config.feature_dim
    fingerprint = {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "split": args.split,
        "mode": args.mode,
        "way": args.way,
        "shot": args.shot,
        "queries": args.query,
        "episodes": args.episodes,
        "seed": seed,
        "feature_dim": feature_dim,
        "oracle_features": bool(args.oracle_features),
    }
    results_path = out / f"results_{args.mode}.jsonl"
    write_results(summary, results_path, fingerprint)
    write_effective(fingerprint, out / "effective_eval.yaml")
    print(f"results written to {results_path}")
    print(f"{summary.mean * 100:.2f} ± {summary.ci95 * 100:.2f}")
    return 0


# ---------------------------------------------------------------------------
# pad
# ---------------------------------------------------------------------------

def cmd_pad(args) -> int:
    seed = _apply_seed_override(args.seed)
    state = load_checkpoint(args.checkpoint)
    size = tuple(state.model.config.input_shape[:2])
    corpus_a = load_split(load_manifest(args.data_a), args.split_a, size=size)
    corpus_b = load_split(load_manifest(args.data_b), args.split_b, size=size)
    result = compute_pad(
        extract_features(state, corpus_a.images, "final"),
        extract_features(state, corpus_b.images, "final"),
        folds=args.folds, seed=seed,
    )
    folds = ", ".join(f"{e:.3f}" for e in result.fold_errors)
    print(f"PAD = {result.pad:.3f}")
    print(f"balanced error = {result.balanced_error:.3f} (folds: {folds})")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        record = {
            "pad": result.pad,
            "balanced_error": result.balanced_error,
            "fold_errors": list(result.fold_errors),
        }
        (out / "pad.json").write_text(json.dumps(record, indent=2) + "\n")
        write_effective({
            "checkpoint": str(args.checkpoint),
            "data_a": str(args.data_a), "split_a": args.split_a,
            "data_b": str(args.data_b), "split_b": args.split_b,
            "folds": args.folds, "seed": seed,
        }, out / "effective_pad.yaml")
        print(f"record written to {out / 'pad.json'}")
    return 0


# ---------------------------------------------------------------------------
# make-synth
# ---------------------------------------------------------------------------

def cmd_make_synth(args) -> int:
    config = load_config(args.spec, SYNTH_DEFAULTS)
    config["seed"] = _apply_seed_override(config["seed"])
    spec = SynthSpec(**config)
    manifest = generate_synthetic(spec, args.out)
    write_effective(config, Path(args.out) / "effective_spec.yaml")
    print(f"wrote {manifest.count('base')} base and "
          f"{manifest.count('novel')} novel images under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, means, cis = [], [], []
    for path in args.results:
        parsed = read_results(path)
        summary = parsed["summary"]
        fingerprint = summary.get("fingerprint", {})
        labels.append(fingerprint.get("mode", Path(path).stem))
        means.append(summary["mean"] * 100.0)
        cis.append(summary["ci95"] * 100.0)

    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(labels), 4.0))
    positions = np.arange(len(labels))
    ax.bar(positions, means, yerr=cis, capsize=4, color="#4878a8")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    write_effective(
        {"results": [str(p) for p in args.results], "out": str(args.out)},
        Path(args.out).with_suffix(".yaml"),
    )
    print(f"chart written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midfsl",
        description="Few-shot recognition with residual-prediction training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the base split of a dataset")
    p.add_argument("config", help="YAML run configuration")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic novel-class evaluation")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset root with split.tsv")
    p.add_argument("--split", default="novel", choices=["base", "val", "novel"])
    p.add_argument("--mode", default="near", choices=list(FEATURE_MODES))
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("--recommend-mode", action="store_true",
                   help="print the PAD against the base split and the "
                        "suggested feature mode")
    p.add_argument("--oracle-features", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pad", help="proxy-A-distance between two corpora")
    p.add_argument("checkpoint")
    p.add_argument("data_a")
    p.add_argument("data_b")
    p.add_argument("--split-a", default="base",
                   choices=["base", "val", "novel"])
    p.add_argument("--split-b", default="novel",
                   choices=["base", "val", "novel"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pad)

    p = sub.add_parser("make-synth", help="generate a synthetic dataset")
    p.add_argument("spec", help="YAML synthesis spec")
    p.add_argument("out", help="output dataset directory")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("plot", help="bar chart of evaluation results")
    p.add_argument("results", nargs="+", help="results files from eval")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}")
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}")
        return 1
    except MidFslError as exc:
        print(f"error: {exc}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
