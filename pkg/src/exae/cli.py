"""Command-line entry point.

Every subcommand reads one JSON config file (--config); anything omitted
falls back to the defaults below. The schema mirrors DEFAULT_CONFIG:

  data:       source ("synth" | "idx" | "image_dir") plus its parameters,
              and the per-class split settings
  stack:      sizes is the dimension chain input -> ... -> latent, one
              autoencoder level per consecutive pair; shared level
              hyperparameters sit beside it, per-level overrides go in
              "levels" (list of objects with any AEConfig field)
  finetune:   band (allowed weight-norm-ratio deviation), norm_order,
              epochs, lr, batch_size, excl_weight, n_neighbors
  eval:       knn_k and metric
  experiment: trials and base_seed
  output:     dir for metrics/checkpoints

Subcommands: synth, train, stack, finetune, eval, experiment, gradcheck.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autoencoder import AEConfig, build_model, train
from .dataio import Dataset, SplitSpec, save_idx, split_per_class
from .evalharness import (
    DataSpec,
    ExperimentConfig,
    accuracy,
    extract_features,
    knn_classify,
    load_checkpoint,
    load_data,
    run_experiment,
    save_checkpoint,
    write_metrics,
    MetricsRecord,
)
from .stacking import StackConfig, assemble, fine_tune, train_stack

DEFAULT_CONFIG = {
    "data": {
        "source": "synth",
        "classes": 3,
        "dim": 32,
        "per_class": 100,
        "spread": 0.12,
        "synth_seed": 0,
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
        "root": None,
        "per_class_test": None,
        "split": {"per_class_train": 10, "seed": 0, "mirror_train": False},
    },
    "stack": {
        "sizes": None,  # default: [input dim, 512, 256, 128] -> 3 levels
        "hidden_activation": "relu",
        "latent_activation": "relu",
        "output_activation": "sigmoid",
        "excl_weight": 7.0,
        "n_neighbors": 6,
        "lr": 0.05,
        "epochs": 50,
        "batch_size": 32,
        "seed": 0,
        "loss_reduction": "mean",
        "mean_grad": "full",
        "levels": None,
    },
    "finetune": {
        "band": 0.6,
        "norm_order": 2,
        "epochs": 50,
        "lr": 0.05,
        "batch_size": 32,
        "seed": 0,
        "excl_weight": 0.0,
        "n_neighbors": 6,
    },
    "eval": {"knn_k": 1, "metric": "euclidean"},
    "experiment": {"trials": 10, "base_seed": 0},
    "output": {"dir": "out"},
}

DEFAULT_STACK_TAIL = [512, 256, 128]


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as f:
        user = json.load(f)
    return _merge(DEFAULT_CONFIG, user)


def data_spec_from(cfg: dict) -> DataSpec:
    d = cfg["data"]
    return DataSpec(
        source=d["source"],
        classes=d["classes"],
        dim=d["dim"],
        per_class=d["per_class"],
        spread=d["spread"],
        synth_seed=d["synth_seed"],
        images=d["images"],
        labels=d["labels"],
        test_images=d["test_images"],
        test_labels=d["test_labels"],
        root=d["root"],
        per_class_test=d["per_class_test"],
    )


def split_spec_from(cfg: dict) -> SplitSpec:
    s = cfg["data"]["split"]
    return SplitSpec(
        per_class_train=s["per_class_train"], seed=s["seed"], mirror_train=s["mirror_train"]
    )


def level_configs_from(cfg: dict, input_dim: int) -> list:
    """One AEConfig per consecutive size pair, with optional overrides."""
    st = cfg["stack"]
    sizes = st["sizes"] or [input_dim] + DEFAULT_STACK_TAIL
    if sizes[0] != input_dim:
        raise ValueError(f"stack sizes start at {sizes[0]} but data dim is {input_dim}")
    shared = {
        key: st[key]
        for key in (
            "hidden_activation",
            "latent_activation",
            "excl_weight",
            "n_neighbors",
            "lr",
            "epochs",
            "batch_size",
            "seed",
            "loss_reduction",
            "mean_grad",
        )
    }
    overrides = st["levels"] or [{}] * (len(sizes) - 1)
    if len(overrides) != len(sizes) - 1:
        raise ValueError(
            f"{len(overrides)} level overrides for {len(sizes) - 1} levels"
        )
    levels = []
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        fields = dict(shared)
        # level 1 reconstructs [0,1] pixels; deeper levels reconstruct codes
        fields["output_activation"] = st["output_activation"] if k == 0 else st["latent_activation"]
        fields.update(overrides[k])
        fields.setdefault("layer_sizes", [a, b])
        levels.append(AEConfig(**fields))
    return levels


def stack_config_from(cfg: dict, input_dim: int) -> StackConfig:
    ft = cfg["finetune"]
    return StackConfig(
        levels=level_configs_from(cfg, input_dim),
        band=ft["band"],
        norm_order=ft["norm_order"],
        finetune_epochs=ft["epochs"],
        finetune_lr=ft["lr"],
        finetune_batch_size=ft["batch_size"],
        finetune_seed=ft["seed"],
        finetune_excl_weight=ft["excl_weight"],
        finetune_neighbors=ft["n_neighbors"],
    )


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_test(cfg: dict):
    """Load data and produce (train, test_or_None) per the split settings."""
    data, test = load_data(data_spec_from(cfg))
    if test is not None:
        return data, test
    if data.labels is not None and cfg["data"]["split"]["per_class_train"]:
        return split_per_class(data, split_spec_from(cfg))
    return data, None


def cmd_synth(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    data, _ = load_data(data_spec_from(cfg))
    n, dim = data.n, data.dim
    fixture = Dataset(examples=data.examples, labels=data.labels, image_shape=(1, dim))
    save_idx(fixture, out / "synth-images-idx3-ubyte", out / "synth-labels-idx1-ubyte")
    print(f"wrote {n} rows of dim {dim} to {out}/synth-*-ubyte")
    return 0


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    train_set, _ = _train_test(cfg)
    levels = level_configs_from(cfg, train_set.dim)
    level_cfg = levels[0]
    model = build_model(level_cfg)
    model, history = train(model, level_cfg, train_set.examples)
    stacked = assemble([model], cfg["finetune"]["norm_order"])
    save_checkpoint(stacked, out / "model.ckpt", config=cfg)
    record = MetricsRecord(trial=0, pretrain=[history], finetune=[], accuracy=None, seconds=0.0)
    write_metrics([record], out / "train-metrics.csv")
    print(f"trained 1 level for {level_cfg.epochs} epochs; final loss {history[-1].total:.6f}"
          if history else "trained 0 epochs")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_stack(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    train_set, _ = _train_test(cfg)
    stack_cfg = stack_config_from(cfg, train_set.dim)
    stacked, histories = train_stack(stack_cfg, train_set.examples)
    save_checkpoint(stacked, out / "stack.ckpt", config=cfg)
    record = MetricsRecord(trial=0, pretrain=histories, finetune=[], accuracy=None, seconds=0.0)
    write_metrics([record], out / "stack-metrics.csv")
    print(f"pretrained {stack_cfg.n_levels} levels; checkpoint: {out / 'stack.ckpt'}")
    return 0


def cmd_finetune(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    stacked = load_checkpoint(args.checkpoint)
    train_set, _ = _train_test(cfg)
    stack_cfg = stack_config_from(cfg, train_set.dim)
    stacked, history = fine_tune(stacked, train_set.examples, stack_cfg)
    save_checkpoint(stacked, out / "finetuned.ckpt", config=cfg)
    record = MetricsRecord(trial=0, pretrain=[], finetune=history, accuracy=None, seconds=0.0)
    write_metrics([record], out / "finetune-metrics.csv")
    if history:
        ratios = history[-1].ratios
        print(f"fine-tuned {len(history)} epochs; ratio range "
              f"[{min(ratios):.4f}, {max(ratios):.4f}]")
    print(f"checkpoint: {out / 'finetuned.ckpt'}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    stacked = load_checkpoint(args.checkpoint)
    train_set, test_set = _train_test(cfg)
    if test_set is None:
        raise SystemExit("eval needs a test set: configure a split or explicit test files")
    train_feats = extract_features(stacked, train_set)
    test_feats = extract_features(stacked, test_set)
    predicted = knn_classify(
        train_feats, train_set.labels, test_feats, cfg["eval"]["knn_k"], cfg["eval"]["metric"]
    )
    acc = accuracy(predicted, test_set.labels)
    print(f"accuracy: {acc:.4f} ({test_set.n} queries, k={cfg['eval']['knn_k']})")
    return 0


def cmd_experiment(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    train_probe, _ = load_data(data_spec_from(cfg))
    exp = ExperimentConfig(
        data=data_spec_from(cfg),
        split=split_spec_from(cfg),
        stack=stack_config_from(cfg, train_probe.dim),
        trials=cfg["experiment"]["trials"],
        knn_k=cfg["eval"]["knn_k"],
        metric=cfg["eval"]["metric"],
        base_seed=cfg["experiment"]["base_seed"],
        out_dir=str(out),
    )
    records, summary = run_experiment(exp)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if not summary["partial"] else 1


def cmd_gradcheck(cfg: dict, args) -> int:
    from .autoencoder import fd_margins, grad_check_objective, model_parameters
    from .exclusivity import build_context
    from .numkit import grad_check

    worst_overall = 0.0
    for case in range(args.cases):
        # resample until the batch sits clear of clamp/relu kinks, where
        # central differences are meaningful
        for attempt in range(100):
            rng = np.random.default_rng(args.seed * 100_000 + case * 100 + attempt)
            dims = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 4)))]
            n = int(rng.integers(4, 9))
            batch = list(range(min(n, int(rng.integers(2, 7)))))
            data = rng.uniform(0.05, 0.95, size=(n, dims[0]))
            act = ("sigmoid", "relu", "identity")[int(rng.integers(0, 3))]
            weight = float(rng.uniform(0.5, 8.0))
            config = AEConfig(
                layer_sizes=dims,
                hidden_activation=act,
                latent_activation=act,
                excl_weight=weight,
                n_neighbors=min(3, n - 1),
                seed=int(rng.integers(0, 2**31)),
            )
            model = build_model(config)
            ctx = build_context(data, config.n_neighbors)
            kink, norm = fd_margins(model, config, ctx, data, batch)
            if kink > 1e-3 and norm > 0.05:
                break
        for reduction in ("mean", "sum"):
            for mean_grad in ("full", "stopped"):
                probe_cfg = AEConfig(
                    layer_sizes=dims,
                    hidden_activation=act,
                    latent_activation=act,
                    excl_weight=weight,
                    n_neighbors=config.n_neighbors,
                    loss_reduction=reduction,
                    mean_grad=mean_grad,
                    seed=config.seed,
                )
                loss_fn = grad_check_objective(model, probe_cfg, ctx, data, batch)
                err = grad_check(loss_fn, model_parameters(model), epsilon=1e-5)
                worst_overall = max(worst_overall, err)
                print(f"case {case} {act} {reduction}/{mean_grad}: max rel err {err:.3e}")
    ok = worst_overall < args.tolerance
    print(f"worst: {worst_overall:.3e} ({'OK' if ok else 'FAIL'} at {args.tolerance:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exae",
        description="exclusivity-regularized autoencoders: train, stack, fine-tune, evaluate",
    )
    parser.add_argument("--config", help="path to a JSON config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write a synthetic Gaussian-blob fixture as IDX files")
    sub.add_parser("train", help="train a single autoencoder level")
    sub.add_parser("stack", help="pretrain all levels and assemble the deep model")
    p = sub.add_parser("finetune", help="fine-tune an assembled checkpoint under the norm band")
    p.add_argument("checkpoint")
    p = sub.add_parser("eval", help="extract features from a checkpoint and run k-NN")
    p.add_argument("checkpoint")
    sub.add_parser("experiment", help="run the full repeated-trial protocol")
    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--cases", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "stack": cmd_stack,
        "finetune": cmd_finetune,
        "eval": cmd_eval,
        "experiment": cmd_experiment,
        "gradcheck": cmd_gradcheck,
    }
    return handlers[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
