"""Command line entry points: train, eval, export-attn, export-embed, sweep-eta."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from .data import (
    impute_missing,
    load_ucr_tsv,
    split_merged,
    timestep_means,
    znormalize,
    znormalize_dataset,
)
from .data import fill_missing
from .model import (
    ForwardTrace,
    TrainConfig,
    conjunctive_pool,
    evaluate,
    load_checkpoint,
    predict_probabilities,
    row_provenance,
    save_checkpoint,
    select_shape_length,
    train,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "SOFTSHAPE_OUTPUT_DIR"
SWEEP_SPARSE_RATIOS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)


class ConfigError(Exception):
    pass


def _run_defaults() -> dict:
    defaults = {"dataset": None, "output_dir": "runs", "normalize": True}
    defaults.update(asdict(TrainConfig()))
    return defaults


def load_run_config(path: str, overrides: list[str]) -> dict:
    """JSON config with defaults for absent keys; unknown keys are rejected."""
    defaults = _run_defaults()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(loaded, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(loaded) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    config = {**defaults, **loaded}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in defaults:
            raise ConfigError(f"unknown config key in override: {key}")
        try:
            config[key] = json.loads(raw)
        except json.JSONDecodeError:
            config[key] = raw
    # One-epoch smoke runs should not be rejected by the warm-up default.
    if config["warmup_epochs"] > config["max_epochs"]:
        logger.info(
            "clamping warmup_epochs %d to max_epochs %d",
            config["warmup_epochs"],
            config["max_epochs"],
        )
        config["warmup_epochs"] = config["max_epochs"]
    return config


def build_train_config(run_config: dict) -> TrainConfig:
    fields = {k: run_config[k] for k in asdict(TrainConfig())}
    fields["inter_kernel_sizes"] = tuple(fields["inter_kernel_sizes"])
    try:
        config = TrainConfig(**fields)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return config


def _output_dir(run_config: dict) -> str:
    out = os.environ.get(OUTPUT_DIR_ENV, run_config["output_dir"])
    os.makedirs(out, exist_ok=True)
    return out


def _load_dataset(run_config: dict):
    if not run_config["dataset"]:
        raise ConfigError("config must set 'dataset'")
    return load_ucr_tsv(run_config["dataset"])


def write_metrics_csv(path: str, metrics) -> None:
    num_experts = len(metrics[0].expert_importance_share)
    num_blocks = len(metrics[0].shape_counts)
    header = ["epoch", "train_loss", "val_loss", "val_accuracy", "ce", "importance_loss", "load_loss"]
    header += [f"shapes_block{b + 1}" for b in range(num_blocks)]
    header += [f"expert{e}_importance_share" for e in range(num_experts)]
    header += [f"expert{e}_load_share" for e in range(num_experts)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for em in metrics:
            row = [em.epoch, em.train_loss, em.val_loss, em.val_accuracy, em.ce,
                   em.importance_loss, em.load_loss]
            row += list(em.shape_counts)
            row += list(em.expert_importance_share)
            row += list(em.expert_load_share)
            writer.writerow(row)


def _prepare_for_training(dataset, split, normalize):
    if normalize:
        dataset = znormalize_dataset(dataset)
    means = timestep_means(dataset, split.train)
    return impute_missing(dataset, split.train), means


def _prepare_values(raw_values: np.ndarray, meta: dict) -> np.ndarray:
    rows = []
    for row in np.atleast_2d(raw_values):
        if meta["normalize"]:
            row = znormalize(row)
        if meta["timestep_means"] is not None:
            row = fill_missing(row, meta["timestep_means"])
        rows.append(row)
    return np.stack(rows)


def cmd_train(args) -> int:
    try:
        run_config = load_run_config(args.config, args.overrides)
        config = build_train_config(run_config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        dataset = _load_dataset(run_config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2

    started = time.perf_counter()
    out_dir = _output_dir(run_config)
    split = split_merged(dataset, config.seed)
    prepared, means = _prepare_for_training(dataset, split, run_config["normalize"])

    if config.window is None:
        from dataclasses import replace

        chosen = select_shape_length(prepared, split, config)
        config = replace(config, window=chosen)
        logger.info("selected window %d on the validation set", chosen)

    net, metrics = train(prepared, split, config)
    test_records = [prepared.records[i] for i in split.test]
    test_accuracy = evaluate(net, test_records)
    elapsed = time.perf_counter() - started

    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.json"),
        net,
        timestep_means=means,
        normalize=run_config["normalize"],
    )
    last = metrics[-1]
    summary = {
        "dataset": dataset.name,
        "samples": dataset.sample_count,
        "series_length": dataset.series_length,
        "num_classes": dataset.num_classes,
        "window": config.window,
        "test_accuracy": test_accuracy,
        "best_epoch": net.trained_epoch,
        "epochs_trained": len(metrics),
        "wall_time_seconds": elapsed,
        "final_epoch_loss": {
            "train_loss": last.train_loss,
            "ce": last.ce,
            "importance_loss": last.importance_loss,
            "load_loss": last.load_loss,
            "aux_weight": config.aux_weight,
        },
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"test accuracy {test_accuracy:.4f} (window {config.window}, {elapsed:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    try:
        net, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    try:
        dataset = load_ucr_tsv(args.dataset)
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    if dataset.series_length != net.series_length:
        print(
            f"dataset error: series length {dataset.series_length} does not match "
            f"checkpoint ({net.series_length})",
            file=sys.stderr,
        )
        return 2

    if args.split == "all":
        indices = list(range(dataset.sample_count))
    else:
        split = split_merged(dataset, net.config.seed)
        indices = getattr(split, args.split)
    values = np.stack([dataset.records[i].values for i in indices])
    labels = np.array([dataset.records[i].label for i in indices])
    probs = predict_probabilities(net, _prepare_values(values, meta))
    accuracy = float((probs.argmax(axis=-1) == labels).mean())
    print(f"accuracy {accuracy:.4f} on {len(indices)} records ({args.split})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"accuracy": accuracy, "records": len(indices), "split": args.split}, fh)
    return 0


def cmd_export_attention(args) -> int:
    import torch

    try:
        net, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    try:
        dataset = load_ucr_tsv(args.dataset)
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    if not 0 <= args.index < dataset.sample_count:
        print(
            f"error: sample index {args.index} out of range [0, {dataset.sample_count})",
            file=sys.stderr,
        )
        return 1

    record = dataset.records[args.index]
    prepared = _prepare_values(record.values, meta)[0]
    trace = ForwardTrace()
    with torch.no_grad():
        net(torch.tensor(prepared, dtype=torch.float32), trace=trace)
    first = trace.blocks[0]
    scores = first.scores.tolist()

    window, stride = net.config.window, net.config.stride
    per_timestep: list[list[float]] = [[] for _ in range(net.series_length)]
    for j, score in enumerate(scores):
        for t in range(j * stride, j * stride + window):
            per_timestep[t].append(score)

    out_path = args.out or os.path.join(
        os.environ.get(OUTPUT_DIR_ENV, "."), f"attention_sample{args.index}.csv"
    )
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestep", "value", "score"])
        for t in range(net.series_length):
            covering = per_timestep[t]
            mean_score = sum(covering) / len(covering) if covering else ""
            writer.writerow([t, record.values[t], mean_score])
        if first.has_fused:
            fused_row = first.sparsified[-1]
            with torch.no_grad():
                fused_score = float(net.attention(fused_row))
            writer.writerow(["fused", "", fused_score])
    print(f"wrote {out_path}")
    return 0


def cmd_export_embeddings(args) -> int:
    import torch

    stages = ("input", "intra", "inter", "output")
    if args.stage not in stages:
        print(f"error: unknown stage {args.stage!r}; choose from {stages}", file=sys.stderr)
        return 1
    try:
        net, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    try:
        dataset = load_ucr_tsv(args.dataset)
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    if args.stage == "intra" and net.config.no_intra:
        print("error: checkpoint was trained without the intra-shape experts", file=sys.stderr)
        return 1
    if args.stage == "inter" and net.config.no_inter:
        print("error: checkpoint was trained without the shared expert", file=sys.stderr)
        return 1

    out_path = args.out or os.path.join(
        os.environ.get(OUTPUT_DIR_ENV, "."), f"embeddings_{args.stage}.csv"
    )
    dim = net.config.dim
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "shape", "label", *[f"e{i}" for i in range(dim)]])
        for start in range(0, dataset.sample_count, 64):
            batch = dataset.records[start : start + 64]
            values = _prepare_values(np.stack([r.values for r in batch]), meta)
            trace = ForwardTrace()
            with torch.no_grad():
                net(torch.tensor(values, dtype=torch.float32), trace=trace)
            last = trace.blocks[-1]
            if args.stage == "input":
                rows = trace.input_embeddings
                labels_per_sample = [list(range(rows.shape[1]))] * len(batch)
            else:
                rows = {"intra": last.intra, "inter": last.inter, "output": last.output}[
                    args.stage
                ]
                labels_per_sample = [
                    row_provenance(trace, i)[-1] for i in range(len(batch))
                ]
            for i, record in enumerate(batch):
                for r, shape_label in enumerate(labels_per_sample[i]):
                    name = "fused" if shape_label is None else shape_label
                    writer.writerow(
                        [start + i, name, record.label, *rows[i, r].tolist()]
                    )
    print(f"wrote {out_path}")
    return 0


def cmd_sweep_eta(args) -> int:
    from dataclasses import replace

    try:
        run_config = load_run_config(args.config, args.overrides)
        config = build_train_config(run_config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        dataset = _load_dataset(run_config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2

    out_dir = _output_dir(run_config)
    split = split_merged(dataset, config.seed)
    prepared, _ = _prepare_for_training(dataset, split, run_config["normalize"])
    if config.window is None:
        config = replace(config, window=select_shape_length(prepared, split, config))
        logger.info("selected window %d for the sweep", config.window)

    test_records = [prepared.records[i] for i in split.test]
    val_records = [prepared.records[i] for i in split.val]
    rows = []
    for ratio in SWEEP_SPARSE_RATIOS:
        eta = round(1.0 - ratio, 12)
        net, metrics = train(prepared, split, replace(config, eta=eta))
        test_acc = evaluate(net, test_records)
        val_acc = evaluate(net, val_records)
        rows.append([ratio, eta, test_acc, val_acc, net.trained_epoch, len(metrics)])
        logger.info("sparse ratio %.1f: test accuracy %.4f", ratio, test_acc)

    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sparse_ratio", "eta", "test_accuracy", "val_accuracy", "best_epoch", "epochs_trained"]
        )
        writer.writerows(rows)
    print(f"wrote {sweep_path}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="softshape", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics/checkpoint/summary")
    p_train.add_argument("--config", required=True, help="JSON run configuration")
    p_train.add_argument("--set", action="append", default=[], dest="overrides",
                         metavar="KEY=VALUE", help="override a config key")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p_eval.add_argument("--out", default=None, help="optional JSON result path")
    p_eval.set_defaults(func=cmd_eval)

    p_attn = sub.add_parser("export-attn", help="per-timestep attention scores for one sample")
    p_attn.add_argument("--checkpoint", required=True)
    p_attn.add_argument("--dataset", required=True)
    p_attn.add_argument("--index", type=int, required=True)
    p_attn.add_argument("--out", default=None)
    p_attn.set_defaults(func=cmd_export_attention)

    p_embed = sub.add_parser("export-embed", help="per-shape embeddings at a pipeline stage")
    p_embed.add_argument("--checkpoint", required=True)
    p_embed.add_argument("--dataset", required=True)
    p_embed.add_argument("--stage", required=True)
    p_embed.add_argument("--out", default=None)
    p_embed.set_defaults(func=cmd_export_embeddings)

    p_sweep = sub.add_parser("sweep-eta", help="train across the sparse-ratio grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--set", action="append", default=[], dest="overrides",
                         metavar="KEY=VALUE")
    p_sweep.set_defaults(func=cmd_sweep_eta)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
