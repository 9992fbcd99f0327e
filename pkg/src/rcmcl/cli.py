"""Command-line entry point: one executable, one subcommand per pipeline step.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
Verbosity is controlled by the RCMCL_LOG environment variable
(error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, generate, load_dataset, load_manifest, save_dataset, split
from .fusion import gate_trace, gate_trace_csv
from .linalg import NumericError
from .losses import info_nce_pair  # noqa: F401  (re-exported for scripts)
from .model import ENCODERS, load_checkpoint, project, save_checkpoint
from .robustness import (
    ablation_csv,
    corruption_csv,
    dropout_csv,
    run_ablation_matrix,
    run_corruption_suite,
    run_dropout_suite,
)
from .training import (
    evaluate,
    full_finetune,
    history_csv,
    linear_probe,
    pretrain,
)

log = logging.getLogger("rcmcl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _setup_logging() -> None:
    level = os.environ.get("RCMCL_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_splits(data_dir: str):
    """Returns (train, test) per the split ids stored in the manifest."""
    dataset = load_dataset(data_dir)
    manifest = load_manifest(data_dir)
    ids = manifest.get("split")
    if ids is None:
        raise ConfigError(f"dataset at {data_dir} has no stored split")
    return dataset.subset(ids["train"]), dataset.subset(ids["test"])


def _check_digest(meta: dict, cfg: RunConfig, override: bool) -> None:
    stored = meta.get("config_digest")
    if stored and stored != cfg.digest():
        msg = (f"checkpoint config digest {stored[:12]} does not match "
               f"current config {cfg.digest()[:12]}")
        if not override:
            raise ConfigError(msg + " (pass --allow-digest-mismatch to force)")
        log.warning("%s (override in effect)", msg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    dataset = generate(cfg.generator, cfg.n_per_class)
    train, test = split(dataset, cfg.train_fraction, cfg.seed)
    train_ids = train.ids.tolist()
    test_ids = test.ids.tolist()
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, dataset, extra={
        "split": {"train": train_ids, "test": test_ids},
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
    })
    log.info("wrote %d samples to %s", len(dataset), args.out)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train, _ = _load_splits(args.data)
    params, history = pretrain(train, cfg.train)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.rcmc")
    save_checkpoint(ckpt_path, params, meta={
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "phase": "pretrain",
        "epochs": cfg.train.epochs,
    })
    _write_text(os.path.join(args.out, "loss_history.csv"),
                history_csv(history))
    log.info("checkpoint written to %s (final loss %.4f)", ckpt_path,
             history[-1]["l_total"])
    return EXIT_OK


def _frozen_bytes(params, skip_prefixes=("cls_",)):
    from .linalg import matrix_to_bytes
    return b"".join(
        matrix_to_bytes(arr.reshape(1, -1) if arr.ndim == 1 else arr)
        for name, arr in params.named_arrays()
        if not name.startswith(skip_prefixes))


def cmd_probe(cfg: RunConfig, args) -> int:
    train, test = _load_splits(args.data)
    params, meta = load_checkpoint(args.checkpoint)
    _check_digest(meta, cfg, args.allow_digest_mismatch)
    before = _frozen_bytes(params)
    probed, train_acc, test_acc = linear_probe(params, train, test, cfg.train)
    after = _frozen_bytes(probed)
    if before != after:
        raise NumericError("frozen parameters changed during linear probe")
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "probe_checkpoint.rcmc"), probed,
                    meta={"config_digest": cfg.digest(), "seed": cfg.seed,
                          "phase": "probe"})
    report = {
        "phase": "probe",
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    }
    _write_text(os.path.join(args.out, "accuracy.json"),
                json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("probe accuracy: train %.2f%% test %.2f%%", train_acc, test_acc)
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    train, test = _load_splits(args.data)
    params, meta = load_checkpoint(args.checkpoint)
    _check_digest(meta, cfg, args.allow_digest_mismatch)
    tuned, test_acc = full_finetune(params, train, test, cfg.train)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "finetune_checkpoint.rcmc"), tuned,
                    meta={"config_digest": cfg.digest(), "seed": cfg.seed,
                          "phase": "finetune"})
    report = {
        "phase": "finetune",
        "test_accuracy": test_acc,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    }
    _write_text(os.path.join(args.out, "accuracy.json"),
                json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("finetune accuracy: test %.2f%%", test_acc)
    return EXIT_OK


def cmd_robustness(cfg: RunConfig, args) -> int:
    _, test = _load_splits(args.data)
    params, meta = load_checkpoint(args.checkpoint)
    _check_digest(meta, cfg, args.allow_digest_mismatch)
    force_equal = cfg.train.fusion_mode == "average"
    dropout = run_dropout_suite(params, test, cfg.seed,
                                config_digest=cfg.digest(),
                                force_equal=force_equal)
    corruption = run_corruption_suite(
        params, test, cfg.seed,
        sjn_grid=cfg.robustness.sjn_grid, pcs_grid=cfg.robustness.pcs_grid,
        config_digest=cfg.digest(), force_equal=force_equal)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "dropout_report.json"),
                dropout.to_json())
    _write_text(os.path.join(args.out, "corruption_report.json"),
                corruption.to_json())
    _write_text(os.path.join(args.out, "dropout_table.csv"),
                dropout_csv(dropout))
    _write_text(os.path.join(args.out, "corruption_table.csv"),
                corruption_csv(corruption))
    log.info("headline RDP (dual dropout): %.2f%%", dropout.rdp_headline)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    train, test = _load_splits(args.data)
    rows = run_ablation_matrix(train, test, cfg.train, cfg.robustness.seeds)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "ablation.json"),
                json.dumps({"config_digest": cfg.digest(), "rows": rows},
                           indent=2, sort_keys=True) + "\n")
    _write_text(os.path.join(args.out, "ablation.csv"), ablation_csv(rows))
    log.info("ablation matrix written to %s", args.out)
    return EXIT_OK


def cmd_export_embeddings(cfg: RunConfig, args) -> int:
    dataset = load_dataset(args.data)
    params, meta = load_checkpoint(args.checkpoint)
    _check_digest(meta, cfg, args.allow_digest_mismatch)
    lines = ["sample_id,modality,label," + ",".join(
        f"h{i}" for i in range(params.dims.proj_dim))]
    blocks = {"r": dataset.rgbd, "s": dataset.skeleton, "p": dataset.points}
    batch = 512
    for m, block in blocks.items():
        head = getattr(params, f"proj_{m}")
        for start in range(0, len(dataset), batch):
            sl = slice(start, start + batch)
            z, _ = ENCODERS[m][0](block[sl], params)
            h, _ = project(z, head)
            for i, row in enumerate(h):
                sid = start + i
                coords = ",".join(f"{v:.8g}" for v in row)
                lines.append(f"{sid},{m},{dataset.labels[sid]},{coords}")
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "embeddings.csv"),
                "\n".join(lines) + "\n")
    T = params.dims.frames
    trace = gate_trace(dataset.subset([0]), params,
                       window_len=max(2, T // 2), stride=1)
    _write_text(os.path.join(args.out, "gate_trace.csv"),
                gate_trace_csv(trace))
    log.info("exported %d embedding rows", 3 * len(dataset))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcmcl",
        description="Robust cross-modal contrastive learning pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_data=True, needs_ckpt=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="internal parallelism hint (results are "
                            "identical at any value)")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--allow-digest-mismatch", action="store_true")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, needs_data=False)
    add("pretrain", cmd_pretrain)
    add("probe", cmd_probe, needs_ckpt=True)
    add("finetune", cmd_finetune, needs_ckpt=True)
    add("robustness", cmd_robustness, needs_ckpt=True)
    add("ablate", cmd_ablate)
    add("export-embeddings", cmd_export_embeddings, needs_ckpt=True)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
