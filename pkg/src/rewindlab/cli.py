"""``rewindlab <verb> --config <path> [--set k=v]... [--out <dir>] [--seed <u64>] [--deterministic]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import models as M
from .config import ConfigError, ExperimentConfig, parse_config
from .experiment import (ExperimentResult, load_data, make_mask, run_experiment, run_one_shot,
                         train_baseline, weights_digest, write_outputs)
from .prune import load_mask, save_mask
from .rewind import CheckpointStore
from .train import evaluate

log = logging.getLogger("rewindlab")

VERBS = ("train-baseline", "prune", "retrain", "experiment", "verify")
EXIT_OK, EXIT_FAILED, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rewindlab",
                                description="Magnitude pruning with fine-tuning, weight rewinding "
                                            "and learning-rate rewinding.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON config file or preset:<name>")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, value parsed as JSON (repeatable)")
    p.add_argument("--out", help="output directory (default: output.dir from the config)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for byte-identical outputs")
    p.add_argument("--grad-cases", type=int, default=20, help="verify: random cases per gradient check")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def effective_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"seed: {args.seed} is not an unsigned 64-bit integer")
        overrides.append(f"seed={args.seed}")
    if args.deterministic:
        overrides.append("deterministic=true")
    if args.out:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    return parse_config(args.config, overrides)


def echo_config(cfg: ExperimentConfig, out: Path) -> None:
    text = cfg.to_json()
    print(text)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(text + "\n")


def _baseline_from_disk(cfg: ExperimentConfig, out: Path, data) -> tuple[M.Model, CheckpointStore]:
    ckpt = out / "checkpoints"
    if not ckpt.is_dir():
        raise FileNotFoundError(f"{ckpt} not found; run 'rewindlab train-baseline' with the same --out first")
    store = CheckpointStore.load(ckpt)
    n = cfg.optim.total_iterations
    shape = tuple(int(v) for v in data.train.images.shape[1:])
    model = M.build(cfg.model, cfg.num_classes, input_shape=shape)
    model.load_state(store.restore(n))
    return model, store


def _mask_path(out: Path, i: int, s: float) -> Path:
    return out / "masks" / f"mask-{i:02d}-s{s:.6f}.rwlm"


def cmd_train_baseline(cfg: ExperimentConfig, out: Path) -> int:
    data = load_data(cfg)
    model, store = train_baseline(cfg, data, out / "checkpoints")
    info = {"accuracy": evaluate(model, data, bn_decay=cfg.bn_decay),
            "digest": weights_digest(model.params), "iterations": store.iterations}
    (out / "baseline.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"baseline accuracy {info['accuracy']:.4f}; {len(store)} snapshots in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_prune(cfg: ExperimentConfig, out: Path) -> int:
    data = load_data(cfg)
    model, _ = _baseline_from_disk(cfg, out, data)
    failures = 0
    for i, s in enumerate(cfg.target_sparsities):
        try:
            mask = make_mask(cfg, model, s)
        except ValueError as exc:
            print(f"error: target {s}: {exc}", file=sys.stderr)
            failures += 1
            continue
        path = _mask_path(out, i, s)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_mask(path, mask)
        print(f"{path}: sparsity {mask.sparsity():.6f}, compression {mask.compression():.4f}x")
    return EXIT_PARTIAL if failures else EXIT_OK


def _finish(result: ExperimentResult, cfg: ExperimentConfig, out: Path) -> int:
    paths = write_outputs(result, out)
    if cfg.output.figures and result.records:
        from .report import plot_curves
        paths.append(plot_curves(result, out / "accuracy_vs_compression.png",
                                 f"{cfg.model} / {cfg.dataset.name} ({cfg.mode})"))
    for p in paths:
        print(f"wrote {p}")
    for row in result.table(cfg.model, cfg.dataset.name):
        print("  ".join(f"{v:>16}" for v in row.values()))
    for err in result.errors:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_PARTIAL if result.errors else EXIT_OK


def cmd_retrain(cfg: ExperimentConfig, out: Path) -> int:
    data = load_data(cfg)
    baseline = _baseline_from_disk(cfg, out, data)
    if cfg.mode == "iterative":
        return _finish(run_experiment(cfg, data=data, baseline=baseline), cfg, out)
    masks = []
    for i, s in enumerate(cfg.target_sparsities):
        p = _mask_path(out, i, s)
        masks.append(load_mask(p) if p.is_file() else None)
    return _finish(run_one_shot(cfg, data=data, baseline=baseline, masks=masks), cfg, out)


def cmd_experiment(cfg: ExperimentConfig, out: Path) -> int:
    return _finish(run_experiment(cfg), cfg, out)


def cmd_verify(grad_cases: int) -> int:
    from .verify import format_report, run_all
    results = run_all(grad_cases)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "verify":
        return cmd_verify(args.grad_cases)
    if not args.config:
        print("error: --config is required for this verb", file=sys.stderr)
        return EXIT_FAILED
    try:
        cfg = effective_config(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    out = Path(cfg.output.dir)
    echo_config(cfg, out)
    handlers = {"train-baseline": cmd_train_baseline, "prune": cmd_prune,
                "retrain": cmd_retrain, "experiment": cmd_experiment}
    try:
        return handlers[args.verb](cfg, out)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

