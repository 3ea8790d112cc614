"""Command-line entry point.

Every subcommand accepts ``--config`` (JSON ExperimentConfig), ``--seed`` and
``--out``. Results land in ``--out`` as CSV/JSON; exit codes follow the error
hierarchy (2 config, 3 data format, 4 numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .data import save_dataset
from .errors import ConfigError, OCRError
from .nets import load_checkpoint


def _config(args) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    changes = {"out_dir": str(args.out)}
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _model(args, cfg):
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.bin"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path, cfg.num_classes)


def cmd_gen_data(args, cfg):
    sources, target = H.build_datasets(cfg.replace(data_dir=None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / f"source_{i}.ocrd" for i in range(len(sources))] + [out / "target.ocrd"]
    for d, path in zip(sources + [target], files):
        save_dataset(d, path)
    _write_json(out / "summary.json", {"files": [p.name for p in files],
                                       "sizes": [len(d) for d in sources + [target]]})


def cmd_train(args, cfg):
    result = H.train(cfg)
    print(json.dumps(result.summary["final"], sort_keys=True))


def cmd_eval(args, cfg):
    model = _model(args, cfg)
    _, target = H.build_datasets(cfg)
    ks = [k for k in (1, 3, 5) if k <= cfg.num_classes]
    top = H.evaluate(model, target, ks)
    payload = {f"top{k}": v for k, v in top.items()}
    _write_json(Path(args.out) / "summary.json", payload)
    print(json.dumps(payload, sort_keys=True))


def cmd_attack(args, cfg):
    model = _model(args, cfg)
    _, target = H.build_datasets(cfg)
    methods = H.ATTACKS if args.method == "all" else (args.method,)
    payload = {"clean": H.evaluate(model, target, [1])[1], "eps": args.eps, "steps": args.steps,
               "step_size": args.step_size}
    for m in methods:
        payload[m] = H.attack(model, target, m, args.eps, args.steps, args.step_size, cfg.seed)
    _write_json(Path(args.out) / "summary.json", payload)
    print(json.dumps(payload, sort_keys=True))


def cmd_fourier(args, cfg):
    model = _model(args, cfg)
    _, target = H.build_datasets(cfg)
    grid = H.fourier_map(model, target, args.grid, args.eps, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H.write_grid_csv(grid, out / "fourier.csv")
    _write_json(out / "summary.json", {"grid": args.grid, "eps": args.eps,
                                       "mean_error": float(grid.mean()),
                                       "dc_error": float(grid[args.grid // 2, args.grid // 2])})


def cmd_tta(args, cfg):
    model = _model(args, cfg)
    clean = H.heldout_source(cfg)
    stream = H.corruption_stream(clean, args.severity, cfg.seed)
    tcfg = H.TTAConfig(lr=args.lr, batch_size=args.batch_size, seed=cfg.seed, augment=cfg.augment)
    methods = H.TTA_METHODS if args.method == "all" else (args.method,)
    payload = {}
    for m in methods:
        for continual in (False, True):
            accs = H.tta_adapt(model, stream, m, continual, tcfg)
            payload[f"{m}/{'continual' if continual else 'online'}"] = {
                "segments": accs, "mean": float(np.mean(accs))}
    _write_json(Path(args.out) / "summary.json", payload)
    print(json.dumps({k: v["mean"] for k, v in payload.items()}, sort_keys=True))


def cmd_ablate_layer(args, cfg):
    datasets = H.build_datasets(cfg)
    payload = {layer: H.layer_ablation(cfg, layer, datasets) for layer in args.layer}
    _write_json(Path(args.out) / "summary.json", payload)
    print(json.dumps(payload, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="model file (default: <out>/checkpoint.bin)")

    p = argparse.ArgumentParser(prog="ocreg", description="Order-preserving consistency experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic domains as .ocrd files")
    sub.add_parser("train", parents=[common], help="train one model")
    sub.add_parser("eval", parents=[common, ckpt], help="top-k accuracy on the target domain")

    a = sub.add_parser("attack", parents=[common, ckpt], help="white-box robustness")
    a.add_argument("--method", choices=H.ATTACKS + ("all",), default="all")
    a.add_argument("--eps", type=float, default=0.01)
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--step-size", type=float, default=0.01)

    f = sub.add_parser("fourier", parents=[common, ckpt], help="Fourier sensitivity map")
    f.add_argument("--grid", type=int, default=15)
    f.add_argument("--eps", type=float, default=4.0)

    t = sub.add_parser("tta", parents=[common, ckpt], help="online test-time adaptation")
    t.add_argument("--method", choices=H.TTA_METHODS + ("all",), default="all")
    t.add_argument("--severity", type=int, default=5)
    t.add_argument("--lr", type=float, default=H.TTAConfig.lr)
    t.add_argument("--batch-size", type=int, default=H.TTAConfig.batch_size)

    la = sub.add_parser("ablate-layer", parents=[common], help="OCR at different depths")
    la.add_argument("--layer", nargs="+", default=["penultimate"])
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "fourier": cmd_fourier,
    "tta": cmd_tta,
    "ablate-layer": cmd_ablate_layer,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.command](args, _config(args))
    except OCRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
