"""Command line entry point: ``kmap {synth,train,eval,clusters,export-embeddings}``.

Exit status is 0 on success, 2 for bad flags, missing inputs or invalid
configuration, and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, apply_env_seed
from .dataio import (DataFormatError, SyntheticSpec, Vocab, encode, ensure_dir, filter_min_events,
                     generate_synthetic, load_events, split_streams, write_events, write_labels)
from .training import Trainer, evaluate, load_checkpoint, save_checkpoint

log = logging.getLogger("kmap")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kmap", description="Knowledge tracing, behaviour modelling and student profiling.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic interaction log with planted archetypes")
    s.add_argument("--spec", required=True, help="synthetic dataset spec (JSON)")
    s.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="training config (JSON)")
    t.add_argument("--preset", help="start from a shipped hyperparameter preset (ednet, junyi)")
    t.add_argument("--data", help="events JSONL; overrides train_data from the config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int, help="override the number of epochs")
    t.add_argument("--loss-weights", help='JSON object, e.g. \'{"type": 0}\' to drop a loss term')
    t.add_argument("--freeze-concepts", action="store_true", help="keep concept projections fixed")
    t.add_argument("--no-profiling", action="store_true", help="skip the outer profiling step")
    t.add_argument("--min-events", type=int, help="drop students with fewer interactions")

    e = sub.add_parser("eval", help="evaluate a checkpoint on an event log")
    e.add_argument("--ckpt", required=True, help="checkpoint file or directory")
    e.add_argument("--data", required=True, help="events JSONL")
    e.add_argument("--k-eval", type=int, help="negatives per candidate list")
    e.add_argument("--out", help="write metrics JSON here instead of stdout")

    c = sub.add_parser("clusters", help="per-student cluster report of a checkpoint")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", help="CSV path (default stdout)")

    x = sub.add_parser("export-embeddings", help="export mean profile and behaviour vectors")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", help="CSV path (default stdout)")
    return p


# ---------------------------------------------------------------------------
# helpers


def _checkpoint_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.json"
    if not p.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return p


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _clean(obj):
    """NaN is not valid JSON; report it as null."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _resolve_train_config(args) -> TrainConfig:
    obj = {}
    if args.config:
        with open(_require_file(args.config), encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    if args.preset:
        obj = {"preset": args.preset, **obj}
    if args.loss_weights:
        try:
            weights = json.loads(args.loss_weights)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--loss-weights: {exc}") from None
        if not isinstance(weights, dict):
            raise ConfigError("--loss-weights must be a JSON object")
        obj["loss_weights"] = {**obj.get("loss_weights", {}), **weights}
    if args.data:
        obj["train_data"] = args.data
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    if args.freeze_concepts:
        obj["freeze_concepts"] = True
    if args.no_profiling:
        obj["profiling"] = False
    if args.min_events is not None:
        obj["min_events"] = args.min_events
    config = apply_env_seed(TrainConfig.from_dict(obj))
    if not config.train_data:
        raise ConfigError("no training data: pass --data or set train_data in the config")
    _require_file(config.train_data)
    if config.concept_weights_path:
        _require_file(config.concept_weights_path)
    return config


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    with open(_require_file(args.spec), encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
    try:
        spec = SyntheticSpec.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    raw = os.environ.get("KMAP_SEED")
    if raw is not None:
        try:
            spec.seed = int(raw)
        except ValueError:
            raise ConfigError(f"KMAP_SEED must be an integer, got {raw!r}") from None
    out = ensure_dir(args.out)
    _, events, labels = generate_synthetic(spec)
    write_events(out / "events.jsonl", events)
    write_labels(out / "labels.csv", labels)
    log.info("wrote %d students to %s", len(events), out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    out = ensure_dir(args.out)
    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    try:
        resolved = json.dumps(config.to_dict(), sort_keys=True)
        log.info("resolved config %s", resolved)
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            fh.write(resolved + "\n")
        _, events = load_events(config.train_data)
        events = filter_min_events(events, config.min_events)
        vocab = Vocab.from_events(events)
        log.info("%d students after filtering", len(events))
        train, test = split_streams(encode(vocab, events), config.train_frac)
        trainer = Trainer(config, vocab)
        eval_fn = None
        if config.eval_every and test:
            def eval_fn(tr):
                res = evaluate(tr.network, vocab, test, config, warmup=train)
                flat = {f"{t}_{k}": v for t in ("assessed", "non_assessed") for k, v in res[t].items() if k != "n"}
                return {**flat, "auc_perf": res["auc_perf"], "auc_type": res["auc_type"]}
        trainer.fit(train, eval_fn=eval_fn, metrics_path=out / "metrics.csv")
        save_checkpoint(out / "checkpoint.json", trainer)
        log.info("checkpoint written to %s", out / "checkpoint.json")
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _checkpoint_path(args.ckpt)
    _require_file(args.data)
    if args.k_eval is not None and args.k_eval < 1:
        raise ConfigError("--k-eval must be positive")
    trainer, _ = load_checkpoint(ckpt)
    config = apply_env_seed(trainer.config)
    _, events = load_events(args.data)
    events = filter_min_events(events, config.min_events)
    train, test = split_streams(encode(trainer.vocab, events), config.train_frac)
    if not test:
        train, test = [], train
    res = evaluate(trainer.network, trainer.vocab, test, config, warmup=train, k_eval=args.k_eval)
    fh, close = _open_out(args.out)
    try:
        json.dump(_clean(res), fh, indent=2, sort_keys=True)
        fh.write("\n")
    finally:
        if close:
            fh.close()
    return EXIT_OK


def _profiles(path) -> dict:
    _, profiles = load_checkpoint(_checkpoint_path(path))
    if not profiles:
        raise RuntimeError("checkpoint holds no profiles; train with profiling for at least one epoch")
    return profiles


def cmd_clusters(args) -> int:
    prof = _profiles(args.ckpt)
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "cluster", "d_ic", "d_nc"])
        for sid, lab, dic, dnc in zip(prof["students"], prof["labels"], prof["d_ic"], prof["d_nc"]):
            w.writerow([sid, lab, repr(float(dic)), "" if dnc is None else repr(float(dnc))])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def cmd_export(args) -> int:
    prof = _profiles(args.ckpt)
    d_s, d_h = len(prof["v_bar"][0]), len(prof["b_bar"][0])
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", *(f"v_{i}" for i in range(1, d_s + 1)), *(f"b_{i}" for i in range(1, d_h + 1))])
        for sid, v, b in zip(prof["students"], prof["v_bar"], prof["b_bar"]):
            w.writerow([sid, *map(repr, map(float, v)), *map(repr, map(float, b))])
    finally:
        if close:
            fh.close()
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "clusters": cmd_clusters,
            "export-embeddings": cmd_export}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"kmap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, DataFormatError, IsADirectoryError) as exc:
        print(f"kmap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"kmap: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
