"""Command-line entry point: ``gslora {pretrain,forget,eval,recover,report}``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as config_mod
from . import engine, io, lora as lora_mod, metrics
from .data import generate_dataset
from .model import TrainingError, from_named_arrays, pretrain

logger = logging.getLogger("gslora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gslora", description="Continual class forgetting with group-sparse LoRA.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="experiment TOML file")
            sp.add_argument("--seed", type=int, default=None, help="override experiment.seed")
            sp.add_argument("--out", default=None, help="output directory (default: experiment.output_dir)")

    sp = sub.add_parser("pretrain", help="generate data and pretrain the base model")
    common(sp)

    sp = sub.add_parser("forget", help="run the forgetting schedule on a pretrained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", default=None, help="pretrained checkpoint (default: <out>/pretrained.gslf)")

    sp = sub.add_parser("eval", help="accuracy of a checkpoint (+ optional merged LoRA) per class partition")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--lora", default=None, help="LoRA history checkpoint written by 'forget'")
    sp.add_argument("--forgotten", default="", help="comma-separated forgotten class ids")

    sp = sub.add_parser("recover", help="head-only recovery probe against the head-masking control")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--lora", default=None)
    sp.add_argument("--forgotten", default=None, help="comma-separated class ids (default: all scheduled)")
    sp.add_argument("--epochs", type=int, default=None, help="probe epochs (default: probe.epochs)")

    sp = sub.add_parser("report", help="render a metrics log as an aligned table and CSV")
    sp.add_argument("metrics", help="metrics.csv written by 'forget'")
    sp.add_argument("--csv", default=None, help="also write the plot-ready CSV here")
    return p


def _load_config(args):
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed))
        config_mod.validate(cfg)
    out = args.out or cfg.experiment.output_dir
    return cfg, out


def _write_manifest(out: str, cfg, command: str, extra=None) -> None:
    doc = config_mod.manifest(cfg, command, extra)
    io.atomic_write_text(os.path.join(out, f"manifest.{command}.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_model(cfg, path):
    arrays = io.load_checkpoint(path)
    return from_named_arrays(cfg.model_config(), arrays)


def _load_lora(model, cfg, path):
    lora = lora_mod.merge(lora_mod.attach(model, cfg.lora.rank, cfg.lora.grouping, cfg.seed))
    if path is None:
        return lora
    arrays = io.load_checkpoint(path)
    for (block, weight) in list(lora.history):
        key = f"history.{block}.{weight}"
        if key not in arrays:
            raise ValueError(f"LoRA checkpoint lacks {key}")
        lora.history[(block, weight)] = arrays[key].astype(np.float64)
    return lora


def _classes(text):
    if text is None:
        return None
    text = text.strip()
    return [int(c) for c in text.split(",") if c.strip()] if text else []


def cmd_pretrain(args) -> int:
    cfg, out = _load_config(args)
    splits = generate_dataset(cfg.dataset_config())
    model = pretrain(cfg.model_config(), splits.train, cfg.pretrain_optimizer(), cfg.pretrain.epochs, cfg.seed)
    train_acc = metrics.accuracy(model, splits.train)
    test_acc = metrics.accuracy(model, splits.test)
    io.save_checkpoint(os.path.join(out, "pretrained.gslf"), {k: v.data for k, v in model.named_parameters().items()})
    _write_manifest(out, cfg, "pretrain", {"train_acc": train_acc, "test_acc": test_acc})
    print(f"pretrain: train acc {train_acc:.2f}%  test acc {test_acc:.2f}%")
    return 0


def cmd_forget(args) -> int:
    cfg, out = _load_config(args)
    tasks = cfg.forgetting_tasks()
    if not tasks:
        raise ValueError("config has no [[tasks]]")
    splits = generate_dataset(cfg.dataset_config())
    model = _load_model(cfg, args.checkpoint or os.path.join(out, "pretrained.gslf"))
    state = engine.init_state(model, splits, cfg.lora_config(), cfg.seed)
    state = engine.run_schedule(state, tasks, cfg.objective_config())
    metrics.write_csv(state.records, os.path.join(out, "metrics.csv"))
    io.save_checkpoint(
        os.path.join(out, "lora.gslf"),
        {f"history.{b}.{w}": arr for (b, w), arr in state.lora.history.items()},
    )
    _write_manifest(out, cfg, "forget", {"forgotten": [list(t) for t in state.forgotten]})
    sys.stdout.write(metrics.format_table(state.records))
    return 0


def cmd_eval(args) -> int:
    cfg, out = _load_config(args)
    splits = generate_dataset(cfg.dataset_config())
    model = _load_model(cfg, args.checkpoint or os.path.join(out, "pretrained.gslf"))
    lora = _load_lora(model, cfg, args.lora)
    forgotten = _classes(args.forgotten) or []
    retained = [c for c in range(cfg.data.num_classes) if c not in forgotten]
    result = {
        "acc_r": metrics.accuracy(model, splits.test, retained, lora) if retained else None,
        "acc_f": metrics.accuracy(model, splits.test, forgotten, lora) if forgotten else None,
        "acc_all": metrics.accuracy(model, splits.test, None, lora),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_recover(args) -> int:
    cfg, out = _load_config(args)
    splits = generate_dataset(cfg.dataset_config())
    model = _load_model(cfg, args.checkpoint or os.path.join(out, "pretrained.gslf"))
    lora = _load_lora(model, cfg, args.lora or os.path.join(out, "lora.gslf"))
    forgotten = _classes(args.forgotten)
    if forgotten is None:
        forgotten = sorted({c for t in cfg.tasks for c in t.forget})
    if not forgotten:
        raise ValueError("no forgotten classes to probe")
    epochs = args.epochs if args.epochs is not None else cfg.probe.epochs
    opt = cfg.probe_optimizer()
    backbone = engine.recovery_probe(model, lora, splits.train, splits.test, forgotten, epochs, opt, cfg.seed)
    control = engine.recovery_probe(engine.head_mask(model, forgotten), None, splits.train, splits.test,
                                    forgotten, epochs, opt, cfg.seed)
    lines = ["epoch,gslora_acc_f,gslora_acc_r,head_mask_acc_f,head_mask_acc_r"]
    for i, e in enumerate(backbone.epochs):
        lines.append(f"{e},{backbone.acc_f[i]!r},{backbone.acc_r[i]!r},{control.acc_f[i]!r},{control.acc_r[i]!r}")
    text = "\n".join(lines) + "\n"
    io.atomic_write_text(os.path.join(out, "recovery.csv"), text)
    _write_manifest(out, cfg, "recover", {"forgotten": forgotten, "probe_epochs": epochs})
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    records = metrics.read_csv(args.metrics)
    sys.stdout.write(metrics.format_table(records))
    if args.csv:
        metrics.write_csv(records, args.csv)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "forget": cmd_forget,
    "eval": cmd_eval,
    "recover": cmd_recover,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (config_mod.ConfigError, io.CheckpointFormatError, ValueError, KeyError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (TrainingError, FloatingPointError, RuntimeError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
