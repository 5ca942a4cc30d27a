"""Command-line entry point: ``moedet <subcommand> [--config FILE] [--key value ...]``.

Every ``TrainConfig`` field is also a flag (``lambda_lb`` -> ``--lambda-lb``);
flags override the config file. Dataset path flags accept a comma-separated
list of files, each optionally prefixed with a domain label (``A=train_a.bin``).

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
format error, 3 numerical failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from typing import Sequence

from . import gradcheck
from .data import DataFormatError, Scene, domain_spec, generate_dataset, read_dataset, write_dataset
from .evaluation import evaluate, format_report, write_report
from .expert import ConfigError
from .training import (CheckpointError, NumericalError, TrainConfig, inspect_routing, load_checkpoint,
                       load_config, predict, pretrain_expert, run_benchmark, save_checkpoint, train_moe)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("moedet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moedet", description="Mixture-of-experts detection on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "render a synthetic dataset file (--domain, --count, --output)",
        "pretrain": "train one expert on L_det (--train-data/--val-data or generated --domain)",
        "train-moe": "train routers and experts jointly (--experts ckpt,ckpt)",
        "eval": "evaluate a checkpoint (--checkpoint, --test-data)",
        "benchmark": "two-domain grid: expert A, expert B, single A+B, MoE A+B",
        "inspect-routing": "per-level routing statistics of an MoE checkpoint",
        "grad-check": "finite-difference check of every primitive and the composed loss",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_config_flags(p)
        if name == "benchmark":
            p.add_argument("--ablation", action="store_true", help="also train an MoE with lambda_lb=0")
    return parser


def _config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    return load_config(args.config, overrides)


def parse_dataset_paths(spec: str) -> list[tuple[str, str]]:
    """``"A=a.bin,b.bin"`` -> [("A", "a.bin"), ("", "b.bin")]."""
    out = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        label, sep, path = item.partition("=")
        out.append((label, path) if sep else ("", item))
    return out


def load_scenes(spec: str) -> list[Scene]:
    scenes = []
    for label, path in parse_dataset_paths(spec):
        for s in read_dataset(path):
            scenes.append(Scene(s.image, s.objects, label or s.domain))
    return scenes


def _generated(config: TrainConfig, domains: Sequence[str], split: str) -> list[Scene]:
    n_tr, n_va, n_te = config.train_per_domain, config.val_per_domain, config.test_per_domain
    count, start = {"train": (n_tr, 0), "val": (n_va, n_tr), "test": (n_te, n_tr + n_va)}[split]
    return [s for d in domains
            for s in generate_dataset(domain_spec(d, config.image_size), config.seed, count, config.image_size, start)]


def _scenes(config: TrainConfig, spec: str, domains: Sequence[str], split: str) -> list[Scene]:
    return load_scenes(spec) if spec else _generated(config, domains, split)


def _require(value: str, flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _epoch_logger(epoch: int, loss: float, val_map: float) -> None:
    logger.info("epoch %d  loss %.4f  val mAP %.4f", epoch, loss, val_map)


def _emit(config: TrainConfig, text: str, values: dict[str, float]) -> None:
    print(text, end="")
    if config.output:
        txt, kv = write_report(config.output, text, values)
        print(f"wrote {txt} and {kv}")


# ------------------------------------------------------------------ commands


def cmd_gen_data(config: TrainConfig, args) -> int:
    out = _require(config.output, "--output")
    scenes = generate_dataset(domain_spec(config.domain, config.image_size), config.seed, config.count,
                              config.image_size)
    write_dataset(scenes, out)
    print(f"wrote {len(scenes)} domain-{config.domain} scenes to {out}")
    return EXIT_OK


def cmd_pretrain(config: TrainConfig, args) -> int:
    dest = _require(config.checkpoint, "--checkpoint")
    train = _scenes(config, config.train_data, [config.domain], "train")
    val = _scenes(config, config.val_data, [config.domain], "val")
    result = pretrain_expert(train, val, config, on_epoch=_epoch_logger)
    save_checkpoint(result.checkpoint, dest)
    print(f"best epoch {result.best_epoch} val mAP {max(result.val_maps):.4f}; saved {dest}")
    return EXIT_OK


def cmd_train_moe(config: TrainConfig, args) -> int:
    dest = _require(config.checkpoint, "--checkpoint")
    experts = [load_checkpoint(p) for p in _require(config.experts, "--experts").split(",") if p]
    train = _scenes(config, config.train_data, ["A", "B"], "train")
    val = _scenes(config, config.val_data, ["A", "B"], "val")
    result = train_moe(experts, train, val, config, on_epoch=_epoch_logger)
    save_checkpoint(result.checkpoint, dest)
    print(f"best epoch {result.best_epoch} val mAP {max(result.val_maps):.4f}; saved {dest}")
    return EXIT_OK


def cmd_eval(config: TrainConfig, args) -> int:
    model = load_checkpoint(_require(config.checkpoint, "--checkpoint")).to_model()
    scenes = _scenes(config, config.test_data, ["A", "B"], "test")
    groups: dict[str, list[Scene]] = {}
    for s in scenes:
        groups.setdefault(s.domain or "all", []).append(s)
    if len(groups) > 1:
        groups["combined"] = scenes
    rows, values = {}, {}
    for name, group in groups.items():
        res = evaluate(predict(model, group, config).detections, [s.objects for s in group])
        rows[name] = {"mAP_50_95": res.mAP_50_95, "mAP_50": res.mAP_50, "AR_100": res.AR}
        values.update({f"{name}.{k}": v for k, v in rows[name].items()})
        values.update({f"{name}.AP_50_95.class{c}": sum(v) / len(v) for c, v in res.ap.items()})
    _emit(config, format_report(rows, "test set metrics (AR is AR@100)"), values)
    return EXIT_OK


def cmd_benchmark(config: TrainConfig, args) -> int:
    report = run_benchmark(config, ablation=args.ablation, progress=logger.info)
    text = report.text() + "routing:\n" + "".join(f"  {k} = {v:.4f}\n" for k, v in report.routing.items())
    text += f"MoE >= best single model on combined mAP: {report.moe_wins()}\n"
    _emit(config, text, report.key_values())
    return EXIT_OK


def cmd_inspect_routing(config: TrainConfig, args) -> int:
    ckpt = load_checkpoint(_require(config.checkpoint, "--checkpoint"))
    scenes = _scenes(config, config.test_data, ["A", "B"], "test")
    report = inspect_routing(ckpt, scenes, config)
    values = {"entropy": report["entropy"]}
    for lv in report["levels"]:
        s = lv["stride"]
        values[f"s{s}.entropy"] = lv["entropy"]
        for e, (f, p) in enumerate(zip(lv["f"], lv["P"])):
            values[f"s{s}.f{e}"] = f
            values[f"s{s}.P{e}"] = p
        for key in ("domain_A_to_expert0", "domain_B_to_expert1"):
            if key in lv:
                values[f"s{s}.{key}"] = lv[key]
        for d, mean in lv["domain_mean_alpha"].items():
            values.update({f"s{s}.alpha_{d}{e}": a for e, a in enumerate(mean)})
    _emit(config, json.dumps(report, indent=2) + "\n", values)
    return EXIT_OK


def cmd_grad_check(config: TrainConfig, args) -> int:
    results = gradcheck.run_suite(config.seed)
    lines = [f"{'PASS' if r.ok else 'FAIL'} {r.name:<40} max rel err {r.max_rel_error:.3e} "
             f"({r.probes} probes, {r.rejected} rejected)" for r in results]
    values = {f"{r.name}.max_rel_error": r.max_rel_error for r in results}
    _emit(config, "\n".join(lines) + "\n", values)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-moe": cmd_train_moe,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "inspect-routing": cmd_inspect_routing,
    "grad-check": cmd_grad_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        config = _config(args)
        return COMMANDS[args.command](config, args)
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"moedet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"moedet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"moedet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
