"""Command-line entry point: one subcommand per attack stage plus the pipelines.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure. Every artifact carries the config hash and master seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .artifacts import atomic_write, write_json
from .attribution import AttributionReport, attribute, collect_trace, read_trace, trace_lines
from .bench import (
    Experiment,
    StageError,
    attack_pipeline,
    curve_csv,
    defense_pipeline,
    evaluate,
    prunability_curve,
    realign_arm,
    report_without_private,
    train_full_model,
)
from .config import ConfigError, RunConfig, load_config, validate
from .moe import MoeModel, checkpoint_dict, model_from_checkpoint
from .numcore import NumericError
from .pruning import PruningPlan, apply_plan, compression_stats, make_plan

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "master_seed": cfg.seed}


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "strict", False):
        cfg.prune.strict = True
    validate(cfg)
    return cfg


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _load_model(path) -> MoeModel:
    return model_from_checkpoint(_read_json(path))


def _save_model(path, model: MoeModel, cfg: RunConfig) -> None:
    write_json(path, {**checkpoint_dict(model), **_stamp(cfg)})


def _path(args, cfg: RunConfig, attr: str, default: str) -> Path:
    given = getattr(args, attr, None)
    return Path(given) if given else Path(cfg.out_dir) / default


# -- subcommands ---------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> str:
    exp = Experiment.from_config(cfg)
    model = train_full_model(exp)
    out = Path(cfg.out_dir) / "model.json"
    _save_model(out, model, cfg)
    m = evaluate(model, *exp.eval_view())
    return f"train: target accuracy {m.accuracy:.4f} -> {out}"


def cmd_trace(cfg: RunConfig, args) -> str:
    exp = Experiment.from_config(cfg)
    model = _load_model(_path(args, cfg, "model", "model.json"))
    ids = exp.data.ids(args.split, exp.targets)
    trace = collect_trace(model, exp.data.x[ids], ids, dataset_id=f"seed{cfg.seed}/{args.split}/{exp.targets}")
    trace.meta.update(_stamp(cfg))
    out = Path(cfg.out_dir) / "trace.jsonl"
    atomic_write(out, trace_lines(trace))
    return f"trace: {trace.num_rows} examples x {trace.num_layers} layers -> {out}"


def cmd_attribute(cfg: RunConfig, args) -> str:
    trace = read_trace(_path(args, cfg, "trace", "trace.jsonl"))
    report = attribute(trace, args.mode or cfg.prune.attribution_mode)
    out = Path(cfg.out_dir) / "attribution.json"
    write_json(out, {**report.to_dict(), **_stamp(cfg)})
    top = [row[0] for row in report.layerwise]
    return f"attribute: {report.mode} over {report.num_tokens} tokens, top expert per layer {top} -> {out}"


def _plan(cfg: RunConfig, report: AttributionReport) -> PruningPlan:
    p = cfg.prune
    if p.strategy == "threshold":
        return make_plan(report, "threshold", tau=p.tau, strict=p.strict)
    return make_plan(report, p.strategy, k=p.k, strict=p.strict)


def cmd_prune(cfg: RunConfig, args) -> str:
    model = _load_model(_path(args, cfg, "model", "model.json"))
    report = AttributionReport.from_dict(_read_json(_path(args, cfg, "report", "attribution.json")))
    plan = _plan(cfg, report)
    pruned = apply_plan(model, plan)
    stats = compression_stats(plan, model.config)
    out = Path(cfg.out_dir)
    write_json(out / "plan.json", {**plan.to_dict(), **_stamp(cfg)})
    _save_model(out / "pruned.json", pruned, cfg)
    kept = [len(r) for r in plan.retained]
    return f"prune: kept {kept} experts per layer, removed {stats.experts_removed} -> {out / 'pruned.json'}"


def cmd_realign(cfg: RunConfig, args) -> str:
    exp = Experiment.from_config(cfg)
    pruned = _load_model(_path(args, cfg, "model", "pruned.json"))
    full = _load_model(_path(args, cfg, "full", "model.json"))
    full_acc = evaluate(full, *exp.eval_view()).accuracy
    strategy = args.strategy or cfg.al.strategy
    res = realign_arm(exp, pruned, strategy, "realign", full_acc)
    model = res.pop("_model")
    out = Path(cfg.out_dir)
    write_json(out / "al_history.json", {"format_version": 1, **res, **_stamp(cfg)})
    _save_model(out / "realigned.json", model, cfg)
    return (
        f"realign: {strategy}, {res['labels_used']} labels, "
        f"final accuracy {res['final']['accuracy']:.4f} -> {out / 'realigned.json'}"
    )


def cmd_eval(cfg: RunConfig, args) -> str:
    exp = Experiment.from_config(cfg)
    model = _load_model(_path(args, cfg, "model", "model.json"))
    ref = None
    if args.reference:
        ref = evaluate(_load_model(args.reference), *exp.eval_view()).mean_cross_entropy
    m = evaluate(model, *exp.eval_view(), reference_ce=ref)
    out = Path(cfg.out_dir) / "metrics.json"
    write_json(out, {"format_version": 1, "accuracy": m.accuracy, "mean_cross_entropy": m.mean_cross_entropy, "normalized_score": m.normalized_score, **_stamp(cfg)})
    return f"eval: accuracy {m.accuracy:.4f}, mean CE {m.mean_cross_entropy:.4f} -> {out}"


def cmd_curve(cfg: RunConfig, args) -> str:
    exp = Experiment.from_config(cfg)
    model = _load_model(_path(args, cfg, "model", "model.json"))
    report = AttributionReport.from_dict(_read_json(_path(args, cfg, "report", "attribution.json")))
    ex, ey = exp.eval_view()
    ref = evaluate(model, ex, ey).mean_cross_entropy
    curve = prunability_curve(model, ex, ey, report, cfg.pipeline.curve_strategy, ref)
    out = Path(cfg.out_dir) / "curve.csv"
    atomic_write(out, curve_csv(curve, _stamp(cfg)))
    return f"curve: {len(curve.points)} points, resistance {curve.resistance:.4f} -> {out}"


def _summary(report: dict) -> str:
    if report["kind"] == "attack":
        lines = [f"pruned accuracy {report['pruned']['metrics']['accuracy']:.4f} (retention {report['pruned']['retention']:.4f})"]
        for arm in report["arms"]:
            lines.append(
                f"  arm {arm['arm']}: labels used {arm['labels_used']}, "
                f"labels to target {arm['labels_to_target']}, final accuracy {arm['final']['accuracy']:.4f}"
            )
        lines.append(f"  resistance {report['curve']['resistance']:.4f}")
        return "\n".join(lines)
    lines = []
    for name, arm in report["arms"].items():
        lines.append(
            f"{name}: pruned accuracy {arm['pruned_accuracy']:.4f}, drop {arm['accuracy_drop']:.4f}, "
            f"labels used {arm['recovery']['labels_used']}, resistance {arm['resistance']:.4f}"
        )
    return "\n".join(lines)


def cmd_pipeline(cfg: RunConfig, args) -> str:
    mode = args.mode
    report = attack_pipeline(cfg) if mode == "attack" else defense_pipeline(cfg)
    curves = report["_curves"]
    body = report_without_private(report)
    out = Path(cfg.out_dir)
    write_json(out / f"{mode}_report.json", body)
    stamp = _stamp(cfg)
    for name, curve in curves.items():
        atomic_write(out / f"{name}.csv", curve_csv(curve, stamp))
    line = f"pipeline {mode}: report -> {out / f'{mode}_report.json'}"
    if args.summary:
        line += "\n" + _summary(body)
    return line


COMMANDS = {
    "train": cmd_train,
    "trace": cmd_trace,
    "attribute": cmd_attribute,
    "prune": cmd_prune,
    "realign": cmd_realign,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--out", help="output directory; overrides [run] out_dir")
    common.add_argument("--strict", action="store_true", help="threshold pruning fails instead of keeping the argmax")
    common.add_argument("--summary", action="store_true", help="print key numbers after the run")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="moeprune", description="Expert pruning attacks and defenses on a toy MoE.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the full model")
    p = sub.add_parser("trace", parents=[common], help="log routing on a data split")
    p.add_argument("--model")
    p.add_argument("--split", default="pool", choices=("train", "pool", "test"))
    p = sub.add_parser("attribute", parents=[common], help="attribution report from a trace")
    p.add_argument("--trace")
    p.add_argument("--mode", choices=("hard", "soft"))
    p = sub.add_parser("prune", parents=[common], help="make and apply a pruning plan")
    p.add_argument("--model")
    p.add_argument("--report")
    p = sub.add_parser("realign", parents=[common], help="active-learning recovery of a pruned model")
    p.add_argument("--model")
    p.add_argument("--full")
    p.add_argument("--strategy", choices=("entropy", "margin", "random"))
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the target test split")
    p.add_argument("--model")
    p.add_argument("--reference", help="full-model checkpoint for the normalized score")
    p = sub.add_parser("curve", parents=[common], help="prunability curve CSV")
    p.add_argument("--model")
    p.add_argument("--report")
    p = sub.add_parser("pipeline", parents=[common], help="full attack or defense experiment")
    p.add_argument("--mode", choices=("attack", "defense"), default="attack")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args)
        print(COMMANDS[args.command](cfg, args))
        return EXIT_OK
    except StageError as exc:
        return _fail(exc.cause, str(exc))
    except Exception as exc:
        return _fail(exc, str(exc))


def _fail(cause: BaseException, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    if isinstance(cause, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(cause, (OSError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(cause, (ConfigError, ValueError, KeyError, RuntimeError)):
        return EXIT_USAGE
    raise cause


if __name__ == "__main__":
    sys.exit(main())
