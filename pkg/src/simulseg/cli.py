"""Command-line surface: data generation, training, simulation, evaluation,
latency sweeps, and the representation-similarity report.

Configuration is a flat key = value file; every key can be overridden by a
command-line flag of the same name.  Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, tasks
from .losses import LossConfig
from .model import ModelConfig, SegmentModel
from .policy import (
    PolicyConfig,
    offline_decode,
    run_policy,
    summaries_from_jsonl,
    trace_to_jsonl,
)
from .training import TrainConfig, train
from .vocab import total_vocab


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "copy"
    vocab: int = 16
    min_len: int = 5
    max_len: int = 15
    train_count: int = 8000
    dev_count: int = 500
    test_count: int = 500
    data_seed: int = 0
    d: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn: int = 64
    dropout: float = 0.0
    lam: float = 0.3
    label_smoothing: float = 0.1
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.2
    warmup: int = 200
    seed: int = 0
    eval_every: int = 500
    eval_examples: int = 100
    policy: str = "adaptive"
    k: int = 3
    stride: int = 1
    segment_length: int = 4
    beam: int = 1
    tolerance: int = 0


# config-file/flag name -> dataclass field
KEY_ALIASES = {"lambda": "lam"}


def _field_types() -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else type(f.default)
            for f in dataclasses.fields(RunConfig)}


def parse_config_file(path) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    types = _field_types()
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            name = KEY_ALIASES.get(key, key)
            if name not in types:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, name, types[name](value))
    for name in types:
        override = getattr(args, name, None)
        if override is not None:
            setattr(cfg, name, override)
    return cfg


def model_config(cfg: RunConfig) -> ModelConfig:
    v = total_vocab(cfg.vocab)
    return ModelConfig(src_vocab=v, tgt_vocab=v, d=cfg.d, enc_layers=cfg.enc_layers,
                       dec_layers=cfg.dec_layers, heads=cfg.heads, ffn=cfg.ffn,
                       dropout=cfg.dropout)


def policy_config(cfg: RunConfig) -> PolicyConfig:
    return PolicyConfig(kind=cfg.policy, k=cfg.k, stride=cfg.stride,
                        segment_length=cfg.segment_length, beam=cfg.beam)


def task_spec(cfg: RunConfig, split: str) -> tasks.TaskSpec:
    offsets = {"train": 0, "dev": 1, "test": 2}
    return tasks.TaskSpec(kind=cfg.task, vocab_size=cfg.vocab, min_len=cfg.min_len,
                          max_len=cfg.max_len, seed=cfg.data_seed + offsets[split])


def offline_accuracy(model: SegmentModel, examples) -> float:
    if not examples:
        return 0.0
    total = 0.0
    for ex in examples:
        hyp = offline_decode(model, ex.source)
        total += metrics.generation_quality(hyp, ex.target)[0]
    return total / len(examples)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg.train_count, "dev": cfg.dev_count, "test": cfg.test_count}
    for split, count in counts.items():
        examples = tasks.generate(task_spec(cfg, split), count)
        path = out / f"{split}.jsonl"
        tasks.serialize(examples, path)
        print(f"wrote {count} {cfg.task} examples to {path}")
    return 0


def cmd_train(cfg: RunConfig, dataset: str, dev: str | None, out: str,
              log_path: str | None = None, quiet: bool = False) -> int:
    train_examples = tasks.deserialize(dataset)
    dev_examples = tasks.deserialize(dev)[: cfg.eval_examples] if dev else None
    model = SegmentModel.create(model_config(cfg), cfg.seed)
    train_cfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
                            warmup=cfg.warmup, seed=cfg.seed, eval_every=cfg.eval_every)
    loss_cfg = LossConfig(lam=cfg.lam, label_smoothing=cfg.label_smoothing)

    log_file = open(log_path, "w") if log_path else None

    def log_fn(entry):
        line = (f"step={entry.step} ce={entry.report.ce:.4f} "
                f"cw={entry.report.cw_term:.4f} al={entry.report.al_term:.4f} "
                f"total={entry.report.total:.4f} lr={entry.lr:.4g}")
        if entry.dev_accuracy is not None:
            line += f" dev_acc={entry.dev_accuracy:.4f}"
        if log_file:
            log_file.write(line + "\n")
        if not quiet and (entry.dev_accuracy is not None
                          or (entry.step + 1) % 100 == 0 or entry.step == 0):
            print(line)

    try:
        train(model, train_examples, train_cfg, loss_cfg,
              dev_examples=dev_examples, eval_fn=offline_accuracy, log_fn=log_fn)
    finally:
        if log_file:
            log_file.close()
    model.save(out)
    print(f"checkpoint written to {out}")
    return 0


def cmd_simulate(cfg: RunConfig, checkpoint: str, dataset: str, out: str) -> int:
    model = SegmentModel.load(checkpoint, model_config(cfg))
    examples = tasks.deserialize(dataset)
    pcfg = policy_config(cfg)
    with open(out, "w") as f:
        for index, ex in enumerate(examples):
            trace = run_policy(model, ex.source, pcfg)
            f.write(json.dumps({"type": "example", "index": index,
                                "source_len": len(ex.source)}) + "\n")
            f.write(trace_to_jsonl(trace) + "\n")
    print(f"wrote {len(examples)} traces to {out}")
    return 0


def _example_report(summary: dict, ex: tasks.Example, tolerance: int) -> dict:
    t = summary["t"]
    rep: dict = {
        "token_acc": None, "exact": None, "truncated": summary["truncated"],
        "al": None, "cw": None, "ap": None, "dal": None, "d_mean": None,
        "emission_acc": None, "seg_precision": None, "seg_recall": None,
        "seg_rvalue": None,
    }
    hyp = summary["hypothesis"]
    acc, exact = metrics.generation_quality(hyp, ex.target)
    rep["token_acc"], rep["exact"] = acc, exact
    rep["emission_acc"] = metrics.emission_accuracy(t, ex.alignment)
    if t:
        j_total = len(ex.source)
        lat = metrics.score_trace(t, j_total, gold_alignment=ex.alignment,
                                  truncated=summary["truncated"])
        rep.update(al=lat.al, cw=lat.cw, ap=lat.ap, dal=lat.dal,
                   d_mean=lat.mean_alignment_delay)
    seg = metrics.segmentation_quality(summary.get("boundaries", []),
                                       ex.boundaries, tolerance)
    rep.update(seg_precision=seg.precision, seg_recall=seg.recall,
               seg_rvalue=seg.r_value)
    return rep


def evaluate_summaries(summaries, examples, tolerance: int) -> dict:
    if len(summaries) != len(examples):
        raise ValueError(f"{len(summaries)} traces but {len(examples)} examples")
    per_example = [_example_report(s, ex, tolerance)
                   for s, ex in zip(summaries, examples)]
    corpus: dict = {"examples": len(per_example)}
    corpus["skipped_latency"] = sum(1 for r in per_example if r["al"] is None)
    corpus["truncated"] = sum(1 for r in per_example if r["truncated"])
    for key in ("al", "cw", "ap", "dal", "d_mean", "token_acc", "exact",
                "emission_acc", "seg_precision", "seg_recall", "seg_rvalue"):
        vals = [r[key] for r in per_example if r[key] is not None]
        corpus[key] = float(np.mean(vals)) if vals else None
    return {"corpus": corpus, "examples": per_example}


def cmd_evaluate(cfg: RunConfig, traces: str, dataset: str, out: str,
                 csv_path: str | None = None) -> int:
    with open(traces) as f:
        summaries = summaries_from_jsonl(f.read())
    examples = tasks.deserialize(dataset)
    report = evaluate_summaries(summaries, examples, cfg.tolerance)
    with open(out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    corpus = report["corpus"]
    print(f"evaluated {corpus['examples']} examples: "
          f"al={_fmt(corpus['al'])} cw={_fmt(corpus['cw'])} ap={_fmt(corpus['ap'])} "
          f"dal={_fmt(corpus['dal'])} token_acc={_fmt(corpus['token_acc'])}")
    if csv_path:
        metrics.write_tradeoff_csv([(cfg.lam, corpus["al"], corpus["cw"],
                                     corpus["ap"], corpus["dal"],
                                     corpus["token_acc"])], csv_path)
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def cmd_sweep(cfg: RunConfig, lambdas: list[float], out: str, workdir: str) -> int:
    if not lambdas:
        raise UsageError("empty lambda list")
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data_dir = work / "data"
    if not (data_dir / "train.jsonl").exists():
        cmd_gen_data(cfg, str(data_dir))
    rows = []
    for lam in lambdas:
        sub = dataclasses.replace(cfg, lam=lam)
        ckpt = work / f"model_lam{lam:g}.ckpt"
        traces = work / f"traces_lam{lam:g}.jsonl"
        report_path = work / f"report_lam{lam:g}.json"
        print(f"--- lambda = {lam:g} ---")
        cmd_train(sub, str(data_dir / "train.jsonl"), str(data_dir / "dev.jsonl"),
                  str(ckpt), quiet=True)
        cmd_simulate(sub, str(ckpt), str(data_dir / "test.jsonl"), str(traces))
        cmd_evaluate(sub, str(traces), str(data_dir / "test.jsonl"), str(report_path))
        with open(report_path) as f:
            corpus = json.load(f)["corpus"]
        rows.append((lam, corpus["al"], corpus["cw"], corpus["ap"], corpus["dal"],
                     corpus["token_acc"]))
    metrics.write_tradeoff_csv(rows, out)
    print(f"sweep written to {out}")
    return 0


def cmd_similarity(cfg: RunConfig, checkpoint: str, dataset: str, out: str) -> int:
    model = SegmentModel.load(checkpoint, model_config(cfg))
    examples = tasks.deserialize(dataset)
    report = metrics.representation_similarity(model, examples,
                                               policy_config(cfg))
    vectors_path = str(Path(out).with_suffix(".vectors.jsonl"))
    with open(vectors_path, "w") as f:
        for vec in report.vectors:
            f.write(json.dumps(vec) + "\n")
    with open(out, "w") as f:
        json.dump({
            "source_target": report.source_target,
            "source_segment": report.source_segment,
            "segment_target": report.segment_target,
            "segments": report.segments,
            "vectors_file": vectors_path,
        }, f, indent=2)
        f.write("\n")
    print(f"similarity over {report.segments} segments: "
          f"source<->target={report.source_target:.4f} "
          f"source<->segment={report.source_segment:.4f} "
          f"segment<->target={report.segment_target:.4f}")
    return 0


# -- argument parsing -------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    types = _field_types()
    flag_names = {name: name for name in types}
    for alias, name in KEY_ALIASES.items():
        flag_names[name] = alias
    for name, typ in types.items():
        p.add_argument(f"--{flag_names[name]}", dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simulseg",
        description="simultaneous generation with latent segments: train, "
                    "stream, and evaluate on synthetic transduction tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/dev/test JSONL splits")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="write the per-step log here")

    p = sub.add_parser("simulate", help="stream a dataset through a policy")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="trace JSONL path")

    p = sub.add_parser("evaluate", help="score traces against gold data")
    _add_config_flags(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="also write a tradeoff-curve CSV row")

    p = sub.add_parser("sweep", help="train/evaluate across latency weights")
    _add_config_flags(p)
    p.add_argument("--lambdas", required=True,
                   help="comma-separated latency weights, e.g. 0.6,0.3,0.1")
    p.add_argument("--out", required=True, help="tradeoff CSV path")
    p.add_argument("--workdir", required=True)

    p = sub.add_parser("similarity-report", help="segment-pivot cosine similarities")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.dev, args.out, args.log)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.checkpoint, args.dataset, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.traces, args.dataset, args.out, args.csv)
        if args.command == "sweep":
            lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
            return cmd_sweep(cfg, lambdas, args.out, args.workdir)
        if args.command == "similarity-report":
            return cmd_similarity(cfg, args.checkpoint, args.dataset, args.out)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
