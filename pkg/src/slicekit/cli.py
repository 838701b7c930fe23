"""Command-line entry points: train, probe, sweep, dump-dataset, eval.

One run per process; every artifact lands under the run's --out directory.
`--set section.key=value` overrides any config key; `--paper-scale` swaps
in the full-scale protocol values (the desk-scale defaults are what the
bundled acceptance runs use).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import flows
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .diagnostics import (GramProbeConfig, OrderProbeConfig,
                          diagonal_depth_invariance, gram_sweep,
                          logode_order_probe, profile_probe,
                          scan_equivalence_probe)
from .model import (BLOCK_GLU, BLOCK_TANH, SOLVER_HYBRID, SOLVER_PARALLEL,
                    SOLVER_SEQUENTIAL, SliceLayerConfig, SliceModelConfig,
                    SliceModel)
from .rng import Rng
from .structured import (BLOCK_DIAGONAL, DENSE, DIAGONAL, DPLR, SPARSE,
                         WALSH_HADAMARD, kind_of)
from .tasks import LengthSampler, dump_instances, length_split, task_spec
from .train import AdamState, TrainConfig, TrainingDiverged, evaluate, train


def kind_from_config(model_cfg: dict, d_h: int):
    name = model_cfg["kind"]
    if name == DPLR:
        return kind_of(DPLR, rank=model_cfg["rank"])
    if name == BLOCK_DIAGONAL:
        b = model_cfg["block_size"]
        if d_h % b:
            raise ConfigError(f"block_size {b} must divide d_h {d_h}")
        return kind_of(BLOCK_DIAGONAL, blocks=(b,) * (d_h // b))
    if name == SPARSE:
        return kind_of(SPARSE, density=model_cfg["density"])
    if name in (DENSE, DIAGONAL, WALSH_HADAMARD):
        return kind_of(name)
    raise ConfigError(f"unknown structure kind {name!r}")


def build_model(cfg: RunConfig) -> SliceModel:
    task = task_spec(cfg["task"]["id"])
    m = cfg["model"]
    kind = kind_from_config(m, m["d_h"])
    solver = {"sequential": SOLVER_SEQUENTIAL, "parallel_scan": SOLVER_PARALLEL,
              "hybrid": SOLVER_HYBRID}.get(m["solver"])
    if solver is None:
        raise ConfigError(f"unknown solver {m['solver']!r}")
    style = {"tanh_mix": BLOCK_TANH, "glu": BLOCK_GLU}.get(m["block_style"])
    if style is None:
        raise ConfigError(f"unknown block style {m['block_style']!r}")
    layers = [SliceLayerConfig(kind, m["d_h"], solver=solver)
              for _ in range(m["layers"])]
    model_cfg = SliceModelConfig(
        vocab_size=task.vocab_size, embed_dim=m["embed_dim"],
        n_classes=task.n_classes, layers=layers, block_style=style,
        dropout=m["dropout"], embed_std=m["embed_std"])
    return SliceModel(model_cfg, Rng(cfg["train"]["seed"]))


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    task = cfg["task"]
    ranges = {}
    if task["train_low"] and task["train_high"]:
        ranges["train_lengths"] = (task["train_low"], task["train_high"])
    if task["eval_low"] and task["eval_high"]:
        ranges["eval_lengths"] = (task["eval_low"], task["eval_high"])
    return TrainConfig(
        steps=t["steps"], batch_size=t["batch_size"], peak_lr=t["peak_lr"],
        min_lr=t["min_lr"], warmup_steps=t["warmup_steps"],
        weight_decay=t["weight_decay"], seed=t["seed"],
        eval_every=t["eval_every"], len2_fraction=t["len2_fraction"],
        grad_clip=t["grad_clip"], **ranges)


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if getattr(args, "paper_scale", False):
        cfg.apply_paper_scale()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        cfg.set(dotted.strip(), raw.strip())
    return cfg


def checkpoint_of(model: SliceModel, state: AdamState | None, step: int,
                  cfg: RunConfig, path: str) -> None:
    buffers = dict(model.params)
    if state is not None:
        buffers.update({f"adam_m.{k}": v for k, v in state.m.items()})
        buffers.update({f"adam_v.{k}": v for k, v in state.v.items()})
    save_checkpoint(path, step, cfg.serialize(), buffers)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    model = build_model(cfg)
    tc = train_config(cfg)
    task_id = cfg["task"]["id"]
    eval_lengths = None
    if args.eval_lengths:
        eval_lengths = [int(x) for x in args.eval_lengths.split(",")]
    log = (lambda *_: None) if args.quiet else print
    if tc.steps == 0:
        checkpoint_of(model, None, 0, cfg, os.path.join(args.out, "checkpoint.bin"))
    try:
        train(model, task_id, tc, args.out, eval_lengths=eval_lengths,
              stop_at=args.stop_at, log=log)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    checkpoint_of(model, None, tc.steps, cfg, os.path.join(args.out, "checkpoint.bin"))
    _write_summary(os.path.join(args.out, "metrics.csv"),
                   os.path.join(args.out, "summary.csv"))
    if args.profile:
        print("flow counters:", flows.counters())
    return 0


def _write_summary(metrics_path: str, summary_path: str) -> None:
    """Best validation accuracy per evaluation length across the run."""
    with open(metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        with open(summary_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["length", "best_acc_final", "best_acc_all"])
        return
    lengths = sorted(int(k[len("acc_final_len"):]) for k in rows[0]
                     if k.startswith("acc_final_len"))
    out = []
    for n in lengths:
        out.append({
            "length": n,
            "best_acc_final": max(float(r[f"acc_final_len{n}"]) for r in rows),
            "best_acc_all": max(float(r[f"acc_all_len{n}"]) for r in rows),
        })
    _write_csv(summary_path, out, ["length", "best_acc_final", "best_acc_all"])


def cmd_eval(args) -> int:
    step, config_text, buffers = load_checkpoint(args.checkpoint)
    cfg = parse_config(config_text)
    model = build_model(cfg)
    for name in model.params:
        if name not in buffers:
            raise CheckpointErrorLike(f"checkpoint missing buffer {name}")
        model.params[name][...] = buffers[name]
    lengths = [int(x) for x in args.lengths.split(",")]
    table = evaluate(model, cfg["task"]["id"], lengths, seed=args.seed,
                     per_length=args.per_length)
    rows = [{"length": n, "acc_final": table[n]["acc_final"],
             "acc_all": table[n]["acc_all"]} for n in lengths]
    for row in rows:
        print(f"length {row['length']}: acc_final={row['acc_final']:.4f} "
              f"acc_all={row['acc_all']:.4f}")
    if args.out:
        _write_csv(args.out, rows, ["length", "acc_final", "acc_all"])
    return 0


class CheckpointErrorLike(RuntimeError):
    pass


def cmd_probe(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    failures = []
    if args.kind == "scan-equivalence":
        rows = scan_equivalence_probe(seeds=args.seeds, n_max=args.n_max,
                                      d_h=args.d_h)
        _write_csv(os.path.join(args.out, "scan_equivalence.csv"), rows,
                   ["kind", "seeds", "n_max", "d_h", "max_rel_error"])
        failures = [r for r in rows if r["max_rel_error"] > 1e-10]
    elif args.kind == "profile":
        rows = profile_probe()
        _write_csv(os.path.join(args.out, "profile.csv"), rows,
                   ["kind", "n", "d_h", "dense_materializations",
                    "combine_ops", "combine_rounds"])
        for r in rows:
            closed = r["kind"] in (DIAGONAL, BLOCK_DIAGONAL)
            bad = (closed and r["dense_materializations"] != 0) or \
                  (not closed and r["dense_materializations"] < 1)
            if bad:
                failures.append(r)
    elif args.kind == "gram":
        cfg = GramProbeConfig(trials=args.trials)
        rows = gram_sweep(cfg)
        _write_csv(os.path.join(args.out, "gram.csv"), rows,
                   ["kind", "d_h", "word_i", "word_j", "median_gram",
                    "median_abs_dev", "iqr"])
        top = max(cfg.dims)
        for r in rows:
            if r["d_h"] != top:
                continue
            same = r["word_i"] == r["word_j"]
            if r["kind"] == DIAGONAL and (r["word_i"], r["word_j"]) == ("12", "21"):
                if r["median_gram"] < 0.8:
                    failures.append(r)
            elif r["kind"] != DIAGONAL and same and abs(r["median_gram"] - 1) > 0.3:
                failures.append(r)
    elif args.kind == "logode-order":
        res = logode_order_probe(OrderProbeConfig())
        _write_csv(os.path.join(args.out, "logode_order.csv"), res["rows"],
                   ["kind", "depth", "width", "error", "slope"])
        if not (0.7 <= res["slopes"][1] <= 1.3 and 1.7 <= res["slopes"][2] <= 2.3):
            failures.append(res["slopes"])
        if diagonal_depth_invariance(OrderProbeConfig()) > 1e-12:
            failures.append({"diagonal_invariance": "violated"})
    else:
        print(f"unknown probe {args.kind!r}", file=sys.stderr)
        return 2
    if args.profile:
        print("flow counters:", flows.counters())
    if failures:
        print(f"probe {args.kind}: {len(failures)} threshold failure(s)",
              file=sys.stderr)
        return 1
    print(f"probe {args.kind}: ok")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    lengths = [int(x) for x in args.lengths.split(",")]
    kinds = args.kinds.split(",")
    rows = []
    for kind_name in kinds:
        best: dict[int, int | str] = {n: "fail" for n in lengths}
        for n_layers in range(1, args.max_layers + 1):
            cfg.set("model.kind", kind_name)
            cfg.set("model.layers", str(n_layers))
            model = build_model(cfg)
            tc = train_config(cfg)
            run_dir = os.path.join(args.out, f"{kind_name}_L{n_layers}")
            table = train(model, cfg["task"]["id"], tc, run_dir,
                          eval_lengths=lengths, stop_at=args.target,
                          log=(lambda *_: None) if args.quiet else print)
            for n in lengths:
                if best[n] == "fail" and table and table[n]["acc_final"] >= args.target:
                    best[n] = n_layers
            if all(v != "fail" for v in best.values()):
                break
        for n in lengths:
            rows.append({"kind": kind_name, "length": n, "layers_needed": best[n]})
    _write_csv(os.path.join(args.out, "layer_sweep.csv"), rows,
               ["kind", "length", "layers_needed"])
    return 0


def cmd_dump_dataset(args) -> int:
    sampler = LengthSampler(args.low, args.high) if args.low and args.high \
        else length_split(args.task)[0]
    lines = dump_instances(args.task, Rng(args.seed), args.count, sampler)
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="slicekit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="train a model per the run config")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--set", action="append", metavar="section.key=value")
    p_train.add_argument("--paper-scale", action="store_true")
    p_train.add_argument("--eval-lengths", default=None)
    p_train.add_argument("--stop-at", type=float, default=None)
    p_train.add_argument("--quiet", action="store_true")
    p_train.add_argument("--profile", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--lengths", required=True)
    p_eval.add_argument("--per-length", type=int, default=128)
    p_eval.add_argument("--seed", type=int, default=7919)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_probe = sub.add_parser("probe", help="run a diagnostics probe")
    p_probe.add_argument("kind", choices=["gram", "logode-order",
                                          "scan-equivalence", "profile"])
    p_probe.add_argument("--out", required=True)
    p_probe.add_argument("--trials", type=int, default=200)
    p_probe.add_argument("--seeds", type=int, default=20)
    p_probe.add_argument("--n-max", type=int, default=1024)
    p_probe.add_argument("--d-h", type=int, default=64)
    p_probe.add_argument("--profile", action="store_true")
    p_probe.set_defaults(func=cmd_probe)

    p_sweep = sub.add_parser("sweep", help="layers-needed table over kinds")
    p_sweep.add_argument("--config", default=None)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--kinds", default="diagonal,block_diagonal")
    p_sweep.add_argument("--lengths", default="3,5,8")
    p_sweep.add_argument("--max-layers", type=int, default=4)
    p_sweep.add_argument("--target", type=float, default=0.9)
    p_sweep.add_argument("--set", action="append", metavar="section.key=value")
    p_sweep.add_argument("--paper-scale", action="store_true")
    p_sweep.add_argument("--quiet", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_dump = sub.add_parser("dump-dataset", help="emit tokens<TAB>labels lines")
    p_dump.add_argument("--task", required=True)
    p_dump.add_argument("--count", type=int, default=100)
    p_dump.add_argument("--seed", type=int, default=0)
    p_dump.add_argument("--low", type=int, default=0)
    p_dump.add_argument("--high", type=int, default=0)
    p_dump.add_argument("--out", default=None)
    p_dump.set_defaults(func=cmd_dump_dataset)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
