"""Command-line experiment driver.

Every command writes into a run directory (``--out``, or a timestamped
directory under ``runs/``). Reports and metric files contain no wall-clock
values, so repeating a command with the same seeds reproduces them byte for
byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, from_dict, load_config, override
from .finetune import FinetuneConfig, aggregate, evaluate_tuned, finetune_run
from .graphstore import EventLog, build_index
from .ingest import RawDatasetSpec, filter_sparse, load_jodie_csv, write_jodie_csv
from .model import Checkpoint
from .pretrain import pretrain_run
from .protocol import SplitError, generate_synthetic, make_splits

log_ = logging.getLogger("tgprompt")

ABLATIONS = {
    "full": {},
    "w/o t.b.": {"disable_temporal": True},
    "w/o e.w.": {"disable_edge": True},
    "w/o f.m.": {"disable_feature": True},
}
BASELINE = ("classifier only", {"disable_temporal": True, "disable_edge": True,
                                "disable_feature": True})


# ---------------------------------------------------------------- arguments

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--dataset", help="JODIE CSV path, or 'synthetic'")
    common.add_argument("--backbone", choices=["mixer", "attn"])
    common.add_argument("--k-shot", type=int, dest="k_shot")
    common.add_argument("--alpha", type=_floats)
    common.add_argument("--beta", type=_floats)
    common.add_argument("--gamma", type=_floats)
    common.add_argument("--task", choices=["link", "node"])
    common.add_argument("--inductive", action="store_true", default=None)
    common.add_argument("--sparse-threshold", type=int, dest="sparse_threshold")
    common.add_argument("--seed", type=_ints, help="seed or comma-separated seeds")
    common.add_argument("--out", help="run directory (default: runs/<command>-<timestamp>)")
    common.add_argument("--checkpoint", help="checkpoint file, or a run directory holding one per seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tgprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="prompt + head few-shot tuning")
    ft.add_argument("--disable", action="append", choices=["temporal", "edge", "feature"],
                    default=[], help="switch off one prompt kind (repeatable)")
    sub.add_parser("evaluate", parents=[common], help="test metrics of fine-tuned checkpoints")
    ab = sub.add_parser("ablate", parents=[common], help="full model vs each prompt removed")
    ab.add_argument("--baseline", action="store_true", help="add a classifier-only row")
    sw = sub.add_parser("sweep", parents=[common], help="prompt-weight sensitivity")
    sw.add_argument("--grid", choices=["each", "full"], default="each",
                    help="vary one weight at a time (each) or the full product")
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic log as JODIE CSV")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    if args.dataset is not None:
        path = None if args.dataset == "synthetic" else args.dataset
        name = "synthetic" if path is None else Path(path).stem
        cfg = override(cfg, "dataset", name=name)
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, path=path))
    cfg = override(cfg, "model", backbone=args.backbone)
    cfg = override(cfg, "scenario", sparse_threshold=args.sparse_threshold)
    weights = {}
    for name in ("alpha", "beta", "gamma"):
        vals = getattr(args, name)
        if vals is None:
            continue
        if args.command == "sweep":
            cfg = override(cfg, "sweep", **{name: vals})
        elif len(vals) != 1:
            raise ConfigError(f"finetune.{name}: expected one value, got {len(vals)}")
        else:
            weights[name] = vals[0]
    cfg = override(cfg, "finetune", k=args.k_shot, task=args.task, inductive=args.inductive,
                   seeds=args.seed, **weights)
    for kind in getattr(args, "disable", []):
        cfg = override(cfg, "finetune", **{f"disable_{kind}": True})
    if not cfg.finetune.seeds:
        raise ConfigError("finetune.seeds: at least one seed is required")
    return cfg


# ---------------------------------------------------------------- data

def load_log(cfg: RunConfig) -> EventLog:
    ds = cfg.dataset
    if ds.path is None:
        log = generate_synthetic(cfg.synthetic)
    else:
        if not Path(ds.path).is_file():
            raise ConfigError(f"dataset.path: file not found: {ds.path}")
        log = load_jodie_csv(RawDatasetSpec(ds.path, ds.has_header, ds.d_E,
                                            ds.label_column_present, ds.zero_feat_width,
                                            ds.node_feat_width))
    sc = cfg.scenario
    if sc.sparse_threshold is not None:
        log = filter_sparse(log, sc.sparse_threshold, sc.endpoint_rule, sc.sparse_mode)
    return log


def make_plan(cfg: RunConfig, log: EventLog):
    try:
        return make_splits(log, cfg.finetune.k, cfg.finetune.task, cfg.scenario.pretrain_ratio)
    except SplitError as exc:
        raise ConfigError(f"finetune.k: {exc}") from None


# ---------------------------------------------------------------- run directory

class RunDir:
    def __init__(self, out: str | None, command: str):
        if out is None:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            out = Path("runs") / f"{command}-{stamp}"
        self.path = Path(out)
        self.path.mkdir(parents=True, exist_ok=True)

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    def write_json(self, name: str, obj) -> Path:
        p = self / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def write_jsonl(self, name: str, rows) -> Path:
        p = self / name
        p.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        return p

    def write_table(self, name: str, text: str) -> Path:
        p = self / name
        p.write_text(text)
        return p


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in header]] + [[_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(c) -> str:
    if isinstance(c, float):
        return f"{c:.4f}"
    if isinstance(c, tuple):
        return f"{c[0]:.4f} ± {c[1]:.4f}"
    return str(c)


# ---------------------------------------------------------------- workers

def _workers(n_jobs: int) -> int:
    raw = os.environ.get("TGP_NUM_WORKERS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"TGP_NUM_WORKERS: expected an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def _map(fn, jobs: list[tuple]) -> list:
    """Run ``fn(*job)`` for each job, in parallel when TGP_NUM_WORKERS allows; order kept."""
    n = _workers(len(jobs))
    if n == 1:
        return [fn(*job) for job in jobs]
    with cf.ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _pretrain_job(log, plan, cfg: RunConfig, seed: int):
    records = []
    pcfg = dataclasses.replace(cfg.pretrain, seed=seed)
    ck = pretrain_run(log, plan.pretrain, cfg.model, pcfg, on_epoch=records.append)
    return ck, [{"stage": "pretrain", "seed": seed, "epoch": r["epoch"], "loss": r["loss"]}
                for r in records]


def _finetune_job(ck: Checkpoint, log, plan, fcfg: FinetuneConfig, seed: int):
    res = finetune_run(ck, log, plan, fcfg, seed)
    # prompt/head modules do not need to cross process boundaries
    return dataclasses.replace(res, prompt=None, head=None), res.tuned_tensors()


# ---------------------------------------------------------------- checkpoints

def _checkpoint_for(spec: str | None, seed: int, prefix: str) -> Checkpoint:
    if spec is None:
        raise ConfigError("checkpoint: required for this command (pass --checkpoint)")
    path = Path(spec)
    if path.is_dir():
        path = path / f"{prefix}_seed{seed}.tgp"
    if not path.is_file():
        raise ConfigError(f"checkpoint: not found: {path}")
    try:
        return Checkpoint.load(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"checkpoint: cannot read {path}: {exc}") from None


def _check_compatible(ck: Checkpoint, log: EventLog) -> None:
    if (ck.d_N, ck.d_E) != (log.d_N, log.d_E):
        raise ConfigError(f"checkpoint: feature widths (d_N={ck.d_N}, d_E={ck.d_E}) do not "
                          f"match dataset (d_N={log.d_N}, d_E={log.d_E})")


def _pretrained(args, cfg, log, plan, run: RunDir) -> dict[int, Checkpoint]:
    """Checkpoints per seed: loaded from --checkpoint, or pretrained into the run directory."""
    seeds = cfg.seeds
    if args.checkpoint is not None:
        cks = {s: _checkpoint_for(args.checkpoint, s, "pretrain") for s in seeds}
    else:
        out = _map(_pretrain_job, [(log, plan, cfg, s) for s in seeds])
        cks = {}
        rows = []
        for s, (ck, recs) in zip(seeds, out):
            ck.save(run / f"pretrain_seed{s}.tgp")
            cks[s] = ck
            rows += recs
        run.write_jsonl("pretrain_metrics.jsonl", rows)
    for ck in cks.values():
        _check_compatible(ck, log)
    return cks


def _finetune_variants(cks, log, plan, variants: dict[str, FinetuneConfig]):
    jobs = [(cks[s], log, plan, fcfg, s) for fcfg in variants.values() for s in fcfg.seeds]
    out = iter(_map(_finetune_job, jobs))
    return {name: [next(out) for _ in fcfg.seeds] for name, fcfg in variants.items()}


def _mean_std(results, key):
    vals = np.array([r.metrics[key] for r in results])
    return float(vals.mean()), float(vals.std())


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(args, cfg: RunConfig, run: RunDir) -> dict:
    spec = cfg.synthetic
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed[0])
    log = generate_synthetic(spec)
    write_jodie_csv(log, run / "synthetic.csv")
    report = {"command": "gen-synthetic", "events": len(log), "nodes": log.num_nodes,
              "d_E": log.d_E, "spec": asdict(spec)}
    run.write_json("report.json", report)
    return report


def cmd_pretrain(args, cfg, run) -> dict:
    log = load_log(cfg)
    plan = make_plan(cfg, log)
    out = _map(_pretrain_job, [(log, plan, cfg, s) for s in cfg.seeds])
    rows, per_seed = [], []
    for s, (ck, recs) in zip(cfg.seeds, out):
        ck.save(run / f"pretrain_seed{s}.tgp")
        rows += recs
        per_seed.append({"seed": s, "best_loss": min(ck.loss_history),
                         "final_loss": ck.loss_history[-1], "epochs": len(ck.loss_history)})
    run.write_jsonl("metrics.jsonl", rows)
    report = {"command": "pretrain", "dataset": cfg.dataset.name, "seeds": cfg.seeds,
              "per_seed": per_seed, "split": plan.to_dict(), "run_config": cfg.to_dict()}
    run.write_json("report.json", report)
    run.write_table("table.txt", format_table(
        ["seed", "best loss", "final loss"],
        [[r["seed"], r["best_loss"], r["final_loss"]] for r in per_seed]))
    return report


def cmd_finetune(args, cfg, run) -> dict:
    log = load_log(cfg)
    plan = make_plan(cfg, log)
    cks = {s: _checkpoint_for(args.checkpoint, s, "pretrain") for s in cfg.seeds}
    for ck in cks.values():
        _check_compatible(ck, log)
    results = _finetune_variants(cks, log, plan, {"run": cfg.finetune})["run"]
    rows = []
    for s, (res, tuned) in zip(cfg.seeds, results):
        cks[s].save(run / f"finetuned_seed{s}.tgp", extra_tensors=tuned,
                    extra_meta={"kind": "finetune", "finetune": asdict(cfg.finetune),
                                "tuned_seed": s})
        rows += [{"stage": "finetune", "seed": s, "epoch": e + 1, "val": v}
                 for e, v in enumerate(res.per_epoch_validation)]
    run.write_jsonl("metrics.jsonl", rows)
    report = aggregate([r for r, _ in results], cfg.finetune, cfg.dataset.name)
    report.update(command="finetune", split=plan.to_dict(), run_config=cfg.to_dict())
    run.write_json("report.json", report)
    keys = ["ap", "auc"] if cfg.finetune.task == "link" else ["auc"]
    table = [[r.seed] + [r.metrics[k] for k in keys] + [r.best_epoch] for r, _ in results]
    table.append(["mean"] + [report[k] for k in keys] + [""])
    run.write_table("table.txt", format_table(["seed"] + [k.upper() for k in keys] + ["best epoch"],
                                              table))
    return report


def cmd_evaluate(args, cfg, run) -> dict:
    log = load_log(cfg)
    per_seed = []
    for s in cfg.seeds:
        ck = _checkpoint_for(args.checkpoint, s, "finetuned")
        _check_compatible(ck, log)
        if "finetune" not in ck.meta:
            raise ConfigError("checkpoint: not a fine-tuned checkpoint (run finetune first)")
        fcfg = FinetuneConfig(**ck.meta["finetune"])
        plan = make_splits(log, fcfg.k, fcfg.task, cfg.scenario.pretrain_ratio)
        per_seed.append({"seed": s, **evaluate_tuned(ck, log, plan, fcfg, s)})
    keys = [k for k in ("ap", "auc") if k in per_seed[0]]
    report = {"command": "evaluate", "dataset": cfg.dataset.name, "seeds": cfg.seeds,
              "per_seed": per_seed, "run_config": cfg.to_dict()}
    for k in keys:
        vals = np.array([r[k] for r in per_seed])
        report[k], report[f"{k}_std"] = float(vals.mean()), float(vals.std())
    run.write_json("report.json", report)
    rows = [[r["seed"]] + [r[k] for k in keys] for r in per_seed]
    rows.append(["mean"] + [report[k] for k in keys])
    run.write_table("table.txt", format_table(["seed"] + [k.upper() for k in keys], rows))
    return report


def _variant_report(name_to_results, variants, keys) -> tuple[list[dict], list[list]]:
    rows, table = [], []
    for name, results in name_to_results.items():
        res = [r for r, _ in results]
        row = {"variant": name, "config": {k: v for k, v in asdict(variants[name]).items()
                                           if k in ("alpha", "beta", "gamma", "disable_temporal",
                                                    "disable_edge", "disable_feature")},
               "per_seed": [r.summary() for r in res]}
        cells = [name]
        for k in keys:
            m, sd = _mean_std(res, k)
            row[k], row[f"{k}_std"] = m, sd
            cells.append((m, sd))
        rows.append(row)
        table.append(cells)
    return rows, table


def cmd_ablate(args, cfg, run) -> dict:
    log = load_log(cfg)
    plan = make_plan(cfg, log)
    cks = _pretrained(args, cfg, log, plan, run)
    base = cfg.finetune
    variants = {name: dataclasses.replace(base, **flags) for name, flags in ABLATIONS.items()}
    if args.baseline:
        variants[BASELINE[0]] = dataclasses.replace(base, **BASELINE[1])
    results = _finetune_variants(cks, log, plan, variants)
    keys = ["ap", "auc"] if base.task == "link" else ["auc"]
    rows, table = _variant_report(results, variants, keys)
    report = {"command": "ablate", "dataset": cfg.dataset.name, "task": base.task,
              "seeds": cfg.seeds, "rows": rows, "run_config": cfg.to_dict()}
    run.write_json("report.json", report)
    run.write_jsonl("metrics.jsonl", [{"variant": r["variant"], **s} for r in rows
                                      for s in r["per_seed"]])
    run.write_table("table.txt", format_table(["variant"] + [k.upper() for k in keys], table))
    return report


def sweep_points(cfg: RunConfig, grid: str) -> list[tuple[str, dict]]:
    sw, ft = cfg.sweep, cfg.finetune
    if grid == "full":
        return [(f"a={a:g} b={b:g} g={g:g}", {"alpha": a, "beta": b, "gamma": g})
                for a, b, g in itertools.product(sw.alpha, sw.beta, sw.gamma)]
    points = []
    for name, sym in (("alpha", "a"), ("beta", "b"), ("gamma", "g")):
        for v in getattr(sw, name):
            points.append((f"{sym}={v:g}", {name: v}))
    return points


def cmd_sweep(args, cfg, run) -> dict:
    log = load_log(cfg)
    plan = make_plan(cfg, log)
    cks = _pretrained(args, cfg, log, plan, run)
    variants = {label: dataclasses.replace(cfg.finetune, **vals)
                for label, vals in sweep_points(cfg, args.grid)}
    results = _finetune_variants(cks, log, plan, variants)
    keys = ["ap", "auc"] if cfg.finetune.task == "link" else ["auc"]
    rows, table = _variant_report(results, variants, keys)
    report = {"command": "sweep", "grid": args.grid, "dataset": cfg.dataset.name,
              "seeds": cfg.seeds, "rows": rows, "run_config": cfg.to_dict()}
    run.write_json("report.json", report)
    run.write_table("table.txt", format_table(["setting"] + [k.upper() for k in keys], table))
    return report


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = RunDir(args.out, args.command)
        COMMANDS[args.command](args, cfg, run)
    except ConfigError as exc:
        print(f"tgprompt: config error: {exc}", file=sys.stderr)
        return 2
    print(run.path)
    table = run / "table.txt"
    if table.exists():
        print(table.read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
