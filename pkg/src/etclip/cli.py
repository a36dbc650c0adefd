"""Command-line entry point: ``etclip <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; set ``ETCLIP_VERBOSITY`` (debug, info, warning, error) for more or
less of them.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Sequence

from .agent import AgentConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .dualenc import DualEncoderConfig
from .evalkit import (SUBSETS, build_report, compare, emit_comparison, emit_report,
                      load_results, save_results, subset_flags)
from .trainer import (ConfigError, PretrainConfig, TrainConfig, agent_from_checkpoint,
                      evaluate, pretrain_dualenc, train)
from .worldgen import SPLITS, WorldConfig, build_dataset, load_dataset

log = logging.getLogger("etclip")

SECTIONS = ("worldgen", "dualenc", "pretrain", "agent", "train", "eval")
AB_FIELDS = ("seed", "mode", "split", "success_rate", "goal_conditioned_success_rate", "episodes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- configuration ----------------------------------------------------------

def load_config(path: str | None) -> dict:
    cfg = {s: {} for s in SECTIONS}
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or set(raw) - set(SECTIONS):
        raise UsageError(f"config sections must be a subset of {SECTIONS}")
    for k, v in raw.items():
        cfg[k] = dict(v)
    return cfg


def apply_override(cfg: dict, assignment: str):
    """Set ``section.field=value``; the value is parsed as JSON when possible."""
    key, sep, value = assignment.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or section not in SECTIONS or not name:
        raise UsageError(f"--set expects section.field=value, got {assignment!r}")
    try:
        cfg[section][name] = json.loads(value)
    except json.JSONDecodeError:
        cfg[section][name] = value


def _apply_flags(cfg: dict, args) -> dict:
    for a in getattr(args, "set", None) or []:
        apply_override(cfg, a)
    tr = cfg["train"]
    if getattr(args, "mode", None) is not None:
        tr["mode"] = args.mode
    if getattr(args, "alpha", None) is not None:
        tr["alpha"] = args.alpha
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    return cfg


def _build(kind, d: dict):
    try:
        return kind.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {kind.__name__}: {e}") from e


def _train_config(cfg: dict, seed: int | None) -> TrainConfig:
    d = dict(cfg["train"])
    if seed is not None:
        d["seed"] = seed
    return _build(TrainConfig, d)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg):
    wcfg = _build(WorldConfig, cfg["worldgen"])
    seed = args.seed if args.seed is not None else 0
    ds = build_dataset(wcfg, seed, args.out)
    log.info("wrote %s", {k: len(v) for k, v in ds.splits.items()})


def cmd_pretrain_clip(args, cfg):
    ds = load_dataset(args.data, splits=("train",))
    pcfg = dict(cfg["pretrain"])
    if args.seed is not None:
        pcfg["seed"] = args.seed
    if args.epochs is not None:
        pcfg["epochs"] = args.epochs
    res = pretrain_dualenc(ds, _build(PretrainConfig, pcfg), _build(DualEncoderConfig, cfg["dualenc"]))
    out = Path(args.out)
    save_checkpoint(res.checkpoint, out / "dualenc.etcp")
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in res.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("final probe accuracy %.3f", res.checkpoint.config["meta"]["final_probe_accuracy"])


def _run_training(ds, tcfg: TrainConfig, agent_cfg: AgentConfig, dualenc_path, out: Path, resume=None):
    out.mkdir(parents=True, exist_ok=True)
    if tcfg.mode == "clip_aux" and dualenc_path is None and resume is None:
        raise UsageError("--mode clip_aux needs --checkpoint pointing at a pretrained dual encoder")
    # baseline never opens the dual-encoder file
    pretrained = load_checkpoint(dualenc_path) if tcfg.mode == "clip_aux" and resume is None else None
    log_path = out / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    res = train(ds, tcfg, agent_cfg, pretrained=pretrained, resume=resume, log_path=log_path)
    save_checkpoint(res.checkpoint, out / "model.etcp")
    (out / "config.json").write_text(json.dumps({"train": res.checkpoint.config["train"],
                                                 "agent": res.checkpoint.config["agent"]},
                                                indent=2, sort_keys=True), encoding="utf-8")
    return res


def cmd_train(args, cfg):
    ds = load_dataset(args.data, splits=("train", "valid_seen", "valid_unseen"))
    tcfg = _train_config(cfg, args.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    _run_training(ds, tcfg, _build(AgentConfig, cfg["agent"]), args.checkpoint, Path(args.out), resume)


def _max_steps(cfg) -> int:
    return int(cfg["eval"].get("max_steps", 48))


def cmd_eval(args, cfg):
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    ds = load_dataset(args.data, splits=(args.split,))
    agent = agent_from_checkpoint(load_checkpoint(args.checkpoint))
    results = evaluate(agent, ds.splits[args.split], ds, _max_steps(cfg))
    out = Path(args.out)
    save_results(results, out / "results.jsonl")
    emit_report(build_report(results, args.split, label=str(args.checkpoint)), out)


def cmd_analyze(args, cfg):
    """Dataset statistics: split sizes, subset membership, episode lengths, rare tokens."""
    ds = load_dataset(args.data)
    summary = {"splits": {}, "rare_tokens": sorted(t for t, c in ds.frequencies.items() if c < 30)}
    for name, eps in ds.splits.items():
        counts = {s: 0 for s in SUBSETS if s != "all"}
        for ep in eps:
            for s, flag in subset_flags(ep, ds.frequencies).items():
                counts[s] += int(flag)
        lengths = [len(ep) for ep in eps]
        summary["splits"][name] = {
            "episodes": len(eps), "subsets": counts,
            "mean_length": statistics.fmean(lengths) if lengths else 0.0,
            "max_length": max(lengths, default=0)}
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "analysis.json").write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _results_and_split(path: str, default_split: str):
    p = Path(path)
    if p.is_dir():
        meta = p / "report.json"
        split = json.loads(meta.read_text())["split"] if meta.exists() else default_split
        return load_results(p / "results.jsonl"), split
    return load_results(p), default_split


def cmd_report(args, cfg):
    out = Path(args.out)
    if args.compare:
        base, split_b = _results_and_split(args.compare[0], args.split)
        aug, split_a = _results_and_split(args.compare[1], args.split)
        cmp = compare(build_report(base, split_b, "baseline"), build_report(aug, split_a, "clip_aux"))
        emit_comparison(cmp, out)
        sys.stdout.write((out / "comparison.md").read_text())
    elif args.results:
        results, split = _results_and_split(args.results, args.split)
        emit_report(build_report(results, split), out)
        sys.stdout.write((out / "report.md").read_text())
    else:
        raise UsageError("report needs --compare BASE AUG or a results path")


def median_paired_delta(rows: Sequence[dict], metric: str = "goal_conditioned_success_rate") -> float:
    """Median over seeds of (clip_aux - baseline) for ``metric``."""
    by_seed: dict[int, dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(int(r["seed"]), {})[r["mode"]] = float(r[metric])
    deltas = [v["clip_aux"] - v["baseline"] for v in by_seed.values()]
    if not deltas:
        raise ValueError("no paired seeds")
    return statistics.median(deltas)


def ab_experiment(ds, cfg: dict, n_seeds: int, out: Path, base_seed: int = 0,
                  dualenc_path=None, split: str = "valid_unseen") -> dict:
    """Paired baseline / clip_aux runs over ``n_seeds`` seeds on one dataset."""
    if n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    if dualenc_path is None:
        dualenc_path = out / "dualenc.etcp"
        if not dualenc_path.exists():
            res = pretrain_dualenc(ds, _build(PretrainConfig, cfg["pretrain"]),
                                   _build(DualEncoderConfig, cfg["dualenc"]))
            save_checkpoint(res.checkpoint, dualenc_path)
    agent_cfg = _build(AgentConfig, cfg["agent"])
    rows, comparisons = [], []
    for seed in range(base_seed, base_seed + n_seeds):
        reports = {}
        for mode in ("baseline", "clip_aux"):
            tcfg = _train_config({**cfg, "train": {**cfg["train"], "mode": mode}}, seed)
            run_dir = out / f"seed{seed}" / mode
            res = _run_training(ds, tcfg, agent_cfg, dualenc_path, run_dir)
            results = evaluate(res.agent, ds.splits[split], ds, _max_steps(cfg))
            save_results(results, run_dir / "results.jsonl")
            rep = build_report(results, split, label=mode)
            emit_report(rep, run_dir)
            reports[mode] = rep
            agg = rep.rows["all"]
            rows.append({"seed": seed, "mode": mode, "split": split,
                         "success_rate": repr(agg.success_rate),
                         "goal_conditioned_success_rate": repr(agg.goal_conditioned_success_rate),
                         "episodes": agg.count})
            log.info("seed %d %s: SR %.2f GC %.2f", seed, mode, agg.success_rate,
                     agg.goal_conditioned_success_rate)
        cmp = compare(reports["baseline"], reports["clip_aux"])
        emit_comparison(cmp, out / f"seed{seed}")
        comparisons.append(cmp)
    with open(out / "ab_seeds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=AB_FIELDS)
        w.writeheader()
        w.writerows(rows)
    summary = {"split": split, "n_seeds": n_seeds,
               "median_delta_goal_conditioned_success_rate": median_paired_delta(rows),
               "median_delta_success_rate": median_paired_delta(rows, "success_rate")}
    (out / "ab_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    lines = ["| Seed | Baseline GC-SR | CLIP-aux GC-SR | Delta |", "|---|---|---|---|"]
    for cmp, seed in zip(comparisons, range(base_seed, base_seed + n_seeds)):
        row = cmp.rows[0]
        lines.append(f"| {seed} | {row.baseline.goal_conditioned_success_rate:.2f} | "
                     f"{row.augmented.goal_conditioned_success_rate:.2f} | "
                     f"{row.delta('goal_conditioned_success_rate'):+.2f} |")
    lines.append(f"\nMedian paired delta (GC-SR): "
                 f"{summary['median_delta_goal_conditioned_success_rate']:+.2f}\n")
    (out / "ab_report.md").write_text("\n".join(lines), encoding="utf-8")
    return summary


def cmd_ab_experiment(args, cfg):
    ds = load_dataset(args.data, splits=("train", args.split))
    summary = ab_experiment(ds, cfg, args.n_seeds, Path(args.out),
                            base_seed=args.seed if args.seed is not None else 0,
                            dualenc_path=args.checkpoint, split=args.split)
    print(json.dumps(summary, sort_keys=True))


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="etclip", description="Toy instruction-following agent with an auxiliary "
                                           "contrastive object loss.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, *, data=True, out_required=True, help=""):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON config with per-module sections")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field (repeatable)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory from gen-data")
        return sp

    add("gen-data", cmd_gen_data, data=False, help="generate the gridworld dataset")
    sp = add("pretrain-clip", cmd_pretrain_clip, help="contrastively pretrain the dual encoder")
    sp.add_argument("--epochs", type=int)
    for name, fn, h in (("train", cmd_train, "train the agent"),
                        ("ab-experiment", cmd_ab_experiment, "paired multi-seed baseline vs clip_aux")):
        sp = add(name, fn, help=h)
        sp.add_argument("--mode", choices=("baseline", "clip_aux"))
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--checkpoint", help="pretrained dual-encoder checkpoint")
        if name == "train":
            sp.add_argument("--resume", help="run checkpoint to continue from")
        else:
            sp.add_argument("--n-seeds", type=int, default=5)
            sp.add_argument("--split", choices=SPLITS, default="valid_unseen")
    sp = add("eval", cmd_eval, help="roll out a trained agent")
    sp.add_argument("--checkpoint", required=True, help="run checkpoint from train")
    sp.add_argument("--split", choices=SPLITS, default="valid_unseen")
    sp = add("analyze", cmd_analyze, out_required=False, help="dataset statistics")
    sp = add("report", cmd_report, data=False, help="render reports and comparisons")
    sp.add_argument("results", nargs="?", help="results JSONL or eval output directory")
    sp.add_argument("--compare", nargs=2, metavar=("BASE", "AUG"))
    sp.add_argument("--split", choices=SPLITS, default="valid_unseen")
    return p


def _setup_logging():
    level = os.environ.get("ETCLIP_VERBOSITY", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = _apply_flags(load_config(args.config), args)
        args.fn(args, cfg)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
