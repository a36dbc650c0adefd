"""Rollouts, success metrics, instruction subsets and improvement tables.

Goal-conditioned success rate is the unweighted mean over episodes of the
fraction of goal conditions satisfied at termination (no path-length
weighting). Human-readable tables round half-up to one decimal; CSV output
keeps full precision.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .worldgen import (ALIAS_TO_CLASS, COLORS, OBJECT_CLASSES, SMALL, STOP, Episode, Simulator,
                       _glyph_mask, SMALL_AREA_THRESHOLD)

log = logging.getLogger(__name__)

SUBSETS = ("all", "object_properties", "small_objects", "rare_semantics")
SUBSET_LABELS = {
    "all": "All",
    "object_properties": "Object properties",
    "small_objects": "Small objects",
    "rare_semantics": "Rare semantics",
}
RARE_COUNT = 30
OBJECT_NOUNS = frozenset(OBJECT_CLASSES) | frozenset(ALIAS_TO_CLASS)


class ComparisonError(ValueError):
    pass


# -- subsets ----------------------------------------------------------------

def is_rare(token: str, frequencies: Mapping[str, int]) -> bool:
    if token not in frequencies:
        log.info("token %r absent from frequency table; counted as 0", token)
    return frequencies.get(token, 0) < RARE_COUNT


def has_color_modifier(tokens: Sequence[str]) -> bool:
    return any(a in COLORS and b in OBJECT_NOUNS for a, b in zip(tokens, tokens[1:]))


def subset_flags(episode: Episode, frequencies: Mapping[str, int], small_mode: str = "metadata",
                 small_nouns: Sequence[str] = ("pencil", "key")) -> dict[str, bool]:
    """Flags for the object-properties, small-objects and rare-semantics subsets.

    ``small_mode="metadata"`` uses the simulator's ground truth (the task's
    target glyph footprint); ``"nouns"`` matches instruction words against
    ``small_nouns`` for datasets without size metadata.
    """
    tokens = episode.instruction
    if small_mode == "metadata":
        target = episode.target
        area = int(_glyph_mask(target.name, 4).sum())
        small = target.size_class == SMALL and area < SMALL_AREA_THRESHOLD
    elif small_mode == "nouns":
        small = any(t in small_nouns for t in tokens)
    else:
        raise ValueError(f"unknown small_mode {small_mode!r}")
    return {
        "object_properties": has_color_modifier(tokens),
        "small_objects": bool(small),
        "rare_semantics": any(is_rare(t, frequencies) for t in tokens),
    }


# -- results and aggregation ------------------------------------------------

@dataclass
class EpisodeResult:
    episode_id: str
    success: bool
    goal_fraction: float
    steps_taken: int
    object_properties: bool = False
    small_objects: bool = False
    rare_semantics: bool = False

    def __post_init__(self):
        if not 0.0 <= self.goal_fraction <= 1.0:
            raise ValueError("goal_fraction must lie in [0, 1]")
        if self.success and self.goal_fraction != 1.0:
            raise ValueError("a successful episode must satisfy every condition")


@dataclass(frozen=True)
class Aggregate:
    success_rate: float
    goal_conditioned_success_rate: float
    count: int


def aggregate(results: Sequence[EpisodeResult]) -> Aggregate:
    if not results:
        raise ValueError("cannot aggregate an empty result set")
    n = len(results)
    # exact rational arithmetic, rounded once: independent of episode order
    sr = Fraction(100 * sum(1 for r in results if r.success), n)
    gc = 100 * sum(Fraction(r.goal_fraction) for r in results) / n
    return Aggregate(float(sr), float(gc), n)


@dataclass
class RunReport:
    split: str
    rows: dict[str, Aggregate | None]
    episode_ids: tuple[str, ...]
    label: str = ""

    def to_json(self) -> dict:
        return {"split": self.split, "label": self.label, "episode_ids": list(self.episode_ids),
                "rows": {k: (asdict(v) if v else None) for k, v in self.rows.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        rows = {k: (Aggregate(**v) if v else None) for k, v in d["rows"].items()}
        return cls(d["split"], rows, tuple(d["episode_ids"]), d.get("label", ""))


def build_report(results: Sequence[EpisodeResult], split: str, label: str = "") -> RunReport:
    rows: dict[str, Aggregate | None] = {}
    for subset in SUBSETS:
        chosen = list(results) if subset == "all" else [r for r in results if getattr(r, subset)]
        rows[subset] = aggregate(chosen) if chosen else None
    return RunReport(split, rows, tuple(sorted(r.episode_id for r in results)), label)


def round1(x: float) -> str:
    """Round half-up to one decimal using the shortest decimal repr of ``x``."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def signed1(x: float) -> str:
    s = round1(x)
    if s in ("0.0", "-0.0"):
        return "0.0"
    return s if s.startswith("-") else "+" + s


@dataclass
class ComparisonRow:
    subset: str
    baseline: Aggregate | None
    augmented: Aggregate | None

    def delta(self, metric: str) -> float | None:
        if self.baseline is None or self.augmented is None:
            return None
        return getattr(self.augmented, metric) - getattr(self.baseline, metric)


@dataclass
class Comparison:
    split: str
    rows: list[ComparisonRow] = field(default_factory=list)

    def delta(self, subset: str, metric: str = "goal_conditioned_success_rate") -> float | None:
        for row in self.rows:
            if row.subset == subset:
                return row.delta(metric)
        raise KeyError(subset)


def compare(baseline: RunReport, augmented: RunReport) -> Comparison:
    """Per-subset deltas (augmented minus baseline) over identical episode sets."""
    if baseline.episode_ids != augmented.episode_ids or baseline.split != augmented.split:
        raise ComparisonError("reports cover different episode sets")
    rows = [ComparisonRow(s, baseline.rows.get(s), augmented.rows.get(s)) for s in SUBSETS]
    return Comparison(baseline.split, rows)


# -- report emission --------------------------------------------------------

def report_markdown(report: RunReport) -> str:
    lines = ["| Subset | Success Rate | Goal-Conditioned SR | Episodes |", "|---|---|---|---|"]
    for s in SUBSETS:
        agg = report.rows.get(s)
        if agg is None:
            lines.append(f"| {SUBSET_LABELS[s]} | N/A | N/A | 0 |")
        else:
            lines.append(f"| {SUBSET_LABELS[s]} | {round1(agg.success_rate)} | "
                         f"{round1(agg.goal_conditioned_success_rate)} | {agg.count} |")
    return "\n".join(lines) + "\n"


def comparison_markdown(cmp: Comparison, metric: str = "goal_conditioned_success_rate") -> str:
    lines = ["| Subset | Baseline | CLIP-aux | Improvement |", "|---|---|---|---|"]
    for row in cmp.rows:
        b = round1(getattr(row.baseline, metric)) if row.baseline else "N/A"
        a = round1(getattr(row.augmented, metric)) if row.augmented else "N/A"
        d = row.delta(metric)
        lines.append(f"| {SUBSET_LABELS[row.subset]} | {b} | {a} | "
                     f"{signed1(d) if d is not None else 'N/A'} |")
    return "\n".join(lines) + "\n"


CSV_FIELDS = ("split", "subset", "metric", "value", "count")
METRICS = ("success_rate", "goal_conditioned_success_rate")


def report_rows(report: RunReport) -> list[dict]:
    rows = []
    for s in SUBSETS:
        agg = report.rows.get(s)
        if agg is None:
            continue
        for m in METRICS:
            rows.append({"split": report.split, "subset": s, "metric": m,
                         "value": repr(getattr(agg, m)), "count": agg.count})
    return rows


def emit_report(report: RunReport, out_dir, fmt: str = "both", stem: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("markdown", "both"):
        p = out / f"{stem}.md"
        p.write_text(report_markdown(report), encoding="utf-8")
        written.append(p)
    if fmt in ("csv", "both"):
        p = out / f"{stem}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            w.writerows(report_rows(report))
        written.append(p)
    p = out / f"{stem}.json"
    p.write_text(json.dumps(report.to_json(), sort_keys=True), encoding="utf-8")
    written.append(p)
    return written


def emit_comparison(cmp: Comparison, out_dir, stem: str = "comparison") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md = out / f"{stem}.md"
    md.write_text("## Success rate\n\n" + comparison_markdown(cmp, "success_rate")
                  + "\n## Goal-conditioned success rate\n\n" + comparison_markdown(cmp),
                  encoding="utf-8")
    path = out / f"{stem}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("split", "subset", "metric", "baseline", "augmented",
                                           "delta", "count"))
        w.writeheader()
        for row in cmp.rows:
            if row.baseline is None or row.augmented is None:
                continue
            for m in METRICS:
                w.writerow({"split": cmp.split, "subset": row.subset, "metric": m,
                            "baseline": repr(getattr(row.baseline, m)),
                            "augmented": repr(getattr(row.augmented, m)),
                            "delta": repr(row.delta(m)), "count": row.baseline.count})
    return [md, path]


def read_report_csv(path) -> dict[tuple[str, str], float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["subset"], r["metric"]): float(r["value"]) for r in csv.DictReader(fh)}


def save_results(results: Sequence[EpisodeResult], path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_results(path) -> list[EpisodeResult]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeResult(**json.loads(line)) for line in fh if line.strip()]


# -- rollouts ---------------------------------------------------------------

class ExpertPolicy:
    """Replays an episode's expert demonstration, ignoring observations."""

    def __init__(self, episodes: Sequence[Episode]):
        self.by_id = {ep.episode_id: ep for ep in episodes}

    def act_batch(self, episodes, frames, prev_actions, step):
        acts, objs = [], []
        for ep in episodes:
            ep = self.by_id[ep.episode_id]
            t = min(step, len(ep) - 1)
            acts.append(ep.expert_actions[t])
            objs.append(ep.gold_objects[t])
        return np.array(acts), np.array(objs)


class AgentPolicy:
    """Greedy decoding from an agent's final-timestep logits."""

    def __init__(self, agent, encode: Callable[[Sequence[str]], list[int]]):
        self.agent = agent
        self.encode = encode

    def act_batch(self, episodes, frames, prev_actions, step):
        tokens = [self.encode(ep.instruction) for ep in episodes]
        return self.agent.act_batch(tokens, frames, prev_actions)


def result_for(ep: Episode, sim: Simulator, steps: int, stopped: bool) -> EpisodeResult:
    frac = sim.goal_fraction(ep.goal_conditions)
    flags = {k: bool(ep.flags.get(k, False)) for k in SUBSETS[1:]}
    return EpisodeResult(ep.episode_id, frac == 1.0, frac, steps, **flags)


def rollout_many(policy, episodes: Sequence[Episode], max_steps: int = 48,
                 batch_size: int = 64, cell_px: int = 4) -> list[EpisodeResult]:
    """Step each episode's simulator with ``policy`` until stop or ``max_steps``.

    Episodes advance in lockstep batches; each result depends only on the
    policy and its own episode.
    """
    results: list[EpisodeResult] = []
    for start in range(0, len(episodes), batch_size):
        chunk = list(episodes[start:start + batch_size])
        sims = [Simulator(ep.scene) for ep in chunk]
        frames = [[] for _ in chunk]
        prev = [[] for _ in chunk]
        done: dict[int, EpisodeResult] = {}
        for step in range(max_steps):
            active = [i for i in range(len(chunk)) if i not in done]
            if not active:
                break
            for i in active:
                frames[i].append(sims[i].render(cell_px))
            acts, objs = policy.act_batch([chunk[i] for i in active],
                                          [np.stack(frames[i]) for i in active],
                                          [list(prev[i]) for i in active], step)
            for i, a, o in zip(active, acts, objs):
                a, o = int(a), int(o)
                prev[i].append(a)
                if a == STOP:
                    done[i] = result_for(chunk[i], sims[i], step + 1, True)
                else:
                    sims[i].step(a, o)
        for i in range(len(chunk)):
            if i not in done:
                done[i] = result_for(chunk[i], sims[i], max_steps, False)
        results.extend(done[i] for i in range(len(chunk)))
    return results


def rollout(policy, episode: Episode, max_steps: int = 48) -> EpisodeResult:
    return rollout_many(policy, [episode], max_steps)[0]
