"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in its terminal summary.
The toy A/B experiment (criterion 10) is the long one: about half an hour on
one CPU core. Set ``ETCLIP_ACCEPTANCE_DIR`` to keep its per-seed CSV.
"""
import csv
import os
import re
import statistics
import time
from collections import Counter
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np
import pytest

from etclip import tensorcore as tc
from etclip.agent import AgentConfig, EpisodicAgent, et_losses, make_batch, object_weights
from etclip.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from etclip.cli import ab_experiment, load_config
from etclip.dualenc import DualEncoderConfig
from etclip.evalkit import (Aggregate, AgentPolicy, EpisodeResult, RunReport, SUBSETS, build_report,
                            compare, comparison_markdown, is_rare, rollout_many, signed1)
from etclip.trainer import (PretrainConfig, TrainConfig, agent_from_checkpoint, combine_object_loss,
                            dualenc_from_checkpoint, pretrain_dualenc, train)
from etclip.worldgen import (ALIAS_TO_CLASS, COLORS, OBJECT_CLASSES, OBJECT_VOCAB, WorldConfig,
                             generate_dataset)

from test_tensorcore import CASES

SMALL_AGENT = AgentConfig(d=32, layers=1)
SMALL_DUAL = DualEncoderConfig(d=32, layers=1)


@pytest.fixture(scope="module")
def default_dataset():
    return generate_dataset(WorldConfig(), 0)


@pytest.fixture(scope="module")
def default_pretrained(default_dataset):
    start = time.perf_counter()
    res = pretrain_dualenc(default_dataset, PretrainConfig(), DualEncoderConfig())
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def rollout_dataset():
    return generate_dataset(WorldConfig(n_train=120, n_valid_seen=0, n_valid_unseen=50), 11)


# 1 ---------------------------------------------------------------------------

def test_01_loss_equation_exactness(acceptance):
    with acceptance.criterion(1, "object-loss mixing equation", budget_s=1.0) as info:
        rng = np.random.default_rng(0)
        alpha = rng.random(1000)
        clip = rng.uniform(0, 10, 1000)
        et = rng.uniform(0, 10, 1000)
        expect = alpha * clip + (1 - alpha) * et
        got = np.array([combine_object_loss(a, c, e) for a, c, e in zip(alpha, clip, et)])
        worst = float(np.max(np.abs(got - expect)))
        assert worst <= 1e-6
        with tc.precision(np.float64):
            t = [combine_object_loss(a, tc.Tensor(np.array(c)), tc.Tensor(np.array(e))).item()
                 for a, c, e in zip(alpha[:100], clip[:100], et[:100])]
        assert np.max(np.abs(np.array(t) - expect[:100])) <= 1e-6
        for c, e in zip(clip, et):
            assert combine_object_loss(0.0, c, e) == e
            assert combine_object_loss(1.0, c, e) == c
        info["detail"] = f"max |err| {worst:.1e} over 1000 triples"


# 2 ---------------------------------------------------------------------------

def test_02_gradient_correctness(acceptance, tiny_dataset, tiny_pretrained):
    with acceptance.criterion(2, "finite-difference gradient checks", budget_s=120.0) as info:
        checked = 0
        for name in sorted(CASES):
            with tc.precision(np.float64):
                fn, params = CASES[name](np.random.default_rng(5))
                res = tc.gradcheck(fn, params, n_coords=100, seed=2)
            assert res.ok, (name, res.failures[:2])
            checked += res.checked
        with tc.precision(np.float64):
            agent = EpisodicAgent(len(tiny_dataset.vocab), (32, 32, 3),
                                  AgentConfig(d=16, layers=1, heads=2, patch_features=4, patch_hidden=8,
                                              head_init="normal"), seed=3)
            dual = dualenc_from_checkpoint(tiny_pretrained.checkpoint)
            batch = make_batch(tiny_dataset.splits["train"][:2], tiny_dataset.encode, agent.bos)
            sel = object_weights(batch).astype(bool)

            def full_loss():
                act, l_et = et_losses(agent, batch)
                l_clip = dual.clip_object_loss(batch.frames[sel], batch.objects[sel])
                return tc.add(act, combine_object_loss(0.5, l_clip, l_et))

            params = {**{f"agent.{k}": p for k, p in agent.named_parameters().items()},
                      **{f"dualenc.{k}": p for k, p in dual.named_parameters().items()}}
            n = max(200, 2 * len(params))
            res = tc.gradcheck(full_loss, params, n_coords=n, seed=9)
        assert res.ok, res.failures[:3]
        info["detail"] = (f"{len(CASES)} op groups x 100 coords + end-to-end loss {res.checked} coords, "
                          f"worst ratio {res.worst_ratio:.2f}")
        assert checked >= 100 * len(CASES)


# 3 ---------------------------------------------------------------------------

class _Recording(AgentPolicy):
    def __init__(self, agent, encode):
        super().__init__(agent, encode)
        self.trace = []
        self.actions = set()

    def act_batch(self, episodes, frames, prev_actions, step):
        acts, objs = super().act_batch(episodes, frames, prev_actions, step)
        acts, objs = np.asarray(acts), np.asarray(objs)
        self.trace.append((tuple(ep.episode_id for ep in episodes), acts.dtype.str, acts.tobytes(),
                           objs.dtype.str, objs.tobytes()))
        self.actions.update(acts.tolist())
        return acts, objs


def test_03_inference_ignores_dual_encoder(acceptance, rollout_dataset):
    ds = rollout_dataset
    with acceptance.criterion(3, "rollouts independent of dual-encoder section", budget_s=60.0) as info:
        pre = pretrain_dualenc(ds, PretrainConfig(epochs=1, n_pairs=64, probe_size=10), SMALL_DUAL)
        run = train(ds, TrainConfig(mode="clip_aux", epochs=6), SMALL_AGENT, pretrained=pre.checkpoint)
        ck = run.checkpoint
        assert ck.has_section("dualenc")
        rng = np.random.default_rng(0)
        scrambled = decode_checkpoint(encode_checkpoint(ck))
        for k, v in scrambled.tensors.items():
            if k.startswith("dualenc."):
                scrambled.tensors[k] = rng.normal(size=v.shape).astype(v.dtype)
        variants = {"present": ck, "absent": ck.without("dualenc"), "random": scrambled}
        episodes = ds.splits["valid_unseen"]
        assert len(episodes) == 50
        outcomes = {}
        for name, c in variants.items():
            policy = _Recording(agent_from_checkpoint(c), ds.encode)
            results = rollout_many(policy, episodes, max_steps=30)
            outcomes[name] = (policy.trace, results)
            n_actions = len(policy.actions)
        ref_trace, ref_results = outcomes["present"]
        for name, (trace, results) in outcomes.items():
            assert trace == ref_trace, name
            assert results == ref_results, name
        assert n_actions > 1, "degenerate policy makes the comparison vacuous"
        info["detail"] = f"50 episodes, {len(ref_trace)} batched steps, {n_actions} distinct actions, 3 variants identical"


# 4 ---------------------------------------------------------------------------

def _linf(a: dict, b: dict) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def test_04_joint_update_witness(acceptance, tiny_dataset, tiny_pretrained, tmp_path):
    with acceptance.criterion(4, "joint agent and dual-encoder update", budget_s=30.0) as info:
        init_agent = EpisodicAgent(len(tiny_dataset.vocab), (32, 32, 3), SMALL_AGENT, seed=0).state_dict()
        init_dual = tiny_pretrained.checkpoint.section("dualenc")
        run = train(tiny_dataset, TrainConfig(mode="clip_aux", alpha=0.5, epochs=1), SMALL_AGENT,
                    pretrained=tiny_pretrained.checkpoint, max_steps=1)
        d_agent = _linf(init_agent, run.checkpoint.section("agent"))
        d_dual = _linf(init_dual, run.checkpoint.section("dualenc"))
        assert d_agent > 0 and d_dual > 0

        path = save_checkpoint(tiny_pretrained.checkpoint, tmp_path / "dualenc.etcp")
        before = path.read_bytes()
        base = train(tiny_dataset, TrainConfig(mode="baseline", epochs=1), SMALL_AGENT,
                     pretrained=path, max_steps=1)
        assert base.dualenc is None and not base.checkpoint.has_section("dualenc")
        d_base = _linf(init_dual, load_checkpoint(path).section("dualenc"))
        assert d_base == 0.0 and path.read_bytes() == before
        info["detail"] = f"clip_aux L-inf agent {d_agent:.2e}, dualenc {d_dual:.2e}; baseline dualenc 0"


# 5 ---------------------------------------------------------------------------

def test_05_alpha_zero_matches_baseline(acceptance, tiny_dataset, tiny_pretrained):
    with acceptance.criterion(5, "alpha=0 reproduces baseline losses", budget_s=120.0) as info:
        steps = 100
        epochs = -(-steps * 16 // len(tiny_dataset.splits["train"])) + 1
        base = train(tiny_dataset, TrainConfig(mode="baseline", epochs=epochs, seed=4), SMALL_AGENT,
                     max_steps=steps)
        aux = train(tiny_dataset, TrainConfig(mode="clip_aux", alpha=0.0, epochs=epochs, seed=4),
                    SMALL_AGENT, pretrained=tiny_pretrained.checkpoint, max_steps=steps)
        assert len(base.step_losses) == len(aux.step_losses) == steps
        worst = 0.0
        for b, a in zip(base.step_losses, aux.step_losses):
            for key in ("action_loss", "object_loss_et", "total"):
                worst = max(worst, abs(b[key] - a[key]))
        assert worst <= 1e-5
        info["detail"] = f"{steps} steps, max |delta| {worst:.1e}"


# 6 ---------------------------------------------------------------------------

def test_06_zero_shot_probe(acceptance, default_dataset, default_pretrained):
    res, seconds = default_pretrained
    with acceptance.criterion(6, "zero-shot probe after pretraining", budget_s=600.0) as info:
        info["extra_seconds"] = seconds
        cfg = PretrainConfig()
        assert cfg.n_pairs >= 2000 and cfg.probe_size == 500
        acc = res.checkpoint.config["meta"]["final_probe_accuracy"]
        assert acc >= 0.80, f"probe accuracy {acc:.3f}"
        info["detail"] = f"top-1 {acc:.1%} on 500 frames (chance {1 / len(OBJECT_VOCAB):.1%})"


# 7 ---------------------------------------------------------------------------

def _brute_force(results):
    with localcontext() as ctx:
        ctx.prec = 80
        n = len(results)
        succ = 0
        total = Decimal(0)
        for r in results:
            if r.success:
                succ += 1
            total += Decimal(r.goal_fraction)
        return float(Decimal(100 * succ) / n), float(total * 100 / n)


def test_07_metric_oracle(acceptance):
    with acceptance.criterion(7, "metric oracle equivalence") as info:
        rng = np.random.default_rng(7)
        results = []
        for i in range(1000):
            k = int(rng.integers(1, 5))
            met = int(rng.integers(0, k + 1))
            results.append(EpisodeResult(f"s{i:04d}", met == k, met / k, int(rng.integers(1, 49)),
                                         *(bool(x) for x in rng.random(3) < 0.4)))
        report = build_report(results, "valid_unseen")
        for subset in SUBSETS:
            chosen = results if subset == "all" else [r for r in results if getattr(r, subset)]
            sr, gc = _brute_force(chosen)
            agg = report.rows[subset]
            assert (agg.success_rate, agg.goal_conditioned_success_rate, agg.count) == (sr, gc, len(chosen))
        for seed in range(50):
            sub = [results[j] for j in np.random.default_rng(seed).choice(1000, 40, replace=False)]
            for agg in build_report(sub, "x").rows.values():
                if agg is not None:
                    assert agg.success_rate <= agg.goal_conditioned_success_rate
        info["detail"] = "1000 results, 4 subsets exact; SR <= GC-SR on 51 reports"


# 8 ---------------------------------------------------------------------------

def _glyph_pixels(name):
    return sum(row.count("#") for row in OBJECT_CLASSES[name][2])


def _rescan(tokens, counts):
    nouns = [t for t in tokens if t in OBJECT_CLASSES or t in ALIAS_TO_CLASS]
    # placement instructions name the moved object first; the others end with it
    target = nouns[0] if {"put", "place"} & set(tokens) else nouns[-1]
    target = ALIAS_TO_CLASS.get(target, target)
    return {
        "object_properties": any(a in COLORS and b in nouns for a, b in zip(tokens, tokens[1:])),
        "small_objects": _glyph_pixels(target) <= 4,
        "rare_semantics": any(counts[t] < 30 for t in tokens),
    }


def test_08_subset_fidelity(acceptance, default_dataset):
    ds = default_dataset
    with acceptance.criterion(8, "rare threshold and subset flags") as info:
        assert is_rare("x", {"x": 29}) and not is_rare("x", {"x": 30})
        counts = Counter()
        for ep in ds.splits["train"]:
            counts.update(ep.instruction)
        assert dict(counts) == ds.frequencies
        pool = ds.splits["train"] + ds.splits["valid_seen"] + ds.splits["valid_unseen"]
        picks = np.random.default_rng(8).choice(len(pool), 1000, replace=False)
        tally = Counter()
        for j in picks:
            ep = pool[j]
            expect = _rescan(ep.instruction, counts)
            got = {k: ep.flags[k] for k in expect}
            assert got == expect, (ep.episode_id, ep.instruction, got, expect)
            tally.update(k for k, v in got.items() if v)
        assert all(tally[k] > 0 for k in ("object_properties", "small_objects", "rare_semantics"))
        info["detail"] = f"1000 episodes; flagged {dict(sorted(tally.items()))}"


# 9 ---------------------------------------------------------------------------

def _report(gc: dict, label: str) -> RunReport:
    rows = {s: Aggregate(0.0, gc[s], 100) for s in SUBSETS}
    return RunReport("valid_unseen", rows, ("e1",), label)


def test_09_improvement_table(acceptance):
    with acceptance.criterion(9, "comparison deltas on reference values") as info:
        base = {"all": 7.8, "object_properties": 7.7, "small_objects": 5.1, "rare_semantics": 5.9}
        aug = {"all": 7.9, "object_properties": 8.0, "small_objects": 5.6, "rare_semantics": 6.7}
        cmp = compare(_report(base, "baseline"), _report(aug, "clip_aux"))
        got = {s: signed1(cmp.delta(s)) for s in SUBSETS}
        assert got["object_properties"] == "+0.3"
        assert got["small_objects"] == "+0.5"
        assert got["rare_semantics"] == "+0.8"
        md = comparison_markdown(cmp)
        for label, b, a, d in (("Object properties", "7.7", "8.0", "+0.3"), ("Small objects", "5.1", "5.6", "+0.5"),
                               ("Rare semantics", "5.9", "6.7", "+0.8")):
            assert re.search(rf"\| {label} \| {b} \| {a} \| \{d} \|", md), md
        info["detail"] = ", ".join(f"{k} {v}" for k, v in got.items() if k != "all")


# 11 (before 10 so the long run comes last) ------------------------------------

def test_11_determinism_and_resume(acceptance, tiny_dataset, tiny_pretrained, tmp_path):
    with acceptance.criterion(11, "checkpoint round-trip and bit-exact resume") as info:
        cfg = TrainConfig(mode="clip_aux", epochs=3, seed=5)
        full = train(tiny_dataset, cfg, SMALL_AGENT, pretrained=tiny_pretrained.checkpoint)
        path = save_checkpoint(full.checkpoint, tmp_path / "full.etcp")
        back = load_checkpoint(path)
        assert back.config == full.checkpoint.config and back.rng_state == full.checkpoint.rng_state
        assert all(back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
                   for k, v in full.checkpoint.tensors.items())
        assert set(back.tensors) == set(full.checkpoint.tensors)

        part = train(tiny_dataset, cfg, SMALL_AGENT, pretrained=tiny_pretrained.checkpoint,
                     stop_after_epoch=1)
        mid = load_checkpoint(save_checkpoint(part.checkpoint, tmp_path / "mid.etcp"))
        rest = train(tiny_dataset, cfg, resume=mid)
        assert part.step_losses + rest.step_losses == full.step_losses
        assert encode_checkpoint(rest.checkpoint) == encode_checkpoint(full.checkpoint)
        info["detail"] = f"{len(full.checkpoint.tensors)} tensors; resume after epoch 1 of 3 identical"


# 10 --------------------------------------------------------------------------

@pytest.mark.slow
def test_10_directional_ab(acceptance, default_dataset, default_pretrained, tmp_path_factory):
    res, pre_seconds = default_pretrained
    out = Path(os.environ.get("ETCLIP_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("ab")) / "ab"
    with acceptance.criterion(10, "directional toy A/B over 5 seeds", budget_s=3600.0) as info:
        info["extra_seconds"] = pre_seconds
        cfg = load_config(None)
        assert 3 <= TrainConfig().epochs <= 20
        assert len(default_dataset.splits["train"]) == 2000
        assert len(default_dataset.splits["valid_unseen"]) == 300
        dual_path = save_checkpoint(res.checkpoint, tmp_path_factory.mktemp("pre") / "dualenc.etcp")
        summary = ab_experiment(default_dataset, cfg, 5, out, dualenc_path=dual_path)
        with open(out / "ab_seeds.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10
        paired = {}
        for r in rows:
            paired.setdefault(r["seed"], {})[r["mode"]] = float(r["goal_conditioned_success_rate"])
        deltas = [v["clip_aux"] - v["baseline"] for v in paired.values()]
        median = statistics.median(deltas)
        assert median == summary["median_delta_goal_conditioned_success_rate"]
        info["detail"] = (f"median GC-SR delta {median:+.2f} (per seed "
                          f"{', '.join(f'{d:+.2f}' for d in deltas)}); CSV {out / 'ab_seeds.csv'}")
        assert median >= 0, f"median paired delta {median:+.2f} < 0"
