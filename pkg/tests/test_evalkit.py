import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etclip.evalkit import (ComparisonError, EpisodeResult, ExpertPolicy, SUBSETS, aggregate,
                            build_report, compare, comparison_markdown, emit_comparison, emit_report,
                            is_rare, load_results, read_report_csv, report_markdown, rollout_many,
                            round1, save_results, signed1, subset_flags)


def _results(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(1, 4))
        met = int(rng.integers(0, k + 1))
        out.append(EpisodeResult(f"e{i:04d}", met == k, met / k, int(rng.integers(1, 40)),
                                 *(bool(b) for b in rng.integers(0, 2, size=3))))
    return out


result_st = st.builds(
    lambda k, met, flags, i: EpisodeResult(f"e{i}", met == k, met / k, 5, *flags),
    st.integers(1, 3).flatmap(lambda k: st.just(k)), st.integers(0, 3),
    st.tuples(st.booleans(), st.booleans(), st.booleans()), st.integers(0, 10**6),
).filter(lambda r: True)


def _valid_result(k, met, flags, i):
    met = min(met, k)
    return EpisodeResult(f"e{i}", met == k, met / k, 5, *flags)


results_st = st.lists(st.builds(_valid_result, st.integers(1, 3), st.integers(0, 3),
                                st.tuples(st.booleans(), st.booleans(), st.booleans()),
                                st.integers(0, 10**6)), min_size=1, max_size=60)


def test_aggregate_matches_exact_rational_recomputation():
    res = _results(500, 0)
    agg = aggregate(res)
    sr = Fraction(sum(r.success for r in res) * 100, len(res))
    gc = sum(Fraction(r.goal_fraction) for r in res) * 100 / len(res)
    assert agg.success_rate == float(sr)
    assert agg.goal_conditioned_success_rate == float(gc)


@settings(max_examples=60, deadline=None)
@given(results_st, st.randoms())
def test_report_invariants(results, rnd):
    rep = build_report(results, "valid_unseen")
    for agg in rep.rows.values():
        if agg is not None:
            assert 0 <= agg.success_rate <= agg.goal_conditioned_success_rate <= 100
    shuffled = list(results)
    rnd.shuffle(shuffled)
    assert build_report(shuffled, "valid_unseen").rows == rep.rows


def test_subset_rows_use_only_flagged_episodes():
    res = _results(200, 1)
    rep = build_report(res, "valid_seen")
    for s in SUBSETS[1:]:
        chosen = [r for r in res if getattr(r, s)]
        assert rep.rows[s].count == len(chosen)
        assert rep.rows[s] == aggregate(chosen)


def test_empty_subset_reported_as_missing():
    res = [EpisodeResult("a", True, 1.0, 3)]
    rep = build_report(res, "valid_seen")
    assert rep.rows["rare_semantics"] is None
    assert "N/A" in report_markdown(rep)


def test_episode_result_validation():
    with pytest.raises(ValueError):
        EpisodeResult("a", True, 0.5, 1)
    with pytest.raises(ValueError):
        EpisodeResult("a", False, 1.5, 1)


def test_rare_threshold_is_strict():
    freqs = {"fob": 29, "tome": 30}
    assert is_rare("fob", freqs) and not is_rare("tome", freqs)
    assert is_rare("never-seen", freqs)


def test_subset_flags_on_dataset_agree_with_generator(tiny_dataset):
    for ep in tiny_dataset.splits["valid_unseen"]:
        flags = subset_flags(ep, tiny_dataset.frequencies)
        assert flags["object_properties"] == ep.flags["object_properties"]
        assert flags["small_objects"] == (ep.target.size_class == "small")


@pytest.mark.parametrize("x,expect", [(0.05, "0.1"), (0.25, "0.3"), (2.675, "2.7"), (-0.05, "-0.1"),
                                      (7.9, "7.9"), (1 / 3, "0.3")])
def test_round_half_up(x, expect):
    assert round1(x) == expect


def test_signed_rendering():
    assert signed1(0.3) == "+0.3" and signed1(-0.04) == "0.0" and signed1(-0.5) == "-0.5"


def test_compare_requires_same_episode_set():
    a = build_report(_results(10, 0), "valid_unseen")
    b = build_report(_results(11, 0), "valid_unseen")
    with pytest.raises(ComparisonError):
        compare(a, b)


def test_compare_deltas_and_markdown_layout():
    base = _results(50, 2)
    aug = [EpisodeResult(r.episode_id, True, 1.0, r.steps_taken, r.object_properties, r.small_objects,
                         r.rare_semantics) for r in base]
    cmp = compare(build_report(base, "valid_unseen"), build_report(aug, "valid_unseen"))
    assert cmp.delta("all", "success_rate") == 100.0 - aggregate(base).success_rate
    md = comparison_markdown(cmp)
    for label in ("All", "Object properties", "Small objects", "Rare semantics"):
        assert f"| {label} |" in md


def test_report_csv_schema_and_precision(tmp_path):
    rep = build_report(_results(30, 3), "valid_unseen")
    emit_report(rep, tmp_path)
    with open(tmp_path / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["split", "subset", "metric", "value", "count"]
    vals = read_report_csv(tmp_path / "report.csv")
    assert vals[("all", "goal_conditioned_success_rate")] == rep.rows["all"].goal_conditioned_success_rate


def test_comparison_files(tmp_path):
    r = build_report(_results(30, 4), "valid_unseen")
    paths = emit_comparison(compare(r, r), tmp_path)
    assert all(p.exists() for p in paths)


def test_results_jsonl_roundtrip(tmp_path):
    res = _results(20, 5)
    save_results(res, tmp_path / "r.jsonl")
    assert load_results(tmp_path / "r.jsonl") == res


def test_expert_rollouts_succeed(tiny_dataset):
    eps = tiny_dataset.splits["valid_unseen"]
    res = rollout_many(ExpertPolicy(eps), eps, batch_size=7)
    assert all(r.success for r in res)
    assert [r.steps_taken for r in res] == [len(e) for e in eps]


def test_rollout_results_independent_of_batching(tiny_dataset):
    eps = tiny_dataset.splits["valid_seen"]
    a = rollout_many(ExpertPolicy(eps), eps, batch_size=1)
    b = rollout_many(ExpertPolicy(eps), eps, batch_size=64)
    assert a == b
