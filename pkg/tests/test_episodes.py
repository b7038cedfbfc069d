"""Episode sampling: eligibility, the four regimes, cross-prompt constraint,
determinism, and meta-test task construction."""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from maple.corpus import SplitSpec, load_corpus, resolve_split, write_embeddings
from maple.episodes import (
    EpisodeSampler,
    EpisodeUnavailable,
    Regime,
    build_meta_test,
)

from conftest import write_corpus_files

ALL_TRAIN = SplitSpec(test_prompts=(), mode="prompts", dev_prompts=())

REGIMES = [
    Regime("binary", "one_prompt"),
    Regime("binary", "multi_prompt"),
    Regime("multiclass", "one_prompt"),
    Regime("multiclass", "multi_prompt"),
]


def plan_corpus(out: Path, plan: dict[str, dict[int, int]], n_levels: int, d: int = 4):
    """Corpus with exact per-(prompt, level) essay counts for one trait T0."""
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    records = {}
    rows = []
    for prompt, levels in plan.items():
        for level, count in levels.items():
            for j in range(count):
                essay_id = f"{prompt}_l{level}_{j}"
                records[f"essay:{essay_id}"] = rng.standard_normal(d).astype(np.float32)
                rows.append([essay_id, prompt, repr(float(level))])
        records[f"prompt:{prompt}"] = rng.standard_normal(d).astype(np.float32)
    records["rubric:T0"] = rng.standard_normal(d).astype(np.float32)
    write_embeddings(out / "embeddings.emb1", records)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["essay_id", "prompt_id", "T0"])
        writer.writerows(rows)
    manifest = {
        "dataset_name": "plan",
        "d": d,
        "d_u": 0,
        "shift_policy": "none",
        "traits": [{"trait_id": "T0", "rubric_vec_key": "rubric:T0",
                    "scale": [float(v) for v in range(n_levels)]}],
        "prompts": [{"prompt_id": p, "prompt_vec_key": f"prompt:{p}"} for p in plan],
        "labels_csv": "labels.csv",
        "embeddings_file": "embeddings.emb1",
    }
    (out / "manifest.json").write_text(json.dumps(manifest))
    return load_corpus(out / "manifest.json")


UNEVEN_PLAN = {
    "P0": {0: 6, 1: 2, 2: 5, 3: 0},
    "P1": {0: 3, 1: 5, 2: 1, 3: 4},
    "P2": {0: 0, 1: 7, 2: 4, 3: 2},
}


def make_sampler(corpus, regime, k=3, m=3, max_classes=5, seed=0, split=None):
    split = split or resolve_split(corpus, ALL_TRAIN)
    return EpisodeSampler(corpus, split, regime, k=k, m=m, max_classes=max_classes,
                          rng=np.random.default_rng(seed))


class TestEligibleLevels:
    @pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.tag())
    def test_matches_exhaustive_check(self, tmp_path, regime):
        corpus = plan_corpus(tmp_path / "plan", UNEVEN_PLAN, n_levels=4)
        k, m = 3, 3
        sampler = make_sampler(corpus, regime, k=k, m=m)
        counts = {
            (p, l): sum(
                1
                for e in corpus.essays.values()
                if e.prompt_id == p and e.levels.get("T0") == l
            )
            for p in corpus.prompts
            for l in range(4)
        }
        for qp in corpus.prompts:
            expected = []
            for level in range(4):
                if counts[(qp, level)] < m:
                    continue
                others = [p for p in corpus.prompts if p != qp]
                if regime.one_prompt:
                    if any(counts[(p, level)] >= k for p in others):
                        expected.append(level)
                else:
                    if sum(counts[(p, level)] for p in others) >= k:
                        expected.append(level)
            assert sampler.eligible_levels("T0", qp) == expected

    def test_query_pool_below_m_excluded(self, tmp_path):
        # level 1 on P0 has only 2 essays: with m=3 it cannot host queries
        corpus = plan_corpus(tmp_path / "plan", UNEVEN_PLAN, n_levels=4)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"), k=3, m=3)
        assert 1 not in sampler.eligible_levels("T0", "P0")

    def test_sufficient_level_included(self, tmp_path):
        corpus = plan_corpus(tmp_path / "plan", UNEVEN_PLAN, n_levels=4)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"), k=3, m=3)
        assert 0 in sampler.eligible_levels("T0", "P0")


class TestBinarySampling:
    def test_forced_negative_when_two_levels(self, tmp_path):
        plan = {"A": {0: 6, 1: 6}, "B": {0: 6, 1: 6}}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=2)
        sampler = make_sampler(corpus, Regime("binary", "multi_prompt"), k=2, m=2)
        episode = sampler.sample_binary("T0")
        pos = episode.classes[0].levels[0]
        assert episode.classes[1].levels == (1 - pos,)

    def test_two_prompt_one_prompt_support_is_forced(self, tmp_path):
        plan = {"A": {0: 6, 1: 6}, "B": {0: 6, 1: 6}}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=2)
        sampler = make_sampler(corpus, Regime("binary", "one_prompt"), k=2, m=2, seed=5)
        for _ in range(50):
            episode = sampler.sample_binary("T0")
            support_prompts = {
                corpus.essays[e].prompt_id for ids in episode.support for e in ids
            }
            assert len(support_prompts) == 1
            other = {"A": "B", "B": "A"}[episode.query_prompt_id]
            assert support_prompts == {other}

    def test_no_overlap_and_counts(self, five_prompt_corpus):
        sampler = make_sampler(five_prompt_corpus, Regime("binary", "multi_prompt"),
                               k=3, m=3, seed=1)
        for _ in range(300):
            ep = sampler.sample()
            assert ep.class_count == 2
            ids = ep.all_essay_ids()
            assert len(ids) == len(set(ids))
            assert all(len(ids) == 3 for ids in ep.support)
            assert all(len(ids) == 3 for ids in ep.query)
            for ids in ep.support:
                for e in ids:
                    assert five_prompt_corpus.essays[e].prompt_id != ep.query_prompt_id
            for ids in ep.query:
                for e in ids:
                    assert five_prompt_corpus.essays[e].prompt_id == ep.query_prompt_id

    def test_unavailable_when_single_prompt(self, tmp_path):
        corpus = plan_corpus(tmp_path / "plan", {"A": {0: 9, 1: 9}}, n_levels=2)
        sampler = make_sampler(corpus, Regime("binary", "multi_prompt"), k=2, m=2)
        with pytest.raises(EpisodeUnavailable):
            sampler.sample_binary("T0")

    def test_negative_class_pools_complement(self, tmp_path):
        # negatives may come from any level != positive
        plan = {"A": {0: 4, 1: 4, 2: 4}, "B": {0: 4, 1: 4, 2: 4}}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=3)
        sampler = make_sampler(corpus, Regime("binary", "multi_prompt"), k=4, m=4, seed=7)
        seen_negative_levels = set()
        for _ in range(200):
            ep = sampler.sample_binary("T0")
            pos = ep.classes[0].levels[0]
            for e in ep.support[1]:
                level = corpus.essays[e].levels["T0"]
                assert level != pos
                seen_negative_levels.add(level)
        assert len(seen_negative_levels) == 3  # every level appears as a negative


class TestMulticlassSampling:
    def test_two_eligible_levels_forces_two_classes(self, tmp_path):
        plan = {"A": {0: 6, 1: 6}, "B": {0: 6, 1: 6}}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=2)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"), k=2, m=2)
        episode = sampler.sample_multiclass("T0")
        assert episode.class_count == 2

    def test_nine_levels_capped_at_five(self, tmp_path):
        plan = {p: {l: 6 for l in range(9)} for p in ("A", "B", "C")}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=9)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"),
                               k=5, m=5, max_classes=5)
        episode = sampler.sample_multiclass("T0")
        assert episode.class_count == 5
        levels = [c.levels[0] for c in episode.classes]
        assert levels == sorted(levels)

    def test_level_subsets_uniform(self, tmp_path):
        # 9 eligible levels capped at 5: all C(9,5)=126 subsets equally likely
        plan = {p: {l: 4 for l in range(9)} for p in ("A", "B")}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=9)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"),
                               k=2, m=2, max_classes=5, seed=123)
        counts: Counter = Counter()
        draws = 50000
        for _ in range(draws):
            ep = sampler.sample_multiclass("T0")
            counts[tuple(c.levels[0] for c in ep.classes)] += 1
        assert len(counts) == 126
        observed = np.array([counts[s] for s in sorted(counts)])
        result = stats.chisquare(observed)
        assert result.pvalue > 0.01

    def test_one_prompt_support_covers_all_classes(self, five_prompt_corpus):
        sampler = make_sampler(five_prompt_corpus, Regime("multiclass", "one_prompt"),
                               k=3, m=3, seed=2)
        for _ in range(100):
            ep = sampler.sample_multiclass("T0")
            support_prompts = {
                five_prompt_corpus.essays[e].prompt_id for ids in ep.support for e in ids
            }
            assert len(support_prompts) == 1
            assert ep.class_count >= 2

    def test_unavailable_with_one_level(self, tmp_path):
        corpus = plan_corpus(tmp_path / "plan", {"A": {0: 9}, "B": {0: 9}}, n_levels=2)
        sampler = make_sampler(corpus, Regime("multiclass", "multi_prompt"), k=2, m=2)
        with pytest.raises(EpisodeUnavailable):
            sampler.sample_multiclass("T0")


class TestDeterminism:
    @pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.tag())
    def test_same_seed_same_stream(self, five_prompt_corpus, regime):
        a = make_sampler(five_prompt_corpus, regime, seed=99)
        b = make_sampler(five_prompt_corpus, regime, seed=99)
        for _ in range(40):
            assert a.sample() == b.sample()

    def test_different_seed_differs(self, five_prompt_corpus):
        regime = Regime("multiclass", "multi_prompt")
        a = make_sampler(five_prompt_corpus, regime, seed=1)
        b = make_sampler(five_prompt_corpus, regime, seed=2)
        assert any(a.sample() != b.sample() for _ in range(10))


class TestRegimeFidelity:
    @pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.tag())
    def test_invariants_over_stream(self, five_prompt_corpus, regime):
        corpus = five_prompt_corpus
        sampler = make_sampler(corpus, regime, k=2, m=2, seed=11)
        for ep in sampler.stream(200):
            ids = ep.all_essay_ids()
            assert len(ids) == len(set(ids))
            assert len(ids) == ep.class_count * 4  # k + m per class
            support_prompts = {
                corpus.essays[e].prompt_id for pool in ep.support for e in pool
            }
            assert ep.query_prompt_id not in support_prompts
            if regime.one_prompt:
                assert len(support_prompts) == 1
            if regime.classification == "binary":
                assert ep.class_count == 2
            else:
                assert 2 <= ep.class_count <= 5
                levels = [c.levels[0] for c in ep.classes]
                assert len(set(levels)) == len(levels)


class TestMetaTest:
    def test_empty_training_levels_drop_classes(self, tmp_path):
        plan = {
            "TRAIN1": {0: 4, 2: 2},
            "TRAIN2": {0: 3, 2: 1},
            "TEST": {0: 2, 1: 2, 2: 2},
        }
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=3)
        train_ids = [e for e in corpus.essays if not e.startswith("TEST")]
        task = build_meta_test(corpus, "T0", "TEST", train_ids)
        assert task.class_levels == (0, 2)
        assert len(task.support[0]) == 7
        assert len(task.support[1]) == 3

    def test_support_matches_brute_force_filter(self, synth_corpus):
        train_ids = [
            e for e in synth_corpus.essays
            if synth_corpus.essays[e].prompt_id != "P0"
        ]
        task = build_meta_test(synth_corpus, "T1", "P0", train_ids)
        for class_idx, level in enumerate(task.class_levels):
            expected = sorted(
                e
                for e in train_ids
                if synth_corpus.essays[e].levels.get("T1") == level
            )
            assert sorted(task.support[class_idx]) == expected

    def test_test_prompt_essays_never_in_support(self, synth_corpus):
        # even if the caller passes them, test-prompt essays are filtered out
        task = build_meta_test(synth_corpus, "T0", "P1", list(synth_corpus.essays))
        support = {e for pool in task.support for e in pool}
        assert not support & set(synth_corpus.prompts["P1"].essay_ids)

    def test_unannotated_trait_unavailable(self, tmp_path):
        plan = {"A": {0: 3, 1: 3}, "B": {0: 3, 1: 3}}
        corpus = plan_corpus(tmp_path / "plan", plan, n_levels=2)
        with pytest.raises(EpisodeUnavailable):
            build_meta_test(corpus, "T0", "A", [])

    def test_query_is_all_annotated_test_essays(self, synth_corpus):
        train_ids = [
            e for e in synth_corpus.essays
            if synth_corpus.essays[e].prompt_id != "P3"
        ]
        task = build_meta_test(synth_corpus, "T0", "P3", train_ids)
        assert set(task.query) == set(synth_corpus.prompts["P3"].essay_ids)


class TestRegime:
    def test_tags(self):
        assert Regime("binary", "one_prompt").tag() == "binary-1P"
        assert Regime("multiclass", "multi_prompt").tag() == "multiclass-mP"

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            Regime("ternary", "one_prompt")
        with pytest.raises(ValueError):
            Regime("binary", "zero_prompt")

    def test_episode_json_round_trip_fields(self, five_prompt_corpus):
        sampler = make_sampler(five_prompt_corpus, Regime("binary", "multi_prompt"),
                               k=2, m=2, seed=3)
        ep = sampler.sample()
        blob = json.loads(json.dumps(ep.to_json_dict()))
        assert blob["trait"] == ep.trait_id
        assert blob["regime"] == "binary-mP"
        assert blob["support"] == [list(ids) for ids in ep.support]
