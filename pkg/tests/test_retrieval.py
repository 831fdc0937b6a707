"""Per-environment ranking and recall aggregation, checked against
independent re-sorts of the produced score dumps."""

import json

import numpy as np
import pytest

import reference
from conftest import TINY_DIMS, build_dataset
from rxf.datastore import Query
from rxf.encoders import init_params
from rxf.retrieval import (
    MetricsReport,
    RankedList,
    aggregate_recall,
    evaluate,
    rank_images,
    recall_at_k,
    save_ranked_lists,
)


@pytest.fixture
def fitted(tiny_configs):
    image, text = tiny_configs
    return init_params(image, text, TINY_DIMS, seed=5)


def small_dataset(seed=0, **kwargs):
    queries = [
        Query("q1", "envA", "target", "a2", 1),
        Query("q2", "envA", "receptacle", "a1", 0),
        Query("q3", "envB", "target", "b3", 2),
    ]
    return build_dataset({"envA": ["a1", "a2", "a3", "a4"], "envB": ["b1", "b2", "b3"]}, queries, seed=seed, **kwargs)


class TestRecallAtK:
    def test_hit_inside_and_outside_prefix(self):
        ranking = ["x", "y", "z"]
        assert recall_at_k(ranking, "y", 2) == 1.0
        assert recall_at_k(ranking, "z", 2) == 0.0
        assert recall_at_k(ranking, "z", 3) == 1.0

    def test_k_beyond_length_is_fine(self):
        assert recall_at_k(["x"], "x", 50) == 1.0

    def test_invalid_k(self):
        with pytest.raises(ValueError, match="k must be"):
            recall_at_k(["x"], "x", 0)

    def test_gt_must_be_present(self):
        with pytest.raises(ValueError, match="missing"):
            recall_at_k(["x", "y"], "q", 1)

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_matches_reference(self, k):
        ranking = ["d", "b", "a", "c"]
        for gt in ranking:
            assert recall_at_k(ranking, gt, k) == reference.recall_reference(ranking, gt, k)


class TestRankedList:
    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="ids but"):
            RankedList("q", "target", ["a", "b"], [1.0])

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError, match="repeats"):
            RankedList("q", "target", ["a", "a"], [1.0, 0.5])

    def test_rejects_increasing_scores(self):
        with pytest.raises(ValueError, match="increasing"):
            RankedList("q", "target", ["a", "b"], [0.5, 1.0])

    def test_accepts_ties(self):
        RankedList("q", "target", ["a", "b"], [0.5, 0.5])


class TestAggregation:
    def test_environment_first_averaging(self):
        """envA scores 1.0, envB scores 0.5; the headline is 0.75 even though
        envB contributes twice as many queries."""
        rows = [
            ("envA", "target", ["g", "x"], "g"),
            ("envB", "target", ["g", "x"], "g"),
            ("envB", "receptacle", ["x", "g"], "g"),
        ]
        mean, per_env, per_mode = aggregate_recall(rows, [1])
        assert per_env["envA"][1] == 1.0
        assert per_env["envB"][1] == 0.5
        assert mean[1] == pytest.approx(0.75)

    def test_per_mode_uses_same_environment_first_rule(self):
        rows = [
            ("envA", "target", ["g", "x"], "g"),
            ("envA", "target", ["x", "g"], "g"),
            ("envB", "target", ["g", "x"], "g"),
            ("envA", "receptacle", ["x", "g"], "g"),
        ]
        _, _, per_mode = aggregate_recall(rows, [1])
        assert per_mode["target"][1] == pytest.approx((0.5 + 1.0) / 2)
        assert per_mode["receptacle"][1] == pytest.approx(0.0)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        rows = []
        per_env_vals = {}
        for env in ("e1", "e2", "e3"):
            vals = []
            for i in range(int(rng.integers(1, 5))):
                ids = [f"{env}i{j}" for j in range(4)]
                gt = ids[int(rng.integers(4))]
                rows.append((env, "target", ids, gt))
                vals.append(reference.recall_reference(ids, gt, 2))
            per_env_vals[env] = reference.env_mean_reference(vals)
        mean, per_env, _ = aggregate_recall(rows, [2])
        for env, want in per_env_vals.items():
            assert per_env[env][2] == pytest.approx(want)
        assert mean[2] == pytest.approx(reference.env_mean_reference(list(per_env_vals.values())))

    def test_k_values_validated(self):
        rows = [("e", "target", ["g"], "g")]
        with pytest.raises(ValueError, match="k values"):
            aggregate_recall(rows, [])
        with pytest.raises(ValueError, match="k values"):
            aggregate_recall(rows, [1, 1])
        with pytest.raises(ValueError, match="k values"):
            aggregate_recall(rows, [0])

    def test_empty_rows_rejected(self):
        with pytest.raises(ValueError, match="no query rankings"):
            aggregate_recall([], [1])


class TestRanking:
    def test_ranks_only_own_environment(self, fitted):
        ds = small_dataset()
        ranked = rank_images(fitted, ds, "q3")
        assert sorted(ranked.image_ids) == ["b1", "b2", "b3"]

    def test_scores_sorted_descending(self, fitted):
        ranked = rank_images(fitted, small_dataset(), "q1")
        assert ranked.scores == sorted(ranked.scores, reverse=True)

    def test_unknown_query(self, fitted):
        with pytest.raises(KeyError, match="q9"):
            rank_images(fitted, small_dataset(), "q9")

    def test_reranking_dump_reproduces_order(self, fitted):
        """Re-sorting the emitted (id, score) pairs with an independent sort
        gives back exactly the emitted order."""
        ds = small_dataset()
        for qid in ("q1", "q2", "q3"):
            ranked = rank_images(fitted, ds, qid)
            assert reference.rerank_reference(ranked.image_ids, ranked.scores) == ranked.image_ids

    def test_duplicate_image_vectors_tie_break_by_id(self, fitted):
        """Two images with identical features score identically; the ranking
        must order them by ascending id, wherever they land."""
        vec = np.full(6, 0.5, dtype=np.float32)
        ds = small_dataset(image_vectors={"a4": vec, "a1": vec})
        ranked = rank_images(fitted, ds, "q1")
        ia, ib = ranked.image_ids.index("a1"), ranked.image_ids.index("a4")
        assert ranked.scores[ia] == ranked.scores[ib]
        assert ia == ib - 1


class TestEvaluate:
    def test_report_shape_and_counts(self, fitted):
        ds = small_dataset()
        report = evaluate(fitted, ds, k_values=(1, 2))
        assert report.n_queries == 3 and report.n_environments == 2
        assert set(report.per_env) == {"envA", "envB"}
        assert set(report.per_mode) == {"target", "receptacle"}
        assert report.k_values == (1, 2)
        assert report.split == "test" and report.dataset_id == "fixture"

    def test_agrees_with_per_query_rank_images(self, fitted):
        """evaluate() batches per environment; it must produce the same
        rankings as querying one id at a time."""
        ds = small_dataset()
        collected: list[RankedList] = []
        evaluate(fitted, ds, k_values=(1,), ranked_out=collected)
        by_qid = {rl.query_id: rl for rl in collected}
        for qid in ("q1", "q2", "q3"):
            solo = rank_images(fitted, ds, qid)
            assert by_qid[qid].image_ids == solo.image_ids
            assert by_qid[qid].scores == solo.scores

    def test_recall_values_recomputable_from_rankings(self, fitted):
        ds = small_dataset()
        collected: list[RankedList] = []
        report = evaluate(fitted, ds, k_values=(1, 2, 3), ranked_out=collected)
        gt = {q.query_id: q.gt_image_id for q in ds.manifest.queries}
        env_of = {q.query_id: q.env_id for q in ds.manifest.queries}
        rows = [(env_of[rl.query_id], rl.mode, rl.image_ids, gt[rl.query_id]) for rl in collected]
        mean, per_env, per_mode = aggregate_recall(rows, (1, 2, 3))
        assert report.mean == mean and report.per_env == per_env and report.per_mode == per_mode

    def test_recall_is_monotone_in_k(self, fitted):
        report = evaluate(fitted, small_dataset(), k_values=(1, 2, 3, 4))
        for env, recalls in report.per_env.items():
            vals = [recalls[k] for k in (1, 2, 3, 4)]
            assert vals == sorted(vals)

    def test_environment_without_queries_rejected(self, fitted):
        queries = [Query("q1", "envA", "target", "a1", 0)]
        ds = build_dataset({"envA": ["a1"], "envB": ["b1"]}, queries)
        with pytest.raises(ValueError, match="envB"):
            evaluate(fitted, ds, k_values=(1,))

    def test_report_json_is_stable(self, fitted):
        ds = small_dataset()
        a = evaluate(fitted, ds, k_values=(1, 2)).to_json()
        b = evaluate(fitted, ds, k_values=(1, 2)).to_json()
        assert a == b
        doc = json.loads(a)
        assert set(doc) == {
            "dataset_id",
            "split",
            "k_values",
            "mean_recall",
            "per_environment",
            "per_mode",
            "n_queries",
            "n_environments",
        }

    def test_save_ranked_lists(self, tmp_path, fitted):
        ds = small_dataset()
        collected: list[RankedList] = []
        evaluate(fitted, ds, k_values=(1,), ranked_out=collected)
        path = tmp_path / "ranked.jsonl"
        save_ranked_lists(collected, path)
        lines = [json.loads(ln) for ln in path.read_text().splitlines()]
        assert [ln["query_id"] for ln in lines] == [rl.query_id for rl in collected]
        assert lines[0]["image_ids"] == collected[0].image_ids
