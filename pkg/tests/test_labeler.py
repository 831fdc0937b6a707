"""Dense labeling: verdict parsing, shortlist construction, judges (including
a live local HTTP endpoint), caching, and the end-to-end labeling loop."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from conftest import build_dataset
from rxf.datastore import Query, load_unlabeled_set, save_unlabeled_set
from rxf.labeler import (
    FileJudge,
    FrozenStreamScorer,
    JudgeUndecided,
    MllmHttpJudge,
    OracleJudge,
    ScoreFileScorer,
    VerdictCache,
    _CacheKey,
    label_dataset,
    oracle_judge_from_file,
    parse_verdict,
    shortlist,
)


def labeled_dataset(seed=0, **kwargs):
    queries = [
        Query("q1", "envA", "target", "a1", 0),
        Query("q2", "envA", "receptacle", "a2", 0),
        Query("q3", "envB", "target", "b1", 0),
    ]
    return build_dataset(
        {"envA": ["a1", "a2", "a3", "a4", "a5"], "envB": ["b1", "b2", "b3"]}, queries, seed=seed, **kwargs
    )


class TestParseVerdict:
    @pytest.mark.parametrize(
        "text,want",
        [
            ("True", True),
            ("True.", True),
            ("The answer is True", True),
            ("(True)", True),
            ("true", False),
            ("TRUE", False),
            ("isTrue", False),
            ("Truely", False),
            ("False", False),
            ("", False),
            ("True or False", True),
        ],
    )
    def test_whole_word_case_sensitive(self, text, want):
        assert parse_verdict(text) is want


class TestFrozenStreamScorer:
    def test_matches_manual_cosine(self):
        ds = labeled_dataset()
        scorer = FrozenStreamScorer()
        got = scorer.scores(ds, "q1", ["a2", "a3"])
        t = ds.feature_matrix("t_orig", ["q1"])[0].astype(np.float64)
        for iid, score in zip(("a2", "a3"), got):
            v = ds.feature_matrix("v_M", [iid])[0].astype(np.float64)
            want = v @ t / (np.linalg.norm(v) * np.linalg.norm(t))
            assert score == pytest.approx(want, abs=1e-12)

    def test_alternate_streams(self):
        ds = labeled_dataset()
        scorer = FrozenStreamScorer(text_stream="t_std", image_stream="v_L")
        t = ds.feature_matrix("t_std", ["q1"])[0].astype(np.float64)
        v = ds.feature_matrix("v_L", ["a2"])[0].astype(np.float64)
        want = v @ t / (np.linalg.norm(v) * np.linalg.norm(t))
        assert scorer.scores(ds, "q1", ["a2"])[0] == pytest.approx(want, abs=1e-12)

    def test_zero_norm_image_raises(self):
        ds = labeled_dataset(image_vectors={"a3": np.zeros(6, dtype=np.float32)})
        with pytest.raises(ValueError, match="a3"):
            FrozenStreamScorer().scores(ds, "q1", ["a2", "a3"])

    def test_scores_clipped(self):
        ds = labeled_dataset()
        got = FrozenStreamScorer().scores(ds, "q1", ["a2", "a3", "a4", "a5"])
        assert np.all(got >= -1.0) and np.all(got <= 1.0)


class TestScoreFileScorer:
    def _write(self, path, rows):
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")

    def test_reads_scores(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        self._write(
            path,
            [
                {"query_id": "q1", "image_id": "a2", "score": 0.5},
                {"query_id": "q1", "image_id": "a3", "score": -0.25},
            ],
        )
        ds = labeled_dataset()
        got = ScoreFileScorer(path).scores(ds, "q1", ["a3", "a2"])
        np.testing.assert_allclose(got, [-0.25, 0.5])

    def test_missing_pair_raises(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        self._write(path, [{"query_id": "q1", "image_id": "a2", "score": 0.5}])
        with pytest.raises(KeyError, match="a3"):
            ScoreFileScorer(path).scores(labeled_dataset(), "q1", ["a3"])

    def test_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        self._write(path, [{"query_id": "q1", "image_id": "a2", "score": 1.5}])
        with pytest.raises(ValueError, match="out of range"):
            ScoreFileScorer(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ScoreFileScorer(tmp_path / "none.jsonl")


class TestShortlist:
    def test_excludes_ground_truth(self):
        ds = labeled_dataset()
        got = shortlist(ds, "q1", FrozenStreamScorer(), n_cand=10)
        assert "a1" not in got
        assert set(got) == {"a2", "a3", "a4", "a5"}

    def test_restricted_to_own_environment(self):
        got = shortlist(labeled_dataset(), "q3", FrozenStreamScorer(), n_cand=10)
        assert set(got) == {"b2", "b3"}

    def test_truncates_to_best_candidates(self, tmp_path):
        rows = [
            {"query_id": "q1", "image_id": "a2", "score": 0.1},
            {"query_id": "q1", "image_id": "a3", "score": 0.9},
            {"query_id": "q1", "image_id": "a4", "score": 0.5},
            {"query_id": "q1", "image_id": "a5", "score": 0.7},
        ]
        path = tmp_path / "scores.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        got = shortlist(labeled_dataset(), "q1", ScoreFileScorer(path), n_cand=2)
        assert got == ["a3", "a5"]

    def test_ties_break_by_ascending_id(self, tmp_path):
        rows = [
            {"query_id": "q1", "image_id": iid, "score": 0.5} for iid in ("a5", "a4", "a3", "a2")
        ]
        path = tmp_path / "scores.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        got = shortlist(labeled_dataset(), "q1", ScoreFileScorer(path), n_cand=3)
        assert got == ["a2", "a3", "a4"]

    def test_invalid_n_cand(self):
        with pytest.raises(ValueError, match="candidate count"):
            shortlist(labeled_dataset(), "q1", FrozenStreamScorer(), n_cand=0)

    def test_unknown_query(self):
        with pytest.raises(KeyError, match="q9"):
            shortlist(labeled_dataset(), "q9", FrozenStreamScorer(), n_cand=1)

    def test_no_candidates_besides_gt(self):
        ds = build_dataset({"envA": ["a1"]}, [Query("q1", "envA", "target", "a1", 0)])
        with pytest.raises(ValueError, match="no candidates"):
            shortlist(ds, "q1", FrozenStreamScorer(), n_cand=1)


class TestJudges:
    def test_oracle_membership(self):
        judge = OracleJudge({("q1", "a3")}, {"q1"}, {"a2", "a3"})
        q = Query("q1", "envA", "target", "a1", 0)
        assert judge.verdict(q, "a3") is True
        assert judge.verdict(q, "a2") is False

    def test_oracle_rejects_unknown_ids(self):
        judge = OracleJudge(set(), {"q1"}, {"a2"})
        with pytest.raises(ValueError, match="unknown query"):
            judge.verdict(Query("q9", "envA", "target", "a1", 0), "a2")
        with pytest.raises(ValueError, match="unknown image"):
            judge.verdict(Query("q1", "envA", "target", "a1", 0), "zz")

    def test_oracle_prompt_hash_tracks_truth_set(self):
        a = OracleJudge({("q1", "a3")}, {"q1"}, {"a3"})
        b = OracleJudge({("q1", "a3")}, {"q1"}, {"a3"})
        c = OracleJudge({("q1", "a2")}, {"q1"}, {"a2"})
        assert a.prompt_hash == b.prompt_hash != c.prompt_hash

    def test_oracle_from_file(self, tmp_path):
        ds = labeled_dataset()
        path = tmp_path / "truth.json"
        path.write_text(json.dumps({"format": "rxf-planted-truth/1", "pairs": [["q1", "a3"]]}))
        judge = oracle_judge_from_file(path, ds)
        assert judge.verdict(ds.queries_by_id["q1"], "a3") is True
        assert judge.verdict(ds.queries_by_id["q1"], "a4") is False

    def test_oracle_file_format_checked(self, tmp_path):
        path = tmp_path / "truth.json"
        path.write_text(json.dumps({"format": "other", "pairs": []}))
        with pytest.raises(ValueError, match="format"):
            oracle_judge_from_file(path, labeled_dataset())

    def test_file_judge_defaults_to_negative(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text(json.dumps({"query_id": "q1", "image_id": "a3", "verdict": True}) + "\n")
        judge = FileJudge(path)
        q = Query("q1", "envA", "target", "a1", 0)
        assert judge.verdict(q, "a3") is True
        assert judge.verdict(q, "a4") is False

    def test_file_judge_rejects_non_bool(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text(json.dumps({"query_id": "q1", "image_id": "a3", "verdict": "True"}) + "\n")
        with pytest.raises(ValueError, match="not a bool"):
            FileJudge(path)

    def test_empty_verdict_file_affirms_nothing(self, tmp_path):
        path = tmp_path / "verdicts.jsonl"
        path.write_text("")
        uset = label_dataset(labeled_dataset(), FrozenStreamScorer(), FileJudge(path), n_cand=3)
        assert uset.pairs == frozenset()
        assert uset.provenance == "file"


class TestVerdictCache:
    def test_round_trip_and_resume(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = VerdictCache(path)
        key = _CacheKey("q1", "a3", "oracle", "abcd")
        assert cache.get(key) is None
        cache.put(key, True)
        resumed = VerdictCache(path)
        assert resumed.get(key) is True

    def test_keys_include_judge_and_prompt_hash(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = VerdictCache(path)
        cache.put(_CacheKey("q1", "a3", "oracle", "aaaa"), True)
        assert cache.get(_CacheKey("q1", "a3", "oracle", "bbbb")) is None
        assert cache.get(_CacheKey("q1", "a3", "mllm", "aaaa")) is None

    def test_memory_only_when_no_path(self):
        cache = VerdictCache(None)
        key = _CacheKey("q", "i", "j", "h")
        cache.put(key, False)
        assert cache.get(key) is False


class CountingJudge:
    """Oracle wrapper that counts verdict calls."""

    def __init__(self, truth):
        self.kind = "oracle"
        self.prompt_hash = "fixed0123456789a"
        self.truth = truth
        self.calls = 0

    def verdict(self, query, image_id):
        self.calls += 1
        return (query.query_id, image_id) in self.truth


class TestLabelDataset:
    TRUTH = {("q1", "a3"), ("q2", "a4"), ("q3", "b2")}

    def _judge(self, ds):
        images = {iid for e in ds.manifest.environments for iid in e.image_ids}
        return OracleJudge(self.TRUTH, set(ds.queries_by_id), images)

    def test_affirmed_pairs_match_truth_on_shortlist(self):
        ds = labeled_dataset()
        uset = label_dataset(ds, FrozenStreamScorer(), self._judge(ds), n_cand=10)
        assert uset.pairs == frozenset(self.TRUTH)
        assert uset.provenance == "oracle"

    def test_result_never_contains_ground_truth(self):
        ds = labeled_dataset()
        truth = set(self.TRUTH)
        uset = label_dataset(ds, FrozenStreamScorer(), self._judge(ds), n_cand=10)
        for q in ds.manifest.queries:
            assert (q.query_id, q.gt_image_id) not in uset.pairs
        assert truth == self.TRUTH

    def test_created_at_passthrough_and_round_trip(self, tmp_path):
        ds = labeled_dataset()
        uset = label_dataset(ds, FrozenStreamScorer(), self._judge(ds), n_cand=10, created_at="t0")
        assert uset.created_at == "t0"
        save_unlabeled_set(uset, tmp_path / "u.jsonl")
        assert load_unlabeled_set(tmp_path / "u.jsonl") == uset

    def test_cache_prevents_rejudging(self, tmp_path):
        ds = labeled_dataset()
        cache = tmp_path / "cache.jsonl"
        first = CountingJudge(self.TRUTH)
        a = label_dataset(ds, FrozenStreamScorer(), first, n_cand=3, cache_path=cache, created_at="t")
        assert first.calls == 8  # 3 + 3 candidates in envA, 2 in envB
        second = CountingJudge(self.TRUTH)
        b = label_dataset(ds, FrozenStreamScorer(), second, n_cand=3, cache_path=cache, created_at="t")
        assert second.calls == 0
        assert a == b

    def test_parallel_matches_serial(self):
        ds = labeled_dataset()
        serial = label_dataset(ds, FrozenStreamScorer(), self._judge(ds), n_cand=10, created_at="t")
        parallel = label_dataset(ds, FrozenStreamScorer(), self._judge(ds), n_cand=10, jobs=4, created_at="t")
        assert serial == parallel

    def test_undecided_pairs_are_excluded_and_not_cached(self, tmp_path):
        ds = labeled_dataset()

        class FlakyJudge(CountingJudge):
            def verdict(self, query, image_id):
                self.calls += 1
                if (query.query_id, image_id) == ("q1", "a3"):
                    raise JudgeUndecided("transport down")
                return (query.query_id, image_id) in self.truth

        cache = tmp_path / "cache.jsonl"
        uset = label_dataset(ds, FrozenStreamScorer(), FlakyJudge(self.TRUTH), n_cand=10, cache_path=cache)
        assert ("q1", "a3") not in uset.pairs
        assert ("q2", "a4") in uset.pairs
        cached = [json.loads(ln) for ln in cache.read_text().splitlines()]
        assert ("q1", "a3") not in {(r["query_id"], r["image_id"]) for r in cached}
        retry = CountingJudge(self.TRUTH)
        healed = label_dataset(ds, FrozenStreamScorer(), retry, n_cand=10, cache_path=cache)
        assert retry.calls == 1
        assert ("q1", "a3") in healed.pairs

    def test_invalid_jobs(self):
        ds = labeled_dataset()
        with pytest.raises(ValueError, match="jobs"):
            label_dataset(ds, FrozenStreamScorer(), self._judge(ds), jobs=0)


class _CannedHandler(BaseHTTPRequestHandler):
    """Pops one scripted action per request: ('ok', text) or ('error', code)."""

    script: list = []
    seen: list = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        type(self).seen.append(json.loads(self.rfile.read(length)))
        action, value = type(self).script.pop(0) if type(self).script else ("ok", "True")
        if action == "error":
            self.send_response(value)
            self.end_headers()
            return
        body = json.dumps({"choices": [{"message": {"content": value}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def judge_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _CannedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _CannedHandler.script = []
    _CannedHandler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    thread.join(timeout=5)


@pytest.fixture
def image_root(tmp_path):
    root = tmp_path / "images"
    root.mkdir()
    for iid in ("a2", "a3"):
        (root / f"{iid}.jpg").write_bytes(b"\xff\xd8 fake jpeg bytes")
    return root


class TestMllmHttpJudge:
    QUERY = Query("q1", "envA", "target", "a1", 0)

    def _judge(self, endpoint, image_root, **kwargs):
        kwargs.setdefault("max_retries", 1)
        return MllmHttpJudge(
            endpoint=endpoint,
            model="judge-model",
            instructions={"q1": "carry the red mug to the sink"},
            image_root=image_root,
            **kwargs,
        )

    def test_affirmative_and_negative_verdicts(self, judge_server, image_root):
        judge = self._judge(judge_server, image_root)
        _CannedHandler.script = [("ok", "True"), ("ok", "False. The image shows a chair.")]
        assert judge.verdict(self.QUERY, "a2") is True
        assert judge.verdict(self.QUERY, "a3") is False

    def test_payload_carries_prompt_and_image(self, judge_server, image_root):
        judge = self._judge(judge_server, image_root)
        _CannedHandler.script = [("ok", "True")]
        judge.verdict(self.QUERY, "a2")
        payload = _CannedHandler.seen[0]
        assert payload["model"] == "judge-model"
        parts = payload["messages"][0]["content"]
        assert "carry the red mug" in parts[0]["text"]
        assert parts[1]["image_url"]["url"].startswith("data:image/jpg;base64,")

    def test_retries_after_server_errors(self, judge_server, image_root, monkeypatch):
        monkeypatch.setattr("rxf.labeler.time.sleep", lambda s: None)
        judge = self._judge(judge_server, image_root, max_retries=2)
        _CannedHandler.script = [("error", 500), ("error", 503), ("ok", "True")]
        assert judge.verdict(self.QUERY, "a2") is True
        assert len(_CannedHandler.seen) == 3

    def test_gives_up_as_undecided(self, judge_server, image_root, monkeypatch):
        monkeypatch.setattr("rxf.labeler.time.sleep", lambda s: None)
        judge = self._judge(judge_server, image_root, max_retries=1)
        _CannedHandler.script = [("error", 500), ("error", 500)]
        with pytest.raises(JudgeUndecided, match="2 attempts"):
            judge.verdict(self.QUERY, "a2")

    def test_missing_instruction_raises(self, judge_server, image_root):
        judge = self._judge(judge_server, image_root)
        with pytest.raises(ValueError, match="instruction"):
            judge.verdict(Query("q9", "envA", "target", "a1", 0), "a2")

    def test_missing_image_file_raises(self, judge_server, image_root):
        judge = self._judge(judge_server, image_root)
        with pytest.raises(FileNotFoundError, match="a9"):
            judge.verdict(self.QUERY, "a9")

    def test_mode_selects_prompt(self, judge_server, image_root):
        judge = MllmHttpJudge(
            endpoint=judge_server,
            model="judge-model",
            instructions={"q2": "bring the plate to the table"},
            image_root=image_root,
        )
        _CannedHandler.script = [("ok", "True")]
        judge.verdict(Query("q2", "envA", "receptacle", "a1", 0), "a2")
        text = _CannedHandler.seen[0]["messages"][0]["content"][0]["text"]
        assert "place" in text and "bring the plate" in text
