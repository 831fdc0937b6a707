"""Dense labeling: mine unlabeled positives by judging shortlisted candidates.

For every query, a frozen scorer ranks the images of the query's own
environment, the ground truth is excluded, and the top candidates go to a
judge. A pair enters the unlabeled-positive set only on an affirmative
verdict; anything undecided stays out. Verdicts are cached on disk keyed by
(query_id, image_id, judge kind, prompt hash) so interrupted runs resume
without re-judging, which matters when the judge is a paid model endpoint.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .datastore import Dataset, Query, UnlabeledPositiveSet, validate_unlabeled_set

log = logging.getLogger(__name__)

TRUE_WORD = re.compile(r"\bTrue\b")  # case-sensitive whole word
TRUTH_FORMAT = "rxf-planted-truth/1"


class JudgeUndecided(Exception):
    """The judge could not produce a verdict (transport failure after retries)."""


def parse_verdict(text: str) -> bool:
    """Affirmative iff the output contains the whole word 'True' (case-sensitive)."""
    return TRUE_WORD.search(text) is not None


# -- shortlist scorers ---------------------------------------------------------


class FrozenStreamScorer:
    """Cosine between one raw text stream and one raw image stream.

    No trained weights are involved, so the shortlist is independent of the
    model being trained and stable across runs.
    """

    def __init__(self, text_stream: str = "t_orig", image_stream: str = "v_M"):
        self.text_stream = text_stream
        self.image_stream = image_stream

    def scores(self, ds: Dataset, query_id: str, image_ids: list[str]) -> np.ndarray:
        t = ds.feature_matrix(self.text_stream, [query_id])[0].astype(np.float64)
        imgs = ds.feature_matrix(self.image_stream, image_ids).astype(np.float64)
        if t.shape[0] != imgs.shape[1]:
            raise ValueError(
                f"scorer streams disagree on width: {self.text_stream} is {t.shape[0]}, "
                f"{self.image_stream} is {imgs.shape[1]}"
            )
        tn = np.linalg.norm(t)
        norms = np.linalg.norm(imgs, axis=1)
        if tn == 0.0:
            raise ValueError(f"zero-norm text stream for query '{query_id}'")
        if np.any(norms == 0.0):
            raise ValueError(f"zero-norm image stream for '{image_ids[int(np.argmin(norms))]}'")
        return np.clip(imgs @ t / (norms * tn), -1.0, 1.0)


class ScoreFileScorer:
    """Scores read from a JSON-lines file of {query_id, image_id, score}."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.table: dict[tuple[str, str], float] = {}
        if not self.path.is_file():
            raise FileNotFoundError(f"score file not found: {self.path}")
        for line in self.path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            score = float(rec["score"])
            if not np.isfinite(score) or not (-1.0 <= score <= 1.0):
                raise ValueError(f"score out of range for pair ({rec['query_id']}, {rec['image_id']}): {score}")
            self.table[(rec["query_id"], rec["image_id"])] = score

    def scores(self, ds: Dataset, query_id: str, image_ids: list[str]) -> np.ndarray:
        out = np.empty(len(image_ids), dtype=np.float64)
        for i, iid in enumerate(image_ids):
            key = (query_id, iid)
            if key not in self.table:
                raise KeyError(f"score file has no entry for pair ({query_id}, {iid})")
            out[i] = self.table[key]
        return out


def shortlist(ds: Dataset, query_id: str, scorer, n_cand: int) -> list[str]:
    """Top candidates of the query's environment, ground truth excluded.

    Sorted by score descending with ties broken by ascending image id, then
    truncated to n_cand.
    """
    if n_cand < 1:
        raise ValueError(f"candidate count must be >= 1, got {n_cand}")
    query = ds.queries_by_id.get(query_id)
    if query is None:
        raise KeyError(f"unknown query '{query_id}'")
    env = ds.envs_by_id[query.env_id]
    candidates = [iid for iid in env.image_ids if iid != query.gt_image_id]
    if not candidates:
        raise ValueError(f"environment '{env.env_id}' has no candidates besides the ground truth")
    scores = np.asarray(scorer.scores(ds, query_id, candidates), dtype=np.float64)
    if not np.all(np.isfinite(scores)) or np.any(scores < -1.0) or np.any(scores > 1.0):
        raise ValueError(f"scorer produced out-of-range scores for query '{query_id}'")
    order = sorted(zip(candidates, scores), key=lambda t: (-t[1], t[0]))
    return [iid for iid, _ in order[:n_cand]]


# -- judges ---------------------------------------------------------------------


class OracleJudge:
    """Answers from a planted ground-truth set; used by the synthetic benchmark."""

    kind = "oracle"

    def __init__(self, truth_pairs: set, known_queries: set, known_images: set):
        self.truth = set(truth_pairs)
        self.known_queries = set(known_queries)
        self.known_images = set(known_images)
        canon = json.dumps(sorted(self.truth), separators=(",", ":"))
        self.prompt_hash = hashlib.sha256(canon.encode()).hexdigest()[:16]

    def verdict(self, query: Query, image_id: str) -> bool:
        if query.query_id not in self.known_queries:
            raise ValueError(f"oracle judge: unknown query '{query.query_id}'")
        if image_id not in self.known_images:
            raise ValueError(f"oracle judge: unknown image '{image_id}'")
        return (query.query_id, image_id) in self.truth


class FileJudge:
    """Answers from a verdict file; pairs absent from the file are negative."""

    kind = "file"

    def __init__(self, path: str | Path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"verdict file not found: {path}")
        self.verdicts: dict[tuple[str, str], bool] = {}
        content = path.read_text()
        for line in content.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec.get("verdict"), bool):
                raise ValueError(f"verdict for ({rec.get('query_id')}, {rec.get('image_id')}) is not a bool")
            self.verdicts[(rec["query_id"], rec["image_id"])] = rec["verdict"]
        self.prompt_hash = hashlib.sha256(content.encode()).hexdigest()[:16]

    def verdict(self, query: Query, image_id: str) -> bool:
        return self.verdicts.get((query.query_id, image_id), False)


DEFAULT_PROMPTS = {
    "target": (
        "The instruction is: {instruction}\n"
        "Does the image contain the object this instruction asks to carry? Answer True or False."
    ),
    "receptacle": (
        "The instruction is: {instruction}\n"
        "Does the image contain the place this instruction asks to carry the object to? "
        "Answer True or False."
    ),
}


class MllmHttpJudge:
    """Asks a chat-completions endpoint to judge (instruction, image) pairs.

    Needs the raw assets the engine itself does not store: an instruction
    text per query id and an image file per image id.
    """

    kind = "mllm"

    def __init__(
        self,
        endpoint: str,
        model: str,
        instructions: dict[str, str],
        image_root: str | Path,
        image_pattern: str = "{image_id}.jpg",
        prompts: dict[str, str] | None = None,
        timeout_s: float = 30.0,
        max_retries: int = 3,
        headers: dict[str, str] | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.instructions = instructions
        self.image_root = Path(image_root)
        self.image_pattern = image_pattern
        self.prompts = dict(prompts or DEFAULT_PROMPTS)
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.headers = headers or {}
        canon = json.dumps({"model": model, "prompts": self.prompts}, sort_keys=True)
        self.prompt_hash = hashlib.sha256(canon.encode()).hexdigest()[:16]

    def _payload(self, query: Query, image_id: str) -> dict:
        instruction = self.instructions.get(query.query_id)
        if instruction is None:
            raise ValueError(f"no instruction text for query '{query.query_id}'")
        image_path = self.image_root / self.image_pattern.format(image_id=image_id)
        if not image_path.is_file():
            raise FileNotFoundError(f"image file not found: {image_path}")
        b64 = base64.b64encode(image_path.read_bytes()).decode("ascii")
        suffix = image_path.suffix.lstrip(".").lower() or "jpeg"
        prompt = self.prompts[query.mode].format(instruction=instruction)
        return {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": f"data:image/{suffix};base64,{b64}"}},
                    ],
                }
            ],
            "max_tokens": 8,
        }

    def verdict(self, query: Query, image_id: str) -> bool:
        import requests

        payload = self._payload(query, image_id)
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=payload, timeout=self.timeout_s, headers=self.headers)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                return parse_verdict(text)
            except (requests.RequestException, KeyError, IndexError, ValueError) as err:
                last_error = err
                if attempt < self.max_retries:
                    time.sleep(min(2.0 ** attempt, 8.0))
        raise JudgeUndecided(
            f"pair ({query.query_id}, {image_id}) undecided after {self.max_retries + 1} attempts: {last_error}"
        )


def oracle_judge_from_file(path: str | Path, ds: Dataset) -> OracleJudge:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"planted-truth file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != TRUTH_FORMAT:
        raise ValueError(f"unsupported planted-truth format {doc.get('format')!r}")
    pairs = {(q, i) for q, i in doc["pairs"]}
    known_queries = set(ds.queries_by_id)
    known_images = {iid for e in ds.manifest.environments for iid in e.image_ids}
    return OracleJudge(pairs, known_queries, known_images)


# -- verdict cache and the labeling loop -----------------------------------------


@dataclass(frozen=True)
class _CacheKey:
    query_id: str
    image_id: str
    judge: str
    prompt_hash: str


class VerdictCache:
    """Append-only JSON-lines cache of judge verdicts."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.table: dict[_CacheKey, bool] = {}
        if self.path is not None and self.path.is_file():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = _CacheKey(rec["query_id"], rec["image_id"], rec["judge"], rec["prompt_hash"])
                self.table[key] = rec["verdict"]

    def get(self, key: _CacheKey) -> bool | None:
        return self.table.get(key)

    def put(self, key: _CacheKey, verdict: bool) -> None:
        self.table[key] = verdict
        if self.path is not None:
            rec = {
                "query_id": key.query_id,
                "image_id": key.image_id,
                "judge": key.judge,
                "prompt_hash": key.prompt_hash,
                "verdict": verdict,
            }
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")
                f.flush()


def label_dataset(
    ds: Dataset,
    scorer,
    judge,
    n_cand: int = 20,
    cache_path: str | Path | None = None,
    jobs: int = 1,
    created_at: str | None = None,
) -> UnlabeledPositiveSet:
    """Shortlist and judge every query of the dataset; returns the affirmed pairs.

    jobs > 1 runs judge calls in a thread pool, capped at `jobs` in flight;
    useful only for judges that wait on the network.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    cache = VerdictCache(cache_path)
    todo: list[tuple[Query, str, _CacheKey]] = []
    affirmed: set[tuple[str, str]] = set()
    for query in ds.manifest.queries:
        for image_id in shortlist(ds, query.query_id, scorer, n_cand):
            key = _CacheKey(query.query_id, image_id, judge.kind, judge.prompt_hash)
            hit = cache.get(key)
            if hit is None:
                todo.append((query, image_id, key))
            elif hit:
                affirmed.add((query.query_id, image_id))

    undecided = 0

    def run_one(item: tuple[Query, str, _CacheKey]) -> tuple[_CacheKey, bool | None]:
        query, image_id, key = item
        try:
            return key, bool(judge.verdict(query, image_id))
        except JudgeUndecided as err:
            log.warning("%s", err)
            return key, None

    if jobs == 1:
        outcomes = map(run_one, todo)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, todo))
    for key, verdict in outcomes:
        if verdict is None:
            undecided += 1
            continue
        cache.put(key, verdict)
        if verdict:
            affirmed.add((key.query_id, key.image_id))
    if undecided:
        log.warning("%d pairs left undecided and excluded from the unlabeled-positive set", undecided)

    uset = UnlabeledPositiveSet(
        pairs=frozenset(affirmed),
        provenance=judge.kind,
        created_at=created_at or datetime.now(timezone.utc).isoformat(),
    )
    validate_unlabeled_set(uset, ds)
    return uset
