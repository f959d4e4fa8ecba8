import json

import pytest

from semvox.corpus import Corpus, StudyRecord, build_index, tokenize
from semvox.llm import LlmError, MockLlmClient
from semvox.metrics import mask_tokens
from semvox.refine import (
    NEGATIVE,
    POSITIVE,
    RefineError,
    T2SConfig,
    build_dynamic_prompt,
    classify_example,
    extract_keywords,
    refine_query,
    score_candidate,
)
from semvox.synthetic import make_synthetic_corpus


@pytest.fixture()
def index():
    corpus = Corpus(
        [
            StudyRecord(id="p1", title="pain processing in cortex"),
            StudyRecord(id="p2", title="chronic pain and nociception"),
            StudyRecord(id="l1", title="language networks and speech"),
            StudyRecord(id="l2", title="speech production fluency"),
            StudyRecord(id="m1", title="episodic memory retrieval"),
        ]
    )
    return build_index(corpus)


class TestExtractKeywords:
    def test_empty_text(self, index):
        assert extract_keywords(index, "", 5) == []

    def test_rare_repeated_term_ranked_first(self):
        index = build_index(
            {
                "a": "common words appear here",
                "b": "common words appear again",
                "c": "common words and the rare nociception topic",
            }
        )
        text = "common nociception nociception common words"
        ranked = extract_keywords(index, text, 3)
        # tf=2 on a df=1 term beats tf=2 on df=3 terms.
        assert ranked[0] == "nociception"

    def test_m_larger_than_distinct_tokens(self, index):
        out = extract_keywords(index, "pain cortex", 10)
        assert sorted(out) == ["cortex", "pain"]

    def test_oov_dropped(self, index):
        assert extract_keywords(index, "zzzz qqqq pain", 5) == ["pain"]

    def test_ties_lexicographic(self):
        index = build_index({"a": "alpha beta", "b": "alpha beta"})
        assert extract_keywords(index, "beta alpha", 2) == ["alpha", "beta"]


class TestDynamicPrompt:
    def test_no_examples_no_sections(self):
        prompt = build_dynamic_prompt("q text", ["t1"], [], [])
        assert "Positive examples:" not in prompt
        assert "Negative examples:" not in prompt
        assert "Similar samples:" in prompt

    def test_positive_included_under_label(self):
        prompt = build_dynamic_prompt("q", ["t1"], ["good candidate"], [])
        lines = prompt.splitlines()
        idx = lines.index("Positive examples:")
        assert lines[idx + 1] == "- good candidate"

    def test_deterministic(self):
        args = ("q", ["t1", "t2"], ["p"], ["n"])
        assert build_dynamic_prompt(*args) == build_dynamic_prompt(*args)

    def test_query_embedded(self):
        prompt = build_dynamic_prompt("pain in the brain", [], [], [])
        assert "Query: pain in the brain" in prompt


class TestScoreCandidate:
    def test_identical_to_single_retrieved(self, index):
        assert score_candidate(index, "pain processing in cortex", ["p1"]) == pytest.approx(1.0)

    def test_no_shared_vocabulary(self, index):
        assert score_candidate(index, "zzz www", ["p1", "l1"]) == 0.0

    def test_mean_of_two(self, index):
        # One perfect match and one unrelated: the mean of 1.0 and 0.0.
        score = score_candidate(index, "pain processing in cortex", ["p1"])
        both = score_candidate(index, "pain processing in cortex", ["p1", "m1"])
        assert both == pytest.approx(score / 2.0, abs=1e-12)

    def test_empty_retrieved_rejected(self, index):
        with pytest.raises(ValueError):
            score_candidate(index, "pain", [])

    def test_token_order_invariant(self, index):
        a = score_candidate(index, "pain cortex processing", ["p1", "p2"])
        b = score_candidate(index, "processing cortex pain", ["p1", "p2"])
        assert a == pytest.approx(b, abs=1e-15)


class TestClassify:
    def test_strict_improvement_positive(self):
        assert classify_example(0.4, 0.3) == POSITIVE

    def test_equal_negative(self):
        assert classify_example(0.3, 0.3) == NEGATIVE

    def test_first_candidate_zero_negative(self):
        assert classify_example(0.0, 0.0) == NEGATIVE


class FailingClient:
    name = "fail"
    deterministic = True

    def __init__(self, fail_at_call):
        self.fail_at = fail_at_call
        self.calls = 0
        self.inner = MockLlmClient()

    def complete(self, prompt, **kwargs):
        self.calls += 1
        if self.calls >= self.fail_at:
            raise LlmError("down")
        return self.inner.complete(prompt, **kwargs)


class TestRefineQuery:
    def test_zero_iterations_single_record(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=0)
        sq = refine_query(index, config, "pain processing")
        assert len(sq.history) == 1
        assert sq.best is sq.history[0]

    def test_history_length(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=4)
        sq = refine_query(index, config, "pain in cortex")
        assert len(sq.history) == 5

    def test_best_is_max_earliest_tie(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=3)
        sq = refine_query(index, config, "speech and language")
        best_score = max(r.score for r in sq.history)
        assert sq.best.score == best_score
        first_with_best = next(r for r in sq.history if r.score == best_score)
        assert sq.best.index == first_with_best.index

    def test_pure_function_of_inputs(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=3)
        a = refine_query(index, config, "memory retrieval study")
        b = refine_query(index, config, "memory retrieval study")
        assert a.to_json() == b.to_json()

    def test_client_failure_carries_partial_history(self, index):
        config = T2SConfig(client=FailingClient(fail_at_call=3), retrieve_k=3, iterations=4)
        with pytest.raises(RefineError) as excinfo:
            refine_query(index, config, "pain processing")
        assert len(excinfo.value.history) == 2

    def test_unmatched_query_still_completes(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=2)
        sq = refine_query(index, config, "zzz qqq xxx")
        assert sq.retrieved_ids == []
        assert len(sq.history) == 3
        assert all(r.score == 0.0 for r in sq.history)

    def test_masked_query_recovery(self):
        # A title corrupted at mask rate 0.5 scores worse than the refined
        # best, which restores retrieved-sample vocabulary.
        corpus = make_synthetic_corpus(30, n_clusters=4, seed=3)
        index = build_index(corpus)
        config = T2SConfig(client=MockLlmClient(), retrieve_k=5, iterations=3)
        improvements = []
        for rec in list(corpus)[:6]:
            masked = " ".join(mask_tokens(tokenize(rec.title), 0.5, seed=11))
            sq = refine_query(index, config, masked)
            if not sq.retrieved_ids:
                continue
            raw_score = score_candidate(index, masked, sq.retrieved_ids)
            assert sq.best.score >= raw_score - 1e-12
            improvements.append(sq.best.score - raw_score)
        assert improvements
        assert max(improvements) > 0

    def test_transcript_json_shape(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=2, iterations=1)
        sq = refine_query(index, config, "pain processing")
        obj = json.loads(sq.to_json())
        assert obj["original"] == "pain processing"
        assert len(obj["history"]) == 2
        for entry in obj["history"]:
            assert set(entry) == {"index", "candidate", "score", "classification", "prompt"}
        assert obj["best"]["score"] == sq.best.score

    def test_config_validation(self):
        with pytest.raises(ValueError):
            T2SConfig(client=MockLlmClient(), retrieve_k=0)
        with pytest.raises(ValueError):
            T2SConfig(client=MockLlmClient(), iterations=-1)

    def test_best_score_matches_recomputation(self, index):
        config = T2SConfig(client=MockLlmClient(), retrieve_k=3, iterations=2)
        sq = refine_query(index, config, "pain and language")
        recomputed = score_candidate(index, sq.best.candidate, sq.retrieved_ids)
        assert sq.best.score == pytest.approx(recomputed, abs=1e-12)
