import threading

import pytest

from semvox.augment import (
    AugmentCache,
    AugmentError,
    AugmentedStudy,
    AugVariantKind,
    EPOCH_TIMESTAMP,
    Provenance,
    TextVariant,
    augment_corpus,
    augment_study,
    build_aug_prompt,
    variant_schedule,
    variants_from_record,
)
from semvox.corpus import StudyRecord
from semvox.llm import LlmError, MockLlmClient


@pytest.fixture()
def study():
    return StudyRecord(id="s1", title="pain processing in the anterior cingulate")


@pytest.fixture()
def cache(tmp_path):
    return AugmentCache(tmp_path / "aug_cache.jsonl")


class CountingClient:
    """Wraps the mock and counts calls; optionally fails on chosen prompts."""

    name = "counting"
    deterministic = True

    def __init__(self, fail_if=None):
        self.inner = MockLlmClient()
        self.calls = 0
        self.fail_if = fail_if

    def complete(self, prompt, *, max_tokens=256, temperature=0.0, seed=None):
        self.calls += 1
        if self.fail_if and self.fail_if(prompt):
            raise LlmError("synthetic transport failure")
        return self.inner.complete(
            prompt, max_tokens=max_tokens, temperature=temperature, seed=seed
        )


class TestSchedule:
    def test_step_zero_is_title(self):
        assert variant_schedule(0) is TextVariant.TITLE

    def test_step_three_is_abstract(self):
        assert variant_schedule(3) is TextVariant.ABSTRACT

    def test_period_seven_wraparound(self):
        assert variant_schedule(7) is TextVariant.TITLE
        for step in range(14):
            assert variant_schedule(step) is variant_schedule(step + 7)

    def test_full_order(self):
        expected = [
            TextVariant.TITLE,
            TextVariant.TITLE_SYN_MAJOR,
            TextVariant.TITLE_SYN_MINOR,
            TextVariant.ABSTRACT,
            TextVariant.EXPERIMENT_DESIGN,
            TextVariant.KEYWORDS,
            TextVariant.TITLE,
        ]
        assert [variant_schedule(s) for s in range(7)] == expected

    def test_title_twice_per_period_others_once(self):
        from collections import Counter

        counts = Counter(variant_schedule(s) for s in range(7))
        assert counts[TextVariant.TITLE] == 2
        for variant in TextVariant:
            if variant is not TextVariant.TITLE:
                assert counts[variant] == 1

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            variant_schedule(-1)


class TestPrompts:
    def test_contains_title_and_instruction(self, study):
        prompt = build_aug_prompt(study, AugVariantKind.KEYWORDS)
        assert study.title in prompt
        assert "keywords" in prompt

    def test_deterministic(self, study):
        a = build_aug_prompt(study, AugVariantKind.ABSTRACT)
        b = build_aug_prompt(study, AugVariantKind.ABSTRACT)
        assert a == b

    def test_five_distinct_prompts(self, study):
        prompts = {build_aug_prompt(study, k) for k in AugVariantKind}
        assert len(prompts) == 5

    def test_empty_title_rejected(self):
        with pytest.raises(ValueError):
            build_aug_prompt(StudyRecord(id="x", title="  "), AugVariantKind.ABSTRACT)


class TestAugmentStudy:
    def test_five_variants_five_calls(self, study, cache):
        client = CountingClient()
        aug = augment_study(client, cache, study)
        assert set(aug.variants) == set(AugVariantKind)
        assert client.calls == 5
        assert all(text.strip() for text in aug.variants.values())

    def test_warm_cache_no_calls_identical_output(self, study, cache):
        first = augment_study(CountingClient(), cache, study)
        client = CountingClient()
        second = augment_study(client, cache, study)
        assert client.calls == 0
        assert second.variants == first.variants

    def test_partial_failure_names_kind_and_keeps_cache(self, study, cache):
        prompt_exp = build_aug_prompt(study, AugVariantKind.EXPERIMENT_DESIGN)
        client = CountingClient(fail_if=lambda p: p == prompt_exp)
        with pytest.raises(AugmentError) as excinfo:
            augment_study(client, cache, study, max_retries=1)
        assert excinfo.value.kind is AugVariantKind.EXPERIMENT_DESIGN
        # Kinds generated before the failure stay cached.
        for kind in (
            AugVariantKind.TITLE_SYN_MAJOR,
            AugVariantKind.TITLE_SYN_MINOR,
            AugVariantKind.ABSTRACT,
        ):
            assert cache.get(study.id, kind, build_aug_prompt(study, kind)) is not None
        # A following run completes without recomputing the cached kinds.
        ok_client = CountingClient()
        aug = augment_study(ok_client, cache, study)
        assert ok_client.calls == 2  # experiment_design and keywords only
        assert set(aug.variants) == set(AugVariantKind)

    def test_deterministic_client_epoch_timestamp(self, study, cache):
        aug = augment_study(MockLlmClient(), cache, study)
        assert aug.provenance.timestamp == EPOCH_TIMESTAMP

    def test_retries_then_success(self, study, cache):
        state = {"failures": 2}

        class FlakyClient(CountingClient):
            def complete(self, prompt, **kwargs):
                self.calls += 1
                if state["failures"] > 0:
                    state["failures"] -= 1
                    raise LlmError("flaky")
                return self.inner.complete(prompt, **kwargs)

        aug = augment_study(FlakyClient(), cache, study, max_retries=2)
        assert set(aug.variants) == set(AugVariantKind)

    def test_cache_persists_across_instances(self, study, tmp_path):
        path = tmp_path / "cache.jsonl"
        augment_study(MockLlmClient(), AugmentCache(path), study)
        client = CountingClient()
        augment_study(client, AugmentCache(path), study)
        assert client.calls == 0

    def test_prompt_change_invalidates_cache(self, study, cache):
        augment_study(MockLlmClient(), cache, study)
        other = StudyRecord(id=study.id, title="a different title entirely")
        client = CountingClient()
        augment_study(client, cache, other)
        assert client.calls == 5

    def test_concurrent_studies(self, tmp_path):
        cache = AugmentCache(tmp_path / "c.jsonl")
        studies = [StudyRecord(id=f"s{i}", title=f"study topic {i}") for i in range(6)]
        results = {}
        errors = []

        def work(rec):
            try:
                results[rec.id] = augment_study(MockLlmClient(), cache, rec)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(s,)) for s in studies]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert len(results) == 6
        reloaded = AugmentCache(cache.path)
        assert len(reloaded) == 30


class TestAugmentedStudy:
    def test_requires_all_five(self):
        with pytest.raises(ValueError, match="missing"):
            AugmentedStudy(
                study_id="s",
                variants={AugVariantKind.ABSTRACT: "text"},
                provenance=Provenance("mock", EPOCH_TIMESTAMP),
            )

    def test_rejects_empty_text(self):
        variants = {k: "text" for k in AugVariantKind}
        variants[AugVariantKind.KEYWORDS] = "   "
        with pytest.raises(ValueError, match="empty"):
            AugmentedStudy(
                study_id="s",
                variants=variants,
                provenance=Provenance("mock", EPOCH_TIMESTAMP),
            )

    def test_roundtrip_through_record(self, study, cache):
        aug = augment_study(MockLlmClient(), cache, study)
        rec = StudyRecord(id=study.id, title=study.title, variants=aug.as_str_map())
        parsed = variants_from_record(rec)
        assert parsed == dict(aug.variants)


class TestAugmentCorpus:
    def test_all_studies(self, cache):
        studies = [StudyRecord(id=f"s{i}", title=f"topic {i} study") for i in range(3)]
        out = augment_corpus(MockLlmClient(), cache, studies)
        assert sorted(out) == ["s0", "s1", "s2"]


class TestMockBehavior:
    def test_mock_referentially_transparent(self, study):
        a = MockLlmClient()
        b = MockLlmClient()
        for kind in AugVariantKind:
            prompt = build_aug_prompt(study, kind)
            assert a.complete(prompt) == b.complete(prompt)

    def test_title_variants_preserve_bag_of_words(self, study):
        from semvox.corpus import tokenize

        client = MockLlmClient()
        base = sorted(tokenize(study.title))
        for kind in (AugVariantKind.TITLE_SYN_MAJOR, AugVariantKind.TITLE_SYN_MINOR):
            text = client.complete(build_aug_prompt(study, kind))
            assert sorted(tokenize(text)) == base
            if len(base) > 1:
                assert text != " ".join(tokenize(study.title))
