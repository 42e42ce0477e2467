import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccshap_audit.corpus import CleanEmail, Label
from ccshap_audit.errors import CoalitionError, ContractError
from ccshap_audit.scoring import (
    EPS,
    MASK_LITERAL,
    ClassificationTarget,
    CoalitionScorer,
    Explanation,
    ExplanationTarget,
    ScoreCache,
    ScoreRequest,
    apply_mask,
    cached_score,
    encode_email,
    mask_text,
    score,
    tokenize,
)
from ccshap_audit.shapley import mc_shapley
from ccshap_audit.toy_models import ToyBackend


class ConstantBackend:
    backend_id = "constant"

    def __init__(self, value=0.5):
        self.value = value
        self.calls = 0

    def label_probabilities(self, sequence, masks):
        self.calls += len(masks)
        return np.tile([self.value, 1 - self.value], (len(masks), 1))

    def explain(self, sequence, label):
        return Explanation("because", ("because",), label)

    def explanation_probabilities(self, sequence, masks, explanation):
        self.calls += len(masks)
        return np.full(len(masks), self.value)


class CountingBackend(ConstantBackend):
    """P(PHISHING) grows with the number of visible tokens."""

    backend_id = "counting"

    def label_probabilities(self, sequence, masks):
        self.calls += len(masks)
        p = 0.1 + 0.8 * np.asarray(masks).mean(axis=1)
        return np.column_stack([p, 1 - p])


# -- tokenize / mask ----------------------------------------------------------


def test_tokenize_word_boundaries():
    seq = tokenize("Verify your account!")
    assert seq.surface == ("verify", "your", "account", "!")
    assert seq.pad_id not in seq.tokens
    assert tokenize("Verify your account!") == seq


def test_tokenize_keeps_hyphenated_words():
    assert tokenize("URGENT-VERIFY now.").surface == ("urgent-verify", "now", ".")


def test_tokenize_empty_raises():
    with pytest.raises(ContractError, match="nothing to attribute"):
        tokenize("   ")


def test_tokenize_truncates_long_text():
    body = " ".join(f"word{i % 50}" for i in range(1000))
    assert len(body) >= 5000
    seq = tokenize(body, max_tokens=128)
    assert len(seq) == 128 and seq.truncated
    assert not tokenize("short text").truncated


def test_encode_email_template_tokens_frozen():
    email = CleanEmail("a@b.c", "Hi there", "Click now", Label.PHISHING)
    seq = encode_email(email)
    assert seq.surface[:2] == ("from", ":")
    assert [seq.surface[i] for i in seq.players] == ["a", "@", "b", ".", "c", "hi", "there", "click", "now"]
    seq_all = encode_email(email, attribute_template=True)
    assert seq_all.attributable.all() and len(seq_all) == len(seq)


def test_encode_email_truncation_keeps_header_fields():
    email = CleanEmail("a@b.c", "Urgent", " ".join(["blah"] * 600), Label.PHISHING)
    seq = encode_email(email, max_tokens=20)
    assert len(seq) == 20 and seq.truncated
    assert "urgent" in seq.surface and "a" in seq.surface


def test_apply_mask_cases():
    seq = tokenize("a b c")
    assert apply_mask(seq, [1, 1, 1]) == seq
    hidden = apply_mask(seq, [0, 0, 0])
    assert (hidden.tokens == seq.pad_id).all()
    mid = apply_mask(seq, [1, 0, 1])
    assert mid.tokens[1] == seq.pad_id and mid.tokens[0] == seq.tokens[0] and mid.tokens[2] == seq.tokens[2]
    assert apply_mask(mid, [1, 0, 1]) == mid
    with pytest.raises(ContractError):
        apply_mask(seq, [1, 0])


def test_mask_text_uses_literal():
    seq = tokenize("pay now !")
    assert mask_text(seq, [1, 0, 1]) == f"pay {MASK_LITERAL} !"


# -- score ------------------------------------------------------------------


def test_score_toy_full_beats_empty(trained_model):
    backend = ToyBackend(trained_model)
    seq = tokenize("urgent-verify your bank account password now")
    target = ClassificationTarget(Label.PHISHING)
    full = score(ScoreRequest(seq, np.ones(len(seq), bool), target), backend)
    empty = score(ScoreRequest(seq, np.zeros(len(seq), bool), target), backend)
    assert full > empty


def test_score_constant_backend_ignores_mask():
    backend = ConstantBackend(0.5)
    seq = tokenize("one two three")
    target = ClassificationTarget(Label.PHISHING)
    rng = np.random.default_rng(0)
    values = {score(ScoreRequest(seq, rng.random(3) < 0.5, target), backend) for _ in range(10)}
    assert values == {0.5}


def test_explanation_of_one_token_is_its_probability(trained_model):
    backend = ToyBackend(trained_model)
    seq = tokenize("urgent-verify your account")
    expl = Explanation("x", ("urgent-verify",), Label.PHISHING)
    strength = np.exp(np.abs(trained_model.contributions(seq)))
    expected = strength[0] / (1.0 + strength.sum())
    got = score(ScoreRequest(seq, np.ones(3, bool), ExplanationTarget(expl)), backend)
    assert got == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("raw, expected", [(0.0, EPS), (1.0, 1 - EPS), (float("nan"), EPS), (0.3, 0.3)])
def test_score_is_clamped(raw, expected):
    backend = ConstantBackend(raw)
    seq = tokenize("x y")
    assert score(ScoreRequest(seq, np.ones(2, bool), ClassificationTarget(Label.PHISHING)), backend) == expected


def test_explanation_target_needs_tokens():
    with pytest.raises(ContractError):
        ExplanationTarget(Explanation("", (), Label.PHISHING))


# -- cache ------------------------------------------------------------------


def test_cached_score_memoizes():
    backend = CountingBackend()
    cache = ScoreCache()
    seq = tokenize("a b c d")
    target = ClassificationTarget(Label.PHISHING)
    req = ScoreRequest(seq, np.array([1, 0, 1, 0], bool), target)
    v1 = cached_score(req, backend, cache)
    calls = backend.calls
    v2 = cached_score(req, backend, cache)
    assert backend.calls == calls and v1 == v2
    cached_score(ScoreRequest(seq, np.array([1, 1, 1, 0], bool), target), backend, cache)
    assert len(cache) == 2 and backend.calls == calls + 1


def test_mc_backend_calls_bounded_by_distinct_masks():
    backend = CountingBackend()
    cache = ScoreCache()
    seq = tokenize("a b c d e f g h i j")
    scorer = CoalitionScorer(backend, seq, ClassificationTarget(Label.PHISHING), cache)
    mc_shapley(scorer, 10, 2000, seed=0)
    assert backend.calls == scorer.backend_rows == len(cache)
    assert backend.calls <= 2**10


def test_cache_transparency(trained_model):
    backend = ToyBackend(trained_model)
    seq = tokenize("urgent-verify please confirm the bank password for your account today")
    target = ClassificationTarget(Label.PHISHING)
    plain = mc_shapley(CoalitionScorer(backend, seq, target), len(seq), 300, seed=4)
    cache = ScoreCache()
    cached = mc_shapley(CoalitionScorer(backend, seq, target, cache), len(seq), 300, seed=4)
    again = mc_shapley(CoalitionScorer(backend, seq, target, cache), len(seq), 300, seed=4)
    assert plain.values.tobytes() == cached.values.tobytes() == again.values.tobytes()


def test_cache_persists_bit_exact(tmp_path, trained_model):
    path = tmp_path / "scores.log"
    backend = ToyBackend(trained_model)
    seq = tokenize("urgent-verify your account now")
    target = ClassificationTarget(Label.PHISHING)
    first = CoalitionScorer(backend, seq, target, ScoreCache(path))
    masks = np.random.default_rng(0).random((20, 4)) < 0.5
    values = first(masks)
    reloaded = ScoreCache(path)
    second = CoalitionScorer(backend, seq, target, reloaded)
    assert second(masks).tobytes() == values.tobytes()
    assert second.backend_rows == 0 and reloaded.hits > 0


def test_cache_concurrent_inserts():
    cache = ScoreCache()
    items = [(f"k{i}", i / 100) for i in range(100)]

    def worker():
        for k, v in items:
            cache.put_many([(k, v)])

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(cache) == 100 and cache.get("k42") == 0.42


def test_cache_keys_distinguish_masks_and_targets():
    m1, m2 = np.array([1, 0], bool), np.array([0, 1], bool)
    k = ScoreCache.key
    assert k("b", "s", m1, "t") != k("b", "s", m2, "t")
    assert k("b", "s", m1, "t") != k("b", "s", m1, "u")
    assert k("b", "s", m1, "t") != k("c", "s", m1, "t")


def test_coalition_scorer_wraps_failures():
    class Broken(ConstantBackend):
        def label_probabilities(self, sequence, masks):
            raise RuntimeError("boom")

    scorer = CoalitionScorer(Broken(), tokenize("a b"), ClassificationTarget(Label.PHISHING))
    with pytest.raises(CoalitionError) as info:
        scorer(np.ones((1, 2), bool))
    assert info.value.masks.shape == (1, 2)


def test_coalition_scorer_keeps_template_visible():
    seen = []

    class Recorder(ConstantBackend):
        def label_probabilities(self, sequence, masks):
            seen.append(np.array(masks))
            return super().label_probabilities(sequence, masks)

    email = CleanEmail("a", "b", "c", Label.PHISHING)
    seq = encode_email(email)
    scorer = CoalitionScorer(Recorder(), seq, ClassificationTarget(Label.PHISHING))
    assert scorer.n_players == 3
    scorer(np.zeros((1, 3), bool))
    row = seen[0][0]
    assert row[~seq.attributable].all() and not row[seq.attributable].any()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12))
def test_apply_mask_preserves_visible_positions(bits):
    seq = tokenize(" ".join(f"w{i}" for i in range(len(bits))))
    masked = apply_mask(seq, bits)
    b = np.array(bits)
    assert len(masked) == len(seq)
    assert (masked.tokens[b] == seq.tokens[b]).all()
    assert (masked.tokens[~b] == seq.pad_id).all()
