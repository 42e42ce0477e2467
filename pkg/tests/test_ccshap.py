import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccshap_audit.ccshap import (
    CcShapReport,
    aggregate,
    audit_batch,
    audit_email,
    cc_shap_score,
    email_seed,
    is_degenerate_pair,
    read_reports,
    render_text_report,
    summary_csv,
    summary_table,
    write_reports,
)
from ccshap_audit.config import AuditConfig
from ccshap_audit.corpus import CleanEmail, Label
from ccshap_audit.errors import ContractError
from ccshap_audit.scoring import ConstantExplanationBackend, Explanation, SelfConsistentBackend, tokenize
from ccshap_audit.shapley import NormalizedShap
from ccshap_audit.toy_models import ToyBackend

from .oracles import brute_force_shapley, l1_cosine, sigmoid

GOLDEN = Path(__file__).parent / "golden"


# -- score anchors -----------------------------------------------------------


def test_anchor_points():
    v = np.array([0.5, -0.3, 0.2])
    assert abs(cc_shap_score(v, v) - 1.0) <= 1e-12
    assert abs(cc_shap_score([1.0, 0.0], [0.0, 1.0])) <= 1e-12
    assert abs(cc_shap_score(v, -v) + 1.0) <= 1e-12


vectors = st.lists(st.floats(-10, 10, allow_nan=False, allow_subnormal=False), min_size=1, max_size=20)


@settings(max_examples=100, deadline=None)
@given(vectors, st.data())
def test_symmetry_and_range(p, data):
    e = data.draw(st.lists(st.floats(-10, 10, allow_nan=False, allow_subnormal=False), min_size=len(p), max_size=len(p)))
    s = cc_shap_score(p, e)
    assert s == pytest.approx(cc_shap_score(e, p), abs=1e-12)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(1e-3, 1e3))
def test_positive_scale_invariance(p, a):
    p = np.array(p)
    e = np.roll(p, 1) + 0.1
    assert cc_shap_score(a * p, e) == pytest.approx(cc_shap_score(p, e), abs=1e-9)


def test_matches_independent_cosine():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, e = rng.normal(size=(2, 9))
        assert cc_shap_score(p, e) == pytest.approx(l1_cosine(p, e), abs=1e-12)


def test_length_mismatch_raises():
    with pytest.raises(ContractError):
        cc_shap_score([1.0, 2.0], [1.0])


def test_degenerate_side_scores_zero():
    assert cc_shap_score([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert is_degenerate_pair(NormalizedShap([0, 0], True), [1.0, 2.0])
    assert not is_degenerate_pair([1.0, 0.0], [0.0, 1.0])


def test_email_seed_stable():
    assert email_seed(0, "abc") == email_seed(0, "abc")
    assert email_seed(0, "abc") != email_seed(1, "abc")
    assert email_seed(0, "abc") != email_seed(0, "abd")


# -- audit pipeline ----------------------------------------------------------


def test_self_consistent_audit_scores_one(trained_model, separable):
    backend = SelfConsistentBackend(ToyBackend(trained_model))
    config = AuditConfig(n_samples=200)
    for email in list(separable)[:6]:
        report = audit_email(email, backend, config)
        assert abs(report.cc_shap - 1.0) <= 1e-9


def test_constant_explanation_scores_zero(trained_model, separable):
    backend = ConstantExplanationBackend(ToyBackend(trained_model))
    report = audit_email(next(iter(separable)), backend, AuditConfig(n_samples=100))
    assert report.cc_shap == 0.0
    assert report.expl_shap.degenerate
    assert any("degenerate explanation" in n for n in report.notes)


def test_empty_explanation_still_reported(trained_model, separable):
    class Silent(ToyBackend):
        def explain(self, sequence, label=None):
            return Explanation("", (), label)

    report = audit_email(next(iter(separable)), Silent(trained_model), AuditConfig(n_samples=50))
    assert report.cc_shap == 0.0 and report.expl_raw is None
    assert any("empty explanation" in n for n in report.notes)


def test_exact_pipeline_matches_hand_oracle(trained_model):
    # six attributable tokens, empty template so every token is a player
    email = CleanEmail("", "", "urgent-verify your bank password now please", Label.PHISHING)
    config = AuditConfig(estimator="exact", template="{sender}{subject}{body}")
    report = audit_email(email, ToyBackend(trained_model), config)

    seq = tokenize(email.body)
    contrib = trained_model.contributions(seq)
    bias = float(trained_model.bias)
    pred_value = lambda s: sigmoid(bias + sum(contrib[i] for i in s))

    # citation model: each cited token's share against a sink of weight 1
    strength = [math.exp(abs(c)) for c in contrib]
    cited = [seq.surface.index(t) for t in report.explanation_text.split(": ")[1].split(", ")]

    def expl_value(s):
        denom = 1.0 + sum(strength[i] for i in s)
        logs = [math.log(max((strength[i] if i in s else 0.0) / denom, 1e-9)) for i in cited]
        return math.exp(sum(logs) / len(logs))

    pred = brute_force_shapley(pred_value, 6)
    expl = brute_force_shapley(expl_value, 6)
    np.testing.assert_allclose(report.pred_shap.ratios, pred / np.abs(pred).sum(), atol=1e-12)
    np.testing.assert_allclose(report.expl_shap.ratios, expl / np.abs(expl).sum(), atol=1e-12)
    assert report.cc_shap == pytest.approx(l1_cosine(pred, expl), abs=1e-12)


def test_top_tokens_share_positions(trained_model, separable):
    report = audit_email(next(iter(separable)), ToyBackend(trained_model), AuditConfig(n_samples=100, k_top=4))
    assert len(report.top_pred_tokens) == 4
    assert [t for t, _ in report.top_pred_tokens] == [t for t, _ in report.top_expl_tokens]
    mags = [abs(v) for _, v in report.top_pred_tokens]
    assert mags == sorted(mags, reverse=True)


def test_batch_records_failures(trained_model, separable):
    class Flaky(ToyBackend):
        def explain(self, sequence, label=None):
            if "user1 @" in sequence.text:
                raise RuntimeError("backend down")
            return super().explain(sequence, label)

    emails = list(separable)[:6]
    reports, failures = audit_batch(emails, Flaky(trained_model), AuditConfig(n_samples=50))
    assert len(reports) + len(failures) == 6 and len(failures) == 2
    assert "backend down" in failures[0].error


def test_batch_order_independent_of_jobs(trained_model, separable):
    emails = list(separable)[:8]
    backend = ToyBackend(trained_model)
    serial, _ = audit_batch(emails, backend, AuditConfig(n_samples=100))
    threaded, _ = audit_batch(emails, backend, AuditConfig(n_samples=100), n_jobs=4)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in threaded]
    reordered, _ = audit_batch(emails[::-1], backend, AuditConfig(n_samples=100))
    assert [r.to_dict() for r in reordered[::-1]] == [r.to_dict() for r in serial]


# -- aggregation and formats -------------------------------------------------


def handmade_report(i, label, cc, predicted=None, model="toy-bce"):
    tokens = ["verify", "your", "account", "now"]
    pred = NormalizedShap([0.4, -0.1, 0.3, 0.2])
    expl = NormalizedShap([0.25, 0.25, -0.25, 0.25])
    return CcShapReport(
        email_id=f"e{i:02d}",
        model=model,
        predicted_label=predicted or label,
        ground_truth_label=label,
        input_text="From: a@b.example\nSubject: hello\nverify your account now",
        explanation_text="Classified as PHISHING because of: verify, account",
        explanation_prompt=None,
        tokens=tokens,
        pred_shap=pred,
        expl_shap=expl,
        cc_shap=cc,
        top_pred_tokens=[("verify", 0.4), ("account", 0.3), ("now", 0.2)],
        top_expl_tokens=[("verify", 0.25), ("account", -0.25), ("now", 0.25)],
        pred_probability=0.875,
        notes=["input truncated to 256 tokens"] if i == 0 else [],
    )


def golden_reports():
    return [
        handmade_report(0, Label.PHISHING, 0.5),
        handmade_report(1, Label.PHISHING, 0.25),
        handmade_report(2, Label.PHISHING, 0.125, predicted=Label.LEGITIMATE),
        handmade_report(3, Label.LEGITIMATE, -0.2),
        handmade_report(4, Label.PHISHING, 0.9, model="toy-dpo"),
    ]


def test_aggregate_single_report():
    rows = aggregate([handmade_report(0, Label.PHISHING, 0.3)])
    assert len(rows) == 1
    assert rows[0].ccshap_mean == 0.3 and rows[0].ccshap_std == 0.0 and rows[0].accuracy_pct == 100.0


def test_aggregate_balanced_groups():
    rng = np.random.default_rng(0)
    ph, ham = rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20)
    reports = [handmade_report(i, Label.PHISHING, float(v)) for i, v in enumerate(ph)]
    reports += [handmade_report(i, Label.LEGITIMATE, float(v), predicted=Label.PHISHING if i < 5 else None) for i, v in enumerate(ham)]
    rows = aggregate(reports)
    assert [(r.label, r.count) for r in rows] == [(Label.PHISHING, 20), (Label.LEGITIMATE, 20)]
    assert rows[0].ccshap_mean == pytest.approx(ph.mean(), abs=1e-12)
    assert rows[1].ccshap_std == pytest.approx(ham.std(ddof=1), abs=1e-12)
    assert rows[1].accuracy_pct == 75.0


def test_aggregate_empty_raises():
    with pytest.raises(ContractError):
        aggregate([])


def test_jsonl_round_trip_preserves_aggregate(tmp_path, trained_model, separable):
    reports, _ = audit_batch(list(separable)[:6], ToyBackend(trained_model), AuditConfig(n_samples=100))
    paths = write_reports(reports, tmp_path)
    back = read_reports(paths["reports"])
    assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]
    assert aggregate(back) == aggregate(reports)
    json.loads(paths["reports"].read_text().splitlines()[0])


def test_summary_csv_golden():
    expected = (GOLDEN / "summary.csv").read_bytes()
    assert summary_csv(aggregate(golden_reports())).encode("utf-8") == expected


def test_text_report_golden():
    expected = (GOLDEN / "report.txt").read_bytes()
    assert render_text_report(golden_reports()[0]).encode("utf-8") == expected


def test_summary_table_layout():
    text = summary_table(aggregate(golden_reports()))
    lines = text.splitlines()
    assert lines[0].startswith("Model | Phishing CC-SHAP (Mean ± Std Dev) | Ham CC-SHAP")
    assert lines[1] == "toy-bce | 0.2917 ± 0.1909 | -0.2000 ± 0.0000 | 66.7 | 100.0"
    assert lines[2] == "toy-dpo | 0.9000 ± 0.0000 | n/a | 100.0 | n/a"
