"""Prediction/explanation consistency (CC-SHAP) scores and audit reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import AuditConfig
from .corpus import LABELS, CleanEmail, Label, render_input
from .errors import ContractError
from .scoring import (
    Backend,
    ClassificationTarget,
    CoalitionScorer,
    ExplanationTarget,
    ScoreCache,
    encode_email,
)
from .shapley import NormalizedShap, ShapVector, exact_shapley, mc_shapley, normalize_contributions

log = logging.getLogger(__name__)


def _as_ratios(v) -> tuple[np.ndarray, bool]:
    if isinstance(v, NormalizedShap):
        return v.ratios, v.degenerate
    arr = np.asarray(v, dtype=np.float64)
    return arr, not np.any(arr)


def cc_shap_score(pred, expl) -> float:
    """Cosine similarity of the two L1-normalised attribution vectors.

    Equivalent to ``1 - cosine_distance``. Both inputs are re-normalised
    first. Returns 0.0 when either vector is all zeros; callers that need to
    tell that case apart should check :func:`is_degenerate_pair`.
    """
    p, _ = _as_ratios(pred)
    e, _ = _as_ratios(expl)
    if p.shape != e.shape:
        raise ContractError(f"attribution lengths differ: prediction {p.size}, explanation {e.size}")
    p_norm = normalize_contributions(p)
    e_norm = normalize_contributions(e)
    if p_norm.degenerate or e_norm.degenerate:
        return 0.0
    a, b = p_norm.ratios, e_norm.ratios
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def is_degenerate_pair(pred, expl) -> bool:
    return _as_ratios(pred)[1] or _as_ratios(expl)[1]


@dataclass
class CcShapReport:
    email_id: str
    model: str
    predicted_label: Label
    ground_truth_label: Label
    input_text: str
    explanation_text: str
    explanation_prompt: str | None
    tokens: list[str]
    pred_shap: NormalizedShap
    expl_shap: NormalizedShap
    cc_shap: float
    top_pred_tokens: list[tuple[str, float]]
    top_expl_tokens: list[tuple[str, float]]
    pred_probability: float = float("nan")
    pred_raw: ShapVector | None = None
    expl_raw: ShapVector | None = None
    truncated: bool = False
    notes: list[str] = field(default_factory=list)
    config_digest: str = ""

    @property
    def correct(self) -> bool:
        return self.predicted_label == self.ground_truth_label

    def to_dict(self) -> dict:
        return {
            "email_id": self.email_id,
            "model": self.model,
            "predicted_label": self.predicted_label.value,
            "ground_truth_label": self.ground_truth_label.value,
            "pred_probability": self.pred_probability,
            "cc_shap": self.cc_shap,
            "input_text": self.input_text,
            "explanation_text": self.explanation_text,
            "explanation_prompt": self.explanation_prompt,
            "tokens": list(self.tokens),
            "pred_shap": [float(x) for x in self.pred_shap.ratios],
            "pred_degenerate": self.pred_shap.degenerate,
            "expl_shap": [float(x) for x in self.expl_shap.ratios],
            "expl_degenerate": self.expl_shap.degenerate,
            "top_pred_tokens": [[t, float(v)] for t, v in self.top_pred_tokens],
            "top_expl_tokens": [[t, float(v)] for t, v in self.top_expl_tokens],
            "pred_raw": self.pred_raw.to_dict() if self.pred_raw else None,
            "expl_raw": self.expl_raw.to_dict() if self.expl_raw else None,
            "truncated": self.truncated,
            "notes": list(self.notes),
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CcShapReport":
        return cls(
            email_id=d["email_id"],
            model=d["model"],
            predicted_label=Label(d["predicted_label"]),
            ground_truth_label=Label(d["ground_truth_label"]),
            input_text=d["input_text"],
            explanation_text=d["explanation_text"],
            explanation_prompt=d.get("explanation_prompt"),
            tokens=list(d["tokens"]),
            pred_shap=NormalizedShap(d["pred_shap"], d["pred_degenerate"]),
            expl_shap=NormalizedShap(d["expl_shap"], d["expl_degenerate"]),
            cc_shap=d["cc_shap"],
            top_pred_tokens=[(t, v) for t, v in d["top_pred_tokens"]],
            top_expl_tokens=[(t, v) for t, v in d["top_expl_tokens"]],
            pred_probability=d.get("pred_probability", float("nan")),
            pred_raw=ShapVector.from_dict(d["pred_raw"]) if d.get("pred_raw") else None,
            expl_raw=ShapVector.from_dict(d["expl_raw"]) if d.get("expl_raw") else None,
            truncated=d.get("truncated", False),
            notes=list(d.get("notes", [])),
            config_digest=d.get("config_digest", ""),
        )


def email_seed(seed: int, email_id: str) -> int:
    """Per-email RNG seed, independent of batch order."""
    h = hashlib.blake2b(f"{seed}:{email_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little")


def _estimate(scorer: CoalitionScorer, config: AuditConfig, seed: int, target: str) -> ShapVector:
    n = scorer.n_players
    use_exact = config.estimator == "exact" or (config.estimator == "auto" and n <= config.exact_limit)
    if use_exact:
        return exact_shapley(scorer, n, target=target, exact_limit=config.exact_limit)
    return mc_shapley(
        scorer, n, config.n_samples, seed, target=target, antithetic=config.antithetic
    )


def top_tokens(tokens: Sequence[str], pred: np.ndarray, expl: np.ndarray, k: int):
    """Top-``k`` positions by |prediction attribution|, paired with both sides' values."""
    order = np.argsort(-np.abs(pred), kind="stable")[:k]
    return (
        [(tokens[i], float(pred[i])) for i in order],
        [(tokens[i], float(expl[i])) for i in order],
    )


def audit_email(
    email: CleanEmail,
    backend: Backend,
    config: AuditConfig,
    *,
    email_id: str | None = None,
    model_name: str | None = None,
    cache: ScoreCache | None = None,
) -> CcShapReport:
    """Score one email end to end.

    Both attribution runs use the same permutation seed (derived from the
    global seed and the email id), so sampling noise is shared between the
    prediction and explanation sides.
    """
    email_id = email_id or email.content_hash
    seq = encode_email(email, config.template, config.max_tokens, config.attribute_template)
    full = np.ones((1, len(seq)), dtype=bool)
    probs = np.asarray(backend.label_probabilities(seq, full), dtype=np.float64)[0]
    predicted = LABELS[int(np.argmax(probs))]
    explanation = backend.explain(seq, predicted)
    seed = email_seed(config.seed, email_id)
    notes: list[str] = []

    pred_scorer = CoalitionScorer(backend, seq, ClassificationTarget(predicted), cache)
    pred_raw = _estimate(pred_scorer, config, seed, "classification")
    pred_norm = normalize_contributions(pred_raw)

    players = seq.players
    if explanation.tokens:
        expl_scorer = CoalitionScorer(backend, seq, ExplanationTarget(explanation), cache)
        expl_raw = _estimate(expl_scorer, config, seed, "explanation")
        expl_norm = normalize_contributions(expl_raw)
    else:
        notes.append("empty explanation: explanation-side attribution skipped")
        expl_raw = None
        expl_norm = NormalizedShap(np.zeros(players.size), degenerate=True)

    if pred_norm.degenerate:
        notes.append("degenerate prediction attribution (all values zero): cc_shap set to 0")
    if expl_norm.degenerate:
        notes.append("degenerate explanation attribution (all values zero): cc_shap set to 0")
    if seq.truncated:
        notes.append(f"input truncated to {config.max_tokens} tokens")
    cc = cc_shap_score(pred_norm, expl_norm)

    tokens = [seq.surface[i] for i in players]
    top_p, top_e = top_tokens(tokens, pred_norm.ratios, expl_norm.ratios, config.k_top)
    return CcShapReport(
        email_id=email_id,
        model=model_name or config.model_name or backend.backend_id,
        predicted_label=predicted,
        ground_truth_label=email.label,
        input_text=render_input(email, config.template),
        explanation_text=explanation.text,
        explanation_prompt=explanation.prompt,
        tokens=tokens,
        pred_shap=pred_norm,
        expl_shap=expl_norm,
        cc_shap=cc,
        top_pred_tokens=top_p,
        top_expl_tokens=top_e,
        pred_probability=float(probs[LABELS.index(predicted)]),
        pred_raw=pred_raw,
        expl_raw=expl_raw,
        truncated=seq.truncated,
        notes=notes,
        config_digest=config.digest(),
    )


@dataclass
class AuditFailure:
    email_id: str
    error: str

    def to_dict(self) -> dict:
        return {"email_id": self.email_id, "error": self.error}


def audit_batch(
    emails: Sequence[CleanEmail],
    backend: Backend,
    config: AuditConfig,
    *,
    cache: ScoreCache | None = None,
    n_jobs: int = 1,
    model_name: str | None = None,
) -> tuple[list[CcShapReport], list[AuditFailure]]:
    """Audit many emails; failures are recorded, never fatal to the batch.

    Output order follows input order regardless of ``n_jobs``.
    """

    def one(email):
        try:
            return audit_email(email, backend, config, cache=cache, model_name=model_name)
        except Exception as exc:  # a single bad email must not abort the batch
            log.warning("audit of %s failed: %s", email.content_hash, exc)
            return AuditFailure(email.content_hash, f"{type(exc).__name__}: {exc}")

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, emails))
    else:
        results = [one(e) for e in emails]
    reports = [r for r in results if isinstance(r, CcShapReport)]
    failures = [r for r in results if isinstance(r, AuditFailure)]
    return reports, failures


# --------------------------------------------------------------------------
# aggregation and report files

SUMMARY_COLUMNS = ("model", "class", "ccshap_mean", "ccshap_std", "accuracy_pct")


@dataclass
class SummaryRow:
    model: str
    label: Label
    count: int
    ccshap_mean: float
    ccshap_std: float
    accuracy_pct: float


def aggregate(reports: Sequence[CcShapReport]) -> list[SummaryRow]:
    """Per model and ground-truth class: CC-SHAP mean, sample std and accuracy.

    The standard deviation of a single report is 0 by convention.
    """
    if not reports:
        raise ContractError("cannot aggregate an empty report list")
    models = list(dict.fromkeys(r.model for r in reports))
    rows = []
    for model in models:
        for label in LABELS:
            group = [r for r in reports if r.model == model and r.ground_truth_label is label]
            if not group:
                continue
            scores = np.array([r.cc_shap for r in group])
            std = float(scores.std(ddof=1)) if len(group) > 1 else 0.0
            acc = 100.0 * sum(r.correct for r in group) / len(group)
            rows.append(SummaryRow(model, label, len(group), float(scores.mean()), std, acc))
    return rows


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in rows:
        writer.writerow([r.model, r.label.short, f"{r.ccshap_mean:.4f}", f"{r.ccshap_std:.4f}", f"{r.accuracy_pct:.1f}"])
    return buf.getvalue()


def summary_table(rows: Sequence[SummaryRow]) -> str:
    """One line per model, columns laid out as phishing/ham CC-SHAP then accuracies."""
    header = (
        "Model | Phishing CC-SHAP (Mean ± Std Dev) | Ham CC-SHAP (Mean ± Std Dev) "
        "| Phishing Accuracy (%) | Ham Accuracy (%)"
    )
    lines = [header]
    for model in dict.fromkeys(r.model for r in rows):
        cells = {r.label: r for r in rows if r.model == model}

        def ms(label):
            r = cells.get(label)
            return f"{r.ccshap_mean:.4f} ± {r.ccshap_std:.4f}" if r else "n/a"

        def acc(label):
            r = cells.get(label)
            return f"{r.accuracy_pct:.1f}" if r else "n/a"

        lines.append(
            f"{model} | {ms(Label.PHISHING)} | {ms(Label.LEGITIMATE)} "
            f"| {acc(Label.PHISHING)} | {acc(Label.LEGITIMATE)}"
        )
    return "\n".join(lines) + "\n"


def _token_table(title: str, pairs: Sequence[tuple[str, float]]) -> list[str]:
    lines = [f"[{title}]", f"{'token':<24}{'shap':>12}"]
    lines += [f"{tok:<24}{val:>+12.4f}" for tok, val in pairs]
    return lines


def render_text_report(report: CcShapReport) -> str:
    """Human-readable panels: input, prediction, explanation, score, token tables."""
    lines = [
        f"=== Email {report.email_id} | model {report.model} ===",
        "[Model Input]",
        report.input_text,
        "",
        "[Prediction]",
        f"{report.predicted_label.value} (p={report.pred_probability:.4f}; "
        f"ground truth {report.ground_truth_label.value})",
        "",
        "[Generated Explanation]",
        report.explanation_text if report.explanation_text else "(empty)",
        "",
        "[CC-SHAP Score]",
        f"{report.cc_shap:.4f}",
        "",
    ]
    lines += _token_table("Top Contributing Tokens: Prediction", report.top_pred_tokens)
    lines.append("")
    lines += _token_table("Corresponding Values: Explanation", report.top_expl_tokens)
    if report.notes:
        lines += ["", "[Notes]"] + [f"- {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def write_reports(reports: Sequence[CcShapReport], out_dir: str | Path) -> dict[str, Path]:
    """Write the per-email JSONL, the summary CSV and the text reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "reports": out / "reports.jsonl",
        "summary": out / "summary.csv",
        "text": out / "reports.txt",
    }
    with paths["reports"].open("w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    paths["summary"].write_text(summary_csv(aggregate(reports)), encoding="utf-8", newline="")
    paths["text"].write_text("\n".join(render_text_report(r) for r in reports), encoding="utf-8")
    return paths


def read_reports(path: str | Path) -> list[CcShapReport]:
    with Path(path).open(encoding="utf-8") as fh:
        return [CcShapReport.from_dict(json.loads(line)) for line in fh if line.strip()]
