"""Shapley-based consistency audits for phishing email classifiers."""

from .ccshap import CcShapReport, aggregate, audit_batch, audit_email, cc_shap_score
from .config import AuditConfig
from .corpus import CleanEmail, Corpus, Label, RawEmail, clean_text, load_corpus
from .scoring import CoalitionScorer, ScoreCache, TokenSequence, apply_mask, tokenize
from .shapley import NormalizedShap, ShapVector, exact_shapley, mc_shapley, normalize_contributions
from .toy_models import LinearTextModel, ToyBackend, train_bce, train_contrastive, train_dpo

__version__ = "0.1.0"

__all__ = [
    "AuditConfig",
    "CcShapReport",
    "CleanEmail",
    "CoalitionScorer",
    "Corpus",
    "Label",
    "LinearTextModel",
    "NormalizedShap",
    "RawEmail",
    "ScoreCache",
    "ShapVector",
    "TokenSequence",
    "ToyBackend",
    "aggregate",
    "apply_mask",
    "audit_batch",
    "audit_email",
    "cc_shap_score",
    "clean_text",
    "exact_shapley",
    "load_corpus",
    "mc_shapley",
    "normalize_contributions",
    "tokenize",
    "train_bce",
    "train_contrastive",
    "train_dpo",
]
