#!/usr/bin/env python
# coding: utf-8

# # Auditing prediction/explanation consistency
#
# For each email we attribute two things to the input tokens: the
# probability of the predicted label, and the likelihood of the model's
# own explanation. The CC-SHAP score is the cosine similarity of the two
# normalised attribution vectors.

from ccshap_audit.ccshap import aggregate, audit_batch, render_text_report, summary_table
from ccshap_audit.config import AuditConfig
from ccshap_audit.scoring import ConstantExplanationBackend, SelfConsistentBackend
from ccshap_audit.synthetic import make_separable_corpus
from ccshap_audit.toy_models import ToyBackend, TrainConfig, train_bce

corpus = make_separable_corpus(10, seed=7)
model, _ = train_bce(corpus, corpus, TrainConfig(epochs=100))
config = AuditConfig(n_samples=500, k_top=5)

# The toy backend explains itself by citing its heaviest tokens.

reports, failures = audit_batch(list(corpus), ToyBackend(model, name="toy-bce"), config)
print(render_text_report(reports[0]))

# Two sanity backends bracket the scale: one whose explanation likelihood
# *is* the classifier output (score 1), and one that ignores the input
# entirely (score 0, flagged as degenerate).

rows = []
for backend in (ToyBackend(model, name="toy-bce"),
                SelfConsistentBackend(ToyBackend(model, name="toy-bce")),
                ConstantExplanationBackend(ToyBackend(model, name="toy-bce"))):
    rs, _ = audit_batch(list(corpus), backend, config)
    rows += aggregate(rs)
print(summary_table(rows))
