#!/usr/bin/env python
# coding: utf-8

# # From raw mailboxes to a trained toy classifier
#
# We write two small mbox files, run them through the ingestion pipeline
# (cleaning, language filter, deduplication, balancing, stratified split)
# and train the built-in hashed linear model with each of the three
# objectives.

import tempfile
from pathlib import Path

from ccshap_audit.corpus import Corpus, Label, Origin, balance, deduplicate, load_corpus, prepare, split
from ccshap_audit.synthetic import make_separable_corpus, write_mbox
from ccshap_audit.toy_models import TrainConfig, train_bce, train_contrastive, train_dpo

work = Path(tempfile.mkdtemp())
source = make_separable_corpus(60, seed=0)
write_mbox(source.by_label(Label.PHISHING), work / "phish.mbox")
write_mbox(source.by_label(Label.LEGITIMATE), work / "ham.mbox")

# ## Ingestion
#
# Mailbox origin decides the label. Every skipped record comes back with
# a reason, so nothing disappears silently.

records, skipped = [], []
for name, origin in [("phish.mbox", Origin.PHISHING_SOURCE), ("ham.mbox", Origin.HAM_SOURCE)]:
    raws, load_skips = load_corpus(work / name, origin=origin)
    clean, prep_skips = prepare(raws)
    records += clean
    skipped += load_skips + prep_skips

corpus = Corpus(deduplicate(records))
print("class counts:", {l.short: c for l, c in corpus.class_counts.items()}, "skipped:", len(skipped))

balanced = balance(corpus, per_class=50, seed=0)
train, val = split(balanced, train_fraction=0.9, seed=0)
print("train", len(train), "val", len(val))

# ## Training
#
# The first row of every metrics list is the untrained model. The DPO
# policy starts as a copy of its reference, hence a loss of exactly ln 2.

for name, trainer in [("bce", train_bce), ("contrastive", train_contrastive)]:
    model, metrics = trainer(train, val, TrainConfig(epochs=100))
    print(f"{name:<12} loss {metrics[0].train_loss:.4f} -> {metrics[-1].train_loss:.4f}  val_acc {metrics[-1].val_acc:.3f}")

policy, metrics = train_dpo(train, val, config=TrainConfig(epochs=100, learning_rate=1.0))
print(f"{'dpo':<12} loss {metrics[0].train_loss:.4f} -> {metrics[-1].train_loss:.4f}  val_acc {metrics[-1].val_acc:.3f}")
