"""Synthetic email corpora with known structure, for tests and demos."""

from __future__ import annotations

import mailbox
from email.message import EmailMessage
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import CleanEmail, Corpus, Label

PLANTED_TOKEN = "urgent-verify"

_FILLER = (
    "the your to of and for on in with this is we please a at our be you it".split()
)
_PHISH_WORDS = "account password bank click suspended login confirm security card update".split()
_HAM_WORDS = "meeting schedule report lunch project budget draft review team notes".split()
_SHARED = "today monday email thanks regards attached week office call information".split()


def make_separable_corpus(
    n_per_class: int, seed: int = 0, body_words: int = 12, planted: str = PLANTED_TOKEN
) -> Corpus:
    """Balanced corpus where every phishing body, and no ham body, contains ``planted``.

    Other words are drawn from class-leaning and shared vocabularies, so
    the planted token is the only perfectly separating feature.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_per_class):
        for label in (Label.PHISHING, Label.LEGITIMATE):
            lean = _PHISH_WORDS if label is Label.PHISHING else _HAM_WORDS
            other = _HAM_WORDS if label is Label.PHISHING else _PHISH_WORDS
            pools = [_FILLER, lean, _SHARED, other]
            probs = [0.4, 0.3, 0.2, 0.1]
            words = [
                pools[k][rng.integers(len(pools[k]))]
                for k in rng.choice(len(pools), size=body_words, p=probs)
            ]
            if label is Label.PHISHING:
                words.insert(int(rng.integers(len(words) + 1)), planted)
            sender = f"user{i}@{'secure-mail' if label is Label.PHISHING else 'corp'}.example"
            subject = " ".join(rng.choice(lean, size=2, replace=False))
            records.append(CleanEmail(sender, subject, " ".join(words), label))
    return Corpus(records)


def write_mbox(records: Iterable[CleanEmail], path: str | Path) -> None:
    """Write records as a plain-text mbox (labels are not stored)."""
    path = Path(path)
    if path.exists():
        path.unlink()
    box = mailbox.mbox(str(path))
    try:
        for rec in records:
            msg = EmailMessage()
            msg["From"] = rec.sender
            msg["Subject"] = rec.subject
            msg.set_content(rec.body)
            box.add(msg)
        box.flush()
    finally:
        box.close()
