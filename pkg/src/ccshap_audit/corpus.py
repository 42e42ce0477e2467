"""Email corpus ingestion and preparation.

Raw inputs (``.eml`` directories, mbox files, JSONL, CSV) become
:class:`RawEmail` records, which are cleaned into labelled
:class:`CleanEmail` records, deduplicated, balanced per class and split
into train/validation sets. Every function returns new collections and
leaves its input untouched.
"""

from __future__ import annotations

import csv
import email
import email.policy
import enum
import hashlib
import html
import json
import mailbox
import re
import string
import sys
import unicodedata
from dataclasses import dataclass
from email import errors as email_errors
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, InsufficientDataError, TemplateError

DEFAULT_TEMPLATE = "From: {sender}\nSubject: {subject}\n{body}"


class Label(str, enum.Enum):
    PHISHING = "PHISHING"
    LEGITIMATE = "LEGITIMATE"

    @property
    def short(self) -> str:
        return "phishing" if self is Label.PHISHING else "ham"

    @property
    def opposite(self) -> "Label":
        return Label.LEGITIMATE if self is Label.PHISHING else Label.PHISHING


LABELS = (Label.PHISHING, Label.LEGITIMATE)

_LABEL_ALIASES = {
    "phishing": Label.PHISHING,
    "phish": Label.PHISHING,
    "spam": Label.PHISHING,
    "1": Label.PHISHING,
    "legitimate": Label.LEGITIMATE,
    "ham": Label.LEGITIMATE,
    "safe": Label.LEGITIMATE,
    "0": Label.LEGITIMATE,
}


class Origin(str, enum.Enum):
    PHISHING_SOURCE = "phishing_source"
    HAM_SOURCE = "ham_source"
    UNLABELED = "unlabeled"


_ORIGIN_LABEL = {Origin.PHISHING_SOURCE: Label.PHISHING, Origin.HAM_SOURCE: Label.LEGITIMATE}


def parse_label(value) -> Label | None:
    if isinstance(value, Label):
        return value
    if value is None:
        return None
    return _LABEL_ALIASES.get(str(value).strip().lower())


@dataclass(frozen=True)
class RawEmail:
    source_id: str
    headers: tuple[tuple[str, str], ...]
    body_raw: str
    origin: Origin = Origin.UNLABELED

    def header(self, name: str, default: str = "") -> str:
        """First header value matching ``name``, compared case-insensitively."""
        lname = name.lower()
        for key, value in self.headers:
            if key.lower() == lname:
                return value
        return default


@dataclass(frozen=True)
class CleanEmail:
    sender: str
    subject: str
    body: str
    label: Label
    content_hash: str = ""

    def __post_init__(self):
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))
        if not self.content_hash:
            object.__setattr__(
                self, "content_hash", content_hash(self.sender, self.subject, self.body)
            )

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "subject": self.subject,
            "body": self.body,
            "label": self.label.value,
            "content_hash": self.content_hash,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "CleanEmail":
        label = parse_label(row.get("label"))
        if label is None:
            raise ValueError(f"unlabeled record: {row.get('label')!r}")
        return cls(
            sender=row.get("sender", ""),
            subject=row.get("subject", ""),
            body=row.get("body", ""),
            label=label,
            content_hash=row.get("content_hash", ""),
        )


@dataclass(frozen=True)
class Corpus:
    records: tuple[CleanEmail, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def class_counts(self) -> dict[Label, int]:
        counts = {label: 0 for label in LABELS}
        for rec in self.records:
            counts[rec.label] += 1
        return counts

    def by_label(self, label: Label) -> list[CleanEmail]:
        return [r for r in self.records if r.label is label]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CleanEmail]:
        return iter(self.records)


@dataclass(frozen=True)
class Skip:
    source_id: str
    reason: str

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "reason": self.reason}


# --------------------------------------------------------------------------
# text cleaning

_COMMENT_RE = re.compile(r"<!--.*?(?:-->|\Z)", re.S)
_RAW_BLOCK_RE = re.compile(r"<(script|style|head)\b[^>]*>.*?(?:</\1\s*>|\Z)", re.S | re.I)
# A tag starts with '<' followed by a name, '/', '!' or '?'. A tag that never
# closes swallows the rest of the text: broken markup is common in phishing.
_TAG_RE = re.compile(r"<[A-Za-z/!?][^>]*(?:>|\Z)", re.S)
_WS_RE = re.compile(r"\s+")


def _strip_controls(text: str) -> str:
    out = []
    for ch in text:
        cat = unicodedata.category(ch)
        if ch.isspace():
            out.append(" ")
        elif cat in ("Cc", "Cf", "Cs", "Co", "Cn"):
            continue
        else:
            out.append(ch)
    return "".join(out)


def _clean_once(text: str) -> str:
    text = _COMMENT_RE.sub(" ", text)
    text = _RAW_BLOCK_RE.sub(" ", text)
    text = _TAG_RE.sub(" ", text)
    text = html.unescape(text)
    text = _strip_controls(text)
    return _WS_RE.sub(" ", text).strip()


def clean_text(raw: str) -> str:
    """Strip markup, entities and control characters; collapse whitespace.

    One cleaning pass can expose new markup (``&lt;b&gt;`` unescapes to a
    tag), so passes repeat until the text stops changing. The result is
    therefore a fixed point and ``clean_text`` is idempotent.
    """
    if not raw:
        return ""
    text = raw
    while True:
        cleaned = _clean_once(text)
        if cleaned == text:
            return cleaned
        text = cleaned


_ENGLISH_STOPWORDS = frozenset(
    """a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during each
    few for from further had has have having he her here hers him his how i if in into is
    it its itself just me more most my no nor not now of off on once only or other our
    ours out over own please same she should so some such than that the their theirs them
    then there these they this those through to too under until up very was we were what
    when where which while who whom why will with would you your yours""".split()
)
_WORD_RE = re.compile(r"[^\W\d_]+", re.UNICODE)


def english_ratio(text: str) -> tuple[float, int]:
    """Fraction of word tokens in the English stopword list, and word count."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        return 0.0, 0
    hits = sum(1 for w in words if w in _ENGLISH_STOPWORDS)
    return hits / len(words), len(words)


def content_hash(sender: str, subject: str, body: str) -> str:
    """64-bit hex digest of the case-folded, whitespace-normalised triple."""
    norm = "\x1f".join(_WS_RE.sub(" ", part).strip().casefold() for part in (sender, subject, body))
    return hashlib.blake2b(norm.encode("utf-8"), digest_size=8).hexdigest()


# --------------------------------------------------------------------------
# ingestion

FORMATS = ("eml_dir", "mbox", "jsonl", "csv")

_BROKEN_MIME = (
    email_errors.StartBoundaryNotFoundDefect,
    email_errors.NoBoundaryInMultipartDefect,
    email_errors.MultipartInvariantViolationDefect,
    email_errors.CloseBoundaryNotFoundDefect,
)


def infer_format(path: str | Path) -> str:
    path = Path(path)
    if path.is_dir():
        return "eml_dir"
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    if suffix in (".mbox", ".mbx", ""):
        return "mbox"
    raise ConfigError(f"cannot infer corpus format from {path}; pass one of {FORMATS}")


def _part_text(part) -> str:
    try:
        return part.get_content()
    except (LookupError, UnicodeError, AssertionError, KeyError):
        payload = part.get_payload(decode=True) or b""
        return payload.decode("utf-8", errors="replace")


def _message_body(msg) -> str:
    plain, markup = [], []
    for part in msg.walk():
        if part.is_multipart():
            continue
        if part.get_content_disposition() == "attachment":
            continue
        ctype = part.get_content_type()
        if ctype == "text/plain":
            plain.append(_part_text(part))
        elif ctype == "text/html":
            markup.append(_part_text(part))
    return "\n".join(plain if plain else markup)


def _message_to_raw(msg, source_id: str, origin: Origin) -> RawEmail | str:
    """Convert a parsed message, or return the skip reason."""
    if not msg.keys():
        return "malformed: no headers"
    if any(isinstance(d, _BROKEN_MIME) for d in msg.defects):
        return "malformed: broken multipart structure"
    try:
        headers = tuple((k, str(v)) for k, v in msg.items())
        body = _message_body(msg)
    except Exception as exc:  # header/charset decoding surfaces many exception types
        return f"malformed: {type(exc).__name__}: {exc}"
    return RawEmail(source_id=source_id, headers=headers, body_raw=body, origin=origin)


def _row_to_raw(row, source_id: str, origin: Origin) -> RawEmail | str:
    if not isinstance(row, dict):
        return "malformed: row is not an object"
    if "body" not in row:
        return "malformed: missing body field"
    row_origin = origin
    label = parse_label(row.get("label"))
    if label is Label.PHISHING:
        row_origin = Origin.PHISHING_SOURCE
    elif label is Label.LEGITIMATE:
        row_origin = Origin.HAM_SOURCE
    headers = (("From", str(row.get("sender") or "")), ("Subject", str(row.get("subject") or "")))
    return RawEmail(source_id=source_id, headers=headers, body_raw=str(row["body"] or ""), origin=row_origin)


def load_corpus(
    path: str | Path, fmt: str | None = None, origin: Origin | str = Origin.UNLABELED
) -> tuple[list[RawEmail], list[Skip]]:
    """Read one corpus file or directory.

    Returns the parsed messages and a skip report. Malformed messages go to
    the skip report; an unreadable file raises :class:`IngestionError`.
    ``origin`` labels every message of an unlabeled source (mbox, eml);
    JSONL/CSV rows carrying a ``label`` field override it.
    """
    path = Path(path)
    fmt = fmt or infer_format(path)
    origin = Origin(origin)
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not path.exists():
        raise IngestionError(path, "no such file or directory")

    results: list[tuple[str, RawEmail | str]] = []
    try:
        if fmt == "eml_dir":
            if not path.is_dir():
                raise IngestionError(path, "eml_dir format expects a directory")
            for file in sorted(path.rglob("*.eml")):
                sid = file.relative_to(path).as_posix()
                msg = email.message_from_bytes(file.read_bytes(), policy=email.policy.default)
                results.append((sid, _message_to_raw(msg, sid, origin)))
        elif fmt == "mbox":
            if path.stat().st_size == 0:
                return [], []
            box = mailbox.mbox(
                str(path),
                factory=lambda f: email.message_from_binary_file(f, policy=email.policy.default),
                create=False,
            )
            try:
                for i, key in enumerate(box.iterkeys()):
                    sid = f"{path.name}:{i:06d}"
                    results.append((sid, _message_to_raw(box[key], sid, origin)))
            finally:
                box.close()
        elif fmt == "jsonl":
            with path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    sid = f"{path.name}:{lineno:06d}"
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError as exc:
                        results.append((sid, f"malformed: invalid JSON ({exc.msg})"))
                        continue
                    results.append((sid, _row_to_raw(row, sid, origin)))
        else:
            csv.field_size_limit(sys.maxsize)
            with path.open(encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                for rowno, row in enumerate(reader, 2):
                    sid = f"{path.name}:{rowno:06d}"
                    if None in row:
                        results.append((sid, "malformed: too many fields"))
                        continue
                    results.append((sid, _row_to_raw(row, sid, origin)))
    except (OSError, UnicodeDecodeError, csv.Error, mailbox.Error) as exc:
        raise IngestionError(path, f"{type(exc).__name__}: {exc}") from exc

    raws, skips = [], []
    for sid, item in results:
        if isinstance(item, str):
            skips.append(Skip(sid, item))
        else:
            raws.append(item)
    return raws, skips


def prepare(
    raws: Iterable[RawEmail],
    language_threshold: float = 0.02,
    min_words: int = 8,
) -> tuple[list[CleanEmail], list[Skip]]:
    """Clean raw messages into labelled records.

    Records are rejected (and reported) when unlabeled, empty after
    cleaning, or when the share of English stopwords among their subject
    and body words falls below ``language_threshold``. Texts shorter than
    ``min_words`` words are too short for the heuristic and are kept.
    """
    clean, skips = [], []
    for raw in raws:
        label = _ORIGIN_LABEL.get(raw.origin)
        if label is None:
            skips.append(Skip(raw.source_id, "unlabeled"))
            continue
        sender = clean_text(raw.header("From"))
        subject = clean_text(raw.header("Subject"))
        body = clean_text(raw.body_raw)
        if not (subject or body):
            skips.append(Skip(raw.source_id, "empty after cleaning"))
            continue
        ratio, n_words = english_ratio(f"{subject} {body}")
        if n_words >= min_words and ratio < language_threshold:
            skips.append(Skip(raw.source_id, f"non-English (stopword ratio {ratio:.4f})"))
            continue
        clean.append(CleanEmail(sender=sender, subject=subject, body=body, label=label))
    return clean, skips


def deduplicate(records: Sequence[CleanEmail]) -> list[CleanEmail]:
    seen: set[str] = set()
    out = []
    for rec in records:
        if rec.content_hash in seen:
            continue
        seen.add(rec.content_hash)
        out.append(rec)
    return out


def balance(corpus: Corpus, per_class: int, seed: int = 0) -> Corpus:
    """Draw exactly ``per_class`` records of each label without replacement.

    Selected records keep their original corpus order.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be positive, got {per_class}")
    counts = corpus.class_counts
    for label in LABELS:
        if counts[label] < per_class:
            raise InsufficientDataError(label.short, counts[label], per_class)
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for label in LABELS:
        idx = [i for i, r in enumerate(corpus.records) if r.label is label]
        chosen = rng.choice(len(idx), size=per_class, replace=False)
        keep.update(idx[c] for c in chosen)
    return Corpus(r for i, r in enumerate(corpus.records) if i in keep)


def split(corpus: Corpus, train_fraction: float = 0.9, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Stratified train/validation split; both halves keep corpus order."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(corpus) == 0:
        raise ConfigError("cannot split an empty corpus")
    rng = np.random.default_rng(seed)
    train_idx: set[int] = set()
    for label in LABELS:
        idx = np.array([i for i, r in enumerate(corpus.records) if r.label is label], dtype=int)
        if idx.size == 0:
            continue
        n_train = int(round(train_fraction * idx.size))
        train_idx.update(rng.permutation(idx)[:n_train].tolist())
    train = Corpus(r for i, r in enumerate(corpus.records) if i in train_idx)
    val = Corpus(r for i, r in enumerate(corpus.records) if i not in train_idx)
    return train, val


# --------------------------------------------------------------------------
# templates

TEMPLATE_FIELDS = ("sender", "subject", "body")


def template_segments(template: str) -> list[tuple[str, str | None]]:
    """Split a template into ``(literal, field)`` pairs, validating fields."""
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise TemplateError(f"malformed template: {exc}") from exc
    fields = [f for _, f, _, _ in parsed if f is not None]
    missing = [f for f in TEMPLATE_FIELDS if f not in fields]
    if missing:
        raise TemplateError(f"template lacks placeholder(s): {', '.join('{' + m + '}' for m in missing)}")
    unknown = [f for f in fields if f not in TEMPLATE_FIELDS]
    if unknown:
        raise TemplateError(f"unknown template placeholder(s): {unknown}")
    for _, f, spec, conv in parsed:
        if f is not None and (spec or conv):
            raise TemplateError("format specs and conversions are not supported in templates")
    return [(lit, f) for lit, f, _, _ in parsed]


def render_input(email_: CleanEmail, template: str = DEFAULT_TEMPLATE) -> str:
    values = {"sender": email_.sender, "subject": email_.subject, "body": email_.body}
    return "".join(lit + (values[f] if f else "") for lit, f in template_segments(template))


# --------------------------------------------------------------------------
# canonical files


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_corpus(corpus: Corpus | Iterable[CleanEmail], path: str | Path) -> None:
    write_jsonl((r.to_dict() for r in corpus), path)


def read_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "no such file")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(CleanEmail.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise IngestionError(path, f"line {lineno}: {exc}") from exc
    return Corpus(records)


def write_skip_report(skips: Iterable[Skip], path: str | Path) -> None:
    write_jsonl((s.to_dict() for s in skips), path)
