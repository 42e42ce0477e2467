"""Coalition scoring: tokenisation, pad-token masking and probability lookup.

A *backend* maps a token sequence plus a batch of visibility masks to
probabilities. :class:`CoalitionScorer` binds one backend, one sequence and
one target into the set function that the Shapley estimators consume.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np

from .corpus import DEFAULT_TEMPLATE, LABELS, CleanEmail, Label, template_segments
from .errors import CoalitionError, ContractError

EPS = 1e-9
PAD_ID = 0
MASK_LITERAL = "<mask>"
DEFAULT_MAX_TOKENS = 256

_TOKEN_RE = re.compile(r"\w+(?:[-'’]\w+)*|[^\w\s]", re.UNICODE)


def token_id(surface: str) -> int:
    """Stable 31-bit id for a surface string; never equals ``PAD_ID``."""
    h = hashlib.blake2b(surface.encode("utf-8"), digest_size=4).digest()
    return (int.from_bytes(h, "little") & 0x7FFFFFFF) or 1


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    surface: tuple[str, ...]
    pad_id: int = PAD_ID
    attributable: np.ndarray | None = None
    truncated: bool = False

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "surface", tuple(self.surface))
        if tokens.ndim != 1 or tokens.size != len(self.surface):
            raise ContractError("tokens and surface must be 1-D and of equal length")
        attributable = (
            np.ones(tokens.size, dtype=bool)
            if self.attributable is None
            else np.asarray(self.attributable, dtype=bool)
        )
        if attributable.shape != tokens.shape:
            raise ContractError("attributable flags must match the token count")
        object.__setattr__(self, "attributable", attributable)

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def players(self) -> np.ndarray:
        """Positions that take part in attribution."""
        return np.flatnonzero(self.attributable)

    @property
    def text(self) -> str:
        return " ".join(self.surface)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.tokens.tobytes())
        h.update(self.attributable.tobytes())
        h.update(str(self.pad_id).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.surface == other.surface
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.attributable, other.attributable)
            and self.pad_id == other.pad_id
            and self.truncated == other.truncated
        )

    __hash__ = None


def _split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> TokenSequence:
    """Lower-case word/punctuation tokenizer with tail truncation.

    >>> tokenize("Verify your account!").surface
    ('verify', 'your', 'account', '!')
    """
    surface = _split(text)
    if not surface:
        raise ContractError("nothing to attribute: text has no tokens")
    truncated = len(surface) > max_tokens
    surface = surface[:max_tokens]
    return TokenSequence([token_id(s) for s in surface], surface, truncated=truncated)


def encode_email(
    email: CleanEmail,
    template: str = DEFAULT_TEMPLATE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    attribute_template: bool = False,
) -> TokenSequence:
    """Tokenize the rendered model input, tracking which tokens came from the template.

    Template and field segments are tokenized separately, so a token never
    straddles a template/field boundary. Unless ``attribute_template`` is
    set, template tokens stay visible under every mask and get no
    attribution. Truncation drops the tail, which keeps sender and subject
    for the default template.
    """
    values = {"sender": email.sender, "subject": email.subject, "body": email.body}
    surface: list[str] = []
    flags: list[bool] = []
    for literal, name in template_segments(template):
        lit = _split(literal)
        surface += lit
        flags += [attribute_template] * len(lit)
        if name:
            part = _split(values[name])
            surface += part
            flags += [True] * len(part)
    if not any(flags):
        raise ContractError("nothing to attribute: email has no attributable tokens")
    truncated = len(surface) > max_tokens
    surface, flags = surface[:max_tokens], flags[:max_tokens]
    return TokenSequence(
        [token_id(s) for s in surface], surface, attributable=flags, truncated=truncated
    )


def apply_mask(sequence: TokenSequence, mask) -> TokenSequence:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != sequence.tokens.shape:
        raise ContractError(
            f"mask length {mask.size} does not match sequence length {len(sequence)}"
        )
    tokens = np.where(mask, sequence.tokens, sequence.pad_id)
    return TokenSequence(
        tokens, sequence.surface, sequence.pad_id, sequence.attributable, sequence.truncated
    )


def mask_text(sequence: TokenSequence, mask) -> str:
    """Text form of a masked sequence for text-in backends."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != sequence.tokens.shape:
        raise ContractError(
            f"mask length {mask.size} does not match sequence length {len(sequence)}"
        )
    return " ".join(s if v else MASK_LITERAL for s, v in zip(sequence.surface, mask))


# --------------------------------------------------------------------------
# targets and requests


@dataclass(frozen=True)
class Explanation:
    text: str
    tokens: tuple[str, ...]
    label: Label
    prompt: str | None = None

    def digest(self) -> str:
        payload = "\x1f".join([self.label.value, self.text, *self.tokens])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ClassificationTarget:
    label: Label

    def digest(self) -> str:
        return f"cls:{self.label.value}"

    @property
    def kind(self) -> str:
        return "classification"


@dataclass(frozen=True)
class ExplanationTarget:
    explanation: Explanation

    def __post_init__(self):
        if not self.explanation.tokens:
            raise ContractError("explanation target needs at least one token")

    def digest(self) -> str:
        return f"expl:{self.explanation.digest()}"

    @property
    def kind(self) -> str:
        return "explanation"


Target = Union[ClassificationTarget, ExplanationTarget]


@dataclass(frozen=True, eq=False)
class ScoreRequest:
    sequence: TokenSequence
    mask: np.ndarray
    target: Target


class Backend(Protocol):
    """What the audit needs from a model.

    All mask arguments are boolean arrays of shape ``(m, len(sequence))``
    over token positions; implementations return one row per mask.
    """

    backend_id: str

    def label_probabilities(self, sequence: TokenSequence, masks: np.ndarray) -> np.ndarray:
        """Array of shape ``(m, 2)``, columns ordered as :data:`LABELS`."""

    def explain(self, sequence: TokenSequence, label: Label) -> Explanation: ...

    def explanation_probabilities(
        self, sequence: TokenSequence, masks: np.ndarray, explanation: Explanation
    ) -> np.ndarray:
        """Length-normalised likelihood of the explanation, shape ``(m,)``."""


def clamp(p):
    return np.clip(np.nan_to_num(np.asarray(p, dtype=np.float64), nan=EPS), EPS, 1.0 - EPS)


def _evaluate(backend: Backend, sequence: TokenSequence, masks: np.ndarray, target: Target):
    if isinstance(target, ClassificationTarget):
        probs = np.asarray(backend.label_probabilities(sequence, masks), dtype=np.float64)
        return probs[:, LABELS.index(target.label)]
    return np.asarray(
        backend.explanation_probabilities(sequence, masks, target.explanation), dtype=np.float64
    )


def score(request: ScoreRequest, backend: Backend) -> float:
    mask = np.asarray(request.mask, dtype=bool)
    if mask.shape != request.sequence.tokens.shape:
        raise ContractError(
            f"mask length {mask.size} does not match sequence length {len(request.sequence)}"
        )
    return float(clamp(_evaluate(backend, request.sequence, mask[None, :], request.target))[0])


class ScoreCache:
    """Memo of scored coalitions, optionally persisted as an append-only log.

    Each log line is ``<sha256 hex key>\\t<float.hex value>``, so values
    round-trip bit-exact and an interrupted audit can resume from the file.
    """

    def __init__(self, path: str | Path | None = None):
        self._data: dict[str, float] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path else None
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            with self.path.open(encoding="ascii") as fh:
                for line in fh:
                    key, _, value = line.rstrip("\n").partition("\t")
                    if key and value:
                        self._data[key] = float.fromhex(value)

    @staticmethod
    def key(backend_id: str, sequence_digest: str, mask: np.ndarray, target_digest: str) -> str:
        mask = np.asarray(mask, dtype=bool)
        h = hashlib.sha256()
        h.update(f"{backend_id}\x1f{sequence_digest}\x1f{target_digest}\x1f{mask.size}\x1f".encode())
        h.update(np.packbits(mask).tobytes())
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str):
        with self._lock:
            value = self._data.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def put_many(self, items: Sequence[tuple[str, float]]) -> None:
        with self._lock:
            new = [(k, float(v)) for k, v in items]
            self._data.update(new)
            if self.path and new:
                with self.path.open("a", encoding="ascii") as fh:
                    fh.writelines(f"{k}\t{v.hex()}\n" for k, v in new)


def cached_score(request: ScoreRequest, backend: Backend, cache: ScoreCache) -> float:
    key = ScoreCache.key(
        backend.backend_id, request.sequence.digest(), request.mask, request.target.digest()
    )
    hit = cache.get(key)
    if hit is not None:
        return hit
    value = score(request, backend)
    cache.put_many([(key, value)])
    return value


class CoalitionScorer:
    """Set function over the attributable positions of one sequence.

    Calling it with a ``(m, n_players)`` boolean array returns ``m`` clamped
    probabilities. Non-attributable positions are always visible. Masks are
    deduplicated within each call and, when a cache is given, across calls.
    ``backend_rows`` counts the masks actually sent to the backend.
    """

    def __init__(self, backend: Backend, sequence: TokenSequence, target: Target, cache: ScoreCache | None = None):
        self.backend = backend
        self.sequence = sequence
        self.target = target
        self.cache = cache
        self.players = sequence.players
        self.backend_rows = 0
        self._prefix = (backend.backend_id, sequence.digest(), target.digest())
        self._lock = threading.Lock()

    @property
    def n_players(self) -> int:
        return int(self.players.size)

    def full_masks(self, player_masks: np.ndarray) -> np.ndarray:
        player_masks = np.asarray(player_masks, dtype=bool)
        if player_masks.ndim == 1:
            player_masks = player_masks[None, :]
        if player_masks.shape[1] != self.n_players:
            raise ContractError(
                f"mask has {player_masks.shape[1]} players, sequence has {self.n_players}"
            )
        full = np.tile(~self.sequence.attributable, (player_masks.shape[0], 1))
        full[:, self.players] = player_masks
        return full

    def _backend_eval(self, full: np.ndarray) -> np.ndarray:
        try:
            values = clamp(_evaluate(self.backend, self.sequence, full, self.target))
        except CoalitionError:
            raise
        except Exception as exc:
            raise CoalitionError(f"scorer failed on a batch of {len(full)} coalitions: {exc}", masks=full) from exc
        with self._lock:
            self.backend_rows += len(full)
        return values

    def __call__(self, player_masks) -> np.ndarray:
        full = self.full_masks(player_masks)
        uniq, inverse = np.unique(full, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        if self.cache is None:
            return self._backend_eval(uniq)[inverse]
        keys = [ScoreCache.key(self._prefix[0], self._prefix[1], row, self._prefix[2]) for row in uniq]
        values = np.empty(len(uniq), dtype=np.float64)
        missing = []
        for i, k in enumerate(keys):
            hit = self.cache.get(k)
            if hit is None:
                missing.append(i)
            else:
                values[i] = hit
        if missing:
            fresh = self._backend_eval(uniq[missing])
            values[missing] = fresh
            self.cache.put_many([(keys[i], v) for i, v in zip(missing, fresh)])
        return values[inverse]


# --------------------------------------------------------------------------
# wrappers used for sanity checks


class SelfConsistentBackend:
    """Backend whose explanation likelihood *is* its classification probability.

    Prediction-side and explanation-side attributions then coincide, which
    pins the consistency score at its upper bound.
    """

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = f"self-consistent({inner.backend_id})"

    def label_probabilities(self, sequence, masks):
        return self.inner.label_probabilities(sequence, masks)

    def explain(self, sequence, label):
        return self.inner.explain(sequence, label)

    def explanation_probabilities(self, sequence, masks, explanation):
        probs = np.asarray(self.inner.label_probabilities(sequence, masks))
        return probs[:, LABELS.index(explanation.label)]


class ConstantExplanationBackend:
    """Backend whose explanation likelihood ignores the input."""

    def __init__(self, inner: Backend, value: float = 0.5):
        self.inner = inner
        self.value = value
        self.backend_id = f"constant-explanation({inner.backend_id},{value!r})"

    def label_probabilities(self, sequence, masks):
        return self.inner.label_probabilities(sequence, masks)

    def explain(self, sequence, label):
        return self.inner.explain(sequence, label)

    def explanation_probabilities(self, sequence, masks, explanation):
        return np.full(len(masks), self.value)
