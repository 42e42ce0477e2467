"""Desk-scale trainable classifier with three training objectives.

:class:`LinearTextModel` is a logistic model over hashed token counts.
It can be trained with binary cross-entropy, a triplet margin loss, or the
DPO preference loss, and it doubles as an audit backend through
:class:`ToyBackend`, which also generates template explanations.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import DEFAULT_TEMPLATE, CleanEmail, Corpus, Label
from .errors import ConfigError, DataError, TrainingError
from .scoring import (
    DEFAULT_MAX_TOKENS,
    Explanation,
    TokenSequence,
    encode_email,
)

DEFAULT_DIM = 2**16
CHECKPOINT_MAGIC = b"CCSHAPLM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQq")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on a uint64 array (wrapping arithmetic)."""
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


@dataclass
class LinearTextModel:
    """``P(PHISHING) = sigmoid(w . counts(tokens) + b)`` over hashed buckets."""

    weights: np.ndarray
    bias: float = 0.0
    hash_seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def zeros(cls, dim: int = DEFAULT_DIM, hash_seed: int = 0) -> "LinearTextModel":
        return cls(np.zeros(dim), 0.0, hash_seed)

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    def copy(self) -> "LinearTextModel":
        return LinearTextModel(self.weights.copy(), self.bias, self.hash_seed)

    def buckets(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).astype(np.uint64)
        salt = _mix64(np.array([self.hash_seed], dtype=np.int64).astype(np.uint64))[0]
        return (_mix64(ids ^ salt) % np.uint64(self.dim)).astype(np.int64)

    def contributions(self, sequence: TokenSequence) -> np.ndarray:
        """Per-position logit contribution; padded positions contribute nothing."""
        contrib = self.weights[self.buckets(sequence.tokens)]
        contrib[sequence.tokens == sequence.pad_id] = 0.0
        return contrib

    def logits(self, sequence: TokenSequence, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        contrib = self.contributions(sequence)
        # row-wise sums keep each row's result independent of batch composition
        return np.where(masks, contrib, 0.0).sum(axis=1) + self.bias

    def proba(self, sequence: TokenSequence, masks=None) -> np.ndarray:
        """``P(PHISHING)`` for each mask (all tokens visible when ``masks`` is None)."""
        if masks is None:
            masks = np.ones((1, len(sequence)), dtype=bool)
        return _sigmoid(self.logits(sequence, masks))

    def predict(self, sequence: TokenSequence) -> Label:
        return Label.PHISHING if self.proba(sequence)[0] >= 0.5 else Label.LEGITIMATE

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.dim, self.hash_seed))
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(struct.pack("<d", self.bias))

    @classmethod
    def load(cls, path: str | Path) -> "LinearTextModel":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise DataError(f"{path}: truncated checkpoint header")
        magic, version, dim, hash_seed = _HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a model checkpoint")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        expected = _HEADER.size + 8 * dim + 8
        if len(data) != expected:
            raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
        weights = np.frombuffer(data, dtype="<f8", count=dim, offset=_HEADER.size).astype(np.float64)
        (bias,) = struct.unpack_from("<d", data, _HEADER.size + 8 * dim)
        return cls(weights, bias, hash_seed)

    def digest(self) -> str:
        h = hashlib.sha256(self.weights.tobytes())
        h.update(struct.pack("<dq", self.bias, self.hash_seed))
        return h.hexdigest()[:16]


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    seed: int = 0
    dim: int = DEFAULT_DIM
    hash_seed: int = 0
    margin: float = 1.0
    beta: float = 0.1
    init_scale: float = 0.01
    template: str = DEFAULT_TEMPLATE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.dim < 1:
            raise ConfigError("dim must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def write_metrics_csv(metrics: Sequence[EpochMetrics], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.val_loss), repr(m.train_acc), repr(m.val_acc)])


@dataclass
class _Encoded:
    X: sp.csr_matrix
    y: np.ndarray  # 1.0 for PHISHING
    sequences: list[TokenSequence]


def _encode(corpus: Corpus | Sequence[CleanEmail], model: LinearTextModel, config: TrainConfig) -> _Encoded:
    records = list(corpus)
    if not records:
        raise DataError("training corpus is empty")
    seqs = [encode_email(r, config.template, config.max_tokens, attribute_template=True) for r in records]
    rows = np.concatenate([np.full(len(s), i) for i, s in enumerate(seqs)])
    cols = np.concatenate([model.buckets(s.tokens) for s in seqs])
    X = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(len(seqs), model.dim))
    X.sum_duplicates()
    y = np.array([1.0 if r.label is Label.PHISHING else 0.0 for r in records])
    return _Encoded(X, y, seqs)


def _check_finite(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(
            f"training diverged at epoch {epoch} (loss={loss}); lower the learning rate"
        )


def bce_loss(model: LinearTextModel, X: sp.csr_matrix, y: np.ndarray) -> float:
    z = X @ model.weights + model.bias
    # -[y log s(z) + (1-y) log s(-z)]
    return float(np.mean(np.logaddexp(0.0, -z) * y + np.logaddexp(0.0, z) * (1 - y)))


def _accuracy(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((z >= 0).astype(float) == y))


def train_bce(
    train: Corpus, val: Corpus, config: TrainConfig | None = None
) -> tuple[LinearTextModel, list[EpochMetrics]]:
    """Full-batch gradient descent on mean binary cross-entropy.

    Row 0 of the returned metrics describes the untrained (all-zero) model.
    """
    config = config or TrainConfig()
    model = LinearTextModel.zeros(config.dim, config.hash_seed)
    tr, va = _encode(train, model, config), _encode(val, model, config)
    n = tr.y.size

    def record(epoch):
        ztr = tr.X @ model.weights + model.bias
        zva = va.X @ model.weights + model.bias
        m = EpochMetrics(
            epoch,
            bce_loss(model, tr.X, tr.y),
            bce_loss(model, va.X, va.y),
            _accuracy(ztr, tr.y),
            _accuracy(zva, va.y),
        )
        _check_finite(m.train_loss, epoch)
        return m

    metrics = [record(0)]
    for epoch in range(1, config.epochs + 1):
        z = tr.X @ model.weights + model.bias
        resid = _sigmoid(z) - tr.y
        model.weights -= config.learning_rate * (tr.X.T @ resid) / n
        model.bias -= config.learning_rate * float(resid.sum()) / n
        metrics.append(record(epoch))
    return model, metrics


# -- contrastive ------------------------------------------------------------


@dataclass(frozen=True)
class TripletBatch:
    anchor: TokenSequence
    positive: TokenSequence
    negative: TokenSequence


def _mine_indices(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One (anchor, positive, negative) index triple per anchor."""
    pos_pool = {c: np.flatnonzero(y == c) for c in (0.0, 1.0)}
    if any(p.size == 0 for p in pos_pool.values()):
        raise DataError("triplet mining needs both classes present")
    triples = []
    for a in range(y.size):
        same, other = pos_pool[y[a]], pos_pool[1.0 - y[a]]
        candidates = same[same != a] if same.size > 1 else same
        triples.append((a, candidates[rng.integers(candidates.size)], other[rng.integers(other.size)]))
    return np.array(triples, dtype=np.int64)


def mine_triplets(corpus: Corpus, seed: int = 0, config: TrainConfig | None = None) -> list[TripletBatch]:
    """Uniformly mined triplets: a same-label positive and an opposite-label negative per anchor."""
    config = config or TrainConfig()
    records = list(corpus)
    y = np.array([1.0 if r.label is Label.PHISHING else 0.0 for r in records])
    seqs = [encode_email(r, config.template, config.max_tokens, attribute_template=True) for r in records]
    idx = _mine_indices(y, np.random.default_rng(seed))
    return [TripletBatch(seqs[a], seqs[p], seqs[n]) for a, p, n in idx]


def embed(model: LinearTextModel, sequence: TokenSequence) -> float:
    """One-dimensional embedding used by the triplet objective."""
    return float(model.contributions(sequence).sum())


def triplet_loss(d_ap, d_an, margin: float) -> np.ndarray:
    return np.maximum(0.0, np.asarray(d_ap) - np.asarray(d_an) + margin)


def _triplet_stats(z: np.ndarray, idx: np.ndarray, margin: float) -> tuple[float, float]:
    d_ap = np.abs(z[idx[:, 0]] - z[idx[:, 1]])
    d_an = np.abs(z[idx[:, 0]] - z[idx[:, 2]])
    return float(np.mean(triplet_loss(d_ap, d_an, margin))), float(np.mean(d_ap < d_an))


def train_contrastive(
    train: Corpus, val: Corpus, config: TrainConfig | None = None
) -> tuple[LinearTextModel, list[EpochMetrics]]:
    """Triplet margin training of the hashed embedding ``z = w . counts``.

    The embedding is one-dimensional, so the Euclidean distance is
    ``|z_a - z_b|``. Training triplets are re-mined each epoch from a
    generator seeded with ``(seed, epoch)``; validation triplets are mined
    once. Afterwards the bias is set to the midpoint of the two class
    means (orienting phishing to the positive side), which turns the
    embedding into a usable classifier. Accuracy columns report the share
    of triplets with ``d(a,p) < d(a,n)``.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng([config.seed, 0])
    model = LinearTextModel(rng.normal(0.0, config.init_scale, config.dim), 0.0, config.hash_seed)
    tr, va = _encode(train, model, config), _encode(val, model, config)
    val_idx = _mine_indices(va.y, np.random.default_rng([config.seed, 1, 0]))
    margin = config.margin

    def record(epoch, train_idx):
        trl, tra = _triplet_stats(tr.X @ model.weights, train_idx, margin)
        val_l, val_a = _triplet_stats(va.X @ model.weights, val_idx, margin)
        _check_finite(trl, epoch)
        return EpochMetrics(epoch, trl, val_l, tra, val_a)

    train_idx = _mine_indices(tr.y, np.random.default_rng([config.seed, 2, 0]))
    metrics = [record(0, train_idx)]
    for epoch in range(1, config.epochs + 1):
        train_idx = _mine_indices(tr.y, np.random.default_rng([config.seed, 2, epoch]))
        z = tr.X @ model.weights
        a, p, n = train_idx.T
        d_ap, d_an = z[a] - z[p], z[a] - z[n]
        active = (np.abs(d_ap) - np.abs(d_an) + margin) > 0
        s_ap = np.sign(d_ap) * active
        s_an = np.sign(d_an) * active
        # d/dz of |z_a - z_p| - |z_a - z_n|, scattered back onto the rows
        coef = np.zeros(tr.y.size)
        np.add.at(coef, a, s_ap - s_an)
        np.add.at(coef, p, -s_ap)
        np.add.at(coef, n, s_an)
        model.weights -= config.learning_rate * (tr.X.T @ coef) / len(train_idx)
        metrics.append(record(epoch, train_idx))

    z = tr.X @ model.weights
    mu_p, mu_h = z[tr.y == 1].mean(), z[tr.y == 0].mean()
    if mu_p < mu_h:
        model.weights = -model.weights
        mu_p, mu_h = -mu_p, -mu_h
    model.bias = -0.5 * (mu_p + mu_h)
    return model, metrics


# -- DPO ----------------------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    input: TokenSequence
    preferred_label: Label
    rejected_label: Label

    def __post_init__(self):
        if self.preferred_label == self.rejected_label:
            raise ValueError("preferred and rejected labels must differ")


def preference_pairs(corpus: Corpus, config: TrainConfig | None = None) -> list[PreferencePair]:
    """Ground-truth preferences: the true label is preferred over the other one."""
    config = config or TrainConfig()
    return [
        PreferencePair(
            encode_email(r, config.template, config.max_tokens, attribute_template=True),
            r.label,
            r.label.opposite,
        )
        for r in corpus
    ]


def label_logprob(model: LinearTextModel, sequence: TokenSequence, label: Label) -> float:
    z = float(model.logits(sequence, np.ones(len(sequence), dtype=bool))[0])
    return float(_log_sigmoid(z if label is Label.PHISHING else -z))


def dpo_loss(
    policy_chosen_logps, policy_rejected_logps, ref_chosen_logps, ref_rejected_logps, beta: float
) -> np.ndarray:
    """Per-pair ``-log sigmoid(beta * (policy log-ratio - reference log-ratio))``."""
    logits = (np.asarray(policy_chosen_logps) - np.asarray(ref_chosen_logps)) - (
        np.asarray(policy_rejected_logps) - np.asarray(ref_rejected_logps)
    )
    return np.logaddexp(0.0, -beta * logits)


def _dpo_margins(model: LinearTextModel, X, s: np.ndarray) -> np.ndarray:
    # log s(z) - log s(-z) == z, so the preferred-minus-rejected log-ratio is s*z
    return s * (X @ model.weights + model.bias)


def train_dpo(
    train: Corpus,
    val: Corpus,
    reference: LinearTextModel | None = None,
    config: TrainConfig | None = None,
) -> tuple[LinearTextModel, list[EpochMetrics]]:
    """Direct preference optimisation against a frozen reference model.

    Pairs come from :func:`preference_pairs`. The policy starts as a copy
    of ``reference`` (a zero model when omitted), so the epoch-0 loss is
    ``ln 2`` for every pair. Accuracy columns report the share of pairs
    where the policy gives the preferred label the higher probability.
    """
    config = config or TrainConfig()
    if config.beta <= 0:
        raise ConfigError("beta must be positive")
    reference = reference or LinearTextModel.zeros(config.dim, config.hash_seed)
    policy = reference.copy()
    tr, va = _encode(train, policy, config), _encode(val, policy, config)
    s_tr, s_va = 2 * tr.y - 1, 2 * va.y - 1
    ref_tr, ref_va = _dpo_margins(reference, tr.X, s_tr), _dpo_margins(reference, va.X, s_va)
    beta = config.beta

    def stats(X, s, ref):
        margins = _dpo_margins(policy, X, s)
        loss = float(np.mean(np.logaddexp(0.0, -beta * (margins - ref))))
        return loss, float(np.mean(margins > 0))

    def record(epoch):
        trl, tra = stats(tr.X, s_tr, ref_tr)
        val_l, val_a = stats(va.X, s_va, ref_va)
        _check_finite(trl, epoch)
        return EpochMetrics(epoch, trl, val_l, tra, val_a)

    metrics = [record(0)]
    n = tr.y.size
    for epoch in range(1, config.epochs + 1):
        delta = _dpo_margins(policy, tr.X, s_tr) - ref_tr
        # d/dz of softplus(-beta * s * (z - z_ref))
        g = -beta * s_tr * _sigmoid(-beta * delta)
        policy.weights -= config.learning_rate * (tr.X.T @ g) / n
        policy.bias -= config.learning_rate * float(g.sum()) / n
        metrics.append(record(epoch))
    return policy, metrics


# --------------------------------------------------------------------------
# explanations and the audit backend


def generate_explanation(model: LinearTextModel, sequence: TokenSequence, k: int = 3) -> Explanation:
    """Cite the ``k`` attributable tokens with the largest |weight contribution|.

    Each distinct token is cited once; zero-weight tokens are never cited.
    Ties break by position.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    label = model.predict(sequence)
    contrib = model.contributions(sequence)
    players = sequence.players
    order = players[np.argsort(-np.abs(contrib[players]), kind="stable")]
    cited: list[str] = []
    for pos in order:
        if len(cited) >= min(k, players.size) or contrib[pos] == 0.0:
            break
        tok = sequence.surface[pos]
        if tok not in cited:
            cited.append(tok)
    text = f"Classified as {label.value} because of: {', '.join(cited)}"
    return Explanation(text=text, tokens=tuple(cited), label=label)


class ToyBackend:
    """Audit backend around a :class:`LinearTextModel`.

    Explanation likelihood follows a citation model: every visible token
    position is cited with probability proportional to
    ``exp(|contribution| / temperature)``, against a sink of weight 1 for
    citing nothing. A cited token's probability sums over its visible
    positions, and the explanation's likelihood is the geometric mean over
    its cited tokens.
    """

    def __init__(self, model: LinearTextModel, explain_k: int = 3, temperature: float = 1.0, name: str = "toy"):
        self.model = model
        self.explain_k = explain_k
        self.temperature = temperature
        self.backend_id = f"{name}:{model.digest()}:k{explain_k}:t{temperature!r}"

    def label_probabilities(self, sequence, masks):
        p = self.model.proba(sequence, masks)
        return np.column_stack([p, 1.0 - p])

    def explain(self, sequence, label=None):
        return generate_explanation(self.model, sequence, self.explain_k)

    def explanation_probabilities(self, sequence, masks, explanation):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        strength = np.exp(np.abs(self.model.contributions(sequence)) / self.temperature)
        visible = np.where(masks, strength, 0.0)
        denom = 1.0 + visible.sum(axis=1)
        surface = np.array(sequence.surface, dtype=object)
        logp = np.zeros(len(masks))
        for tok in explanation.tokens:
            num = np.where(surface == tok, visible, 0.0).sum(axis=1)
            logp += np.log(np.maximum(num / denom, 1e-9))
        return np.exp(logp / len(explanation.tokens))
