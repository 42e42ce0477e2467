"""Standard scorers with known Shapley structure.

Each fixture is a vectorised set function over ``n`` players together with
a human-readable name. The suite backs ``ccshap-audit verify`` and the
oracle tests: the Monte Carlo estimator is compared against exhaustive
enumeration on every fixture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .scoring import ClassificationTarget, CoalitionScorer, tokenize
from .synthetic import make_separable_corpus
from .toy_models import ToyBackend, TrainConfig, train_bce


@dataclass
class Fixture:
    name: str
    n_players: int
    scorer: Callable[[np.ndarray], np.ndarray]
    dummy: tuple[int, ...] = ()
    symmetric: tuple[tuple[int, int], ...] = ()


def constant(n: int = 6, value: float = 0.5) -> Fixture:
    return Fixture(f"constant[n={n}]", n, lambda m: np.full(len(m), value))


def additive(weights=(0.3, 0.1, -0.05, 0.12, 0.0, 0.2, -0.08), base: float = 0.2) -> Fixture:
    w = np.asarray(weights, dtype=np.float64)
    dummy = tuple(int(i) for i in np.flatnonzero(w == 0))
    return Fixture(
        f"additive[n={w.size}]",
        w.size,
        lambda m: base + np.asarray(m, dtype=np.float64) @ w,
        dummy=dummy,
    )


def symmetric_pair(n: int = 8) -> Fixture:
    """Players 0 and 1 only matter jointly (an AND gate); the rest add small weights."""
    rng = np.random.default_rng(11)
    w = rng.uniform(-0.05, 0.05, n)
    w[:2] = 0.0

    def f(m):
        m = np.asarray(m, dtype=np.float64)
        return 0.1 + 0.5 * m[:, 0] * m[:, 1] + m @ w

    return Fixture(f"symmetric-pair[n={n}]", n, f, symmetric=((0, 1),))


def planted_dummy(n: int = 10, dummy: int = 4) -> Fixture:
    """Logistic interaction model in which one player never changes the output."""
    rng = np.random.default_rng(23)
    w = rng.normal(0.0, 1.0, n)
    w[dummy] = 0.0
    pair = rng.normal(0.0, 0.5, (n, n))
    pair[dummy, :] = pair[:, dummy] = 0.0

    def f(m):
        m = np.asarray(m, dtype=np.float64)
        z = -0.3 + m @ w + 0.5 * np.einsum("ij,jk,ik->i", m, pair, m) / n
        return 1.0 / (1.0 + np.exp(-z))

    return Fixture(f"planted-dummy[n={n}]", n, f, dummy=(dummy,))


TOY_TEXT = "urgent-verify your bank account password today or it will be suspended"


def trained_toy(text: str = TOY_TEXT, epochs: int = 100, seed: int = 0) -> Fixture:
    """BCE-trained linear model on the separable synthetic corpus, scoring ``text``."""
    corpus = make_separable_corpus(40, seed=seed)
    model, _ = train_bce(corpus, corpus, TrainConfig(epochs=epochs, seed=seed))
    seq = tokenize(text)
    backend = ToyBackend(model)
    label = model.predict(seq)
    scorer = CoalitionScorer(backend, seq, ClassificationTarget(label))
    return Fixture(f"trained-toy[n={len(seq)}]", len(seq), scorer)


def standard_suite() -> list[Fixture]:
    return [constant(), additive(), symmetric_pair(), planted_dummy(), trained_toy()]
