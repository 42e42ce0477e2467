"""Shapley value estimation for coalition set functions.

A *scorer* is any callable taking a boolean array of shape
``(m, n_players)`` (one visibility mask per row) and returning ``m``
values. :class:`~ccshap_audit.scoring.CoalitionScorer` is the production
scorer; plain numpy functions work just as well.

Two estimators are provided:

``exact_shapley``
    Enumerates all ``2**n`` coalitions. Used as ground truth on short inputs.

``mc_shapley``
    Averages marginal contributions over random permutations: each
    permutation contributes, for every player, the score change when that
    player joins the set of players preceding it. This is an unbiased
    estimator of the exact value, and since the marginals of one
    permutation telescope, every estimate satisfies the efficiency axiom.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ExactLimitError

DEFAULT_EXACT_LIMIT = 14
DEFAULT_N_SAMPLES = 2000

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class ShapVector:
    values: np.ndarray
    n_samples: int
    baseline: float
    full_score: float
    target: str = "classification"
    stderr: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.stderr is None:
            self.stderr = np.zeros_like(self.values)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)

    def __len__(self) -> int:
        return int(self.values.size)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "n_samples": int(self.n_samples),
            "baseline": float(self.baseline),
            "full_score": float(self.full_score),
            "values": [float(v) for v in self.values],
            "stderr": [None if not np.isfinite(s) else float(s) for s in self.stderr],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapVector":
        return cls(
            values=np.array(d["values"], dtype=np.float64),
            n_samples=d["n_samples"],
            baseline=d["baseline"],
            full_score=d["full_score"],
            target=d.get("target", "classification"),
            stderr=np.array([np.nan if s is None else s for s in d.get("stderr", [])], dtype=np.float64)
            if d.get("stderr") is not None
            else None,
        )


@dataclass
class NormalizedShap:
    ratios: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)

    def __len__(self) -> int:
        return int(self.ratios.size)


def _evaluate(scorer: Scorer, masks: np.ndarray) -> np.ndarray:
    values = np.asarray(scorer(masks), dtype=np.float64).reshape(-1)
    if values.size != masks.shape[0]:
        raise ContractError(f"scorer returned {values.size} values for {masks.shape[0]} masks")
    return values


def all_coalitions(n: int) -> np.ndarray:
    """Boolean matrix whose row ``i`` has player ``j`` visible iff bit ``j`` of ``i`` is set."""
    idx = np.arange(2**n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(bool)


def exact_shapley(
    scorer: Scorer,
    n_players: int,
    *,
    target: str = "classification",
    exact_limit: int = DEFAULT_EXACT_LIMIT,
) -> ShapVector:
    """Shapley values by full enumeration of the ``2**n_players`` coalitions."""
    if n_players > exact_limit:
        raise ExactLimitError(
            f"{n_players} players exceeds exact_limit={exact_limit} "
            f"({2**n_players} coalitions); use mc_shapley instead"
        )
    n = n_players
    if n == 0:
        v = _evaluate(scorer, np.zeros((1, 0), dtype=bool))
        return ShapVector(np.zeros(0), 0, float(v[0]), float(v[0]), target)
    masks = all_coalitions(n)
    v = _evaluate(scorer, masks)
    sizes = masks.sum(axis=1)
    # weight for a coalition of size k not containing the player
    weights = np.array(
        [math.factorial(k) * math.factorial(n - 1 - k) / math.factorial(n) for k in range(n)]
    )
    idx = np.arange(2**n, dtype=np.int64)
    phi = np.empty(n)
    for j in range(n):
        without = idx[(idx >> j) & 1 == 0]
        marg = v[without | (1 << j)] - v[without]
        phi[j] = np.sum(weights[sizes[without]] * marg)
    return ShapVector(phi, 0, float(v[0]), float(v[-1]), target)


def _permutation(seed: int, unit: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, unit]).permutation(n)


def _prefix_masks(perms: np.ndarray) -> np.ndarray:
    """For each permutation, the n+1 masks of its growing prefixes."""
    c, n = perms.shape
    # rank[p, j] = position of player j in permutation p
    rank = np.empty_like(perms)
    rank[np.arange(c)[:, None], perms] = np.arange(n)
    steps = np.arange(n + 1)
    return rank[:, None, :] < steps[None, :, None]


def mc_shapley(
    scorer: Scorer,
    n_players: int,
    n_samples: int = DEFAULT_N_SAMPLES,
    seed: int = 0,
    *,
    target: str = "classification",
    antithetic: bool = True,
    chunk_size: int = 64,
    n_jobs: int = 1,
) -> ShapVector:
    """Monte Carlo Shapley estimate from ``n_samples`` random permutations.

    Permutation ``i`` is drawn from a generator seeded with ``(seed, unit)``,
    so results do not depend on chunking or on ``n_jobs``. With
    ``antithetic`` each drawn permutation is paired with its reverse (the
    pair counts as two samples). ``stderr`` is the standard error of each
    value, computed from per-unit means (a unit is one permutation, or one
    antithetic pair); it is NaN when there is only one unit.
    """
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    n = n_players
    ends = _evaluate(scorer, np.array([np.zeros(n, bool), np.ones(n, bool)]))
    if n == 0:
        return ShapVector(np.zeros(0), n_samples, float(ends[0]), float(ends[1]), target)

    if antithetic:
        n_units = (n_samples + 1) // 2
        unit_of = np.repeat(np.arange(n_units), 2)[:n_samples]
    else:
        n_units = n_samples
        unit_of = np.arange(n_samples)

    def draw(sample: int) -> np.ndarray:
        perm = _permutation(seed, int(unit_of[sample]), n)
        if antithetic and sample % 2 == 1:
            perm = perm[::-1]
        return perm

    def run_chunk(start: int) -> np.ndarray:
        stop = min(start + chunk_size, n_samples)
        perms = np.array([draw(s) for s in range(start, stop)])
        masks = _prefix_masks(perms)
        c = stop - start
        values = _evaluate(scorer, masks.reshape(c * (n + 1), n)).reshape(c, n + 1)
        marg = np.empty((c, n))
        marg[np.arange(c)[:, None], perms] = np.diff(values, axis=1)
        return marg

    starts = range(0, n_samples, chunk_size)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            chunks = list(pool.map(run_chunk, starts))
    else:
        chunks = [run_chunk(s) for s in starts]
    marginals = np.concatenate(chunks, axis=0)

    phi = marginals.sum(axis=0) / n_samples
    if n_units > 1:
        counts = np.bincount(unit_of, minlength=n_units).astype(np.float64)
        unit_means = np.zeros((n_units, n))
        np.add.at(unit_means, unit_of, marginals)
        unit_means /= counts[:, None]
        stderr = unit_means.std(axis=0, ddof=1) / math.sqrt(n_units)
    else:
        stderr = np.full(n, np.nan)
    return ShapVector(phi, n_samples, float(ends[0]), float(ends[1]), target, stderr)


def normalize_contributions(shap: ShapVector | np.ndarray) -> NormalizedShap:
    """Scale attributions by their L1 norm so that ``sum(|c|) == 1``.

    An all-zero vector cannot be scaled and comes back flagged as degenerate.
    """
    phi = shap.values if isinstance(shap, ShapVector) else np.asarray(shap, dtype=np.float64)
    total = np.sum(np.abs(phi))
    if total == 0.0 or not np.isfinite(total):
        return NormalizedShap(np.zeros_like(phi), degenerate=True)
    return NormalizedShap(phi / total, degenerate=False)
