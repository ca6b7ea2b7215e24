"""Data generating processes for the two simulation studies.

Both generators draw cluster covariates, cluster sizes and latent cluster
effects, then individual covariates, pair the clusters on ``E2``,
randomize within pairs and threshold a shared uniform ``U_Y`` against the
outcome risk under each arm. Sharing ``U_Y`` keeps ``Y = Y(A)`` exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .data import TrialData

SCENARIOS = ("sim1", "sim2")
TRUTH_STREAM = 2 ** 32 - 1

_DEFAULTS = {
    "sim1": dict(size_mean=150.0, size_sd=80.0, size_floor=30),
    "sim2": dict(size_mean=400.0, size_sd=250.0, size_floor=30),
}
_TRUTH_POPULATION = {"sim1": 2500, "sim2": 1000}


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one simulation scenario.

    Unset size parameters take the scenario defaults (Normal(150, 80) for
    ``sim1``, Normal(400, 250) for ``sim2``, both floored at 30).
    """

    scenario: str = "sim1"
    n_clusters: int = 20
    size_mean: float | None = None
    size_sd: float | None = None
    size_floor: int | None = None
    null: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n_clusters < 2 or self.n_clusters % 2:
            raise ValueError("n_clusters must be a positive even number")
        for key, value in _DEFAULTS[self.scenario].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.size_floor < 1:
            raise ValueError("size_floor must be at least 1")

    def rng(self, stream: int) -> np.random.Generator:
        """Independent generator for replicate ``stream``."""
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(stream,)))


@dataclass(frozen=True)
class CounterfactualStore:
    """Per-individual counterfactual outcomes and risks under each arm."""

    y1: np.ndarray
    y0: np.ndarray
    p1: np.ndarray
    p0: np.ndarray


@dataclass(frozen=True)
class ScenarioTruth:
    cluster_mean1: float
    cluster_mean0: float
    individual_mean1: float
    individual_mean0: float
    geometric_ratio: float

    @property
    def cluster_ratio(self) -> float:
        return self.cluster_mean1 / self.cluster_mean0

    @property
    def individual_ratio(self) -> float:
        return self.individual_mean1 / self.individual_mean0

    @property
    def cluster_difference(self) -> float:
        return self.cluster_mean1 - self.cluster_mean0

    @property
    def individual_difference(self) -> float:
        return self.individual_mean1 - self.individual_mean0

    def value(self, estimand: str) -> float:
        return float(getattr(self, estimand))


# -- matching ----------------------------------------------------------------

def pair_match(values) -> list[tuple[int, int]]:
    """Minimum total |difference| perfect matching of scalar values.

    On a line the optimal matching pairs neighbours in sorted order; ties are
    broken by original index. Pairs are returned sorted by first member.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size % 2:
        raise ValueError("pair matching needs an even number of scalar values")
    order = np.argsort(values, kind="stable")
    pairs = [tuple(sorted((int(order[k]), int(order[k + 1]))))
             for k in range(0, order.size, 2)]
    return sorted(pairs)


def min_cost_matching(cost) -> tuple[list[tuple[int, int]], float]:
    """Exact minimum-cost perfect matching for a general symmetric cost matrix.

    Bitmask dynamic programming over the set of unmatched units, always
    matching the lowest-index free unit first; feasible up to about 22 units.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if n % 2:
        raise ValueError("perfect matching needs an even number of units")
    if n > 22:
        raise ValueError("exact matching is limited to 22 units")
    full = (1 << n) - 1

    @lru_cache(maxsize=None)
    def best(mask):
        if mask == full:
            return 0.0, ()
        i = next(k for k in range(n) if not mask >> k & 1)
        result = (np.inf, ())
        for j in range(i + 1, n):
            if mask >> j & 1:
                continue
            sub, pairs = best(mask | 1 << i | 1 << j)
            total = cost[i, j] + sub
            if total < result[0] - 1e-12:
                result = (total, ((i, j),) + pairs)
        return result

    total, pairs = best(0)
    return sorted(pairs), float(total)


def _randomize_pairs(rng, pair_values) -> tuple[np.ndarray, np.ndarray]:
    pairs = pair_match(pair_values)
    arm = np.zeros(len(pair_values), dtype=int)
    pair_ids = np.zeros(len(pair_values), dtype=int)
    flips = rng.uniform(size=len(pairs)) < 0.5
    for k, ((i, j), first) in enumerate(zip(pairs, flips)):
        arm[i if first else j] = 1
        pair_ids[[i, j]] = k
    return arm, pair_ids


def _cluster_sizes(rng, spec: ScenarioSpec, J: int) -> np.ndarray:
    draws = np.rint(rng.normal(spec.size_mean, spec.size_sd, J))
    return np.maximum(draws, spec.size_floor).astype(int)


# -- generators ----------------------------------------------------------------

def _population_sim1(rng, spec: ScenarioSpec, J: int):
    E1 = rng.normal(2.0, 1.0, J)
    E2 = rng.normal(0.0, 1.0, J)
    sizes = _cluster_sizes(rng, spec, J)
    U1 = rng.uniform(-0.2, 1.5, J)
    U2 = rng.uniform(-0.5, 0.5, J)
    c = np.repeat(np.arange(J), sizes)
    n = c.size
    W1 = rng.normal(2.0 * U1[c], 0.35)
    W2 = rng.normal(4.0 * U1[c], 0.9)
    W3 = rng.normal(U2[c], 0.5)
    W4 = rng.normal(U2[c], 0.5)
    UY = rng.uniform(size=n)
    b = 0.0 if spec.null else 1.0

    def risk(a):
        return expit(-0.75 - 0.35 * a * b + 0.8 * W1 + 0.4 * W2 - 0.3 * E1[c]
                     - 0.2 * a * b * W2)

    E = np.column_stack([E1, E2])
    W = np.column_stack([W1, W2, W3, W4])
    return E, ("E1", "E2"), W, ("W1", "W2", "W3", "W4"), sizes, UY, risk


def _population_sim2(rng, spec: ScenarioSpec, J: int):
    E1 = rng.normal(0.0, 1.0, J)
    E2 = rng.normal(0.0, 1.0, J)
    sizes = _cluster_sizes(rng, spec, J)
    U = rng.uniform(-1.0, 1.0, (3, J))
    c = np.repeat(np.arange(J), sizes)
    n = c.size
    W1 = rng.normal(U[0][c], 0.5)
    W2 = rng.normal(U[1][c], 0.5)
    W3 = rng.normal(U[2][c], 0.5)
    UY = rng.uniform(size=n)
    n_scaled = sizes / 150.0
    b = 0.0 if spec.null else 1.0

    def risk(a):
        return expit(0.5 + W1 / 6 + W2 / 2 + W3 / 4 + E1[c] / 5 + E2[c] / 5
                     - n_scaled[c] / 8 - a * b * n_scaled[c] / 5)

    E = np.column_stack([E1, E2, n_scaled])
    W = np.column_stack([W1, W2, W3])
    return E, ("E1", "E2", "Nscaled"), W, ("W1", "W2", "W3"), sizes, UY, risk


_POPULATIONS = {"sim1": _population_sim1, "sim2": _population_sim2}


def generate(spec: ScenarioSpec, stream: int = 0) -> tuple[TrialData, CounterfactualStore]:
    """Draw one trial (replicate ``stream``) with its counterfactual outcomes."""
    rng = spec.rng(stream)
    E, e_names, W, w_names, sizes, UY, risk = _POPULATIONS[spec.scenario](rng, spec, spec.n_clusters)
    arm, pair_ids = _randomize_pairs(rng, E[:, e_names.index("E2")])
    p1, p0 = risk(1.0), risk(0.0)
    y1 = (UY < p1).astype(float)
    y0 = (UY < p0).astype(float)
    a = arm[np.repeat(np.arange(spec.n_clusters), sizes)]
    y = np.where(a == 1, y1, y0)
    trial = TrialData(arm=arm, sizes=sizes, y=y, cluster_covariates=E, individual_covariates=W,
                      cluster_covariate_names=e_names, individual_covariate_names=w_names,
                      pair_ids=pair_ids)
    return trial, CounterfactualStore(y1=y1, y0=y0, p1=p1, p0=p0)


def generate_sim1(spec: ScenarioSpec, stream: int = 0):
    return generate(replace(spec, scenario="sim1"), stream)


def generate_sim2(spec: ScenarioSpec, stream: int = 0):
    return generate(replace(spec, scenario="sim2"), stream)


def compute_truth(spec: ScenarioSpec, population: int | None = None) -> ScenarioTruth:
    """True treatment-specific means from a large counterfactual population.

    Arithmetic means use the counterfactual outcomes. The geometric-mean
    ratio uses each cluster's mean counterfactual risk, since finite clusters
    can have zero realized events.
    """
    if population is None:
        population = _TRUTH_POPULATION[spec.scenario]
    if population < 1000:
        raise ValueError("truth population must have at least 1000 clusters")
    rng = spec.rng(TRUTH_STREAM)
    _, _, _, _, sizes, UY, risk = _POPULATIONS[spec.scenario](rng, spec, population)
    p1, p0 = risk(1.0), risk(0.0)
    y1 = (UY < p1).astype(float)
    y0 = (UY < p0).astype(float)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    def cluster_means(v):
        return np.add.reduceat(v, starts) / sizes

    geometric = np.exp(np.mean(np.log(cluster_means(p1))) - np.mean(np.log(cluster_means(p0))))
    return ScenarioTruth(
        cluster_mean1=float(cluster_means(y1).mean()),
        cluster_mean0=float(cluster_means(y0).mean()),
        individual_mean1=float(y1.mean()),
        individual_mean0=float(y0.mean()),
        geometric_ratio=float(geometric),
    )
