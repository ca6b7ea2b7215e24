"""Hierarchical trial data, cluster-level aggregation and weight schemes.

Individuals are stored contiguously by cluster in columnar arrays so that
aggregation is a single ``np.add.reduceat`` call. ``ClusterRecord`` and
``IndividualRecord`` give a record-oriented view for construction and I/O.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class TrialDataError(ValueError):
    """Raised when trial data violate the structural invariants."""


class Level(str, enum.Enum):
    CLUSTER = "cluster"
    INDIVIDUAL = "individual"


class Scale(str, enum.Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"


@dataclass(frozen=True)
class EffectTarget:
    """Which estimand is sought: effect level and contrast scale."""

    level: Level = Level.CLUSTER
    scale: Scale = Scale.RATIO

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        object.__setattr__(self, "scale", Scale(self.scale))

    @classmethod
    def coerce(cls, target) -> "EffectTarget":
        if isinstance(target, EffectTarget):
            return target
        if isinstance(target, (str, Level)):
            return cls(level=target)
        if isinstance(target, tuple):
            return cls(*target)
        raise TypeError(f"cannot interpret {target!r} as an EffectTarget")


@dataclass(frozen=True)
class IndividualRecord:
    covariates: tuple[float, ...]
    outcome: float


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: int
    arm: int
    covariates: tuple[float, ...]
    individuals: tuple[IndividualRecord, ...]
    pair_id: int | None = None

    @property
    def size(self) -> int:
        return len(self.individuals)


@dataclass(frozen=True)
class WeightScheme:
    """Per-individual weights ``alpha`` and per-cluster weights ``gamma``.

    ``gamma`` sums to the number of clusters, so ``mean(gamma * y_cluster)``
    is the target treatment-specific mean.
    """

    alpha: np.ndarray
    gamma: np.ndarray


def _as_2d(values, n_rows: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return np.zeros((n_rows, 0))
    if arr.ndim == 1:
        arr = arr.reshape(n_rows, -1)
    if arr.shape[0] != n_rows:
        raise TrialDataError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    return arr


@dataclass(frozen=True, eq=False)
class TrialData:
    """Observed cluster randomized trial.

    Parameters
    ----------
    arm : array of shape (J,)
        Randomized arm of each cluster, 0 or 1.
    sizes : array of shape (J,)
        Number of individuals per cluster.
    y : array of shape (N_T,)
        Individual outcomes, ordered by cluster.
    cluster_covariates : array of shape (J, p_E)
    individual_covariates : array of shape (N_T, p_W)
    cluster_covariate_names, individual_covariate_names : sequence of str
    cluster_ids : array of shape (J,), optional
    pair_ids : array of shape (J,), optional
        Randomization pair of each cluster. Omitted for unmatched designs.
    """

    arm: np.ndarray
    sizes: np.ndarray
    y: np.ndarray
    cluster_covariates: np.ndarray = None
    individual_covariates: np.ndarray = None
    cluster_covariate_names: tuple[str, ...] = ()
    individual_covariate_names: tuple[str, ...] = ()
    cluster_ids: np.ndarray = None
    pair_ids: np.ndarray | None = None
    _index: np.ndarray = field(init=False, repr=False)
    _starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arm = np.asarray(self.arm)
        sizes = np.asarray(self.sizes)
        J = arm.shape[0]
        if J < 2:
            raise TrialDataError("a trial needs at least two clusters")
        if not np.isin(arm, (0, 1)).all():
            raise TrialDataError("arm must be 0 or 1 for every cluster")
        if sizes.shape != (J,) or (sizes < 1).any():
            raise TrialDataError("every cluster needs at least one individual")
        arm = arm.astype(int)
        sizes = sizes.astype(int)
        n_total = int(sizes.sum())
        y = np.asarray(self.y, dtype=float)
        if y.shape != (n_total,):
            raise TrialDataError(f"y has length {y.size}, expected {n_total}")
        if not np.isfinite(y).all():
            raise TrialDataError("outcomes must be finite")
        E = _as_2d(self.cluster_covariates if self.cluster_covariates is not None else [],
                   J, "cluster_covariates")
        W = _as_2d(self.individual_covariates if self.individual_covariates is not None else [],
                   n_total, "individual_covariates")
        e_names = tuple(self.cluster_covariate_names)
        w_names = tuple(self.individual_covariate_names)
        if len(e_names) != E.shape[1] or len(w_names) != W.shape[1]:
            raise TrialDataError("covariate names do not match covariate dimensions")
        if len(set(e_names + w_names)) != len(e_names) + len(w_names):
            raise TrialDataError("covariate names must be unique")
        if not (np.isfinite(E).all() and np.isfinite(W).all()):
            raise TrialDataError("covariates must be finite")
        ids = (np.arange(J) if self.cluster_ids is None
               else np.asarray(self.cluster_ids).astype(int))
        if ids.shape != (J,) or len(np.unique(ids)) != J:
            raise TrialDataError("cluster ids must be unique")
        pairs = self.pair_ids
        if pairs is not None:
            pairs = np.asarray(pairs).astype(int)
            if pairs.shape != (J,):
                raise TrialDataError("pair_ids must have one entry per cluster")
            for p in np.unique(pairs):
                members = np.flatnonzero(pairs == p)
                if len(members) != 2 or arm[members].sum() != 1:
                    raise TrialDataError(
                        f"pair {p} must contain exactly two clusters in opposite arms")
        for name, value in [("arm", arm), ("sizes", sizes), ("y", y),
                            ("cluster_covariates", E), ("individual_covariates", W),
                            ("cluster_covariate_names", e_names),
                            ("individual_covariate_names", w_names),
                            ("cluster_ids", ids), ("pair_ids", pairs)]:
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        index = np.repeat(np.arange(J), sizes)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        index.setflags(write=False)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_starts", starts)

    # -- basic shape -------------------------------------------------------
    @property
    def n_clusters(self) -> int:
        return self.arm.shape[0]

    @property
    def n_total(self) -> int:
        return self.y.shape[0]

    @property
    def cluster_index(self) -> np.ndarray:
        """Cluster position of every individual."""
        return self._index

    @property
    def is_matched(self) -> bool:
        return self.pair_ids is not None

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.cluster_covariate_names + self.individual_covariate_names

    def cluster_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum a per-individual array within clusters."""
        return np.add.reduceat(np.asarray(values, dtype=float), self._starts, axis=0)

    def check_equal_allocation(self) -> None:
        n1 = int(self.arm.sum())
        if 2 * n1 != self.n_clusters:
            raise TrialDataError(
                f"equal allocation required, got {n1} treated of {self.n_clusters} clusters")

    # -- record views ------------------------------------------------------
    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterRecord],
                      cluster_covariate_names: Iterable[str] = (),
                      individual_covariate_names: Iterable[str] = ()) -> "TrialData":
        clusters = list(clusters)
        e_names = tuple(cluster_covariate_names)
        w_names = tuple(individual_covariate_names)
        pair_list = [c.pair_id for c in clusters]
        if any(p is None for p in pair_list) and not all(p is None for p in pair_list):
            raise TrialDataError("pair ids must be given for all clusters or none")
        rows = [ind for c in clusters for ind in c.individuals]
        for c in clusters:
            if len(c.covariates) != len(e_names):
                raise TrialDataError(f"cluster {c.cluster_id} has wrong covariate length")
        for ind in rows:
            if len(ind.covariates) != len(w_names):
                raise TrialDataError("individual covariate vector has wrong length")
        return cls(
            arm=np.array([c.arm for c in clusters]),
            sizes=np.array([c.size for c in clusters]),
            y=np.array([ind.outcome for ind in rows], dtype=float),
            cluster_covariates=np.array([c.covariates for c in clusters], dtype=float),
            individual_covariates=np.array([ind.covariates for ind in rows], dtype=float),
            cluster_covariate_names=e_names,
            individual_covariate_names=w_names,
            cluster_ids=np.array([c.cluster_id for c in clusters]),
            pair_ids=None if pair_list[0] is None else np.array(pair_list),
        )

    @property
    def clusters(self) -> list[ClusterRecord]:
        out = []
        for j in range(self.n_clusters):
            lo = self._starts[j]
            hi = lo + self.sizes[j]
            inds = tuple(IndividualRecord(tuple(self.individual_covariates[i]), float(self.y[i]))
                         for i in range(lo, hi))
            out.append(ClusterRecord(
                cluster_id=int(self.cluster_ids[j]), arm=int(self.arm[j]),
                covariates=tuple(self.cluster_covariates[j]), individuals=inds,
                pair_id=None if self.pair_ids is None else int(self.pair_ids[j])))
        return out

    def take(self, order: Sequence[int]) -> "TrialData":
        """Reorder (or subset) clusters, keeping individuals attached."""
        order = np.asarray(order, dtype=int)
        rows = np.concatenate([np.arange(self._starts[j], self._starts[j] + self.sizes[j])
                               for j in order])
        return TrialData(
            arm=self.arm[order], sizes=self.sizes[order], y=self.y[rows],
            cluster_covariates=self.cluster_covariates[order],
            individual_covariates=self.individual_covariates[rows],
            cluster_covariate_names=self.cluster_covariate_names,
            individual_covariate_names=self.individual_covariate_names,
            cluster_ids=self.cluster_ids[order],
            pair_ids=None if self.pair_ids is None else self.pair_ids[order],
        )

    def permute_within(self, rng: np.random.Generator) -> "TrialData":
        """Shuffle individuals inside every cluster."""
        rows = np.concatenate([self._starts[j] + rng.permutation(self.sizes[j])
                               for j in range(self.n_clusters)])
        return TrialData(
            arm=self.arm, sizes=self.sizes, y=self.y[rows],
            cluster_covariates=self.cluster_covariates,
            individual_covariates=self.individual_covariates[rows],
            cluster_covariate_names=self.cluster_covariate_names,
            individual_covariate_names=self.individual_covariate_names,
            cluster_ids=self.cluster_ids, pair_ids=self.pair_ids,
        )

    # -- covariate access --------------------------------------------------
    def cluster_design(self, names: Sequence[str]) -> np.ndarray:
        """Cluster-level columns: E as is, W replaced by within-cluster means."""
        summaries = None
        cols = []
        for name in names:
            if name in self.cluster_covariate_names:
                cols.append(self.cluster_covariates[:, self.cluster_covariate_names.index(name)])
            elif name in self.individual_covariate_names:
                if summaries is None:
                    summaries = covariate_summaries(self)
                cols.append(summaries[:, self.individual_covariate_names.index(name)])
            else:
                raise KeyError(f"unknown covariate {name!r}")
        return np.column_stack(cols) if cols else np.zeros((self.n_clusters, 0))

    def individual_design(self, names: Sequence[str]) -> np.ndarray:
        """Individual-level columns: W as is, E broadcast to members."""
        cols = []
        for name in names:
            if name in self.individual_covariate_names:
                cols.append(self.individual_covariates[:, self.individual_covariate_names.index(name)])
            elif name in self.cluster_covariate_names:
                col = self.cluster_covariates[:, self.cluster_covariate_names.index(name)]
                cols.append(col[self._index])
            else:
                raise KeyError(f"unknown covariate {name!r}")
        return np.column_stack(cols) if cols else np.zeros((self.n_total, 0))


# -- operations -------------------------------------------------------------

def weight_scheme(trial: TrialData, level: Level | str) -> WeightScheme:
    """Weights for cluster-mean outcomes targeting the given level.

    ``alpha`` is always ``1/N_j``. For the individual level
    ``gamma_j = (J/N_T) * N_j`` so that ``mean(gamma * Y^c)`` equals the pooled
    individual mean.
    """
    level = Level(level)
    sizes = trial.sizes.astype(float)
    alpha = 1.0 / sizes[trial.cluster_index]
    if level is Level.CLUSTER:
        gamma = np.ones(trial.n_clusters)
    else:
        gamma = trial.n_clusters / trial.n_total * sizes
    return WeightScheme(alpha=alpha, gamma=gamma)


def cluster_outcomes(trial: TrialData, scheme: WeightScheme | None = None) -> np.ndarray:
    """``Y^c_j = sum_i alpha_ij Y_ij`` for every cluster."""
    alpha = (1.0 / trial.sizes[trial.cluster_index]) if scheme is None else scheme.alpha
    return trial.cluster_sum(alpha * trial.y)


def cluster_outcome(cluster: ClusterRecord, scheme: WeightScheme | Sequence[float] | None = None) -> float:
    """Weighted sum of one cluster's outcomes (default weights ``1/N_j``)."""
    if cluster.size == 0:
        raise TrialDataError(f"cluster {cluster.cluster_id} is empty")
    y = np.array([ind.outcome for ind in cluster.individuals], dtype=float)
    if scheme is None:
        alpha = np.full(y.shape, 1.0 / y.size)
    else:
        alpha = np.asarray(scheme.alpha if isinstance(scheme, WeightScheme) else scheme, dtype=float)
        if alpha.shape != y.shape:
            raise TrialDataError("one weight per individual is required")
    return float(alpha @ y)


def pooled_mean(trial: TrialData, arm: int, target: EffectTarget | str = Level.CLUSTER) -> float:
    """Arm-specific mean at the cluster or individual level."""
    level = EffectTarget.coerce(target).level
    in_arm = trial.arm == arm
    if not in_arm.any():
        raise TrialDataError(f"no clusters in arm {arm}")
    if level is Level.CLUSTER:
        return float(cluster_outcomes(trial)[in_arm].mean())
    members = in_arm[trial.cluster_index]
    return float(trial.y[members].sum() / trial.sizes[in_arm].sum())


def covariate_summaries(trial: TrialData) -> np.ndarray:
    """Within-cluster means of the individual covariates, shape (J, p_W)."""
    if trial.individual_covariates.shape[1] == 0:
        return np.zeros((trial.n_clusters, 0))
    return trial.cluster_sum(trial.individual_covariates) / trial.sizes[:, None]
