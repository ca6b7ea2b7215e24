"""Scikit-learn style estimator objects and a name registry.

Every estimator takes a :class:`~crtmethods.data.TrialData` as ``X`` in
``fit`` and stores the :class:`~crtmethods.tmle.EstimateResult` as
``result_``. Parameters are plain values so that ``get_params`` /
``set_params`` / ``clone`` work and configurations serialize to JSON.
"""

from __future__ import annotations

from typing import Any

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import classical
from .data import EffectTarget, TrialData
from .tmle import FitSpec, Flavor, run_tmle


def check_trial(X, require_binary: bool = False, require_pairs: bool = False) -> TrialData:
    """Validate estimator input and return it as :class:`TrialData`."""
    if not isinstance(X, TrialData):
        raise TypeError(f"expected TrialData, got {type(X).__name__}")
    X.check_equal_allocation()
    if require_pairs and not X.is_matched:
        raise ValueError("matched analysis requires pair ids")
    if require_binary and not ((X.y == 0) | (X.y == 1)).all():
        raise ValueError("this estimator requires binary outcomes")
    return X


def _candidates(value) -> tuple:
    if value is None:
        return ((),)
    out = []
    for s in value:
        if isinstance(s, str):
            out.append(tuple(n for n in s.split("+") if n))
        else:
            out.append(tuple(s))
    return tuple(out)


class TrialEstimator(BaseEstimator):
    """Base class: ``fit`` runs the estimator, results are exposed as attributes."""

    #: whether the estimand depends on the ``level`` / ``scale`` parameters
    targetable = False

    def fit(self, X, y=None):
        trial = check_trial(X, require_pairs=bool(getattr(self, "matched", False)))
        self.result_ = self._estimate(trial)
        r = self.result_
        self.estimate_ = r.estimate
        self.se_ = r.se
        self.ci_ = r.ci
        self.p_value_ = r.p_value
        self.selected_ = r.selected
        return self

    def _estimate(self, trial: TrialData):
        raise NotImplementedError

    def summary(self) -> dict:
        check_is_fitted(self, "result_")
        return self.result_.to_dict()


class _TMLEBase(TrialEstimator):
    targetable = True
    flavor: Flavor

    def __init__(self, outcome_candidates=None, propensity_candidates=None, adaptive=True,
                 cv="loco", level="cluster", scale="ratio", matched=False, label=None):
        self.outcome_candidates = outcome_candidates
        self.propensity_candidates = propensity_candidates
        self.adaptive = adaptive
        self.cv = cv
        self.level = level
        self.scale = scale
        self.matched = matched
        self.label = label

    def fit_spec(self) -> FitSpec:
        q = _candidates(self.outcome_candidates)
        g = _candidates(self.propensity_candidates)
        if not self.adaptive:
            return FitSpec((q[0],), (g[0],), adaptive=False, cv=self.cv)
        if () not in q:
            q = ((),) + q
        if () not in g:
            g = ((),) + g
        return FitSpec(q, g, adaptive=True, cv=self.cv)

    def _estimate(self, trial):
        return run_tmle(trial, self.fit_spec(), EffectTarget(self.level, self.scale),
                        self.flavor, self.matched, self.label)


class ClusterTMLE(_TMLEBase):
    """TMLE on cluster-level summaries.

    Parameters
    ----------
    outcome_candidates, propensity_candidates : list of covariate sets
        Each set is a sequence of names or a ``"+"``-joined string. The empty
        set is added automatically in adaptive mode.
    adaptive : bool, default=True
        Choose the sets by cross-validation; otherwise use the first of each.
    cv : {"loco", "lopo"}
        Leave-one-cluster-out or leave-one-pair-out folds.
    level : {"cluster", "individual"}
    scale : {"ratio", "difference"}
    matched : bool
        Pair-preserving variance with ``J/2 - 1`` degrees of freedom.
    label : str, optional
    """

    flavor = Flavor.CLUSTER


class HierarchicalTMLE(_TMLEBase):
    """TMLE on pooled participant data; see :class:`ClusterTMLE` for parameters."""

    flavor = Flavor.HIERARCHICAL


class HybridTMLE(_TMLEBase):
    """Cluster-level TMLE seeded by aggregated participant-level fits."""

    flavor = Flavor.HYBRID


class Unadjusted(TrialEstimator):
    targetable = True

    def __init__(self, level="cluster", scale="ratio", matched=False, label=None):
        self.level = level
        self.scale = scale
        self.matched = matched
        self.label = label

    def _estimate(self, trial):
        r = classical.unadjusted(trial, EffectTarget(self.level, self.scale), matched=self.matched)
        return _relabel(r, self.label)


class GeometricTTest(TrialEstimator):
    """Student's t-test on log cluster-level outcomes (ratio of geometric means)."""

    def __init__(self, matched=False, label=None):
        self.matched = matched
        self.label = label

    def _estimate(self, trial):
        return _relabel(classical.geometric_ratio_ttest(trial, self.matched), self.label)


class CARE(TrialEstimator):
    """Covariate-adjusted ratio-residuals with a t-test on the log scale."""

    def __init__(self, covariates=(), matched=False, label=None):
        self.covariates = covariates
        self.matched = matched
        self.label = label

    def _estimate(self, trial):
        check_trial(trial, require_binary=True)
        return _relabel(classical.care(trial, tuple(self.covariates), self.matched), self.label)


class GEE(TrialEstimator):
    """GEE with sandwich variance and optional Fay-Graubard correction."""

    def __init__(self, link="log", correlation="independence", covariates=(), fg_bound=0.75,
                 variance=None, marginal=False, label=None):
        self.link = link
        self.correlation = correlation
        self.covariates = covariates
        self.fg_bound = fg_bound
        self.variance = variance
        self.marginal = marginal
        self.label = label

    def gee_spec(self) -> classical.GeeSpec:
        return classical.GeeSpec(self.link, self.correlation, tuple(self.covariates),
                                 self.fg_bound, self.variance)

    def _estimate(self, trial):
        return _relabel(classical.gee(trial, self.gee_spec(), self.marginal), self.label)


class AugmentedGEE(TrialEstimator):
    """Marginal GEE augmented with conditional arm-specific regressions."""

    def __init__(self, link="log", correlation="independence", covariates=(), fg_bound=0.75,
                 variance=None, stratified=True, label=None):
        self.link = link
        self.correlation = correlation
        self.covariates = covariates
        self.fg_bound = fg_bound
        self.variance = variance
        self.stratified = stratified
        self.label = label

    def _estimate(self, trial):
        spec = classical.GeeSpec(self.link, self.correlation, tuple(self.covariates),
                                 self.fg_bound, self.variance, self.stratified)
        return _relabel(classical.aug_gee(trial, spec), self.label)


def _relabel(result, label):
    if label is None:
        return result
    from dataclasses import replace
    return replace(result, label=label)


REGISTRY: dict[str, type[TrialEstimator]] = {
    "unadj": Unadjusted,
    "c-tmle": ClusterTMLE,
    "h-tmle": HierarchicalTMLE,
    "hybrid-tmle": HybridTMLE,
    "t-test": GeometricTTest,
    "care": CARE,
    "gee": GEE,
    "aug-gee": AugmentedGEE,
}

DEFAULT_LABELS = {
    "unadj": "Unadj", "c-tmle": "C-TMLE", "h-tmle": "H-TMLE", "hybrid-tmle": "Hybrid-TMLE",
    "t-test": "t-test", "care": "CARE", "gee": "GEE", "aug-gee": "A-GEE",
}


def make_estimator(config: dict[str, Any]) -> TrialEstimator:
    """Build an estimator from ``{"estimator": name, **params}``.

    Unknown names or parameters raise ``ValueError``.
    """
    config = dict(config)
    try:
        name = config.pop("estimator")
    except KeyError:
        raise ValueError("estimator config needs an 'estimator' key") from None
    if name not in REGISTRY:
        raise ValueError(f"unknown estimator {name!r}; choose from {sorted(REGISTRY)}")
    cls = REGISTRY[name]
    valid = cls().get_params()
    bad = sorted(set(config) - set(valid))
    if bad:
        raise ValueError(f"unknown parameters for {name}: {bad}")
    config.setdefault("label", DEFAULT_LABELS[name])
    return cls(**config)
