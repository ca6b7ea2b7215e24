"""Cluster-level, Hierarchical and Hybrid TMLE with Adaptive Prespecification.

All three flavors share one targeting core that works on generic *units*:
cluster rows for the cluster-level and Hybrid TMLE, pooled participants for
Hierarchical TMLE. Each unit carries a weight ``omega`` (summing to ``J``
over the trial) that selects the estimand:

=================  ===========================  ==========================
flavor             cluster-level target         individual-level target
=================  ===========================  ==========================
cluster / hybrid   ``1``                        ``J * N_j / N_T``
hierarchical       ``1 / N_j``                  ``J / N_T``
=================  ===========================  ==========================

The weights enter the working-model fits, the fluctuation, the plug-in mean
and the influence function, and unit-level influence values are summed
within clusters, so inference always treats the cluster as the independent
unit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import EffectTarget, Level, Scale, TrialData, cluster_outcomes
from .glm import GlmError, bound_predictions, fit_glm
from .inference import Contrast, InferenceError, delta_contrast

PROPENSITY_BOUNDS = (0.1, 0.9)


class TMLEError(RuntimeError):
    """The targeting step failed."""


class Flavor(str, enum.Enum):
    CLUSTER = "cluster"
    HIERARCHICAL = "hierarchical"
    HYBRID = "hybrid"


class CVScheme(str, enum.Enum):
    LEAVE_ONE_CLUSTER_OUT = "loco"
    LEAVE_ONE_PAIR_OUT = "lopo"


def _as_candidates(sets) -> tuple[tuple[str, ...], ...]:
    out = []
    for s in sets:
        if isinstance(s, str):
            s = (s,) if s else ()
        out.append(tuple(s))
    return tuple(out)


@dataclass(frozen=True)
class FitSpec:
    """Adjustment specification.

    In adaptive mode both candidate lists must contain the empty set, which
    stands for no adjustment (outcome) or the known propensity of 1/2. In
    fixed mode only the first entry of each list is used.
    """

    outcome_candidates: tuple = ((),)
    propensity_candidates: tuple = ((),)
    adaptive: bool = True
    cv: CVScheme = CVScheme.LEAVE_ONE_CLUSTER_OUT

    def __post_init__(self):
        object.__setattr__(self, "outcome_candidates", _as_candidates(self.outcome_candidates))
        object.__setattr__(self, "propensity_candidates", _as_candidates(self.propensity_candidates))
        object.__setattr__(self, "cv", CVScheme(self.cv))
        if not self.outcome_candidates or not self.propensity_candidates:
            raise ValueError("candidate lists must not be empty")
        if self.adaptive and (() not in self.outcome_candidates
                              or () not in self.propensity_candidates):
            raise ValueError("the empty adjustment set must be a candidate in adaptive mode")

    @classmethod
    def fixed(cls, outcome: Sequence[str] = (), propensity: Sequence[str] = ()) -> "FitSpec":
        return cls((tuple(outcome),), (tuple(propensity),), adaptive=False)

    @classmethod
    def single_covariates(cls, names: Sequence[str], propensity: Sequence[str] | None = None,
                          cv: CVScheme | str = CVScheme.LEAVE_ONE_CLUSTER_OUT) -> "FitSpec":
        """Adaptive spec choosing among ``{}`` and each single covariate."""
        props = names if propensity is None else propensity
        return cls(((),) + tuple((n,) for n in names), ((),) + tuple((n,) for n in props),
                   adaptive=True, cv=cv)


@dataclass(frozen=True)
class Selection:
    outcome: tuple[str, ...]
    propensity: tuple[str, ...]
    outcome_losses: dict = field(default_factory=dict, compare=False)
    propensity_losses: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class EstimateResult:
    """Point estimates, cluster-level influence values and inference."""

    label: str
    target: EffectTarget
    psi1: float
    psi0: float
    contrast: Contrast
    influence1: np.ndarray
    influence0: np.ndarray
    influence: np.ndarray
    selected: tuple = ((), ())
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def estimate(self) -> float:
        return self.contrast.estimate

    @property
    def se(self) -> float:
        return self.contrast.se

    @property
    def ci(self) -> tuple[float, float]:
        return self.contrast.ci

    @property
    def p_value(self) -> float:
        return self.contrast.p_value

    @property
    def df(self) -> int:
        return self.contrast.df

    def to_dict(self) -> dict:
        return {
            "estimator": self.label,
            "level": self.target.level.value,
            "scale": self.target.scale.value,
            "psi1": self.psi1,
            "psi0": self.psi0,
            "estimate": self.estimate,
            "se": self.se,
            "df": self.df,
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "p_value": self.p_value,
            "selected_outcome": list(self.selected[0]),
            "selected_propensity": list(self.selected[1]),
            "influence": [float(v) for v in self.influence],
        }


# -- fluctuation ----------------------------------------------------------------

@dataclass(frozen=True)
class Fluctuation:
    eps1: float
    eps0: float
    mu1: np.ndarray
    mu0: np.ndarray

    def observed(self, arm: np.ndarray) -> np.ndarray:
        return np.where(arm == 1, self.mu1, self.mu0)


def _solve_epsilon(offset, h, y, w, tol=1e-12, max_iter=100) -> float:
    """1-d logistic regression of ``y`` on ``h`` with an offset, no intercept."""
    if h.size == 0:
        return 0.0
    wh = w * h
    scale = max(1.0, float(np.abs(wh).sum()))
    eps = 0.0
    mu = expit(offset)
    score = float(wh @ (y - mu))
    if abs(score) <= tol * scale:
        return 0.0

    def loglik(e):
        m = np.clip(expit(offset + e * h), 1e-300, 1 - 1e-16)
        return float(w @ (y * np.log(m) + (1 - y) * np.log1p(-m)))

    ll = loglik(eps)
    for _ in range(max_iter):
        info = float((wh * h) @ (mu * (1 - mu)))
        if info <= 0:
            break
        step = score / info
        new = eps + step
        ll_new = loglik(new)
        halvings = 0
        while ll_new < ll - 1e-12 * abs(ll) and halvings < 30:
            step /= 2
            new = eps + step
            ll_new = loglik(new)
            halvings += 1
        eps, ll = new, ll_new
        mu = expit(offset + eps * h)
        score = float(wh @ (y - mu))
        if abs(score) <= tol * scale:
            return eps
        if abs(eps) > 1e3:
            break
    raise TMLEError(f"fluctuation did not converge (epsilon={eps:.3g}, score={score:.3g})")


def _epsilons(off1, off0, arm, pi1, y, w) -> tuple[float, float]:
    t = arm == 1
    c = ~t
    eps1 = _solve_epsilon(off1[t], 1.0 / pi1[t], y[t], w[t])
    eps0 = _solve_epsilon(off0[c], 1.0 / (1.0 - pi1[c]), y[c], w[c])
    return eps1, eps0


def fluctuate(mu1, mu0, arm, pi1, y, weights=None) -> Fluctuation:
    """Logistic fluctuation of initial predictions along the clever covariates.

    Regresses ``y`` on ``H(1) = 1{A=1}/pi1`` and ``H(0) = 1{A=0}/(1-pi1)``
    with offset ``logit(mu(A))`` and no intercept, then updates both
    counterfactual predictions. ``mu1``/``mu0`` must lie in (0, 1).
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    arm = np.asarray(arm)
    pi1 = np.broadcast_to(np.asarray(pi1, dtype=float), mu1.shape)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if (mu1 <= 0).any() or (mu1 >= 1).any() or (mu0 <= 0).any() or (mu0 >= 1).any():
        raise TMLEError("initial predictions must lie strictly inside (0, 1)")
    off1, off0 = logit(mu1), logit(mu0)
    eps1, eps0 = _epsilons(off1, off0, arm, pi1, y, w)
    star1 = expit(off1 + eps1 / pi1)
    star0 = expit(off0 + eps0 / (1.0 - pi1))
    return Fluctuation(eps1, eps0, star1, star0)


# -- units -------------------------------------------------------------------

class _Units:
    """Rows entering the targeting step, plus what is needed to fit on them."""

    def __init__(self, trial: TrialData, flavor: Flavor, level: Level):
        self.trial = trial
        self.flavor = flavor
        J = trial.n_clusters
        if flavor is Flavor.HIERARCHICAL:
            y = trial.y
            self.arm = trial.arm[trial.cluster_index]
            self.group = trial.cluster_index
            if level is Level.CLUSTER:
                self.omega = 1.0 / trial.sizes[trial.cluster_index].astype(float)
            else:
                self.omega = np.full(trial.n_total, J / trial.n_total)
            self._design = trial.individual_design
        else:
            y = cluster_outcomes(trial)
            self.arm = trial.arm
            self.group = np.arange(J)
            if level is Level.CLUSTER:
                self.omega = np.ones(J)
            else:
                self.omega = J / trial.n_total * trial.sizes.astype(float)
            self._design = trial.cluster_design
        self.n_groups = J
        self.omega_level = level
        # outcomes are mapped into [0, 1] for the logistic fluctuation
        lo, hi = float(trial.y.min()), float(trial.y.max())
        self.bounded = lo >= 0.0 and hi <= 1.0
        if self.bounded:
            self.shift, self.span = 0.0, 1.0
        else:
            self.shift, self.span = lo, (hi - lo) if hi > lo else 1.0
        self.y = (y - self.shift) / self.span
        self._cache: dict = {}
        self._group_rows = None

    def design(self, names: tuple[str, ...]) -> np.ndarray:
        if names not in self._cache:
            self._cache[names] = self._design(names)
        return self._cache[names]

    def rows_of(self, groups) -> np.ndarray:
        if self._group_rows is None:
            starts = np.searchsorted(self.group, np.arange(self.n_groups))
            ends = np.append(starts[1:], self.group.size)
            self._group_rows = [np.arange(s, e) for s, e in zip(starts, ends)]
        return np.concatenate([self._group_rows[g] for g in groups])


def _weighted_arm_means(y, arm, w):
    m1 = float(w[arm == 1] @ y[arm == 1] / w[arm == 1].sum())
    m0 = float(w[arm == 0] @ y[arm == 0] / w[arm == 0].sum())
    return m1, m0


class _OutcomeModel:
    """Main-terms regression of the unit outcome on arm and covariates."""

    def __init__(self, units: _Units):
        self.units = units

    def fit_predict(self, names, train) -> tuple[np.ndarray, np.ndarray, bool]:
        u = self.units
        y, arm, w = u.y[train], u.arm[train], u.omega[train]
        n = u.y.size
        if not names:
            m1, m0 = _weighted_arm_means(y, arm, w)
            return np.full(n, m1), np.full(n, m0), True
        X = u.design(names)
        Z = np.column_stack([u.arm, X])
        link = "logit" if u.bounded else "identity"
        fit = fit_glm(Z[train], y, link=link, weights=w, arm_column=0, warn=False)
        return fit.predict(Z, at_arm=1), fit.predict(Z, at_arm=0), fit.converged


class _AggregatedOutcomeModel:
    """Hybrid initial fit: pooled participant regression averaged within clusters."""

    def __init__(self, units: _Units):
        self.units = units
        trial = units.trial
        self.trial = trial
        self.ind_arm = trial.arm[trial.cluster_index]
        lo, span = units.shift, units.span
        self.ind_y = (trial.y - lo) / span
        self.alpha = 1.0 / trial.sizes[trial.cluster_index].astype(float)
        # participants are weighted as in the hierarchical TMLE for the same target
        if units.omega_level is Level.CLUSTER:
            self.weights = self.alpha
        else:
            self.weights = np.full(trial.n_total, trial.n_clusters / trial.n_total)
        self._design_cache: dict = {}

    def fit_predict(self, names, train_groups_mask) -> tuple[np.ndarray, np.ndarray, bool]:
        trial = self.trial
        train = train_groups_mask[trial.cluster_index]
        if names not in self._design_cache:
            self._design_cache[names] = np.column_stack(
                [self.ind_arm, trial.individual_design(names)])
        Z = self._design_cache[names]
        w = self.weights[train]
        if not names:
            m1, m0 = _weighted_arm_means(self.ind_y[train], self.ind_arm[train], w)
            J = trial.n_clusters
            return np.full(J, m1), np.full(J, m0), True
        link = "logit" if self.units.bounded else "identity"
        fit = fit_glm(Z[train], self.ind_y[train], link=link, weights=w, arm_column=0,
                      warn=False)
        m1 = trial.cluster_sum(self.alpha * fit.predict(Z, at_arm=1))
        m0 = trial.cluster_sum(self.alpha * fit.predict(Z, at_arm=0))
        return m1, m0, fit.converged


@dataclass
class _Targeted:
    mu1: np.ndarray
    mu0: np.ndarray
    pi1: np.ndarray
    psi1: float
    psi0: float
    fluctuation: Fluctuation
    converged: bool


class _Engine:
    """Fits the TMLE pipeline on a training subset and evaluates influence values."""

    def __init__(self, trial: TrialData, flavor: Flavor, target: EffectTarget):
        self.trial = trial
        self.flavor = Flavor(flavor)
        self.target = target
        units = _Units(trial, self.flavor, target.level)
        self.units = units
        if self.flavor is Flavor.HYBRID:
            self.outcome_model = _AggregatedOutcomeModel(units)
        else:
            self.outcome_model = _OutcomeModel(units)
        self._q_cache: dict = {}

    def _initial(self, names, fold_key, train):
        key = (names, fold_key)
        if key not in self._q_cache:
            self._q_cache[key] = self.outcome_model.fit_predict(names, train)
        return self._q_cache[key]

    def _propensity(self, names, train):
        u = self.units
        n = u.y.size
        if not names:
            return np.full(n, 0.5), True
        X = u.design(names)
        fit = fit_glm(X[train], u.arm[train].astype(float), link="logit",
                      weights=u.omega[train], warn=False)
        return np.clip(fit.predict(X), *PROPENSITY_BOUNDS), fit.converged

    def fit(self, q_names, g_names, train=None, fold_key=None) -> _Targeted:
        u = self.units
        if train is None:
            train = np.ones(u.y.size, dtype=bool)
        m1, m0, q_ok = self._initial(q_names, fold_key, train)
        off1 = logit(bound_predictions(m1))
        off0 = logit(bound_predictions(m0))
        pi1, g_ok = self._propensity(g_names, train)
        w = u.omega[train]
        eps1, eps0 = _epsilons(off1[train], off0[train], u.arm[train], pi1[train],
                               u.y[train], w)
        star1 = expit(off1 + eps1 / pi1)
        star0 = expit(off0 + eps0 / (1.0 - pi1))
        psi1 = float(w @ star1[train] / w.sum())
        psi0 = float(w @ star0[train] / w.sum())
        return _Targeted(star1, star0, pi1, psi1, psi0,
                         Fluctuation(eps1, eps0, star1, star0), q_ok and g_ok)

    def unit_influence(self, t: _Targeted, rows=None):
        """Unit-level influence values for both arms (on the [0, 1] scale)."""
        u = self.units
        if rows is None:
            rows = slice(None)
        arm, y, w = u.arm[rows], u.y[rows], u.omega[rows]
        s1, s0, pi1 = t.mu1[rows], t.mu0[rows], t.pi1[rows]
        resid = y - np.where(arm == 1, s1, s0)
        d1 = w * ((arm == 1) / pi1 * resid + s1 - t.psi1)
        d0 = w * ((arm == 0) / (1.0 - pi1) * resid + s0 - t.psi0)
        return d1, d0

    def cluster_influence(self, t: _Targeted):
        d1, d0 = self.unit_influence(t)
        J = self.units.n_groups
        g = self.units.group
        return np.bincount(g, d1, J), np.bincount(g, d0, J)

    def score_residuals(self, t: _Targeted) -> tuple[float, float]:
        u = self.units
        resid = u.y - np.where(u.arm == 1, t.mu1, t.mu0)
        s1 = float(u.omega @ ((u.arm == 1) / t.pi1 * resid))
        s0 = float(u.omega @ ((u.arm == 0) / (1.0 - t.pi1) * resid))
        return s1 * u.span, s0 * u.span

    # -- cross-validation ---------------------------------------------------
    def folds(self, scheme: CVScheme) -> list[np.ndarray]:
        J = self.trial.n_clusters
        if scheme is CVScheme.LEAVE_ONE_PAIR_OUT:
            if self.trial.pair_ids is None:
                raise ValueError("leave-one-pair-out needs pair ids")
            pairs = self.trial.pair_ids
            return [np.flatnonzero(pairs == p) for p in np.unique(pairs)]
        return [np.array([j]) for j in range(J)]

    def cv_loss(self, q_names, g_names, scheme: CVScheme, matched: bool) -> float:
        u = self.units
        J = u.n_groups
        contrast_if = np.empty(J)
        for k, held in enumerate(self.folds(scheme)):
            held_mask = np.zeros(J, dtype=bool)
            held_mask[held] = True
            train = ~held_mask[u.group]
            try:
                t = self.fit(q_names, g_names, train=train, fold_key=k)
                rows = u.rows_of(held)
                d1, d0 = self.unit_influence(t, rows)
                g = u.group[rows]
                for j in held:
                    sel = g == j
                    a1 = float(d1[sel].sum()) * u.span
                    a0 = float(d0[sel].sum()) * u.span
                    p1 = u.shift + u.span * t.psi1
                    p0 = u.shift + u.span * t.psi0
                    if self.target.scale is Scale.RATIO:
                        contrast_if[j] = a1 / p1 - a0 / p0
                    else:
                        contrast_if[j] = a1 - a0
            except (TMLEError, GlmError, np.linalg.LinAlgError, FloatingPointError):
                return np.inf
            if not t.converged:
                return np.inf
        if not np.isfinite(contrast_if).all():
            return np.inf
        if matched:
            pairs = self.trial.pair_ids
            _, inverse = np.unique(pairs, return_inverse=True)
            pair_vals = np.bincount(inverse, contrast_if) / 2.0
            return float(pair_vals.var(ddof=1))
        return float(contrast_if.var(ddof=1))


def _pick(losses: dict) -> tuple[str, ...]:
    best = min(losses.values())
    if not np.isfinite(best):
        return ()
    tied = [c for c, v in losses.items() if v <= best + 1e-12 * abs(best)]
    return min(tied, key=lambda c: (len(c), c))


def _check_names(trial: TrialData, spec: FitSpec):
    known = set(trial.covariate_names)
    for cand in spec.outcome_candidates + spec.propensity_candidates:
        for name in cand:
            if name not in known:
                raise KeyError(f"unknown covariate {name!r}; available: {sorted(known)}")


def _adaptive_select(engine: _Engine, spec: FitSpec, matched: bool) -> Selection:
    scheme = spec.cv
    if matched and scheme is CVScheme.LEAVE_ONE_CLUSTER_OUT and engine.trial.is_matched:
        scheme = CVScheme.LEAVE_ONE_PAIR_OUT
    q_losses = {c: engine.cv_loss(c, (), scheme, matched) for c in spec.outcome_candidates}
    q_best = _pick(q_losses)
    g_losses = {}
    for c in spec.propensity_candidates:
        g_losses[c] = q_losses[q_best] if not c else engine.cv_loss(q_best, c, scheme, matched)
    g_best = _pick(g_losses)
    return Selection(q_best, g_best, q_losses, g_losses)


def adaptive_prespec(trial: TrialData, fit_spec: FitSpec, target=EffectTarget(),
                     flavor: Flavor | str = Flavor.CLUSTER, matched: bool = False) -> Selection:
    """Cross-validated choice of outcome and propensity adjustment sets.

    Stage 1 picks the outcome regression minimizing the cross-validated
    variance of the contrast influence function with the known propensity
    1/2; stage 2 picks the propensity model that further minimizes it given
    the stage-1 winner. Ratios are scored on the log scale. Failed fits score
    infinity; ties go to the smaller set, then by name.
    """
    target = EffectTarget.coerce(target)
    _check_names(trial, fit_spec)
    engine = _Engine(trial, Flavor(flavor), target)
    return _adaptive_select(engine, fit_spec, matched)


_LABELS = {Flavor.CLUSTER: "C-TMLE", Flavor.HIERARCHICAL: "H-TMLE", Flavor.HYBRID: "Hybrid-TMLE"}


def run_tmle(trial: TrialData, fit_spec: FitSpec | None = None, target=EffectTarget(),
             flavor: Flavor | str = Flavor.CLUSTER, matched: bool = False,
             label: str | None = None) -> EstimateResult:
    """Fit one TMLE flavor for the requested target and return its inference."""
    flavor = Flavor(flavor)
    target = EffectTarget.coerce(target)
    fit_spec = FitSpec() if fit_spec is None else fit_spec
    trial.check_equal_allocation()
    if matched and not trial.is_matched:
        raise InferenceError("matched inference requires pair ids")
    _check_names(trial, fit_spec)
    engine = _Engine(trial, flavor, target)
    if fit_spec.adaptive and (len(fit_spec.outcome_candidates) > 1
                              or len(fit_spec.propensity_candidates) > 1):
        sel = _adaptive_select(engine, fit_spec, matched)
    else:
        sel = Selection(fit_spec.outcome_candidates[0], fit_spec.propensity_candidates[0])
    t = engine.fit(sel.outcome, sel.propensity, fold_key="full")
    if not t.converged:
        raise GlmError(f"working model did not converge for {sel.outcome}/{sel.propensity}")
    u = engine.units
    d1, d0 = engine.cluster_influence(t)
    d1, d0 = d1 * u.span, d0 * u.span
    psi1 = u.shift + u.span * t.psi1
    psi0 = u.shift + u.span * t.psi0
    contrast, influence = delta_contrast(
        psi1, psi0, d1, d0, target.scale,
        pair_ids=trial.pair_ids if matched else None)
    diagnostics = {
        "eps1": t.fluctuation.eps1, "eps0": t.fluctuation.eps0,
        "score_residuals": engine.score_residuals(t),
        "outcome_losses": sel.outcome_losses, "propensity_losses": sel.propensity_losses,
    }
    return EstimateResult(label or _LABELS[flavor], target, psi1, psi0, contrast, d1, d0,
                          influence, (sel.outcome, sel.propensity), diagnostics)


def cluster_tmle(trial, fit_spec=None, target=EffectTarget(), matched=False) -> EstimateResult:
    """TMLE on cluster-level summaries (``Y^c``, ``E``, ``W^c``)."""
    return run_tmle(trial, fit_spec, target, Flavor.CLUSTER, matched)


def hierarchical_tmle(trial, fit_spec=None, target=EffectTarget(), matched=False) -> EstimateResult:
    """TMLE on pooled participant data with cluster-aggregated influence values."""
    return run_tmle(trial, fit_spec, target, Flavor.HIERARCHICAL, matched)


def hybrid_tmle(trial, fit_spec=None, target=EffectTarget(), matched=False) -> EstimateResult:
    """Cluster-level TMLE whose initial fit averages a pooled participant regression."""
    return run_tmle(trial, fit_spec, target, Flavor.HYBRID, matched)
