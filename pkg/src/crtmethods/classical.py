"""Unadjusted contrasts, geometric-mean t-test, CARE, GEE and Augmented GEE."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EffectTarget, Level, Scale, TrialData, cluster_outcomes, pooled_mean, weight_scheme
from .glm import GlmError, fit_glm, inverse_link
from .inference import InferenceError, contrast_from_se, delta_contrast, paired_t, two_sample_t
from .tmle import EstimateResult


class EstimationError(ValueError):
    """The data do not support the requested estimator."""


# -- unadjusted ------------------------------------------------------------------

def unadjusted(trial: TrialData, target=EffectTarget(), scale: Scale | str | None = None,
               matched: bool = False) -> EstimateResult:
    """Contrast of arm-specific means at the cluster or individual level.

    The cluster-level difference uses Student's two-sample t-test on the
    cluster summaries (paired t-test when ``matched``); all other
    combinations use the influence function with the Delta method.
    """
    target = EffectTarget.coerce(target)
    if scale is not None:
        target = EffectTarget(target.level, scale)
    trial.check_equal_allocation()
    psi1, psi0 = pooled_mean(trial, 1, target), pooled_mean(trial, 0, target)
    scheme = weight_scheme(trial, target.level)
    yc = cluster_outcomes(trial, scheme)
    arm = trial.arm
    if1 = scheme.gamma * (arm == 1) / 0.5 * (yc - psi1)
    if0 = scheme.gamma * (arm == 0) / 0.5 * (yc - psi0)
    if target.scale is Scale.RATIO and psi0 <= 0:
        raise EstimationError("ratio undefined: control-arm mean is zero")
    pairs = trial.pair_ids if matched else None
    if matched and pairs is None:
        raise InferenceError("matched inference requires pair ids")
    contrast, influence = delta_contrast(psi1, psi0, if1, if0, target.scale, pair_ids=pairs)
    if target.scale is Scale.DIFFERENCE and target.level is Level.CLUSTER:
        if matched:
            diff, se, df = paired_t(yc, arm, pairs)
        else:
            diff, se, df = two_sample_t(yc[arm == 1], yc[arm == 0])
        contrast = contrast_from_se(diff, se, df, Scale.DIFFERENCE)
    return EstimateResult("Unadj", target, psi1, psi0, contrast, if1, if0, influence)


# -- log-scale t-tests ------------------------------------------------------------

def _log_ttest(values: np.ndarray, trial: TrialData, label: str, matched: bool,
               diagnostics: dict | None = None) -> EstimateResult:
    logs = np.log(values)
    arm = trial.arm
    l1, l0 = logs[arm == 1].mean(), logs[arm == 0].mean()
    if matched:
        if trial.pair_ids is None:
            raise InferenceError("matched inference requires pair ids")
        diff, se, df = paired_t(logs, arm, trial.pair_ids)
    else:
        diff, se, df = two_sample_t(logs[arm == 1], logs[arm == 0])
    contrast = contrast_from_se(diff, se, df, Scale.RATIO)
    if1 = (arm == 1) / 0.5 * (logs - l1)
    if0 = (arm == 0) / 0.5 * (logs - l0)
    return EstimateResult(label, EffectTarget(Level.CLUSTER, Scale.RATIO),
                          float(np.exp(l1)), float(np.exp(l0)), contrast,
                          if1, if0, if1 - if0, diagnostics=diagnostics or {})


def geometric_ratio_ttest(trial: TrialData, matched: bool = False) -> EstimateResult:
    """t-test on log cluster means; the ratio of geometric means with its CI."""
    trial.check_equal_allocation()
    yc = cluster_outcomes(trial)
    if (yc <= 0).any():
        bad = trial.cluster_ids[yc <= 0].tolist()
        raise EstimationError(
            f"clusters {bad} have non-positive mean outcome; log scale undefined "
            "(continuity corrections are not supported)")
    return _log_ttest(yc, trial, "t-test", matched)


def care(trial: TrialData, covariates: Sequence[str] = (), matched: bool = False) -> EstimateResult:
    """Covariate-adjusted residuals estimator.

    A pooled logistic regression of the outcome on ``covariates`` (without
    the arm) gives each cluster's expected event count ``e_j``; the
    ratio-residuals ``d_j / e_j`` are compared between arms on the log scale.
    """
    trial.check_equal_allocation()
    y = trial.y
    if not np.isin(y, (0.0, 1.0)).all():
        raise EstimationError("CARE requires binary outcomes")
    X = trial.individual_design(tuple(covariates))
    fit = fit_glm(X, y, link="logit", warn=False)
    if not fit.converged:
        raise GlmError("CARE outcome regression did not converge")
    expected = trial.cluster_sum(fit.fitted)
    observed = trial.cluster_sum(y)
    if (observed == 0).any():
        bad = trial.cluster_ids[observed == 0].tolist()
        raise EstimationError(f"clusters {bad} have no events; log ratio-residual undefined")
    return _log_ttest(observed / expected, trial, "CARE", matched,
                      {"observed": observed, "expected": expected})


# -- GEE -------------------------------------------------------------------------

class Correlation(str, enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"


_CANONICAL_VARIANCE = {"identity": "gaussian", "logit": "binomial", "log": "poisson"}


@dataclass(frozen=True)
class GeeSpec:
    """GEE configuration.

    Parameters
    ----------
    link : {"log", "logit", "identity"}
    correlation : {"independence", "exchangeable"}
    covariates : sequence of str
        Adjustment covariates (conditional model); empty for the marginal model.
    fg_bound : float or None
        Fay-Graubard bound ``b`` in (0, 1); ``None`` gives the uncorrected
        sandwich.
    variance : {"poisson", "binomial", "gaussian"} or None
        Working variance function; defaults to Poisson for the log link
        (the modified-Poisson risk-ratio model), binomial for logit and
        constant for identity.
    stratified : bool
        Aug-GEE only: fit the conditional regressions separately by arm
        (default) or as one arm-interacted model.
    """

    link: str = "log"
    correlation: Correlation = Correlation.INDEPENDENCE
    covariates: tuple = ()
    fg_bound: float | None = 0.75
    variance: str | None = None
    stratified: bool = True
    max_iter: int = 200

    def __post_init__(self):
        if self.link not in _CANONICAL_VARIANCE:
            raise ValueError(f"unknown link {self.link!r}")
        object.__setattr__(self, "correlation", Correlation(self.correlation))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.variance is None:
            object.__setattr__(self, "variance", _CANONICAL_VARIANCE[self.link])
        if self.variance not in ("poisson", "binomial", "gaussian"):
            raise ValueError(f"unknown variance function {self.variance!r}")
        if self.link == "log" and self.variance == "binomial":
            # the log-binomial MLE typically leaves the parameter space with covariates
            raise ValueError("log link with binomial variance is not supported; use poisson")
        if self.fg_bound is not None and not 0 < self.fg_bound < 1:
            raise ValueError("fg_bound must lie in (0, 1)")


def _mu_eta(eta, link):
    """Mean and d mu / d eta."""
    mu = inverse_link(eta, link)
    if link == "logit":
        return mu, mu * (1 - mu)
    if link == "log":
        return mu, mu
    return mu, np.ones_like(mu)


def _variance(mu, kind):
    if kind == "binomial":
        return np.clip(mu * (1 - mu), 1e-10, None)
    if kind == "poisson":
        return np.maximum(mu, 1e-10)
    return np.ones_like(mu)


@dataclass
class _ClusterBlocks:
    """Per-cluster pieces of ``D' V^-1 D`` and ``D' V^-1 r`` (up to ``phi``)."""

    bread: np.ndarray          # (J, p, p)
    score: np.ndarray          # (J, p)


class _Gee:
    """Vectorized GEE arithmetic for block-diagonal working covariances."""

    def __init__(self, trial: TrialData, X: np.ndarray, spec: GeeSpec):
        self.trial = trial
        self.X = X
        self.spec = spec
        self.sizes = trial.sizes.astype(float)
        self.starts = np.concatenate([[0], np.cumsum(trial.sizes)[:-1]])

    def _csum(self, v):
        return np.add.reduceat(v, self.starts, axis=0)

    def blocks(self, X, eta, resid_y, rho) -> _ClusterBlocks:
        """Cluster contributions for design ``X`` at ``eta`` and residual target ``resid_y``.

        ``resid_y`` is the vector whose deviation from the mean enters the
        score, typically the observed outcome.
        """
        mu, d = _mu_eta(eta, self.spec.link)
        v = _variance(mu, self.spec.variance)
        s = 1.0 / np.sqrt(v)
        G = X * (d * s)[:, None]
        r = (resid_y - mu) * s
        GG = self._csum(G[:, :, None] * G[:, None, :])
        Gr = self._csum(G * r[:, None])
        if rho == 0.0:
            return _ClusterBlocks(GG, Gr)
        c = rho / (1 - rho + self.sizes * rho)
        sG = self._csum(G)
        sr = self._csum(r)
        bread = (GG - c[:, None, None] * sG[:, :, None] * sG[:, None, :]) / (1 - rho)
        score = (Gr - c[:, None] * sG * sr[:, None]) / (1 - rho)
        return _ClusterBlocks(bread, score)

    def estimate_rho(self, eta, y, n_params) -> float:
        if self.spec.correlation is Correlation.INDEPENDENCE:
            return 0.0
        mu, _ = _mu_eta(eta, self.spec.link)
        e = (y - mu) / np.sqrt(_variance(mu, self.spec.variance))
        n_total = y.size
        phi = float(e @ e) / max(n_total - n_params, 1)
        se = self._csum(e)
        cross = 0.5 * float((se ** 2).sum() - e @ e)
        n_pairs = float((self.sizes * (self.sizes - 1) / 2).sum())
        if n_pairs - n_params <= 0 or phi <= 0:
            return 0.0
        rho = cross / (phi * (n_pairs - n_params))
        return float(np.clip(rho, 0.0, 0.99))


def _sandwich(bread_blocks: np.ndarray, scores: np.ndarray, fg_bound: float | None):
    B = bread_blocks.sum(axis=0)
    B_inv = np.linalg.inv(B)
    if fg_bound is not None:
        # Fay-Graubard: scale cluster scores by (1 - min(b, [H_j B^-1]_kk))^(-1/2)
        lev = np.einsum("jkl,lk->jk", bread_blocks, B_inv)
        scores = scores / np.sqrt(1.0 - np.minimum(fg_bound, lev))
    meat = scores.T @ scores
    return B_inv @ meat @ B_inv


def _gee_result(label, beta, cov, names, spec: GeeSpec, trial: TrialData, diagnostics):
    J = trial.n_clusters
    p = beta.size
    df = J - p
    if df < 1:
        raise InferenceError(f"{p} parameters leave no degrees of freedom with {J} clusters")
    k = names.index("A")
    se = float(np.sqrt(cov[k, k]))
    b = float(beta[k])
    if spec.link in ("log", "logit"):
        contrast = contrast_from_se(b, se, df, Scale.RATIO)
        target = EffectTarget(Level.INDIVIDUAL, Scale.RATIO)
    else:
        contrast = contrast_from_se(b, se, df, Scale.DIFFERENCE)
        target = EffectTarget(Level.INDIVIDUAL, Scale.DIFFERENCE)
    psi0 = float(inverse_link(np.array([beta[0]]), spec.link)[0]) if not spec.covariates else np.nan
    psi1 = (float(inverse_link(np.array([beta[0] + b]), spec.link)[0])
            if not spec.covariates else np.nan)
    diagnostics = dict(diagnostics, coef=dict(zip(names, beta.tolist())))
    nan_if = np.full(J, np.nan)
    return EstimateResult(label, target, psi1, psi0, contrast, nan_if, nan_if,
                          diagnostics.pop("score_influence"), diagnostics=diagnostics)


def _solve(engine: _Gee, X, y, beta, spec: GeeSpec, augment=None):
    """Fisher scoring; ``augment(beta)`` returns per-cluster terms subtracted from the score."""
    n_params = X.shape[1]
    trace = []
    rho = 0.0
    for it in range(1, spec.max_iter + 1):
        eta = X @ beta
        rho = engine.estimate_rho(eta, y, n_params)
        blk = engine.blocks(X, eta, y, rho)
        scores = blk.score if augment is None else blk.score - augment(beta, rho)
        total = scores.sum(axis=0)
        norm = float(np.abs(total).max())
        trace.append(norm)
        if norm < 1e-8:
            return beta, rho, blk, scores, it
        beta = beta + np.linalg.solve(blk.bread.sum(axis=0), total)
        if not np.isfinite(beta).all():
            break
    summary = ", ".join(f"{v:.2e}" for v in trace[-5:])
    raise GlmError(f"GEE did not converge in {len(trace)} iterations; last score norms: {summary}")


def _initial_beta(X, y, spec: GeeSpec):
    fit = fit_glm(X, y, link=spec.link, fit_intercept=False, warn=False)
    return fit.coef


def gee(trial: TrialData, spec: GeeSpec | None = None, marginal: bool | None = None) -> EstimateResult:
    """GEE on individual outcomes with a sandwich variance.

    With ``marginal=True`` (or no covariates) the model contains only the
    intercept and arm; otherwise the covariates of ``spec`` are added and the
    arm coefficient is a conditional effect. The arm effect is reported as
    ``exp(beta_A)`` for log and logit links and ``beta_A`` for identity, with
    ``J - p`` degrees of freedom.
    """
    spec = GeeSpec() if spec is None else spec
    covs = () if marginal else spec.covariates
    spec_used = spec if covs == spec.covariates else GeeSpec(
        spec.link, spec.correlation, covs, spec.fg_bound, spec.variance, spec.stratified, spec.max_iter)
    a = trial.arm[trial.cluster_index].astype(float)
    X = np.column_stack([np.ones(trial.n_total), a, trial.individual_design(covs)])
    names = ["(Intercept)", "A", *covs]
    y = trial.y
    engine = _Gee(trial, X, spec_used)
    beta0 = _initial_beta(X, y, spec_used)
    beta, rho, blk, scores, n_iter = _solve(engine, X, y, beta0, spec_used)
    cov = _sandwich(blk.bread, scores, spec_used.fg_bound)
    B_inv = np.linalg.inv(blk.bread.sum(axis=0))
    infl = (scores @ B_inv.T)[:, 1] * trial.n_clusters
    return _gee_result("GEE", beta, cov, names, spec_used, trial,
                       {"rho": rho, "n_iter": n_iter, "score_influence": infl})


def augmentation(arm: np.ndarray, gamma1: np.ndarray, gamma0: np.ndarray, pi: float = 0.5) -> np.ndarray:
    """Per-cluster augmentation ``sum_a (1{A_j = a} - pi(a)) gamma_a,j``."""
    arm = np.asarray(arm)
    w1 = (arm == 1) - pi
    w0 = (arm == 0) - (1 - pi)
    return w1[:, None] * np.asarray(gamma1) + w0[:, None] * np.asarray(gamma0)


def _conditional_means(trial: TrialData, spec: GeeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Predicted individual outcomes under each arm from the conditional regressions."""
    y = trial.y
    a = trial.arm[trial.cluster_index]
    covs = spec.covariates
    W = trial.individual_design(covs)
    link = spec.link
    if not covs:
        return np.full(y.size, y[a == 1].mean()), np.full(y.size, y[a == 0].mean())
    if spec.stratified:
        preds = []
        for arm_value in (1, 0):
            rows = a == arm_value
            fit = fit_glm(W[rows], y[rows], link=link, warn=False)
            if not fit.converged:
                raise GlmError(f"conditional regression in arm {arm_value} did not converge")
            preds.append(fit.predict(W))
        return preds[0], preds[1]
    Z = np.column_stack([a, W, a[:, None] * W])
    fit = fit_glm(Z, y, link=link, warn=False, arm_column=0)
    if not fit.converged:
        raise GlmError("arm-interacted conditional regression did not converge")
    Z1 = np.column_stack([np.ones_like(a), W, W])
    Z0 = np.column_stack([np.zeros_like(a), W, 0 * W])
    return fit.predict(Z1), fit.predict(Z0)


def aug_gee(trial: TrialData, spec: GeeSpec | None = None, pi: float = 0.5) -> EstimateResult:
    """Augmented GEE for the marginal arm effect.

    The marginal score is augmented with
    ``-(1{A_j=a} - pi(a)) D_j(a)' V_j(a)^-1 (mu_j(a, E, W) - mu_j(a))``
    for both arms, where ``mu_j(a, E, W)`` come from conditional regressions
    on ``spec.covariates`` and ``pi`` is the known randomization probability.
    """
    spec = GeeSpec() if spec is None else spec
    trial.check_equal_allocation()
    n = trial.n_total
    a = trial.arm[trial.cluster_index].astype(float)
    X = np.column_stack([np.ones(n), a])
    y = trial.y
    m1, m0 = _conditional_means(trial, spec)
    engine = _Gee(trial, X, spec)
    X1 = np.column_stack([np.ones(n), np.ones(n)])
    X0 = np.column_stack([np.ones(n), np.zeros(n)])

    def augment(beta, rho):
        g1 = engine.blocks(X1, X1 @ beta, m1, rho).score
        g0 = engine.blocks(X0, X0 @ beta, m0, rho).score
        return augmentation(trial.arm, g1, g0, pi)

    beta0 = _initial_beta(X, y, spec)
    beta, rho, blk, scores, n_iter = _solve(engine, X, y, beta0, spec, augment)
    cov = _sandwich(blk.bread, scores, spec.fg_bound)
    B_inv = np.linalg.inv(blk.bread.sum(axis=0))
    infl = (scores @ B_inv.T)[:, 1] * trial.n_clusters
    marginal_spec = GeeSpec(spec.link, spec.correlation, (), spec.fg_bound, spec.variance,
                            spec.stratified, spec.max_iter)
    result = _gee_result("A-GEE", beta, cov, ["(Intercept)", "A"], marginal_spec, trial,
                         {"rho": rho, "n_iter": n_iter, "score_influence": infl,
                          "conditional_covariates": list(spec.covariates)})
    return result
