"""Weighted GLM fitting by iteratively reweighted least squares.

This is the working-model engine behind every adjusted estimator. It is
written to be cheap to call thousands of times per simulated trial, so it
works on plain arrays; :class:`GLMRegressor` wraps it in the scikit-learn
estimator protocol.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, xlogy
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

LINKS = ("identity", "log", "logit")
COEF_BOUND = 40.0
PRED_BOUNDS = (0.005, 0.995)


class GlmError(RuntimeError):
    """Raised for designs that cannot be fitted."""


class DegenerateColumnWarning(UserWarning):
    """A constant or collinear design column was dropped."""


def inverse_link(eta: np.ndarray, link: str) -> np.ndarray:
    if link == "logit":
        return expit(eta)
    if link == "log":
        return np.exp(np.minimum(eta, 700.0))
    return eta


def bound_predictions(mu: np.ndarray, bounds=PRED_BOUNDS) -> np.ndarray:
    """Clamp probabilities before they are used on the logit scale."""
    return np.clip(mu, *bounds)


@dataclass
class GlmFit:
    """Result of :func:`fit_glm`.

    ``coef`` has one entry per original column of ``X`` (plus a leading
    intercept when ``fit_intercept``); dropped columns carry a zero.
    """

    coef: np.ndarray
    link: str
    fit_intercept: bool
    converged: bool
    n_iter: int
    fitted: np.ndarray
    dropped: tuple[int, ...] = ()
    arm_column: int | None = field(default=None)

    def linear_predictor(self, X: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.fit_intercept:
            eta = self.coef[0] + X @ self.coef[1:]
        else:
            eta = X @ self.coef
        return eta if offset is None else eta + offset

    def predict(self, X: np.ndarray, at_arm: int | None = None,
                offset: np.ndarray | None = None) -> np.ndarray:
        """Response-scale predictions, optionally with the arm column set to a constant."""
        X = np.asarray(X, dtype=float)
        if at_arm is not None:
            if self.arm_column is None:
                raise GlmError("fit has no arm column to overwrite")
            X = X.copy()
            X[:, self.arm_column] = at_arm
        return inverse_link(self.linear_predictor(X, offset), self.link)


def _keep_columns(X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Columns that are not (numerically) spanned by the columns before them."""
    if X.shape[1] == 0:
        return np.zeros(0, dtype=bool)
    norms = np.sqrt((X ** 2).sum(axis=0))
    r = np.abs(np.diag(np.linalg.qr(X, mode="r")))
    keep = r > tol * np.maximum(norms, 1.0)
    if not keep.all():
        # diag(R) is only sequential for the columns before the first drop
        keep = np.zeros(X.shape[1], dtype=bool)
        kept = []
        for k in range(X.shape[1]):
            if norms[k] <= tol:
                continue
            if kept:
                B = X[:, kept]
                resid = X[:, k] - B @ np.linalg.lstsq(B, X[:, k], rcond=None)[0]
                if np.sqrt(resid @ resid) <= tol * max(norms[k], 1.0) * 10:
                    continue
            kept.append(k)
            keep[k] = True
    return keep


def _deviance(y, mu, w, link, saturated=0.0):
    """Deviance; ``saturated`` is the saturated log-likelihood from :func:`_saturated`."""
    if link == "logit":
        mu = np.clip(mu, 1e-15, 1 - 1e-15)
        ll = float(w @ (xlogy(y, mu) + xlogy(1 - y, 1 - mu)))
        return 2 * (saturated - ll)
    if link == "log":
        mu = np.maximum(mu, 1e-300)
        ll = float(w @ (xlogy(y, mu) - mu))
        return 2 * (saturated - ll)
    return float(w @ (y - mu) ** 2)


def _saturated(y, w, link):
    if link == "logit":
        return float(w @ (xlogy(y, y) + xlogy(1 - y, 1 - y)))
    if link == "log":
        return float(w @ (xlogy(y, y) - y))
    return 0.0


def fit_glm(X, y, link: str = "logit", weights=None, offset=None,
            fit_intercept: bool = True, max_iter: int = 100,
            arm_column: int | None = None, warn: bool = True) -> GlmFit:
    """Fit a weighted GLM with canonical variance for the link.

    ``logit`` uses the binomial variance (outcomes in [0, 1], fractional
    values allowed), ``log`` the Poisson variance and ``identity`` is solved
    in closed form by weighted least squares.

    Iteration stops when ``max|score| < 1e-8`` or the relative deviance
    change drops below ``1e-10``. Coefficients are capped at ``|40|`` on the
    link scale; hitting the cap (separation) marks the fit nonconverged.
    """
    if link not in LINKS:
        raise ValueError(f"link must be one of {LINKS}, got {link!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if X.shape[0] != n:
        raise GlmError(f"X has {X.shape[0]} rows but y has {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if (w <= 0).any():
        raise GlmError("observation weights must be positive")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    Xf = np.column_stack([np.ones(n), X]) if fit_intercept else X
    p_full = Xf.shape[1]
    if p_full > n:
        first_bad = n - (1 if fit_intercept else 0)
        raise GlmError(f"design is rank deficient at column {first_bad}: "
                       f"{p_full} columns but only {n} rows")

    keep = _keep_columns(Xf)
    if fit_intercept and not keep[0]:
        keep[0] = True
    dropped = tuple(int(k) for k in np.flatnonzero(~keep))
    if dropped and warn:
        names = [k - 1 if fit_intercept else k for k in dropped]
        warnings.warn(f"dropped degenerate design columns {names}", DegenerateColumnWarning,
                      stacklevel=2)
    Xk = Xf[:, keep]
    p = Xk.shape[1]

    def _full(beta_k):
        beta = np.zeros(p_full)
        beta[keep] = beta_k
        return beta

    if p == 0:
        mu = inverse_link(off, link)
        return GlmFit(np.zeros(p_full), link, fit_intercept, True, 0, mu, dropped, arm_column)

    if link == "identity":
        sw = np.sqrt(w)
        beta = np.linalg.lstsq(Xk * sw[:, None], (y - off) * sw, rcond=None)[0]
        mu = Xk @ beta + off
        return GlmFit(_full(beta), link, fit_intercept, True, 1, mu, dropped, arm_column)

    if link == "logit":
        mu = np.clip((y + 0.5) / 2.0, 1e-4, 1 - 1e-4)
        eta = logit(mu)
    else:
        mu = y + 0.1
        eta = np.log(mu)
    beta = None
    sat = _saturated(y, w, link)
    dev_old = np.inf
    converged = False
    capped = False
    it = 0
    for it in range(1, max_iter + 1):
        if link == "logit":
            d = mu * (1 - mu)
        else:
            d = mu
        d = np.maximum(d, 1e-12)
        z = eta - off + (y - mu) / d
        ww = w * d
        XtW = Xk.T * ww
        try:
            beta_new = np.linalg.solve(XtW @ Xk, XtW @ z)
        except np.linalg.LinAlgError:
            beta_new = np.linalg.lstsq(XtW @ Xk, XtW @ z, rcond=None)[0]
        if np.abs(beta_new).max() > COEF_BOUND:
            beta_new = np.clip(beta_new, -COEF_BOUND, COEF_BOUND)
            capped = True
        eta_new = Xk @ beta_new + off
        mu_new = inverse_link(eta_new, link)
        dev = _deviance(y, mu_new, w, link, sat)
        # step halving on deviance increase
        halvings = 0
        while beta is not None and dev > dev_old * (1 + 1e-12) + 1e-12 and halvings < 20:
            beta_new = 0.5 * (beta_new + beta)
            eta_new = Xk @ beta_new + off
            mu_new = inverse_link(eta_new, link)
            dev = _deviance(y, mu_new, w, link, sat)
            halvings += 1
        beta, eta, mu = beta_new, eta_new, mu_new
        score = Xk.T @ (w * (y - mu))
        if capped:
            break
        if np.abs(score).max() < 1e-8 or abs(dev - dev_old) <= 1e-10 * (abs(dev) + 1e-10):
            converged = True
            break
        dev_old = dev
    return GlmFit(_full(beta), link, fit_intercept, converged and not capped, it, mu,
                  dropped, arm_column)


def predict(fit: GlmFit, X, at_arm: int | None = None) -> np.ndarray:
    """Response-scale predictions from a fitted GLM; see :meth:`GlmFit.predict`."""
    return fit.predict(X, at_arm=at_arm)


class GLMRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_glm`.

    Parameters
    ----------
    link : {"logit", "log", "identity"}, default="logit"
    fit_intercept : bool, default=True
    max_iter : int, default=100
    """

    def __init__(self, link="logit", fit_intercept=True, max_iter=100):
        self.link = link
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None, offset=None):
        X = check_array(X, ensure_min_features=0)
        y = check_array(y, ensure_2d=False)
        self.n_features_in_ = X.shape[1]
        self.fit_ = fit_glm(X, y, link=self.link, weights=sample_weight, offset=offset,
                            fit_intercept=self.fit_intercept, max_iter=self.max_iter)
        if self.fit_intercept:
            self.intercept_, self.coef_ = self.fit_.coef[0], self.fit_.coef[1:]
        else:
            self.intercept_, self.coef_ = 0.0, self.fit_.coef
        self.converged_ = self.fit_.converged
        self.n_iter_ = self.fit_.n_iter
        return self

    def predict(self, X, offset=None):
        check_is_fitted(self, "fit_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.fit_.predict(X, offset=offset)
