"""Contrasts, Delta-method standard errors and t-based inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Scale


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class Contrast:
    """A point estimate with its t-based 95% interval and two-sided p-value.

    For ratios, ``se`` is on the log scale and the interval is formed on the
    log scale before exponentiating.
    """

    estimate: float
    se: float
    df: int
    ci: tuple[float, float]
    p_value: float
    scale: Scale

    @property
    def log_estimate(self) -> float:
        return float(np.log(self.estimate)) if self.scale is Scale.RATIO else np.nan


def t_interval(center: float, se: float, df: int, level: float = 0.95):
    """Two-sided interval and p-value for ``center / se`` against t(df)."""
    if df < 1:
        raise InferenceError(f"need at least one degree of freedom, got {df}")
    q = stats.t.ppf(0.5 + level / 2, df)
    if se > 0:
        p = float(2 * stats.t.sf(abs(center) / se, df))
    else:
        p = 1.0 if center == 0 else 0.0
    return (center - q * se, center + q * se), min(p, 1.0)


def contrast_from_se(center: float, se: float, df: int, scale: Scale | str) -> Contrast:
    """Build a :class:`Contrast` from an analysis-scale estimate and SE.

    ``center`` is the difference, or the log ratio for ``Scale.RATIO``.
    """
    scale = Scale(scale)
    (lo, hi), p = t_interval(center, se, df)
    if scale is Scale.RATIO:
        return Contrast(float(np.exp(center)), float(se), int(df),
                        (float(np.exp(lo)), float(np.exp(hi))), p, scale)
    return Contrast(float(center), float(se), int(df), (float(lo), float(hi)), p, scale)


def contrast_influence(psi1: float, psi0: float, if1: np.ndarray, if0: np.ndarray,
                       scale: Scale | str) -> tuple[float, np.ndarray]:
    """Analysis-scale estimate and influence values of the contrast.

    The ratio is handled on the log scale, whose gradient is
    ``(1/psi1, -1/psi0)``.
    """
    scale = Scale(scale)
    if1 = np.asarray(if1, dtype=float)
    if0 = np.asarray(if0, dtype=float)
    if scale is Scale.DIFFERENCE:
        return psi1 - psi0, if1 - if0
    if psi0 == 0 or psi1 <= 0 or psi0 < 0:
        raise InferenceError("ratio contrast needs positive arm means")
    return float(np.log(psi1 / psi0)), if1 / psi1 - if0 / psi0


def unmatched_se(influence: np.ndarray) -> float:
    """``sqrt(var(IF) / J)`` with the sample variance across clusters."""
    influence = np.asarray(influence, dtype=float)
    return float(np.sqrt(influence.var(ddof=1) / influence.shape[0]))


def paired_variance(influence: np.ndarray, pair_ids) -> tuple[float, int]:
    """Standard error and df respecting the randomization pairs.

    Pair-level values are the mean of the two members' influence values;
    the SE is ``sqrt(var(pair values) / (J/2))`` with ``J/2 - 1`` df.
    """
    if pair_ids is None:
        raise InferenceError("matched inference requires pair ids")
    influence = np.asarray(influence, dtype=float)
    pair_ids = np.asarray(pair_ids)
    if pair_ids.shape != influence.shape:
        raise InferenceError("one pair id per cluster is required")
    labels, inverse, counts = np.unique(pair_ids, return_inverse=True, return_counts=True)
    if (counts != 2).any():
        raise InferenceError("every pair must have exactly two clusters")
    pair_values = np.bincount(inverse, weights=influence) / 2.0
    n_pairs = labels.shape[0]
    if n_pairs < 2:
        raise InferenceError("matched inference needs at least two pairs")
    return float(np.sqrt(pair_values.var(ddof=1) / n_pairs)), n_pairs - 1


def delta_contrast(psi1: float, psi0: float, if1, if0, scale: Scale | str = Scale.RATIO,
                   df: int | None = None, pair_ids=None) -> tuple[Contrast, np.ndarray]:
    """Delta-method contrast of two treatment-specific means.

    Returns the :class:`Contrast` and the per-cluster influence values of the
    analysis-scale contrast. With ``pair_ids`` the variance preserves the
    matched pairs and ``df`` defaults to ``J/2 - 1``; otherwise ``J - 2``.
    """
    center, influence = contrast_influence(psi1, psi0, if1, if0, scale)
    J = influence.shape[0]
    if pair_ids is not None:
        se, pair_df = paired_variance(influence, pair_ids)
        df = pair_df if df is None else df
    else:
        se = unmatched_se(influence)
        df = J - 2 if df is None else df
    return contrast_from_se(center, se, df, scale), influence


def two_sample_t(values1: np.ndarray, values0: np.ndarray) -> tuple[float, float, int]:
    """Difference in means, pooled-variance SE and df of Student's t-test."""
    values1 = np.asarray(values1, dtype=float)
    values0 = np.asarray(values0, dtype=float)
    n1, n0 = values1.size, values0.size
    df = n1 + n0 - 2
    pooled = (((values1 - values1.mean()) ** 2).sum() + ((values0 - values0.mean()) ** 2).sum()) / df
    se = float(np.sqrt(pooled * (1 / n1 + 1 / n0)))
    return float(values1.mean() - values0.mean()), se, df


def paired_t(values: np.ndarray, arm: np.ndarray, pair_ids) -> tuple[float, float, int]:
    """Mean within-pair difference (treated minus control), SE and df."""
    values = np.asarray(values, dtype=float)
    arm = np.asarray(arm)
    pair_ids = np.asarray(pair_ids)
    labels, inverse = np.unique(pair_ids, return_inverse=True)
    signed = np.where(arm == 1, values, -values)
    diffs = np.bincount(inverse, weights=signed)
    k = labels.shape[0]
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(k)), k - 1
