"""Baseline NIE estimators.

* ``nie_naive``: linear mediation formula (product of the ``M`` coefficient
  in ``Y ~ 1 + M + A + C`` and the ``A`` coefficient in ``M ~ 1 + A + C``).
  Valid when there is no mediator-outcome confounding and no measurement
  error in the mediator.
* ``nie_oracle``: the same, additionally adjusting for the latent confounders
  and using the error-free mediator. Only available for simulated data.
* ``rr_nie_plugin``: discrete plug-in NIE on the risk-ratio scale for a binary
  outcome, conditional on a covariate level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core_stats import DesignMatrix, ols_fit
from .dataset import Dataset
from .errors import EmptyCell, InvalidParameter, MissingLatentColumns
from .genius import NieEstimate, _coef_on, _maybe_bootstrap, _wald, delta_var


def _outcome_columns(data: Dataset, oracle: bool):
    if not oracle:
        return data.m, [("M", data.m), ("A", data.a)]
    if data.latent_u is None and data.latent_w is None:
        raise MissingLatentColumns("oracle estimator needs latent_u and/or latent_w")
    m = data.m if data.true_m is None else data.true_m
    cols = [("M", m), ("A", data.a)]
    if data.latent_u is not None:
        cols.append(("U", data.latent_u))
    if data.latent_w is not None:
        cols.append(("W", data.latent_w))
    return m, cols


def _designs(data: Dataset, oracle: bool):
    m, cols = _outcome_columns(data, oracle)
    if data.k:
        cols.append(("C", data.c))
    xy = DesignMatrix.build(cols, data.n)
    xm = DesignMatrix.build([("A", data.a)] + ([("C", data.c)] if data.k else []), data.n)
    return m, xy, xm


def _product_estimate(data, a, a_star, inference, B, seed, oracle, robust, boot_ci):
    m, xy, xm = _designs(data, oracle)
    yfit = ols_fit(xy, data.y, robust=robust)
    mfit = ols_fit(xm, m, robust=robust)
    theta, se_theta = yfit.coef("M"), yfit.se_robust("M")
    beta, se_beta = mfit.coef("A"), mfit.se_robust("A")
    scale = a - a_star
    nie = theta * beta * scale
    se = math.sqrt(delta_var(theta, se_theta, beta, se_beta, scale))
    method = "oracle" if oracle else "naive"
    est = NieEstimate(
        nie=nie,
        contrast=(a, a_star),
        theta_m=theta,
        beta_a=beta,
        se_delta=se,
        ci_delta=_wald(nie, se),
        method=method,
        se_theta=se_theta,
        se_beta=se_beta,
        n=data.n,
    )
    _maybe_bootstrap(est, data, inference, B, seed, boot_ci, dict(method=method))
    return est


def nie_naive(data: Dataset, a=1.0, a_star=0.0, inference="delta", B=2000, seed=0,
              *, robust="HC0", boot_ci="percentile") -> NieEstimate:
    """Product-of-coefficients NIE from two OLS fits (sandwich SEs for both)."""
    return _product_estimate(data, a, a_star, inference, B, seed, False, robust, boot_ci)


def nie_oracle(data: Dataset, a=1.0, a_star=0.0, inference="delta", B=2000, seed=0,
               *, robust="HC0", boot_ci="percentile") -> NieEstimate:
    """Naive estimator with latent ``U``/``W`` added to the outcome model.

    Outcome design is ``(1, M_true, A, U, W, C)`` with absent latents
    omitted; ``M_true`` also replaces ``M`` in the mediator model. A latent
    column that is constant makes the design rank deficient.
    """
    return _product_estimate(data, a, a_star, inference, B, seed, True, robust, boot_ci)


def point_nie(data: Dataset, a: float, a_star: float, method: str) -> float:
    if method not in ("naive", "oracle"):
        raise InvalidParameter(f"unknown method {method!r}")
    m, xy, xm = _designs(data, method == "oracle")
    theta = _coef_on(xy.values, data.y, 1)
    beta = _coef_on(xm.values, m, 1)
    return theta * beta * (a - a_star)


# ---------------------------------------------------------------------------
# Discrete risk-ratio plug-in
# ---------------------------------------------------------------------------


@dataclass
class DiscreteMediationTable:
    """Counts indexed ``[y, m, a, c]`` with ``y`` in {0, 1}."""

    counts: np.ndarray
    m_levels: Sequence = ()
    a_levels: Sequence = ()
    c_levels: Sequence = ()

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 4 or counts.shape[0] != 2:
            raise InvalidParameter("counts must have shape (2, n_m, n_a, n_c)")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise InvalidParameter("counts must be integers")
            counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise InvalidParameter("counts must be non-negative")
        if counts.sum() == 0:
            raise InvalidParameter("table is empty")
        self.counts = counts
        _, nm, na, nc = counts.shape
        self.m_levels = tuple(self.m_levels) or tuple(range(nm))
        self.a_levels = tuple(self.a_levels) or tuple(range(na))
        self.c_levels = tuple(self.c_levels) or tuple(range(nc))
        if (len(self.m_levels), len(self.a_levels), len(self.c_levels)) != (nm, na, nc):
            raise InvalidParameter("level labels do not match the count array shape")

    @classmethod
    def from_records(cls, records):
        """Build from ``(y, m, a, c, count)`` tuples; repeated keys are summed."""
        records = list(records)
        if not records:
            raise InvalidParameter("no records")
        m_levels = sorted({r[1] for r in records})
        a_levels = sorted({r[2] for r in records})
        c_levels = sorted({r[3] for r in records})
        counts = np.zeros((2, len(m_levels), len(a_levels), len(c_levels)), dtype=np.int64)
        for y, m, a, c, cnt in records:
            if y not in (0, 1):
                raise InvalidParameter(f"outcome must be 0/1, got {y!r}")
            counts[int(y), m_levels.index(m), a_levels.index(a), c_levels.index(c)] += int(cnt)
        return cls(counts, m_levels, a_levels, c_levels)


@dataclass
class RrNieEstimate:
    rr: float
    contrast: tuple
    c: object
    numerator: float
    denominator: float


def rr_nie_plugin(table: DiscreteMediationTable, a, a_star, c) -> RrNieEstimate:
    """Conditional NIE on the risk-ratio scale from empirical frequencies.

    ``sum_m P(Y=1|m,a,c) f(m|a,c) / sum_m P(Y=1|m,a,c) f(m|a*,c)``. Both
    sums use the outcome risk at exposure ``a``; only the mediator
    distribution changes. No smoothing is applied. Sums are accumulated in
    exact rational arithmetic and converted to float once at the end.
    """
    try:
        ia, ias, ic = table.a_levels.index(a), table.a_levels.index(a_star), table.c_levels.index(c)
    except ValueError as exc:
        raise InvalidParameter(str(exc)) from None
    cell = table.counts[:, :, :, ic].sum(axis=0)  # (m, a)
    y1 = table.counts[1, :, :, ic]
    tot_a, tot_as = cell[:, ia].sum(), cell[:, ias].sum()
    if tot_a == 0 or tot_as == 0:
        raise EmptyCell(f"no observations with a={a!r} or a={a_star!r} at c={c!r}")
    need = (cell[:, ia] > 0) | (cell[:, ias] > 0)
    missing = need & (cell[:, ia] == 0)
    if np.any(missing):
        m_bad = [table.m_levels[j] for j in np.flatnonzero(missing)]
        raise EmptyCell(f"P(Y=1|m,a,c) undefined for m in {m_bad} at a={a!r}, c={c!r}")
    num = den = Fraction(0)
    for j in np.flatnonzero(need):
        risk = Fraction(int(y1[j, ia]), int(cell[j, ia]))
        num += risk * Fraction(int(cell[j, ia]), int(tot_a))
        den += risk * Fraction(int(cell[j, ias]), int(tot_as))
    if den == 0:
        raise EmptyCell("denominator is zero: no outcome events in the reference arm")
    return RrNieEstimate(float(num / den), (a, a_star), c, float(num), float(den))
