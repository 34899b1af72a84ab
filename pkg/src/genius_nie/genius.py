"""GENIUS estimation of the natural indirect effect.

The mediator effect on the outcome is identified from exposure-driven
heteroskedasticity of the mediator. With instrument ``h(C) = 1`` the
estimating equation

    sum_i (A_i - E[A|C_i]) (M_i - E[M|A_i,C_i]) (Y_i - theta_m M_i) = 0

has the closed-form root ``sum(w Y) / sum(w M)`` with
``w = (A - A_hat)(M - M_hat)``. It stays consistent under unmeasured
mediator-outcome and exposure-outcome confounding and under classical
measurement error in ``M``. The exposure-mediator coefficient comes from OLS
of ``M`` on ``(1, A, C)`` with a sandwich standard error, and the NIE is the
product ``theta_m * beta_a * (a - a_star)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .core_stats import (
    RANK_TOL,
    DesignMatrix,
    RandomStream,
    batch_wls_coef,
    logistic_fit,
    ols_fit,
)
from .dataset import Dataset
from .errors import (
    InvalidParameter,
    MediationError,
    SingularMomentSystem,
    TooManyFailures,
    WeakIdentification,
)


Z95 = 1.96
WEAK_ID_EPS = 1e-8
MAX_BOOT_FAILURE_RATE = 0.10


@dataclass
class HetTestResult:
    statistic: float
    df: int
    p_value: float
    variance_by_level: dict = field(default_factory=dict)
    n: int = 0

    @property
    def small_sample(self) -> bool:
        """True when n < 10; the chi-square reference is not trustworthy there."""
        return self.n < 10


@dataclass
class GeniusFit:
    theta_m: float
    se_theta: float
    numerator: float
    denominator: float
    weak_id: bool
    het_test: Optional[HetTestResult] = None
    theta_mc: Optional[np.ndarray] = None
    cov_theta: Optional[np.ndarray] = None
    se_method: str = "stacked"
    n: int = 0


@dataclass
class BootstrapResult:
    se: float
    ci: tuple
    replicates: np.ndarray
    n_failed: int
    B: int
    seed: int
    ci_method: str = "percentile"


@dataclass
class NieEstimate:
    nie: float
    contrast: tuple
    theta_m: float
    beta_a: float
    se_delta: float
    ci_delta: tuple
    method: str
    se_theta: float = float("nan")
    se_beta: float = float("nan")
    theta_mc: Optional[np.ndarray] = None
    beta_ac: Optional[np.ndarray] = None
    bootstrap: Optional[BootstrapResult] = None
    genius_fit: Optional[GeniusFit] = None
    n: int = 0
    warnings: list = field(default_factory=list)

    @property
    def se_bootstrap(self) -> Optional[float]:
        return None if self.bootstrap is None else self.bootstrap.se

    @property
    def ci_bootstrap(self) -> Optional[tuple]:
        return None if self.bootstrap is None else self.bootstrap.ci

    @property
    def var_delta(self) -> float:
        return self.se_delta**2


# ---------------------------------------------------------------------------
# First stages
# ---------------------------------------------------------------------------


@dataclass
class FirstStages:
    """Nuisance fits ``E[A|C]`` and ``E[M|A,C]`` plus what the stacked variance needs."""

    a_hat: np.ndarray
    m_hat: np.ndarray
    xc: np.ndarray  # regressors of the exposure model
    xm: np.ndarray  # regressors of the mediator model
    a_deriv: np.ndarray  # d E[A|C] / d linear predictor
    logistic: bool


def _mediator_design(data: Dataset, interaction: bool) -> DesignMatrix:
    cols = [("A", data.a)]
    if data.k:
        cols.append(("C", data.c))
        if interaction:
            cols.append(("AxC", data.a[:, None] * data.c))
    return DesignMatrix.build(cols, data.n)


def first_stages(data: Dataset, interaction: bool = False) -> FirstStages:
    """Fit the exposure and mediator nuisance models.

    The exposure model is logistic when ``a`` is 0/1-valued and linear
    otherwise; with no covariates it reduces to the sample mean of ``a``.
    ``interaction=True`` adds ``A x C`` columns to the mediator model.
    """
    n = data.n
    xc = np.ones((n, 1)) if data.k == 0 else np.column_stack([np.ones(n), data.c])
    logistic = False
    if data.k == 0:
        a_hat = np.full(n, data.a.mean())
        a_deriv = np.ones(n)
    elif data.exposure_is_binary:
        fit = logistic_fit(DesignMatrix(xc, has_intercept=True), data.a)
        a_hat = fit.fitted
        a_deriv = a_hat * (1.0 - a_hat)
        logistic = True
    else:
        fit = ols_fit(DesignMatrix(xc, has_intercept=True), data.a)
        a_hat = fit.fitted
        a_deriv = np.ones(n)
    xm = _mediator_design(data, interaction)
    m_fit = ols_fit(xm, data.m)
    return FirstStages(a_hat, m_fit.fitted, xc, xm.values, a_deriv, logistic)


def _weak_threshold(data: Dataset) -> float:
    return WEAK_ID_EPS * float(np.std(data.a)) * float(np.std(data.m))


# ---------------------------------------------------------------------------
# Mediator effect
# ---------------------------------------------------------------------------


def _stacked_cov(data, fs, H, Z, theta):
    """Covariance of theta from the joint estimating equations of all stages.

    Stacks the exposure score, the mediator normal equations and the
    GENIUS moments, and propagates first-stage estimation error into theta
    through the cross-derivative blocks.
    """
    n = data.n
    ra = data.a - fs.a_hat
    rm = data.m - fs.m_hat
    e = data.y - Z @ theta
    psi_t = H * (ra * rm * e)[:, None]
    j_tt = -(H * (ra * rm)[:, None]).T @ Z / n
    j_tg = -(H * (fs.a_deriv * rm * e)[:, None]).T @ fs.xc / n
    j_td = -(H * (ra * e)[:, None]).T @ fs.xm / n
    psi_g = fs.xc * ra[:, None]
    j_gg = -(fs.xc * fs.a_deriv[:, None]).T @ fs.xc / n
    psi_d = fs.xm * rm[:, None]
    j_dd = -fs.xm.T @ fs.xm / n
    if_g = -np.linalg.solve(j_gg, psi_g.T).T
    if_d = -np.linalg.solve(j_dd, psi_d.T).T
    total = psi_t + if_g @ j_tg.T + if_d @ j_td.T
    if_t = -np.linalg.solve(j_tt, total.T).T
    cov = if_t.T @ if_t / n**2
    return 0.5 * (cov + cov.T)


def _plugin_cov(data, fs, H, Z, theta):
    n = data.n
    w = (data.a - fs.a_hat) * (data.m - fs.m_hat)
    e = data.y - Z @ theta
    psi = H * (w * e)[:, None]
    j_tt = (H * w[:, None]).T @ Z / n
    if_t = np.linalg.solve(j_tt, psi.T).T
    cov = if_t.T @ if_t / n**2
    return 0.5 * (cov + cov.T)


def _theta_cov(data, fs, H, Z, theta, se_method):
    if se_method == "stacked":
        return _stacked_cov(data, fs, H, Z, theta)
    if se_method == "plugin":
        return _plugin_cov(data, fs, H, Z, theta)
    raise InvalidParameter(f"unknown se_method {se_method!r}")


def genius_theta_m(
    data: Dataset,
    interaction_first_stage: bool = False,
    se_method: str = "stacked",
    raise_on_weak: bool = True,
    het_test: bool = True,
) -> GeniusFit:
    """Closed-form GENIUS estimate of the mediator effect with ``h(C) = 1``.

    Parameters
    ----------
    data : Dataset
    interaction_first_stage : bool
        Include ``A x C`` terms in the model for ``E[M|A,C]``.
    se_method : {"stacked", "plugin"}
        ``"plugin"`` treats the first-stage fits as known. ``"stacked"``
        (default) also carries their estimation error.
    raise_on_weak : bool
        Raise :class:`WeakIdentification` when the denominator is
        numerically zero. Otherwise return a fit with ``weak_id`` set and
        ``theta_m`` equal to nan.
    """
    fs = first_stages(data, interaction_first_stage)
    w = (data.a - fs.a_hat) * (data.m - fs.m_hat)
    num = float(w @ data.y)
    den = float(w @ data.m)
    het = het_variance_test(data) if het_test else None
    weak = abs(den) / data.n < _weak_threshold(data)
    if weak:
        fit = GeniusFit(math.nan, math.nan, num, den, True, het, se_method=se_method, n=data.n)
        if raise_on_weak:
            raise WeakIdentification(
                f"GENIUS denominator {den / data.n:.3g} (per observation) is below the "
                "identification threshold; the mediator variance does not depend on the exposure",
                fit,
            )
        return fit
    theta = num / den
    H = np.ones((data.n, 1))
    Z = data.m[:, None]
    cov = _theta_cov(data, fs, H, Z, np.array([theta]), se_method)
    return GeniusFit(
        theta_m=theta,
        se_theta=float(np.sqrt(cov[0, 0])),
        numerator=num,
        denominator=den,
        weak_id=False,
        het_test=het,
        cov_theta=cov,
        se_method=se_method,
        n=data.n,
    )


def _moment_instruments(data: Dataset):
    H = np.column_stack([np.ones(data.n), data.c])
    Z = np.column_stack([data.m, data.m[:, None] * data.c])
    return H, Z


def _full_rank(mat) -> bool:
    _, r, _ = sla.qr(mat, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    return d[0] > 0 and bool(np.all(d >= RANK_TOL * d[0]))


def genius_theta_interaction(
    data: Dataset,
    interaction_first_stage: bool = True,
    se_method: str = "stacked",
    het_test: bool = True,
) -> GeniusFit:
    """GENIUS with a mediator-by-covariate term in the outcome model.

    Solves the ``1 + k`` moment conditions with instruments ``(1, C)``::

        sum_i (1, C_i) w_i (Y_i - theta_m M_i - theta_mc' M_i C_i) = 0

    which is linear in ``(theta_m, theta_mc)``.
    """
    if data.k < 1:
        raise InvalidParameter("the interaction estimator needs at least one covariate")
    H, Z = _moment_instruments(data)
    if not _full_rank(H):
        raise SingularMomentSystem("instruments (1, C) are collinear; a covariate is constant or duplicated")
    fs = first_stages(data, interaction_first_stage)
    w = (data.a - fs.a_hat) * (data.m - fs.m_hat)
    G = (H * w[:, None]).T @ Z
    rhs = (H * w[:, None]).T @ data.y
    num, den = float(rhs[0]), float(G[0, 0])
    het = het_variance_test(data) if het_test else None
    sv = np.linalg.svd(G / data.n, compute_uv=False)
    if sv[-1] < _weak_threshold(data):
        fit = GeniusFit(math.nan, math.nan, num, den, True, het, se_method=se_method, n=data.n)
        raise WeakIdentification("interaction moment system is not identified by the data", fit)
    if sv[-1] < RANK_TOL * sv[0]:
        raise SingularMomentSystem("interaction moment system is numerically singular")
    theta = np.linalg.solve(G, rhs)
    cov = _theta_cov(data, fs, H, Z, theta, se_method)
    return GeniusFit(
        theta_m=float(theta[0]),
        se_theta=float(np.sqrt(cov[0, 0])),
        numerator=num,
        denominator=den,
        weak_id=False,
        het_test=het,
        theta_mc=theta[1:].copy(),
        cov_theta=cov,
        se_method=se_method,
        n=data.n,
    )


# ---------------------------------------------------------------------------
# Exposure-mediator coefficient and NIE
# ---------------------------------------------------------------------------


def beta_a_fit(data: Dataset, robust: str = "HC0") -> tuple:
    """OLS coefficient on ``A`` from ``M ~ 1 + A + C`` and its sandwich SE."""
    fit = ols_fit(_mediator_design(data, False), data.m, robust=robust)
    return fit.coef("A"), fit.se_robust("A")


def delta_var(theta_m, se_theta, beta_a, se_beta, scale=1.0) -> float:
    """First-order variance of ``theta_m * beta_a * scale``.

    ``scale**2 * (beta_a**2 * se_theta**2 + theta_m**2 * se_beta**2)``; the
    two component estimates are treated as uncorrelated.
    """
    if se_theta < 0 or se_beta < 0:
        raise InvalidParameter("standard errors must be non-negative")
    return float(scale**2 * (beta_a**2 * se_theta**2 + theta_m**2 * se_beta**2))


def _wald(est, se):
    return (est - Z95 * se, est + Z95 * se)


def nie_genius(
    data: Dataset,
    a: float = 1.0,
    a_star: float = 0.0,
    inference: str = "delta",
    B: int = 2000,
    seed: int = 0,
    *,
    interaction_first_stage: bool = False,
    se_method: str = "stacked",
    robust: str = "HC0",
    boot_ci: str = "percentile",
) -> NieEstimate:
    """Product-of-coefficients NIE with the GENIUS mediator effect.

    ``inference`` is ``"delta"``, ``"bootstrap"`` or ``"both"``. The delta
    interval is always reported; bootstrap fields are filled on request.
    """
    gfit = genius_theta_m(data, interaction_first_stage, se_method)
    beta, se_beta = beta_a_fit(data, robust)
    scale = a - a_star
    nie = gfit.theta_m * beta * scale
    se = math.sqrt(delta_var(gfit.theta_m, gfit.se_theta, beta, se_beta, scale))
    est = NieEstimate(
        nie=nie,
        contrast=(a, a_star),
        theta_m=gfit.theta_m,
        beta_a=beta,
        se_delta=se,
        ci_delta=_wald(nie, se),
        method="genius",
        se_theta=gfit.se_theta,
        se_beta=se_beta,
        genius_fit=gfit,
        n=data.n,
    )
    if gfit.het_test is not None and gfit.het_test.p_value > 0.05:
        est.warnings.append(
            f"heteroskedasticity test p = {gfit.het_test.p_value:.3g}; identification may be weak"
        )
    _maybe_bootstrap(est, data, inference, B, seed, boot_ci,
                     dict(method="genius", interaction_first_stage=interaction_first_stage))
    return est


def interaction_nie_formula(theta_m, theta_mc, beta_a, beta_ac, c_mean, c_second, a, a_star):
    """NIE under linear mediator-by-covariate and exposure-by-covariate terms.

    ``(a - a*) * [theta_m (beta_a + beta_ac'E[C]) + theta_mc'(beta_a E[C] + E[CC'] beta_ac)]``.
    """
    theta_mc = np.atleast_1d(np.asarray(theta_mc, dtype=float))
    beta_ac = np.atleast_1d(np.asarray(beta_ac, dtype=float))
    c_mean = np.atleast_1d(np.asarray(c_mean, dtype=float))
    c_second = np.atleast_2d(np.asarray(c_second, dtype=float))
    inner = theta_m * (beta_a + beta_ac @ c_mean) + theta_mc @ (beta_a * c_mean + c_second @ beta_ac)
    return float((a - a_star) * inner)


def nie_interaction(
    data: Dataset,
    a: float = 1.0,
    a_star: float = 0.0,
    inference: str = "delta",
    B: int = 2000,
    seed: int = 0,
    *,
    se_method: str = "stacked",
    robust: str = "HC0",
    boot_ci: str = "percentile",
) -> NieEstimate:
    """NIE allowing ``M x C`` in the outcome model and ``A x C`` in the mediator model."""
    gfit = genius_theta_interaction(data, True, se_method)
    mfit = ols_fit(_mediator_design(data, True), data.m, robust=robust)
    k = data.k
    ja = mfit.column_names.index("A")
    jac = [mfit.column_names.index(f"AxC[{j}]") for j in range(k)]
    beta_a = float(mfit.coefficients[ja])
    beta_ac = mfit.coefficients[jac]
    c_mean = data.c.mean(axis=0)
    c_second = data.c.T @ data.c / data.n
    theta_mc = gfit.theta_mc
    scale = a - a_star
    nie = interaction_nie_formula(gfit.theta_m, theta_mc, beta_a, beta_ac, c_mean, c_second, a, a_star)
    grad_theta = scale * np.concatenate([[beta_a + beta_ac @ c_mean], beta_a * c_mean + c_second @ beta_ac])
    grad_beta = scale * np.concatenate([[gfit.theta_m + theta_mc @ c_mean], gfit.theta_m * c_mean + c_second @ theta_mc])
    idx = [ja] + jac
    cov_beta = mfit.cov_robust[np.ix_(idx, idx)]
    var = float(grad_theta @ gfit.cov_theta @ grad_theta + grad_beta @ cov_beta @ grad_beta)
    se = math.sqrt(max(var, 0.0))
    est = NieEstimate(
        nie=nie,
        contrast=(a, a_star),
        theta_m=gfit.theta_m,
        beta_a=beta_a,
        se_delta=se,
        ci_delta=_wald(nie, se),
        method="genius_interaction",
        se_theta=gfit.se_theta,
        se_beta=float(np.sqrt(mfit.cov_robust[ja, ja])),
        theta_mc=theta_mc,
        beta_ac=beta_ac,
        genius_fit=gfit,
        n=data.n,
    )
    _maybe_bootstrap(est, data, inference, B, seed, boot_ci, dict(method="genius_interaction"))
    return est


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def point_nie(data: Dataset, a: float, a_star: float, method: str, **opts) -> float:
    """NIE point estimate only, for resampling loops."""
    scale = a - a_star
    if method == "genius":
        fs = first_stages(data, opts.get("interaction_first_stage", False))
        w = (data.a - fs.a_hat) * (data.m - fs.m_hat)
        den = float(w @ data.m)
        if abs(den) / data.n < _weak_threshold(data):
            raise WeakIdentification("weak identification in resample")
        theta = float(w @ data.y) / den
        beta = _coef_on(_mediator_design(data, False).values, data.m, 1)
        return theta * beta * scale
    if method == "genius_interaction":
        return nie_interaction(data, a, a_star).nie
    from . import mediation_formula

    return mediation_formula.point_nie(data, a, a_star, method)


def _coef_on(X, y, j):
    q, r, perm = sla.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d[0] == 0 or np.any(d < RANK_TOL * d[0]):
        from .errors import RankDeficient

        raise RankDeficient("rank deficient design in resample")
    b = sla.solve_triangular(r, q.T @ y)
    out = np.empty_like(b)
    out[perm] = b
    return float(out[j])


def resample_indices(stream: RandomStream, B: int, n: int) -> np.ndarray:
    """Row indices for ``B`` resamples; row ``b`` comes from substream ``b``."""
    return np.stack([stream.child(b).generator().integers(0, n, size=n) for b in range(B)])


def _can_batch(data: Dataset, method: str) -> bool:
    return method in ("naive", "oracle") or (method == "genius" and data.k == 0)


def _batch_point_nie(data: Dataset, idx: np.ndarray, a: float, a_star: float, method: str) -> np.ndarray:
    """Point estimates for all resamples at once, as resample-count-weighted fits.

    Gives the same estimator as refitting on the duplicated rows. Failed
    resamples (rank deficiency, weak identification) are nan.
    """
    B, n = idx.shape
    counts = np.bincount((idx + n * np.arange(B)[:, None]).ravel(), minlength=B * n).reshape(B, n)
    counts = counts.astype(float)
    scale = a - a_star
    if method == "genius":
        xm = _mediator_design(data, False).values
        coef_m, ok = batch_wls_coef(xm, data.m, counts)
        a_hat = counts @ data.a / n
        m_hat = coef_m @ xm.T
        w = (data.a[None, :] - a_hat[:, None]) * (data.m[None, :] - m_hat)
        num = np.sum(counts * w * data.y, axis=1)
        den = np.sum(counts * w * data.m, axis=1)
        sd_a = np.sqrt(counts @ data.a**2 / n - a_hat**2)
        m_bar = counts @ data.m / n
        sd_m = np.sqrt(np.maximum(counts @ data.m**2 / n - m_bar**2, 0.0))
        ok &= ~(np.abs(den) / n < WEAK_ID_EPS * sd_a * sd_m)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / den * coef_m[:, 1] * scale
        return np.where(ok, out, np.nan)
    from .mediation_formula import _designs

    m, xy, xm = _designs(data, method == "oracle")
    coef_y, ok_y = batch_wls_coef(xy.values, data.y, counts)
    coef_m, ok_m = batch_wls_coef(xm.values, m, counts)
    out = coef_y[:, 1] * coef_m[:, 1] * scale
    return np.where(ok_y & ok_m, out, np.nan)


def bootstrap_nie(
    data: Dataset,
    a: float = 1.0,
    a_star: float = 0.0,
    B: int = 2000,
    seed: int = 0,
    method: str = "genius",
    ci: str = "percentile",
    stream: Optional[RandomStream] = None,
    min_B: int = 100,
    batch: Optional[bool] = None,
    **opts,
) -> BootstrapResult:
    """Nonparametric row bootstrap of the full estimation pipeline.

    Replicate ``b`` draws its indices from substream ``b`` of ``stream``
    (default ``RandomStream(seed, 0)``), so results do not depend on the
    order in which replicates run. Replicates that fail (weak
    identification, a resample with constant exposure, ...) are dropped and
    counted; more than 10% failures raises :class:`TooManyFailures`.

    Linear pipelines (naive, oracle, and GENIUS without covariates) are
    evaluated as one batched weighted fit unless ``batch=False``; others
    refit replicate by replicate.
    """
    if B < min_B:
        raise InvalidParameter(f"bootstrap needs B >= {min_B}, got {B}")
    if ci not in ("percentile", "normal"):
        raise InvalidParameter(f"unknown bootstrap interval {ci!r}")
    stream = stream if stream is not None else RandomStream(seed, 0)
    idx = resample_indices(stream, B, data.n)
    if batch is None:
        batch = _can_batch(data, method)
    if batch:
        reps = _batch_point_nie(data, idx, a, a_star, method)
    else:
        reps = np.full(B, np.nan)
        for b in range(B):
            try:
                reps[b] = point_nie(data.take(idx[b]), a, a_star, method, **opts)
            except MediationError:
                continue
    ok = np.isfinite(reps)
    n_failed = int(B - ok.sum())
    if n_failed > MAX_BOOT_FAILURE_RATE * B:
        raise TooManyFailures(f"{n_failed} of {B} bootstrap replicates failed")
    good = reps[ok]
    se = float(np.std(good, ddof=1)) if good.size > 1 else 0.0
    if ci == "percentile":
        lo, hi = np.percentile(good, [2.5, 97.5])
    else:
        centre = point_nie(data, a, a_star, method, **opts)
        lo, hi = centre - Z95 * se, centre + Z95 * se
    return BootstrapResult(se, (float(lo), float(hi)), reps, n_failed, B, seed, ci)


def _maybe_bootstrap(est, data, inference, B, seed, boot_ci, opts):
    if inference == "delta":
        return
    if inference not in ("bootstrap", "both"):
        raise InvalidParameter(f"unknown inference mode {inference!r}")
    est.bootstrap = bootstrap_nie(data, est.contrast[0], est.contrast[1], B, seed, ci=boot_ci, **opts)


# ---------------------------------------------------------------------------
# Identification diagnostic
# ---------------------------------------------------------------------------


def het_variance_test(data: Dataset) -> HetTestResult:
    """Score test that the mediator residual variance depends on ``(A, C)``.

    Squared residuals of ``M ~ 1 + A + C`` are regressed on the same
    regressors; ``n R^2`` is referred to chi-square with as many degrees of
    freedom as there are non-intercept regressors. Below n = 10 the
    statistic is still returned but the reference distribution is not
    reliable (see :attr:`HetTestResult.small_sample`).
    """
    x = _mediator_design(data, False)
    fit = ols_fit(x, data.m)
    e2 = fit.residuals**2
    aux = ols_fit(x, e2)
    tss = float(np.sum((e2 - e2.mean()) ** 2))
    r2 = 0.0 if tss <= 0 else max(0.0, 1.0 - float(aux.residuals @ aux.residuals) / tss)
    df = x.p - 1
    stat = data.n * r2
    p = float(stats.chi2.sf(stat, df)) if df > 0 else 1.0
    levels = {}
    if data.k == 0 and data.exposure_is_binary:
        for lvl in (0.0, 1.0):
            mask = data.a == lvl
            levels[lvl] = float(np.mean(fit.residuals[mask] ** 2))
    return HetTestResult(float(stat), int(df), min(max(p, 0.0), 1.0), levels, data.n)

PointFunction = Callable[[Dataset], float]
