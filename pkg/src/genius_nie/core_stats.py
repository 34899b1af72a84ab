"""Regression and sampling primitives used by every estimator in the package.

Least squares goes through a column-pivoted QR factorisation; the explicit
inverse of ``X'X`` is never formed except as ``R^{-1} R^{-T}`` for covariance
matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    InvalidParameter,
    RankDeficient,
    Separation,
    SingleClass,
)

RANK_TOL = 1e-12
SEPARATION_BOUND = 30.0
LOGISTIC_TOL = 1e-10
LOGISTIC_MAXITER = 100


# ---------------------------------------------------------------------------
# Design matrices and fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    """Regressor matrix with column names.

    ``has_intercept`` asserts that column 0 is identically one.
    """

    values: np.ndarray
    column_names: tuple = ()
    has_intercept: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DimensionMismatch("design matrix must be two-dimensional")
        n, p = values.shape
        if p < 1 or n < p:
            raise DimensionMismatch(f"design matrix needs n >= p >= 1, got {n}x{p}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameter("design matrix contains non-finite entries")
        if self.has_intercept and not np.all(values[:, 0] == 1.0):
            raise InvalidParameter("has_intercept set but column 0 is not constant 1")
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise DimensionMismatch(f"{len(names)} column names for {p} columns")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @classmethod
    def build(cls, columns: Sequence[tuple], n: int, intercept: bool = True):
        """Assemble a design from ``(name, vector_or_matrix)`` pairs.

        Matrix-valued entries contribute one column each, suffixed ``name[j]``.
        """
        names, cols = [], []
        if intercept:
            names.append("const")
            cols.append(np.ones(n))
        for name, arr in columns:
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                names.append(name)
                cols.append(arr)
            else:
                for j in range(arr.shape[1]):
                    names.append(f"{name}[{j}]")
                    cols.append(arr[:, j])
        for col in cols:
            if col.shape[0] != n:
                raise DimensionMismatch(f"column of length {col.shape[0]}, expected {n}")
        return cls(np.column_stack(cols), tuple(names), intercept)

    def index(self, name: str) -> int:
        return self.column_names.index(name)


@dataclass
class RegressionFit:
    coefficients: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray
    family: str = "linear"
    converged: bool = True
    column_names: tuple = field(default=())
    n_iter: int = 0

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.column_names.index(name)])

    def se_robust(self, name: str) -> float:
        j = self.column_names.index(name)
        return float(np.sqrt(self.cov_robust[j, j]))

    def se_model(self, name: str) -> float:
        j = self.column_names.index(name)
        return float(np.sqrt(self.cov_model[j, j]))


def _as_design(x) -> DesignMatrix:
    return x if isinstance(x, DesignMatrix) else DesignMatrix(x)


def _pivoted_qr(values: np.ndarray):
    q, r, perm = sla.qr(values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0.0 or np.any(diag < RANK_TOL * diag[0]):
        raise RankDeficient(
            f"design matrix is rank deficient (relative pivot {diag.min() / max(diag[0], 1e-300):.3g})"
        )
    return q, r, perm


def _bread(r: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """(X'X)^{-1} from the pivoted R factor, in original column order."""
    p = r.shape[0]
    rinv = sla.solve_triangular(r, np.eye(p))
    xtx_inv_perm = rinv @ rinv.T
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(p)
    out = xtx_inv_perm[np.ix_(inv_perm, inv_perm)]
    return 0.5 * (out + out.T)


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def ols_fit(x, y, robust: str = "HC0") -> RegressionFit:
    """Ordinary least squares.

    Parameters
    ----------
    x : DesignMatrix or array_like, shape (n, p)
    y : array_like, shape (n,)
    robust : {"HC0", "HC1"}
        Variant used for ``cov_robust``.

    Returns
    -------
    RegressionFit
        ``cov_model`` is ``s^2 (X'X)^{-1}`` with ``s^2 = RSS / (n - p)``.
    """
    x = _as_design(x)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != x.n:
        raise DimensionMismatch(f"response of shape {y.shape} for design with {x.n} rows")
    if not np.all(np.isfinite(y)):
        raise InvalidParameter("response contains non-finite values")
    q, r, perm = _pivoted_qr(x.values)
    beta_perm = sla.solve_triangular(r, q.T @ y)
    beta = np.empty_like(beta_perm)
    beta[perm] = beta_perm
    fitted = x.values @ beta
    resid = y - fitted
    bread = _bread(r, perm)
    n, p = x.n, x.p
    sigma2 = float(resid @ resid) / (n - p) if n > p else 0.0
    fit = RegressionFit(
        coefficients=beta,
        fitted=fitted,
        residuals=resid,
        cov_model=sigma2 * bread,
        cov_robust=np.zeros((p, p)),
        family="linear",
        converged=True,
        column_names=x.column_names,
    )
    fit.cov_robust = _sandwich(bread, x.values, resid, robust)
    return fit


def _sandwich(bread, values, resid, kind):
    meat = (values * (resid**2)[:, None]).T @ values
    cov = _symmetrize(bread @ meat @ bread)
    n, p = values.shape
    if kind == "HC0":
        return cov
    if kind == "HC1":
        return cov * (n / (n - p)) if n > p else cov
    raise InvalidParameter(f"unknown robust covariance variant {kind!r}")


def sandwich_cov(fit: RegressionFit, x, kind: str = "HC0") -> np.ndarray:
    """Heteroskedasticity-consistent covariance ``(X'X)^-1 X' diag(e^2) X (X'X)^-1``.

    ``kind="HC1"`` applies the ``n / (n - p)`` small-sample factor.
    """
    x = _as_design(x)
    if fit.family != "linear":
        raise InvalidParameter("sandwich_cov is defined for linear fits only")
    if fit.residuals.shape[0] != x.n:
        raise DimensionMismatch("fit and design have different numbers of rows")
    _, r, perm = _pivoted_qr(x.values)
    return _sandwich(_bread(r, perm), x.values, fit.residuals, kind)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _loglik(eta, a):
    # sum a*eta - log(1 + e^eta), evaluated stably
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def logistic_fit(x, a, bound: float = SEPARATION_BOUND) -> RegressionFit:
    """Binomial maximum likelihood by iteratively reweighted least squares.

    Stops when the relative change in log-likelihood falls below 1e-10, or
    after 100 iterations with ``converged=False``. Raises :class:`Separation`
    as soon as any coefficient exceeds ``bound`` in absolute value.
    """
    x = _as_design(x)
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.shape[0] != x.n:
        raise DimensionMismatch(f"outcome of shape {a.shape} for design with {x.n} rows")
    if not np.all((a == 0.0) | (a == 1.0)):
        raise InvalidParameter("logistic outcome must be coded 0/1")
    if a.min() == a.max():
        raise SingleClass("logistic outcome has a single class")
    X = x.values
    _pivoted_qr(X)

    beta = np.zeros(x.p)
    eta = X @ beta
    ll = _loglik(eta, a)
    converged = False
    it = 0
    for it in range(1, LOGISTIC_MAXITER + 1):
        prob = _expit(eta)
        w = prob * (1.0 - prob)
        z = eta + (a - prob) / w
        sw = np.sqrt(w)
        q, r, perm = _pivoted_qr(X * sw[:, None])
        step = sla.solve_triangular(r, q.T @ (z * sw))
        beta = np.empty_like(step)
        beta[perm] = step
        if np.max(np.abs(beta)) > bound:
            raise Separation(
                f"logistic coefficients diverging (max |coef| = {np.max(np.abs(beta)):.3g} > {bound})"
            )
        eta = X @ beta
        ll_new = _loglik(eta, a)
        if abs(ll_new - ll) < LOGISTIC_TOL * (abs(ll_new) + LOGISTIC_TOL):
            ll = ll_new
            converged = True
            break
        ll = ll_new

    prob = _expit(eta)
    w = prob * (1.0 - prob)
    _, r, perm = _pivoted_qr(X * np.sqrt(w)[:, None])
    cov_model = _bread(r, perm)
    resid = a - prob
    meat = (X * (resid**2)[:, None]).T @ X
    cov_robust = _symmetrize(cov_model @ meat @ cov_model)
    return RegressionFit(
        coefficients=beta,
        fitted=prob,
        residuals=resid,
        cov_model=cov_model,
        cov_robust=cov_robust,
        family="logistic",
        converged=converged,
        column_names=x.column_names,
        n_iter=it,
    )


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomStream:
    """A reproducible substream identified by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints; :meth:`child` appends to
    it, so nested tasks (replicate, then variable) get disjoint streams that
    do not depend on scheduling.
    """

    seed: int
    stream_id: Union[int, tuple] = 0

    @property
    def key(self) -> tuple:
        sid = self.stream_id
        return tuple(int(s) for s in sid) if isinstance(sid, tuple) else (int(sid),)

    def child(self, index: int) -> "RandomStream":
        return RandomStream(self.seed, self.key + (int(index),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class Bernoulli:
    p: Union[float, np.ndarray] = 0.5


def sample(dist, stream: RandomStream, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. values from ``dist`` using a fresh generator for ``stream``.

    ``Normal.mean``/``Normal.sd`` and ``Bernoulli.p`` may be length-``n`` arrays
    for conditional draws. Bernoulli draws compare uniforms against ``p`` so
    two calls with the same stream share the underlying uniforms.
    """
    n = int(n)
    if n < 0:
        raise InvalidParameter("sample size must be non-negative")
    rng = stream.generator()
    if isinstance(dist, Normal):
        sd = np.asarray(dist.sd, dtype=float)
        if np.any(~np.isfinite(sd)) or np.any(sd <= 0):
            raise InvalidParameter("normal sd must be positive")
        return dist.mean + sd * rng.standard_normal(n)
    if isinstance(dist, Bernoulli):
        p = np.asarray(dist.p, dtype=float)
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidParameter("bernoulli p must lie in [0, 1]")
        return (rng.random(n) < p).astype(float)
    raise InvalidParameter(f"unsupported distribution {dist!r}")


def batch_wls_coef(x: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Weighted least squares of one response on one design, for many weight vectors.

    ``weights`` has shape (B, n). Bootstrap resample counts used as weights
    give the same fit as duplicating rows. Returns ``(coef, ok)`` with
    ``coef`` of shape (B, p); rows whose weighted design is rank deficient
    have ``ok`` False and nan coefficients.
    """
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    sw = np.sqrt(weights)
    xw = sw[:, :, None] * x[None, :, :]
    q, r = np.linalg.qr(xw)
    diag = np.abs(np.diagonal(r, axis1=1, axis2=2))
    scale = np.sqrt((weights @ x**2).max(axis=1))
    ok = np.all(diag > RANK_TOL * scale[:, None], axis=1)
    qty = np.einsum("bnp,bn->bp", q, sw * y[None, :])
    coef = np.full((weights.shape[0], x.shape[1]), np.nan)
    if ok.any():
        coef[ok] = np.linalg.solve(r[ok], qty[ok][:, :, None])[:, :, 0]
    return coef, ok
