"""Monte Carlo study of the naive, GENIUS and oracle NIE estimators.

Data-generating process (absent latents are exact zeros)::

    W ~ N(0, 1)                      DAGs a, c, d
    U ~ N(0, 1)                      DAGs b, c, d
    A | W ~ Bernoulli(expit(W))
    M | A, U ~ N(A + U, s(A)),       s(A) = |0.5 + 0.5 (A + offset)|
    M* = M + N(0, 1)                 DAG d only (observed mediator)
    Y = A + M - U - W + N(0, 1)

``s(A)`` is a standard deviation by default (``sd_is_second_param``) or a
variance. ``offset`` defaults to ``DEFAULT_NOISE_OFFSET`` (1), giving mediator sds
of 1 and 1.5 for the two exposure arms. ``offset=0`` gives sds of 0.5 and 1.

The true NIE(1, 0) is 1 in every DAG.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_stats import Bernoulli, Normal, RandomStream, sample
from .dataset import Dataset
from .errors import EmptyInput, InvalidParameter, MediationError, TooManyFailures
from .genius import bootstrap_nie, nie_genius
from .mediation_formula import nie_naive, nie_oracle

DAGS = ("a", "b", "c", "d")
METHODS = ("naive", "genius", "oracle")
TRUE_NIE = 1.0
MAX_REPLICATE_FAILURE_RATE = 0.05
WORKERS_ENV = "GENIUS_NIE_WORKERS"
DEFAULT_NOISE_OFFSET = 1.0

_HAS_W = {"a", "c", "d"}
_HAS_U = {"b", "c", "d"}

# child stream indices of a replicate stream
_DGP_STREAM = 0
_BOOT_STREAM = 1
# per-variable child indices under the DGP stream
_W, _U, _A, _M, _EPS, _Y = range(6)


@dataclass(frozen=True)
class DgpConfig:
    dag: str = "b"
    n: int = 1000
    seed: int = 0
    sd_is_second_param: bool = True
    noise_offset: float = DEFAULT_NOISE_OFFSET

    def __post_init__(self):
        if self.dag not in DAGS:
            raise InvalidParameter(f"dag must be one of {DAGS}, got {self.dag!r}")
        if int(self.n) < 10:
            raise InvalidParameter(f"n must be at least 10, got {self.n}")


def mediator_noise_sd(a, sd_is_second_param: bool = True, offset: float = DEFAULT_NOISE_OFFSET):
    """Standard deviation of M given A: ``|0.5 + 0.5 (a + offset)|`` or its square root."""
    s = np.abs(0.5 + 0.5 * (np.asarray(a, dtype=float) + offset))
    return s if sd_is_second_param else np.sqrt(s)


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def generate_dataset(cfg: DgpConfig, stream: Optional[RandomStream] = None) -> Dataset:
    """Draw one data set.

    Every variable has its own substream, drawn whether or not the DAG uses
    it, so data sets for different DAGs with the same stream share all the
    noise they have in common.
    """
    stream = stream if stream is not None else RandomStream(cfg.seed, 0)
    st = stream.child(_DGP_STREAM)
    n = int(cfg.n)
    std = Normal(0.0, 1.0)
    w = sample(std, st.child(_W), n) if cfg.dag in _HAS_W else np.zeros(n)
    u = sample(std, st.child(_U), n) if cfg.dag in _HAS_U else np.zeros(n)
    a = sample(Bernoulli(expit(w)), st.child(_A), n)
    m = a + u + sample(Normal(0.0, mediator_noise_sd(a, cfg.sd_is_second_param, cfg.noise_offset)), st.child(_M), n)
    m_obs = m + sample(std, st.child(_EPS), n) if cfg.dag == "d" else m
    y = a + m - u - w + sample(std, st.child(_Y), n)
    return Dataset(
        y=y,
        m=m_obs,
        a=a,
        latent_u=u if cfg.dag in _HAS_U else None,
        latent_w=w if cfg.dag in _HAS_W else None,
        true_m=m,
    )


# ---------------------------------------------------------------------------
# Probability limits of the naive estimator
# ---------------------------------------------------------------------------


def naive_plim(dag: str, sd_is_second_param: bool = True, noise_offset: float = DEFAULT_NOISE_OFFSET) -> float:
    """Large-sample limit of the naive NIE(1, 0) under the DGP above.

    ``P(A = 1) = 1/2`` in every DAG (``E[expit(W)] = 1/2``). Partialling ``A``
    out of ``M`` leaves ``U + s(A) Z (+ eps)``, which is uncorrelated with
    ``W``. So the ``M`` coefficient is ``E[cov(M*, Y | A)] / E[var(M* | A)]``
    with ``cov(M*, Y | A) = var(M | A) - var(U)`` and
    ``var(M* | A) = var(M | A) + var(eps)``. ``beta_a`` stays 1.
    """
    if dag not in DAGS:
        raise InvalidParameter(f"unknown dag {dag!r}")
    var_u = 1.0 if dag in _HAS_U else 0.0
    var_eps = 1.0 if dag == "d" else 0.0
    s2 = mediator_noise_sd(np.array([0.0, 1.0]), sd_is_second_param, noise_offset) ** 2
    var_m = var_u + s2.mean()
    return float((var_m - var_u) / (var_m + var_eps))


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    dags: tuple = DAGS
    methods: tuple = METHODS
    replications: int = 500
    n: int = 1000
    a: float = 1.0
    a_star: float = 0.0
    bootstrap_B: int = 200
    seed: int = 20240101
    sd_is_second_param: bool = True
    noise_offset: float = DEFAULT_NOISE_OFFSET
    workers: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "dags", tuple(self.dags))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.dags or any(d not in DAGS for d in self.dags):
            raise InvalidParameter(f"dags must be a non-empty subset of {DAGS}")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise InvalidParameter(f"methods must be a non-empty subset of {METHODS}")
        if int(self.replications) < 1:
            raise InvalidParameter("replications must be at least 1")
        if int(self.n) < 10:
            raise InvalidParameter("n must be at least 10")
        if self.bootstrap_B and int(self.bootstrap_B) < 100:
            raise InvalidParameter("bootstrap_B must be 0 (off) or at least 100")
        if self.workers is not None and int(self.workers) < 1:
            raise InvalidParameter("workers must be positive")

    @property
    def true_nie(self) -> float:
        return TRUE_NIE * (self.a - self.a_star)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dags"] = list(self.dags)
        d["methods"] = list(self.methods)
        return d


@dataclass
class ReplicateRecord:
    dag: str
    method: str
    replicate: int
    estimate: float
    var_delta: float
    hit_delta: float
    hit_bootstrap: float
    se_bootstrap: float
    failed: bool = False
    error: str = ""


@dataclass
class ReportRow:
    dag: str
    method: str
    bias: float
    mc_variance: float
    proportion_bias_pct: float
    mse: float
    mean_var_estimate: float
    coverage_delta: float
    coverage_bootstrap: float
    n_replicates: int
    n_failed_replicates: int = 0
    variance_defined: bool = True


@dataclass
class SimulationReport:
    config: StudyConfig
    rows: list
    replicates: list = field(default_factory=list)

    def row(self, dag: str, method: str) -> ReportRow:
        for r in self.rows:
            if r.dag == dag and r.method == method:
                return r
        raise KeyError((dag, method))

    def estimates(self, dag: str, method: str) -> np.ndarray:
        return np.array([r.estimate for r in self.replicates
                         if r.dag == dag and r.method == method and not r.failed])


_ESTIMATORS = {"naive": nie_naive, "genius": nie_genius, "oracle": nie_oracle}


def _covers(ci, truth):
    return float(ci[0] <= truth <= ci[1])


def run_replicate(cfg: StudyConfig, dag: str, r: int) -> list:
    """All methods on replicate ``r`` of ``dag``."""
    stream = RandomStream(cfg.seed, r)
    data = generate_dataset(DgpConfig(dag, cfg.n, cfg.seed, cfg.sd_is_second_param, cfg.noise_offset), stream)
    truth = cfg.true_nie
    out = []
    for method in cfg.methods:
        try:
            est = _ESTIMATORS[method](data, cfg.a, cfg.a_star)
            hit_boot = se_boot = math.nan
            if cfg.bootstrap_B:
                boot = bootstrap_nie(
                    data, cfg.a, cfg.a_star, cfg.bootstrap_B, cfg.seed, method=method,
                    stream=stream.child(_BOOT_STREAM).child(METHODS.index(method)),
                )
                hit_boot, se_boot = _covers(boot.ci, truth), boot.se
            out.append(ReplicateRecord(dag, method, r, est.nie, est.var_delta,
                                       _covers(est.ci_delta, truth), hit_boot, se_boot))
        except MediationError as exc:
            out.append(ReplicateRecord(dag, method, r, math.nan, math.nan, math.nan, math.nan,
                                       math.nan, True, f"{type(exc).__name__}: {exc}"))
    return out


def _run_chunk(args):
    cfg, tasks = args
    out = []
    for dag, r in tasks:
        out.extend(run_replicate(cfg, dag, r))
    return out


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidParameter(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def operating_characteristics(estimates, var_estimates, ci_hits_delta, ci_hits_boot=None,
                              true_value: float = TRUE_NIE, dag: str = "", method: str = "",
                              n_failed: int = 0) -> ReportRow:
    """Summarise replicate results.

    The Monte Carlo variance uses the population form (divide by R), so
    ``mse == bias**2 + mc_variance`` up to rounding. With a single
    replicate the variance is reported as 0 and ``variance_defined`` is
    False.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise EmptyInput("no estimates to summarise")
    bias = float(est.mean() - true_value)
    mc_var = float(np.mean((est - est.mean()) ** 2))
    mse = float(np.mean((est - true_value) ** 2))
    prop = 100.0 * bias / true_value if true_value != 0 else math.nan
    ve = np.asarray(var_estimates, dtype=float)
    hd = np.asarray(ci_hits_delta, dtype=float)
    hb = None if ci_hits_boot is None else np.asarray(ci_hits_boot, dtype=float)
    cov_boot = math.nan if hb is None or hb.size == 0 or np.all(np.isnan(hb)) else float(np.nanmean(hb))
    return ReportRow(
        dag=dag,
        method=method,
        bias=bias,
        mc_variance=mc_var,
        proportion_bias_pct=prop,
        mse=mse,
        mean_var_estimate=float(ve.mean()) if ve.size else math.nan,
        coverage_delta=float(hd.mean()) if hd.size else math.nan,
        coverage_bootstrap=cov_boot,
        n_replicates=int(est.size),
        n_failed_replicates=int(n_failed),
        variance_defined=est.size > 1,
    )


def run_study(cfg: StudyConfig, progress=None) -> SimulationReport:
    """Run every (dag, replicate) task and aggregate per (dag, method).

    Replicate ``r`` uses ``RandomStream(seed, r)`` whatever the DAG, worker
    count or execution order, and records are sorted before aggregation, so
    the report is identical for any ``workers`` setting.
    """
    tasks = [(dag, r) for dag in cfg.dags for r in range(cfg.replications)]
    workers = cfg.workers if cfg.workers is not None else default_workers()
    if workers <= 1:
        records = []
        for i, (dag, r) in enumerate(tasks):
            records.extend(run_replicate(cfg, dag, r))
            if progress is not None:
                progress(i + 1, len(tasks))
    else:
        size = max(1, math.ceil(len(tasks) / (4 * workers)))
        chunks = [(cfg, tasks[i:i + size]) for i in range(0, len(tasks), size)]
        records = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, chunks):
                records.extend(part)
    order = {m: i for i, m in enumerate(cfg.methods)}
    records.sort(key=lambda rec: (cfg.dags.index(rec.dag), order[rec.method], rec.replicate))

    rows = []
    for dag in cfg.dags:
        for method in cfg.methods:
            cell = [rec for rec in records if rec.dag == dag and rec.method == method]
            ok = [rec for rec in cell if not rec.failed]
            failed = len(cell) - len(ok)
            if failed > MAX_REPLICATE_FAILURE_RATE * len(cell):
                raise TooManyFailures(
                    f"{failed} of {len(cell)} replicates failed for dag {dag}, method {method}: "
                    f"{next(rec.error for rec in cell if rec.failed)}"
                )
            rows.append(operating_characteristics(
                [rec.estimate for rec in ok],
                [rec.var_delta for rec in ok],
                [rec.hit_delta for rec in ok],
                [rec.hit_bootstrap for rec in ok] if cfg.bootstrap_B else None,
                cfg.true_nie, dag, method, failed,
            ))
    return SimulationReport(cfg, rows, records)
