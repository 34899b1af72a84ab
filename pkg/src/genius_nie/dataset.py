"""Container for observed (and, in simulations, latent) mediation data."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, InvalidParameter

LATENT_FIELDS = ("latent_u", "latent_w", "true_m")


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y``, mediator ``m``, exposure ``a`` and covariates ``c`` (n x k).

    ``m`` is whatever mediator was observed, possibly with measurement
    error. ``latent_u``, ``latent_w`` and ``true_m`` are only filled by the
    simulator and are used by the oracle estimator.
    """

    y: np.ndarray
    m: np.ndarray
    a: np.ndarray
    c: Optional[np.ndarray] = None
    latent_u: Optional[np.ndarray] = None
    latent_w: Optional[np.ndarray] = None
    true_m: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _vector(self.y, "y")
        n = y.shape[0]
        object.__setattr__(self, "y", y)
        for name in ("m", "a") + LATENT_FIELDS:
            val = getattr(self, name)
            if val is None:
                continue
            vec = _vector(val, name)
            if vec.shape[0] != n:
                raise DimensionMismatch(f"column {name} has length {vec.shape[0]}, expected {n}")
            object.__setattr__(self, name, vec)
        c = np.zeros((n, 0)) if self.c is None else np.asarray(self.c, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] != n:
            raise DimensionMismatch(f"covariate matrix of shape {c.shape} for n = {n}")
        if not np.all(np.isfinite(c)):
            raise InvalidParameter("covariates contain non-finite values")
        object.__setattr__(self, "c", c)
        if np.ptp(self.a) == 0.0:
            raise InvalidParameter("exposure is constant")
        if np.ptp(self.m) == 0.0:
            raise InvalidParameter("mediator is constant")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.c.shape[1]

    @property
    def exposure_is_binary(self) -> bool:
        return bool(np.all((self.a == 0.0) | (self.a == 1.0)))

    def take(self, idx) -> "Dataset":
        """Row subset (used for resampling); validation is re-run."""
        kw = {}
        for name in ("y", "m", "a") + LATENT_FIELDS:
            val = getattr(self, name)
            kw[name] = None if val is None else val[idx]
        kw["c"] = self.c[idx]
        return Dataset(**kw)

    def with_mediator(self, m) -> "Dataset":
        return replace(self, m=np.asarray(m, dtype=float))


def _vector(x, name):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatch(f"column {name} must be one-dimensional")
    if not np.all(np.isfinite(v)):
        raise InvalidParameter(f"column {name} contains non-finite values")
    return v
