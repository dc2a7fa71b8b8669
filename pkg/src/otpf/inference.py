"""Importance weights, weighted moment estimators, and analytic posteriors.

The analytic posteriors cover the two scalar benchmark problems: a Gaussian
conjugate update and a Gaussian likelihood against a uniform prior (a
truncated Gaussian on [0, 1]).  All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate


__all__ = [
    "DegenerateWeights",
    "WeightedSamples",
    "GaussianPosterior",
    "TruncatedGaussianPosterior",
    "importance_weights",
    "importance_weights_from_log",
    "weighted_moments",
    "moment_summary",
    "analytic_posterior_moments",
]

_QUAD_TOL = 1e-10


class DegenerateWeights(ValueError):
    """All likelihoods vanished; signals filter divergence upstream."""


def _check_probability_vector(w, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise ValueError(f"{name} must be a nonempty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be nonnegative and finite")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1, got {w.sum()!r}")
    return w


@dataclass(frozen=True)
class WeightedSamples:
    """M state columns of dimension N with a probability weight vector."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[np.newaxis, :]
        if values.ndim != 2:
            raise ValueError(f"values must be (N, M), got {values.shape}")
        weights = _check_probability_vector(self.weights, "weights")
        if weights.size != values.shape[1]:
            raise ValueError("weights length does not match sample count")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)


def importance_weights(likelihoods, prior_weights=None) -> np.ndarray:
    """Normalized posterior weights w_i = l_i * w_i^f / sum_k l_k * w_k^f.

    ``prior_weights`` defaults to uniform.  Raises DegenerateWeights when
    every weighted likelihood vanishes.
    """
    lik = np.asarray(likelihoods, dtype=float)
    if lik.ndim != 1 or lik.size < 1:
        raise ValueError("likelihoods must be a nonempty vector")
    if np.any(lik < 0) or not np.all(np.isfinite(lik)):
        raise ValueError("likelihoods must be nonnegative and finite")
    if prior_weights is None:
        prior = np.full(lik.size, 1.0 / lik.size)
    else:
        prior = _check_probability_vector(prior_weights, "prior_weights")
        if prior.size != lik.size:
            raise ValueError("prior weights length does not match likelihoods")
    w = lik * prior
    total = w.sum()
    if total <= 0.0:
        raise DegenerateWeights("all weighted likelihoods are zero")
    return w / total


def importance_weights_from_log(log_likelihoods, prior_weights=None) -> np.ndarray:
    """Importance weights from log likelihoods, shift-stabilized.

    Mathematically identical to ``importance_weights(exp(l), w)`` but immune
    to underflow when likelihoods span hundreds of orders of magnitude.
    """
    ll = np.asarray(log_likelihoods, dtype=float)
    if ll.ndim != 1 or ll.size < 1:
        raise ValueError("log likelihoods must be a nonempty vector")
    if np.any(np.isnan(ll)) or np.any(ll == np.inf):
        raise ValueError("log likelihoods must be finite or -inf")
    shift = ll.max()
    if shift == -np.inf:
        raise DegenerateWeights("all log likelihoods are -inf")
    return importance_weights(np.exp(ll - shift), prior_weights)


def weighted_moments(samples: WeightedSamples, order: int) -> np.ndarray:
    """Per-component weighted mean (order 1) or central moment (orders 2-4)."""
    if not isinstance(samples, WeightedSamples):
        raise TypeError("samples must be WeightedSamples")
    if order not in (1, 2, 3, 4):
        raise ValueError(f"moment order must be in 1..4, got {order}")
    x = samples.values
    w = samples.weights
    mean = x @ w
    if order == 1:
        return mean
    centered = x - mean[:, np.newaxis]
    return (centered**order) @ w


def moment_summary(samples: WeightedSamples) -> tuple[float, float, float, float]:
    """(mean, variance, third, fourth) central moments of scalar samples."""
    if samples.values.shape[0] != 1:
        raise ValueError("moment_summary expects scalar samples")
    return tuple(float(weighted_moments(samples, r)[0]) for r in (1, 2, 3, 4))


@dataclass(frozen=True)
class GaussianPosterior:
    """Gaussian posterior with closed-form moments."""

    mean: float
    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")

    def moments(self) -> tuple[float, float, float, float]:
        return (self.mean, self.variance, 0.0, 3.0 * self.variance**2)


@dataclass(frozen=True)
class TruncatedGaussianPosterior:
    """Density proportional to exp(-(x - center)^2 / (2 scale2)) on [lo, hi].

    The normalization constant and the moments are computed by adaptive
    Gauss-Kronrod quadrature to absolute tolerance 1e-10; the density then
    integrates to one within 1e-8.
    """

    center: float
    scale2: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.scale2 <= 0:
            raise ValueError("scale2 must be positive")
        if not self.lo < self.hi:
            raise ValueError("interval must be nonempty")

    def _quad(self, f) -> float:
        val, err = integrate.quad(f, self.lo, self.hi, epsabs=_QUAD_TOL, limit=200)
        if not math.isfinite(val) or err > 1e-6:
            raise ArithmeticError(f"quadrature did not converge: err={err}")
        return val

    @property
    def normalization(self) -> float:
        """Integral of the unnormalized density over [lo, hi]."""
        c, s2 = self.center, self.scale2
        return self._quad(lambda x: math.exp(-((x - c) ** 2) / (2.0 * s2)))

    def density(self, x) -> np.ndarray:
        z = self.normalization
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        out = np.exp(-((x - self.center) ** 2) / (2.0 * self.scale2)) / z
        return np.where(inside, out, 0.0)

    def moments(self) -> tuple[float, float, float, float]:
        z = self.normalization
        c, s2 = self.center, self.scale2

        def kernel(x):
            return math.exp(-((x - c) ** 2) / (2.0 * s2)) / z

        mean = self._quad(lambda x: x * kernel(x))
        central = [
            self._quad(lambda x, r=r: (x - mean) ** r * kernel(x)) for r in (2, 3, 4)
        ]
        return (mean, central[0], central[1], central[2])


def analytic_posterior_moments(posterior) -> tuple[float, float, float, float]:
    """First four moments (mean plus central 2-4) of an analytic posterior."""
    if not isinstance(posterior, (GaussianPosterior, TruncatedGaussianPosterior)):
        raise TypeError(f"unsupported posterior type: {type(posterior)!r}")
    return posterior.moments()
