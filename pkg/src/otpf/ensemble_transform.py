"""Apply a transition matrix to an ensemble, deterministically or by sampling.

The deterministic transform replaces each member by the conditional mean of
the coupling column, X^a = X^f P, which preserves the weighted ensemble mean
exactly.  The random variant draws one categorical sample per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transport import TransitionMatrix


__all__ = ["Ensemble", "et_transform", "ot_resample", "mean_identity_check"]


@dataclass(frozen=True)
class Ensemble:
    """M state columns of dimension N; weights default to uniform."""

    states: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[np.newaxis, :]
        if states.ndim != 2 or states.shape[1] < 1:
            raise ValueError(f"states must be (N, M), got {states.shape}")
        if not np.all(np.isfinite(states)):
            raise ValueError("ensemble states must be finite")
        weights = self.weights
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (states.shape[1],):
                raise ValueError("weights length does not match member count")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.states.shape[0]

    @property
    def size(self) -> int:
        return self.states.shape[1]

    @property
    def weight_vector(self) -> np.ndarray:
        """Explicit weights, uniform when none were attached."""
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def mean(self) -> np.ndarray:
        return self.states @ self.weight_vector


def et_transform(prior: Ensemble, transition: TransitionMatrix) -> Ensemble:
    """Deterministic ensemble transform x_j^a = sum_i p_ij x_i^f.

    The output carries the prior's weight vector, so a uniformly weighted
    prior yields a uniformly weighted posterior ensemble.
    """
    if not isinstance(prior, Ensemble):
        prior = Ensemble(prior)
    if transition.size != prior.size:
        raise ValueError(
            f"transition size {transition.size} does not match ensemble {prior.size}"
        )
    return Ensemble(states=prior.states @ transition.p, weights=prior.weights)


def ot_resample(prior: Ensemble, transition: TransitionMatrix, rng) -> Ensemble:
    """Random resampling: member j drawn from the categorical column j of P.

    Draw order is fixed for reproducibility: one uniform array of length M,
    entry j consumed by column j (inverse-CDF on the column's cumulative
    sums).  Output members are copies of prior members.
    """
    if not isinstance(prior, Ensemble):
        prior = Ensemble(prior)
    p = transition.p
    if p.shape[1] != prior.size:
        raise ValueError("transition size does not match ensemble")
    colsums = p.sum(axis=0)
    if np.max(np.abs(colsums - 1.0)) > 1e-10:
        raise ValueError("transition columns must sum to 1")

    cdf = np.cumsum(p, axis=0)
    cdf[-1, :] = 1.0
    draws = rng.random(prior.size)
    rows = np.empty(prior.size, dtype=int)
    for j in range(prior.size):
        rows[j] = int(np.searchsorted(cdf[:, j], draws[j], side="right"))
    return Ensemble(states=prior.states[:, rows].copy(), weights=prior.weights)


def mean_identity_check(prior: Ensemble, posterior: Ensemble, posterior_weights) -> float:
    """Residual of the transform mean identity.

    Returns ``|| sum_j omega_j x_j^a - sum_i w_i^a x_i^f ||`` where omega is
    the prior weight vector (uniform in the base method) and w^a are the
    posterior importance weights.
    """
    w_a = np.asarray(posterior_weights, dtype=float)
    if w_a.shape != (prior.size,):
        raise ValueError("posterior weights length does not match ensemble")
    omega = prior.weight_vector
    lhs = posterior.states @ omega
    rhs = prior.states @ w_a
    return float(np.linalg.norm(lhs - rhs))
