"""Mixture combination, the two training losses, and their gradient routing.

The combined count for sample n is y_n = sum_k g_nk * e_nk. Experts train on
the plain mean-squared error of y against the target; the gate trains on the
same error plus a variance penalty (lambda/K) * sum_k (g_nk - mu_n)^2 that
discourages concentrating all weight on one expert.

Gradient routing is deliberately one-sided: expert parameters see only
d(expert loss)/d(e) with the gate treated as constant, and gate parameters see
only d(gate loss)/d(g) with the expert outputs treated as constant.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError


@dataclass
class BatchPrediction:
    """One batch worth of mixture outputs: expert counts e (N,K), gate rows
    g (N,K), combined predictions y (N,), targets t (N,)."""

    e: np.ndarray
    g: np.ndarray
    y: np.ndarray
    t: np.ndarray

    @classmethod
    def from_outputs(cls, g, e, t):
        return cls(e=e, g=g, y=combine(g, e), t=np.asarray(t, dtype=e.dtype))


@dataclass
class GatingLossBreakdown:
    mse: float
    penalty: float
    mu: np.ndarray  # per-sample gate means
    total: float


def combine(g, e):
    """Weighted sum of expert outputs per sample: y_n = sum_k g_nk e_nk."""
    g = np.asarray(g)
    e = np.asarray(e)
    if g.shape != e.shape or g.ndim != 2:
        raise ValidationError(f"combine expects matching (N, K) arrays, got {g.shape} and {e.shape}")
    return (g * e).sum(axis=1)


def expert_loss(pred):
    """Mean squared error of the combined prediction: (1/N) sum (t - y)^2."""
    r = pred.t - pred.y
    return float((r * r).mean())


def gating_loss(pred, lam):
    """Expert MSE plus the variance regularizer, with its breakdown.

    total = (1/N) sum_n [ (t_n - y_n)^2 + (lam/K) sum_k (g_nk - mu_n)^2 ]
    """
    if lam < 0:
        raise ConfigurationError(f"variance trade-off lambda must be >= 0, got {lam}")
    n, k = pred.g.shape
    mu = pred.g.mean(axis=1)
    dev = pred.g - mu[:, None]
    penalty = float((lam / k) * (dev * dev).sum(axis=1).mean())
    mse = expert_loss(pred)
    return GatingLossBreakdown(mse=mse, penalty=penalty, mu=mu, total=mse + penalty)


def grad_expert_outputs(pred):
    """d(expert loss)/d(e): (2/N) * g_nk * (y_n - t_n), gate held constant.

    The gate weight acts as a per-sample learning rate: an expert the gate
    does not select (g_nk = 0) receives exactly zero gradient.
    """
    n = pred.g.shape[0]
    return (2.0 / n) * pred.g * (pred.y - pred.t)[:, None]


def grad_gate_probs(pred, lam):
    """d(gate loss)/d(g): (2/N) * [ e_nk (y_n - t_n) + (lam/K) (g_nk - mu_n) ].

    Expert outputs are held constant. The mu-dependence contributes nothing
    because sum_k (g_nk - mu_n) is identically zero, so this is the exact
    gradient of gating_loss even for rows perturbed off the simplex. Callers
    chain the result through the softmax Jacobian.
    """
    if lam < 0:
        raise ConfigurationError(f"variance trade-off lambda must be >= 0, got {lam}")
    n, k = pred.g.shape
    mu = pred.g.mean(axis=1)
    resid = (pred.y - pred.t)[:, None]
    return (2.0 / n) * (pred.e * resid + (lam / k) * (pred.g - mu[:, None]))
