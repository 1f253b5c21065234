"""Gradient/hessian computations on the logit (raw score) scale."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateProbability

PROB_CLAMP = 1e-12
# floor applied to per-row hessians before tree growth; focal hessians can go
# negative away from the optimum
HESS_FLOOR = 1e-6


def softmax(raw: np.ndarray) -> np.ndarray:
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def squared_error_grad(y, pred, weight=None):
    g = pred - y
    h = np.ones_like(pred)
    if weight is not None:
        g = g * weight
        h = h * weight
    return g, h


def softmax_ce_grad(labels, raw):
    p = softmax(raw)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    return p - onehot, p * (1.0 - p)


def _focal_parts(pt, gamma):
    """Return f(u) = u * dL/du and f'(u) for L(u) = -(1-u)^gamma * log(u)."""
    q = 1.0 - pt
    logp = np.log(pt)
    if gamma == 0.0:
        f = -np.ones_like(pt)
        df = np.zeros_like(pt)
        return f, df
    qg1 = q ** (gamma - 1.0)
    f = gamma * qg1 * pt * logp - q * qg1
    df = gamma * qg1 * (logp + 2.0)
    if gamma != 1.0:
        df = df - gamma * (gamma - 1.0) * q ** (gamma - 2.0) * pt * logp
    return f, df


def focal_grad(labels, raw, gamma):
    """Row-wise focal loss gradient and diagonal hessian w.r.t. the raw scores."""
    p = np.clip(softmax(raw), PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = len(labels)
    pt = p[np.arange(n), labels]
    f, df = _focal_parts(pt, gamma)
    delta = np.zeros_like(p)
    delta[np.arange(n), labels] = 1.0
    d = delta - p
    grad = f[:, None] * d
    hess = df[:, None] * pt[:, None] * d * d - f[:, None] * p * (1.0 - p)
    return grad, hess


def focal_loss_grad(p, y: int, focal_gamma: float):
    """Focal loss of one probability vector, with gradient and diagonal hessian.

    Derivatives are taken with respect to the logits ``log(p)``; with
    ``focal_gamma == 0`` this is exactly softmax cross-entropy.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or not 0 <= y < p.size:
        raise DegenerateProbability("p must be a vector and y a valid class index")
    if focal_gamma < 0:
        raise DegenerateProbability("focal_gamma must be >= 0")
    if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any() or abs(p.sum() - 1.0) > 1e-9:
        raise DegenerateProbability("p must be a probability vector")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pt = pc[y]
    loss = float(-((1.0 - pt) ** focal_gamma) * np.log(pt))
    g, h = focal_grad(np.array([y]), np.log(pc)[None, :], focal_gamma)
    return max(loss, 0.0), g[0], h[0]
