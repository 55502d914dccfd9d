"""Diagonal 2D Gaussian mixture and Bernoulli mixture heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

from .._kernels import scatter_add_rows

LOG2PI = float(np.log(2 * np.pi))
LOGSIG_RANGE = (-7.0, 3.0)
THETA_EPS = 1e-7
THETA_LOGIT_MAX = float(np.log((1 - THETA_EPS) / THETA_EPS))


@dataclass
class GmmParams2D:
    pi: np.ndarray  # (K,)
    mu: np.ndarray  # (K, 2)
    sigma: np.ndarray  # (K, 2)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 2)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1, 2)
        if not (len(self.pi) == len(self.mu) == len(self.sigma)):
            raise ValueError("pi, mu and sigma disagree on the component count")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1) > 1e-6:
            raise ValueError("pi must lie on the simplex")

    @property
    def K(self):
        return len(self.pi)


@dataclass
class BernMixParams:
    alpha: np.ndarray  # (K,)
    theta: np.ndarray  # (K, S)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.theta = np.clip(np.asarray(self.theta, dtype=np.float64).reshape(len(self.alpha), -1),
                             THETA_EPS, 1 - THETA_EPS)
        if np.any(self.alpha < 0) or abs(self.alpha.sum() - 1) > 1e-6:
            raise ValueError("alpha must lie on the simplex")


# ---------------------------------------------------------------- GMM

def gmm_nll(p: GmmParams2D, point) -> float:
    x = np.asarray(point, dtype=np.float64)
    z = (x - p.mu) / p.sigma
    comp = np.log(np.maximum(p.pi, 1e-300)) - 0.5 * (z * z).sum(1) - np.log(p.sigma).sum(1) - LOG2PI
    return float(-logsumexp(comp))


def gmm_sample(p: GmmParams2D, tau: float, rng) -> np.ndarray:
    """tau = 0 is greedy: mean of the heaviest component. Otherwise scales are sigma * tau."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if tau == 0:
        return p.mu[int(np.argmax(p.pi))].copy()
    k = int(rng.choice(p.K, p=p.pi / p.pi.sum()))
    return p.mu[k] + p.sigma[k] * tau * rng.standard_normal(2)


def gmm_split(raw, K, logsig_range=LOGSIG_RANGE):
    """Head output (N, 5K) -> logits (N,K), mu (N,K,2), logsig (N,K,2) clipped to ``logsig_range``."""
    logits = raw[:, :K]
    mu = raw[:, K:3 * K].reshape(-1, K, 2)
    ls_raw = raw[:, 3 * K:5 * K].reshape(-1, K, 2)
    logsig = np.clip(ls_raw, *logsig_range)
    return logits, mu, logsig, ls_raw


def gmm_from_raw(raw_row, K, logsig_range=LOGSIG_RANGE) -> GmmParams2D:
    logits, mu, logsig, _ = gmm_split(np.asarray(raw_row, dtype=np.float64)[None], K, logsig_range)
    return GmmParams2D(softmax(logits[0]), mu[0], np.exp(logsig[0]))


def gmm_nll_raw(raw, x, K, logsig_range=LOGSIG_RANGE):
    """Per-row NLL and its gradient with respect to the raw head outputs."""
    logits, mu, logsig, ls_raw = gmm_split(raw, K, logsig_range)
    inv = np.exp(-logsig)
    z = (x[:, None, :] - mu) * inv
    logpi = log_softmax(logits, axis=1)
    comp = logpi - 0.5 * (z * z).sum(2) - logsig.sum(2) - LOG2PI
    lse = logsumexp(comp, axis=1)
    nll = -lse
    gamma = np.exp(comp - lse[:, None])
    dlogits = np.exp(logpi) - gamma
    dmu = -gamma[:, :, None] * z * inv
    dls = gamma[:, :, None] * (1 - z * z)
    dls = np.where((ls_raw >= logsig_range[0]) & (ls_raw <= logsig_range[1]), dls, 0)
    draw = np.concatenate([dlogits, dmu.reshape(len(raw), -1), dls.reshape(len(raw), -1)], axis=1)
    return nll, draw.astype(raw.dtype, copy=False)


# ---------------------------------------------------------------- Bernoulli mixture

def bernmix_logprob(p: BernMixParams, edges) -> float:
    e = np.asarray(edges, dtype=bool)
    lt = np.where(e, np.log(p.theta), np.log1p(-p.theta)).sum(1)
    return float(logsumexp(np.log(np.maximum(p.alpha, 1e-300)) + lt))


def bernmix_sample(p: BernMixParams, rng) -> np.ndarray:
    k = int(rng.choice(len(p.alpha), p=p.alpha / p.alpha.sum()))
    return rng.random(p.theta.shape[1]) < p.theta[k]


def bernmix_from_raw(alpha_logits, theta_logits) -> BernMixParams:
    a = np.asarray(alpha_logits, dtype=np.float64)
    t = np.asarray(theta_logits, dtype=np.float64).reshape(-1, len(a))
    return BernMixParams(softmax(a), expit(np.clip(t, -THETA_LOGIT_MAX, THETA_LOGIT_MAX)).T)


def bernmix_nll_raw(alpha_logits, theta_logits, targets, seg):
    """Batched mixture NLL.

    alpha_logits (T, Kb) per step; theta_logits (N, Kb) per candidate entry;
    entry n belongs to step seg[n] with target targets[n]. Returns per-step
    NLL (T,) and gradients of those NLLs with respect to both inputs.
    """
    T, Kb = alpha_logits.shape
    tl = np.clip(theta_logits, -THETA_LOGIT_MAX, THETA_LOGIT_MAX)
    y = targets.astype(theta_logits.dtype)[:, None]
    # log theta = -softplus(-l), log(1 - theta) = -softplus(l)
    ll = -np.logaddexp(0, -tl) * y - np.logaddexp(0, tl) * (1 - y)
    per_step = scatter_add_rows(ll, seg, T) if len(seg) else np.zeros((T, Kb), dtype=alpha_logits.dtype)
    loga = log_softmax(alpha_logits, axis=1)
    joint = loga + per_step
    lse = logsumexp(joint, axis=1)
    rho = np.exp(joint - lse[:, None])
    dalpha = np.exp(loga) - rho
    theta = expit(tl)
    dtheta = -rho[seg] * (y - theta)
    dtheta = np.where(np.abs(theta_logits) <= THETA_LOGIT_MAX, dtheta, 0)
    return -lse, dalpha.astype(alpha_logits.dtype, copy=False), dtheta.astype(theta_logits.dtype, copy=False)
