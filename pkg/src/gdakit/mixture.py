"""Gaussian mixture fitting with diagonal covariances via EM.

Written directly (rather than wrapping a library) so the per-iteration
log-likelihood trace is available: monotonicity of that trace is asserted in
the test suite, and cluster assignments feed the domain-estimation stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .transforms import rng_stream

VARIANCE_FLOOR = 1e-6
DEGENERATE_WEIGHT = 1e-8


@dataclass
class MixtureModel:
    weights: np.ndarray          # (k,), sums to 1
    means: np.ndarray            # (k, d)
    variances: np.ndarray        # (k, d), diagonal covariances
    final_log_likelihood: float
    log_likelihood_trace: list[float]
    n_iter: int

    @property
    def k(self) -> int:
        return len(self.weights)


def _log_prob(x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Per-sample, per-component log joint densities, shape (m, k)."""
    d = x.shape[1]
    const = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * np.sum(np.log(variances), axis=1)
    quad = 0.5 * ((x[:, None, :] - means[None, :, :]) ** 2 / variances[None, :, :]).sum(axis=2)
    return np.log(weights)[None, :] + const[None, :] - quad


def _kmeans_pp_means(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each next center drawn proportional to squared distance."""
    m = x.shape[0]
    centers = [x[rng.integers(m)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(m)
        else:
            idx = rng.choice(m, p=d2 / total)
        centers.append(x[idx])
    return np.asarray(centers, dtype=float)


def fit_gmm(
    features: np.ndarray,
    k: int,
    restarts: int = 5,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> MixtureModel:
    """Fit a k-component diagonal-covariance mixture; best of `restarts` by likelihood."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    m, d = x.shape
    if m < k:
        raise ValueError(f"need at least k={k} samples, got {m}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    best: MixtureModel | None = None
    for r in range(restarts):
        rng = rng_stream(seed, r)
        model = _fit_single(x, k, rng, global_var, tol, max_iter)
        if best is None or model.final_log_likelihood > best.final_log_likelihood:
            best = model
    assert best is not None
    return best


def _fit_single(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    global_var: np.ndarray,
    tol: float,
    max_iter: int,
) -> MixtureModel:
    m, d = x.shape
    means = _kmeans_pp_means(x, k, rng)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    trace: list[float] = []
    prev_ll = -np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # E step
        logp = _log_prob(x, weights, means, variances)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])

        # M step
        nk = resp.sum(axis=0)
        if np.any(nk / m < DEGENERATE_WEIGHT):
            # Re-seed collapsed components at the point farthest from all means.
            for j in np.where(nk / m < DEGENERATE_WEIGHT)[0]:
                d2 = np.min(((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
                means[j] = x[int(np.argmax(d2))]
                variances[j] = global_var
            weights = np.full(k, 1.0 / k)
            prev_ll = -np.inf
            trace.clear()
            continue
        weights = nk / m
        means = (resp.T @ x) / nk[:, None]
        sq = resp.T @ (x ** 2) / nk[:, None]
        variances = np.maximum(sq - means ** 2, VARIANCE_FLOOR)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    return MixtureModel(
        weights=weights,
        means=means,
        variances=variances,
        final_log_likelihood=trace[-1],
        log_likelihood_trace=trace,
        n_iter=n_iter,
    )


def responsibilities(model: MixtureModel, features: np.ndarray) -> np.ndarray:
    """Posterior component probabilities per sample, rows on the simplex."""
    x = np.asarray(features, dtype=float)
    logp = _log_prob(x, model.weights, model.means, model.variances)
    return np.exp(logp - logsumexp(logp, axis=1)[:, None])
