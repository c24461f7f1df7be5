"""Evaluation stack: context-normalized RMSE, trajectory MMD with a
Gaussian kernel, and the latent independence MMD diagnostic.

Two MMD estimators are kept verbatim behind a switch because the contexts
they serve define them differently: the trajectory estimator uses a full
cross-term mean with factor 2/(n*m), while the independence diagnostic uses
off-diagonal sums with 1/(n(n-1)) normalization in all three terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateSampleError,
    SampleTooSmallError,
    ShapeMismatchError,
    ZeroContextStdError,
)


@dataclass
class MmdConfig:
    bandwidth: str | float = "median"  # "median", "half_median", or fixed sigma
    estimator: str = "c6"  # "c6" (trajectory) or "e1" (independence)

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth not in ("median", "half_median"):
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")
        if self.estimator not in ("c6", "e1"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


def rmse(pred: np.ndarray, truth: np.ndarray, context_stats,
         nodes=None) -> float:
    """Context-normalized RMSE: per-node root mean square over (batch, step)
    after standardizing both arrays by the context mean/std, then averaged
    over the selected nodes."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mean, std = context_stats
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ShapeMismatchError(f"pred {pred.shape} vs truth {truth.shape}")
    if mean.shape != pred.shape[:2] or std.shape != pred.shape[:2]:
        raise ShapeMismatchError("context stats do not match [B, K]")
    node_idx = list(range(pred.shape[1])) if nodes is None else list(nodes)
    if np.any(std[:, node_idx] == 0.0):
        raise ZeroContextStdError("zero context std for an evaluated node")
    diff = (pred[:, node_idx] - truth[:, node_idx]) / std[:, node_idx][..., None]
    per_node = np.sqrt(np.mean(diff**2, axis=(0, 2)))
    return float(per_node.mean())


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def pooled_median_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    pooled = np.concatenate([a, b], axis=0)
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    return float(np.median(np.sqrt(d2[iu])))


def _resolve_bandwidth(cfg: MmdConfig, a: np.ndarray, b: np.ndarray) -> float:
    if isinstance(cfg.bandwidth, str):
        med = pooled_median_distance(a, b)
        if med == 0.0:
            raise DegenerateSampleError(
                "all pooled points identical: median bandwidth is zero"
            )
        return med if cfg.bandwidth == "median" else 0.5 * med
    return float(cfg.bandwidth)


def _gauss(d2: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-d2 / (2.0 * sigma * sigma))


def trajectory_mmd(sample_a: np.ndarray, sample_b: np.ndarray,
                   cfg: MmdConfig | None = None) -> float:
    """Squared MMD between two sets of flattened trajectories [n, D].

    The "c6" estimator uses off-diagonal means for the two self terms and a
    full mean with factor 2/(n*m) for the cross term; "e1" excludes the
    diagonal from the cross term as well (and requires equal sizes).
    """
    cfg = cfg or MmdConfig()
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"trajectory dims differ: {a.shape} vs {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise SampleTooSmallError("need at least 2 points per sample")
    sigma = _resolve_bandwidth(cfg, a, b)
    kaa = _gauss(_sq_dists(a, a), sigma)
    kbb = _gauss(_sq_dists(b, b), sigma)
    kab = _gauss(_sq_dists(a, b), sigma)
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    if cfg.estimator == "c6":
        cross = 2.0 * kab.sum() / (n * m)
    else:
        if n != m:
            raise ShapeMismatchError("e1 estimator needs equal sample sizes")
        cross = 2.0 * (kab.sum() - np.trace(kab)) / (n * (n - 1))
    return float(term_a + term_b - cross)


def _product_mmd_e1(z1, h1, z2, h2) -> float:
    """Off-diagonal MMD^2 with product kernel k_Z * k_H between paired
    samples {(z1, h1)} and {(z2, h2)}; bandwidths are half the pooled
    median pairwise distance per factor."""
    n = z1.shape[0]
    sz = 0.5 * pooled_median_distance(z1, z2)
    sh = 0.5 * pooled_median_distance(h1, h2)
    if sz == 0.0 or sh == 0.0:
        raise DegenerateSampleError("degenerate factor in product kernel")

    def k(za, ha, zb, hb):
        return _gauss(_sq_dists(za, zb), sz) * _gauss(_sq_dists(ha, hb), sh)

    kxx = k(z1, h1, z1, h1)
    kyy = k(z2, h2, z2, h2)
    kxy = k(z1, h1, z2, h2)
    denom = n * (n - 1)
    return float(
        (kxx.sum() - np.trace(kxx)) / denom
        + (kyy.sum() - np.trace(kyy)) / denom
        - 2.0 * (kxy.sum() - np.trace(kxy)) / denom
    )


def a3_independence_mmd(latents: np.ndarray, states: np.ndarray,
                        seed: int = 0) -> tuple[float, float]:
    """Latent independence diagnostic for one dimension.

    Compares the joint sample {(z, h)} against {(z', h)} with z' drawn
    standard normal (model statistic), and {(z', h)} against {(z'', h)}
    (baseline between two genuinely independent copies). Values of similar
    size support the claim that encoded latents carry no state information.
    """
    z = np.asarray(latents, dtype=float).reshape(-1, 1)
    h = np.atleast_2d(np.asarray(states, dtype=float))
    n = z.shape[0]
    if n < 10:
        raise SampleTooSmallError(f"need at least 10 pairs, got {n}")
    if h.shape[0] != n:
        raise ShapeMismatchError("latents and states must pair up")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA3)))
    z1 = rng.standard_normal((n, 1))
    z2 = rng.standard_normal((n, 1))
    mmd_model = _product_mmd_e1(z, h, z1, h)
    mmd_baseline = _product_mmd_e1(z1, h, z2, h)
    return mmd_model, mmd_baseline
