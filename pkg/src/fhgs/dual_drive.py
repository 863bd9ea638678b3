"""Dual-drive feature losses computed during traversal, without feature rendering.

Two per-pixel terms share the blend weights w of the color pass:

* l_gt, the external potential: sum_i w_i * sigma_i, where sigma is a sigmoid
  polarity of the cosine between the primitive's frozen feature and the
  pixel's target feature. Weight parked on mismatched primitives is penalized.
* l_cf, the internal clustering term: an order-weighted pairwise feature
  dissimilarity along the ray, folded into a single cumulative sweep so the
  cost is linear in the fragment count instead of quadratic.

The quadratic `lcf_bruteforce` exists purely as a test oracle for the
cumulative rearrangement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIM_THRESHOLD = 0.5
DEFAULT_SLOPE = 20.0


@dataclass
class SimilarityActivation:
    """Sigmoid polarity parameters: threshold and slope."""

    lam: float = DEFAULT_SIM_THRESHOLD
    k: float = DEFAULT_SLOPE

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"slope must be positive, got {self.k}")
        if not -1.0 <= self.lam <= 1.0:
            raise ValueError(f"threshold must lie in [-1, 1], got {self.lam}")


def polarity(phi, act: SimilarityActivation = SimilarityActivation()):
    """sigma = 1 / (1 + exp(k * (phi - lam))): high for dissimilar features.

    phi is a cosine similarity and is clamped to [-1, 1]; sigma(lam) = 0.5
    exactly and sigma is strictly decreasing in phi.
    """
    phi = np.clip(np.asarray(phi, dtype=np.float64), -1.0, 1.0)
    x = act.k * (phi - act.lam)
    out = np.empty_like(x)
    neg = x < 0
    out[neg] = 1.0 / (1.0 + np.exp(x[neg]))
    e = np.exp(-x[~neg])
    out[~neg] = e / (1.0 + e)
    return out if out.ndim else float(out[()])


@dataclass
class AccumulatorState:
    """Running per-pixel traversal state for the cumulative loss sweeps.

    Fragments are fed far to near; W_cum and F_cum aggregate the already
    visited (farther) fragments.
    """

    feature_dim: int
    W_cum: float = 0.0
    F_cum: np.ndarray = None
    T: float = 1.0
    lgt_partial: float = 0.0
    lcf_partial: float = 0.0

    def __post_init__(self):
        if self.F_cum is None:
            self.F_cum = np.zeros(self.feature_dim, dtype=np.float64)


def accumulate_lgt(state: AccumulatorState, w: float, sigma: float) -> AccumulatorState:
    """Add one fragment's external-potential contribution w * sigma."""
    state.lgt_partial += w * sigma
    return state


def accumulate_lcf(state: AccumulatorState, w: float, sigma: float, feature: np.ndarray) -> AccumulatorState:
    """Fold one fragment (far-to-near order) into the clustering sweep.

    Adds sigma * w * (W_cum - F_cum . f) against the farther fragments seen so
    far, then pushes this fragment into the cumulative sums.
    """
    f = np.asarray(feature, dtype=np.float64)
    state.lcf_partial += sigma * w * (state.W_cum - float(state.F_cum @ f))
    state.W_cum += w
    state.F_cum = state.F_cum + w * f
    return state


def lcf_linear(w: np.ndarray, sigma: np.ndarray, features: np.ndarray) -> float:
    """Cumulative-sweep clustering loss over one pixel's fragments.

    Arrays are ordered far to near. Runs in O(N * d).
    """
    state = AccumulatorState(feature_dim=features.shape[1] if features.size else 0)
    for wi, si, fi in zip(w, sigma, features):
        accumulate_lcf(state, float(wi), float(si), fi)
    return state.lcf_partial


def lcf_bruteforce(w: np.ndarray, sigma: np.ndarray, features: np.ndarray) -> float:
    """Explicit double sum over ordered pairs; O(N^2) test oracle only."""
    w = np.asarray(w, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    total = 0.0
    for i in range(len(w)):
        for j in range(i):
            total += sigma[i] * w[i] * w[j] * (1.0 - float(features[i] @ features[j]))
    return total


def lgt_value(w: np.ndarray, sigma: np.ndarray) -> float:
    """Per-pixel external potential: sum_i w_i * sigma_i."""
    return float(np.dot(np.asarray(w, dtype=np.float64), np.asarray(sigma, dtype=np.float64)))


def pixel_fe(w: np.ndarray, features: np.ndarray, f_gt: np.ndarray,
             act: SimilarityActivation = SimilarityActivation()) -> float:
    """Per-pixel feature-consistency statistic: the pixel's l_gt value.

    The dataset-level FE metric is the mean of this over all pixels and views.
    """
    if len(w) == 0:
        return 0.0
    phi = np.asarray(features, dtype=np.float64) @ np.asarray(f_gt, dtype=np.float64)
    return lgt_value(w, polarity(phi, act))


@dataclass
class LossBundle:
    """Per-image loss components and their fixed linear mix."""

    l_rgb: float
    l_gt: float
    l_cf: float
    lambda1: float
    lambda2: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.l_rgb + self.lambda1 * self.l_gt + self.lambda2 * self.l_cf

    def finite(self) -> bool:
        return all(np.isfinite(x) for x in (self.l_rgb, self.l_gt, self.l_cf, self.total))
