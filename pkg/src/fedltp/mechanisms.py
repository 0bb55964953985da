"""Gaussian gradient noise and Laplace-perturbed validation scores."""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidInputError

# Largest |u| kept away from 1/2 so log(1 - 2|u|) stays finite.
_U_EDGE = 0.5 - 2.0 ** -54


def add_gaussian_noise(grad: np.ndarray, sigma: float, clip: float,
                       rng: np.random.Generator, mask=None) -> np.ndarray:
    """Add ``N(0, (sigma * clip)^2)`` to every coordinate, then re-mask.

    Noise is drawn for all ``d`` coordinates in index order (one
    ``standard_normal`` call) so traces do not depend on the mask.
    """
    if sigma < 0:
        raise InvalidInputError("noise multiplier must be non-negative")
    if clip <= 0:
        raise InvalidInputError("clipping threshold must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    if sigma == 0:
        out = grad.copy()
    else:
        out = grad + (sigma * clip) * rng.standard_normal(grad.shape)
    if mask is not None:
        out *= np.asarray(mask, dtype=bool)
    return out


def laplace_from_uniform(u, scale: float):
    """Inverse-CDF map from ``u`` in (-1/2, 1/2) to zero-mean Laplace(scale)."""
    u = np.clip(u, -_U_EDGE, _U_EDGE)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(scale: float, rng: np.random.Generator, size=None):
    return laplace_from_uniform(rng.random(size) - 0.5, scale)


def perturb_score(score: float, lambda_val: float, rng: np.random.Generator,
                  sensitivity: float = 1.0) -> float:
    """``score + Lap(sensitivity * lambda_val)``; ``lambda_val = inf`` disables noise."""
    if not lambda_val > 0:
        raise InvalidInputError("lambda_val must be positive")
    if math.isinf(lambda_val):
        return float(score)
    return float(score + sample_laplace(sensitivity * lambda_val, rng))


def validation_epsilon(lambda_val: float, sensitivity: float = 1.0) -> float:
    """Pure-DP level of one perturbed release."""
    return sensitivity / lambda_val
