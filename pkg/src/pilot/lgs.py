"""Linear-Gaussian output stage: activity probabilities and Gaussian DoA posteriors.

Each source slot n carries a Gaussian prior N(mu_n, Sigma_n) over its
(azimuth, elevation) vector and observes ``y = C x + b + noise`` with
diagonal noise covariance ``diag(sigma)``. The posterior is available in
closed form:

    cov  = (Sigma_n^-1 + C^T R^-1 C)^-1
    mean = cov (Sigma_n^-1 mu_n + C^T R^-1 (y - b))
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff.nn import Module, parameter

PRIOR_JITTER = 1e-6


class DoaPosterior(NamedTuple):
    gamma: ad.Tensor  # (..., N) activity probabilities
    mean: ad.Tensor  # (..., N, 2) azimuth, elevation in radians
    covariance: ad.Tensor  # (..., N, 2, 2)


def initial_prior_means(num_sources: int) -> np.ndarray:
    """Equally spaced azimuths starting at -pi, zero elevation."""
    az = 2.0 * math.pi * np.arange(num_sources) / num_sources - math.pi
    return np.stack([az, np.zeros(num_sources)], axis=1)


class LgsHead(Module):
    """Learnable parameters of the linear-Gaussian system and its inference.

    The prior covariances are parameterized as ``L L^T + 1e-6 I`` with a
    lower-triangular ``L`` so they stay positive definite under any update.
    """

    def __init__(self, num_sources: int, model_dim: int, dtype=np.float32):
        super().__init__()
        self.num_sources = num_sources
        self.model_dim = model_dim
        self.prior_mean = ad.Tensor(initial_prior_means(num_sources).astype(dtype), requires_grad=True)
        chol = np.tile(np.eye(2) * math.sqrt(1.0 - PRIOR_JITTER), (num_sources, 1, 1))
        self.prior_chol = ad.Tensor(chol.astype(dtype), requires_grad=True)
        self.obs_matrix = parameter((model_dim, 2), dtype)
        self.fan_in["obs_matrix"] = 2
        self.obs_bias = parameter((model_dim,), dtype)
        self.obs_weights = parameter((num_sources, model_dim, model_dim), dtype)
        self.fan_in["obs_weights"] = model_dim
        self.activity_weights = parameter((num_sources, model_dim), dtype)
        self.fan_in["activity_weights"] = model_dim

    def prior_covariance(self) -> ad.Tensor:
        lower = np.tril(np.ones((2, 2), dtype=self.prior_chol.dtype))
        chol = self.prior_chol * lower
        eye = np.eye(2, dtype=self.prior_chol.dtype) * PRIOR_JITTER
        return ad.matmul(chol, ad.transpose(chol, (0, 2, 1))) + eye

    def _check(self, x: ad.Tensor, name: str) -> None:
        if x.ndim < 2 or x.shape[-2:] != (self.num_sources, self.model_dim):
            raise ad.ShapeError(f"{name}: expected (..., {self.num_sources}, {self.model_dim}), got {x.shape}")

    def observe(self, z_prime: ad.Tensor) -> ad.Tensor:
        """``y[..., n, :] = W_n z'[..., n, :]`` with a separate square matrix per source."""
        self._check(z_prime, "observe")
        lead = z_prime.shape[:-2]
        N, D = self.num_sources, self.model_dim
        per_source = ad.transpose(ad.reshape(z_prime, (-1, N, D)), (1, 0, 2))  # (N, M, D)
        y = ad.matmul(per_source, ad.transpose(self.obs_weights, (0, 2, 1)))
        return ad.reshape(ad.transpose(y, (1, 0, 2)), (*lead, N, D))

    def activity(self, z_prime: ad.Tensor) -> ad.Tensor:
        """Sigmoid of the n-th activity row applied to the n-th source stream."""
        self._check(z_prime, "activity")
        return ad.sigmoid(ad.sum(z_prime * self.activity_weights, axis=-1))

    def posterior(self, y: ad.Tensor, sigma: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Posterior (mean, covariance) for every (..., n) cell."""
        self._check(y, "posterior")
        if sigma.shape != y.shape:
            raise ad.ShapeError(f"posterior: sigma shape {sigma.shape} != y shape {y.shape}")
        if np.any(sigma.data <= 0):
            raise ValueError("posterior: observation noise variances must be positive")
        C = self.obs_matrix
        c0, c1 = C[:, 0:1], C[:, 1:2]
        # columns of outer(C_d, C_d) flattened row-major, so r @ outer gives C^T R^-1 C
        outer = ad.concat([c0 * c0, c0 * c1, c1 * c0, c1 * c1], axis=1)
        precision_obs = 1.0 / sigma
        lead = y.shape[:-1]
        obs_info = ad.reshape(ad.matmul(precision_obs, outer), (*lead, 2, 2))
        prior_precision = ad.inverse2x2(self.prior_covariance())
        covariance = ad.inverse2x2(obs_info + prior_precision)
        prior_info = ad.reshape(ad.matmul(prior_precision, ad.reshape(self.prior_mean, (-1, 2, 1))), (-1, 2))
        info = ad.matmul(precision_obs * (y - self.obs_bias), C) + prior_info
        mean = ad.reshape(ad.matmul(covariance, ad.reshape(info, (*lead, 2, 1))), (*lead, 2))
        return mean, covariance

    def __call__(self, z_prime: ad.Tensor, sigma: ad.Tensor) -> DoaPosterior:
        mean, covariance = self.posterior(self.observe(z_prime), sigma)
        return DoaPosterior(self.activity(z_prime), mean, covariance)
