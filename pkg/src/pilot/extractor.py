"""Convolutional feature extractor with a per-source fully-connected head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff.nn import BatchNorm2d, Conv2d, Linear, Module


@dataclass(frozen=True)
class ExtractorConfig:
    num_sources: int = 3
    feature_dim: int = 63
    conv_filters: int = 64
    kernel: tuple[int, int] = (3, 3)
    pool_widths: tuple[int, ...] = (8, 8, 2)
    fc_hidden: int = 128
    in_channels: int = 8
    num_bins: int = 1024

    def __post_init__(self):
        if self.num_sources < 1 or self.feature_dim < 1:
            raise ValueError("num_sources and feature_dim must be >= 1")
        if self.num_bins % int(np.prod(self.pool_widths)):
            raise ValueError(f"{self.num_bins} bins cannot be pooled by {self.pool_widths}")

    @property
    def variance_dim(self) -> int:
        return self.feature_dim + 1

    @property
    def pooled_bins(self) -> int:
        return self.num_bins // int(np.prod(self.pool_widths))


class FeatureBundle(NamedTuple):
    z: ad.Tensor  # (B, K, N, D_F)
    sigma: ad.Tensor  # (B, K, N, D_E), strictly positive


class FeatureExtractor(Module):
    """conv -> batch norm -> max-pool -> ReLU, three times, then a 3-layer MLP per frame.

    ReLU is applied after pooling; the two commute because ReLU is monotone,
    and pooling first makes the rectifier eight times cheaper.
    """

    def __init__(self, config: ExtractorConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        channels = [config.in_channels] + [config.conv_filters] * len(config.pool_widths)
        self.convs = [Conv2d(channels[i], channels[i + 1], config.kernel, dtype) for i in range(len(config.pool_widths))]
        self.norms = [BatchNorm2d(config.conv_filters, dtype=dtype) for _ in config.pool_widths]
        flat = config.pooled_bins * config.conv_filters
        per_source = config.feature_dim + config.variance_dim
        self.fc = [
            Linear(flat, config.fc_hidden, dtype=dtype),
            Linear(config.fc_hidden, config.fc_hidden, dtype=dtype),
            Linear(config.fc_hidden, config.num_sources * per_source, dtype=dtype),
        ]

    def __call__(self, x: ad.Tensor, training: bool = False) -> FeatureBundle:
        """Map a (B, K, L, 2C) batch of spectral chunks to per-frame, per-source features."""
        cfg = self.config
        if x.ndim == 3:
            x = ad.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[2:] != (cfg.num_bins, cfg.in_channels):
            raise ad.ShapeError(f"extractor expects (B, K, {cfg.num_bins}, {cfg.in_channels}), got {x.shape}")
        B, K = x.shape[:2]
        h = x
        for conv, norm, width in zip(self.convs, self.norms, cfg.pool_widths):
            h = ad.relu(ad.max_pool2d(norm(conv(h), training), (1, width)))
        h = ad.reshape(h, (B, K, cfg.pooled_bins * cfg.conv_filters))
        h = ad.relu(self.fc[0](h))
        h = ad.relu(self.fc[1](h))
        out = ad.reshape(self.fc[2](h), (B, K, cfg.num_sources, cfg.feature_dim + cfg.variance_dim))
        z = out[..., :cfg.feature_dim]
        sigma = ad.exp(out[..., cfg.feature_dim:])
        return FeatureBundle(z, sigma)
