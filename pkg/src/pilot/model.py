"""The full localization network: extractor, temporal encoder, linear-Gaussian head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.nn import Module
from .encoder import EncoderConfig, TemporalEncoder, positional_concat
from .extractor import ExtractorConfig, FeatureExtractor
from .lgs import DoaPosterior, LgsHead


@dataclass(frozen=True)
class ModelConfig:
    num_sources: int = 3
    feature_dim: int = 63
    conv_filters: int = 64
    fc_hidden: int = 128
    layers: int = 3
    heads: int = 4
    ff_dim: int = 1024
    dtype: str = "float32"

    @property
    def model_dim(self) -> int:
        return self.feature_dim + 1

    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(num_sources=self.num_sources, feature_dim=self.feature_dim,
                               conv_filters=self.conv_filters, fc_hidden=self.fc_hidden)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(model_dim=self.model_dim, layers=self.layers, heads=self.heads, ff_dim=self.ff_dim)

    def to_dict(self) -> dict:
        return asdict(self)


class PilotModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dtype = np.dtype(config.dtype)
        self.extractor = FeatureExtractor(config.extractor(), dtype)
        self.encoder = TemporalEncoder(config.encoder(), dtype)
        self.head = LgsHead(config.num_sources, config.model_dim, dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def __call__(self, spectra, training: bool = False) -> DoaPosterior:
        """(B, K, L, 2C) spectral chunks -> batched posteriors."""
        x = spectra if isinstance(spectra, ad.Tensor) else ad.Tensor(np.asarray(spectra, dtype=self.dtype))
        bundle = self.extractor(x, training)
        encoded = self.encoder(positional_concat(bundle.z))
        return self.head(encoded, bundle.sigma)


def predict_chunks(model: PilotModel, features: np.ndarray, batch_size: int = 32):
    """Eval-mode posteriors for (M, K, L, 2C) features as numpy arrays (gamma, mean, covariance)."""
    outs = []
    with ad.no_grad():
        for start in range(0, len(features), batch_size):
            post = model(features[start:start + batch_size], training=False)
            outs.append(tuple(t.data for t in post))
    if not outs:
        N, K = model.config.num_sources, features.shape[1] if features.ndim == 4 else 0
        return np.zeros((0, K, N)), np.zeros((0, K, N, 2)), np.zeros((0, K, N, 2, 2))
    return tuple(np.concatenate([o[i] for o in outs]) for i in range(3))
