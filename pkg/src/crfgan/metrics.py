"""FID and MMD between volume sets, on features from a fixed random 3D conv encoder."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import FingerprintError, ParameterError
from .netspec import GraphNet, LayerSpec, NetGraph
from .volume import Volume3D

DEFAULT_FEATURES = 256


@dataclass
class FeatureSet:
    features: np.ndarray  # (M, F)
    fingerprint: str = "raw"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2:
            raise ParameterError(f"features must be (M, F), got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ParameterError("features must be finite")
        self.features = f

    def __len__(self):
        return self.features.shape[0]


def extractor_graph(n_features: int = DEFAULT_FEATURES) -> NetGraph:
    chans = [1, 32, 64, 128, n_features]
    layers = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        layers += [LayerSpec("conv3d", cin, cout, 3, 2, 1), LayerSpec("nonlinearity", variant="leaky_relu")]
    layers.append(LayerSpec("pool", variant="global"))
    return NetGraph("feature-extractor", tuple(layers), (1, 64, 64, 64))


class FeatureExtractor:
    """Randomly initialised (He-normal, seeded) conv encoder with global average pooling."""

    def __init__(self, seed: int = 0, n_features: int = DEFAULT_FEATURES):
        self.seed = int(seed)
        self.graph = extractor_graph(n_features)
        self.net = GraphNet(self.graph)
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for m in self.net.modules():
                if isinstance(m, nn.Conv3d):
                    fan_in = m.in_channels * m.kernel_size[0] ** 3
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.net.eval()
        self.fingerprint = hashlib.sha256(f"{self.seed}:{self.graph.fingerprint()}".encode()).hexdigest()[:16]

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> np.ndarray:
        return self.net(x.float()).double().numpy()


def extract_features(volumes: Sequence[Volume3D], extractor: FeatureExtractor, batch_size: int = 8) -> FeatureSet:
    if len(volumes) == 0:
        raise ParameterError("no volumes given")
    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise ParameterError(f"volumes have mixed shapes {sorted(shapes)}")
    rows = []
    for i in range(0, len(volumes), batch_size):
        x = torch.from_numpy(np.stack([v.voxels for v in volumes[i : i + batch_size]]))[:, None]
        rows.append(extractor(x))
    return FeatureSet(np.concatenate(rows), extractor.fingerprint)


def _check_pair(a: FeatureSet, b: FeatureSet) -> None:
    if a.fingerprint != b.fingerprint:
        raise FingerprintError(f"feature sets from different extractors ({a.fingerprint} vs {b.fingerprint})")
    if a.features.shape[1] != b.features.shape[1]:
        raise ParameterError("feature dimensions differ")


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits (unbiased covariances).

    Tr((S_a S_b)^{1/2}) is computed as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which
    keeps every square root symmetric; negative eigenvalues are clamped.
    """
    _check_pair(a, b)
    if len(a) < 2 or len(b) < 2:
        raise ParameterError("FID needs at least 2 samples per set")
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    mid = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


MEDIAN_MAX_POINTS = 4096
BLOCK_ROWS = 1024


def median_bandwidth(z: np.ndarray) -> float:
    """Median pairwise Euclidean distance over distinct pairs (1.0 if all points coincide).

    Pooled sets above MEDIAN_MAX_POINTS rows use an evenly strided subset.
    """
    if len(z) > MEDIAN_MAX_POINTS:
        z = z[np.linspace(0, len(z) - 1, MEDIAN_MAX_POINTS).astype(np.int64)]
    d2 = _sq_dists(z, z)
    iu = np.triu_indices(len(z), 1)
    med = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def _sq_dists(x, y):
    d2 = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d2, 0.0)


def _kernel_mean(x, y, gamma):
    total = 0.0
    for i in range(0, len(x), BLOCK_ROWS):
        total += np.exp(gamma * _sq_dists(x[i : i + BLOCK_ROWS], y)).sum()
    return total / (len(x) * len(y))


def mmd(a: FeatureSet, b: FeatureSet, bandwidth: float | None = None) -> float:
    """Biased squared MMD with a Gaussian kernel; bandwidth by the median heuristic on the pooled set."""
    _check_pair(a, b)
    x, y = a.features, b.features
    sigma = bandwidth if bandwidth is not None else median_bandwidth(np.vstack([x, y]))
    g = -1.0 / (2.0 * sigma * sigma)
    value = _kernel_mean(x, x, g) + _kernel_mean(y, y, g) - 2.0 * _kernel_mean(x, y, g)
    return float(max(value, 0.0))
