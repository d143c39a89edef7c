"""Image-quality metrics for translated images.

Per-pair L1, PSNR and SSIM on the 0-255 scale, plus a Frechet distance
between Gaussian fits of extracted image features (FID with a pluggable
extractor in place of Inception).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import ConvSpec, LayerParams, conv2d, layer_rng, leaky_relu
from .tensor import ContractError, DimensionError, Node

__all__ = [
    "FeatureExtractor",
    "FeatureStats",
    "MetricReport",
    "compute_stats",
    "evaluate_pairs",
    "frechet_distance",
    "gaussian_window",
    "l1_metric",
    "psnr",
    "sqrtm_spd",
    "ssim",
]

PEAK = 255.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIZE, SSIM_SIGMA = 11, 1.5
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def l1_metric(a, b) -> float:
    """Mean absolute difference over all pixels and channels."""
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr_from_mse(err: float) -> float:
    """``math.inf`` is the sentinel for identical images."""
    if err == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, 'valid' borders
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM map (11x11 Gaussian, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_SIZE or a.shape[1] < SSIM_SIZE:
        raise DimensionError(f"SSIM needs images of at least {SSIM_SIZE}x{SSIM_SIZE}, got {a.shape[:2]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


# -- Frechet distance --------------------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    shrunk: bool = False


def compute_stats(features, shrink: bool = False) -> FeatureStats:
    """Mean and unbiased covariance of an ``N x d`` feature matrix.

    With ``shrink`` and N <= d, ``1e-6 * Tr(C)/d`` is added to the diagonal.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"features must be N x d, got shape {f.shape}")
    n, d = f.shape
    if n < 2:
        raise ContractError(f"need at least 2 samples for a covariance, got {n}")
    mu = f.mean(axis=0)
    centred = f - mu
    cov = centred.T @ centred / (n - 1)
    cov = (cov + cov.T) / 2
    shrunk = False
    if n <= d:
        if shrink:
            cov = cov + (1e-6 * np.trace(cov) / d) * np.eye(d)
            shrunk = True
        else:
            warnings.warn(f"{n} samples for {d}-dimensional features: covariance is rank deficient", stacklevel=2)
    return FeatureStats(mu, cov, n, shrunk)


def _tolerance(m: np.ndarray) -> float:
    return 1e-6 * max(1.0, float(np.abs(m).max()) if m.size else 1.0)


def sqrtm_spd(m) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"sqrtm needs a square matrix, got shape {m.shape}")
    tol = _tolerance(m)
    if np.abs(m - m.T).max() > tol:
        raise ContractError("sqrtm input is not symmetric")
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise ContractError(f"sqrtm input has negative eigenvalue {w.min():.3g}")
    root = np.sqrt(np.clip(w, 0.0, None))
    r = (v * root) @ v.T
    return (r + r.T) / 2


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """Squared mean distance plus the covariance trace term, clamped at 0."""
    if s1.mean.shape != s2.mean.shape:
        raise DimensionError(f"feature dimensions differ: {s1.mean.shape[0]} vs {s2.mean.shape[0]}")
    diff = s1.mean - s2.mean
    # Tr((C1^1/2 C2 C1^1/2)^1/2) is the nuclear norm of C1^1/2 C2^1/2; the
    # singular values avoid squaring the spectrum of near-singular covariances
    cross = np.linalg.svd(sqrtm_spd(s1.cov) @ sqrtm_spd(s2.cov), compute_uv=False).sum()
    value = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2 * cross)
    scale = 1e-6 * max(1.0, float(np.trace(s1.cov) + np.trace(s2.cov)))
    if value < -scale:
        raise ContractError(f"Frechet distance came out negative ({value:.3g})")
    return max(value, 0.0)


# -- feature extractors -------------------------------------------------------


def _grey(images: np.ndarray) -> np.ndarray:
    """uint8 [N,H,W,C] -> float64 [N,H,W] luminance."""
    x = images.astype(np.float64)
    if x.shape[3] == 1:
        return x[..., 0]
    return x[..., :3] @ LUMA


@dataclass(frozen=True)
class FeatureExtractor:
    """``pixel8``: 8x8 box-averaged luminance (d = 64, 0-255 scale).
    ``randconv``: fixed random 3-layer conv net, global-average-pooled to ``d``.
    """

    kind: str = "pixel8"
    seed: int = 0
    d: int = 64

    def __post_init__(self):
        if self.kind not in ("pixel8", "randconv"):
            raise ContractError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "pixel8" and self.d != 64:
            raise ContractError("pixel8 features are 64-dimensional")
        if self.d < 1:
            raise ContractError("feature dimension must be positive")

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "d": self.d}

    def __call__(self, images) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise DimensionError(f"expected [N,H,W,C] images, got shape {images.shape}")
        if self.kind == "pixel8":
            return self._pixel8(images)
        return self._randconv(images)

    def _pixel8(self, images: np.ndarray) -> np.ndarray:
        n, h, w = images.shape[:3]
        if h % 8 or w % 8:
            raise DimensionError(f"pixel8 needs sides divisible by 8, got {h}x{w}")
        g = _grey(images).reshape(n, 8, h // 8, 8, w // 8)
        return g.mean(axis=(2, 4)).reshape(n, 64)

    def _layers(self) -> List[LayerParams]:
        widths = [3, 16, 32, self.d]
        layers = []
        for i in range(3):
            rng = layer_rng(self.seed, f"randconv/conv{i}")
            fan_in = widths[i] * 16
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(widths[i + 1], widths[i], 4, 4))
            layers.append(LayerParams(f"conv{i}", Node(w.astype(np.float32))))
        return layers

    def _randconv(self, images: np.ndarray) -> np.ndarray:
        if images.shape[1] < 8 or images.shape[2] < 8:
            raise DimensionError("randconv needs images of at least 8x8")
        x = images.astype(np.float32) / np.float32(127.5) - np.float32(1)
        if x.shape[3] == 1:
            x = np.repeat(x, 3, axis=3)
        h = Node(np.ascontiguousarray(x[..., :3].transpose(0, 3, 1, 2)))
        for i, layer in enumerate(self._layers()):
            w = layer.weight.shape
            h = conv2d(h, ConvSpec(w[1], w[0], 4, 2, 1), layer)
            if i < 2:
                h = leaky_relu(h, 0.2)
        return h.value.astype(np.float64).mean(axis=(2, 3))


# -- reports --------------------------------------------------------------------


@dataclass
class MetricReport:
    l1: float
    psnr_db: float
    ssim: float
    fid: float
    n_pairs: int
    extractor: dict
    shrunk: bool = False
    per_pair: List[dict] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "l1": self.l1,
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "ssim": self.ssim,
            "fid": self.fid,
            "n_pairs": self.n_pairs,
            "extractor": self.extractor,
            "shrunk": self.shrunk,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def evaluate_pairs(
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    extractor: Optional[FeatureExtractor] = None,
    shrink: bool = True,
) -> MetricReport:
    """Average per-pair metrics and the FID of translated vs. true images.

    ``pairs`` holds ``(translated, true)`` uint8 images.  PSNR uses the
    MSE pooled over all pairs, so it is infinite exactly when L1 is 0.
    """
    extractor = extractor or FeatureExtractor()
    if len(pairs) == 0:
        raise ContractError("cannot evaluate an empty set of pairs")
    if len(pairs) < 2:
        raise ContractError("FID needs at least 2 pairs")
    per_pair = []
    for fake, real in pairs:
        per_pair.append({"l1": l1_metric(fake, real), "mse": mse(fake, real), "ssim": ssim(fake, real)})
    fakes = np.stack([np.asarray(p[0]) for p in pairs])
    reals = np.stack([np.asarray(p[1]) for p in pairs])
    f_fake, f_real = extractor(fakes), extractor(reals)
    if not shrink:
        for f in (f_fake, f_real):
            if np.all(f == f[0]):
                raise ContractError("all features identical; enable shrinkage to evaluate a degenerate set")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if shrink else "default")
        s_fake = compute_stats(f_fake, shrink=shrink)
        s_real = compute_stats(f_real, shrink=shrink)
    # sum in a fixed order so the report does not depend on pair order
    l1 = math.fsum(p["l1"] for p in per_pair) / len(per_pair)
    pooled = math.fsum(p["mse"] for p in per_pair) / len(per_pair)
    ss = math.fsum(p["ssim"] for p in per_pair) / len(per_pair)
    return MetricReport(
        l1=l1,
        psnr_db=psnr_from_mse(pooled),
        ssim=ss,
        fid=frechet_distance(s_fake, s_real),
        n_pairs=len(pairs),
        extractor=extractor.describe(),
        shrunk=s_fake.shrunk or s_real.shrunk,
        per_pair=per_pair,
    )
