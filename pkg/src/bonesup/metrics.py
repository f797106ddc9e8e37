"""Image quality metrics (SSIM, PSNR) and rank-based ROC AUC."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError

PSNR_IDENTICAL = math.inf


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {x.shape}")
    return x


def ssim_map(a, b, data_range=1.0, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM at every position where the window fits entirely inside the image."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if window_size > min(a.shape):
        raise DimensionError(f"ssim window {window_size} larger than image {a.shape}")
    w = gaussian_window(window_size, sigma)

    def filt(x):
        return np.tensordot(sliding_window_view(x, w.shape), w, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all valid window positions (Gaussian window, no padding)."""
    return float(ssim_map(a, b, data_range, window_size, sigma, k1, k2).mean())


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def roc_auc(scores, labels=None):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Accepts either ``roc_auc(scores, labels)`` or a sequence of
    ``(score, label)`` pairs.  Tied scores contribute one half.
    """
    if labels is None:
        pairs = list(scores)
        scores = [s for s, _ in pairs]
        labels = [l for _, l in pairs]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be 1-D and equally long")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def summarize(values):
    """mean, sample standard deviation, standard error and count of finite values."""
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    n = int(v.size)
    if n == 0:
        return {"mean": None, "std": None, "stderr": None, "count": 0}
    mean = float(v.mean())
    if n < 2:
        return {"mean": mean, "std": None, "stderr": None, "count": n}
    std = float(v.std(ddof=1))
    return {"mean": mean, "std": std, "stderr": std / math.sqrt(n), "count": n}
