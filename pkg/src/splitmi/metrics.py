"""Image similarity and classification accuracy."""

import numpy as np
import torch
from scipy import ndimage

from .errors import InputContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_numpy(a):
    if torch.is_tensor(a):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t * t) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    pad = (len(w) - 1) // 2
    out = ndimage.correlate1d(img, w, axis=-1, mode="reflect")
    out = ndimage.correlate1d(out, w, axis=-2, mode="reflect")
    return out[..., pad:-pad, pad:-pad]


def ssim_map(a, b, data_range=1.0):
    """Per-window SSIM over the fully-contained 11x11 windows, shape (C, H-10, W-10)."""
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise InputContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise InputContractError(f"need (C, H, W) images with H, W >= {SSIM_WINDOW}")
    tol = 1e-6 * data_range
    for img in (a, b):
        if img.min() < -tol or img.max() > data_range + tol:
            raise InputContractError(f"pixel values outside [0, {data_range}]")
    w = gaussian_window_1d()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Structural similarity, Gaussian window (11x11, sigma 1.5), mean over windows and channels."""
    return float(np.clip(ssim_map(a, b, data_range).mean(), -1.0, 1.0))


def mean_ssim(batch_a, batch_b, data_range=1.0):
    """Average SSIM over paired images of two (N, C, H, W) batches."""
    a, b = _as_numpy(batch_a), _as_numpy(batch_b)
    if a.shape != b.shape or a.shape[0] == 0:
        raise InputContractError("need two equal, non-empty batches")
    return float(np.mean([ssim(x, y, data_range) for x, y in zip(a, b)]))


def accuracy(predictions, labels):
    """Fraction of correct predictions; logits are reduced by argmax (lowest index wins ties)."""
    p, y = _as_numpy(predictions), _as_numpy(labels)
    if y.size == 0:
        raise InputContractError("accuracy of an empty set is undefined")
    if p.ndim == 2:
        p = p.argmax(axis=1)
    if p.shape != y.shape:
        raise InputContractError("predictions and labels are not aligned")
    return float((p == y).mean())
