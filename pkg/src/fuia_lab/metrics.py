"""Image reconstruction metrics."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 100.0


def compute_mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse: float) -> float:
    """10 log10(1 / MSE) for unit-range images; MSE = 0 maps to the 100 dB cap."""
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def compute_psnr(a, b) -> float:
    return psnr_from_mse(compute_mse(a, b))
