"""Shared oracles for the test-suite."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5, limit: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[list[tuple], np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place).

    Returns the probed indices and their numeric derivatives; with ``limit``
    a random subset of that many entries is probed.
    """
    idx = list(np.ndindex(arr.shape))
    if limit is not None and len(idx) > limit:
        rng = rng or np.random.default_rng(0)
        idx = [idx[i] for i in rng.choice(len(idx), limit, replace=False)]
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = arr[i]
        arr[i] = orig + eps
        up = f()
        arr[i] = orig - eps
        down = f()
        arr[i] = orig
        out[j] = (up - down) / (2 * eps)
    return idx, out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradient(f, arr: np.ndarray, analytic: np.ndarray, limit: int | None = 30, eps: float = 1e-5) -> float:
    idx, num = numeric_grad(f, arr, eps, limit)
    return rel_error(np.array([analytic[i] for i in idx]), num)


def dft_amplitude(x: np.ndarray, freq: float, rate: float) -> float:
    """Amplitude of the ``freq`` component of a 1-D signal by direct Fourier sum."""
    t = np.arange(x.shape[-1]) / rate
    return float(2 * np.abs(np.sum(x * np.exp(-2j * np.pi * freq * t))) / x.shape[-1])
