"""Five-rhythm decomposition with zero-phase Butterworth band-pass filters."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import ValidationError

ORDER = 4
BAND_NAMES = ("alpha", "beta", "gamma", "delta", "theta")


@dataclass(frozen=True)
class Band:
    name: str
    lo: float
    hi: float

    def check(self, rate: float) -> None:
        if not 0 < self.lo < self.hi:
            raise ValidationError(f"band {self.name}: need 0 < lo < hi", "bandfilter")
        if self.hi >= rate / 2:
            raise ValidationError(
                f"band {self.name}: edge {self.hi} Hz >= Nyquist {rate / 2} Hz", "bandfilter"
            )


def standard_bands() -> list[Band]:
    return [
        Band("alpha", 8.0, 13.0),
        Band("beta", 14.0, 30.0),
        Band("gamma", 31.0, 51.0),
        Band("delta", 0.5, 3.0),
        Band("theta", 4.0, 7.0),
    ]


@lru_cache(maxsize=64)
def _design(lo: float, hi: float, rate: float) -> np.ndarray:
    return signal.butter(ORDER, [lo, hi], btype="bandpass", output="sos", fs=rate)


def settling_length(band: Band, rate: float, tol: float = 1e-3) -> int:
    """Samples until the filter's impulse response envelope falls below ``tol``."""
    sos = _design(band.lo, band.hi, rate)
    z, p, _ = signal.sos2zpk(sos)
    rmax = float(np.max(np.abs(p)))
    return int(np.ceil(np.log(tol) / np.log(rmax))) + 1


def bandpass(x: np.ndarray, band: Band, rate: float) -> np.ndarray:
    """Zero-phase band-pass along the last axis.

    The signal is reflect-padded by one settling length on each side, run
    forward and backward through a 4th-order Butterworth design and cropped
    back, so the output has the input's shape. Works on single epochs
    (channels x L) and on stacks (..., L) alike.
    """
    band.check(rate)
    x = np.asarray(getattr(x, "data", x), dtype=float)
    n = x.shape[-1]
    pad = settling_length(band, rate)
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    # numpy repeats the reflection when pad exceeds the signal length
    xp = np.pad(x, widths, mode="reflect") if n > 1 else np.pad(x, widths, mode="edge")
    y = signal.sosfiltfilt(_design(band.lo, band.hi, rate), xp, axis=-1, padtype=None)
    return np.ascontiguousarray(y[..., pad:pad + n])


def rhythm_stack(x: np.ndarray, rate: float, bands: list[Band] | None = None) -> np.ndarray:
    """All five rhythm-filtered copies stacked on a new leading band axis.

    ``x`` of shape (channels, L) gives (5, channels, L); a stack (N, channels, L)
    gives (N, 5, channels, L). Band order follows :func:`standard_bands`.
    """
    bands = standard_bands() if bands is None else bands
    x = np.asarray(getattr(x, "data", x), dtype=float)
    axis = 0 if x.ndim == 2 else 1
    return np.stack([bandpass(x, b, rate) for b in bands], axis=axis)
