"""Self-contained synthetic data: montage, EEG recordings and proxy images.

The EEG generator produces stimulus-locked trials whose class is the
direction of a slow wave travelling across the scalp, buried in pink noise.
The proxy image set stands in for a natural-image corpus: oriented colour
gratings, one orientation per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import Montage, RawRecording
from .topomap import aep_project


def ring_montage(rings: tuple[int, ...] = (6, 12, 13), max_colatitude: float = 84.0,
                 seed: int = 7) -> Montage:
    """A vertex electrode plus concentric rings on the upper hemisphere.

    Ring azimuths carry a small seeded jitter so no four points are cocircular.
    """
    rng = np.random.default_rng(seed)
    names = ["Cz"]
    pos = [np.array([0.0, 0.0, 1.0])]
    for r, count in enumerate(rings, 1):
        colat = np.radians(max_colatitude * r / len(rings))
        az = 2 * np.pi * (np.arange(count) + 0.5 * (r % 2)) / count + rng.uniform(-0.08, 0.08, count)
        for j, a in enumerate(az):
            names.append(f"R{r}E{j:02d}")
            pos.append(np.array([np.sin(colat) * np.cos(a), np.sin(colat) * np.sin(a), np.cos(colat)]))
    p = np.array(pos)
    return Montage(tuple(names), p / np.linalg.norm(p, axis=1, keepdims=True), name="ring32")


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    f = np.arange(n // 2 + 1, dtype=float)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[..., 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def travelling_trials(montage: Montage, n_classes: int = 12, trials_per_class: int = 10,
                      rate: float = 128.0, trial_seconds: float = 1.0, gap_seconds: float = 0.5,
                      wave_hz: float = 1.6, wavenumber: float = 2.0, amplitude: float = 10.0,
                      noise: float = 10.0, seed: int = 0) -> RawRecording:
    """Continuous recording with ``n_classes * trials_per_class`` shuffled trials.

    Trial of class k: a plane wave cos(2 pi f t - kappa * (u cos a_k + v sin a_k) + phase)
    over projected electrode coordinates (u, v), travelling in direction
    a_k = 2 pi k / n_classes, under a raised-cosine envelope. The event code
    of class k is k + 1, placed ``gap_seconds / 2`` after the envelope starts.
    """
    rng = np.random.default_rng(seed)
    uv = aep_project(montage).points
    labels = np.repeat(np.arange(n_classes), trials_per_class)
    rng.shuffle(labels)
    trial_n = int(round(trial_seconds * rate))
    gap_n = int(round(gap_seconds * rate))
    period = trial_n + gap_n
    total = period * len(labels) + gap_n
    data = noise * pink_noise(rng, (len(montage), total))
    stim = np.zeros(total, dtype=np.int64)
    t = np.arange(trial_n + gap_n) / rate
    env = np.sin(np.pi * np.arange(trial_n + gap_n) / (trial_n + gap_n)) ** 2
    for i, k in enumerate(labels):
        start = gap_n // 2 + i * period
        a = 2 * np.pi * k / n_classes
        proj = uv[:, 0] * np.cos(a) + uv[:, 1] * np.sin(a)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * wave_hz * t[None, :] - wavenumber * proj[:, None] + phase)
        seg = slice(start, start + trial_n + gap_n)
        data[:, seg] += amplitude * env * wave[:, : data[:, seg].shape[1]]
        stim[start + gap_n // 2] = k + 1
    return RawRecording(data, rate, stim, montage_ref=montage.name)


def proxy_images(n: int, n_classes: int = 10, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """uint8 RGB gratings (n, size, size, 3) and labels; class = orientation bin."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        theta = np.pi * (k + rng.uniform(-0.2, 0.2)) / n_classes
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        g = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        tint = rng.uniform(0.4, 1.0, 3)
        img = 0.5 + 0.35 * g[..., None] * tint + 0.08 * rng.standard_normal((size, size, 3))
        out[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return out, labels


def images_to_tensor(images: np.ndarray) -> np.ndarray:
    """uint8 (n, H, W, 3) -> float (n, 3, H, W), zero-centred, roughly unit scale."""
    return (np.asarray(images, dtype=float).transpose(0, 3, 1, 2) - 127.5) / 64.0


@dataclass(frozen=True)
class TwoDomainTask:
    images: np.ndarray
    labels: np.ndarray
    flows: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    test_flows: np.ndarray


def two_domain_task(n_img: int = 400, n_flow: int = 400, n_test: int = 400, nuisance: float = 1.5,
                    size: int = 32, seed: int = 0) -> TwoDomainTask:
    """Image tensors + labels and 10-channel frames for adversarial tests.

    The 10-channel frames are a fixed linear mix of other proxy images' RGB
    planes plus a constant ``nuisance`` offset on channel 0. A 1x1 adapter can
    undo the mix, so the two domains are separable only through features the
    shared extractor is free to discard. The held-out split shares the mix.
    """
    rng = np.random.default_rng(seed)
    s_img, s_flow, s_timg, s_tflow = (int(v) for v in rng.integers(0, 2**31, 4))
    mix = rng.uniform(-1.0, 1.0, (10, 3))

    def to_flow(n, s):
        other, _ = proxy_images(n, size=size, seed=s)
        f = np.einsum("kc,nchw->nkhw", mix, images_to_tensor(other))
        f[:, 0] += nuisance
        return f

    imgs, labels = proxy_images(n_img, size=size, seed=s_img)
    timgs, tlabels = proxy_images(n_test, size=size, seed=s_timg)
    return TwoDomainTask(images_to_tensor(imgs), labels, to_flow(n_flow, s_flow),
                         images_to_tensor(timgs), tlabels, to_flow(n_test, s_tflow))
