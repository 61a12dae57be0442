"""Recording and montage loading, stimulus-locked epoching and jitter resampling.

Recording CSV layout::

    time,<ch1>,...,<chC>,stim
    0.000,1.25,...,-3.5,0

Montage CSV layout: one ``name,x,y,z`` row per electrode (an optional header
row ``name,x,y,z`` is accepted), coordinates on the unit sphere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

_NORM_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Montage:
    names: tuple[str, ...]
    positions: np.ndarray  # (n, 3) unit vectors
    name: str = "montage"

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be (n, 3), got {pos.shape}", "ingest")
        if len(self.names) != pos.shape[0]:
            raise ValidationError("names and positions differ in length", "ingest")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("electrode names must be unique", "ingest")
        if pos.shape[0] < 4:
            raise ValidationError("a montage needs at least 4 electrodes", "ingest")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("non-finite electrode coordinate", "ingest")
        norms = np.linalg.norm(pos, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOL)
        if bad.size:
            raise ValidationError(
                f"electrode {self.names[bad[0]]!r} is off the unit sphere (|r|={norms[bad[0]]:.9f})",
                "ingest",
            )
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "positions", _frozen(pos))

    def __len__(self) -> int:
        return len(self.names)

    def vertex(self) -> np.ndarray:
        """Direction of the topmost electrode (largest z), the default map centre."""
        p = self.positions[int(np.argmax(self.positions[:, 2]))]
        return p / np.linalg.norm(p)


@dataclass(frozen=True)
class RawRecording:
    data: np.ndarray  # (channels, samples), microvolts
    rate: float
    stim: np.ndarray  # (samples,) integer event codes
    montage_ref: str = "montage"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        stim = np.asarray(self.stim)
        if data.ndim != 2:
            raise ValidationError("recording data must be channels x samples", "ingest")
        if not self.rate > 0:
            raise ValidationError(f"sampling rate must be positive, got {self.rate}", "ingest")
        if stim.shape != (data.shape[1],):
            raise ValidationError("stim length must equal the sample count", "ingest")
        if stim.size and not np.all(stim == np.round(stim)):
            raise ValidationError("stim codes must be integers", "ingest")
        if not np.all(np.isfinite(data)):
            raise ValidationError("recording contains non-finite samples", "ingest")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "stim", _frozen(stim.astype(np.int64)))
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Epoch:
    data: np.ndarray  # (channels, L)
    label: int
    onset_sample: int
    offset: int = 0
    source: int = field(default=-1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(np.asarray(self.data, dtype=float)))


class EpochExtraction(NamedTuple):
    epochs: list[Epoch]
    dropped: list[int]  # onsets of events whose window overran the recording


def load_montage(path: str | Path) -> Montage:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"montage file not found: {path}", "ingest")
    names, pos = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["name", "x", "y", "z"]:
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected name,x,y,z", "ingest")
            try:
                pos.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}", "ingest") from None
            names.append(row[0].strip())
    return Montage(tuple(names), np.array(pos, dtype=float).reshape(-1, 3), name=path.stem)


def save_montage(montage: Montage, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "x", "y", "z"])
        for name, (x, y, z) in zip(montage.names, montage.positions):
            w.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])


def load_recording(path: str | Path, montage: Montage) -> RawRecording:
    """Read a recording CSV and reorder its channels to match ``montage``.

    Raises ValidationError on a malformed file, a channel-count or
    channel-name mismatch, or any non-finite sample.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"recording file not found: {path}", "ingest")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file", "ingest") from None
        rows = [r for r in reader if r and "".join(r).strip()]

    if len(header) < 3 or header[0] != "time" or header[-1] != "stim":
        raise ValidationError(f"{path}: header must be time,<channels...>,stim", "ingest")
    channels = header[1:-1]
    if len(channels) != len(montage):
        raise ValidationError(
            f"{path}: channel-count mismatch: file has {len(channels)}, montage has {len(montage)}",
            "ingest",
        )
    missing = [n for n in montage.names if n not in channels]
    if missing:
        raise ValidationError(f"{path}: channels missing from file: {missing[:5]}", "ingest")

    width = len(header)
    for i, r in enumerate(rows, 2):
        if len(r) != width:
            raise ValidationError(f"{path}:{i}: expected {width} fields, got {len(r)}", "ingest")
    try:
        table = np.array(rows, dtype=float).reshape(len(rows), width)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}", "ingest") from None
    if not np.all(np.isfinite(table)):
        raise ValidationError(f"{path}: non-finite sample in recording", "ingest")

    time = table[:, 0]
    order = [1 + channels.index(n) for n in montage.names]
    data = table[:, order].T
    stim_f = table[:, -1]
    if not np.all(stim_f == np.round(stim_f)):
        raise ValidationError(f"{path}: stim column must hold integers", "ingest")
    if time.size >= 2:
        dt = np.diff(time)
        if np.any(dt <= 0):
            raise ValidationError(f"{path}: time column must increase", "ingest")
        rate = 1.0 / float(np.median(dt))
    else:
        raise ValidationError(f"{path}: need at least two samples to infer the rate", "ingest")
    return RawRecording(data, rate, stim_f.astype(np.int64), montage_ref=montage.name)


def save_recording(rec: RawRecording, montage: Montage, path: str | Path) -> None:
    t = np.arange(rec.n_samples) / rec.rate
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *montage.names, "stim"])
        for i in range(rec.n_samples):
            w.writerow([f"{t[i]:.9g}", *(f"{v:.9g}" for v in rec.data[:, i]), int(rec.stim[i])])


def event_onsets(stim: np.ndarray) -> np.ndarray:
    """Sample indices where the stim channel steps to a new nonzero code."""
    stim = np.asarray(stim)
    prev = np.concatenate([[0], stim[:-1]])
    return np.flatnonzero((stim != 0) & (stim != prev))


def extract_epochs(
    rec: RawRecording,
    window: int,
    event_map: Mapping[int, int],
    ignore: Iterable[int] = (),
    pad: int = 0,
) -> EpochExtraction:
    """Cut one epoch per mapped stim event.

    Each epoch spans ``[onset - pad, onset + window + pad)``; ``pad`` > 0 yields
    the pre-padded epochs that :func:`resample_epochs` crops from. Events whose
    span leaves the recording are dropped and their onsets reported.
    """
    if window < 2:
        raise ValidationError(f"window must be >= 2 samples, got {window}", "ingest")
    if pad < 0:
        raise ValidationError("pad must be non-negative", "ingest")
    ignore = set(ignore)
    onsets = event_onsets(rec.stim)
    codes = rec.stim[onsets]
    unknown = sorted({int(c) for c in codes} - set(event_map) - ignore)
    if unknown:
        raise ValidationError(f"stim codes {unknown} neither mapped nor ignored", "ingest")

    epochs, dropped = [], []
    for onset, code in zip(onsets.tolist(), codes.tolist()):
        if code in ignore and code not in event_map:
            continue
        lo, hi = onset - pad, onset + window + pad
        if lo < 0 or hi > rec.n_samples:
            dropped.append(onset)
            continue
        epochs.append(Epoch(rec.data[:, lo:hi], int(event_map[code]), onset, source=len(epochs) + len(dropped)))
    return EpochExtraction(epochs, dropped)


def resample_epochs(
    epochs: Sequence[Epoch],
    count: int,
    jitter: int,
    seed: int,
    window: int | None = None,
) -> list[Epoch]:
    """Jittered crops: ``count`` length-L windows per padded source epoch.

    Source epochs have length ``L + 2*jitter``; each derived window starts at a
    uniform integer offset in ``[-jitter, jitter]`` relative to the event onset.
    """
    if count < 1:
        raise ValidationError("resample count must be >= 1", "ingest")
    if jitter < 0:
        raise ValidationError("jitter must be non-negative", "ingest")
    rng = np.random.default_rng(seed)
    out: list[Epoch] = []
    for idx, ep in enumerate(epochs):
        n = ep.data.shape[1]
        length = n - 2 * jitter
        if length < 2 or (window is not None and n != window + 2 * jitter):
            raise ValidationError(
                f"jitter {jitter} too large for epoch of {n} samples"
                + (f" (window {window})" if window is not None else ""),
                "ingest",
            )
        offsets = rng.integers(-jitter, jitter + 1, size=count)
        src = ep.source if ep.source >= 0 else idx
        for off in offsets.tolist():
            start = jitter + off
            out.append(Epoch(ep.data[:, start:start + length], ep.label, ep.onset_sample + off, off, src))
    return out
