"""Flat ``key = value`` pipeline configuration with typed fields and overrides."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .bandfilter import BAND_NAMES
from .errors import ValidationError


@dataclass
class PipelineConfig:
    # inputs and outputs; empty recording means the bundled synthetic generator
    recording: str = ""
    montage: str = ""
    images: str = ""
    out: str = "out"
    event_map: str = ""  # "code:class,..."; empty maps code k to class k-1
    ignore_codes: str = ""

    # epoching and augmentation
    frame_rate: float = 26.0
    window: int = 0  # 0 derives 13 * ceil(rate / frame_rate)
    jitter: int = 4
    resample: int = 50
    test_fraction: float = 0.1

    # video and flow
    frames: int = 13
    grid: int = 32
    bands: str = ",".join(BAND_NAMES)
    power: bool = False
    flow_sigma: float = 1.1
    flow_radius: int = 3
    flow_smooth: int = 5
    flow_iterations: int = 3

    # joint training
    alpha: float = 0.1
    lr: float = 0.05
    disc_lr: float = 0.05
    joint_steps: int = 300
    joint_batch: int = 16
    joint_flow_pool: int = 2000
    disc_every: int = 1
    disc_updates_extractor: bool = False

    # classifier
    cls_lr: float = 0.1
    cls_epochs: int = 20
    cls_batch: int = 32
    hidden: int = 128
    dense: int = 64
    dropout: float = 0.25
    finetune: bool = False
    per_band: bool = False
    cls_precision: str = "float32"  # classifier compute dtype: float32 or float64

    # experiment
    seed: int = 0
    fractions: str = "1.0,0.5,0.25"
    experiment_seeds: str = ""  # empty uses ``seed`` alone

    # synthetic data
    synth_classes: int = 12
    synth_trials: int = 10
    synth_rate: float = 128.0
    synth_amplitude: float = 10.0
    synth_images: int = 400

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str):
            if not cond:
                raise ValidationError(msg, "config")

        need(self.frame_rate > 0, "frame_rate must be positive")
        need(self.window >= 0, "window must be >= 0")
        need(self.jitter >= 0, "jitter must be >= 0")
        need(self.resample >= 1, "resample must be >= 1")
        need(0 <= self.test_fraction < 1, "test_fraction must lie in [0, 1)")
        need(self.frames >= 2, "frames must be >= 2")
        need(self.grid >= 2 * self.flow_radius + 1, "grid smaller than the flow expansion window")
        need(self.grid % 4 == 0, "grid must be a multiple of 4 (two 2x2 pools)")
        need(self.flow_sigma > 0 and self.flow_radius >= 1, "invalid flow expansion parameters")
        need(self.flow_smooth >= 1 and self.flow_iterations >= 1, "invalid flow solver parameters")
        need(math.isfinite(self.alpha) and self.alpha >= 0, "alpha must be finite and >= 0")
        need(self.lr >= 0 and self.disc_lr >= 0 and self.cls_lr >= 0, "learning rates must be >= 0")
        need(self.joint_steps >= 0 and self.cls_epochs >= 0, "step and epoch counts must be >= 0")
        need(self.joint_batch >= 1 and self.cls_batch >= 1 and self.joint_flow_pool >= 1, "batch sizes must be >= 1")
        need(self.disc_every >= 1, "disc_every must be >= 1")
        need(0 <= self.dropout < 1, "dropout must lie in [0, 1)")
        need(self.hidden >= 1 and self.dense >= 1, "layer sizes must be >= 1")
        need(self.cls_precision in ("float32", "float64"), "cls_precision must be float32 or float64")
        unknown = set(self.band_names) - set(BAND_NAMES)
        need(not unknown and self.band_names, f"unknown bands {sorted(unknown)}")
        fr = self.fraction_list
        need(all(0 < f <= 1 for f in fr) and len(fr) > 0, "fractions must lie in (0, 1]")
        self.event_codes  # parses or raises
        self.seed_list

    @property
    def band_names(self) -> list[str]:
        return [b.strip() for b in self.bands.split(",") if b.strip()]

    @property
    def fraction_list(self) -> list[float]:
        try:
            return [float(v) for v in self.fractions.split(",") if v.strip()]
        except ValueError as e:
            raise ValidationError(f"bad fractions {self.fractions!r}", "config") from e

    @property
    def seed_list(self) -> list[int]:
        if not self.experiment_seeds.strip():
            return [self.seed]
        try:
            return [int(v) for v in self.experiment_seeds.split(",") if v.strip()]
        except ValueError as e:
            raise ValidationError(f"bad experiment_seeds {self.experiment_seeds!r}", "config") from e

    @property
    def event_codes(self) -> dict[int, int]:
        out = {}
        try:
            for item in filter(None, (s.strip() for s in self.event_map.split(","))):
                code, cls = item.split(":")
                out[int(code)] = int(cls)
        except ValueError as e:
            raise ValidationError(f"bad event_map {self.event_map!r}; expected code:class,...", "config") from e
        return out

    @property
    def ignored_codes(self) -> list[int]:
        try:
            return [int(v) for v in self.ignore_codes.split(",") if v.strip()]
        except ValueError as e:
            raise ValidationError(f"bad ignore_codes {self.ignore_codes!r}", "config") from e

    def window_for(self, rate: float) -> int:
        return self.window or self.frames * math.ceil(rate / self.frame_rate)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def replace(self, **changes) -> "PipelineConfig":
        return PipelineConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def coerce(key: str, raw: str):
    """Parse a textual value for ``key`` according to the field's type."""
    if key not in _TYPES:
        raise ValidationError(f"unknown config key {key!r}", "config")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} as {kind}", "config") from e
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key = value", "config")
        key, raw = line.split("=", 1)
        values[key.strip()] = coerce(key.strip(), raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or textual)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}", "config")
        values.update(parse_config_text(path.read_text()))
    for key, v in (overrides or {}).items():
        values[key] = coerce(key, v) if isinstance(v, str) else v
        if key not in _TYPES:
            raise ValidationError(f"unknown config key {key!r}", "config")
    return PipelineConfig(**values)
