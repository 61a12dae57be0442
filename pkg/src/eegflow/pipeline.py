"""End-to-end stages behind the command-line interface.

Layout of an output directory::

    input/          montage.csv, recording.csv (synthetic runs only)
    proxy/          labelled proxy images: NNNNN.ppm + labels.csv
    flows/          one EEGF container per resampled epoch
    manifest.csv    epoch_id, label, source, onset, offset, split
    drops.csv       events whose window overran the recording
    model.eegm, joint_log.csv, classifier_log.csv, confusion.csv, report.txt
    table.csv       reduced-training-set experiment
    visualize/      PGM frames, HSV PPMs, confusion heatmap
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classifier as cls
from . import formats
from .bandfilter import Band, rhythm_stack, standard_bands
from .config import PipelineConfig
from .errors import ValidationError
from .ingest import Montage, RawRecording, extract_epochs, load_montage, load_recording, resample_epochs
from .ingest import save_montage, save_recording
from .jointtrain import FLOW, JointConfig, JointLog, JointModel, joint_train
from .optflow import FlowParams, flow_to_hsv, rescale_u8, video_flows
from .synthetic import images_to_tensor, proxy_images, ring_montage, travelling_trials
from .topomap import Topography, render_video

log = logging.getLogger("eegflow")

MANIFEST_COLUMNS = ("epoch_id", "label", "source", "onset", "offset", "split")
_CHUNK = 64  # epochs converted per block


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def selected_bands(cfg: PipelineConfig) -> list[Band]:
    by_name = {b.name: b for b in standard_bands()}
    return [by_name[n] for n in cfg.band_names]


def flow_params(cfg: PipelineConfig) -> FlowParams:
    return FlowParams(sigma=cfg.flow_sigma, radius=cfg.flow_radius, smooth_radius=cfg.flow_smooth,
                      iterations=cfg.flow_iterations)


# ---------------------------------------------------------------- inputs


@dataclass
class Inputs:
    montage: Montage
    recording: RawRecording | None  # None for a recording file without samples
    event_map: dict[int, int]
    ignore: list[int]


def synthetic_inputs(cfg: PipelineConfig) -> tuple[Montage, RawRecording]:
    montage = ring_montage()
    rec = travelling_trials(montage, n_classes=cfg.synth_classes, trials_per_class=cfg.synth_trials,
                            rate=cfg.synth_rate, amplitude=cfg.synth_amplitude, seed=cfg.seed)
    return montage, rec


def _has_samples(path: Path) -> bool:
    with path.open() as fh:
        next(fh, None)
        return any(line.strip() for line in fh)


def load_inputs(cfg: PipelineConfig, write_synthetic: bool = False) -> Inputs:
    """Montage, recording and event mapping from config, or the synthetic stand-ins."""
    out = cfg.out_dir
    if not cfg.recording:
        montage, rec = synthetic_inputs(cfg)
        if write_synthetic:
            (out / "input").mkdir(parents=True, exist_ok=True)
            save_montage(montage, out / "input" / "montage.csv")
            save_recording(rec, montage, out / "input" / "recording.csv")
        event_map = cfg.event_codes or {k + 1: k for k in range(cfg.synth_classes)}
        return Inputs(montage, rec, event_map, cfg.ignored_codes)
    if not cfg.montage:
        raise ValidationError("a recording needs a montage file (config key 'montage')", "ingest")
    montage = load_montage(cfg.montage)
    path = Path(cfg.recording)
    if not path.is_file():
        raise ValidationError(f"recording file not found: {path}", "ingest")
    rec = load_recording(path, montage) if _has_samples(path) else None
    event_map = cfg.event_codes
    if not event_map and rec is not None:
        codes = sorted({int(c) for c in np.unique(rec.stim) if c != 0} - set(cfg.ignored_codes))
        event_map = {c: i for i, c in enumerate(codes)}
    return Inputs(montage, rec, event_map, cfg.ignored_codes)


def write_proxy_images(directory: Path, images: np.ndarray, labels: np.ndarray) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"{i:05d}.ppm"
        formats.write_ppm(directory / name, img)
        rows.append((name, int(lab)))
    _write_text(directory / "labels.csv", _csv_text(("file", "label"), rows))


def load_proxy_images(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """uint8 (n, H, W, 3) images and labels from a directory with ``labels.csv``."""
    directory = Path(directory)
    table = directory / "labels.csv"
    if not table.is_file():
        raise ValidationError(f"proxy image labels not found: {table}", "train")
    images, labels = [], []
    with table.open(newline="") as fh:
        for row in csv.DictReader(fh):
            img = formats.read_netpbm(directory / row["file"])
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            images.append(img)
            labels.append(int(row["label"]))
    if not images:
        raise ValidationError(f"no proxy images listed in {table}", "train")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"proxy images in {directory} differ in size: {sorted(shapes)}", "train")
    return np.stack(images), np.array(labels)


# ---------------------------------------------------------------- convert


@dataclass
class ConvertResult:
    n_epochs: int
    n_dropped: int
    n_containers: int


def epoch_flows(data: np.ndarray, rate: float, topo: Topography, cfg: PipelineConfig) -> np.ndarray:
    """Raw epochs (n, C, L) -> flow (n, bands, frames-1, 2, H, W)."""
    stacked = rhythm_stack(data, rate, selected_bands(cfg))  # (n, B, C, L)
    video = render_video(stacked, topo, cfg.frames, cfg.power)  # (n, B, F, H, W)
    return video_flows(video, flow_params(cfg))


def convert(cfg: PipelineConfig) -> ConvertResult:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_inputs(cfg, write_synthetic=True)
    if not cfg.recording:
        imgs, labels = proxy_images(cfg.synth_images, size=cfg.grid, seed=cfg.seed)
        write_proxy_images(out / "proxy", imgs, labels)
    flow_dir = out / "flows"
    if flow_dir.exists():
        for old in flow_dir.glob("*.eegf"):
            old.unlink()
    flow_dir.mkdir(exist_ok=True)

    rec = inputs.recording
    if rec is None:
        log.warning("recording has no samples; writing an empty manifest")
        _write_text(out / "manifest.csv", _csv_text(MANIFEST_COLUMNS, []))
        _write_text(out / "drops.csv", _csv_text(("source", "onset"), []))
        return ConvertResult(0, 0, 0)

    window = cfg.window_for(rec.rate)
    for b in selected_bands(cfg):
        b.check(rec.rate)
    extraction = extract_epochs(rec, window, inputs.event_map, inputs.ignore, pad=cfg.jitter)
    sources = extraction.epochs
    _write_text(out / "drops.csv", _csv_text(("source", "onset"), [
        (i, onset) for i, onset in _drop_sources(extraction)]))
    if extraction.dropped:
        log.warning("dropped %d event(s) whose window overran the recording", len(extraction.dropped))
    if not sources:
        log.warning("no epochs extracted; writing an empty manifest")
        _write_text(out / "manifest.csv", _csv_text(MANIFEST_COLUMNS, []))
        return ConvertResult(0, len(extraction.dropped), 0)

    _, test_idx = cls.train_test_split(len(sources), cfg.test_fraction, cfg.seed)
    test_sources = {sources[i].source for i in test_idx}
    crops = resample_epochs(sources, cfg.resample, cfg.jitter, cfg.seed, window=window)
    topo = Topography(inputs.montage, size=cfg.grid)

    rows = []
    for start in range(0, len(crops), _CHUNK):
        block = crops[start:start + _CHUNK]
        flows = epoch_flows(np.stack([c.data for c in block]), rec.rate, topo, cfg)
        for k, (crop, flow) in enumerate(zip(block, flows)):
            eid = start + k
            enc = rescale_u8(flow)
            formats.write_flow_container(flow_dir / f"{eid:06d}.eegf", flow, enc.lo, enc.hi)
            split = "test" if crop.source in test_sources else "train"
            rows.append((eid, crop.label, crop.source, crop.onset_sample, crop.offset, split))
        log.info("converted %d/%d epochs", min(start + _CHUNK, len(crops)), len(crops))
    _write_text(out / "manifest.csv", _csv_text(MANIFEST_COLUMNS, rows))
    return ConvertResult(len(sources), len(extraction.dropped), len(rows))


def _drop_sources(extraction) -> list[tuple[int, int]]:
    kept = {e.source for e in extraction.epochs}
    ids = [i for i in range(len(extraction.epochs) + len(extraction.dropped)) if i not in kept]
    return list(zip(ids, extraction.dropped))


# ---------------------------------------------------------------- train


@dataclass(frozen=True)
class ManifestRow:
    epoch_id: int
    label: int
    source: int
    onset: int
    offset: int
    split: str


def read_manifest(out: Path) -> list[ManifestRow]:
    path = out / "manifest.csv"
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path} (run convert first)", "train")
    with path.open(newline="") as fh:
        return [ManifestRow(int(r["epoch_id"]), int(r["label"]), int(r["source"]), int(r["onset"]),
                            int(r["offset"]), r["split"]) for r in csv.DictReader(fh)]


def load_flow(out: Path, epoch_id: int) -> np.ndarray:
    path = out / "flows" / f"{epoch_id:06d}.eegf"
    if not path.is_file():
        raise ValidationError(f"flow container not found: {path}", "train")
    flow, _, _ = formats.read_flow_container(path)
    return flow


def model_frames(flow: np.ndarray, per_band: bool) -> np.ndarray:
    """Flow (..., B, P, 2, H, W) -> extractor inputs (..., P, B*2, H, W) or (..., P*B, 2, H, W)."""
    *lead, nb, npairs, two, h, w = flow.shape
    frames = np.moveaxis(flow, -5, -4)  # (..., P, B, 2, H, W)
    if per_band:
        return frames.reshape(*lead, npairs * nb, two, h, w)
    return frames.reshape(*lead, npairs, nb * two, h, w)


def sequence_features(model: JointModel, flows: np.ndarray, per_band: bool) -> np.ndarray:
    """Per-frame extractor features (n, P, F) for flows (n, B, P, 2, H, W)."""
    n, nb, npairs = flows.shape[:3]
    x = model_frames(flows, per_band).reshape((-1,) + model_frames(flows[:1], per_band).shape[2:])
    f, _ = model.features(x, FLOW)
    return f.reshape(n, npairs, -1)


@dataclass
class TrainOutcome:
    model: JointModel
    joint_log: JointLog | None
    net: cls.ClassifierNet
    cls_log: cls.TrainLog
    report: cls.EvalReport


def _proxy_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.images) if cfg.images else cfg.out_dir / "proxy"


def _load_flows(out: Path, rows: list[ManifestRow]) -> np.ndarray:
    return np.stack([load_flow(out, r.epoch_id) for r in rows]) if rows else np.zeros((0,))


def run_training(cfg: PipelineConfig, train_rows: list[ManifestRow], test_rows: list[ManifestRow],
                 alpha: float, seed: int, n_classes: int | None = None) -> TrainOutcome:
    """Joint training on proxy images + training flows, then the recurrent classifier."""
    out = cfg.out_dir
    if not train_rows:
        raise ValidationError("no training epochs in the manifest", "train")
    if not test_rows:
        raise ValidationError("no test epochs in the manifest (raise test_fraction)", "train")
    n_classes = n_classes or max(r.label for r in train_rows + test_rows) + 1
    probe = load_flow(out, train_rows[0].epoch_id)
    nb, npairs, _, h, w = probe.shape
    in_flow = 2 if cfg.per_band else 2 * nb

    proxy = _proxy_dir(cfg)
    have_images = (proxy / "labels.csv").is_file()
    if not have_images and (alpha > 0 or cfg.images):
        raise ValidationError(f"proxy images not found at {proxy} (needs labels.csv and image files)", "train")

    ss = np.random.SeedSequence(seed)
    s_model, s_pool, s_joint, s_cls = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    jlog = None
    if have_images:
        imgs, labels = load_proxy_images(proxy)
        if imgs.shape[1:3] != (h, w):
            raise ValidationError(f"proxy images are {imgs.shape[1:3]}, flows are {(h, w)}", "train")
        model = JointModel(in_channels=(3, in_flow), n_img_classes=int(labels.max()) + 1, image_size=h,
                           seed=s_model)
        pool = _flow_pool(out, train_rows, cfg, s_pool)
        jcfg = JointConfig(alpha=alpha, lr=cfg.lr, disc_lr=cfg.disc_lr, steps=cfg.joint_steps,
                           batch=cfg.joint_batch, seed=s_joint, disc_every=cfg.disc_every,
                           disc_updates_extractor=cfg.disc_updates_extractor)
        model, jlog = joint_train(images_to_tensor(imgs), labels, pool, jcfg, model)
    else:
        log.warning("no proxy images at %s; the extractor stays at its initialisation", proxy)
        model = JointModel(in_channels=(3, in_flow), image_size=h, seed=s_model)

    net = cls.ClassifierNet(model.feature_dim * (nb if cfg.per_band else 1), n_classes, cfg.hidden,
                            cfg.dense, cfg.dropout, seed=s_cls, dtype=cfg.cls_precision)
    tcfg = cls.TrainConfig(lr=cfg.cls_lr, epochs=cfg.cls_epochs, batch=cfg.cls_batch, seed=s_cls)
    y_train = np.array([r.label for r in train_rows])
    if cfg.finetune:
        frames = _load_flows(out, train_rows).astype(np.float32)
        net, clog = cls.train_classifier(net, frames, y_train, tcfg,
                                         feature_fn=_finetune_features(model, cfg))
    else:
        feats = _features_for(model, out, train_rows, cfg.per_band)
        net, clog = cls.train_classifier(net, feats, y_train, tcfg)
    test_feats = _features_for(model, out, test_rows, cfg.per_band)
    report = cls.evaluate(net, test_feats, np.array([r.label for r in test_rows]),
                          groups=np.array([r.source for r in test_rows]))
    return TrainOutcome(model, jlog, net, clog, report)


def _flow_pool(out: Path, rows: list[ManifestRow], cfg: PipelineConfig, seed: int) -> np.ndarray:
    """A seeded sample of single flow frames from the training epochs (flow domain)."""
    probe = model_frames(load_flow(out, rows[0].epoch_id), cfg.per_band)
    per_epoch = probe.shape[0]
    total = len(rows) * per_epoch
    pick = np.sort(np.random.default_rng(seed).choice(total, min(cfg.joint_flow_pool, total), replace=False))
    frames = []
    for ep in np.unique(pick // per_epoch):
        f = model_frames(load_flow(out, rows[ep].epoch_id), cfg.per_band)
        frames.append(f[pick[pick // per_epoch == ep] % per_epoch])
    return np.concatenate(frames).astype(float)


def _features_for(model: JointModel, out: Path, rows: list[ManifestRow], per_band: bool,
                  chunk: int = 32) -> np.ndarray:
    model = model.copy(np.float32)  # inference only: single precision is ample and twice as fast
    parts = []
    for i in range(0, len(rows), chunk):
        parts.append(sequence_features(model, _load_flows(out, rows[i:i + chunk]), per_band).astype(np.float32))
    return np.concatenate(parts)


def _finetune_features(model: JointModel, cfg: PipelineConfig):
    """Feature function that also updates the last extractor convolution."""
    keep = {"extr.conv2.W", "extr.conv2.b"}

    def fn(flows: np.ndarray):
        n, nb, npairs = flows.shape[:3]
        x = model_frames(flows.astype(float), cfg.per_band)
        x = x.reshape((-1,) + x.shape[2:])
        f, cache = model.features(x, FLOW)

        def back(dfeats: np.ndarray):
            g = model.features_backward(cache, dfeats.reshape(f.shape), keep=keep)
            for k in keep:
                model.params[k] -= cfg.cls_lr * g[k]

        return f.reshape(n, npairs, -1), back

    return fn


def split_rows(rows: list[ManifestRow]) -> tuple[list[ManifestRow], list[ManifestRow]]:
    return [r for r in rows if r.split == "train"], [r for r in rows if r.split == "test"]


def train(cfg: PipelineConfig) -> TrainOutcome:
    out = cfg.out_dir
    train_rows, test_rows = split_rows(read_manifest(out))
    outcome = run_training(cfg, train_rows, test_rows, cfg.alpha, cfg.seed)
    params = {**outcome.model.params, **outcome.net.params}
    formats.write_model(out / "model.eegm", params)
    if outcome.joint_log is not None:
        _write_text(out / "joint_log.csv", outcome.joint_log.to_csv())
    _write_text(out / "classifier_log.csv", outcome.cls_log.to_csv())
    _write_text(out / "confusion.csv", outcome.report.to_csv())
    _write_text(out / "report.txt", outcome.report.summary())
    return outcome


# ---------------------------------------------------------------- experiment


def nested_subsets(sources: list[int], fractions: list[float], seed: int) -> dict[float, set[int]]:
    """Source subsets for each fraction, each contained in every larger one."""
    order = np.random.default_rng(seed).permutation(sorted(sources))
    return {f: {int(s) for s in order[:max(1, int(round(f * len(order))))]} for f in fractions}


def reduce_experiment(cfg: PipelineConfig) -> list[dict]:
    """Accuracy with and without joint training on shrinking training sets; writes table CSVs."""
    out = cfg.out_dir
    rows = read_manifest(out)
    train_rows, test_rows = split_rows(rows)
    if not train_rows or not test_rows:
        raise ValidationError("reduce-experiment needs both train and test epochs", "reduce-experiment")
    n_classes = max(r.label for r in rows) + 1
    sources = sorted({r.source for r in train_rows})
    results = []
    for seed in cfg.seed_list:
        subsets = nested_subsets(sources, cfg.fraction_list, seed)
        for frac in cfg.fraction_list:
            chosen = [r for r in train_rows if r.source in subsets[frac]]
            acc = {}
            for key, alpha in (("with_joint", cfg.alpha), ("without_joint", 0.0)):
                if key == "without_joint" and cfg.alpha == 0:
                    acc[key] = acc["with_joint"]
                    continue
                outcome = run_training(cfg, chosen, test_rows, alpha, seed, n_classes)
                acc[key] = outcome.report.accuracy
                log.info("seed %d fraction %g %s accuracy %.4f", seed, frac, key, acc[key])
            results.append({"seed": seed, "fraction": frac, **acc})

    by_seed = [(r["seed"], _pct(r["fraction"]), repr(r["with_joint"]), repr(r["without_joint"])) for r in results]
    _write_text(out / "table_by_seed.csv",
                _csv_text(("seed", "training_data", "with_joint", "without_joint"), by_seed))
    table = []
    for frac in cfg.fraction_list:
        sel = [r for r in results if r["fraction"] == frac]
        table.append((_pct(frac), repr(float(np.mean([r["with_joint"] for r in sel]))),
                      repr(float(np.mean([r["without_joint"] for r in sel])))))
    _write_text(out / "table.csv", _csv_text(("training_data", "with_joint", "without_joint"), table))
    return results


def _pct(frac: float) -> str:
    return f"{frac * 100:g}%"


# ---------------------------------------------------------------- visualize


def heatmap(confusion: np.ndarray, cell: int = 16) -> np.ndarray:
    """White-to-red rendering of row-normalized counts, ``cell`` pixels per entry."""
    conf = np.asarray(confusion, dtype=float)
    rows = conf.sum(axis=1, keepdims=True)
    frac = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    fade = np.rint(255 * (1 - frac)).astype(np.uint8)
    rgb = np.stack([np.full_like(fade, 255), fade, fade], axis=-1)
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def read_confusion(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        body = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in row[1:]] for row in body], dtype=np.int64)


def visualize(cfg: PipelineConfig, epoch_id: int) -> Path:
    out = cfg.out_dir
    rows = {r.epoch_id: r for r in read_manifest(out)}
    if epoch_id not in rows:
        raise ValidationError(f"epoch id {epoch_id} not in {out / 'manifest.csv'}", "visualize")
    row = rows[epoch_id]
    if cfg.recording:
        inputs = load_inputs(cfg)
    else:
        montage = load_montage(out / "input" / "montage.csv")
        inputs = Inputs(montage, load_recording(out / "input" / "recording.csv", montage), {}, [])
    rec = inputs.recording
    window = cfg.window_for(rec.rate)
    data = rec.data[:, row.onset:row.onset + window]
    if data.shape[1] != window:
        raise ValidationError(f"epoch {epoch_id} does not fit the recording", "visualize")
    topo = Topography(inputs.montage, size=cfg.grid)
    video = render_video(rhythm_stack(data, rec.rate, selected_bands(cfg)), topo, cfg.frames, cfg.power)
    flow = load_flow(out, epoch_id)

    dest = out / "visualize" / f"epoch_{epoch_id:06d}"
    dest.mkdir(parents=True, exist_ok=True)
    for b, name in enumerate(cfg.band_names):
        frames = formats.to_u8(video[b])
        for t, frame in enumerate(frames):
            formats.write_pgm(dest / f"{name}_frame_{t:02d}.pgm", frame)
        for p in range(flow.shape[1]):
            formats.write_ppm(dest / f"{name}_flow_{p:02d}.ppm", flow_to_hsv(flow[b, p]))
    conf_path = out / "confusion.csv"
    if conf_path.is_file():
        formats.write_ppm(out / "visualize" / "confusion.ppm", heatmap(read_confusion(conf_path)))
    return dest


__all__ = ["convert", "train", "reduce_experiment", "visualize", "run_training"]
