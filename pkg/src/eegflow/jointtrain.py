"""Joint adversarial training of a shared convolutional feature extractor.

Two alternating steps on every mini-batch:

* extractor step: gradient descent on the image task loss
  ``CE(image head) + alpha * confusion`` w.r.t. the extractor and image head,
  where ``confusion`` is the cross-entropy between the (frozen) discriminator's
  output and the uniform domain distribution, averaged over both domains;
* discriminator step: gradient descent on the discriminator's supervised
  domain cross-entropy w.r.t. the discriminator only (optionally also the
  extractor, see ``JointConfig.disc_updates_extractor``).

Domain 0 is the natural-image proxy set (RGB), domain 1 is EEG optical flow
(5 bands x (dx, dy) = 10 channels). Each domain enters through its own 1x1
adapter; everything after the adapters is shared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

IMAGE, FLOW = 0, 1
N_DOMAINS = 2
DIVERGENCE_LIMIT = 1e4


@dataclass
class JointConfig:
    alpha: float = 0.1
    lr: float = 0.05
    disc_lr: float = 0.05
    steps: int = 300
    batch: int = 16  # per domain
    seed: int = 0
    disc_every: int = 1  # extractor steps per discriminator step
    disc_updates_extractor: bool = False
    adversary: bool = True  # False: image-task-only control, no discriminator steps

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValidationError(f"alpha must be finite and >= 0, got {self.alpha}", "jointtrain")
        if self.steps < 0 or self.batch < 1 or self.disc_every < 1:
            raise ValidationError("steps >= 0, batch >= 1 and disc_every >= 1 required", "jointtrain")


class JointBatch(NamedTuple):
    x_img: np.ndarray  # (n, 3, H, W)
    y_img: np.ndarray  # (n,)
    x_of: np.ndarray  # (m, 10, H, W)

    def check(self):
        if len(self.x_img) == 0 or len(self.x_of) == 0:
            raise ValidationError("both domains must be present in a joint batch", "jointtrain")


@dataclass
class JointModel:
    """Parameters of extractor (adapters + trunk), image head and discriminator."""

    in_channels: tuple[int, int] = (3, 10)
    n_img_classes: int = 10
    image_size: int = 32
    adapter_channels: int = 3
    disc_hidden: int = 64
    seed: int = 0
    params: nn.Params = field(default_factory=dict)

    def __post_init__(self):
        a = self.adapter_channels
        self.adapters = [nn.Conv2d(f"extr.adapter{d}", c, a, k=1) for d, c in enumerate(self.in_channels)]
        self.trunk = nn.Sequential([
            nn.Conv2d("extr.conv1", a, 8), nn.ReLU(), nn.MaxPool2(),
            nn.Conv2d("extr.conv2", 8, 16), nn.ReLU(), nn.MaxPool2(),
            nn.Flatten(),
        ])
        s = self.image_size // 4
        self.feature_dim = 16 * s * s
        self.img_head = nn.Dense("img.fc", self.feature_dim, self.n_img_classes)
        self.disc = nn.Sequential([
            nn.Dense("adv.fc1", self.feature_dim, self.disc_hidden), nn.ReLU(),
            nn.Dense("adv.fc2", self.disc_hidden, N_DOMAINS),
        ])
        if not self.params:
            rng = np.random.default_rng(self.seed)
            for part in (*self.adapters, self.trunk, self.img_head, self.disc):
                self.params.update(part.init(rng))

    @property
    def extr_keys(self) -> list[str]:
        return [k for a in self.adapters for k in a.keys()] + self.trunk.keys()

    @property
    def img_keys(self) -> list[str]:
        return self.img_head.keys()

    @property
    def adv_keys(self) -> list[str]:
        return self.disc.keys()

    def features(self, x: np.ndarray, domain: int):
        x = np.asarray(x, dtype=self.params["extr.conv1.W"].dtype)
        if x.ndim != 4 or x.shape[1] != self.in_channels[domain]:
            raise ValidationError(
                f"domain {domain} expects (n, {self.in_channels[domain]}, H, W), got {x.shape}", "jointtrain")
        a, ca = self.adapters[domain].forward(self.params, x)
        f, ct = self.trunk.forward(self.params, a)
        return f, (domain, ca, ct)

    def features_backward(self, cache, dfeat: np.ndarray, keep: set[str] | None = None) -> nn.Params:
        """Extractor gradients for one domain's features.

        With ``keep`` given, backpropagation stops as soon as every kept key
        has its gradient (used when only the last layer is fine-tuned).
        """
        domain, ca, ct = cache
        grads: nn.Params = {}
        dy = dfeat
        for layer, c in zip(reversed(self.trunk.layers), reversed(ct)):
            dy, g = layer.backward(self.params, c, dy)
            grads.update(g)
            if keep is not None and keep.issubset(grads):
                return {k: grads[k] for k in keep}
        _, g = self.adapters[domain].backward(self.params, ca, dy)
        grads.update(g)
        return grads

    def discriminate(self, feats: np.ndarray) -> np.ndarray:
        """Domain probabilities (n, 2) for feature vectors."""
        z, _ = self.disc.forward(self.params, feats)
        return nn.softmax(z)

    def classify_images(self, x: np.ndarray) -> np.ndarray:
        f, _ = self.features(x, IMAGE)
        z, _ = self.img_head.forward(self.params, f)
        return nn.softmax(z)

    def copy(self, dtype=None) -> "JointModel":
        """Deep copy; with ``dtype`` the parameters (and so all computation) are cast."""
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "params"}
        return JointModel(**kw, params={k: v.astype(dtype or v.dtype) for k, v in self.params.items()})


def loss_adver_confusion(disc_out: np.ndarray) -> float:
    """Mean over samples of -sum_d (1/D) log p_d for rows of domain probabilities."""
    p = np.atleast_2d(np.asarray(disc_out, dtype=float))
    logp, _ = nn.clamped_log(p)
    return float(-(logp.mean(axis=1)).mean())


def loss_img(logits: np.ndarray, label: int, confusion: float, alpha: float) -> float:
    """Cross-entropy of one sample's image-head logits plus ``alpha * confusion``."""
    if not np.isfinite(alpha):
        raise ValidationError("alpha must be finite", "jointtrain")
    ls = nn.log_softmax(np.asarray(logits, dtype=float))
    return float(-ls[label] + alpha * confusion)


def loss_disc_supervised(disc_out: np.ndarray, domain: int | np.ndarray) -> float:
    """Mean cross-entropy of domain probabilities against the true domain tags."""
    p = np.atleast_2d(np.asarray(disc_out, dtype=float))
    tags = np.broadcast_to(np.asarray(domain), (p.shape[0],))
    logp, _ = nn.clamped_log(p[np.arange(p.shape[0]), tags])
    return float(-logp.mean())


class ExtractorStep(NamedTuple):
    loss: float  # image cross-entropy + alpha * confusion
    cross_entropy: float
    confusion: float
    accuracy: float


class DiscriminatorStep(NamedTuple):
    loss: float
    accuracy: float


def extractor_objective(model: JointModel, batch: JointBatch, alpha: float):
    """Value and gradients (extractor + image head) of the extractor-step loss."""
    batch.check()
    p = model.params
    f_img, c_img = model.features(batch.x_img, IMAGE)
    logits, c_head = model.img_head.forward(p, f_img)
    ce, dlogits = nn.cross_entropy(logits, batch.y_img)
    df_img, grads = model.img_head.backward(p, c_head, dlogits)

    f_of, c_of = model.features(batch.x_of, FLOW)
    feats = np.concatenate([f_img, f_of])
    z, c_disc = model.disc.forward(p, feats)
    conf, dz = nn.uniform_cross_entropy(z)
    if alpha != 0:
        dfeats, _ = model.disc.backward(p, c_disc, alpha * dz)  # discriminator gradients discarded
        df_img = df_img + dfeats[:len(f_img)]
        g_of = model.features_backward(c_of, dfeats[len(f_img):])
    else:
        g_of = {}
    g_img = model.features_backward(c_img, df_img)
    for k in model.extr_keys:
        grads[k] = g_img.get(k, 0.0) + g_of.get(k, 0.0)
        if np.ndim(grads[k]) == 0:
            grads[k] = np.zeros_like(p[k])
    acc = float(np.mean(logits.argmax(axis=1) == batch.y_img))
    return ExtractorStep(ce + alpha * conf, ce, conf, acc), grads


def step_extractor(model: JointModel, batch: JointBatch, alpha: float, lr: float) -> ExtractorStep:
    """One descent step on the image-task + confusion loss; discriminator frozen."""
    result, grads = extractor_objective(model, batch, alpha)
    if not np.isfinite(result.loss) or not nn.all_finite(grads):
        raise NumericalError("non-finite gradient in extractor step", "jointtrain")
    nn.sgd(model.params, grads, lr, model.extr_keys + model.img_keys)
    return result


def discriminator_objective(model: JointModel, batch: JointBatch, with_extractor: bool = False):
    batch.check()
    p = model.params
    f_img, c_img = model.features(batch.x_img, IMAGE)
    f_of, c_of = model.features(batch.x_of, FLOW)
    feats = np.concatenate([f_img, f_of])
    tags = np.concatenate([np.full(len(f_img), IMAGE), np.full(len(f_of), FLOW)])
    z, c_disc = model.disc.forward(p, feats)
    loss, dz = nn.cross_entropy(z, tags)
    dfeats, grads = model.disc.backward(p, c_disc, dz)
    if with_extractor:
        g_img = model.features_backward(c_img, dfeats[:len(f_img)])
        g_of = model.features_backward(c_of, dfeats[len(f_img):])
        for k in model.extr_keys:
            grads[k] = g_img.get(k, 0.0) + g_of.get(k, 0.0)
    acc = float(np.mean(z.argmax(axis=1) == tags))
    return DiscriminatorStep(loss, acc), grads


def step_discriminator(model: JointModel, batch: JointBatch, lr: float,
                       update_extractor: bool = False) -> DiscriminatorStep:
    """One descent step on the supervised domain loss w.r.t. the discriminator."""
    result, grads = discriminator_objective(model, batch, update_extractor)
    if not np.isfinite(result.loss) or not nn.all_finite(grads):
        raise NumericalError("non-finite gradient in discriminator step", "jointtrain")
    keys = model.adv_keys + (model.extr_keys if update_extractor else [])
    nn.sgd(model.params, grads, lr, keys)
    return result


@dataclass
class JointLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "L_img", "L_adver_confusion", "L_disc", "disc_accuracy")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(str(r["step"]) if c == "step" else f"{r[c]:.10g}" for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


def joint_train(images: np.ndarray, labels: np.ndarray, flows: np.ndarray, config: JointConfig,
                model: JointModel | None = None) -> tuple[JointModel, JointLog]:
    """Alternate extractor and discriminator steps for ``config.steps`` rounds.

    ``images`` (n, 3, H, W) with ``labels``; ``flows`` (m, 10, H, W) single
    flow frames. Image and flow batches are drawn from separate seeded streams
    so the image-task trajectory does not depend on the adversary.
    """
    images = np.asarray(images, dtype=float)
    flows = np.asarray(flows, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0 or len(flows) == 0:
        raise ValidationError("joint training needs both images and flows", "jointtrain")
    if len(labels) != len(images):
        raise ValidationError("one label per image required", "jointtrain")
    if model is None:
        model = JointModel(in_channels=(images.shape[1], flows.shape[1]),
                           n_img_classes=int(labels.max()) + 1, image_size=images.shape[-1],
                           seed=config.seed)
    ss = np.random.SeedSequence(config.seed)
    rng_img, rng_of = (np.random.default_rng(s) for s in ss.spawn(2))
    nb_img = min(config.batch, len(images))
    nb_of = min(config.batch, len(flows))
    jlog = JointLog()
    disc = DiscriminatorStep(float("nan"), float("nan"))
    for step in range(config.steps):
        bi = rng_img.choice(len(images), nb_img, replace=False)
        bo = rng_of.choice(len(flows), nb_of, replace=False)
        batch = JointBatch(images[bi], labels[bi], flows[bo])
        ext = step_extractor(model, batch, config.alpha, config.lr)
        if config.adversary and step % config.disc_every == 0:
            disc = step_discriminator(model, batch, config.disc_lr, config.disc_updates_extractor)
        row = {"step": step, "L_img": ext.loss, "L_adver_confusion": ext.confusion,
               "L_disc": disc.loss, "disc_accuracy": disc.accuracy}
        jlog.rows.append(row)
        if max(ext.loss, 0.0 if np.isnan(disc.loss) else disc.loss) > DIVERGENCE_LIMIT:
            raise NumericalError(f"training diverged at step {step}: {row}", "jointtrain")
    return model, jlog


def evaluate_domains(model: JointModel, images: np.ndarray, flows: np.ndarray,
                     chunk: int = 256) -> float:
    """Discriminator accuracy over full image and flow sets (balanced per domain)."""
    accs = []
    for x, domain in ((images, IMAGE), (flows, FLOW)):
        hits = 0
        for i in range(0, len(x), chunk):
            f, _ = model.features(x[i:i + chunk], domain)
            hits += int(np.sum(model.discriminate(f).argmax(axis=1) == domain))
        accs.append(hits / len(x))
    return float(np.mean(accs))


def image_accuracy(model: JointModel, images: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    hits = 0
    for i in range(0, len(images), chunk):
        hits += int(np.sum(model.classify_images(images[i:i + chunk]).argmax(axis=1) == labels[i:i + chunk]))
    return hits / len(images)
