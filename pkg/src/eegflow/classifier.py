"""Recurrent classification head over per-frame feature sequences.

Two stacked LSTM layers read the 12-step sequence of extractor features; the
last hidden state passes through inverted dropout, a 64-unit rectified dense
layer and a K-way softmax layer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import NumericalError, ValidationError

DIVERGENCE_LIMIT = 1e4


@dataclass
class ClassifierNet:
    n_in: int
    n_classes: int
    hidden: int = 128
    dense: int = 64
    dropout: float = 0.25
    seed: int = 0
    params: nn.Params = field(default_factory=dict)
    dtype: str = "float64"  # compute precision; float32 roughly halves training time

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported classifier dtype {self.dtype!r}", "classifier")
        self.lstm1 = nn.LSTM("cls.lstm1", self.n_in, self.hidden)
        self.lstm2 = nn.LSTM("cls.lstm2", self.hidden, self.hidden)
        self.drop = nn.Dropout(self.dropout)
        self.head = nn.Sequential([
            nn.Dense("cls.fc1", self.hidden, self.dense), nn.ReLU(),
            nn.Dense("cls.fc2", self.dense, self.n_classes),
        ])
        if not self.params:
            rng = np.random.default_rng(self.seed)
            for part in (self.lstm1, self.lstm2, self.head):
                self.params.update(part.init(rng))
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in self.params.items()}

    @property
    def keys(self) -> list[str]:
        return self.lstm1.keys() + self.lstm2.keys() + self.head.keys()

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """Logits (n, K) for feature sequences (n, T, n_in)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ValidationError(f"expected (n, T, {self.n_in}) features, got {x.shape}", "classifier")
        p = self.params
        h1, c1 = self.lstm1.forward(p, x)
        h2, c2 = self.lstm2.forward(p, h1)
        d, cd = self.drop.forward(p, h2[:, -1], train, rng)
        z, ch = self.head.forward(p, d)
        return z, (c1, c2, cd, ch, h2.shape)

    def backward(self, cache, dz: np.ndarray, input_grad: bool = True) -> tuple[np.ndarray | None, nn.Params]:
        """Input gradient (n, T, n_in) and parameter gradients, through time."""
        c1, c2, cd, ch, shape = cache
        p = self.params
        dd, grads = self.head.backward(p, ch, dz)
        dlast, _ = self.drop.backward(p, cd, dd)
        dh2 = np.zeros(shape, dd.dtype)
        dh2[:, -1] = dlast
        dh1, g2 = self.lstm2.backward(p, c2, dh2)
        dx, g1 = self.lstm1.backward(p, c1, dh1, input_grad)
        grads.update(g1)
        grads.update(g2)
        return dx, grads

    def copy(self) -> "ClassifierNet":
        return ClassifierNet(self.n_in, self.n_classes, self.hidden, self.dense, self.dropout, self.seed,
                             {k: v.copy() for k, v in self.params.items()}, self.dtype)


def lstm_forward(layer: nn.LSTM, params: nn.Params, sequence: np.ndarray) -> np.ndarray:
    """Hidden states of one LSTM layer; (T, D) -> (T, H) or (n, T, D) -> (n, T, H)."""
    seq = np.asarray(sequence, dtype=float)
    single = seq.ndim == 2
    hs, _ = layer.forward(params, seq[None] if single else seq)
    return hs[0] if single else hs


def classify(net: ClassifierNet, features: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Class probabilities with dropout off; (T, F) -> (K,) or (n, T, F) -> (n, K)."""
    x = np.asarray(features)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = [nn.softmax(net.forward(x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    probs = np.concatenate(out) if out else np.zeros((0, net.n_classes))
    return probs[0] if single else probs


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 60
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch < 1:
            raise ValidationError(f"invalid classifier training config {self}", "classifier")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "loss", "accuracy")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(f"{r['epoch']},{r['loss']:.10g},{r['accuracy']:.10g}")
        return "\n".join(lines) + "\n"


def train_classifier(net: ClassifierNet, features: np.ndarray, labels: np.ndarray, config: TrainConfig,
                     feature_fn: Callable | None = None) -> tuple[ClassifierNet, TrainLog]:
    """Mini-batch gradient descent on softmax cross-entropy, BPTT through both LSTMs.

    ``features`` is (n, T, F). With ``feature_fn`` given, ``features`` holds raw
    per-sample inputs instead and ``feature_fn(x_batch)`` must return
    ``(feats, backward)`` where ``backward(dfeats)`` applies its own update;
    this is how the extractor's last layer is fine-tuned.
    """
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        raise ValidationError("empty training set", "classifier")
    if labels.min() < 0 or labels.max() >= net.n_classes:
        raise ValidationError(f"labels must lie in [0, {net.n_classes})", "classifier")
    ss = np.random.SeedSequence(config.seed)
    rng_order, rng_drop = (np.random.default_rng(s) for s in ss.spawn(2))
    tlog = TrainLog()
    for epoch in range(config.epochs):
        order = rng_order.permutation(n)
        total, hits = 0.0, 0
        for i in range(0, n, config.batch):
            idx = order[i:i + config.batch]
            if feature_fn is None:
                x, back = features[idx], None
            else:
                x, back = feature_fn(features[idx])
            z, cache = net.forward(x, train=True, rng=rng_drop)
            loss, dz = nn.cross_entropy(z, labels[idx])
            dx, grads = net.backward(cache, dz, input_grad=back is not None)
            if not np.isfinite(loss) or not nn.all_finite(grads):
                raise NumericalError(f"non-finite gradient at epoch {epoch}", "classifier")
            if loss > DIVERGENCE_LIMIT:
                raise NumericalError(f"classifier diverged at epoch {epoch} (loss {loss:.3g})", "classifier")
            nn.sgd(net.params, grads, config.lr)
            if back is not None:
                back(dx)
            total += loss * len(idx)
            hits += int(np.sum(z.argmax(axis=1) == labels[idx]))
        tlog.rows.append({"epoch": epoch, "loss": total / n, "accuracy": hits / n})
    return net, tlog


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # (K, K) counts, rows = true class, columns = predicted

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.confusion.shape[0]
        w.writerow(["true\\pred", *range(k)])
        for i, row in enumerate(self.confusion):
            w.writerow([i, *row.tolist()])
        return buf.getvalue()

    def summary(self) -> str:
        return f"accuracy={self.accuracy:.6f}\n"


def report_from_predictions(true: np.ndarray, pred: np.ndarray, n_classes: int) -> EvalReport:
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if len(true) == 0:
        raise ValidationError("empty test set", "classifier")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    return EvalReport(float(np.trace(conf) / conf.sum()), conf)


def evaluate(net: ClassifierNet, features: np.ndarray, labels: np.ndarray,
             groups: np.ndarray | None = None) -> EvalReport:
    """Accuracy and confusion matrix on a test set.

    With ``groups`` (one id per sequence), the class probabilities of all
    sequences sharing an id are averaged and scored once per id; this is how
    the jittered crops of one test epoch vote together.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValidationError("empty test set", "classifier")
    probs = classify(net, features)
    if groups is None:
        return report_from_predictions(labels, probs.argmax(axis=1), net.n_classes)
    groups = np.asarray(groups)
    ids, inverse = np.unique(groups, return_inverse=True)
    summed = np.zeros((len(ids), net.n_classes))
    np.add.at(summed, inverse, probs)
    first = np.zeros(len(ids), dtype=int)
    first[inverse[::-1]] = np.arange(len(groups))[::-1]
    true = labels[first]
    return report_from_predictions(true, summed.argmax(axis=1), net.n_classes)


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform shuffle; the first ceil-free round(n * fraction) indices form the test set."""
    if not 0 <= test_fraction < 1:
        raise ValidationError("test fraction must lie in [0, 1)", "classifier")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    if test_fraction > 0 and n > 1:
        n_test = max(n_test, 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])
