"""Mini-batch training loop with early stopping, evaluation and run reports."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, DivergenceError, RangeError
from .layers import softmax
from .metrics import (CSV_HEADER, ConfusionMatrix, MetricsReport, confusion,
                      cross_entropy, softmax_ce_backward, weighted_metrics)
from .model import ModelConfig, Network, build_model
from .optim import AdamState, adam_step
from .tensor import RngStream

logger = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    learning_rate: float = 1e-4
    early_stop_patience: int = 10
    seed: int = 42
    input_size: tuple[int, int] = (224, 224)
    channels: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise RangeError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise RangeError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise RangeError("early_stop_patience must be >= 1")
        if not self.learning_rate > 0:
            raise RangeError("learning_rate must be > 0")


@dataclass
class DataSplits:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    steps_per_epoch: int = 0
    test_metrics: MetricsReport | None = None
    test_confusion: ConfusionMatrix | None = None
    wall_time: float = 0.0

    def loss_curve_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc"]
        for i, (tl, vl, va) in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
            lines.append(f"{i},{tl!r},{vl!r},{va!r}")
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        if self.test_metrics is None:
            raise DataError("no test metrics recorded")
        return ",".join(CSV_HEADER) + "\n" + self.test_metrics.csv_row() + "\n"

    def loss_curve_svg(self, width=640, height=360) -> str:
        return loss_curve_svg(self.train_loss, self.val_loss, width, height)


def loss_curve_svg(train_loss, val_loss, width=640, height=360) -> str:
    pad = 40
    n = max(len(train_loss), 1)
    values = [v for v in list(train_loss) + list(val_loss) if math.isfinite(v)] or [0.0, 1.0]
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0

    def pts(series):
        out = []
        for i, v in enumerate(series):
            x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
            y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
            out.append(f"{x:.2f},{y:.2f}")
        return " ".join(out)

    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts(train_loss)}"/>\n'
        f'<polyline fill="none" stroke="#ff7f0e" stroke-width="2" points="{pts(val_loss)}"/>\n'
        f'<text x="{width - pad - 120}" y="{pad}" fill="#1f77b4">training loss</text>\n'
        f'<text x="{width - pad - 120}" y="{pad + 16}" fill="#ff7f0e">validation loss</text>\n'
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">epoch (1-{n})</text>\n'
        f'<text x="4" y="{pad - 8}">{hi:.4g}</text>\n'
        f'<text x="4" y="{height - pad}">{lo:.4g}</text>\n'
        "</svg>\n"
    )


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def iterate_batches(order: np.ndarray, batch_size: int):
    """Yield index batches in ``order``; the final partial batch is kept."""
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def early_stop(history, patience: int) -> tuple[bool, int]:
    """Return ``(stop, best_epoch)`` with 1-based epochs.

    Only a strict decrease counts as improvement, so the earliest minimum
    is the best epoch.
    """
    if len(history) == 0:
        raise DataError("empty validation history")
    best = int(np.argmin(np.asarray(history, dtype=np.float64))) + 1
    return len(history) - best >= patience, best


def predict_proba(network: Network, X, batch_size=EVAL_BATCH) -> np.ndarray:
    out = [softmax(network.forward(X[i:i + batch_size], training=False))
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(network: Network, X, y) -> tuple[MetricsReport, ConfusionMatrix]:
    if len(X) == 0:
        raise DataError("cannot evaluate on an empty split")
    probs = predict_proba(network, X)
    cm = confusion(probs.argmax(axis=1), y, network.num_classes)
    return weighted_metrics(cm), cm


def _loss_and_accuracy(network, X, y):
    probs = predict_proba(network, X)
    return cross_entropy(probs, y), float(np.mean(probs.argmax(axis=1) == y))


def fit_network(network: Network, data: DataSplits, cfg: TrainConfig, callbacks=()) -> TrainReport:
    """Train ``network`` in place and leave it holding the best-validation weights.

    Each callback is called as ``cb(epoch, network)`` after an epoch's
    optimizer steps and before its validation pass.
    """
    X, y = data.X_train, np.asarray(data.y_train, dtype=np.int64)
    yv = np.asarray(data.y_val, dtype=np.int64)
    if len(X) == 0:
        raise DataError("training split is empty")
    if len(data.X_val) == 0:
        raise DataError("validation split is empty")
    network.reset_dropout(cfg.seed)
    state = AdamState(learning_rate=cfg.learning_rate)
    params = {name: value for name, _, _, value in network.parameters()}
    report = TrainReport(steps_per_epoch=steps_per_epoch(len(X), cfg.batch_size))
    best_loss, best_state = math.inf, network.state_dict()
    t0 = time.perf_counter()
    logger.info("training: %d samples, batch %d, lr %g, %d steps/epoch",
                len(X), cfg.batch_size, cfg.learning_rate, report.steps_per_epoch)

    for epoch in range(1, cfg.max_epochs + 1):
        order = RngStream(cfg.seed, "shuffle", epoch).generator().permutation(len(X))
        total, step = 0.0, 0
        for step, idx in enumerate(iterate_batches(order, cfg.batch_size), start=1):
            logits = network.forward(X[idx], training=True)
            probs = softmax(logits)
            loss = cross_entropy(probs, y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, step, loss)
            network.backward(softmax_ce_backward(probs, y[idx]))
            adam_step(params, network.gradients(), state)
            total += loss * len(idx)
        for cb in callbacks:
            cb(epoch, network)
            params = {name: value for name, _, _, value in network.parameters()}
        val_loss, val_acc = _loss_and_accuracy(network, data.X_val, yv)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, step, val_loss)
        report.train_loss.append(total / len(X))
        report.val_loss.append(val_loss)
        report.val_acc.append(val_acc)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, network.state_dict()
        logger.info("epoch %d: steps=%d train_loss=%.6f val_loss=%.6f val_acc=%.4f",
                    epoch, step, report.train_loss[-1], val_loss, val_acc)
        stop, report.best_epoch = early_stop(report.val_loss, cfg.early_stop_patience)
        report.stopped_epoch = epoch
        if stop:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, report.best_epoch)
            break

    network.load_state_dict(best_state)
    if data.X_test is not None and len(data.X_test):
        report.test_metrics, report.test_confusion = evaluate(network, data.X_test, data.y_test)
    report.wall_time = time.perf_counter() - t0
    return report


def train(model: ModelConfig | Network, data: DataSplits, cfg: TrainConfig, callbacks=()):
    """Build (if needed), train and return ``(network, report)``."""
    network = build_model(model, seed=cfg.seed) if isinstance(model, ModelConfig) else model
    report = fit_network(network, data, cfg, callbacks)
    return network, report
