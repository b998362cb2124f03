"""Deterministic training loop shared by the recognizer and the synthesis model."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput, PoisonedStep, PoisonedTraining
from .nn.layers import Module, ParameterStore
from .nn.optim import Adam
from .nn.tensor import Tape


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    grad_clip: float = 1.0
    ctc_weight: float = 0.5
    teacher_forcing: float = 1.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInput(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise InvalidInput(f"patience must be >= 1, got {self.patience}")
        if self.teacher_forcing != 1.0:
            raise InvalidInput("only full teacher forcing (1.0) is supported")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidInput(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass
class Item:
    """One training example: ``length`` drives bucketing, ``data`` is model-specific."""

    key: str
    length: int
    data: object


@dataclass
class Batch:
    items: list

    @property
    def lengths(self) -> np.ndarray:
        return np.array([it.length for it in self.items])

    @property
    def mask(self) -> np.ndarray:
        lengths = self.lengths
        return np.arange(lengths.max())[None, :] < lengths[:, None]


def make_batches(items: Sequence[Item], batch_size: int, seed: int | None, pool_batches: int = 8) -> list[Batch]:
    """Seeded shuffle, then length bucketing.

    The shuffled items are cut into pools of ``pool_batches`` batches; each
    pool is sorted by descending length and chunked, and the batch order is
    shuffled again. ``seed=None`` gives a fixed, unshuffled, sorted order.
    """
    items = list(items)
    if not items:
        return []
    if seed is None:
        order = sorted(range(len(items)), key=lambda i: (-items[i].length, items[i].key))
        return [Batch([items[i] for i in order[k:k + batch_size]]) for k in range(0, len(order), batch_size)]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(items))
    pool = batch_size * pool_batches
    batches = []
    for start in range(0, len(perm), pool):
        chunk = sorted(perm[start:start + pool], key=lambda i: (-items[i].length, items[i].key))
        batches += [Batch([items[i] for i in chunk[k:k + batch_size]]) for k in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def split_validation(keys: Sequence[str], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded selection of ``round(fraction * n)`` validation indices (at least 1 when possible)."""
    n = len(keys)
    n_val = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, n - 1) if n > 1 else 0
    rng = np.random.default_rng(seed)
    val = set(rng.choice(n, size=n_val, replace=False).tolist()) if n_val else set()
    train_idx = [i for i in range(n) if i not in val]
    return train_idx, sorted(val)


class EarlyStopping:
    """Stop once the monitored loss fails to strictly improve for ``patience`` epochs."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def early_stopping_walk(val_losses: Sequence[float], patience: int = 5, max_epochs: int | None = None):
    """Replay a validation-loss sequence; returns ``(stop_epoch, best_epoch, reason)`` (1-based)."""
    es = EarlyStopping(patience)
    limit = len(val_losses) if max_epochs is None else min(max_epochs, len(val_losses))
    for epoch in range(1, limit + 1):
        _, stop = es.update(epoch, val_losses[epoch - 1])
        if stop:
            return epoch, es.best_epoch, "early_stop"
    return limit, es.best_epoch, "max_epochs"


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int | None = None
    best_val: float = math.inf
    stop_reason: str = ""
    wall_clock: float = 0.0

    @property
    def train_losses(self):
        return [e[1] for e in self.epochs]

    @property
    def val_losses(self):
        return [e[2] for e in self.epochs]

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tbest_val"]
        best = math.inf
        for ep, tr, va in self.epochs:
            best = min(best, va)
            lines.append(f"{ep}\t{tr:.9g}\t{va:.9g}\t{best:.9g}")
        lines.append(f"# best_epoch\t{self.best_epoch}")
        lines.append(f"# stop_reason\t{self.stop_reason}")
        lines.append(f"# wall_clock_s\t{self.wall_clock:.1f}")
        return "\n".join(lines) + "\n"


LossFn = Callable[[Module, Batch], tuple]


def evaluate_loss(model: Module, items: Sequence[Item], batch_loss: LossFn, batch_size: int) -> float:
    """Weighted mean loss without recording a tape."""
    total = weight = 0.0
    for batch in make_batches(items, batch_size, None):
        loss, w = batch_loss(model, batch)
        total += float(loss.data) * w
        weight += w
    return total / weight if weight else math.nan


def train(model: Module, train_items: Sequence[Item], val_items: Sequence[Item], batch_loss: LossFn,
          cfg: TrainConfig, save_best: Callable[[], None] | None = None,
          log: Callable[[str], None] | None = print, on_epoch: Callable | None = None) -> TrainReport:
    """Adam over seeded batches with early stopping on the validation loss.

    ``batch_loss(model, batch)`` returns ``(loss_tensor, weight)`` where the
    loss is already divided by ``weight``. Without validation items the
    training loss is monitored instead. ``save_best`` is called whenever the
    monitored loss strictly improves.
    """
    store = ParameterStore(model)
    opt = Adam(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    t0 = time.perf_counter()
    if log:
        log("epoch\ttrain_loss\tval_loss\tseconds")
    for epoch in range(1, cfg.max_epochs + 1):
        t_ep = time.perf_counter()
        total = weight = 0.0
        for b, batch in enumerate(make_batches(train_items, cfg.batch_size, cfg.seed * 100003 + epoch)):
            store.zero_grad()
            with Tape() as tape:
                loss, w = batch_loss(model, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise PoisonedTraining(f"non-finite loss at epoch {epoch}, batch {b + 1}; "
                                       "the last saved checkpoint is the best valid one")
            tape.backward(loss)
            try:
                opt.step()
            except PoisonedStep as exc:
                raise PoisonedTraining(f"epoch {epoch}, batch {b + 1}: {exc}") from exc
            total += value * w
            weight += w
        train_loss = total / weight
        val_loss = evaluate_loss(model, val_items, batch_loss, cfg.batch_size) if val_items else train_loss
        if not np.isfinite(val_loss):
            raise PoisonedTraining(f"non-finite validation loss at epoch {epoch}")
        report.epochs.append((epoch, train_loss, val_loss))
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            report.best_epoch, report.best_val = epoch, val_loss
            if save_best:
                save_best()
        if log:
            log(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{time.perf_counter() - t_ep:.1f}")
        if on_epoch is not None and on_epoch(epoch, train_loss, val_loss):
            report.stop_reason = "target_reached"
            break
        if stop:
            report.stop_reason = "early_stop"
            break
    else:
        report.stop_reason = "max_epochs"
    report.wall_clock = time.perf_counter() - t0
    if log:
        log(f"# best_epoch={report.best_epoch} best_val={report.best_val:.6f} "
            f"stop={report.stop_reason} wall_clock={report.wall_clock:.1f}s")
    return report


def write_report(out_path, report: TrainReport, config: dict | None = None) -> Path:
    path = Path(str(out_path) + ".report.tsv")
    text = report.to_tsv()
    if config is not None:
        text += f"# config\t{json.dumps(config, sort_keys=True)}\n"
    path.write_text(text)
    return path


def config_dict(*cfgs) -> dict:
    out = {}
    for c in cfgs:
        out.update(asdict(c))
    return out
