"""Training loop: TBPTT windows, Adam with global-norm clipping, early stopping on dev loss."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .corpus import Dialogue, DurationStats, EmbeddingTable, build_alphabets, build_vocab
from .errors import ConfigError, NumericalError, UsageError
from .model import LossMode, ModelConfig, TaggerModel, combined_loss

__all__ = [
    "TrainConfig",
    "Adam",
    "EarlyStopping",
    "EpochRecord",
    "History",
    "windows",
    "build_model",
    "corpus_losses",
    "train_epoch",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 7
    seed: int = 0
    learning_rate: float = 1e-3
    window: int = 100
    clip_norm: float = 5.0

    def __post_init__(self) -> None:
        if self.max_epochs < 0 or self.patience < 1 or self.window < 1:
            raise ConfigError("max_epochs >= 0, patience >= 1 and window >= 1 required")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ConfigError("learning_rate and clip_norm must be positive")


class Adam:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 5.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))

    def step(self) -> float:
        """Apply one update from the accumulated gradients, then clear them. Returns the pre-clip norm."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericalError("gradient norm is not finite")
        scale = self.clip_norm / norm if self.clip_norm is not None and norm > self.clip_norm else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()
        return norm


class EarlyStopping:
    """Tracks the best (lowest) monitored value; epochs are counted from 1."""

    def __init__(self, patience: int = 7):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's value; True if it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_task_losses: dict[str, float]
    eta: dict[str, float]
    improved: bool


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def eta_trajectory(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for rec in self.epochs:
            for t, v in rec.eta.items():
                out.setdefault(t, []).append(v)
        return out


def windows(length: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, length)) for s in range(0, length, size)]


def build_model(
    train_set: Sequence[Dialogue],
    model_config: ModelConfig,
    loss_mode: LossMode | None = None,
    embeddings: EmbeddingTable | None = None,
) -> TaggerModel:
    """Fresh model whose vocabulary, alphabets and duration statistics come from the training set."""
    vocab = build_vocab(train_set, model_config.vocab_cap)
    return TaggerModel(
        model_config,
        vocab,
        build_alphabets(train_set),
        loss_mode,
        DurationStats.from_dialogues(train_set),
        embeddings,
    )


def _dialogue_windows(model: TaggerModel, dialogue: Dialogue, size: int):
    """Yield (window ids, durations, gold per task, previous gold labels, is_first, is_last)."""
    ids = model.word_ids(dialogue.words)
    durations = dialogue.durations
    gold = {t: model.gold_ids(t, dialogue) for t in model.tagging_tasks}
    spans = windows(len(ids), size)
    for k, (s, e) in enumerate(spans):
        g = {t: None if v is None else v[s:e] for t, v in gold.items()}
        prev = {t: None if v is None or s == 0 else int(v[s - 1]) for t, v in gold.items()}
        yield ids[s:e], durations[s:e], g, prev, k == 0, k == len(spans) - 1


def corpus_losses(model: TaggerModel, dialogues: Sequence[Dialogue], window: int = 100) -> dict[str, float]:
    """Token-averaged per-task losses over a corpus, without recording gradients."""
    totals: dict[str, float] = {}
    counts: dict[str, int] = {}
    with ad.no_grad():
        for d in dialogues:
            if len(d) == 0:
                continue
            state = model.initial_state()
            h, c = state.h, state.c
            for ids, durs, gold, prev, first, last in _dialogue_windows(model, d, window):
                out = model.forward(ids, durs, h, c, dialogue_start=first)
                for t, loss in model.task_losses(out, ids, gold, prev, final=last).items():
                    totals[t] = totals.get(t, 0.0) + float(loss.data) * len(ids)
                    counts[t] = counts.get(t, 0) + len(ids)
                h, c = out.h, out.c
    return {t: totals[t] / counts[t] for t in totals}


def train_epoch(
    model: TaggerModel,
    dialogues: Sequence[Dialogue],
    optimizer: Adam,
    window: int,
    epoch: int = 1,
    dropout_rng: np.random.Generator | None = None,
) -> float:
    """One pass in the given order with an update per window; returns the mean window objective."""
    total, steps = 0.0, 0
    for d in dialogues:
        if len(d) == 0:
            continue
        h, c = model.initial_state().h, model.initial_state().c
        for w, (ids, durs, gold, prev, first, last) in enumerate(_dialogue_windows(model, d, window)):
            try:
                out = model.forward(ids, durs, h, c, dialogue_start=first, dropout_rng=dropout_rng)
                losses = model.task_losses(out, ids, gold, prev, final=last)
                if not losses:
                    h, c = out.h, out.c
                    continue
                loss = combined_loss(losses, model.loss_mode)
                ad.backward(loss)
                optimizer.step()
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, dialogue {d.id}, window {w}: {exc}", epoch=epoch, step=steps
                ) from exc
            total += float(loss.data)
            steps += 1
            h, c = out.h, out.c
    return total / steps if steps else 0.0


def train(
    train_set: Sequence[Dialogue],
    dev_set: Sequence[Dialogue],
    model_config: ModelConfig,
    loss_mode: LossMode | None = None,
    config: TrainConfig | None = None,
    embeddings: EmbeddingTable | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[TaggerModel, History]:
    """Train until ``max_epochs`` or ``patience`` epochs without a better dev loss.

    The monitor is the dev loss combined under the model's own loss mode.
    The returned model holds the parameters of the best epoch.
    """
    config = config or TrainConfig()
    if not train_set or all(len(d) == 0 for d in train_set):
        raise UsageError("training corpus is empty")
    model = build_model(train_set, model_config, loss_mode, embeddings)
    history = History()
    if config.max_epochs == 0:
        return model, history
    monitor_set = dev_set if dev_set else train_set
    optimizer = Adam(model.parameters(), config.learning_rate, clip_norm=config.clip_norm)
    stopper = EarlyStopping(config.patience)
    rng = np.random.default_rng(config.seed)
    drop_rng = None
    if model_config.dropout > 0:
        drop_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    best = model.snapshot()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        train_loss = train_epoch(model, [train_set[i] for i in order], optimizer, config.window, epoch, drop_rng)
        dev_losses = corpus_losses(model, monitor_set, config.window)
        with ad.no_grad():
            dev_loss = float(combined_loss(dev_losses, model.loss_mode).data) if dev_losses else math.inf
        improved = stopper.update(epoch, dev_loss)
        if improved:
            best = model.snapshot()
        eta = {t: float(p.data) for t, p in model.loss_mode.eta.items()}
        record = EpochRecord(epoch, train_loss, dev_loss, dev_losses, eta, improved)
        history.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    model.restore(best)
    return model, history
