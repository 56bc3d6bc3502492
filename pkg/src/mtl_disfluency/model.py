"""Shared-LSTM multi-task tagger: per-task heads, loss combination and checkpoints.

Checkpoint layout (version 1)::

    MTLDISF-CHECKPOINT 1\\n
    <header: one line of JSON, sorted keys>\\n
    <payload: float64 little-endian tensors, back to back>

The header records the model config, loss mode, vocabulary, tag alphabets,
duration statistics, and for each tensor its name, shape and byte offset,
plus the payload length and SHA-256.  A truncated or altered file fails the
integrity check on load.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import Alphabet, Dialogue, DurationStats, EmbeddingTable, Vocabulary, random_embeddings
from .errors import CheckpointError, ConfigError, NumericalError, ShapeError, UsageError
from .layers import (
    CrfParams,
    FfHead,
    LmHead,
    LstmParams,
    crf_emissions,
    crf_nll,
    crf_viterbi,
    ff_tanh,
    lm_log_probs,
    lm_nll,
    lm_repr,
    lstm_sequence,
    lstm_step,
)

__all__ = [
    "TASKS",
    "TAGGING_TASKS",
    "ModelConfig",
    "LossMode",
    "TaggerModel",
    "ForwardOutput",
    "StepState",
    "Prediction",
    "parse_tasks",
    "combined_loss",
    "predict_final",
]

TASKS = ("disf", "uttseg", "pos", "lm")
TAGGING_TASKS = ("disf", "uttseg", "pos")
MAGIC = b"MTLDISF-CHECKPOINT"
FORMAT_VERSION = 1


def parse_tasks(value: str | Iterable[str]) -> tuple[str, ...]:
    """Normalise a task subset (``"disf,lm"`` or an iterable) into canonical order."""
    names = [t.strip().lower() for t in (value.split(",") if isinstance(value, str) else value)]
    names = [n for n in names if n]
    unknown = sorted(set(names) - set(TASKS))
    if unknown:
        raise ConfigError(f"unknown task(s) {', '.join(unknown)}; choose from {', '.join(TASKS)}")
    if not names:
        raise ConfigError("at least one task is required")
    return tuple(t for t in TASKS if t in names)


@dataclass(frozen=True)
class ModelConfig:
    tasks: tuple[str, ...] = TASKS
    embed_dim: int = 50
    hidden: int = 200
    ff_dim: int = 100
    lm_dim: int = 50
    vocab_cap: int = 7000
    use_timing: bool = False
    seed: int = 0
    dropout: float = 0.0  # on embeddings and shared LSTM outputs, training only

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", parse_tasks(self.tasks))
        for name in ("embed_dim", "hidden", "ff_dim", "lm_dim", "vocab_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.embed_dim + (1 if self.use_timing else 0)


@dataclass
class LossMode:
    """Naive weighting (tagging losses + ``alpha`` * LM loss) or learned task uncertainty.

    In uncertainty mode each task has ``eta = log(sigma)``; its loss is
    weighted by ``exp(-2 eta)`` and ``eta`` is added as a penalty.
    """

    kind: str = "uncertainty"
    alpha: float = 1.0
    eta: dict[str, Parameter] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("naive", "uncertainty"):
            raise ConfigError(f"loss mode must be naive or uncertainty, not {self.kind!r}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")

    @classmethod
    def naive(cls, alpha: float = 1.0) -> LossMode:
        return cls("naive", alpha)

    @classmethod
    def uncertainty(cls, tasks: Iterable[str], init: float = 0.0) -> LossMode:
        return cls("uncertainty", 1.0, {t: Parameter(np.array(init), f"eta.{t}") for t in tasks})

    def parameters(self) -> list[Parameter]:
        return [self.eta[t] for t in TASKS if t in self.eta]

    def sigmas(self) -> dict[str, float]:
        return {t: math.exp(float(p.data)) for t, p in self.eta.items()}


def combined_loss(task_losses: Mapping[str, Tensor | float], mode: LossMode) -> Tensor:
    """Scalar training objective from per-task losses."""
    losses = {t: ad.constant(v) for t, v in task_losses.items()}
    for t, v in losses.items():
        if not np.all(np.isfinite(v.data)):
            raise NumericalError(f"loss for task {t} is not finite")
    if not losses:
        raise UsageError("no task losses to combine")
    total: Tensor | None = None
    for task in sorted(losses, key=TASKS.index):
        loss = losses[task]
        if mode.kind == "naive":
            term = loss * mode.alpha if task == "lm" else loss
        else:
            if task not in mode.eta:
                raise UsageError(f"no uncertainty parameter for task {task}")
            eta = mode.eta[task]
            term = loss * ad.exp(eta * -2.0) + eta
        total = term if total is None else total + term
    return total


@dataclass
class ForwardOutput:
    emissions: dict[str, Tensor]
    lm_log_probs: Tensor | None
    h: np.ndarray
    c: np.ndarray


@dataclass
class StepState:
    h: np.ndarray
    c: np.ndarray
    m_prev: np.ndarray | None  # LM representation of the previous word; None before the first


@dataclass
class Prediction:
    labels: dict[str, list[str]]
    lm_log_probs: list[float]

    def labels_for(self, task: str) -> list[str]:
        if task not in self.labels:
            raise UsageError(f"task {task!r} is not active in this model")
        return self.labels[task]


class TaggerModel:
    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        alphabets: Mapping[str, Alphabet],
        loss_mode: LossMode | None = None,
        duration_stats: DurationStats | None = None,
        embeddings: EmbeddingTable | None = None,
    ):
        self.config = config
        self.vocab = vocab
        self.tagging_tasks = tuple(t for t in TAGGING_TASKS if t in config.tasks)
        self.alphabets = {t: alphabets[t] for t in self.tagging_tasks}
        self.duration_stats = duration_stats or DurationStats()
        if loss_mode is None:
            loss_mode = LossMode.uncertainty(config.tasks)
        if loss_mode.kind == "uncertainty":
            missing = [t for t in config.tasks if t not in loss_mode.eta]
            for t in missing:
                loss_mode.eta[t] = Parameter(np.array(0.0), f"eta.{t}")
            loss_mode.eta = {t: loss_mode.eta[t] for t in config.tasks}
        self.loss_mode = loss_mode

        rng = np.random.default_rng(config.seed)
        if embeddings is None:
            table = random_embeddings(len(vocab), config.embed_dim, config.seed)
        else:
            table = embeddings.matrix
            if table.shape != (len(vocab), config.embed_dim):
                raise ShapeError(f"embedding table {table.shape} for vocab {len(vocab)} x {config.embed_dim}")
        self.embedding = Parameter(table, "embedding")
        self.lstm = LstmParams.init(config.input_dim, config.hidden, rng)
        self.ff = {t: FfHead.init(config.hidden, config.ff_dim, rng, f"{t}.ff") for t in self.tagging_tasks}
        self.crf = {
            t: CrfParams.init(config.ff_dim, len(self.alphabets[t]), rng, f"{t}.crf") for t in self.tagging_tasks
        }
        self.lm = LmHead.init(config.hidden, config.lm_dim, len(vocab), rng) if "lm" in config.tasks else None

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Parameter]:
        params = [self.embedding] + self.lstm.parameters()
        for t in self.tagging_tasks:
            params += self.ff[t].parameters() + self.crf[t].parameters()
        if self.lm is not None:
            params += self.lm.parameters()
        return params + self.loss_mode.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values, strict=True):
            p.data[...] = v

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.config.tasks

    # ------------------------------------------------------------ inputs

    def word_ids(self, words: Sequence[str]) -> np.ndarray:
        return self.vocab.encode_all(words)

    def duration_column(self, durations: Sequence[int | None]) -> np.ndarray:
        return np.array([[self.duration_stats.z(d)] for d in durations], dtype=np.float64)

    def gold_ids(self, task: str, dialogue: Dialogue) -> np.ndarray | None:
        """Label ids for a tagging task, or None if some gold label is outside the alphabet."""
        source = {"disf": dialogue.disf_tags, "uttseg": dialogue.utt_tags, "pos": dialogue.pos_tags}[task]
        ids = [self.alphabets[task].encode(x) for x in source]
        if any(i is None for i in ids):
            return None
        return np.array(ids, dtype=np.int64)

    def initial_state(self) -> StepState:
        hidden = self.config.hidden
        return StepState(np.zeros(hidden), np.zeros(hidden), None)

    # ------------------------------------------------------------ training forward

    def forward(
        self,
        ids: np.ndarray,
        durations: Sequence[int | None] | None,
        h0: np.ndarray,
        c0: np.ndarray,
        dialogue_start: bool,
        dropout_rng: np.random.Generator | None = None,
    ) -> ForwardOutput:
        """One shared LSTM pass over a token window; every head reads the same hidden states.

        Passing ``dropout_rng`` switches on training-time dropout (if configured).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("forward needs a non-empty 1-D window of word ids")
        if h0.shape != (self.config.hidden,) or c0.shape != (self.config.hidden,):
            raise ShapeError(f"carried state {h0.shape}/{c0.shape} for hidden {self.config.hidden}")
        drop = self.config.dropout if dropout_rng is not None else 0.0
        xs = _dropout(ad.lookup(self.embedding, ids), drop, dropout_rng)
        if self.config.use_timing:
            durations = durations if durations is not None else [None] * len(ids)
            xs = ad.concat([xs, self.duration_column(durations)], axis=1)
        hs, h_last, c_last = lstm_sequence(xs, h0, c0, self.lstm)
        hs = _dropout(hs, drop, dropout_rng)
        emissions = {t: crf_emissions(ff_tanh(hs, self.ff[t]), self.crf[t]) for t in self.tagging_tasks}
        log_probs = None
        if self.lm is not None:
            if dialogue_start:
                first = ad.reshape(self.lm.m0, (1, self.config.lm_dim))
            else:
                first = ad.reshape(lm_repr(h0, self.lm), (1, self.config.lm_dim))
            m_prev = first if len(ids) == 1 else ad.concat([first, lm_repr(hs[:-1], self.lm)], axis=0)
            log_probs = lm_log_probs(m_prev, self.lm)
        return ForwardOutput(emissions, log_probs, h_last.data.copy(), c_last.data.copy())

    def task_losses(
        self,
        out: ForwardOutput,
        ids: np.ndarray,
        gold: Mapping[str, np.ndarray | None],
        prev_labels: Mapping[str, int | None],
        final: bool,
    ) -> dict[str, Tensor]:
        """Per-token losses for one window; tasks whose gold is None are skipped."""
        losses: dict[str, Tensor] = {}
        T = len(ids)
        for t in self.tagging_tasks:
            if gold.get(t) is None:
                continue
            nll = crf_nll(out.emissions[t], self.crf[t], gold[t], prev_labels.get(t), final)
            losses[t] = nll * (1.0 / T)
        if out.lm_log_probs is not None:
            losses["lm"] = lm_nll(out.lm_log_probs, ids)
        return losses

    # ------------------------------------------------------------ inference

    def step(self, state: StepState, word: str, duration_ms: int | None = None):
        """Consume one word without recording gradients.

        Returns ``(new_state, emissions, word_log_prob, next_word_probs)``
        where the LM entries are None for models without an LM head.
        """
        with ad.no_grad():
            x = self.embedding.data[self.vocab.encode(word)]
            if self.config.use_timing:
                x = np.append(x, self.duration_stats.z(duration_ms))
            word_lp = None
            if self.lm is not None:
                m_prev = self.lm.m0.data if state.m_prev is None else state.m_prev
                word_lp = float(lm_log_probs(m_prev, self.lm).data[self.vocab.encode(word)])
            h, c = lstm_step(x, state.h, state.c, self.lstm)
            emissions = {t: crf_emissions(ff_tanh(h, self.ff[t]), self.crf[t]).data for t in self.tagging_tasks}
            m = None
            next_probs = None
            if self.lm is not None:
                m = lm_repr(h, self.lm).data
                next_probs = np.exp(lm_log_probs(m, self.lm).data)
        return StepState(h.data, c.data, m), emissions, word_lp, next_probs

    # ------------------------------------------------------------ persistence

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": {**asdict(self.config), "tasks": list(self.config.tasks)},
            "loss": {"kind": self.loss_mode.kind, "alpha": self.loss_mode.alpha},
            "vocab": self.vocab.id_to_word,
            "alphabets": {t: a.labels for t, a in self.alphabets.items()},
            "duration_stats": {"mean": self.duration_stats.mean, "std": self.duration_stats.std},
        }

    def to_bytes(self) -> bytes:
        header = self.header()
        chunks, entries, offset = [], [], 0
        for p in self.parameters():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            entries.append({"name": p.name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        header["tensors"] = entries
        header["payload_bytes"] = len(payload)
        header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n" + head + b"\n" + payload

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> TaggerModel:
        first, sep, rest = blob.partition(b"\n")
        if not sep or not first.startswith(MAGIC):
            raise CheckpointError("not a model checkpoint (bad magic line)")
        try:
            version = int(first[len(MAGIC):].strip())
        except ValueError:
            raise CheckpointError("unreadable checkpoint version") from None
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        head, sep, payload = rest.partition(b"\n")
        if not sep:
            raise CheckpointError("checkpoint truncated inside the header")
        try:
            header = json.loads(head)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if len(payload) != header["payload_bytes"]:
            raise CheckpointError(
                f"checkpoint payload has {len(payload)} bytes, header promises {header['payload_bytes']}"
            )
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise CheckpointError("checkpoint payload checksum mismatch")

        cfg = header["config"]
        config = ModelConfig(**{**cfg, "tasks": tuple(cfg["tasks"])})
        loss = header["loss"]
        mode = LossMode.uncertainty(config.tasks) if loss["kind"] == "uncertainty" else LossMode.naive(loss["alpha"])
        model = cls(
            config,
            Vocabulary(header["vocab"]),
            {t: Alphabet(labels) for t, labels in header["alphabets"].items()},
            mode,
            DurationStats(**header["duration_stats"]),
        )
        params = model.named_parameters()
        if sorted(params) != sorted(e["name"] for e in header["tensors"]):
            raise CheckpointError("checkpoint tensors do not match the model layout")
        for entry in header["tensors"]:
            p = params[entry["name"]]
            if tuple(entry["shape"]) != p.shape:
                raise CheckpointError(f"tensor {entry['name']} has shape {entry['shape']}, expected {p.shape}")
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        return model

    @classmethod
    def load(cls, path: str | Path) -> TaggerModel:
        return cls.from_bytes(Path(path).read_bytes())


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * ad.constant(keep)


def predict_final(model: TaggerModel, dialogue: Dialogue | Sequence[str], durations=None) -> Prediction:
    """Dialogue-final labels: full-sequence Viterbi per tagging head, plus per-word LM log-probs."""
    if isinstance(dialogue, Dialogue):
        words, durations = dialogue.words, dialogue.durations
    else:
        words = list(dialogue)
        durations = list(durations) if durations is not None else [None] * len(words)
    state = model.initial_state()
    rows: dict[str, list[np.ndarray]] = {t: [] for t in model.tagging_tasks}
    log_probs: list[float] = []
    for word, dur in zip(words, durations):
        state, emissions, lp, _ = model.step(state, word, dur)
        for t in model.tagging_tasks:
            rows[t].append(emissions[t])
        if lp is not None:
            log_probs.append(lp)
    labels = {}
    for t in model.tagging_tasks:
        if words:
            path, _ = crf_viterbi(np.array(rows[t]), model.crf[t])
            labels[t] = model.alphabets[t].decode(path)
        else:
            labels[t] = []
    return Prediction(labels, log_probs)
