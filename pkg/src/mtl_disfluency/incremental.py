"""Word-by-word decoding with revisable output, and the incremental metrics.

After each word the tagger runs exactly one LSTM step, extends each task's
Viterbi lattice by one column and backtraces with the stop scores applied
provisionally, so the output is always a complete labelling of the prefix
and may revise earlier labels.  Nothing after word ``t`` is read before the
output for ``t`` is produced.

The LM "labels" are the argmax next-word predictions made after each word.

Streaming format, one line per task after every word::

    t<TAB>task<TAB>space-joined labels for words 1..t
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dialogue
from .layers import viterbi_backtrace, viterbi_init, viterbi_step
from .model import TaggerModel
from .tags import DisfTag, onset_positions
from .errors import UsageError

__all__ = [
    "IncrementalTagger",
    "HypothesisLog",
    "replay",
    "edit_counts",
    "edit_overhead",
    "first_time_to_detection",
    "format_stream",
    "parse_stream",
]


@dataclass
class _Lattice:
    delta: np.ndarray | None = None
    backpointers: list[np.ndarray] = field(default_factory=list)
    emissions: list[np.ndarray] = field(default_factory=list)


class IncrementalTagger:
    """Incremental state for one stream: carried (h, c), token count and per-task Viterbi lattices."""

    def __init__(self, model: TaggerModel):
        self.model = model
        self.state = model.initial_state()
        self.lattices = {t: _Lattice() for t in model.tagging_tasks}
        self.lm_predictions: list[str] = []
        self.word_log_probs: list[float] = []
        self.next_word_probs: np.ndarray | None = None
        self.consumed = 0
        self.closed = False

    def consume_word(self, token: str, duration_ms: int | None = None) -> dict[str, list[str]]:
        """Feed one word; returns every active task's labels over the whole prefix."""
        if self.closed:
            raise UsageError("consume_word called after end of stream")
        self.state, emissions, word_lp, next_probs = self.model.step(self.state, token, duration_ms)
        for task, lattice in self.lattices.items():
            crf = self.model.crf[task]
            row = emissions[task]
            lattice.emissions.append(row)
            if lattice.delta is None:
                lattice.delta = viterbi_init(crf.start.data, row)
            else:
                lattice.delta, back = viterbi_step(lattice.delta, crf.trans.data, row)
                lattice.backpointers.append(back)
        if next_probs is not None:
            self.word_log_probs.append(word_lp)
            self.next_word_probs = next_probs
            self.lm_predictions.append(self.model.vocab.id_to_word[int(np.argmax(next_probs))])
        self.consumed += 1
        return self.labels()

    def labels(self) -> dict[str, list[str]]:
        out = {}
        for task, lattice in self.lattices.items():
            if lattice.delta is None:
                out[task] = []
                continue
            path, _ = viterbi_backtrace(lattice.delta, self.model.crf[task].stop.data, lattice.backpointers)
            out[task] = self.model.alphabets[task].decode(path)
        if self.model.lm is not None:
            out["lm"] = list(self.lm_predictions)
        return out

    def end_of_stream(self) -> dict[str, list[str]]:
        self.closed = True
        return self.labels()


class HypothesisLog:
    """Per-task label sequences output after each prefix; entry ``t-1`` covers words 1..t."""

    def __init__(self, tasks: Iterable[str] = ()):
        self.entries: list[dict[str, tuple[str, ...]]] = []
        self.tasks = tuple(tasks)

    def append(self, labels: Mapping[str, Sequence[str]]) -> None:
        t = len(self.entries) + 1
        for task, seq in labels.items():
            if len(seq) != t:
                raise UsageError(f"entry {t} for task {task} has {len(seq)} labels")
        if not self.tasks:
            self.tasks = tuple(labels)
        self.entries.append({k: tuple(v) for k, v in labels.items()})

    def __len__(self) -> int:
        return len(self.entries)

    def for_task(self, task: str) -> list[tuple[str, ...]]:
        return [e[task] for e in self.entries]

    def final(self, task: str) -> list[str]:
        return list(self.entries[-1][task]) if self.entries else []


def replay(model: TaggerModel, dialogue: Dialogue | Sequence[str], durations=None) -> HypothesisLog:
    """Feed a dialogue word by word and record every prefix output."""
    if isinstance(dialogue, Dialogue):
        words, durations = dialogue.words, dialogue.durations
    else:
        words = list(dialogue)
        durations = list(durations) if durations is not None else [None] * len(words)
    tagger = IncrementalTagger(model)
    log = HypothesisLog(model.tasks)
    for word, dur in zip(words, durations):
        log.append(tagger.consume_word(word, dur))
    return log


def edit_counts(prefix_outputs: Sequence[Sequence[str]]) -> tuple[int, int]:
    """(necessary, unnecessary) edits: each new label is 1, each changed earlier label 2."""
    necessary = unnecessary = 0
    previous: Sequence[str] = ()
    for current in prefix_outputs:
        shared = min(len(previous), len(current))
        necessary += max(len(current) - len(previous), 0)
        unnecessary += 2 * sum(1 for a, b in zip(previous[:shared], current[:shared]) if a != b)
        previous = current
    return necessary, unnecessary


def edit_overhead(prefix_outputs: Sequence[Sequence[str]]) -> float:
    necessary, unnecessary = edit_counts(prefix_outputs)
    total = necessary + unnecessary
    return unnecessary / total if total else 0.0


def _is_onset(label: str) -> bool:
    return DisfTag.parse(label).is_onset


def first_time_to_detection(
    prefix_outputs: Sequence[Sequence[str]],
    gold_onsets: Sequence[int] | None = None,
    gold_tags: Sequence[str] | None = None,
    origin: int = 0,
) -> tuple[float, int, int]:
    """(mean FTD, detected, missed) for repair onsets at 0-based word positions.

    Labelling the onset as any rpS tag in the output that first includes it
    scores ``origin`` (0 by default; pass 1 to count that word itself).  The
    mean is NaN when nothing was detected.
    """
    if gold_onsets is None:
        gold_onsets = onset_positions(gold_tags or [])
    delays = []
    missed = 0
    for i in gold_onsets:
        hit = next((t for t in range(i, len(prefix_outputs)) if _is_onset(prefix_outputs[t][i])), None)
        if hit is None:
            missed += 1
        else:
            delays.append(hit - i + origin)
    mean = sum(delays) / len(delays) if delays else math.nan
    return mean, len(delays), missed


def format_stream(t: int, labels: Mapping[str, Sequence[str]], tasks: Sequence[str] | None = None) -> list[str]:
    return [f"{t}\t{task}\t{' '.join(labels[task])}" for task in (tasks or labels)]


def parse_stream(lines: Iterable[str]) -> HypothesisLog:
    """Rebuild a hypothesis log from streaming-format lines."""
    log = HypothesisLog()
    pending: dict[str, list[str]] = {}
    current = None
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        t_text, task, labels = line.split("\t")
        t = int(t_text)
        if current is not None and t != current:
            log.append(pending)
            pending = {}
        current = t
        pending[task] = labels.split(" ") if labels else []
    if pending:
        log.append(pending)
    return log
