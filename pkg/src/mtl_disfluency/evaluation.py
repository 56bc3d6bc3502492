"""Dialogue-final metrics, error-analysis breakdowns and the evaluation report.

Word-level F1 scores are micro-averaged: counts are summed over dialogues
before precision and recall are taken.  With no gold and no predicted
positives, F1 is 1.0.

Repair onsets match on position alone for the headline ``f1_rps``; the
``_exact`` variant and the breakdowns also require the same distance ``N``.
Breakdowns bucket a gold repair by its type and its reparandum length
(interregnum excluded); unmatched predictions land in the bucket their own
tags imply.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dialogue, Vocabulary
from .errors import MalformedTags, UsageError
from .incremental import HypothesisLog, edit_counts, first_time_to_detection, replay
from .model import TaggerModel, predict_final
from .tags import DisfTag, RepairSpan, classify_repair, decode_disfluency

__all__ = [
    "Counts",
    "EvalReport",
    "rps_counts",
    "edit_term_counts",
    "uttseg_counts",
    "f1_rps",
    "f1_edit",
    "f1_uttseg",
    "pos_accuracy",
    "perplexity",
    "unigram_log_probs",
    "OnsetInfo",
    "onset_infos",
    "type_counts",
    "length_counts",
    "breakdown_by_type",
    "breakdown_by_length",
    "evaluate",
    "LENGTH_BUCKETS",
]

LENGTH_BUCKETS = ("1", "2", "3", "4", "5+")


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: Counts) -> Counts:
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def gold(self) -> int:
        return self.tp + self.fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        if self.tp + self.fp + self.fn == 0:
            return 1.0
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)


def _check(pred: Sequence, gold: Sequence) -> None:
    if len(pred) != len(gold):
        raise UsageError(f"prediction has {len(pred)} labels, gold has {len(gold)}")


def _positional(pred: Sequence[str], gold: Sequence[str], hit) -> Counts:
    _check(pred, gold)
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        hp, hg = hit(str(p)), hit(str(g))
        tp += hp and hg
        fp += hp and not hg
        fn += hg and not hp
    return Counts(tp, fp, fn)


def _onset_n(label: str) -> int | None:
    return DisfTag.parse(label).onset


def rps_counts(pred: Sequence[str], gold: Sequence[str], exact: bool = False) -> Counts:
    if not exact:
        return _positional(pred, gold, lambda x: _onset_n(x) is not None)
    _check(pred, gold)
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        np_, ng = _onset_n(str(p)), _onset_n(str(g))
        match = np_ is not None and np_ == ng
        tp += match
        fp += np_ is not None and not match
        fn += ng is not None and not match
    return Counts(tp, fp, fn)


def edit_term_counts(pred: Sequence[str], gold: Sequence[str]) -> Counts:
    return _positional(pred, gold, lambda x: x == "e")


def uttseg_counts(pred: Sequence[str], gold: Sequence[str]) -> Counts:
    return _positional(pred, gold, lambda x: x.endswith("."))


def f1_rps(pred: Sequence[str], gold: Sequence[str], exact: bool = False) -> float:
    return rps_counts(pred, gold, exact).f1


def f1_edit(pred: Sequence[str], gold: Sequence[str]) -> float:
    return edit_term_counts(pred, gold).f1


def f1_uttseg(pred: Sequence[str], gold: Sequence[str]) -> float:
    return uttseg_counts(pred, gold).f1


def pos_accuracy(pred: Sequence[str], gold: Sequence[str]) -> float:
    _check(pred, gold)
    if not gold:
        return 1.0
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def perplexity(log_probs: Iterable[float]) -> float:
    """``exp`` of the mean negative natural-log probability."""
    lp = np.asarray(list(log_probs), dtype=np.float64)
    if lp.size == 0:
        raise UsageError("perplexity of an empty sequence")
    return float(np.exp(-lp.mean()))


def unigram_log_probs(dialogues: Iterable[Dialogue], vocab: Vocabulary) -> np.ndarray:
    """Add-one smoothed unigram log-probabilities over the vocabulary ids (unknown word included)."""
    counts = np.ones(len(vocab))
    for d in dialogues:
        np.add.at(counts, vocab.encode_all(d.words), 1)
    return np.log(counts / counts.sum())


# ---------------------------------------------------------------- breakdowns


@dataclass(frozen=True)
class OnsetInfo:
    position: int
    distance: int
    kind: str  # rep | sub | del | unknown
    length: int  # reparandum length, interregnum excluded


def _length_bucket(n: int) -> str:
    return str(n) if n < 5 else "5+"


def onset_infos(tags: Sequence[str], words: Sequence[str] | None = None) -> list[OnsetInfo]:
    """Onsets described from a tag sequence.

    Well-formed sequences go through the codec (with the word-based repair
    type when ``words`` is given); otherwise each onset is read locally so
    that arbitrary predictions can still be scored.
    """
    tags = [str(t) for t in tags]
    try:
        spans = [s for s in decode_disfluency(tags) if isinstance(s, RepairSpan)]
    except MalformedTags:
        spans = None
    if spans is not None:
        out = []
        for s in spans:
            kind = classify_repair(s, words) if words is not None else s.kind
            out.append(OnsetInfo(s.onset, s.distance, kind.value.lower(), s.reparandum_length))
        return sorted(out, key=lambda o: o.position)

    parsed = [DisfTag.parse(t) for t in tags]
    out = []
    for p, tag in enumerate(parsed):
        if tag.onset is None:
            continue
        kind = tag.end
        if kind is None:
            q = p + 1
            while q < len(parsed) and parsed[q].is_fluent:
                q += 1
            if q < len(parsed) and parsed[q].onset is None:
                kind = parsed[q].end
        interregnum = 0
        j = p - 1
        while j >= 0 and parsed[j].edit and interregnum < tag.onset - 1:
            interregnum += 1
            j -= 1
        name = kind.value.lower() if kind is not None else "unknown"
        out.append(OnsetInfo(p, tag.onset, name, tag.onset - interregnum))
    return out


def _bucketed(pred: Sequence[str], gold: Sequence[str], words, key) -> dict[str, Counts]:
    _check(pred, gold)
    gold_onsets = {o.position: o for o in onset_infos(gold, words)}
    pred_onsets = {o.position: o for o in onset_infos(pred)}
    out: dict[str, Counts] = {}
    for pos, g in gold_onsets.items():
        p = pred_onsets.get(pos)
        hit = p is not None and p.distance == g.distance
        out[key(g)] = out.get(key(g), Counts()) + Counts(tp=int(hit), fn=int(not hit))
    for pos, p in pred_onsets.items():
        g = gold_onsets.get(pos)
        if g is None or g.distance != p.distance:
            out[key(p)] = out.get(key(p), Counts()) + Counts(fp=1)
    return out


def type_counts(pred: Sequence[str], gold: Sequence[str], words: Sequence[str] | None = None) -> dict[str, Counts]:
    return _bucketed(pred, gold, words, lambda o: o.kind)


def length_counts(pred: Sequence[str], gold: Sequence[str]) -> dict[str, Counts]:
    return _bucketed(pred, gold, None, lambda o: _length_bucket(o.length))


def breakdown_by_type(pred: Sequence[str], gold: Sequence[str], words: Sequence[str] | None = None) -> dict[str, float]:
    return {k: c.f1 for k, c in sorted(type_counts(pred, gold, words).items())}


def breakdown_by_length(pred: Sequence[str], gold: Sequence[str]) -> dict[str, float]:
    return {k: c.f1 for k, c in sorted(length_counts(pred, gold).items())}


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    tasks: tuple[str, ...]
    dialogues: int = 0
    tokens: int = 0
    seed: int | None = None
    counts: dict[str, Counts] = field(default_factory=dict)
    acc_pos: float | None = None
    ppl: float | None = None
    by_type: dict[str, Counts] = field(default_factory=dict)
    by_length: dict[str, Counts] = field(default_factory=dict)
    eo: dict[str, float] = field(default_factory=dict)
    ftd: tuple[float, int, int] | None = None

    def f1(self, name: str) -> float | None:
        c = self.counts.get(name)
        return None if c is None else c.f1

    @property
    def f1_rps(self) -> float | None:
        return self.f1("rps")

    @property
    def f1_e(self) -> float | None:
        return self.f1("e")

    @property
    def f1_uttseg(self) -> float | None:
        return self.f1("uttseg")

    def items(self) -> list[tuple[str, str]]:
        """Flat ``(key, value)`` pairs in a fixed order."""
        out: list[tuple[str, object]] = [
            ("tasks", ",".join(self.tasks)),
            ("seed", self.seed),
            ("dialogues", self.dialogues),
            ("tokens", self.tokens),
        ]
        if "disf" in self.tasks:
            out += [("f1_rps", self.f1("rps")), ("f1_rps_exact", self.f1("rps_exact")), ("f1_e", self.f1("e"))]
        if "uttseg" in self.tasks:
            out.append(("f1_uttseg", self.f1("uttseg")))
        if "pos" in self.tasks:
            out.append(("acc_pos", self.acc_pos))
        if "lm" in self.tasks:
            out.append(("ppl", self.ppl))
        if self.eo:
            first = next(t for t in self.tasks if t in self.eo)
            out.append(("eo", self.eo[first]))
            out += [(f"eo.{t}", self.eo[t]) for t in self.tasks if t in self.eo]
        if self.ftd is not None:
            out += [("ftd", self.ftd[0]), ("ftd.detected", self.ftd[1]), ("ftd.missed", self.ftd[2])]
        for name, table in (("by_type", self.by_type), ("by_length", self.by_length)):
            for k, c in sorted(table.items()):
                out += [(f"{name}.{k}", c.f1), (f"{name}.{k}.gold", c.gold)]
        for k, c in sorted(self.counts.items()):
            out += [(f"counts.{k}.tp", c.tp), (f"counts.{k}.fp", c.fp), (f"counts.{k}.fn", c.fn)]
        return [(k, _fmt(v)) for k, v in out]

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def to_table(self) -> str:
        rows = [(k, v) for k, v in self.items() if not k.startswith("counts.")]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        if "lm" in self.tasks:
            lines.append("(perplexity counts the unknown-word class as a prediction target)")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict[str, str]:
        return dict(self.items())


def _fmt(v: object) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _merge(into: dict[str, Counts], new: dict[str, Counts]) -> None:
    for k, c in new.items():
        into[k] = into.get(k, Counts()) + c


def evaluate(
    model: TaggerModel,
    dialogues: Sequence[Dialogue],
    incremental: bool = False,
    seed: int | None = None,
    ftd_origin: int = 0,
    on_replay: Callable[[Dialogue, HypothesisLog], None] | None = None,
) -> EvalReport:
    """Score a model on a corpus; ``incremental`` replays each dialogue word by word for EO and FTD.

    ``on_replay`` sees every dialogue's hypothesis log (incremental mode only).
    """
    dialogues = [d for d in dialogues if len(d)]
    if not dialogues:
        raise UsageError("cannot evaluate on an empty corpus")
    report = EvalReport(tasks=model.tasks, dialogues=len(dialogues), seed=seed)
    pos_hits = pos_total = 0
    log_probs: list[float] = []
    edits = {t: [0, 0] for t in model.tagging_tasks}
    ftd_sum, detected, missed = 0.0, 0, 0
    for d in dialogues:
        report.tokens += len(d)
        if incremental:
            log = replay(model, d)
            if on_replay is not None:
                on_replay(d, log)
            labels = {t: log.final(t) for t in model.tagging_tasks}
            for t in model.tagging_tasks:
                n, u = edit_counts(log.for_task(t))
                edits[t][0] += n
                edits[t][1] += u
            if "disf" in model.tagging_tasks:
                mean, det, mis = first_time_to_detection(log.for_task("disf"), gold_tags=d.disf_tags, origin=ftd_origin)
                if det:
                    ftd_sum += mean * det
                detected += det
                missed += mis
            tagger_lps = _word_log_probs(model, d) if model.lm is not None else []
        else:
            pred = predict_final(model, d)
            labels = pred.labels
            tagger_lps = pred.lm_log_probs
        log_probs += tagger_lps
        if "disf" in labels:
            gold = d.disf_tags
            _merge(report.counts, {
                "rps": rps_counts(labels["disf"], gold),
                "rps_exact": rps_counts(labels["disf"], gold, exact=True),
                "e": edit_term_counts(labels["disf"], gold),
            })
            _merge(report.by_type, type_counts(labels["disf"], gold, d.words))
            _merge(report.by_length, length_counts(labels["disf"], gold))
        if "uttseg" in labels:
            _merge(report.counts, {"uttseg": uttseg_counts(labels["uttseg"], d.utt_tags)})
        if "pos" in labels:
            pos_hits += sum(p == g for p, g in zip(labels["pos"], d.pos_tags))
            pos_total += len(d)
    if "pos" in model.tagging_tasks:
        report.acc_pos = pos_hits / pos_total
    if model.lm is not None:
        report.ppl = perplexity(log_probs)
    if incremental:
        report.eo = {t: (u / (n + u) if n + u else 0.0) for t, (n, u) in edits.items()}
        if "disf" in model.tagging_tasks:
            report.ftd = (ftd_sum / detected if detected else math.nan, detected, missed)
    return report


def _word_log_probs(model: TaggerModel, dialogue: Dialogue) -> list[float]:
    return predict_final(model, dialogue).lm_log_probs
