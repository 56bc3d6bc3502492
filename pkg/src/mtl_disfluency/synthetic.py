"""Seeded generator of disfluent, fully annotated toy dialogues.

Fluent utterances come from a small POS-tagged template grammar.  Between
consecutive skeleton words (an *insertion point*) at most one event is
drawn: an edit term, a verbatim repeat of the previous ``k`` words, a
substitution (the reparandum swaps one word for a same-class alternative,
optionally followed by an interregnum), or a delete (an abandoned fragment,
optionally followed by an interregnum).  Gold tags come from the tag codec.

Each dialogue draws from its own PCG64 stream keyed by ``(seed, index)``,
so output is a pure function of the config.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .corpus import AnnotatedToken, Dialogue
from .errors import ConfigError
from .tags import EditSpan, RepairKind, RepairSpan, encode_disfluency, encode_uttseg

__all__ = ["GenConfig", "GenStats", "WORD_CLASSES", "TEMPLATES", "EDIT_TERMS", "generate", "generate_with_stats"]

# class name -> (POS tag, words)
WORD_CLASSES: dict[str, tuple[str, tuple[str, ...]]] = {
    "SUBJ": ("PRP", ("I", "we", "you", "they")),
    "OBJ": ("PRP", ("me", "us", "them", "it")),
    "WANT": ("VBP", ("want", "need", "like", "prefer", "have")),
    "MOD": ("MD", ("can", "could", "would", "will", "should")),
    "VERB": ("VB", ("book", "find", "show", "get", "see", "take", "check", "change", "cancel", "reserve")),
    "THANK": ("VB", ("thank",)),
    "YOU": ("PRP", ("you",)),
    "DET": ("DT", ("a", "the", "this", "that", "another", "some", "every", "no")),
    "NOUN": ("NN", (
        "flight", "ticket", "seat", "room", "car", "table", "train", "bus", "meal", "hotel",
        "trip", "fare", "gate", "bag", "suitcase", "window", "aisle", "upgrade", "booking", "route",
        "schedule", "connection", "departure", "arrival", "reservation", "receipt", "refund", "voucher",
        "passport", "visa", "taxi", "shuttle", "ferry", "cabin", "lounge", "menu", "bill", "map",
    )),
    "NOUNS": ("NNS", (
        "flights", "tickets", "seats", "rooms", "cars", "tables", "trains", "buses", "meals", "hotels",
        "trips", "fares", "gates", "bags", "options", "prices", "times", "deals", "connections", "routes",
    )),
    "ADJ": ("JJ", (
        "cheap", "early", "late", "direct", "quick", "small", "big", "nice", "quiet", "cheaper",
        "expensive", "comfortable", "first", "last", "next", "short", "long", "free", "available", "good",
        "new", "old", "clean", "local",
    )),
    "TO": ("IN", ("to", "into", "toward")),
    "FROM": ("IN", ("from", "out", "via")),
    "ON": ("IN", ("on", "before", "after", "by", "until")),
    "WITH": ("IN", ("with", "without", "for", "near")),
    "CITY": ("NNP", (
        "Boston", "Denver", "Dallas", "Chicago", "Seattle", "Atlanta", "Miami", "Austin", "Portland",
        "Phoenix", "Houston", "Detroit", "Memphis", "Nashville", "Orlando", "Tampa", "Omaha", "Reno",
        "Tulsa", "Buffalo", "Newark", "Oakland", "Raleigh", "Richmond", "Spokane",
    )),
    "DAY": ("NNP", ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")),
    "ADV": ("RB", ("please", "today", "tomorrow", "now", "again", "soon", "tonight", "instead", "later", "anyway")),
    "RESP": ("UH", ("yes", "no", "okay", "right", "sure", "yeah", "alright", "hello", "hi", "bye")),
}

TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("SUBJ", "WANT", "DET", "NOUN", "TO", "CITY"),
    ("SUBJ", "WANT", "DET", "ADJ", "NOUN", "TO", "CITY", "ON", "DAY"),
    ("DET", "NOUN", "FROM", "CITY", "TO", "CITY", "ON", "DAY"),
    ("MOD", "SUBJ", "VERB", "DET", "NOUN", "TO", "CITY", "ADV"),
    ("MOD", "SUBJ", "VERB", "OBJ", "DET", "ADJ", "NOUNS", "FROM", "CITY"),
    ("VERB", "OBJ", "DET", "ADJ", "NOUNS", "TO", "CITY", "ON", "DAY"),
    ("SUBJ", "MOD", "VERB", "DET", "NOUN", "WITH", "DET", "ADJ", "NOUN"),
    ("SUBJ", "WANT", "DET", "NOUN", "WITH", "DET", "NOUN", "ADV"),
    ("DET", "ADJ", "NOUN", "ON", "DAY", "ADV"),
    ("THANK", "YOU"),
    ("RESP", "THANK", "YOU"),
    ("RESP",),
    ("RESP", "ADV"),
    ("SUBJ", "WANT", "OBJ", "ADV"),
    ("SUBJ", "WANT", "DET", "ADJ", "NOUN", "FROM", "CITY", "TO", "CITY", "ON", "DAY", "ADV"),
    ("MOD", "SUBJ", "VERB", "OBJ", "DET", "NOUN", "WITH", "DET", "ADJ", "NOUN", "ON", "DAY"),
    ("SUBJ", "MOD", "VERB", "DET", "ADJ", "NOUNS", "FROM", "CITY", "TO", "CITY"),
    ("DET", "NOUN", "TO", "CITY", "ON", "DAY", "WITH", "DET", "ADJ", "NOUN"),
    ("RESP", "SUBJ", "WANT", "DET", "ADJ", "NOUN", "TO", "CITY", "ADV"),
)

# phrase -> POS tags of its words
EDIT_TERMS: dict[str, tuple[str, ...]] = {
    "uh": ("UH",),
    "um": ("UH",),
    "I mean": ("PRP", "VBP"),
    "you know": ("PRP", "VBP"),
}

_BY_POS: dict[str, tuple[str, ...]] = {}
for _pos, _words in WORD_CLASSES.values():
    _BY_POS[_pos] = tuple(dict.fromkeys(_BY_POS.get(_pos, ()) + _words))

MEDIAN_MS = {
    "PRP": 160, "VBP": 260, "MD": 190, "VB": 290, "DT": 120, "NN": 360, "NNS": 390,
    "JJ": 330, "IN": 130, "NNP": 420, "RB": 300, "UH": 280,
}


@dataclass(frozen=True)
class GenConfig:
    seed: int = 42
    num_dialogues: int = 230
    min_utterances: int = 6
    max_utterances: int = 14
    filler_rate: float = 0.06
    repeat_rate: float = 0.05
    sub_rate: float = 0.04
    del_rate: float = 0.015
    interregnum_rate: float = 0.5
    reparandum_weights: tuple[float, ...] = (0.45, 0.25, 0.12, 0.07, 0.05, 0.03, 0.02, 0.01)
    max_insertion_points: int = 0  # 0: every word boundary is an insertion point
    duration_spread: float = 0.25
    edit_duration_factor: float = 1.5

    def __post_init__(self) -> None:
        rates = (self.filler_rate, self.repeat_rate, self.sub_rate, self.del_rate, self.interregnum_rate)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError("rates must lie in [0, 1]")
        if self.filler_rate + self.repeat_rate + self.sub_rate + self.del_rate > 1.0 + 1e-12:
            raise ConfigError("disfluency event rates must sum to at most 1")
        if self.num_dialogues < 0 or self.max_insertion_points < 0:
            raise ConfigError("counts must be non-negative")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ConfigError("need 1 <= min_utterances <= max_utterances")
        w = self.reparandum_weights
        if len(w) != 8 or any(x < 0 for x in w) or sum(w) <= 0:
            raise ConfigError("reparandum_weights needs 8 non-negative weights for lengths 1..8")
        if self.duration_spread < 0 or self.edit_duration_factor <= 0:
            raise ConfigError("duration parameters out of range")

    @classmethod
    def from_text(cls, text: str, **overrides) -> GenConfig:
        """Parse ``key = value`` lines (``#`` comments); keyword overrides win."""
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: expected '<key> = <value>' with a known key, got {raw!r}")
            values[key] = value.strip()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(k, v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> GenConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, value: object) -> object:
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    try:
        if key == "reparandum_weights":
            return tuple(float(v) for v in value.split(","))
        if key in ("seed", "num_dialogues", "min_utterances", "max_utterances", "max_insertion_points"):
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass
class GenStats:
    insertion_points: int = 0
    events: dict[str, int] = field(default_factory=lambda: {"filler": 0, "repeat": 0, "sub": 0, "delete": 0})


@dataclass
class _Word:
    token: str
    pos: str
    edit: bool = False


def _phrase(rng: np.random.Generator) -> list[_Word]:
    phrase = list(EDIT_TERMS)[rng.integers(len(EDIT_TERMS))]
    return [_Word(w, p, True) for w, p in zip(phrase.split(), EDIT_TERMS[phrase])]


def _skeleton(rng: np.random.Generator) -> list[tuple[str, str]]:
    """(class, word) pairs for one fluent utterance."""
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    out = []
    for cls_name in template:
        words = WORD_CLASSES[cls_name][1]
        out.append((cls_name, words[rng.integers(len(words))]))
    return out


def _reparandum_length(rng: np.random.Generator, weights: Sequence[float], k_max: int) -> int:
    w = np.asarray(weights[:k_max], dtype=float)
    if w.sum() <= 0:
        return 1
    return int(rng.choice(len(w), p=w / w.sum())) + 1


def _utterance(rng: np.random.Generator, cfg: GenConfig, stats: GenStats):
    """Words of one utterance plus its spans, indices relative to the utterance."""
    skeleton = _skeleton(rng)
    n = len(skeleton)
    points = list(range(1, n))
    if cfg.max_insertion_points and len(points) > cfg.max_insertion_points:
        points = sorted(rng.choice(points, size=cfg.max_insertion_points, replace=False).tolist())
    thresholds = np.cumsum([cfg.filler_rate, cfg.repeat_rate, cfg.sub_rate, cfg.del_rate])

    events: dict[int, str] = {}
    for p in points:
        if p - 1 in events and events[p - 1] == "delete":
            continue  # the word after a delete's onset is not an insertion point
        stats.insertion_points += 1
        kind = int(np.searchsorted(thresholds, rng.random(), side="right"))
        if kind < 4:
            name = ("filler", "repeat", "sub", "delete")[kind]
            events[p] = name
            stats.events[name] += 1

    words: list[_Word] = []
    spans: list = []
    position: list[int] = []  # output index of each skeleton word
    block = 0  # skeleton words before this index belong to an earlier event
    for p, (cls_name, token) in enumerate(skeleton):
        event = events.get(p)
        if event == "filler":
            start = len(words)
            words += _phrase(rng)
            spans.append(EditSpan(start, len(words) - 1))
            block = p
        elif event in ("repeat", "sub"):
            k = _reparandum_length(rng, cfg.reparandum_weights, p - block)
            rs, re_ = position[p - k], position[p - 1]
            if event == "sub":
                j = rs + int(rng.integers(k))
                choices = [w for w in _BY_POS[words[j].pos] if w != words[j].token]
                words[j] = _Word(choices[rng.integers(len(choices))], words[j].pos)
                if rng.random() < cfg.interregnum_rate:
                    words += _phrase(rng)
            ie = len(words) - 1
            for q in range(p - k, p):
                c, w = skeleton[q]
                words.append(_Word(w, WORD_CLASSES[c][0]))
            kind = RepairKind.REP if event == "repeat" else RepairKind.SUB
            spans.append(RepairSpan(rs, re_, ie, len(words) - 1, kind))
            block = p
        elif event == "delete":
            k = _reparandum_length(rng, cfg.reparandum_weights, 8)
            other = _skeleton(rng)[:k]
            rs = len(words)
            words += [_Word(w, WORD_CLASSES[c][0]) for c, w in other]
            re_ = len(words) - 1
            if rng.random() < cfg.interregnum_rate:
                words += _phrase(rng)
            ie = len(words) - 1
            spans.append(RepairSpan(rs, re_, ie, ie, RepairKind.DEL))
            block = p + 1
        position.append(len(words))
        words.append(_Word(token, WORD_CLASSES[cls_name][0]))
    return words, spans


def _duration(rng: np.random.Generator, cfg: GenConfig, word: _Word) -> int:
    median = MEDIAN_MS[word.pos] * (cfg.edit_duration_factor if word.edit else 1.0)
    return max(1, int(round(median * float(np.exp(cfg.duration_spread * rng.standard_normal())))))


def _dialogue(cfg: GenConfig, index: int, stats: GenStats) -> Dialogue:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(index,))))
    n_utts = int(rng.integers(cfg.min_utterances, cfg.max_utterances + 1))
    words: list[_Word] = []
    spans: list = []
    boundaries: list[int] = []
    for _ in range(n_utts):
        offset = len(words)
        utt_words, utt_spans = _utterance(rng, cfg, stats)
        words += utt_words
        for s in utt_spans:
            if isinstance(s, EditSpan):
                spans.append(EditSpan(s.start + offset, s.end + offset))
            else:
                spans.append(RepairSpan(s.reparandum_start + offset, s.reparandum_end + offset,
                                        s.interregnum_end + offset, s.repair_end + offset, s.kind))
        boundaries.append(len(words) - 1)
    disf = encode_disfluency(spans, len(words))
    utt = encode_uttseg(boundaries, len(words))
    tokens = tuple(
        AnnotatedToken(w.token, _duration(rng, cfg, w), d, u, w.pos) for w, d, u in zip(words, disf, utt)
    )
    return Dialogue(f"synth-{cfg.seed}-{index:05d}", tokens)


def generate_with_stats(config: GenConfig) -> tuple[list[Dialogue], GenStats]:
    stats = GenStats()
    return [_dialogue(config, i, stats) for i in range(config.num_dialogues)], stats


def generate(config: GenConfig) -> list[Dialogue]:
    return generate_with_stats(config)[0]
