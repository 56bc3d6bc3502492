"""Corpus data model, the tab-separated corpus format, vocabularies and input features.

Corpus file layout (UTF-8, LF line endings)::

    # dialogue: <id>
    <token>\t<durationMs or ->\t<disfTag>\t<uttTag>\t<posTag>
    ...
    <blank line closes the dialogue>

Other lines starting with ``#`` are comments and are ignored.
"""

from __future__ import annotations

import io
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import FormatError, MalformedTags, ParseError
from .tags import (
    DisfTag,
    Span,
    UttTag,
    decode_disfluency,
    decode_uttseg,
    disfluency_alphabet,
    utterance_alphabet,
)

__all__ = [
    "PENN_TAGS",
    "UNK",
    "AnnotatedToken",
    "Dialogue",
    "Vocabulary",
    "Alphabet",
    "EmbeddingTable",
    "DurationStats",
    "load_corpus",
    "read_corpus",
    "write_corpus",
    "dump_corpus",
    "build_vocab",
    "build_alphabets",
    "load_embeddings",
    "random_embeddings",
    "featurize",
]

# Penn Treebank tags plus the conversational-speech additions (BES, HVS, XX, ...).
PENN_TAGS = frozenset(
    """CC CD DT EX FW IN JJ JJR JJS LS MD NN NNS NNP NNPS PDT POS PRP PRP$ RB RBR RBS RP
    SYM TO UH VB VBD VBG VBN VBP VBZ WDT WP WP$ WRB BES HVS XX GW ADD NFP AFX
    -LRB- -RRB- `` '' , . : $ #""".split()
)

UNK = "<unk>"
DIALOGUE_HEADER = "# dialogue:"


@dataclass(frozen=True, slots=True)
class AnnotatedToken:
    token: str
    duration_ms: int | None
    disf: DisfTag
    utt: UttTag
    pos: str

    def __post_init__(self) -> None:
        if not self.token or any(c.isspace() for c in self.token):
            raise ValueError(f"token {self.token!r} is empty or contains whitespace")
        if self.duration_ms is not None and self.duration_ms < 0:
            raise ValueError(f"negative duration {self.duration_ms}")
        if self.pos not in PENN_TAGS:
            raise ValueError(f"POS tag {self.pos!r} not in the tagset")


@dataclass(frozen=True)
class Dialogue:
    id: str
    tokens: tuple[AnnotatedToken, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.token for t in self.tokens]

    @property
    def durations(self) -> list[int | None]:
        return [t.duration_ms for t in self.tokens]

    @property
    def disf_tags(self) -> list[DisfTag]:
        return [t.disf for t in self.tokens]

    @property
    def utt_tags(self) -> list[UttTag]:
        return [t.utt for t in self.tokens]

    @property
    def pos_tags(self) -> list[str]:
        return [t.pos for t in self.tokens]

    def spans(self) -> list[Span]:
        return decode_disfluency(self.disf_tags)

    def boundaries(self) -> list[int]:
        return decode_uttseg(self.utt_tags)

    def validate(self) -> None:
        """Raise :class:`MalformedTags` unless both tag sequences decode."""
        decode_uttseg(self.utt_tags)
        decode_disfluency(self.disf_tags)


def _parse_token(line: str, lineno: int) -> AnnotatedToken:
    cols = line.split("\t")
    if len(cols) != 5:
        raise ParseError(f"expected 5 tab-separated columns, got {len(cols)}", lineno)
    token, dur, disf, utt, pos = cols
    if not token or any(c.isspace() for c in token):
        raise ParseError(f"bad token {token!r}", lineno, 1)
    if dur == "-":
        duration = None
    elif dur.isdigit():
        duration = int(dur)
    else:
        raise ParseError(f"bad duration {dur!r}", lineno, 2)
    try:
        disf_tag = DisfTag.parse(disf)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, 3) from None
    try:
        utt_tag = UttTag.parse(utt)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, 4) from None
    if pos not in PENN_TAGS:
        raise ParseError(f"unknown POS tag {pos!r}", lineno, 5)
    return AnnotatedToken(token, duration, disf_tag, utt_tag, pos)


def load_corpus(stream: Iterable[str] | str) -> list[Dialogue]:
    """Parse and validate dialogues from a text stream (or a string)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    dialogues: list[Dialogue] = []
    current_id: str | None = None
    header_line = 0
    tokens: list[AnnotatedToken] = []

    def close() -> None:
        dialogue = Dialogue(current_id, tuple(tokens))
        try:
            dialogue.validate()
        except MalformedTags as exc:
            raise ParseError(f"dialogue {current_id!r}: {exc}", header_line) from None
        dialogues.append(dialogue)

    for lineno, raw in enumerate(stream, start=1):
        line = raw[:-1] if raw.endswith("\n") else raw
        if line.startswith(DIALOGUE_HEADER):
            if current_id is not None:
                close()
            current_id = line[len(DIALOGUE_HEADER):].strip()
            if not current_id:
                raise ParseError("dialogue header without an id", lineno)
            header_line = lineno
            tokens = []
        elif line.startswith("#"):
            continue
        elif line == "":
            if current_id is not None:
                close()
                current_id = None
        else:
            if current_id is None:
                raise ParseError("token line outside a dialogue", lineno)
            tokens.append(_parse_token(line, lineno))
    if current_id is not None:
        close()
    return dialogues


def read_corpus(path: str | Path) -> list[Dialogue]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return load_corpus(fh)


def write_corpus(dialogues: Iterable[Dialogue], stream: TextIO) -> None:
    for dialogue in dialogues:
        stream.write(f"{DIALOGUE_HEADER} {dialogue.id}\n")
        for t in dialogue.tokens:
            dur = "-" if t.duration_ms is None else str(t.duration_ms)
            stream.write(f"{t.token}\t{dur}\t{t.disf}\t{t.utt}\t{t.pos}\n")
        stream.write("\n")


def dump_corpus(dialogues: Iterable[Dialogue]) -> str:
    buf = io.StringIO()
    write_corpus(dialogues, buf)
    return buf.getvalue()


@dataclass
class Vocabulary:
    """Word ids for the ``cap`` most frequent training words; id 0 is UNK."""

    id_to_word: list[str]
    word_to_id: dict[str, int] = field(init=False)
    unk_id: int = 0

    def __post_init__(self) -> None:
        if not self.id_to_word or self.id_to_word[self.unk_id] != UNK:
            raise ValueError("vocabulary must hold the UNK symbol at its unk id")
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id and word != UNK

    def encode(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def encode_all(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.encode(w) for w in words], dtype=np.int64)


def build_vocab(dialogues: Iterable[Dialogue], cap: int = 7000) -> Vocabulary:
    """Most frequent tokens first; equal counts ordered lexicographically."""
    if cap < 1:
        raise ValueError("vocabulary cap must be at least 1")
    counts = Counter(t.token for d in dialogues for t in d.tokens)
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocabulary([UNK] + [w for w, _ in ranked])


@dataclass
class Alphabet:
    """Dense integer ids for one task's label strings."""

    labels: list[str]

    def __post_init__(self) -> None:
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, label: object) -> int | None:
        return self.index.get(str(label))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[i] for i in ids]


def build_alphabets(dialogues: Sequence[Dialogue]) -> dict[str, Alphabet]:
    """Observed label sets per tagging task, in a canonical order."""
    disf_seen = {str(t.disf) for d in dialogues for t in d.tokens}
    utt_seen = {str(t.utt) for d in dialogues for t in d.tokens}
    pos_seen = {t.pos for d in dialogues for t in d.tokens}
    disf = [str(t) for t in disfluency_alphabet() if str(t) in disf_seen]
    if "f" not in disf:
        disf.insert(0, "f")
    utt = [str(t) for t in utterance_alphabet() if str(t) in utt_seen] or [".w."]
    return {"disf": Alphabet(disf), "uttseg": Alphabet(utt), "pos": Alphabet(sorted(pos_seen) or ["UH"])}


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    from_file: np.ndarray  # bool mask of rows read from the embedding stream

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_embeddings(vocab_size: int, dim: int = 50, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.05, 0.05, size=(vocab_size, dim))


def load_embeddings(stream: Iterable[str], vocab: Vocabulary, dim: int = 50, seed: int = 0) -> EmbeddingTable:
    """Read ``<word> <v1> ... <vdim>`` lines; missing rows get seeded uniform init."""
    matrix = random_embeddings(len(vocab), dim, seed)
    found = np.zeros(len(vocab), dtype=bool)
    for lineno, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts) and dim != 1:
            continue  # word2vec text header "<count> <dim>"
        if len(parts) != dim + 1:
            raise FormatError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        word = parts[0]
        if word not in vocab:
            continue
        try:
            vec = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric vector entry") from None
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"line {lineno}: non-finite vector entry")
        row = vocab.encode(word)
        matrix[row] = vec
        found[row] = True
    return EmbeddingTable(matrix, found)


@dataclass(frozen=True)
class DurationStats:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def from_dialogues(cls, dialogues: Iterable[Dialogue]) -> DurationStats:
        values = np.array(
            [t.duration_ms for d in dialogues for t in d.tokens if t.duration_ms is not None], dtype=float
        )
        if values.size == 0:
            return cls()
        std = float(values.std())
        return cls(float(values.mean()), std if std > 0 else 1.0)

    def z(self, duration_ms: int | float | None) -> float:
        if duration_ms is None:
            return 0.0
        return (duration_ms - self.mean) / self.std


def featurize(
    table: EmbeddingTable,
    vocab: Vocabulary,
    token: str,
    duration_ms: int | None = None,
    use_timing: bool = False,
    stats: DurationStats | None = None,
) -> np.ndarray:
    """Input vector for one word: its embedding, plus the z-scored duration when timing is on."""
    vec = table.matrix[vocab.encode(token)]
    if not use_timing:
        return vec.copy()
    z = (stats or DurationStats()).z(duration_ms)
    if not math.isfinite(z):
        raise FormatError(f"duration {duration_ms} gives a non-finite feature")
    return np.append(vec, z)
