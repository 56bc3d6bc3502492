"""Incremental tag schemes for disfluency detection and utterance segmentation.

Disfluency tags only mark a reparandum once it can be inferred: reparandum
words stay ``f`` and the repair onset word carries ``rpS-N`` where ``N`` is
the word distance back to the start of the reparandum (interregnum words
included).  The last repair word carries ``rpnRep``/``rpnSub``/``rpnDel``;
single-word repairs combine both as ``rpSn<Kind>-N``.

Utterance tags are four-way: prefix ``.`` starts an utterance, ``-``
continues one; suffix ``.`` ends it, ``-`` announces that the next word
continues it.
"""

from __future__ import annotations

import re
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Union

from .errors import ClippedReparandumWarning, MalformedAnnotation, MalformedTags

__all__ = [
    "MAX_REPARANDUM",
    "RepairKind",
    "DisfTag",
    "UttTag",
    "FLUENT",
    "EDIT",
    "RepairSpan",
    "EditSpan",
    "encode_disfluency",
    "decode_disfluency",
    "encode_uttseg",
    "decode_uttseg",
    "classify_repair",
    "disfluency_alphabet",
    "utterance_alphabet",
    "onset_positions",
]

MAX_REPARANDUM = 10


class RepairKind(str, Enum):
    REP = "Rep"
    SUB = "Sub"
    DEL = "Del"

    def __str__(self) -> str:
        return self.value


_DISF_RE = re.compile(r"^(?:(f)|(e)|rpS-(\d+)|rpn(Rep|Sub|Del)|rpSn(Rep|Sub|Del)-(\d+))$")


@dataclass(frozen=True, slots=True)
class DisfTag:
    """One word's disfluency label.

    ``onset`` is the reparandum distance when the word opens a repair,
    ``end`` the repair type when the word closes one.  Both set means a
    one-word repair.
    """

    onset: int | None = None
    end: RepairKind | None = None
    edit: bool = False

    def __post_init__(self) -> None:
        if self.edit and (self.onset is not None or self.end is not None):
            raise ValueError("an edit tag carries no repair information")
        if self.onset is not None and not 1 <= self.onset <= MAX_REPARANDUM:
            raise ValueError(f"reparandum distance {self.onset} outside [1, {MAX_REPARANDUM}]")
        if self.end is not None and not isinstance(self.end, RepairKind):
            object.__setattr__(self, "end", RepairKind(self.end))

    @property
    def is_onset(self) -> bool:
        return self.onset is not None

    @property
    def is_fluent(self) -> bool:
        return not self.edit and self.onset is None and self.end is None

    def __str__(self) -> str:
        if self.edit:
            return "e"
        if self.onset is None and self.end is None:
            return "f"
        if self.end is None:
            return f"rpS-{self.onset}"
        if self.onset is None:
            return f"rpn{self.end.value}"
        return f"rpSn{self.end.value}-{self.onset}"

    @classmethod
    def parse(cls, text: str) -> DisfTag:
        m = _DISF_RE.match(text)
        if m is None:
            raise ValueError(f"unknown disfluency tag {text!r}")
        fluent, edit, onset, end, comb_kind, comb_n = m.groups()
        try:
            if fluent:
                return FLUENT
            if edit:
                return EDIT
            if onset is not None:
                return cls(onset=int(onset))
            if end is not None:
                return cls(end=RepairKind(end))
            return cls(onset=int(comb_n), end=RepairKind(comb_kind))
        except ValueError as exc:
            raise ValueError(f"unknown disfluency tag {text!r}") from exc


FLUENT = DisfTag()
EDIT = DisfTag(edit=True)


@dataclass(frozen=True, slots=True)
class UttTag:
    starts: bool
    ends: bool

    def __str__(self) -> str:
        return ("." if self.starts else "-") + "w" + ("." if self.ends else "-")

    @classmethod
    def parse(cls, text: str) -> UttTag:
        if len(text) != 3 or text[1] != "w" or text[0] not in ".-" or text[2] not in ".-":
            raise ValueError(f"unknown utterance tag {text!r}")
        return cls(starts=text[0] == ".", ends=text[2] == ".")


@dataclass(frozen=True, slots=True)
class RepairSpan:
    """A reparandum-interregnum-repair structure over inclusive word indices.

    The interregnum is ``(reparandum_end, interregnum_end]`` and the repair
    ``(interregnum_end, repair_end]``; either may be empty.  A delete has an
    empty repair and its onset tag sits on the word after the interregnum.
    """

    reparandum_start: int
    reparandum_end: int
    interregnum_end: int
    repair_end: int
    kind: RepairKind

    def __post_init__(self) -> None:
        if not isinstance(self.kind, RepairKind):
            object.__setattr__(self, "kind", RepairKind(self.kind))
        if not (0 <= self.reparandum_start <= self.reparandum_end <= self.interregnum_end <= self.repair_end):
            raise MalformedAnnotation(f"span indices out of order: {self}")
        empty_repair = self.repair_end == self.interregnum_end
        if empty_repair != (self.kind is RepairKind.DEL):
            raise MalformedAnnotation("only delete repairs have an empty repair phase")

    @property
    def onset(self) -> int:
        return self.interregnum_end + 1

    @property
    def distance(self) -> int:
        """Words from the onset back to the reparandum start."""
        return self.onset - self.reparandum_start

    @property
    def reparandum_length(self) -> int:
        return self.reparandum_end - self.reparandum_start + 1

    @property
    def last(self) -> int:
        """Last word index touched by the structure, onset included."""
        return max(self.repair_end, self.onset)

    @property
    def start(self) -> int:
        return self.reparandum_start


@dataclass(frozen=True, slots=True)
class EditSpan:
    start: int
    end: int

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.end:
            raise MalformedAnnotation(f"edit span indices out of order: {self}")

    @property
    def last(self) -> int:
        return self.end


Span = Union[RepairSpan, EditSpan]


def _as_disf(tag: DisfTag | str) -> DisfTag:
    if isinstance(tag, DisfTag):
        return tag
    try:
        return DisfTag.parse(tag)
    except ValueError as exc:
        raise MalformedTags(str(exc)) from exc


def _as_utt(tag: UttTag | str) -> UttTag:
    if isinstance(tag, UttTag):
        return tag
    try:
        return UttTag.parse(tag)
    except ValueError as exc:
        raise MalformedTags(str(exc)) from exc


def encode_disfluency(spans: Iterable[Span], length: int) -> list[DisfTag]:
    """Tag ``length`` words from repair and edit-term annotations.

    Distances above ``MAX_REPARANDUM`` are clipped with a
    :class:`ClippedReparandumWarning`; such annotations do not round-trip.
    """
    spans = sorted(spans, key=lambda s: (s.start, s.last))
    owner = [-1] * length
    for idx, span in enumerate(spans):
        if span.last >= length:
            raise MalformedAnnotation(f"span {span} runs past sequence length {length}")
        for i in range(span.start, span.last + 1):
            if owner[i] != -1:
                raise MalformedAnnotation(f"spans {spans[owner[i]]} and {span} overlap at word {i}")
            owner[i] = idx
    edits = [s for s in spans if isinstance(s, EditSpan)]
    for a, b in zip(edits, edits[1:]):
        if a.end + 1 == b.start:
            raise MalformedAnnotation(f"edit spans {a} and {b} touch; merge them")

    tags = [FLUENT] * length
    for span in spans:
        if isinstance(span, EditSpan):
            for i in range(span.start, span.end + 1):
                tags[i] = EDIT
            continue
        for i in range(span.reparandum_end + 1, span.interregnum_end + 1):
            tags[i] = EDIT
        n = span.distance
        if n > MAX_REPARANDUM:
            warnings.warn(
                f"reparandum distance {n} at word {span.onset} clipped to {MAX_REPARANDUM}",
                ClippedReparandumWarning,
                stacklevel=2,
            )
            n = MAX_REPARANDUM
        if span.kind is RepairKind.DEL or span.repair_end == span.onset:
            tags[span.onset] = DisfTag(onset=n, end=span.kind)
        else:
            tags[span.onset] = DisfTag(onset=n)
            tags[span.repair_end] = DisfTag(end=span.kind)
    return tags


def decode_disfluency(tags: Sequence[DisfTag | str]) -> list[Span]:
    """Recover repair and edit spans from a well-formed tag sequence.

    The reparandum starts ``N`` words before the onset; the run of ``e``
    words directly before the onset is its interregnum.  Result is sorted by
    start index.
    """
    tags = [_as_disf(t) for t in tags]
    claimed = [False] * len(tags)
    spans: list[Span] = []
    for p, tag in enumerate(tags):
        if tag.end is not None and tag.onset is None and not claimed[p]:
            raise MalformedTags(f"repair end at word {p} has no open repair onset")
        if tag.onset is None:
            continue
        start = p - tag.onset
        if start < 0:
            raise MalformedTags(f"onset at word {p} points {tag.onset} words back, before sequence start")
        j = p - 1
        while j > start and tags[j].edit:
            j -= 1
        for i in range(start, j + 1):
            if not tags[i].is_fluent or claimed[i]:
                raise MalformedTags(f"reparandum of onset at word {p} covers non-fluent word {i}")
        for i in range(j + 1, p):
            claimed[i] = True
        claimed[p] = True
        if tag.end is not None:
            kind = tag.end
            end = p - 1 if kind is RepairKind.DEL else p
        else:
            q = p + 1
            while q < len(tags) and tags[q].is_fluent:
                q += 1
            if q == len(tags) or tags[q].onset is not None or tags[q].end is None:
                raise MalformedTags(f"repair opened at word {p} is never closed")
            if tags[q].end is RepairKind.DEL:
                raise MalformedTags(f"delete repairs are single-word tags (word {q})")
            for i in range(p, q + 1):
                claimed[i] = True
            kind, end = tags[q].end, q
        spans.append(RepairSpan(start, j, p - 1, end, kind))
    i = 0
    while i < len(tags):
        if tags[i].edit and not claimed[i]:
            k = i
            while k + 1 < len(tags) and tags[k + 1].edit and not claimed[k + 1]:
                k += 1
            spans.append(EditSpan(i, k))
            i = k + 1
        else:
            i += 1
    spans.sort(key=lambda s: (s.start, s.last))
    return spans


def encode_uttseg(boundaries: Iterable[int], length: int) -> list[UttTag]:
    """Tag ``length`` words given the indices of utterance-final words."""
    boundaries = list(boundaries)
    if length == 0:
        if boundaries:
            raise MalformedAnnotation("boundaries given for an empty sequence")
        return []
    if any(b >= a for a, b in zip(boundaries[1:], boundaries)):
        raise MalformedAnnotation(f"boundaries not strictly increasing: {boundaries}")
    if not boundaries or boundaries[0] < 0 or boundaries[-1] != length - 1:
        raise MalformedAnnotation(f"last boundary must be the final word {length - 1}: {boundaries}")
    ends = set(boundaries)
    tags = []
    starts = True
    for i in range(length):
        tags.append(UttTag(starts=starts, ends=i in ends))
        starts = i in ends
    return tags


def decode_uttseg(tags: Sequence[UttTag | str]) -> list[int]:
    tags = [_as_utt(t) for t in tags]
    expect_start = True
    out = []
    for i, tag in enumerate(tags):
        if tag.starts != expect_start:
            raise MalformedTags(
                f"word {i}: utterance tag {tag} {'must' if expect_start else 'cannot'} start an utterance"
            )
        if tag.ends:
            out.append(i)
        expect_start = tag.ends
    if tags and not tags[-1].ends:
        raise MalformedTags("final word does not close its utterance")
    return out


def classify_repair(span: RepairSpan, tokens: Sequence[str]) -> RepairKind:
    """Repeat if the repair repeats the reparandum verbatim, delete if there is no repair."""
    repair = tokens[span.interregnum_end + 1 : span.repair_end + 1]
    if not repair:
        return RepairKind.DEL
    reparandum = tokens[span.reparandum_start : span.reparandum_end + 1]
    return RepairKind.REP if list(repair) == list(reparandum) else RepairKind.SUB


def disfluency_alphabet() -> list[DisfTag]:
    """Every tag the codec can emit or parse, in a fixed order."""
    out = [FLUENT, EDIT]
    out += [DisfTag(onset=n) for n in range(1, MAX_REPARANDUM + 1)]
    out += [DisfTag(end=k) for k in RepairKind]
    out += [DisfTag(onset=n, end=k) for k in RepairKind for n in range(1, MAX_REPARANDUM + 1)]
    return out


def utterance_alphabet() -> list[UttTag]:
    return [UttTag(s, e) for s in (True, False) for e in (True, False)]


def onset_positions(tags: Sequence[DisfTag | str]) -> list[int]:
    return [i for i, t in enumerate(tags) if _as_disf(t).is_onset]
