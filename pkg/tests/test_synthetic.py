import math
from dataclasses import replace

import pytest

from mtl_disfluency.corpus import dump_corpus, load_corpus
from mtl_disfluency.errors import ConfigError
from mtl_disfluency.synthetic import TEMPLATES, WORD_CLASSES, GenConfig, generate, generate_with_stats
from mtl_disfluency.tags import RepairKind, RepairSpan, classify_repair, decode_disfluency, decode_uttseg

FLUENT = GenConfig(seed=3, num_dialogues=20, filler_rate=0, repeat_rate=0, sub_rate=0, del_rate=0)


def test_all_rates_zero_is_fluent():
    for d in generate(FLUENT):
        assert all(str(t) == "f" for t in d.disf_tags)


def test_fluent_words_come_from_the_grammar():
    known = {w for _, words in WORD_CLASSES.values() for w in words}
    assert {w for d in generate(FLUENT) for w in d.words} <= known


def test_repeat_rate_one_gives_one_repeat_per_utterance():
    cfg = replace(FLUENT, repeat_rate=1.0, max_insertion_points=1)
    dialogues = generate(cfg)
    checked = 0
    for d in dialogues:
        spans = [s for s in d.spans() if isinstance(s, RepairSpan)]
        bounds = d.boundaries()
        starts = [0] + [b + 1 for b in bounds[:-1]]
        for lo, hi in zip(starts, bounds):
            inside = [s for s in spans if lo <= s.start <= hi]
            if hi == lo:
                assert inside == []  # one-word utterances have no insertion point
                continue
            assert len(inside) == 1
            assert inside[0].kind is RepairKind.REP
            assert classify_repair(inside[0], d.words) is RepairKind.REP
            checked += 1
    assert checked > 50


def test_fixed_seed_is_byte_identical():
    cfg = GenConfig(seed=42, num_dialogues=15)
    assert dump_corpus(generate(cfg)) == dump_corpus(generate(cfg))


def test_different_seeds_differ():
    assert dump_corpus(generate(GenConfig(seed=1, num_dialogues=3))) != dump_corpus(
        generate(GenConfig(seed=2, num_dialogues=3))
    )


def test_dialogue_streams_are_independent_of_count():
    few = generate(GenConfig(seed=8, num_dialogues=3))
    many = generate(GenConfig(seed=8, num_dialogues=10))
    assert few == many[:3]


def test_every_dialogue_loads_and_round_trips():
    dialogues = generate(GenConfig(seed=11, num_dialogues=40))
    text = dump_corpus(dialogues)
    assert load_corpus(text) == dialogues
    for d in dialogues:
        assert decode_disfluency(d.disf_tags) == d.spans()
        assert decode_uttseg(d.utt_tags) == d.boundaries()
        assert d.id.startswith("synth-11-")


def test_repairs_have_their_declared_kind():
    for d in generate(GenConfig(seed=12, num_dialogues=40)):
        for s in d.spans():
            if isinstance(s, RepairSpan):
                assert classify_repair(s, d.words) is s.kind


def test_edit_terms_are_drawn_longer():
    dialogues = generate(GenConfig(seed=13, num_dialogues=60, duration_spread=0.0))
    uh = {d.durations[i] for d in dialogues for i, w in enumerate(d.words) if w in ("uh", "um")}
    resp = {d.durations[i] for d in dialogues for i, w in enumerate(d.words) if w == "yes"}
    assert uh == {420} and resp == {280}


def test_default_corpus_size():
    dialogues = generate(GenConfig())
    tokens = sum(len(d) for d in dialogues)
    utts = sum(len(d.boundaries()) for d in dialogues)
    assert 15_000 <= tokens <= 25_000
    assert 1_500 <= utts <= 2_500


def test_grammar_size():
    words = {w for _, ws in WORD_CLASSES.values() for w in ws}
    assert 150 <= len(words) <= 250
    assert len({pos for pos, _ in WORD_CLASSES.values()}) == 12
    assert all(c in WORD_CLASSES for t in TEMPLATES for c in t)


@pytest.mark.parametrize("name,rate", [("filler", 0.06), ("repeat", 0.05), ("sub", 0.04), ("delete", 0.015)])
def test_event_mixture_within_three_sigma(name, rate):
    cfg = GenConfig(seed=21, num_dialogues=300)
    _, stats = generate_with_stats(cfg)
    n = stats.insertion_points
    assert n >= 10_000
    sigma = math.sqrt(n * rate * (1 - rate))
    assert abs(stats.events[name] - n * rate) <= 3 * sigma


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [
        {"filler_rate": -0.1},
        {"repeat_rate": 1.5},
        {"filler_rate": 0.5, "repeat_rate": 0.3, "sub_rate": 0.3},
        {"min_utterances": 0},
        {"min_utterances": 5, "max_utterances": 4},
        {"reparandum_weights": (1.0, 2.0)},
        {"reparandum_weights": (0.0,) * 8},
        {"num_dialogues": -1},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        GenConfig(**kwargs)


def test_config_text_round_trip():
    cfg = GenConfig(seed=5, sub_rate=0.1, reparandum_weights=(1, 0, 0, 0, 0, 0, 0, 0.5))
    assert GenConfig.from_text(cfg.to_text()) == cfg


def test_config_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("# toy\nseed = 7\nnum-dialogues = 4  # few\nrepeat_rate = 0.2\n", encoding="utf-8")
    cfg = GenConfig.from_file(path, seed=9)
    assert (cfg.seed, cfg.num_dialogues, cfg.repeat_rate) == (9, 4, 0.2)
    assert cfg.sub_rate == GenConfig().sub_rate


@pytest.mark.parametrize("text", ["nonsense", "colour = 3", "seed = many", "repeat_rate = 2"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        GenConfig.from_text(text)
