"""Acceptance suite: one verdict line per criterion (see the summary at the end of the run).

Each test records its verdict before asserting, so a failing criterion
still shows up in the summary with the numbers that sank it.
"""

import itertools
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from annotation_gen import seeded_annotation
from mtl_disfluency import autodiff as ad
from mtl_disfluency.autodiff import Parameter, gradient_check
from mtl_disfluency.corpus import dump_corpus, load_corpus
from mtl_disfluency.evaluation import evaluate, perplexity, unigram_log_probs
from mtl_disfluency.incremental import edit_overhead, first_time_to_detection, replay
from mtl_disfluency.layers import (
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
from mtl_disfluency.model import LossMode, ModelConfig, combined_loss, parse_tasks, predict_final
from mtl_disfluency.synthetic import GenConfig, generate
from mtl_disfluency.tags import decode_disfluency, decode_uttseg, encode_disfluency, encode_uttseg
from mtl_disfluency.training import TrainConfig, build_model, train
from test_tags import BOSTON, BOSTON_DISF, BOSTON_SPANS, BOSTON_UTT

ALL_TASKS = parse_tasks("disf,uttseg,pos,lm")


# ---------------------------------------------------------------- 1: gradients


def _lstm_trial(rng):
    T, n_in, hidden = rng.integers(1, 5), rng.integers(2, 5), rng.integers(2, 5)
    lstm = LstmParams.init(n_in, hidden, rng)
    xs = Parameter(rng.normal(size=(T, n_in)))
    h0, c0 = Parameter(rng.normal(size=hidden)), Parameter(rng.normal(size=hidden))
    w = [rng.normal(size=s) for s in ((T, hidden), hidden, hidden)]

    def loss():
        hs, h, c = lstm_sequence(xs, h0, c0, lstm)
        return ad.tsum(hs * w[0]) + ad.tsum(h * w[1]) + ad.tsum(c * w[2])

    return loss, lstm.parameters() + [xs, h0, c0]


def _lstm_step_trial(rng):
    n_in, hidden = rng.integers(2, 5), rng.integers(2, 5)
    lstm = LstmParams.init(n_in, hidden, rng)
    x, h0, c0 = (Parameter(rng.normal(size=n)) for n in (n_in, hidden, hidden))
    w = rng.normal(size=(2, hidden))

    def loss():
        h, c = lstm_step(x, h0, c0, lstm)
        return ad.tsum(h * w[0]) + ad.tsum(c * w[1])

    return loss, lstm.parameters() + [x, h0, c0]


def _ff_trial(rng):
    T, hidden, out = rng.integers(1, 5), rng.integers(2, 6), rng.integers(2, 6)
    head = FfHead.init(hidden, out, rng)
    hs = Parameter(rng.normal(size=(T, hidden)))
    w = rng.normal(size=(T, out))
    return (lambda: ad.tsum(ff_tanh(hs, head) * w)), head.parameters() + [hs]


def _crf_trial(rng):
    T, L, n_in = rng.integers(1, 6), rng.integers(2, 5), rng.integers(2, 5)
    crf = CrfParams.init(n_in, L, rng)
    for p in crf.parameters():
        p.data[...] = rng.normal(size=p.shape)
    d = Parameter(rng.normal(size=(T, n_in)))
    gold = rng.integers(0, L, size=T)
    prev = None if rng.random() < 0.5 else int(rng.integers(0, L))
    final = bool(rng.random() < 0.5)
    return (lambda: crf_nll(crf_emissions(d, crf), crf, gold, prev, final)), crf.parameters() + [d]


def _lm_trial(rng):
    T, hidden, dim, V = rng.integers(1, 5), rng.integers(2, 5), rng.integers(2, 4), rng.integers(3, 7)
    head = LmHead.init(hidden, dim, V, rng)
    head.b_q.data[...] = rng.normal(size=V)
    head.m0.data[...] = rng.normal(size=dim)
    hs = Parameter(rng.normal(size=(T, hidden)))
    gold = rng.integers(0, V, size=T)

    def loss():
        first = ad.reshape(head.m0, (1, dim))
        m_prev = first if T == 1 else ad.concat([first, lm_repr(hs[:-1], head)], axis=0)
        return lm_nll(lm_log_probs(m_prev, head), gold)

    return loss, head.parameters() + [hs]


def _embedding_trial(rng):
    V, dim, T = rng.integers(2, 6), rng.integers(2, 5), rng.integers(1, 8)
    table = Parameter(rng.normal(size=(V, dim)))
    ids = rng.integers(0, V, size=T)  # repeats exercise gradient accumulation
    w = rng.normal(size=(T, dim))
    return (lambda: ad.tsum(ad.tanh(ad.lookup(table, ids)) * w)), [table]


CORPUS_TINY = generate(GenConfig(seed=3, num_dialogues=4))


def _model_trial(kind):
    def trial(rng):
        mode = LossMode.naive(float(rng.uniform(0.2, 2.0))) if kind == "naive" else LossMode.uncertainty(ALL_TASKS)
        # a small vocabulary keeps every LM gradient well above finite-difference noise
        cfg = ModelConfig(tasks=ALL_TASKS, embed_dim=3, hidden=4, ff_dim=3, lm_dim=3, vocab_cap=20,
                          use_timing=True, seed=int(rng.integers(1 << 30)))
        model = build_model(CORPUS_TINY, cfg, mode)
        for p in model.loss_mode.parameters():
            p.data[...] = rng.normal(scale=0.3)
        for crf in model.crf.values():
            for p in (crf.trans, crf.start, crf.stop):
                p.data[...] = rng.normal(scale=0.5, size=p.shape)
        d = CORPUS_TINY[int(rng.integers(len(CORPUS_TINY)))]
        ids = model.word_ids(d.words[:8])
        gold = {t: model.gold_ids(t, d) for t in model.tagging_tasks}
        state = model.initial_state()
        # second window of a dialogue: carried state, previous gold labels, no start scores
        with ad.no_grad():
            first = model.forward(ids[:4], d.durations[:4], state.h, state.c, dialogue_start=True)
        prev = {t: int(g[3]) for t, g in gold.items()}
        window_gold = {t: g[4:8] for t, g in gold.items()}

        def loss():
            out = model.forward(ids[4:], d.durations[4:8], first.h, first.c, dialogue_start=False)
            return combined_loss(model.task_losses(out, ids[4:], window_gold, prev, final=False), model.loss_mode)

        return loss, model.parameters()

    return trial


GRADIENT_CASES = {
    "lstm_sequence": _lstm_trial,
    "lstm_step": _lstm_step_trial,
    "ff_tanh": _ff_trial,
    "crf": _crf_trial,
    "lm": _lm_trial,
    "embedding": _embedding_trial,
    "naive_loss": _model_trial("naive"),
    "uncertainty_loss": _model_trial("uncertainty"),
}


def test_criterion_1_gradient_correctness(verdicts):
    start = time.perf_counter()
    worst = {}
    for name, make in GRADIENT_CASES.items():
        errors = []
        for trial in range(20):
            rng = np.random.default_rng([1, trial])
            fn, params = make(rng)
            errors.append(gradient_check(fn, params, epsilon=1e-4, max_coords=6, rng=rng))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdicts.record("1", ok, f"max rel err over 20 trials each: {detail}; {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2: CRF oracle


def _enumerate(emissions, crf):
    """All L**T paths scored directly; returns (log Z, best path, best score, score lookup)."""
    T, L = emissions.shape
    paths = np.array(list(itertools.product(range(L), repeat=T)))
    scores = crf.start.data[paths[:, 0]] + crf.stop.data[paths[:, -1]]
    scores = scores + emissions[np.arange(T), paths].sum(axis=1)
    if T > 1:
        scores = scores + crf.trans.data[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    top = scores.max()
    log_z = top + math.log(np.exp(scores - top).sum())
    best = int(scores.argmax())
    return log_z, list(paths[best]), scores[best], paths, scores


def test_criterion_2_crf_oracle_equivalence(verdicts):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, path_mismatch, cases = 0.0, 0, 0
    for _ in range(100):
        for T, L in itertools.product(range(1, 6), range(1, 5)):
            crf = CrfParams.init(2, L, rng)
            for p in (crf.trans, crf.start, crf.stop):
                p.data[...] = rng.normal(size=p.shape)
            e = rng.normal(size=(T, L))
            log_z, best, best_score, paths, scores = _enumerate(e, crf)
            gold_row = int(rng.integers(len(paths)))
            nll = crf_nll(e, crf, paths[gold_row]).item()
            path, score = crf_viterbi(e, crf)
            worst = max(worst, abs(nll - (log_z - scores[gold_row])), abs(score - best_score))
            path_mismatch += list(path) != best
            cases += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and path_mismatch == 0 and elapsed < 60
    verdicts.record("2", ok, f"{cases} cases, max |delta| {worst:.1e} (< 1e-10), "
                             f"{path_mismatch} path mismatches; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3: codec


def test_criterion_3_codec_fidelity(verdicts):
    start = time.perf_counter()
    n = len(BOSTON)
    example_ok = (
        [str(t) for t in encode_disfluency(BOSTON_SPANS, n)] == BOSTON_DISF
        and [str(t) for t in encode_uttseg([11, 13], n)] == BOSTON_UTT
        and decode_disfluency(BOSTON_DISF) == BOSTON_SPANS
        and decode_uttseg(BOSTON_UTT) == [11, 13]
    )
    failures = 0
    for seed in range(10_000):
        spans, length, bounds = seeded_annotation(seed)
        tags = encode_disfluency(spans, length)
        strings = [str(t) for t in tags]
        utt = encode_uttseg(bounds, length)
        failures += not (
            decode_disfluency(strings) == sorted(spans, key=lambda s: (s.start, s.last))
            and decode_uttseg([str(t) for t in utt]) == bounds
        )
    corpus = generate(GenConfig(seed=33, num_dialogues=20))
    text = dump_corpus(corpus)
    reloaded = load_corpus(text)
    corpus_ok = dump_corpus(reloaded) == text and all(
        [str(t) for t in encode_disfluency(decode_disfluency(d.disf_tags), len(d))] == [str(t) for t in d.disf_tags]
        and [str(t) for t in encode_uttseg(decode_uttseg(d.utt_tags), len(d))] == [str(t) for t in d.utt_tags]
        for d in reloaded
    )
    elapsed = time.perf_counter() - start
    ok = example_ok and failures == 0 and corpus_ok and elapsed < 60
    verdicts.record("3", ok, f"worked example {'ok' if example_ok else 'WRONG'}, {failures}/10000 round-trip "
                             f"failures, generator corpus {'ok' if corpus_ok else 'WRONG'}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4: loss identity


def test_criterion_4_loss_scheme_identity(verdicts):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, len(ALL_TASKS) + 1))
        tasks = sorted((str(t) for t in rng.choice(ALL_TASKS, size=k, replace=False)), key=ALL_TASKS.index)
        losses = {t: float(10 ** rng.uniform(-6, 3)) for t in tasks}
        naive = combined_loss(losses, LossMode.naive(1.0)).item()
        unc = combined_loss(losses, LossMode.uncertainty(tasks)).item()
        worst = max(worst, abs(naive - unc) / max(abs(naive), 1e-300))
    ok = worst <= 4 * np.finfo(float).eps
    verdicts.record("4", ok, f"1000 tuples, max relative gap {worst:.1e} (machine eps {np.finfo(float).eps:.1e})")
    assert ok


# ---------------------------------------------------------------- 7: metric oracles

# (prefix outputs, EO by hand)
EO_LOGS = [
    ([["f"]], 0.0),
    ([["f"], ["f", "f"], ["f", "f", "e"]], 0.0),
    ([["f"], ["f", "f"], ["e", "f", "f"]], 2 / 5),
    ([["f"], ["e", "f"]], 2 / 4),
    ([["f"], ["e", "f"], ["f", "f", "f"]], 4 / 7),
    ([["f"], ["e", "e"], ["f", "f", "f"]], 6 / 9),
    ([["f"], ["f", "f"], ["f", "e", "f"], ["f", "e", "f", "f"]], 2 / 6),
    ([["f"], ["f", "e"], ["f", "e", "f"], ["f", "e", "f", "rpSnRep-1"], ["f", "e", "f", "rpSnRep-1", "f"]], 0.0),
    ([["f"], ["f", "f"], ["f", "f", "f"], ["e", "e", "f", "f"]], 4 / 8),
    ([[".w-"], [".w.", ".w-"], [".w-", "-w.", ".w-"], [".w.", "-w-", "-w.", ".w-"]], 12 / 16),
]

# (prefix outputs, gold onsets, origin, (mean FTD, detected, missed) by hand)
FTD_LOGS = [
    ([["f"], ["f", "rpSnRep-1"]], [1], 0, (0.0, 1, 0)),
    ([["f"], ["f", "f"], ["f", "f", "f"], ["f", "rpS-1", "f", "rpnRep"]], [1], 0, (2.0, 1, 0)),
    ([["f"], ["f", "f"]], [1], 0, (math.nan, 0, 1)),
    ([["f"], ["f", "rpSnRep-1"], ["f", "rpSnRep-1", "f"], ["f", "rpSnRep-1", "f", "f"],
      ["f", "rpSnRep-1", "f", "rpS-2", "rpnSub"]], [1, 3], 0, (0.5, 2, 0)),
    ([["f"], ["f", "rpSnRep-1"], ["f", "f", "f"]], [1], 0, (0.0, 1, 0)),
    ([["f"], ["f", "f"], ["f", "f", "rpSnRep-2"]], [1], 0, (math.nan, 0, 1)),
    ([["f"], ["f", "f"], ["f", "f", "f"], ["f", "rpS-1", "f", "rpnRep"]], [1], 1, (3.0, 1, 0)),
    ([["f"], ["f", "f"]], [], 0, (math.nan, 0, 0)),
    ([["f"], ["f", "rpSnRep-1"], ["f", "rpSnRep-1", "f"], ["f", "rpSnRep-1", "rpSnSub-2", "f"],
      ["f", "rpSnRep-1", "rpSnSub-2", "f", "f"]], [1, 2, 4], 0, (0.5, 2, 1)),
    ([["f"], ["f", "f"], ["f", "rpSnDel-1", "f"]], [1], 0, (1.0, 1, 0)),
]


def _same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def test_criterion_7_metric_oracles(verdicts):
    assert len(EO_LOGS) + len(FTD_LOGS) == 20
    eo_bad = [i for i, (log, want) in enumerate(EO_LOGS) if edit_overhead(log) != want]
    ftd_bad = [
        i for i, (log, onsets, origin, want) in enumerate(FTD_LOGS)
        if not all(_same(g, w) for g, w in zip(first_time_to_detection(log, onsets, origin=origin), want))
    ]
    gaps = [abs(perplexity([-math.log(v)] * n) - v) for v, n in ((2, 1), (7, 13), (200, 1000), (7001, 50))]
    # a real LM head with zero output weights is uniform over its vocabulary
    model = build_model(CORPUS_TINY, ModelConfig(tasks="lm", embed_dim=3, hidden=4, lm_dim=3))
    model.lm.w_q.data[...] = 0.0
    model.lm.b_q.data[...] = 0.0
    gaps.append(abs(evaluate(model, CORPUS_TINY).ppl - len(model.vocab)))
    ok = not eo_bad and not ftd_bad and max(gaps) < 1e-9
    verdicts.record("7", ok, f"EO mismatches {eo_bad}, FTD mismatches {ftd_bad}, "
                             f"uniform perplexity max |ppl - V| {max(gaps):.1e}")
    assert ok


# ---------------------------------------------------------------- 8: determinism


def _cli(*args, hash_seed):
    env = dict(os.environ, PYTHONHASHSEED=str(hash_seed))
    proc = subprocess.run([sys.executable, "-m", "mtl_disfluency.cli", *args], env=env,
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_criterion_8_determinism(verdicts, tmp_path):
    tiny = ["--embed-dim", "8", "--hidden", "12", "--ff-dim", "8", "--lm-dim", "6", "--quiet"]
    runs = []
    for run, hash_seed in enumerate((1, 2)):
        d = tmp_path / f"run{run}"
        d.mkdir()
        _cli("gen", "-", str(d / "train.tsv"), "--seed", "80", "--num-dialogues", "12", hash_seed=hash_seed)
        _cli("gen", "-", str(d / "dev.tsv"), "--seed", "81", "--num-dialogues", "4", hash_seed=hash_seed)
        train_out = _cli("train", str(d / "train.tsv"), str(d / "dev.tsv"), "--seed", "5", "--epochs", "3",
                         "--dropout", "0.2", "--timing", "--out", str(d / "m.ckpt"), *tiny, hash_seed=hash_seed)
        report = _cli("eval", str(d / "m.ckpt"), str(d / "dev.tsv"), "--incremental",
                      "--stream", str(d / "stream.txt"), hash_seed=hash_seed)
        runs.append({
            "corpus": (d / "train.tsv").read_bytes() + (d / "dev.tsv").read_bytes(),
            "checkpoint": (d / "m.ckpt").read_bytes(),
            "report": report.encode() + (d / "stream.txt").read_bytes(),
            "train summary": train_out.replace(str(d), "").encode(),
        })
    differing = [k for k in runs[0] if runs[0][k] != runs[1][k]]
    ok = not differing
    verdicts.record("8", ok, "gen/train/eval re-run in fresh processes (different hash seeds): "
                             + ("all outputs byte-identical" if ok else f"differ: {differing}"))
    assert ok


# ---------------------------------------------------------------- 5 and 6: trained models

# Frozen after the pilot runs (pilot data: generator seeds 1 and 2); the data
# below uses fresh generator seeds the pilots never saw.
TRAIN_GEN = GenConfig(seed=1001)
DEV_GEN = GenConfig(seed=2002, num_dialogues=50)
TIME_LIMIT_S = 15 * 60

LM_CONFIG = dict(model=dict(hidden=100, ff_dim=50), train=dict(learning_rate=2e-3, max_epochs=30, patience=5))
DISF_CONFIG = dict(model=dict(hidden=200, ff_dim=100, dropout=0.3, use_timing=True),
                   train=dict(learning_rate=2e-3, max_epochs=80, patience=12))
TREND_CONFIG = dict(model=dict(hidden=100, ff_dim=50, dropout=0.3, use_timing=True),
                    train=dict(learning_rate=2e-3, max_epochs=40, patience=8))
TREND_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def synthetic_data():
    return generate(TRAIN_GEN), generate(DEV_GEN)


class _Trained:
    def __init__(self, data):
        self.data = data
        self.cache = {}

    def get(self, tasks, setup, seed=0):
        key = (tasks, repr(setup), seed)
        if key not in self.cache:
            train_set, dev_set = self.data
            mc = ModelConfig(tasks=tasks, seed=seed, **setup["model"])
            mode = LossMode.uncertainty(mc.tasks) if len(mc.tasks) > 1 else LossMode.naive()
            start = time.perf_counter()
            model, history = train(train_set, dev_set, mc, mode, TrainConfig(seed=seed, **setup["train"]))
            self.cache[key] = (model, history, time.perf_counter() - start)
        return self.cache[key]


@pytest.fixture(scope="session")
def trained(synthetic_data):
    return _Trained(synthetic_data)


def test_criterion_5a_lm_beats_unigram(verdicts, synthetic_data, trained):
    train_set, dev_set = synthetic_data
    model, history, seconds = trained.get("lm", LM_CONFIG)
    ppl = evaluate(model, dev_set).ppl
    unigram = unigram_log_probs(train_set, model.vocab)
    oracle = perplexity(unigram[model.vocab.encode_all(w for d in dev_set for w in d.words)])
    ok = ppl < oracle and seconds <= TIME_LIMIT_S
    verdicts.record("5(a)", ok, f"LM dev perplexity {ppl:.2f} vs training-unigram {oracle:.2f}; "
                                f"trained in {seconds:.0f}s, best epoch {history.best_epoch}")
    assert ok


def test_criterion_5b_single_task_disfluency(verdicts, synthetic_data, trained):
    _, dev_set = synthetic_data
    model, history, seconds = trained.get("disf", DISF_CONFIG)
    f1 = evaluate(model, dev_set).f1_rps
    ok = f1 >= 0.80 and seconds <= TIME_LIMIT_S
    verdicts.record("5(b)", ok, f"single-task F_rpS {f1:.3f} (threshold 0.80); "
                                f"trained in {seconds:.0f}s, best epoch {history.best_epoch}")
    assert ok


def test_criterion_5c_multitask_uttseg_trend(verdicts, synthetic_data, trained):
    _, dev_set = synthetic_data
    wins, rows, slowest = 0, [], 0.0
    for seed in TREND_SEEDS:
        multi, _, t_multi = trained.get("disf,uttseg,pos,lm", TREND_CONFIG, seed)
        single, _, t_single = trained.get("uttseg", TREND_CONFIG, seed)
        f_multi, f_single = evaluate(multi, dev_set).f1_uttseg, evaluate(single, dev_set).f1_uttseg
        wins += f_multi >= f_single
        slowest = max(slowest, t_multi, t_single)
        rows.append(f"seed {seed}: {f_multi:.3f} vs {f_single:.3f}")
    ok = wins >= 2 and slowest <= TIME_LIMIT_S
    verdicts.record("5(c)", ok, f"4-task vs single-task F_uttSeg, {'; '.join(rows)}; {wins}/3 seeds; "
                                f"slowest training {slowest:.0f}s")
    assert ok


def test_criterion_6_incremental_consistency(verdicts, synthetic_data, trained):
    _, dev_set = synthetic_data
    model, _, _ = trained.get("disf,uttseg,pos,lm", TREND_CONFIG, TREND_SEEDS[0])
    final_mismatch, iff_violations, revised_logs, logs = 0, 0, 0, 0
    for d in dev_set:
        log = replay(model, d)
        pred = predict_final(model, d)
        final_mismatch += any(log.final(t) != pred.labels[t] for t in model.tagging_tasks)
        for t in model.tagging_tasks:
            outputs = log.for_task(t)
            revised = any(a[i] != b[i] for a, b in zip(outputs, outputs[1:]) for i in range(len(a)))
            iff_violations += (edit_overhead(outputs) == 0.0) == revised
            revised_logs += revised
            logs += 1
    rng = np.random.default_rng(6)
    words = sorted({w for d in dev_set for w in d.words}) + ["zzz-unseen"]
    causal_failures = 0
    for _ in range(100):
        prefix, a, b = ([words[i] for i in rng.integers(len(words), size=n)] for n in rng.integers(1, 15, size=3))
        causal_failures += replay(model, prefix + a).entries[: len(prefix)] != replay(model, prefix + b).entries[: len(prefix)]
    ok = final_mismatch == 0 and iff_violations == 0 and causal_failures == 0
    verdicts.record("6", ok, f"{final_mismatch}/{len(dev_set)} final-prefix mismatches, EO iff violations "
                             f"{iff_violations}/{logs} ({revised_logs} logs revised), "
                             f"{causal_failures}/100 causality failures")
    assert ok
