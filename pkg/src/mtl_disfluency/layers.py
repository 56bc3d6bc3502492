"""LSTM cell, tanh feed-forward heads, linear-chain CRF and the softmax LM head.

Layer functions take and return :class:`~mtl_disfluency.autodiff.Tensor`
values so they serve both training (gradients recorded) and inference
(plain constants).  Viterbi decoding works on numpy arrays directly.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError

__all__ = [
    "LstmParams",
    "FfHead",
    "CrfParams",
    "LmHead",
    "lstm_step",
    "lstm_sequence",
    "ff_tanh",
    "crf_emissions",
    "crf_nll",
    "crf_path_score",
    "crf_viterbi",
    "viterbi_init",
    "viterbi_step",
    "viterbi_backtrace",
    "lm_repr",
    "lm_logits",
    "lm_step",
    "lm_log_probs",
    "lm_nll",
]


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class _Params:
    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class LstmParams(_Params):
    """Gate weights laid out ``[input | forget | output | candidate]`` along the last axis."""

    w_x: Parameter
    w_h: Parameter
    b: Parameter

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator, name: str = "lstm") -> LstmParams:
        scale = 1.0 / np.sqrt(hidden)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        return cls(
            Parameter(_uniform(rng, (input_dim, 4 * hidden), scale), f"{name}.w_x"),
            Parameter(_uniform(rng, (hidden, 4 * hidden), scale), f"{name}.w_h"),
            Parameter(b, f"{name}.b"),
        )

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def _gates(z: Tensor, c_prev: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    s = ad.sigmoid(z[: 3 * hidden])
    g = ad.tanh(z[3 * hidden :])
    i, f, o = s[:hidden], s[hidden : 2 * hidden], s[2 * hidden :]
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def lstm_step(x, h_prev, c_prev, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step: sigmoid input/forget/output gates, tanh candidate."""
    x, h_prev, c_prev = ad.constant(x), ad.constant(h_prev), ad.constant(c_prev)
    hidden = params.hidden_size
    if x.shape != (params.input_dim,) or h_prev.shape != (hidden,) or c_prev.shape != (hidden,):
        raise ShapeError(
            f"lstm_step: got x{x.shape} h{h_prev.shape} c{c_prev.shape} for "
            f"input {params.input_dim}, hidden {hidden}"
        )
    z = x @ params.w_x + h_prev @ params.w_h + params.b
    return _gates(z, c_prev, hidden)


def lstm_sequence(xs, h0, c0, params: LstmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Run the LSTM over ``xs`` [T, input]; returns (H [T, hidden], h_T, c_T).

    The whole recursion is one graph node with a hand-written
    backpropagation-through-time pass.  The input projection is computed for
    all steps at once, so results can differ from repeated
    :func:`lstm_step` calls in the last bits.
    """
    xs, h0, c0 = ad.constant(xs), ad.constant(h0), ad.constant(c0)
    hidden = params.hidden_size
    if xs.data.ndim != 2 or xs.shape[1] != params.input_dim or xs.shape[0] == 0:
        raise ShapeError(f"lstm_sequence: inputs {xs.shape} for input dim {params.input_dim}")
    if h0.shape != (hidden,) or c0.shape != (hidden,):
        raise ShapeError(f"lstm_sequence: initial state {h0.shape}/{c0.shape} for hidden {hidden}")
    T, H = xs.shape[0], hidden
    w_x, w_h, b = params.w_x, params.w_h, params.b
    projected = xs.data @ w_x.data + b.data
    gates = np.empty((T, 4 * H))  # activated i, f, o, g
    cs = np.empty((T, H))
    tanh_cs = np.empty((T, H))
    hs = np.empty((T, H))
    h, c = h0.data, c0.data
    for t in range(T):
        z = projected[t] + h @ w_h.data
        gates[t, : 3 * H] = ad._sigmoid(z[: 3 * H])
        gates[t, 3 * H :] = np.tanh(z[3 * H :])
        i, f, o, g = gates[t, :H], gates[t, H : 2 * H], gates[t, 2 * H : 3 * H], gates[t, 3 * H :]
        c = f * c + i * g
        cs[t] = c
        tanh_cs[t] = np.tanh(c)
        h = o * tanh_cs[t]
        hs[t] = h
    out = np.concatenate([hs, cs], axis=1)  # [T, 2H]; the c half only feeds c_T

    def back(grad):
        d_hs, d_cs = grad[:, :H], grad[:, H:]
        d_z = np.empty((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            i, f, o, g = gates[t, :H], gates[t, H : 2 * H], gates[t, 2 * H : 3 * H], gates[t, 3 * H :]
            c_prev = cs[t - 1] if t else c0.data
            dh = d_hs[t] + dh_next
            dc = d_cs[t] + dc_next + dh * o * (1.0 - tanh_cs[t] ** 2)
            d_z[t, :H] = dc * g * i * (1.0 - i)
            d_z[t, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            d_z[t, 2 * H : 3 * H] = dh * tanh_cs[t] * o * (1.0 - o)
            d_z[t, 3 * H :] = dc * i * (1.0 - g * g)
            dh_next = d_z[t] @ w_h.data.T
            dc_next = dc * f
        h_prev = np.vstack([h0.data[None, :], hs[:-1]])
        ad.accumulate(w_x, xs.data.T @ d_z)
        ad.accumulate(w_h, h_prev.T @ d_z)
        ad.accumulate(b, d_z.sum(axis=0))
        ad.accumulate(xs, d_z @ w_x.data.T)
        ad.accumulate(h0, dh_next)
        ad.accumulate(c0, dc_next)

    both = ad.primitive(out, (xs, h0, c0, w_x, w_h, b), "lstm_sequence", back)
    seq = both[:, :H]
    return seq, seq[T - 1], both[T - 1, H:]


@dataclass
class FfHead(_Params):
    w: Parameter

    @classmethod
    def init(cls, hidden: int, out_dim: int, rng: np.random.Generator, name: str = "ff") -> FfHead:
        return cls(Parameter(_uniform(rng, (hidden, out_dim), np.sqrt(6.0 / (hidden + out_dim))), f"{name}.w_d"))


def ff_tanh(h, head: FfHead) -> Tensor:
    h = ad.constant(h)
    if h.shape[-1] != head.w.shape[0]:
        raise ShapeError(f"ff_tanh: input {h.shape} for weight {head.w.shape}")
    return ad.tanh(h @ head.w)


@dataclass
class CrfParams(_Params):
    """Emission projection plus ``trans[i, j]`` (label i followed by j), start and stop scores."""

    w_e: Parameter
    b_e: Parameter
    trans: Parameter
    start: Parameter
    stop: Parameter

    @classmethod
    def init(cls, in_dim: int, num_labels: int, rng: np.random.Generator, name: str = "crf") -> CrfParams:
        return cls(
            Parameter(_uniform(rng, (in_dim, num_labels), np.sqrt(6.0 / (in_dim + num_labels))), f"{name}.w_e"),
            Parameter(np.zeros(num_labels), f"{name}.b_e"),
            Parameter(np.zeros((num_labels, num_labels)), f"{name}.trans"),
            Parameter(np.zeros(num_labels), f"{name}.start"),
            Parameter(np.zeros(num_labels), f"{name}.stop"),
        )

    @property
    def num_labels(self) -> int:
        return self.trans.shape[0]


def crf_emissions(d, crf: CrfParams) -> Tensor:
    return ad.constant(d) @ crf.w_e + crf.b_e


def crf_nll(
    emissions,
    crf: CrfParams,
    gold: Sequence[int],
    prev_label: int | None = None,
    final: bool = True,
) -> Tensor:
    """``-score(gold) + log sum_y exp(score(y))`` via the forward algorithm.

    ``prev_label`` conditions the first position on a preceding label
    (through ``trans``) instead of the start scores; ``final=False`` leaves
    out the stop scores.  Both serve truncated windows of a longer sequence.
    """
    emissions = ad.constant(emissions)
    gold = np.asarray(gold, dtype=np.int64)
    T, L = emissions.shape if emissions.data.ndim == 2 else (0, 0)
    if T == 0 or L != crf.num_labels or gold.shape != (T,):
        raise ShapeError(f"crf_nll: emissions {emissions.shape}, gold {gold.shape}, labels {crf.num_labels}")
    if gold.min() < 0 or gold.max() >= L:
        raise ShapeError("crf_nll: gold label out of range")
    init = crf.start if prev_label is None else crf.trans[prev_label]
    gold_score = _gold_path_score(init, emissions, crf.trans, crf.stop if final else None, gold)

    return _log_partition(init, emissions, crf.trans, crf.stop if final else None) - gold_score


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    # same arithmetic as ad.log_sum_exp, so one-label chains cancel exactly
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True)), axis=axis)


def _log_partition(init: Tensor, emissions: Tensor, trans: Tensor, stop: Tensor | None) -> Tensor:
    """Forward algorithm as one node; the backward pass uses forward-backward marginals."""
    e, tr = emissions.data, trans.data
    T, L = e.shape
    alphas = np.empty((T, L))
    alphas[0] = init.data + e[0]
    for t in range(1, T):
        alphas[t] = _lse(alphas[t - 1][:, None] + tr, axis=0) + e[t]
    last = alphas[-1] + stop.data if stop is not None else alphas[-1]
    log_z = _lse(last, axis=0)
    parents = [init, emissions, trans] + ([stop] if stop is not None else [])

    def back(g):
        g = float(g)
        betas = np.empty((T, L))
        betas[-1] = stop.data if stop is not None else 0.0
        for t in range(T - 2, -1, -1):
            betas[t] = _lse(tr + (e[t + 1] + betas[t + 1])[None, :], axis=1)
        marginals = np.exp(alphas + betas - log_z)
        if init.requires_grad:
            ad.accumulate(init, g * marginals[0])
        if emissions.requires_grad:
            ad.accumulate(emissions, g * marginals)
        if stop is not None and stop.requires_grad:
            ad.accumulate(stop, g * marginals[-1])
        if trans.requires_grad and T > 1:
            right = e[1:] + betas[1:]  # [T-1, L]
            pair = alphas[:-1, :, None] + tr[None, :, :] + right[:, None, :] - log_z
            ad.accumulate(trans, g * np.exp(pair).sum(axis=0))

    return ad.primitive(np.asarray(log_z), parents, "crf_log_partition", back)


def _gold_path_score(init: Tensor, emissions: Tensor, trans: Tensor, stop: Tensor | None, gold: np.ndarray) -> Tensor:
    # Summed in the same order as the forward recursion, so a one-label CRF
    # yields a loss of exactly zero.
    e, tr = emissions.data, trans.data
    score = init.data[gold[0]] + e[0, gold[0]]
    for t in range(1, len(gold)):
        score = score + tr[gold[t - 1], gold[t]] + e[t, gold[t]]
    if stop is not None:
        score = score + stop.data[gold[-1]]
    parents = [init, emissions, trans] + ([stop] if stop is not None else [])

    def back(g):
        g = float(g)
        if init.requires_grad:
            gi = np.zeros_like(init.data)
            gi[gold[0]] = g
            ad.accumulate(init, gi)
        if emissions.requires_grad:
            ge = np.zeros_like(e)
            ge[np.arange(len(gold)), gold] = g
            ad.accumulate(emissions, ge)
        if trans.requires_grad and len(gold) > 1:
            gt = np.zeros_like(tr)
            np.add.at(gt, (gold[:-1], gold[1:]), g)
            ad.accumulate(trans, gt)
        if stop is not None and stop.requires_grad:
            gs = np.zeros_like(stop.data)
            gs[gold[-1]] = g
            ad.accumulate(stop, gs)

    return ad.primitive(np.asarray(score), parents, "crf_gold_score", back)


def crf_path_score(emissions: np.ndarray, crf: CrfParams, path: Sequence[int]) -> float:
    """Unnormalised score of one label path, start and stop scores included."""
    score = crf.start.data[path[0]] + crf.stop.data[path[-1]]
    score += sum(emissions[t, y] for t, y in enumerate(path))
    score += sum(crf.trans.data[a, b] for a, b in zip(path, path[1:]))
    return float(score)


def viterbi_init(start: np.ndarray, emission: np.ndarray) -> np.ndarray:
    return start + emission


def viterbi_step(delta: np.ndarray, trans: np.ndarray, emission: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Extend the best-path scores by one position; returns (delta, backpointers)."""
    scores = delta[:, None] + trans
    back = scores.argmax(axis=0)
    return scores[back, np.arange(trans.shape[1])] + emission, back


def viterbi_backtrace(
    delta: np.ndarray, stop: np.ndarray, backpointers: Sequence[np.ndarray]
) -> tuple[list[int], float]:
    """Best path ending at ``delta``; ties go to the lowest label, latest position first."""
    final = delta + stop
    y = int(final.argmax())
    score = float(final[y])
    path = [y]
    for back in reversed(backpointers):
        y = int(back[y])
        path.append(y)
    path.reverse()
    return path, score


def crf_viterbi(emissions: np.ndarray, crf: CrfParams) -> tuple[list[int], float]:
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] == 0 or emissions.shape[1] != crf.num_labels:
        raise ShapeError(f"crf_viterbi: emissions {emissions.shape} for {crf.num_labels} labels")
    trans = crf.trans.data
    delta = viterbi_init(crf.start.data, emissions[0])
    backs = []
    for t in range(1, emissions.shape[0]):
        delta, back = viterbi_step(delta, trans, emissions[t])
        backs.append(back)
    return viterbi_backtrace(delta, crf.stop.data, backs)


@dataclass
class LmHead(_Params):
    """``m = tanh(h W_m)``; next-word logits ``m W_q + b_q``; ``m0`` stands in before the first word."""

    w_m: Parameter
    w_q: Parameter
    b_q: Parameter
    m0: Parameter

    @classmethod
    def init(cls, hidden: int, repr_dim: int, vocab_size: int, rng: np.random.Generator, name: str = "lm") -> LmHead:
        return cls(
            Parameter(_uniform(rng, (hidden, repr_dim), np.sqrt(6.0 / (hidden + repr_dim))), f"{name}.w_m"),
            Parameter(_uniform(rng, (repr_dim, vocab_size), np.sqrt(6.0 / (repr_dim + vocab_size))), f"{name}.w_q"),
            Parameter(np.zeros(vocab_size), f"{name}.b_q"),
            Parameter(np.zeros(repr_dim), f"{name}.m0"),
        )

    @property
    def vocab_size(self) -> int:
        return self.w_q.shape[1]


def lm_repr(h, head: LmHead) -> Tensor:
    return ad.tanh(ad.constant(h) @ head.w_m)


def lm_logits(m_prev, head: LmHead) -> Tensor:
    return ad.constant(m_prev) @ head.w_q + head.b_q


def lm_log_probs(m_prev, head: LmHead) -> Tensor:
    """Log-softmax over the vocabulary for each row of ``m_prev``."""
    logits = lm_logits(m_prev, head)
    axis = logits.data.ndim - 1
    norm = ad.log_sum_exp(logits, axis=axis)
    if axis:
        norm = ad.reshape(norm, norm.shape + (1,))
    return logits - norm


def lm_step(m_prev, head: LmHead) -> np.ndarray:
    """Next-word distribution predicted from the representation of the previous word."""
    logits = lm_logits(m_prev, head).data
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def lm_nll(log_probs, gold_ids: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``gold_ids`` under per-step log-probabilities [T, V]."""
    log_probs = ad.constant(log_probs)
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    if log_probs.data.ndim != 2 or gold_ids.shape != (log_probs.shape[0],):
        raise ShapeError(f"lm_nll: log-probs {log_probs.shape}, gold {gold_ids.shape}")
    picked = ad.take(log_probs, (np.arange(len(gold_ids)), gold_ids))
    return ad.neg(ad.mean(picked))
