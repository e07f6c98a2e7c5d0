"""Neuron scoring against a concept vector from a single cached forward pass.

Deactivating neuron ``(l, j)`` removes ``a_j * fc2_j`` from the layer output,
so the modified output is ``o_orig - a_j * fc2_j``. It is projected straight
through ``LN_f`` and the unembedding (later layers are skipped), which means
scoring every neuron costs one forward pass plus ``L * N`` vocabulary
projections.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyTargetSetError
from .model import (
    AblationMask,
    ModelWeights,
    PassCounter,
    forward,
    log_softmax,
    vocab_logits,
)

LOG_FLOOR = math.log(1e-45)
BASELINE_METHODS = ("a", "b", "c", "d", "e", "f", "g")
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class ConceptTrace:
    """Per-layer state of the concept-vector pass (position 0 only)."""

    resid_mid: np.ndarray  # r^(l), [L, d]
    coeffs: np.ndarray  # a^(l), [L, N]
    output: np.ndarray  # o_orig^(l) = r + W_fc2 a + b, [L, d]
    target_ids: tuple
    orig_logprobs: np.ndarray  # log p_orig(t) per layer, [L, K]
    forward_pass_counter: int

    def columns(self, ids: Iterable[int]) -> list:
        pos = {t: i for i, t in enumerate(self.target_ids)}
        try:
            return [pos[int(t)] for t in ids]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]} was not cached in this trace") from None


@dataclass(frozen=True)
class NeuronScore:
    layer: int
    index: int
    score: float
    net_delta: Optional[float] = None

    def to_json(self) -> dict:
        out = {"layer": self.layer, "index": self.index, "score": self.score}
        if self.net_delta is not None:
            out["net_delta"] = self.net_delta
        return out


@dataclass(frozen=True)
class NeuronRanking:
    entries: tuple
    method: str = "concept"

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def M(self) -> int:
        return len(self.entries)

    def pairs(self, k: Optional[int] = None) -> list:
        return [(e.layer, e.index) for e in self.entries[:k]]

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, rows: list, method: str = "concept") -> "NeuronRanking":
        entries = tuple(NeuronScore(int(r["layer"]), int(r["index"]), float(r["score"]),
                                    r.get("net_delta")) for r in rows)
        return cls(entries, method)


def _target_ids(targets) -> tuple:
    # a set: sorted so scores do not depend on the order words were given in
    ids = tuple(sorted({int(t) for t in targets}))
    if not ids:
        raise EmptyTargetSetError("empty target set")
    return ids


def target_logprobs(weights: ModelWeights, h, ids: Sequence[int]) -> np.ndarray:
    """``log softmax(W_lm LN_f(h))[ids]`` for rows of ``h``; log-softmax in float64."""
    h = np.atleast_2d(h)
    z = vocab_logits(weights, h).astype(np.float64)
    return np.maximum(log_softmax(z)[:, list(ids)], LOG_FLOOR)


def cache_concept_pass(weights: ModelWeights, concept, targets, add_positions: bool = False,
                       counter: Optional[PassCounter] = None) -> ConceptTrace:
    """Run the concept vector as a length-1 embedding and cache what scoring needs."""
    ids = _target_ids(targets)
    c = np.asarray(getattr(concept, "values", concept), dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("concept vector has non-finite entries")
    tr = forward(weights, embeddings=c[None, :], add_positions=add_positions, counter=counter)
    out = tr.hidden[:, 0]
    return ConceptTrace(
        resid_mid=tr.resid_mid[:, 0],
        coeffs=tr.coeffs[:, 0],
        output=out,
        target_ids=ids,
        orig_logprobs=target_logprobs(weights, out, ids),
        forward_pass_counter=tr.forward_pass_counter,
    )


def _layer_chunks(weights: ModelWeights):
    n = weights.config.d_ffn
    step = max(1, _CHUNK_ELEMENTS // weights.config.vocab_size)
    for l in range(weights.config.n_layers):
        for lo in range(0, n, step):
            yield l, lo, min(n, lo + step)


def logprob_deltas(trace: ConceptTrace, weights: ModelWeights, threads: int = 1) -> np.ndarray:
    """``log p_mod - log p_orig`` for every neuron and cached target, shape ``[L, N, K]``."""
    cfg = weights.config
    out = np.zeros((cfg.n_layers, cfg.d_ffn, len(trace.target_ids)))

    def work(task):
        l, lo, hi = task
        a = trace.coeffs[l, lo:hi]
        o_mod = trace.output[l] - a[:, None] * weights.layers[l].w_fc2[:, lo:hi].T
        delta = target_logprobs(weights, o_mod, trace.target_ids) - trace.orig_logprobs[l]
        delta[a == 0] = 0.0  # o_mod is exactly o_orig
        return task, delta

    tasks = list(_layer_chunks(weights))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    for (l, lo, hi), delta in results:
        out[l, lo:hi] = delta
    return out


def _check_neuron(weights: ModelWeights, l: int, j: int):
    if not (0 <= l < weights.config.n_layers and 0 <= j < weights.config.d_ffn):
        raise IndexError(f"neuron ({l}, {j}) out of range")


def neuron_deltas(trace: ConceptTrace, weights: ModelWeights, l: int, j: int) -> np.ndarray:
    _check_neuron(weights, l, j)
    a = trace.coeffs[l, j]
    if a == 0:
        return np.zeros(len(trace.target_ids))
    o_mod = trace.output[l] - a * weights.layers[l].w_fc2[:, j]
    return target_logprobs(weights, o_mod, trace.target_ids)[0] - trace.orig_logprobs[l]


def neuron_effect(trace: ConceptTrace, weights: ModelWeights, l: int, j: int, targets=None) -> float:
    """Summed absolute log-probability change of the targets when ``(l, j)`` is zeroed."""
    cols = trace.columns(_target_ids(targets)) if targets is not None else slice(None)
    return float(np.abs(neuron_deltas(trace, weights, l, j)[cols]).sum())


def _bias_combine(deltas, male_cols, female_cols, direction):
    m = np.abs(deltas[..., male_cols]).sum(axis=-1)
    f = np.abs(deltas[..., female_cols]).sum(axis=-1)
    if direction == "male":
        return m - f
    if direction == "female":
        return f - m
    raise ValueError(f"direction must be 'male' or 'female', got {direction!r}")


def _bias_columns(trace, male, female):
    male, female = _target_ids(male), _target_ids(female)
    if set(male) & set(female):
        raise ValueError("masculine and feminine token sets overlap")
    return trace.columns(male), trace.columns(female)


def bias_effect(trace: ConceptTrace, weights: ModelWeights, l: int, j: int,
                male, female, direction: str) -> float:
    mc, fc = _bias_columns(trace, male, female)
    return float(_bias_combine(neuron_deltas(trace, weights, l, j), mc, fc, direction))


def effect_scores(trace: ConceptTrace, weights: ModelWeights, threads: int = 1):
    """Concept-mode scores ``[L, N]`` and the signed net change used as metadata."""
    d = logprob_deltas(trace, weights, threads)
    return np.abs(d).sum(axis=-1), d.sum(axis=-1)


def bias_scores(trace: ConceptTrace, weights: ModelWeights, male, female, direction: str,
                threads: int = 1) -> np.ndarray:
    mc, fc = _bias_columns(trace, male, female)
    return _bias_combine(logprob_deltas(trace, weights, threads), mc, fc, direction)


def rank_scores(scores: np.ndarray, M: Optional[int] = None, net: Optional[np.ndarray] = None,
                method: str = "concept") -> NeuronRanking:
    """Descending by score; ties go to the lower layer, then the lower index."""
    n_layers, n = scores.shape
    total = n_layers * n
    if M is None:
        M = total
    if not 1 <= M <= total:
        raise ValueError(f"M must be in [1, {total}], got {M}")
    flat = scores.reshape(-1)
    order = np.lexsort((np.arange(total), -flat))[:M]
    net_flat = None if net is None else net.reshape(-1)
    entries = tuple(
        NeuronScore(int(i // n), int(i % n), float(flat[i]),
                    None if net_flat is None else float(net_flat[i]))
        for i in order
    )
    return NeuronRanking(entries, method)


def locate_concept_neurons(weights: ModelWeights, concept, targets, M: int, add_positions: bool = False,
                           threads: int = 1, counter: Optional[PassCounter] = None) -> NeuronRanking:
    trace = cache_concept_pass(weights, concept, targets, add_positions, counter)
    scores, net = effect_scores(trace, weights, threads)
    return rank_scores(scores, M, net, method="concept")


def locate_bias_neurons(weights: ModelWeights, concept, male, female, M: int, direction: str,
                        add_positions: bool = False, threads: int = 1,
                        counter: Optional[PassCounter] = None) -> NeuronRanking:
    """Rank by the signed masculine-minus-feminine (or reverse) effect on ``concept``'s pass."""
    male, female = _target_ids(male), _target_ids(female)
    trace = cache_concept_pass(weights, concept, male + female, add_positions, counter)
    scores = bias_scores(trace, weights, male, female, direction, threads)
    return rank_scores(scores, M, method=f"concept-{direction}")


def full_propagation_effects(weights: ModelWeights, concept, targets, neurons: Iterable[tuple],
                             add_positions: bool = False, counter: Optional[PassCounter] = None) -> dict:
    """Audit mode: re-run the whole model per neuron and compare final-position log-probs.

    Costs one forward pass per neuron plus one. Not the scoring method, only a
    comparison point for the layer-local scores.
    """
    ids = list(_target_ids(targets))
    c = np.asarray(getattr(concept, "values", concept), dtype=np.float64)[None, :]
    base = forward(weights, embeddings=c, add_positions=add_positions,
                   trace_level="logits_only", counter=counter)
    base_lp = target_logprobs(weights, base.final_hidden[-1], ids)[0]
    out = {}
    for l, j in neurons:
        tr = forward(weights, embeddings=c, mask=AblationMask.of([(l, j)]), add_positions=add_positions,
                     trace_level="logits_only", counter=counter)
        out[(l, j)] = float(np.abs(target_logprobs(weights, tr.final_hidden[-1], ids)[0] - base_lp).sum())
    return out


# ---------------------------------------------------------------------------
# per-sentence baselines
# ---------------------------------------------------------------------------

def predicted_rank(probs: np.ndarray, token: int) -> int:
    """1 + number of tokens with strictly higher probability."""
    return 1 + int(np.count_nonzero(probs > probs[token]))


def baseline_scores(method: str, weights: ModelWeights, tokens: Sequence[int], M: Optional[int] = None,
                    threads: int = 1, counter: Optional[PassCounter] = None) -> NeuronRanking:
    """Score every neuron at the last position of ``tokens`` with baseline ``a``..``g``.

    The scored token is the model's own top-1 prediction ``w*``. Method ``a``
    re-runs the model once per neuron (``L * N + 1`` passes in total).
    """
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline method {method!r}")
    tokens = list(tokens)
    if not tokens:
        raise ValueError("sentence is empty")
    cfg = weights.config
    base = forward(weights, tokens, counter=counter)
    logp = log_softmax(base.logits.astype(np.float64))
    w_star = int(np.argmax(logp))
    m_last = base.coeffs[:, -1].astype(np.float64)  # [L, N]
    v_norm = np.stack([np.linalg.norm(l.w_fc2.astype(np.float64), axis=0) for l in weights.layers])

    if method == "a":
        pairs = [(l, j) for l in range(cfg.n_layers) for j in range(cfg.d_ffn)]

        def ablated(pair):
            tr = forward(weights, tokens, mask=AblationMask.of([pair]), trace_level="logits_only",
                         counter=counter)
            return log_softmax(tr.logits.astype(np.float64))[w_star]

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                lp = list(pool.map(ablated, pairs))
        else:
            lp = [ablated(p) for p in pairs]
        scores = logp[w_star] - np.array(lp).reshape(cfg.n_layers, cfg.d_ffn)
    elif method == "b":
        scores = np.stack([
            target_logprobs(weights, base.coeffs[l, -1][:, None] * layer.w_fc2.T, [w_star])[:, 0]
            for l, layer in enumerate(weights.layers)
        ])
    elif method == "c":
        rows = []
        for l, layer in enumerate(weights.layers):
            r = base.resid_mid[l, -1]
            with_neuron = r + base.coeffs[l, -1][:, None] * layer.w_fc2.T
            p_with = np.exp(target_logprobs(weights, with_neuron, [w_star])[:, 0])
            p_without = np.exp(target_logprobs(weights, r, [w_star])[0, 0])
            rows.append(p_with - p_without)
        scores = np.stack(rows)
    elif method == "d":
        scores = v_norm
    elif method == "e":
        scores = np.abs(m_last)
    elif method == "f":
        scores = np.abs(m_last) * v_norm
    else:
        rank = predicted_rank(np.exp(logp), w_star)
        scores = np.abs(m_last) / rank
    return rank_scores(scores, M, method=method)
