"""Behavioural evaluation under an ablation mask.

Three pipelines: last-token prediction quality (MRR / Prob / LogP / Rank),
gender resolution accuracy on biographies, and stereotype-pair preference.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attribution import baseline_scores, locate_concept_neurons, predicted_rank
from .intervention import mask_from_ranking
from .model import EMPTY_MASK, AblationMask, ModelWeights, forward, log_softmax, softmax

log = logging.getLogger(__name__)

LOGP_EPS = 1e-10
EQUAL_TOL = 1e-9


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _mean(xs):
    return float(sum(xs) / len(xs)) if xs else float("nan")


# ---------------------------------------------------------------------------
# next-token metrics
# ---------------------------------------------------------------------------

@dataclass
class NextTokenRow:
    index: int
    true_id: int
    rank: int
    mrr: float
    prob: float
    logp: float


@dataclass
class NextTokenReport:
    rows: list
    skipped: list = field(default_factory=list)

    @property
    def mrr_avg(self):
        return _mean([r.mrr for r in self.rows])

    @property
    def prob_avg(self):
        return _mean([r.prob for r in self.rows])

    @property
    def logp_avg(self):
        return _mean([r.logp for r in self.rows])

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "aggregate": {"MRR_avg": self.mrr_avg, "Prob_avg": self.prob_avg, "LogP_avg": self.logp_avg,
                              "n_evaluated": len(self.rows), "n_skipped": len(self.skipped)},
                "skipped": self.skipped}


def next_token_metrics(probs, true_id: int, index: int = 0) -> NextTokenRow:
    probs = np.asarray(probs, dtype=np.float64)
    rank = predicted_rank(probs, true_id)
    p = float(probs[true_id])
    return NextTokenRow(index, int(true_id), rank, 1.0 / rank, p, math.log(p + LOGP_EPS))


def eval_next_token(weights: ModelWeights, tokenizer, mask: AblationMask, sentences: Sequence[str],
                    indices: Optional[Sequence[int]] = None, threads: int = 1) -> NextTokenReport:
    """Predict each sentence's last token from its prefix under ``mask``."""
    indices = list(range(len(sentences))) if indices is None else list(indices)

    def one(i):
        ids = tokenizer.encode(sentences[i])
        if len(ids) < 2:
            return None
        tr = forward(weights, ids[:-1], mask=mask, trace_level="logits_only")
        return next_token_metrics(softmax(tr.logits.astype(np.float64)), ids[-1], i)

    rows, skipped = [], []
    for i, row in zip(indices, _map(one, indices, threads)):
        if row is None:
            log.warning("sentence %d has fewer than 2 tokens; skipped", i)
            skipped.append(i)
        else:
            rows.append(row)
    return NextTokenReport(rows, skipped)


def cross_sentence_protocol(weights: ModelWeights, tokenizer, method: str, from_sentence: str,
                            test_sentence: str, k: int, concept=None, targets=None,
                            threads: int = 1) -> NextTokenRow:
    """Rank neurons on one sentence (or with the concept vector), mask the top ``k``, test on another.

    Baselines are scored on ``from_sentence`` minus its last token, i.e. on
    the same prediction the test metric looks at.
    """
    if method == "concept":
        if concept is None or targets is None:
            raise ValueError("method 'concept' needs a concept vector and targets")
        ranking = locate_concept_neurons(weights, concept, targets, k, threads=threads)
    else:
        ids = tokenizer.encode(from_sentence)
        if len(ids) < 2:
            raise ValueError("from_sentence needs at least 2 tokens")
        ranking = baseline_scores(method, weights, ids[:-1], k, threads=threads)
    report = eval_next_token(weights, tokenizer, mask_from_ranking(ranking, k), [test_sentence])
    if not report.rows:
        raise ValueError("test_sentence needs at least 2 tokens")
    return report.rows[0]


# ---------------------------------------------------------------------------
# gender resolution
# ---------------------------------------------------------------------------

@dataclass
class ResolutionReport:
    male_correct: int
    male_total: int
    female_correct: int
    female_total: int
    predictions: list = field(default_factory=list)

    @property
    def male_acc(self):
        return self.male_correct / self.male_total if self.male_total else float("nan")

    @property
    def female_acc(self):
        return self.female_correct / self.female_total if self.female_total else float("nan")

    @property
    def avg_acc(self):
        return resolution_summary(self.male_acc, self.female_acc)[0]

    @property
    def gap(self):
        return resolution_summary(self.male_acc, self.female_acc)[1]

    def to_json(self) -> dict:
        return {"ResAcc_male": self.male_acc, "ResAcc_female": self.female_acc,
                "ResAcc_avg": self.avg_acc, "Gap": self.gap,
                "counts": {"male_correct": self.male_correct, "male_total": self.male_total,
                           "female_correct": self.female_correct, "female_total": self.female_total},
                "predictions": self.predictions}


def resolution_summary(male_acc: float, female_acc: float) -> tuple:
    """(average accuracy, gender gap)."""
    return (male_acc + female_acc) / 2.0, abs(male_acc - female_acc)


def predict_gender(probs, male_ids, female_ids) -> tuple:
    """0 when the masculine mass is strictly larger, else 1."""
    p_masc = float(np.sum(probs[list(male_ids)]))
    p_fem = float(np.sum(probs[list(female_ids)]))
    return (0 if p_masc > p_fem else 1), p_masc, p_fem


def eval_resolution(weights: ModelWeights, tokenizer, mask: AblationMask, bios: Sequence[tuple],
                    male_ids, female_ids, threads: int = 1) -> ResolutionReport:
    male_ids, female_ids = list(male_ids), list(female_ids)
    if not male_ids or not female_ids:
        raise ValueError("both gendered token sets must be non-empty")
    if set(male_ids) & set(female_ids):
        raise ValueError("masculine and feminine token sets overlap")
    for _, g in bios:
        if g not in (0, 1):
            raise ValueError(f"unknown gender label {g!r}")

    def one(bio):
        text, _ = bio
        tr = forward(weights, tokenizer.encode(text), mask=mask, trace_level="logits_only")
        return predict_gender(softmax(tr.logits.astype(np.float64)), male_ids, female_ids)

    counts = {0: [0, 0], 1: [0, 0]}
    preds = []
    for (_, g), (pred, pm, pf) in zip(bios, _map(one, bios, threads)):
        counts[g][1] += 1
        counts[g][0] += int(pred == g)
        preds.append({"gender": g, "pred": pred, "P_masc": pm, "P_fem": pf})
    return ResolutionReport(counts[0][0], counts[0][1], counts[1][0], counts[1][1], preds)


# ---------------------------------------------------------------------------
# stereotype pairs
# ---------------------------------------------------------------------------

def sentence_logprob(weights: ModelWeights, tokenizer, mask: AblationMask, text: str,
                     normalization: str = "sum") -> float:
    """Sum (or mean) of ``log p(token_t | tokens_<t)`` over positions 2..T, one forward pass."""
    if normalization not in ("sum", "mean"):
        raise ValueError(f"unknown normalization {normalization!r}")
    ids = tokenizer.encode(text)
    if len(ids) < 2:
        raise ValueError(f"text needs at least 2 tokens: {text!r}")
    tr = forward(weights, ids, mask=mask, trace_level="logits_only", all_logits=True)
    lp = log_softmax(tr.all_logits[:-1].astype(np.float64))
    total = float(lp[np.arange(len(ids) - 1), ids[1:]].sum())
    return total / (len(ids) - 1) if normalization == "mean" else total


@dataclass
class StereoReport:
    total: int
    s_cnt: int
    a_cnt: int
    e_cnt: int
    rows: list = field(default_factory=list)

    @property
    def s_pct(self):
        return 100.0 * self.s_cnt / self.total

    @property
    def a_pct(self):
        return 100.0 * self.a_cnt / self.total

    @property
    def e_pct(self):
        return 100.0 * self.e_cnt / self.total

    def to_json(self) -> dict:
        return {"total": self.total, "S_cnt": self.s_cnt, "A_cnt": self.a_cnt, "E_cnt": self.e_cnt,
                "S_pct": self.s_pct, "A_pct": self.a_pct, "E_pct": self.e_pct, "rows": self.rows}


def stereo_summary(s_cnt: int, a_cnt: int, e_cnt: int = 0) -> StereoReport:
    return StereoReport(s_cnt + a_cnt + e_cnt, s_cnt, a_cnt, e_cnt)


def eval_stereotype_pairs(weights: ModelWeights, tokenizer, mask: AblationMask, pairs: Sequence[tuple],
                          normalization: str = "sum", threads: int = 1) -> StereoReport:
    if not pairs:
        raise ValueError("no sentence pairs")
    for p in pairs:
        if len(p) != 2 or not all(isinstance(s, str) for s in p):
            raise ValueError(f"malformed pair {p!r}")

    def one(pair):
        s, a = pair
        return (sentence_logprob(weights, tokenizer, mask, s, normalization),
                sentence_logprob(weights, tokenizer, mask, a, normalization))

    counts = {"S": 0, "A": 0, "E": 0}
    rows = []
    for ls, la in _map(one, pairs, threads):
        diff = ls - la
        pref = "E" if abs(diff) < EQUAL_TOL else ("S" if diff > 0 else "A")
        counts[pref] += 1
        rows.append({"stereo_logprob": ls, "anti_logprob": la, "preference": pref})
    report = stereo_summary(counts["S"], counts["A"], counts["E"])
    report.rows = rows
    return report
