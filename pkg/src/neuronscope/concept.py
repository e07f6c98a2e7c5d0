"""Concept vectors: the mean last-layer representation of a set of examples."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ModelWeights, PassCounter, forward


@dataclass(frozen=True)
class ConceptCorpus:
    examples: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.examples:
            raise ValueError("concept corpus is empty")

    def digest(self) -> str:
        h = hashlib.sha256()
        for text in self.examples:
            h.update(text.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    @classmethod
    def from_jsonl(cls, path, label: Optional[str] = None) -> "ConceptCorpus":
        """Read ``{"text": ..., "label": ...}`` lines, optionally keeping only one label."""
        texts, labels = [], set()
        for obj in read_jsonl(path):
            if label is not None and obj.get("label", label) != label:
                continue
            texts.append(obj["text"])
            if "label" in obj:
                labels.add(obj["label"])
        if label is None:
            label = labels.pop() if len(labels) == 1 else ""
        return cls(tuple(texts), label)


@dataclass(frozen=True)
class ConceptVector:
    values: np.ndarray
    n_examples: int
    source_digest: str
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("concept vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("concept vector has non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d_model(self) -> int:
        return self.values.size

    def to_json(self) -> dict:
        out = {"d_model": self.d_model, "n_examples": self.n_examples,
               "values": [float(x) for x in self.values], "source_digest": self.source_digest}
        if self.label:
            out["label"] = self.label
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ConceptVector":
        if len(obj["values"]) != obj["d_model"]:
            raise ValueError("d_model does not match number of values")
        return cls(np.array(obj["values"], dtype=np.float64), int(obj["n_examples"]),
                   obj["source_digest"], obj.get("label", ""))

    @classmethod
    def load(cls, path) -> "ConceptVector":
        return cls.from_json(json.loads(Path(path).read_text()))


def read_jsonl(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: invalid JSON ({e})") from e
    return rows


def example_representation(weights: ModelWeights, tokenizer, text: str,
                           counter: Optional[PassCounter] = None) -> np.ndarray:
    """Mean over positions of the final block's output (before the final layer norm)."""
    ids = tokenizer.encode(text)
    if not ids:
        raise ValueError(f"example tokenizes to nothing: {text!r}")
    trace = forward(weights, ids, trace_level="logits_only", counter=counter)
    return trace.final_hidden.astype(np.float64).mean(axis=0)


def concept_vector(weights: ModelWeights, tokenizer, corpus: ConceptCorpus, threads: int = 1,
                   counter: Optional[PassCounter] = None) -> ConceptVector:
    """Average of per-example representations; one forward pass per example."""
    texts = corpus.examples if isinstance(corpus, ConceptCorpus) else tuple(corpus)
    if not isinstance(corpus, ConceptCorpus):
        corpus = ConceptCorpus(texts)
    rep = lambda t: example_representation(weights, tokenizer, t, counter)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reps = list(pool.map(rep, texts))
    else:
        reps = [rep(t) for t in texts]
    # fixed example order for the reduction regardless of threading
    total = np.zeros(weights.config.d_model)
    for r in reps:
        total += r
    return ConceptVector(total / len(reps), len(reps), corpus.digest(), corpus.label)
