"""GPT-2 style forward pass with per-layer tracing and FFN neuron ablation.

All matrices are stored in ``out x in`` orientation and applied as ``W @ x``.
Per layer ``l`` the FFN first projection ``w_fc1`` has shape ``[N, d]`` (row
``k`` is the subkey of neuron ``k``) and the second projection ``w_fc2`` has
shape ``[d, N]`` (column ``k`` is the subvalue of neuron ``k``).
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatchError

PRECISIONS = {"standard": np.float32, "wide": np.float64}
ACTIVATIONS = ("gelu_new", "gelu")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab_size: int
    max_positions: int
    ln_epsilon: float = 1e-5
    activation: str = "gelu_new"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.ln_epsilon > 0:
            raise ValueError("ln_epsilon must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_neurons(self) -> int:
        return self.n_layers * self.d_ffn

    @classmethod
    def gpt2_small(cls) -> "ModelConfig":
        return cls(12, 768, 12, 3072, 50257, 1024)

    @classmethod
    def gpt2_large(cls) -> "ModelConfig":
        return cls(36, 1280, 20, 5120, 50257, 1024)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        """Accept either our own field names or a Hugging Face ``config.json``."""
        if "n_layer" in d or "n_embd" in d:
            n_embd = d["n_embd"]
            act = d.get("activation_function", "gelu_new")
            return cls(
                n_layers=d["n_layer"],
                d_model=n_embd,
                n_heads=d["n_head"],
                d_ffn=d.get("n_inner") or 4 * n_embd,
                vocab_size=d["vocab_size"],
                max_positions=d.get("n_positions", d.get("n_ctx", 1024)),
                ln_epsilon=d.get("layer_norm_epsilon", 1e-5),
                activation="gelu" if act == "gelu" else "gelu_new",
            )
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray


@dataclass(frozen=True)
class ModelWeights:
    """Immutable parameter set. ``w_lm`` is the unembedding (tied to ``wte`` for GPT-2)."""

    config: ModelConfig
    wte: np.ndarray
    wpe: np.ndarray
    layers: tuple
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_lm: np.ndarray

    def __post_init__(self):
        self._check_shapes()
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError("weights contain non-finite values")
            arr.flags.writeable = False

    def _check_shapes(self):
        c = self.config
        d, n = c.d_model, c.d_ffn
        expect = {
            "wte": (self.wte, (c.vocab_size, d)),
            "wpe": (self.wpe, (c.max_positions, d)),
            "lnf_g": (self.lnf_g, (d,)),
            "lnf_b": (self.lnf_b, (d,)),
            "w_lm": (self.w_lm, (c.vocab_size, d)),
        }
        if len(self.layers) != c.n_layers:
            raise ShapeMismatchError(f"expected {c.n_layers} layers, got {len(self.layers)}")
        per_layer = {
            "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "b_q": (d,), "b_k": (d,), "b_v": (d,), "b_o": (d,),
            "w_fc1": (n, d), "b_fc1": (n,), "w_fc2": (d, n), "b_fc2": (d,),
        }
        for i, layer in enumerate(self.layers):
            for name, shape in per_layer.items():
                expect[f"layers[{i}].{name}"] = (getattr(layer, name), shape)
        for name, (arr, shape) in expect.items():
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {arr.shape}")

    def arrays(self):
        yield self.wte
        yield self.wpe
        for layer in self.layers:
            for f in fields(LayerWeights):
                yield getattr(layer, f.name)
        yield self.lnf_g
        yield self.lnf_b
        if self.w_lm is not self.wte:
            yield self.w_lm

    @property
    def dtype(self):
        return self.wte.dtype

    @property
    def precision(self) -> str:
        return "wide" if self.dtype == np.float64 else "standard"

    def astype(self, precision) -> "ModelWeights":
        """Copy in another precision (``"standard"``, ``"wide"`` or a numpy dtype)."""
        dtype = np.dtype(PRECISIONS.get(precision, precision))
        if dtype == self.dtype:
            return self
        cast = lambda a: a.astype(dtype)  # noqa: E731
        layers = tuple(
            LayerWeights(**{f.name: cast(getattr(l, f.name)) for f in fields(LayerWeights)})
            for l in self.layers
        )
        wte = cast(self.wte)
        w_lm = wte if self.w_lm is self.wte else cast(self.w_lm)
        return ModelWeights(self.config, wte, cast(self.wpe), layers,
                            cast(self.lnf_g), cast(self.lnf_b), w_lm)

    def with_zeroed_subvalues(self, neurons: Iterable[tuple]) -> "ModelWeights":
        """Copy with the given ``(layer, neuron)`` fc2 columns literally set to zero."""
        by_layer: dict = {}
        for l, j in neurons:
            by_layer.setdefault(l, []).append(j)
        layers = list(self.layers)
        for l, js in by_layer.items():
            w = np.array(layers[l].w_fc2)
            w[:, js] = 0.0
            layers[l] = replace(layers[l], w_fc2=w)
        return replace(self, layers=tuple(layers))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.config.to_dict()).encode())
        for arr in self.arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class AblationMask:
    """Set of ``(layer, neuron)`` pairs whose subvalue contribution is zeroed."""

    deactivated: frozenset = frozenset()

    def __post_init__(self):
        pairs = frozenset((int(l), int(j)) for l, j in self.deactivated)
        for l, j in pairs:
            if l < 0 or j < 0:
                raise ValueError(f"negative neuron index ({l}, {j})")
        object.__setattr__(self, "deactivated", pairs)

    @classmethod
    def of(cls, pairs: Iterable[tuple] = ()) -> "AblationMask":
        return cls(frozenset(pairs))

    def __len__(self):
        return len(self.deactivated)

    def __iter__(self):
        return iter(sorted(self.deactivated))

    def __contains__(self, item):
        return tuple(item) in self.deactivated

    def validate(self, config: ModelConfig) -> None:
        for l, j in self.deactivated:
            if l >= config.n_layers or j >= config.d_ffn:
                raise ValueError(
                    f"neuron ({l}, {j}) out of range for L={config.n_layers}, N={config.d_ffn}")

    def by_layer(self) -> dict:
        out: dict = {}
        for l, j in sorted(self.deactivated):
            out.setdefault(l, []).append(j)
        return out

    def union(self, *others: "AblationMask") -> "AblationMask":
        pairs = set(self.deactivated)
        for o in others:
            pairs |= o.deactivated
        return AblationMask(frozenset(pairs))

    def to_json(self) -> dict:
        return {"neurons": [{"layer": l, "index": j} for l, j in sorted(self.deactivated)]}

    @classmethod
    def from_json(cls, obj: dict) -> "AblationMask":
        return cls(frozenset((n["layer"], n["index"]) for n in obj["neurons"]))


EMPTY_MASK = AblationMask()


@dataclass
class LayerTrace:
    """Activations recorded by :func:`forward`.

    Per-layer arrays have a leading layer axis then a position axis. They are
    ``None`` when the pass ran with ``trace_level="logits_only"``.
    """

    embedded: np.ndarray  # h^0, [T, d]
    final_hidden: np.ndarray  # h^L before LN_f, [T, d]
    logits: np.ndarray  # final position, [B]
    forward_pass_counter: int
    mask: AblationMask = EMPTY_MASK
    resid_mid: Optional[np.ndarray] = None  # h^{l-1} + A^l, [L, T, d]
    attn_out: Optional[np.ndarray] = None  # A^l, [L, T, d]
    coeffs: Optional[np.ndarray] = None  # m^l_{i,k} before masking, [L, T, N]
    ffn_out: Optional[np.ndarray] = None  # F^l, [L, T, d]
    hidden: Optional[np.ndarray] = None  # h^l, [L, T, d]
    all_logits: Optional[np.ndarray] = None  # [T, B] when requested

    @property
    def n_positions(self) -> int:
        return self.embedded.shape[0]

    @property
    def is_full(self) -> bool:
        return self.coeffs is not None


@dataclass(frozen=True)
class VocabDistribution:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def top(self, n: int = 1) -> list:
        order = np.lexsort((np.arange(self.probs.size), -self.probs))
        return [int(i) for i in order[:n]]


class PassCounter:
    """Thread-safe count of full forward passes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> int:
        with self._lock:
            self._count += 1
            return self._count

    @property
    def count(self) -> int:
        with self._lock:
            return self._count


forward_passes = PassCounter()


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def activate(x, kind: str = "gelu_new"):
    if kind == "gelu_new":
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))
    if kind == "gelu":
        return (0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))).astype(x.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def vocab_logits(weights: ModelWeights, h):
    """``W_lm @ LN_f(h)`` for a vector or a batch of row vectors."""
    c = weights.config
    x = layer_norm(np.asarray(h, dtype=weights.dtype), weights.lnf_g, weights.lnf_b, c.ln_epsilon)
    return x @ weights.w_lm.T


def project_to_vocab(weights: ModelWeights, h) -> VocabDistribution:
    h = np.asarray(h)
    if h.shape != (weights.config.d_model,):
        raise ShapeMismatchError(f"expected vector of width {weights.config.d_model}, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite hidden state")
    z = vocab_logits(weights, h)
    return VocabDistribution(logits=z, probs=softmax(z))


def _attention(layer: LayerWeights, x, n_heads):
    t, d = x.shape
    dh = d // n_heads
    q = (x @ layer.w_q.T + layer.b_q).reshape(t, n_heads, dh).transpose(1, 0, 2)
    k = (x @ layer.w_k.T + layer.b_k).reshape(t, n_heads, dh).transpose(1, 0, 2)
    v = (x @ layer.w_v.T + layer.b_v).reshape(t, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh).astype(x.dtype)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(causal, -np.inf, scores)
    ctx = softmax(scores) @ v  # [H, T, dh]
    ctx = ctx.transpose(1, 0, 2).reshape(t, d)
    return ctx @ layer.w_o.T + layer.b_o


def embed(weights: ModelWeights, tokens=None, embeddings=None, add_positions: bool = False):
    """Input rows ``h^0``. Token ids get token + position embeddings; raw
    embeddings are used as is unless ``add_positions`` is set."""
    c = weights.config
    if (tokens is None) == (embeddings is None):
        raise ValueError("pass exactly one of tokens or embeddings")
    if tokens is not None:
        ids = np.asarray(tokens)
        if ids.ndim != 1:
            raise ShapeMismatchError("token ids must be a 1-D sequence")
        if ids.size == 0:
            raise ValueError("empty sequence")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ShapeMismatchError("token ids must be integers")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise IndexError(f"token id out of range [0, {c.vocab_size})")
        if ids.size > c.max_positions:
            raise ValueError(f"sequence length {ids.size} exceeds {c.max_positions}")
        return weights.wte[ids] + weights.wpe[: ids.size]
    x = np.asarray(embeddings, dtype=weights.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != c.d_model:
        raise ShapeMismatchError(f"embedding rows must have width {c.d_model}, got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty sequence")
    if x.shape[0] > c.max_positions:
        raise ValueError(f"sequence length {x.shape[0]} exceeds {c.max_positions}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input embedding")
    if add_positions:
        x = x + weights.wpe[: x.shape[0]]
    return x.copy()


def forward(
    weights: ModelWeights,
    tokens: Optional[Sequence[int]] = None,
    *,
    embeddings=None,
    mask: AblationMask = EMPTY_MASK,
    trace_level: str = "full",
    add_positions: bool = False,
    all_logits: bool = False,
    counter: Optional[PassCounter] = None,
) -> LayerTrace:
    """Causal pre-LN forward pass over a token sequence or raw embedding rows.

    Neurons in ``mask`` contribute nothing to their layer's FFN output.
    """
    if trace_level not in ("full", "logits_only"):
        raise ValueError(f"unknown trace_level {trace_level!r}")
    c = weights.config
    mask = mask or EMPTY_MASK
    mask.validate(c)
    full = trace_level == "full"
    h = embed(weights, tokens, embeddings, add_positions)
    h0 = h.copy()
    t = h.shape[0]
    ablate = mask.by_layer()
    rec = {name: [] for name in ("resid_mid", "attn_out", "coeffs", "ffn_out", "hidden")} if full else None

    for l, layer in enumerate(weights.layers):
        a = _attention(layer, layer_norm(h, layer.ln1_g, layer.ln1_b, c.ln_epsilon), c.n_heads)
        r = h + a
        x = layer_norm(r, layer.ln2_g, layer.ln2_b, c.ln_epsilon)
        m = activate(x @ layer.w_fc1.T + layer.b_fc1, c.activation)
        m_eff = m
        if l in ablate:
            m_eff = m.copy()
            m_eff[:, ablate[l]] = 0.0
        f = m_eff @ layer.w_fc2.T + layer.b_fc2
        h = r + f
        if full:
            rec["resid_mid"].append(r)
            rec["attn_out"].append(a)
            rec["coeffs"].append(m)
            rec["ffn_out"].append(f)
            rec["hidden"].append(h)

    logits = project_to_vocab(weights, h[-1]).logits
    n = (counter or forward_passes).increment()
    trace = LayerTrace(embedded=h0, final_hidden=h, logits=logits, forward_pass_counter=n, mask=mask)
    if full:
        for name, rows in rec.items():
            setattr(trace, name, np.stack(rows))
    if all_logits:
        trace.all_logits = vocab_logits(weights, h)
    return trace


def decompose_ffn(trace: LayerTrace, weights: ModelWeights, layer: int, position: int) -> np.ndarray:
    """Per-neuron contributions ``m_k * fc2_k`` to ``F^l_i``, shape ``[N, d]``.

    Adding ``b_fc2`` to the sum of rows reconstructs the traced FFN output.
    """
    if not trace.is_full:
        raise ValueError("decompose_ffn needs a full trace")
    if not 0 <= layer < weights.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    if not -trace.n_positions <= position < trace.n_positions:
        raise IndexError(f"position {position} out of range")
    m = trace.coeffs[layer, position].copy()
    m[trace.mask.by_layer().get(layer, [])] = 0.0
    return m[:, None] * weights.layers[layer].w_fc2.T


def next_token_distribution(weights: ModelWeights, tokens, mask: AblationMask = EMPTY_MASK,
                            counter: Optional[PassCounter] = None) -> VocabDistribution:
    trace = forward(weights, tokens, mask=mask, trace_level="logits_only", counter=counter)
    return project_to_vocab(weights, trace.final_hidden[-1])
