"""Checkpoint loading, synthetic models, tokenizers and target-word resolution."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptContainerError, EmptyTargetSetError, MissingTensorError, ShapeMismatchError
from .model import PRECISIONS, LayerWeights, ModelConfig, ModelWeights

log = logging.getLogger(__name__)

CACHE_ENV = "NEURONSCOPE_CACHE"
WEIGHTS_FILE = "model.safetensors"
CONFIG_FILE = "config.json"
WORDS_FILE = "words.txt"


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def resolve_weights_path(name_or_path) -> Path:
    """Return an existing weight file, looking inside $NEURONSCOPE_CACHE for bare names."""
    p = Path(name_or_path)
    if p.is_dir():
        p = p / WEIGHTS_FILE
    if p.exists():
        return p
    cache = os.environ.get(CACHE_ENV)
    if cache:
        for cand in (Path(cache) / str(name_or_path) / WEIGHTS_FILE, Path(cache) / str(name_or_path)):
            if cand.is_file():
                return cand
    raise FileNotFoundError(f"weight file not found: {name_or_path}")


def _read_tensors(path: Path) -> dict:
    from safetensors import SafetensorError
    from safetensors.numpy import load_file

    try:
        raw = load_file(str(path))
    except (SafetensorError, OSError, ValueError, json.JSONDecodeError) as e:
        raise CorruptContainerError(f"corrupt container {path}: {e}") from e
    tensors = {}
    for name, arr in raw.items():
        if name.startswith("transformer."):
            name = name[len("transformer."):]
        tensors[name] = arr
    return tensors


def _infer_config(t: dict) -> ModelConfig:
    n_layers = 0
    while f"h.{n_layers}.ln_1.weight" in t:
        n_layers += 1
    vocab, d = t["wte.weight"].shape
    # GPT-2 checkpoints store no head count; every released size uses 64-wide heads.
    return ModelConfig(
        n_layers=n_layers,
        d_model=d,
        n_heads=max(1, d // 64),
        d_ffn=t["h.0.mlp.c_fc.weight"].shape[1],
        vocab_size=vocab,
        max_positions=t["wpe.weight"].shape[0],
    )


def load_model(path, config: Optional[ModelConfig] = None, precision: str = "standard") -> ModelWeights:
    """Load a GPT-2 safetensors checkpoint.

    Conv1D tensors are stored ``[in, out]``; they are transposed to the
    engine's ``[out, in]`` orientation so ``w_fc1`` rows are subkeys.
    """
    path = Path(path)
    if path.is_dir():
        path = path / WEIGHTS_FILE
    if not path.exists():
        raise FileNotFoundError(path)
    t = _read_tensors(path)
    dtype = PRECISIONS[precision]

    def get(name):
        if name not in t:
            raise MissingTensorError(f"missing tensor {name!r} in {path}")
        return np.asarray(t[name], dtype=dtype)

    if "wte.weight" not in t or "h.0.ln_1.weight" not in t:
        raise MissingTensorError(f"{path} does not look like a GPT-2 checkpoint")
    if config is None:
        cfg_file = path.parent / CONFIG_FILE
        config = ModelConfig.from_dict(json.loads(cfg_file.read_text())) if cfg_file.exists() else _infer_config(t)
    d = config.d_model
    layers = []
    for i in range(config.n_layers):
        p = f"h.{i}."
        c_attn_w = get(p + "attn.c_attn.weight")
        c_attn_b = get(p + "attn.c_attn.bias")
        if c_attn_w.shape != (d, 3 * d) or c_attn_b.shape != (3 * d,):
            raise ShapeMismatchError(f"{p}attn.c_attn: unexpected shape {c_attn_w.shape}")
        wq, wk, wv = (np.ascontiguousarray(w.T) for w in np.split(c_attn_w, 3, axis=1))
        bq, bk, bv = np.split(c_attn_b, 3)
        layers.append(LayerWeights(
            ln1_g=get(p + "ln_1.weight"), ln1_b=get(p + "ln_1.bias"),
            w_q=wq, b_q=bq.copy(), w_k=wk, b_k=bk.copy(), w_v=wv, b_v=bv.copy(),
            w_o=np.ascontiguousarray(get(p + "attn.c_proj.weight").T), b_o=get(p + "attn.c_proj.bias"),
            ln2_g=get(p + "ln_2.weight"), ln2_b=get(p + "ln_2.bias"),
            w_fc1=np.ascontiguousarray(get(p + "mlp.c_fc.weight").T), b_fc1=get(p + "mlp.c_fc.bias"),
            w_fc2=np.ascontiguousarray(get(p + "mlp.c_proj.weight").T), b_fc2=get(p + "mlp.c_proj.bias"),
        ))
    if f"h.{config.n_layers}.ln_1.weight" in t:
        raise ShapeMismatchError(f"checkpoint has more than {config.n_layers} layers")
    wte = get("wte.weight")
    w_lm = get("lm_head.weight") if "lm_head.weight" in t else wte
    if w_lm is not wte and np.array_equal(w_lm, wte):
        w_lm = wte
    return ModelWeights(config, wte, get("wpe.weight"), tuple(layers),
                        get("ln_f.weight"), get("ln_f.bias"), w_lm)


def save_model(weights: ModelWeights, directory, tokenizer_words: Optional[Sequence[str]] = None) -> Path:
    """Write ``model.safetensors`` + ``config.json`` with GPT-2 tensor names."""
    from safetensors.numpy import save_file

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t = {"wte.weight": weights.wte, "wpe.weight": weights.wpe,
         "ln_f.weight": weights.lnf_g, "ln_f.bias": weights.lnf_b}
    for i, l in enumerate(weights.layers):
        p = f"h.{i}."
        t[p + "ln_1.weight"], t[p + "ln_1.bias"] = l.ln1_g, l.ln1_b
        t[p + "attn.c_attn.weight"] = np.concatenate([l.w_q.T, l.w_k.T, l.w_v.T], axis=1)
        t[p + "attn.c_attn.bias"] = np.concatenate([l.b_q, l.b_k, l.b_v])
        t[p + "attn.c_proj.weight"], t[p + "attn.c_proj.bias"] = l.w_o.T, l.b_o
        t[p + "ln_2.weight"], t[p + "ln_2.bias"] = l.ln2_g, l.ln2_b
        t[p + "mlp.c_fc.weight"], t[p + "mlp.c_fc.bias"] = l.w_fc1.T, l.b_fc1
        t[p + "mlp.c_proj.weight"], t[p + "mlp.c_proj.bias"] = l.w_fc2.T, l.b_fc2
    if weights.w_lm is not weights.wte:
        t["lm_head.weight"] = weights.w_lm
    t = {k: np.ascontiguousarray(v) for k, v in t.items()}
    out = directory / WEIGHTS_FILE
    tmp = out.with_suffix(".tmp")
    save_file(t, str(tmp))
    os.replace(tmp, out)
    _write_text_atomic(directory / CONFIG_FILE, json.dumps(weights.config.to_dict(), indent=2) + "\n")
    if tokenizer_words is not None:
        _write_text_atomic(directory / WORDS_FILE, "\n".join(tokenizer_words) + "\n")
    return out


def _write_text_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def synth_model(seed: int, config: ModelConfig, std: float = 0.02, precision: str = "wide",
                zero_biases: bool = False) -> ModelWeights:
    """Deterministic random GPT-2 style weights (normal, ``std`` scale).

    Layer-norm gains start at one and shifts at zero; linear biases are random
    unless ``zero_biases`` is set.
    """
    rng = np.random.default_rng(seed)
    d, n = config.d_model, config.d_ffn

    def mat(*shape):
        return rng.normal(0.0, std, size=shape)

    def bias(size):
        b = rng.normal(0.0, std, size=size)
        return np.zeros(size) if zero_biases else b

    wte = mat(config.vocab_size, d)
    wpe = mat(config.max_positions, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            w_q=mat(d, d), b_q=bias(d), w_k=mat(d, d), b_k=bias(d),
            w_v=mat(d, d), b_v=bias(d), w_o=mat(d, d), b_o=bias(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            w_fc1=mat(n, d), b_fc1=bias(n), w_fc2=mat(d, n), b_fc2=bias(d),
        ))
    w = ModelWeights(config, wte, wpe, tuple(layers), np.ones(d), np.zeros(d), wte)
    return w.astype(precision)


def plant_concept(weights: ModelWeights, concept_ids: Sequence[int], neurons: Sequence[tuple],
                  seed: int = 0, embed_gain: float = 0.3, read_gain: float = 1.0,
                  write_gain: float = 0.2) -> ModelWeights:
    """Plant a concept direction into a (synthetic) model without training.

    A random mean-zero unit direction ``u`` is added to the tied embeddings of
    ``concept_ids``; each neuron in ``neurons`` gets subkey ``read_gain * u``
    and subvalue ``write_gain * u``, so it detects the concept and writes it
    back into the residual stream.
    """
    from dataclasses import replace

    rng = np.random.default_rng(seed)
    d = weights.config.d_model
    u = rng.normal(size=d)
    u -= u.mean()
    u /= np.linalg.norm(u)
    dtype = weights.dtype
    wte = np.array(weights.wte, dtype=np.float64)
    wte[list(concept_ids)] += embed_gain * u
    layers = list(weights.layers)
    for l, j in neurons:
        lw = layers[l]
        fc1, fc2 = np.array(lw.w_fc1), np.array(lw.w_fc2)
        fc1[j] = read_gain * u
        fc2[:, j] = write_gain * u
        layers[l] = replace(lw, w_fc1=fc1, w_fc2=fc2)
    wte = wte.astype(dtype)
    w_lm = wte if weights.w_lm is weights.wte else weights.w_lm
    return replace(weights, wte=wte, w_lm=w_lm, layers=tuple(layers))


TINY_CONFIG = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=16, vocab_size=50, max_positions=32)


# ---------------------------------------------------------------------------
# tokenizers
# ---------------------------------------------------------------------------

class BPETokenizer:
    """GPT-2 byte-level BPE from ``vocab.json`` + ``merges.txt``. No special tokens are added."""

    def __init__(self, vocab_file, merges_file):
        from tokenizers import Tokenizer, decoders, models, pre_tokenizers

        tok = Tokenizer(models.BPE.from_file(str(vocab_file), str(merges_file)))
        tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
        tok.decoder = decoders.ByteLevel()
        self._tok = tok
        self.vocab_size = tok.get_vocab_size(with_added_tokens=False)

    def encode(self, text: str) -> list:
        return self._tok.encode(text, add_special_tokens=False).ids

    def decode(self, ids) -> str:
        return self._tok.decode([int(i) for i in ids], skip_special_tokens=False)

    def id_to_token(self, i: int) -> str:
        return self._tok.id_to_token(int(i))


class WordTokenizer:
    """Whitespace word-level vocabulary, used with synthetic models."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.vocab_size = len(self.words)

    def encode(self, text: str) -> list:
        ids = []
        for w in text.split():
            if w not in self._ids:
                raise KeyError(f"word {w!r} not in vocabulary")
            ids.append(self._ids[w])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def id_to_token(self, i: int) -> str:
        return self.words[int(i)]

    def __contains__(self, word):
        return word in self._ids


def load_tokenizer(path):
    path = Path(path)
    if path.is_file() and path.name == WORDS_FILE:
        return WordTokenizer(read_word_list(path))
    if (path / "vocab.json").exists() and (path / "merges.txt").exists():
        return BPETokenizer(path / "vocab.json", path / "merges.txt")
    if (path / WORDS_FILE).exists():
        return WordTokenizer(read_word_list(path / WORDS_FILE))
    raise FileNotFoundError(f"no tokenizer files (vocab.json + merges.txt or {WORDS_FILE}) in {path}")


# Small vocabulary for synthetic models; gendered words come first so B=50 keeps them.
SYNTH_WORDS = (
    "he she him her his hers man woman king queen father mother boy girl "
    "brother sister son daughter husband wife the a is was and of to in "
    "nurse engineer doctor teacher hate love kind cruel good bad people "
    "they we you it that this very not always never works lives city "
    "home school house day night year old new"
).split()


def synth_vocabulary(size: int) -> list:
    words = list(SYNTH_WORDS[:size])
    words += [f"w{i}" for i in range(len(words), size)]
    return words


# ---------------------------------------------------------------------------
# target words
# ---------------------------------------------------------------------------

def read_word_list(path) -> list:
    """One word per line; blank lines and ``#`` comments ignored."""
    return _parse_words(Path(path).read_text(encoding="utf-8"))


def _parse_words(text: str) -> list:
    words = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            words.append(line)
    return words


def default_word_list(name: str) -> list:
    """Shipped gendered word lists: ``"male"`` or ``"female"``."""
    ref = resources.files("neuronscope") / "data" / f"{name}_words.txt"
    return _parse_words(ref.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TargetTokenSet:
    words: tuple
    ids: tuple
    dropped: tuple = ()

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("target ids must be unique")

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def _encode_safe(tokenizer, text):
    try:
        return tokenizer.encode(text)
    except KeyError:
        return None


def resolve_targets(tokenizer, words: Sequence[str], policy: str = "first_subtoken") -> TargetTokenSet:
    """Map words to single token ids, preferring the leading-space form."""
    if policy not in ("first_subtoken", "strict"):
        raise ValueError(f"unknown policy {policy!r}")
    if not words:
        raise ValueError("word list is empty")
    ids, kept, dropped = [], [], []
    for word in words:
        spaced = _encode_safe(tokenizer, " " + word)
        bare = _encode_safe(tokenizer, word)
        if spaced is None and bare is None or not (spaced or bare):
            dropped.append((word, "oov"))
            continue
        if spaced and len(spaced) == 1:
            tid = spaced[0]
        elif bare and len(bare) == 1:
            tid = bare[0]
        elif policy == "strict":
            dropped.append((word, "multi-token"))
            continue
        else:
            tid = (spaced or bare)[0]
            log.warning("target word %r spans several tokens; keeping first sub-token %d", word, tid)
        if tid in ids:
            dropped.append((word, "duplicate"))
            continue
        ids.append(int(tid))
        kept.append(word)
    if not ids:
        raise EmptyTargetSetError("empty target set")
    return TargetTokenSet(tuple(kept), tuple(ids), tuple(dropped))


def parse_word_arg(arg: str) -> list:
    """CLI helper: a word-list file path, or a comma separated list."""
    if os.path.exists(arg):
        return read_word_list(arg)
    return [w.strip() for w in re.split(r",", arg) if w.strip()]
