import numpy as np
import pytest

from neuronscope.errors import ShapeMismatchError
from neuronscope.model import (
    EMPTY_MASK, AblationMask, ModelConfig, PassCounter, decompose_ffn, forward,
    next_token_distribution, project_to_vocab,
)
from neuronscope.model_io import TINY_CONFIG, synth_model

from oracles import reference_forward, reference_logits

PROMPTS = [[1, 2, 3], [7], [4, 9, 12, 30, 5], [0, 0, 0, 0], list(range(20, 32))]


@pytest.mark.parametrize("tokens", PROMPTS)
def test_forward_matches_straight_line_reference(tiny, tokens):
    tr = forward(tiny, tokens)
    hs, layers = reference_forward(tiny, tokens)
    assert np.max(np.abs(tr.final_hidden - np.array(hs))) <= 1e-10
    assert np.max(np.abs(tr.logits - reference_logits(tiny, tokens))) <= 1e-10
    for l in range(TINY_CONFIG.n_layers):
        assert np.allclose(tr.coeffs[l], np.array(layers[l]["coeffs"]), atol=1e-12)
        assert np.allclose(tr.resid_mid[l], np.array(layers[l]["resid_mid"]), atol=1e-12)


def test_standard_precision_close_to_reference(tiny32, tiny):
    for tokens in PROMPTS:
        tr = forward(tiny32, tokens)
        assert tr.logits.dtype == np.float32
        assert np.max(np.abs(tr.logits - reference_logits(tiny, tokens))) <= 1e-5


def test_exact_gelu_variant():
    cfg = ModelConfig(2, 8, 2, 16, 50, 32, activation="gelu")
    w = synth_model(3, cfg)
    assert np.max(np.abs(forward(w, [1, 2, 3]).logits - reference_logits(w, [1, 2, 3]))) <= 1e-10


def test_mask_equals_zeroed_subvalue(tiny):
    neurons = [(0, 3), (1, 0), (1, 15)]
    masked = forward(tiny, [5, 6, 7], mask=AblationMask.of(neurons))
    zeroed = forward(tiny.with_zeroed_subvalues(neurons), [5, 6, 7])
    assert np.max(np.abs(masked.logits - zeroed.logits)) <= 1e-12
    ref = reference_logits(tiny, [5, 6, 7], zeroed=neurons)
    assert np.max(np.abs(masked.logits - ref)) <= 1e-10


def test_masking_zero_coefficient_neuron_is_bit_identical():
    # b_fc1 = -inf-like bias keeps gelu at exactly 0 for neuron (0, 2)
    from dataclasses import replace

    w = synth_model(5, TINY_CONFIG, zero_biases=True)
    lw = w.layers[0]
    fc1 = np.array(lw.w_fc1)
    fc1[2] = 0.0
    w = replace(w, layers=(replace(lw, w_fc1=fc1), w.layers[1]))
    base = forward(w, [1, 2])
    assert np.all(base.coeffs[0, :, 2] == 0.0)
    masked = forward(w, [1, 2], mask=AblationMask.of([(0, 2)]))
    assert np.array_equal(base.logits, masked.logits)


def test_traced_coefficients_are_unmasked(tiny):
    base = forward(tiny, [1, 2])
    masked = forward(tiny, [1, 2], mask=AblationMask.of([(0, 0)]))
    assert np.array_equal(base.coeffs[0], masked.coeffs[0])


@pytest.mark.parametrize("precision,tol", [("wide", 1e-10), ("standard", 1e-5)])
def test_decompose_ffn_reconstructs_output(tiny, precision, tol):
    w = tiny.astype(precision)
    tr = forward(w, [3, 1, 4, 1, 5])
    for l in range(2):
        for i in range(5):
            parts = decompose_ffn(tr, w, l, i)
            assert parts.shape == (16, 8)
            assert np.max(np.abs(parts.sum(0) + w.layers[l].b_fc2 - tr.ffn_out[l, i])) <= tol


def test_decompose_ffn_respects_mask(tiny):
    mask = AblationMask.of([(1, 4)])
    tr = forward(tiny, [3, 1], mask=mask)
    parts = decompose_ffn(tr, tiny, 1, -1)
    assert np.all(parts[4] == 0)
    assert np.allclose(parts.sum(0) + tiny.layers[1].b_fc2, tr.ffn_out[1, -1], atol=1e-12)


def test_single_neuron_model():
    cfg = ModelConfig(1, 8, 2, 1, 10, 8)
    w = synth_model(0, cfg)
    tr = forward(w, [1, 2])
    assert np.allclose(decompose_ffn(tr, w, 0, 1)[0] + w.layers[0].b_fc2, tr.ffn_out[0, 1])


def test_zero_input_layer_norm_does_not_explode(tiny):
    tr = forward(tiny, embeddings=np.zeros((2, 8)))
    assert np.all(np.isfinite(tr.logits))


def test_pass_counter_increments_by_one(tiny):
    c = PassCounter()
    forward(tiny, [1], counter=c)
    assert c.count == 1
    forward(tiny, [1, 2], trace_level="logits_only", counter=c)
    assert c.count == 2


def test_forward_is_deterministic(tiny):
    a, b = forward(tiny, [9, 8, 7]), forward(tiny, [9, 8, 7])
    assert np.array_equal(a.logits, b.logits) and np.array_equal(a.coeffs, b.coeffs)


def test_logits_only_matches_full(tiny):
    a = forward(tiny, [9, 8, 7])
    b = forward(tiny, [9, 8, 7], trace_level="logits_only")
    assert np.array_equal(a.logits, b.logits)
    assert b.coeffs is None and not b.is_full


def test_all_logits_last_row_matches(tiny):
    tr = forward(tiny, [9, 8, 7], all_logits=True)
    assert tr.all_logits.shape == (3, 50)
    assert np.allclose(tr.all_logits[-1], tr.logits, atol=1e-12)


def test_project_to_vocab(tiny, rng):
    h = rng.normal(size=8)
    dist = project_to_vocab(tiny, h)
    assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert dist.top(1)[0] == int(np.argmax(dist.logits))
    with pytest.raises(ShapeMismatchError):
        project_to_vocab(tiny, np.zeros(7))
    with pytest.raises(ValueError):
        project_to_vocab(tiny, np.full(8, np.nan))


def test_next_token_distribution(tiny):
    dist = next_token_distribution(tiny, [1, 2, 3])
    assert np.allclose(dist.logits, forward(tiny, [1, 2, 3]).logits)


@pytest.mark.parametrize("bad", [[], [50], [-1]])
def test_bad_tokens_rejected(tiny, bad):
    with pytest.raises((ValueError, IndexError)):
        forward(tiny, bad)


def test_overlong_sequence_rejected(tiny):
    with pytest.raises(ValueError):
        forward(tiny, [1] * 33)


def test_embedding_width_checked(tiny):
    with pytest.raises(ShapeMismatchError):
        forward(tiny, embeddings=np.zeros((1, 7)))


def test_mask_out_of_range_rejected(tiny):
    with pytest.raises((ValueError, IndexError)):
        forward(tiny, [1], mask=AblationMask.of([(2, 0)]))


def test_large_geometry_is_valid():
    cfg = ModelConfig.gpt2_large()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.vocab_size) == (36, 1280, 20, 5120, 50257)
    assert cfg.n_neurons == 36 * 5120
    small = ModelConfig.gpt2_small()
    assert (small.n_layers, small.d_model, small.d_ffn) == (12, 768, 3072)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(1, 10, 3, 4, 10, 8)


def test_config_from_hf_dict():
    cfg = ModelConfig.from_dict({"n_layer": 2, "n_embd": 8, "n_head": 2, "n_inner": None,
                                 "vocab_size": 50, "n_positions": 32, "layer_norm_epsilon": 1e-5})
    assert cfg.d_ffn == 32


def test_weights_are_read_only(tiny):
    with pytest.raises(ValueError):
        tiny.wte[0, 0] = 1.0


def test_mask_json_round_trip():
    m = AblationMask.of([(1, 2), (0, 5)])
    assert AblationMask.from_json(m.to_json()) == m
    assert list(m) == [(0, 5), (1, 2)]
    assert len(m.union(AblationMask.of([(0, 5), (3, 3)]))) == 3
    assert len(EMPTY_MASK) == 0


@pytest.mark.parametrize("activation", ["gelu_new", "gelu"])
def test_standard_precision_stays_float32(activation):
    w = synth_model(0, ModelConfig(2, 8, 2, 16, 50, 32, activation=activation), precision="standard")
    tr = forward(w, [1, 2, 3], all_logits=True)
    for name in ("embedded", "resid_mid", "attn_out", "coeffs", "ffn_out", "hidden", "logits", "all_logits"):
        assert getattr(tr, name).dtype == np.float32, name
