"""Concept-neuron attribution for GPT-2 style transformers."""

from .attribution import (
    NeuronRanking,
    NeuronScore,
    baseline_scores,
    bias_effect,
    cache_concept_pass,
    locate_bias_neurons,
    locate_concept_neurons,
    neuron_effect,
)
from .concept import ConceptCorpus, ConceptVector, concept_vector, example_representation
from .model import (
    AblationMask,
    LayerTrace,
    ModelConfig,
    ModelWeights,
    VocabDistribution,
    decompose_ffn,
    forward,
    next_token_distribution,
    project_to_vocab,
)
from .model_io import load_model, load_tokenizer, resolve_targets, synth_model

__version__ = "0.1.0"
