"""Exemplar-augmented conditional Wasserstein auto-encoder for dialogue
response generation: Gaussian-mixture posterior over retrieved exemplars,
three-phase curriculum training, and the automatic evaluation stack."""

__version__ = "0.1.0"

from .corpus import (Utterance, ContextResponsePair, Vocabulary,
                     SyntheticTaskSpec, tokenize, detokenize, normalize,
                     load_jsonl, save_jsonl, build_vocabulary,
                     generate_synthetic)
from .retrieval import Bm25Index, ExemplarSet, build_index, retrieve
from .seq_model import ModelConfig
from .model import ExemplarWae
from .curriculum import CurriculumSchedule, Trainer, TrainState
from .metrics import (SampleSet, MetricReport, sentence_bleu, bleu_prf,
                      bow_scores, distinct, evaluate_sample_sets)

__all__ = [
    "Utterance", "ContextResponsePair", "Vocabulary", "SyntheticTaskSpec",
    "tokenize", "detokenize", "normalize", "load_jsonl", "save_jsonl",
    "build_vocabulary", "generate_synthetic", "Bm25Index", "ExemplarSet",
    "build_index", "retrieve", "ModelConfig", "ExemplarWae",
    "CurriculumSchedule", "Trainer", "TrainState", "SampleSet", "MetricReport",
    "sentence_bleu", "bleu_prf", "bow_scores", "distinct",
    "evaluate_sample_sets",
]
