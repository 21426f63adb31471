"""Attribute-controlled adversarial text generation and evaluation."""

from .attack import AttackResult, generate_attack, search_attribute
from .baseline import SubstitutionConfig, substitution_attack
from .classifiers import (ConvTextClassifier, RecurrentTextClassifier, TrainConfig,
                          train_classifier)
from .config import ExperimentConfig
from .corpus import Dataset, Example, SyntheticSpec, Vocab, build_vocab, generate_synthetic
from .evaluation import bleu4, corpus_bleu4, perplexity, train_lm
from .genmodel import (Generator, GeneratorConfig, GumbelConfig, StageConfig,
                       decode_soft, harden, pretrain, train_attribute_stage)

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "ConvTextClassifier", "Dataset", "Example", "ExperimentConfig",
    "Generator", "GeneratorConfig", "GumbelConfig", "RecurrentTextClassifier",
    "StageConfig", "SubstitutionConfig", "SyntheticSpec", "TrainConfig", "Vocab",
    "bleu4", "build_vocab", "corpus_bleu4", "decode_soft", "generate_attack",
    "generate_synthetic", "harden", "perplexity", "pretrain", "search_attribute",
    "substitution_attack", "train_attribute_stage", "train_classifier", "train_lm",
]
