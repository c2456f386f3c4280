"""Retrieve-and-edit generation of scene sentences from concept sets."""

from .checkpoint import load_checkpoint, save_checkpoint
from .decoding import beam_search, generate
from .metrics import bleu, evaluate, missing_concepts, rouge_l, rouge_n
from .model import ModelConfig, ProtoEditModel, build_model, distance_annotate, encode_input
from .retrieval import PrototypeIndex, build_index, cooccurrence_histogram, retrieve
from .text import Vocabulary, build_vocab, concept_match, load_dataset, stem, tokenize
from .training import TrainConfig, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "PrototypeIndex",
    "ProtoEditModel",
    "TrainConfig",
    "Vocabulary",
    "beam_search",
    "bleu",
    "build_index",
    "build_model",
    "build_vocab",
    "concept_match",
    "cooccurrence_histogram",
    "distance_annotate",
    "encode_input",
    "evaluate",
    "generate",
    "gradcheck",
    "load_checkpoint",
    "load_dataset",
    "missing_concepts",
    "retrieve",
    "rouge_l",
    "rouge_n",
    "save_checkpoint",
    "stem",
    "tokenize",
    "train",
]
