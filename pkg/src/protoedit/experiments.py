"""Desk-scale ablation runs on the bundled toy corpus."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import torch

from .model import ModelConfig, build_model
from .retrieval import build_index
from .text import build_vocab
from .toydata import bundled_corpus, bundled_dataset
from .training import TrainConfig, attach_prototypes, make_example, mean_decoder_loss, train

# name -> (group_embedding, scaling_module, position_indicator, train overrides)
VARIANTS = {
    "none": (False, False, False, {}),
    "ge": (True, False, False, {}),
    "ge+sm": (True, True, False, {}),
    "ge+sm+ppi": (True, True, True, {}),
    "ge+sm0": (True, True, False, {"sm0": True}),
    "ge+hm1": (True, False, False, {"hm1": True}),
    "ge+hm2": (True, False, False, {"hm2": True}),
}

# from-scratch training needs a larger step than fine-tuning a pretrained model
ABLATION_TRAIN = TrainConfig(lr=1e-3, warmup=100, max_updates=2000)


@dataclass
class RunResult:
    variant: str
    seed: int
    final_loss: float
    seconds: float


def toy_examples():
    index = build_index(bundled_corpus())
    instances = attach_prototypes(bundled_dataset(), index)
    vocab = build_vocab([i.target for i in instances] + [i.prototype for i in instances]
                        + [i.concepts for i in instances])
    return vocab, instances


def run_variant(variant: str, seed: int, train_config: TrainConfig = ABLATION_TRAIN) -> RunResult:
    """Train one variant on the toy corpus; the result is the mean training L_D after training."""
    ge, sm, ppi, overrides = VARIANTS[variant]
    vocab, instances = toy_examples()
    config = ModelConfig(len(vocab), group_embedding=ge, scaling_module=sm, position_indicator=ppi)
    examples = [make_example(i, vocab, config) for i in instances]
    tc = replace(train_config, seed=seed, **overrides)
    model = build_model(config, seed)
    start = time.perf_counter()
    train(model, examples, tc)
    return RunResult(variant, seed, mean_decoder_loss(model, examples, tc), time.perf_counter() - start)


def run_ablation(variants, seeds=(0, 1, 2), train_config: TrainConfig = ABLATION_TRAIN,
                 progress=None) -> dict[str, list[RunResult]]:
    torch.set_num_threads(1)
    out: dict[str, list[RunResult]] = {}
    for v in variants:
        for s in seeds:
            r = run_variant(v, s, train_config)
            out.setdefault(v, []).append(r)
            if progress:
                progress(r)
    return out


def gradcheck_setup(name: str = "tiny", seed: int = 0, n_instances: int = 2):
    """A float64 model plus a small batch from the toy corpus for ``gradcheck``.

    Weights use a larger init std than training so every array has gradients
    well above finite-difference noise.
    """
    from .model import TINY_CONFIG
    from .training import collate

    vocab, instances = toy_examples()
    sizes = TINY_CONFIG if name == "tiny" else {}
    if name not in ("tiny", "desk"):
        raise ValueError(f"unknown gradcheck config {name!r} (expected tiny or desk)")
    config = ModelConfig(len(vocab), dropout=0.0, init_std=0.2, init_std_new=0.2, **sizes)
    model = build_model(config, seed).double()
    batch = collate([make_example(i, vocab, config) for i in instances[:n_instances]])
    return model, batch, TrainConfig(seed=seed)


@dataclass
class OverfitResult:
    mean_loss: float
    exact: int
    total: int
    missing_histogram: dict[int, int]
    seconds: float


# no smoothing (its floor sits far above 0.05) and no dropout, so memorisation is reachable
OVERFIT_TRAIN = TrainConfig(lr=1e-3, warmup=100, max_updates=2000, label_smoothing=0.0)


def run_overfit(n: int = 32, seed: int = 0, train_config: TrainConfig = OVERFIT_TRAIN,
                beam_size: int = 5) -> OverfitResult:
    """Train the desk model on ``n`` instances and try to reproduce every target."""
    from collections import Counter

    from .decoding import beam_search
    from .metrics import missing_concepts
    from .toydata import overfit_instances

    torch.set_num_threads(1)
    instances = overfit_instances(n)
    vocab = build_vocab([i.target for i in instances] + [i.prototype for i in instances]
                        + [i.concepts for i in instances])
    config = ModelConfig(len(vocab), dropout=0.0)
    examples = [make_example(i, vocab, config) for i in instances]
    tc = replace(train_config, seed=seed)
    model = build_model(config, seed)
    start = time.perf_counter()
    train(model, examples, tc)
    loss = mean_decoder_loss(model, examples, tc)
    exact, hist = 0, Counter()
    for inst in instances:
        out = beam_search(model, vocab, inst.concepts, inst.prototype, beam_size=beam_size,
                          max_len=min(32, config.max_len - 1))
        exact += out == inst.target
        hist[missing_concepts(out, inst.concepts)] += 1
    return OverfitResult(loss, exact, len(instances), dict(sorted(hist.items())),
                         time.perf_counter() - start)
