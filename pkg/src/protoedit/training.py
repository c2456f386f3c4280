"""Losses, schedule, batching, the training loop and finite-difference gradient checks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import EncodedInput, EncoderOutput, ModelConfig, ProtoEditModel, encode_input
from .retrieval import PrototypeIndex, retrieve
from .text import EOS, BOS, PAD, TrainingInstance, Vocabulary, concept_match, matches_any

log = logging.getLogger(__name__)

HM1, HM2 = "hm1", "hm2"


class TrainingError(RuntimeError):
    pass


class GradcheckError(AssertionError):
    def __init__(self, message: str, report: dict[str, float]):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    loss_weight: float = 1.0
    label_smoothing: float = 0.1
    lr: float = 4e-5
    warmup: int = 500
    max_updates: int = 5000
    max_tokens: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hm1: bool = False
    hm2: bool = False
    sm0: bool = False

    def __post_init__(self):
        if self.hm1 and self.hm2:
            raise ValueError("hm1 and hm2 are mutually exclusive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.loss_weight < 0:
            raise ValueError("loss_weight must be >= 0")
        if self.warmup < 1 or self.max_updates < 0 or self.max_tokens < 1:
            raise ValueError("warmup and max_tokens must be >= 1, max_updates >= 0")

    @property
    def hard_mask(self) -> str | None:
        return HM1 if self.hm1 else HM2 if self.hm2 else None

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(model_config: ModelConfig, train_config: TrainConfig) -> None:
    if train_config.sm0 and not model_config.scaling_module:
        raise ValueError("sm0 requires the scaling module")


@dataclass(frozen=True)
class StepReport:
    step: int
    loss_decoder: float
    loss_encoder: float
    loss: float
    lr: float
    grad_norm: float
    tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# -- examples and batches -----------------------------------------------------


@dataclass
class Example:
    enc: EncodedInput
    target_ids: list[int]  # gold tokens, EOS appended
    membership: list[bool]  # encoder position concept-matches some target token
    target_tokens: list[str] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return len(self.enc) + len(self.target_ids)


def target_membership(source: Sequence[str], target: Sequence[str]) -> list[bool]:
    return [any(concept_match(t, s) for t in target) for s in source]


def attach_prototypes(
    instances: Sequence[TrainingInstance],
    index: PrototypeIndex,
    k: int = 1,
    exclude_target: bool = True,
) -> list[TrainingInstance]:
    """Fill missing prototypes with the top retrieved sentence (excluding the target itself)."""
    out = []
    for inst in instances:
        if inst.prototype:
            out.append(inst)
            continue
        hits = retrieve(index, inst.concepts, k=k, exclude=inst.target if exclude_target else None)
        out.append(replace(inst, prototype=hits[0].tokens if hits else []))
    return out


def make_example(inst: TrainingInstance, vocab: Vocabulary, config: ModelConfig) -> Example:
    enc = encode_input(inst.concepts, inst.prototype, vocab, config)
    target = list(inst.target)[: config.max_len - 1]
    return Example(
        enc=enc,
        target_ids=vocab.encode(target) + [EOS],
        membership=target_membership(enc.tokens, target),
        target_tokens=target,
    )


@dataclass
class Batch:
    ids: torch.Tensor
    groups: torch.Tensor
    distances: torch.Tensor
    key_mask: torch.Tensor
    membership: torch.Tensor
    prefix: torch.Tensor
    gold: torch.Tensor
    inputs: list[EncodedInput]

    @property
    def n_tokens(self) -> int:
        return int(self.key_mask.sum()) + int((self.gold != PAD).sum())


def collate(examples: Sequence[Example]) -> Batch:
    B = len(examples)
    n = max(len(e.enc) for e in examples)
    m = max(len(e.target_ids) for e in examples)
    ids = torch.full((B, n), PAD, dtype=torch.long)
    groups = torch.zeros((B, n), dtype=torch.long)
    distances = torch.zeros((B, n), dtype=torch.long)
    key_mask = torch.zeros((B, n), dtype=torch.bool)
    membership = torch.zeros((B, n), dtype=torch.bool)
    prefix = torch.full((B, m), PAD, dtype=torch.long)
    gold = torch.full((B, m), PAD, dtype=torch.long)
    for i, e in enumerate(examples):
        k = len(e.enc)
        ids[i, :k] = torch.tensor(e.enc.ids)
        groups[i, :k] = torch.tensor(e.enc.groups)
        distances[i, :k] = torch.tensor(e.enc.distances)
        key_mask[i, :k] = True
        membership[i, :k] = torch.tensor(e.membership)
        t = len(e.target_ids)
        prefix[i, :t] = torch.tensor([BOS] + e.target_ids[:-1])
        gold[i, :t] = torch.tensor(e.target_ids)
    return Batch(ids, groups, distances, key_mask, membership, prefix, gold, [e.enc for e in examples])


def make_batches(examples: Sequence[Example], max_tokens: int, order: Iterable[int]) -> list[list[int]]:
    """Greedy packing of examples (in ``order``) under a token budget."""
    batches, current, used = [], [], 0
    for i in order:
        n = examples[i].n_tokens
        if n > max_tokens:
            raise ValueError(f"example {i} has {n} tokens, above max_tokens={max_tokens}")
        if used + n > max_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(int(i))
        used += n
    if current:
        batches.append(current)
    return batches


# -- losses -------------------------------------------------------------------


def loss_encoder(
    gates: torch.Tensor, membership: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Binary cross-entropy of per-position mean gates against target membership.

    Summed over positions of each input, averaged over the batch. ``gates`` may
    be (n, d) for a single input or (B, n, d).
    """
    if gates.dim() == 2:
        gates, membership = gates.unsqueeze(0), membership.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if gates.shape[:2] != membership.shape:
        raise ValueError("gate rows must match the number of input positions")
    tiny = torch.finfo(gates.dtype).eps
    mean = gates.mean(-1).clamp(tiny, 1.0 - tiny)
    terms = torch.where(membership, torch.log(mean), torch.log1p(-mean))
    if mask is not None:
        terms = terms.masked_fill(~mask, 0.0)
    return -terms.sum(-1).mean()


def loss_decoder(
    logits: torch.Tensor, gold: torch.Tensor, label_smoothing: float = 0.1
) -> tuple[torch.Tensor, int]:
    """Label-smoothed token cross-entropy, mean over non-PAD positions.

    The target puts ``1 - eps`` on the gold id and ``eps / (V - 1)`` on every
    other id. Returns the loss and the number of scored tokens; with no scored
    tokens the loss is 0.
    """
    V = logits.shape[-1]
    if gold.numel() and int(gold.max()) >= V:
        raise ValueError(f"gold id {int(gold.max())} outside vocabulary of size {V}")
    keep = gold != PAD
    n = int(keep.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    logp = F.log_softmax(logits[keep], dim=-1)
    g = gold[keep]
    nll = -logp.gather(-1, g[:, None]).squeeze(-1)
    if label_smoothing:
        others = -(logp.sum(-1) + nll) / (V - 1)
        per_tok = (1.0 - label_smoothing) * nll + label_smoothing * others
    else:
        per_tok = nll
    return per_tok.mean(), n


def total_loss(ld, le, loss_weight: float, scaling_active: bool = True):
    """``ld + loss_weight * le``; the encoder term is dropped when the gates are unused or under sm0."""
    if not scaling_active or le is None:
        return ld
    return ld + loss_weight * le


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


def hard_mask_keep(enc: EncodedInput, variant: str | None) -> list[bool]:
    n_c = enc.n_concepts
    if variant is None:
        return [True] * len(enc)
    if variant == HM1:
        if n_c < 1:
            raise ValueError("hm1 needs at least one concept position")
        return [i < n_c for i in range(len(enc))]
    if variant == HM2:
        return [i < n_c or matches_any(t, enc.concepts) for i, t in enumerate(enc.tokens)]
    raise ValueError(f"unknown hard-mask variant {variant!r}")


def apply_hard_mask(
    enc_out: EncoderOutput, inputs: EncodedInput | Sequence[EncodedInput], variant: str | None
) -> EncoderOutput:
    """Remove prototype positions from cross-attention by narrowing the key mask."""
    if variant is None:
        return enc_out
    if isinstance(inputs, EncodedInput):
        inputs = [inputs]
    keep = torch.zeros_like(enc_out.key_mask)
    for i, enc in enumerate(inputs):
        row = hard_mask_keep(enc, variant)
        keep[i, : len(row)] = torch.tensor(row)
    return replace(enc_out, key_mask=enc_out.key_mask & keep)


# -- training -----------------------------------------------------------------


def compute_losses(model: ProtoEditModel, batch: Batch, config: TrainConfig):
    """Forward pass; returns (L_D, L_E or None, total, scored tokens)."""
    enc = model.encode(batch.ids, batch.groups, batch.distances, batch.key_mask)
    enc = apply_hard_mask(enc, batch.inputs, config.hard_mask)
    logits = model.decoder_forward(batch.prefix, enc)
    ld, ntok = loss_decoder(logits, batch.gold, config.label_smoothing)
    le = None
    if enc.gates is not None:
        le = loss_encoder(enc.gates, batch.membership, batch.key_mask)
    active = enc.gates is not None and not config.sm0
    return ld, le, total_loss(ld, le, config.loss_weight, active), ntok


class Trainer:
    def __init__(self, model: ProtoEditModel, config: TrainConfig):
        check_compatible(model.config, config)
        self.model = model
        self.config = config
        self.step = 0
        torch.manual_seed(config.seed)
        self.optimizer = torch.optim.Adam(
            model.parameters(),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.adam_eps,
        )

    def _diagnose(self, what: str) -> TrainingError:
        for name, p in self.model.named_parameters():
            if not torch.isfinite(p).all():
                return TrainingError(f"non-finite {what} at step {self.step}: parameter {name} is non-finite")
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                return TrainingError(f"non-finite {what} at step {self.step}: gradient of {name} is non-finite")
        return TrainingError(f"non-finite {what} at step {self.step}")

    def train_step(self, batch: Batch) -> StepReport:
        if batch.n_tokens > self.config.max_tokens:
            raise ValueError(f"batch has {batch.n_tokens} tokens, above max_tokens={self.config.max_tokens}")
        self.step += 1
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        ld, le, loss, ntok = compute_losses(self.model, batch, self.config)
        if not torch.isfinite(loss):
            raise self._diagnose("loss")
        loss.backward()
        grads = [p.grad for p in self.model.parameters() if p.grad is not None]
        gnorm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads))) if grads else 0.0
        if not math.isfinite(gnorm):
            raise self._diagnose("gradient")
        lr = lr_schedule(self.step, self.config.lr, self.config.warmup)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        return StepReport(
            step=self.step,
            loss_decoder=float(ld.detach()),
            loss_encoder=float(le.detach()) if le is not None else 0.0,
            loss=float(loss.detach()),
            lr=lr,
            grad_norm=gnorm,
            tokens=ntok,
        )


def train(
    model: ProtoEditModel,
    examples: Sequence[Example],
    config: TrainConfig,
    on_step: Callable[[StepReport], None] | None = None,
) -> list[StepReport]:
    """Run ``config.max_updates`` Adam steps over seeded shuffles of ``examples``."""
    if not examples:
        raise ValueError("no training examples")
    trainer = Trainer(model, config)
    rng = np.random.default_rng(config.seed)
    reports: list[StepReport] = []
    while trainer.step < config.max_updates:
        for idx in make_batches(examples, config.max_tokens, rng.permutation(len(examples))):
            report = trainer.train_step(collate([examples[i] for i in idx]))
            reports.append(report)
            if on_step is not None:
                on_step(report)
            if trainer.step >= config.max_updates:
                break
    model.eval()
    return reports


@torch.no_grad()
def mean_decoder_loss(
    model: ProtoEditModel, examples: Sequence[Example], config: TrainConfig, batch_size: int = 64
) -> float:
    """Token-weighted mean L_D over ``examples`` with dropout off."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        ld, _, _, n = compute_losses(model, collate(examples[start : start + batch_size]), config)
        total += float(ld) * n
        count += n
    model.train(was_training)
    return total / max(count, 1)


# -- gradient check -----------------------------------------------------------


def gradcheck(
    model: ProtoEditModel,
    batch: Batch,
    config: TrainConfig,
    arrays: Sequence[str] | None = None,
    tolerance: float = 1e-4,
    n_coords: int = 50,
    h: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Compare autograd gradients of the total loss with central differences.

    Returns the maximum relative error ``|a - n| / max(|a|, |n|, 1e-8)`` per
    array; raises ``GradcheckError`` naming every coordinate above ``tolerance``.
    """
    params = dict(model.named_parameters())
    if any(p.dtype != torch.float64 for p in params.values()):
        raise ValueError("gradcheck needs a float64 model")
    names = list(arrays) if arrays is not None else list(params)
    model.eval()

    def loss_value() -> torch.Tensor:
        return compute_losses(model, batch, config)[2]

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    failures = []
    with torch.no_grad():
        for name in names:
            p = params[name]
            flat = p.view(-1)
            grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            worst = 0.0
            for c in np.sort(coords):
                orig = float(flat[c])
                flat[c] = orig + h
                up = float(loss_value())
                flat[c] = orig - h
                down = float(loss_value())
                flat[c] = orig
                numeric = (up - down) / (2 * h)
                analytic = float(grad[c])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, err)
                if err > tolerance:
                    index = tuple(int(i) for i in np.unravel_index(c, tuple(p.shape)))
                    failures.append(f"{name}{list(index)}: analytic={analytic:.6g} numeric={numeric:.6g}")
            report[name] = worst
    if failures:
        raise GradcheckError("gradient check failed: " + "; ".join(failures), report)
    return report
