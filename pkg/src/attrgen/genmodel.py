"""Controlled text generator.

An encoder reads the input sentence into a fixed vector z, a one-layer MLP
projects the one-hot attribute into a dense code c, and a GRU decoder
conditioned on [z; c] rewrites the sentence. Stage 1 trains the whole model
to copy its input with teacher forcing; stage 2 freezes the encoder and a
pre-trained attribute classifier and pushes the decoder, via gumbel-softmax
relaxed outputs, to realize a different attribute while still reconstructing
the input content.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classifiers import validate_soft_rows
from .corpus import BOS_ID, EOS_ID, PAD_ID, Dataset
from .utils import derive_seed

GEN_CHECKPOINT_VERSION = 1


@dataclass
class GeneratorConfig:
    vocab_size: int
    num_attributes: int
    embed_dim: int = 64
    hidden_dim: int = 256
    code_dim: int = 256
    max_decode_len: int = 30


@dataclass
class GumbelConfig:
    """Temperature schedule and noise seeding for relaxed decoding.

    noise_seed None means zero noise (deterministic softmax relaxation).
    """
    tau0: float = 1.0
    tau_min: float = 0.1
    anneal_rate: float = 1e-3
    noise_seed: int | None = 0

    def validate(self) -> None:
        if not (self.tau0 >= self.tau_min > 0):
            raise ValueError("need tau0 >= tau_min > 0")
        if self.anneal_rate < 0:
            raise ValueError("anneal_rate must be non-negative")


@dataclass
class StageConfig:
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    clip_norm: float = 5.0
    # stage-2 knobs
    attr_weight: float = 1.0
    # experimental extrapolation: also push generations to raise the task
    # classifier's loss during stage 2 (off by default; attack search alone
    # is the supported mechanism)
    task_attack_weight: float = 0.0


@dataclass
class SoftSentence:
    """Row-stochastic T x V matrix of per-step vocabulary distributions."""
    probs: torch.Tensor
    eos_position: int | None = None

    def __len__(self) -> int:
        return self.probs.size(0)


def anneal_temperature(config: GumbelConfig, step: int) -> float:
    """tau(step) = max(tau_min, tau0 * exp(-rate * step)); non-increasing."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(config.tau_min, config.tau0 * math.exp(-config.anneal_rate * step))


def sample_gumbel(shape, generator: torch.Generator | None = None,
                  eps: float = 1e-20, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + eps) + eps)


def gumbel_softmax(logits: torch.Tensor, tau: float,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Softmax relaxation of categorical sampling; generator None = no noise."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if generator is not None:
        logits = logits + sample_gumbel(logits.shape, generator, dtype=logits.dtype)
    return F.softmax(logits / tau, dim=-1)


class Encoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.rnn = nn.GRU(embed_dim, hidden_dim, batch_first=True)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(self.embedding(ids))
        idx = (lengths - 1).clamp(min=0)
        return out[torch.arange(out.size(0)), idx]


class AttributeProjector(nn.Module):
    """One-layer MLP from one-hot attribute to a dense code."""

    def __init__(self, num_attributes: int, code_dim: int):
        super().__init__()
        self.num_attributes = num_attributes
        self.map = nn.Linear(num_attributes, code_dim)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.map(one_hot))

    def code_for(self, attributes: torch.Tensor) -> torch.Tensor:
        one_hot = F.one_hot(attributes, num_classes=self.num_attributes)
        return self(one_hot.to(self.map.weight.dtype))


class Decoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, enc_dim: int,
                 code_dim: int, hidden_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.init_map = nn.Linear(enc_dim + code_dim, hidden_dim)
        self.rnn = nn.GRU(embed_dim, hidden_dim, batch_first=True)
        self.out = nn.Linear(hidden_dim, vocab_size)

    def initial_state(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.init_map(torch.cat([z, c], dim=-1)))

    def teacher_logits(self, z: torch.Tensor, c: torch.Tensor,
                       teacher_ids: torch.Tensor) -> torch.Tensor:
        h0 = self.initial_state(z, c).unsqueeze(0)
        out, _ = self.rnn(self.embedding(teacher_ids), h0)
        return self.out(out)

    def step(self, embedded: torch.Tensor, hidden: torch.Tensor):
        out, hidden = self.rnn(embedded.unsqueeze(1), hidden)
        return self.out(out.squeeze(1)), hidden


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.vocab_size, config.embed_dim, config.hidden_dim)
        self.projector = AttributeProjector(config.num_attributes, config.code_dim)
        self.decoder = Decoder(config.vocab_size, config.embed_dim,
                               config.hidden_dim, config.code_dim, config.hidden_dim)


def encode(gen: Generator, token_ids) -> torch.Tensor:
    """Final encoder state for one id sequence."""
    ids = list(token_ids)
    if not ids:
        raise ValueError("cannot encode an empty sequence")
    with torch.no_grad():
        batch = torch.tensor([ids], dtype=torch.long)
        lengths = torch.tensor([len(ids)])
        return gen.encoder(batch, lengths)[0]


def project_attribute(gen: Generator, attribute: int) -> torch.Tensor:
    """Dense code for one attribute id (same projector for source and target)."""
    k = gen.config.num_attributes
    if not 0 <= attribute < k:
        raise ValueError(f"attribute {attribute} out of range for K={k}")
    with torch.no_grad():
        return gen.projector.code_for(torch.tensor([attribute]))[0]


def reconstruction_loss(gen: Generator, z: torch.Tensor, c: torch.Tensor,
                        target_ids) -> torch.Tensor:
    """Teacher-forced negative log-likelihood, summed over steps.

    Differentiable with respect to encoder, decoder and projector parameters
    when z and c carry gradients.
    """
    targets = list(target_ids)
    if not targets:
        raise ValueError("empty target sequence")
    teacher = torch.tensor([[BOS_ID] + targets[:-1]], dtype=torch.long)
    logits = gen.decoder.teacher_logits(z.unsqueeze(0), c.unsqueeze(0), teacher)[0]
    return F.cross_entropy(logits, torch.tensor(targets, dtype=torch.long), reduction="sum")


def decode_soft(gen: Generator, z: torch.Tensor, c: torch.Tensor, tau: float,
                max_decode_len: int | None = None, noise_seed: int | None = None,
                stop_at_eos: bool = True, num_steps: int | None = None) -> SoftSentence:
    """Autoregressive relaxed decode: each step emits a gumbel-softmax row and
    feeds its expected embedding forward. Stops at the first EOS argmax (row
    included) unless stop_at_eos is False."""
    limit = num_steps if num_steps is not None else (
        max_decode_len if max_decode_len is not None else gen.config.max_decode_len)
    hidden = gen.decoder.initial_state(z.unsqueeze(0), c.unsqueeze(0)).unsqueeze(0)
    bos = torch.tensor([BOS_ID])
    x = gen.decoder.embedding(bos)
    rows = []
    eos_position = None
    for step in range(limit):
        logits, hidden = gen.decoder.step(x, hidden)
        generator = None
        if noise_seed is not None:
            generator = torch.Generator().manual_seed(derive_seed(noise_seed, step))
        row = gumbel_softmax(logits, tau, generator)
        rows.append(row[0])
        if stop_at_eos and int(np.argmax(row[0].detach().numpy())) == EOS_ID:
            eos_position = step
            break
        x = row @ gen.decoder.embedding.weight
    return SoftSentence(probs=torch.stack(rows), eos_position=eos_position)


def decode_soft_batch(gen: Generator, z: torch.Tensor, c: torch.Tensor, tau: float,
                      num_steps: int, noise_key: int | None = None) -> torch.Tensor:
    """Batched relaxed decode for training; fixed step count, no EOS stop.

    Noise is seeded per (noise_key, step) so batches are reproducible.
    """
    hidden = gen.decoder.initial_state(z, c).unsqueeze(0)
    bos = torch.full((z.size(0),), BOS_ID, dtype=torch.long)
    x = gen.decoder.embedding(bos)
    rows = []
    for step in range(num_steps):
        logits, hidden = gen.decoder.step(x, hidden)
        generator = None
        if noise_key is not None:
            generator = torch.Generator().manual_seed(derive_seed(noise_key, step))
        row = gumbel_softmax(logits, tau, generator)
        rows.append(row)
        x = row @ gen.decoder.embedding.weight
    return torch.stack(rows, dim=1)


def attribute_loss(attr_classifier, soft_sentence: SoftSentence | torch.Tensor,
                   target_attribute: int) -> torch.Tensor:
    """Negative log-probability of the target attribute under the (frozen)
    attribute classifier applied to relaxed decoder output."""
    if any(p.requires_grad for p in attr_classifier.parameters()):
        raise ValueError("attribute classifier must be frozen (requires_grad=False)")
    probs = soft_sentence.probs if isinstance(soft_sentence, SoftSentence) else soft_sentence
    validate_soft_rows(probs.detach())
    log_probs = attr_classifier.log_probs_soft(probs.unsqueeze(0))[0]
    return -log_probs[target_attribute]


def harden(soft_sentence: SoftSentence | torch.Tensor) -> list[int]:
    """Per-row argmax ids, truncated at the first EOS; ties take the lowest id."""
    probs = soft_sentence.probs if isinstance(soft_sentence, SoftSentence) else soft_sentence
    rows = probs.detach().cpu().numpy()
    ids = []
    for row in rows:
        idx = int(np.argmax(row))
        if idx == EOS_ID:
            break
        ids.append(idx)
    return ids


def greedy_decode(gen: Generator, token_ids, attribute: int,
                  max_decode_len: int | None = None) -> list[int]:
    """Plain argmax decoding with hard token feedback (evaluation only)."""
    limit = max_decode_len if max_decode_len is not None else gen.config.max_decode_len
    with torch.no_grad():
        z = encode(gen, token_ids)
        c = project_attribute(gen, attribute)
        hidden = gen.decoder.initial_state(z.unsqueeze(0), c.unsqueeze(0)).unsqueeze(0)
        prev = torch.tensor([BOS_ID])
        out_ids = []
        for _ in range(limit):
            logits, hidden = gen.decoder.step(gen.decoder.embedding(prev), hidden)
            idx = int(np.argmax(logits[0].numpy()))
            if idx == EOS_ID:
                break
            out_ids.append(idx)
            prev = torch.tensor([idx])
    return out_ids


def _batch_tensors(batch, max_len_cap: int | None = None):
    """Teacher-forcing tensors for a list of Examples.

    Targets are tokens + EOS, PAD-padded; teacher inputs are BOS-shifted.
    """
    targets = [ex.tokens + [EOS_ID] for ex in batch]
    width = max(len(t) for t in targets)
    if max_len_cap is not None:
        width = min(width, max_len_cap)
    tgt = torch.full((len(batch), width), PAD_ID, dtype=torch.long)
    teach = torch.full((len(batch), width), PAD_ID, dtype=torch.long)
    for i, seq in enumerate(targets):
        seq = seq[:width]
        tgt[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        shifted = [BOS_ID] + seq[:-1]
        teach[i, :len(shifted)] = torch.tensor(shifted, dtype=torch.long)
    src = torch.full((len(batch), max(len(ex.tokens) for ex in batch)), PAD_ID, dtype=torch.long)
    for i, ex in enumerate(batch):
        src[i, :len(ex.tokens)] = torch.tensor(ex.tokens, dtype=torch.long)
    lengths = torch.tensor([len(ex.tokens) for ex in batch])
    attrs = torch.tensor([ex.attribute for ex in batch], dtype=torch.long)
    return src, lengths, teach, tgt, attrs


def _teacher_nll(gen: Generator, src, lengths, teach, tgt, codes) -> torch.Tensor:
    z = gen.encoder(src, lengths)
    logits = gen.decoder.teacher_logits(z, codes, teach)
    return F.cross_entropy(logits.reshape(-1, logits.size(-1)), tgt.reshape(-1),
                           ignore_index=PAD_ID)


def reconstruction_token_accuracy(gen: Generator, dataset: Dataset,
                                  batch_size: int = 128) -> float:
    """Teacher-forced next-token accuracy over non-pad target positions."""
    was_training = gen.training
    gen.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.examples[start:start + batch_size]
            src, lengths, teach, tgt, attrs = _batch_tensors(batch)
            codes = gen.projector.code_for(attrs)
            z = gen.encoder(src, lengths)
            logits = gen.decoder.teacher_logits(z, codes, teach)
            pred = logits.argmax(dim=-1)
            mask = tgt != PAD_ID
            correct += int((pred[mask] == tgt[mask]).sum())
            total += int(mask.sum())
    gen.train(was_training)
    return correct / max(1, total)


def pretrain(gen: Generator, dataset: Dataset, config: StageConfig,
             dev_dataset: Dataset | None = None) -> dict:
    """Stage 1: teacher-forced copy training of encoder, decoder and projector."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(gen.parameters(), lr=config.lr)
    rng = random.Random(config.seed)
    order = list(range(len(dataset)))
    dev = dev_dataset if dev_dataset is not None else dataset
    metrics = {"train_loss": [], "dev_token_accuracy": []}
    for _ in range(config.epochs):
        gen.train()
        rng.shuffle(order)
        total = 0.0
        n = 0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            src, lengths, teach, tgt, attrs = _batch_tensors(batch)
            codes = gen.projector.code_for(attrs)
            loss = _teacher_nll(gen, src, lengths, teach, tgt, codes)
            if not torch.isfinite(loss):
                raise RuntimeError("pretraining diverged: non-finite loss")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(gen.parameters(), config.clip_norm)
            optimizer.step()
            total += loss.item()
            n += 1
        metrics["train_loss"].append(total / max(1, n))
        metrics["dev_token_accuracy"].append(reconstruction_token_accuracy(gen, dev))
    gen.eval()
    metrics["final_dev_token_accuracy"] = reconstruction_token_accuracy(gen, dev)
    return metrics


def train_attribute_stage(gen: Generator, attr_classifier, dataset: Dataset,
                          gumbel: GumbelConfig, config: StageConfig,
                          dev_dataset: Dataset | None = None,
                          task_classifier=None) -> dict:
    """Stage 2: update decoder and projector so relaxed generations carry a new
    attribute, keeping a reconstruction term so content survives.

    The encoder and the attribute classifier are frozen; the temperature
    anneals per optimizer step. If config.task_attack_weight > 0 and a task
    classifier is given, generations are additionally pushed to raise the task
    loss (experimental extrapolation, disabled by default).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    gumbel.validate()
    k = gen.config.num_attributes
    if k < 2:
        raise ValueError("attribute transfer needs at least two attributes")
    torch.manual_seed(config.seed)
    for p in gen.encoder.parameters():
        p.requires_grad_(False)
    for p in attr_classifier.parameters():
        p.requires_grad_(False)
    attr_classifier.eval()
    if task_classifier is not None:
        for p in task_classifier.parameters():
            p.requires_grad_(False)
        task_classifier.eval()
    params = list(gen.decoder.parameters()) + list(gen.projector.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    rng = random.Random(config.seed)
    aprime_rng = random.Random(derive_seed(config.seed, "aprime"))
    order = list(range(len(dataset)))
    dev = dev_dataset if dev_dataset is not None else dataset
    metrics = {"train_loss": [], "attr_loss": [], "recon_loss": [],
               "dev_token_accuracy": [], "tau": []}
    step = 0
    for _ in range(config.epochs):
        gen.train()
        rng.shuffle(order)
        sums = {"total": 0.0, "attr": 0.0, "recon": 0.0}
        n = 0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            src, lengths, teach, tgt, attrs = _batch_tensors(batch)
            new_attrs = torch.tensor(
                [_draw_other(aprime_rng, int(a), k) for a in attrs], dtype=torch.long)
            tau = anneal_temperature(gumbel, step)
            z = gen.encoder(src, lengths)
            codes_orig = gen.projector.code_for(attrs)
            codes_new = gen.projector.code_for(new_attrs)
            num_steps = min(gen.config.max_decode_len, tgt.size(1))
            noise_key = None if gumbel.noise_seed is None else derive_seed(gumbel.noise_seed, step)
            soft = decode_soft_batch(gen, z, codes_new, tau, num_steps, noise_key)
            attr_log_probs = attr_classifier.log_probs_soft(soft)
            attr_nll = -attr_log_probs[torch.arange(len(batch)), new_attrs].mean()
            recon = _teacher_nll(gen, src, lengths, teach, tgt, codes_orig)
            loss = config.attr_weight * attr_nll + recon
            if config.task_attack_weight > 0 and task_classifier is not None:
                labels = torch.tensor([ex.label for ex in batch], dtype=torch.long)
                task_log_probs = task_classifier.log_probs_soft(soft)
                # minimizing the true-label log-probability maximizes task loss
                loss = loss + config.task_attack_weight * task_log_probs[
                    torch.arange(len(batch)), labels].mean()
            if not torch.isfinite(loss):
                raise RuntimeError("attribute stage diverged: non-finite loss")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, config.clip_norm)
            optimizer.step()
            sums["total"] += loss.item()
            sums["attr"] += attr_nll.item()
            sums["recon"] += recon.item()
            n += 1
            step += 1
        metrics["train_loss"].append(sums["total"] / max(1, n))
        metrics["attr_loss"].append(sums["attr"] / max(1, n))
        metrics["recon_loss"].append(sums["recon"] / max(1, n))
        metrics["tau"].append(anneal_temperature(gumbel, step))
        metrics["dev_token_accuracy"].append(reconstruction_token_accuracy(gen, dev))
    gen.eval()
    metrics["final_dev_token_accuracy"] = reconstruction_token_accuracy(gen, dev)
    return metrics


def _draw_other(rng: random.Random, attribute: int, k: int) -> int:
    pick = rng.randrange(k - 1)
    return pick if pick < attribute else pick + 1


def attribute_transfer_rate(gen: Generator, attr_classifier, dataset: Dataset,
                            tau: float, max_examples: int | None = None) -> float:
    """Fraction of (example, target attribute) pairs whose hardened zero-noise
    generation is classified as the target by the given attribute classifier."""
    from .classifiers import predict

    examples = dataset.examples if max_examples is None else dataset.examples[:max_examples]
    if not examples:
        raise ValueError("empty dataset")
    hits = 0
    total = 0
    with torch.no_grad():
        for ex in examples:
            z = encode(gen, ex.tokens)
            for target in range(gen.config.num_attributes):
                if target == ex.attribute:
                    continue
                c = project_attribute(gen, target)
                soft = decode_soft(gen, z, c, tau, noise_seed=None)
                ids = harden(soft)
                if not ids:
                    continue
                total += 1
                if predict(attr_classifier, ids) == target:
                    hits += 1
    return hits / max(1, total)


def save_generator(gen: Generator, path, stage: int, meta: dict | None = None) -> None:
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    torch.save({
        "format_version": GEN_CHECKPOINT_VERSION,
        "stage": stage,
        "config": {
            "vocab_size": gen.config.vocab_size,
            "num_attributes": gen.config.num_attributes,
            "embed_dim": gen.config.embed_dim,
            "hidden_dim": gen.config.hidden_dim,
            "code_dim": gen.config.code_dim,
            "max_decode_len": gen.config.max_decode_len,
        },
        "state": gen.state_dict(),
        "meta": meta or {},
    }, path)


def load_generator(path, expected_stage: int | None = None,
                   expected_vocab_size: int | None = None) -> tuple[Generator, int]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != GEN_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    stage = payload["stage"]
    if expected_stage is not None and stage != expected_stage:
        raise ValueError(f"checkpoint is stage {stage}, expected stage {expected_stage}")
    cfg = GeneratorConfig(**payload["config"])
    if expected_vocab_size is not None and cfg.vocab_size != expected_vocab_size:
        raise ValueError(f"checkpoint vocab size {cfg.vocab_size} != expected {expected_vocab_size}")
    gen = Generator(cfg)
    gen.load_state_dict(payload["state"])
    gen.eval()
    return gen, stage
