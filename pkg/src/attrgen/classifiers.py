"""Text classifiers: a convolutional model (used for both the attribute and the
task classifier) and a recurrent variant for architecture-change experiments.

Both expose a soft input path that consumes per-step probability distributions
over the vocabulary instead of token ids, so gradients can flow back through a
relaxed decoder. The soft embedding of a one-hot row equals the hard embedding
lookup exactly, which keeps the two paths consistent.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD_ID, Dataset

CHECKPOINT_VERSION = 1

SOFT_ROW_TOL = 1e-5


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    dropout: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class ConvTextClassifier(nn.Module):
    """wordCNN: parallel convolutions over embeddings, max-over-time pooling,
    dropout on the pooled sentence embedding, single dense output layer."""

    arch = "conv"

    def __init__(self, vocab_size: int, num_classes: int, embed_dim: int = 64,
                 filter_widths=(3, 4, 5), num_filters: int = 32, dropout: float = 0.5):
        super().__init__()
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.filter_widths = tuple(filter_widths)
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.convs = nn.ModuleList(
            nn.Conv1d(embed_dim, num_filters, w) for w in self.filter_widths
        )
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(num_filters * len(self.filter_widths), num_classes)

    @property
    def min_len(self) -> int:
        return max(self.filter_widths)

    def _classify_embedded(self, embedded: torch.Tensor) -> torch.Tensor:
        # embedded: B x T x E with T >= max filter width
        x = embedded.transpose(1, 2)
        pooled = [conv(x).relu().max(dim=2).values for conv in self.convs]
        sentence = self.dropout(torch.cat(pooled, dim=1))
        return F.log_softmax(self.fc(sentence), dim=-1)

    def log_probs_hard(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """ids: B x T long tensor, PAD-padded; returns B x C log-probabilities.

        lengths is accepted for interface parity with the recurrent model;
        max-over-time pooling needs no masking here.
        """
        if ids.size(1) < self.min_len:
            pad = ids.new_full((ids.size(0), self.min_len - ids.size(1)), PAD_ID)
            ids = torch.cat([ids, pad], dim=1)
        return self._classify_embedded(self.embedding(ids))

    def log_probs_soft(self, probs: torch.Tensor) -> torch.Tensor:
        """probs: B x T x V row-stochastic tensor; differentiable in probs."""
        if probs.size(1) < self.min_len:
            pad_row = probs.new_zeros((probs.size(0), self.min_len - probs.size(1), probs.size(2)))
            pad_row[:, :, PAD_ID] = 1.0
            probs = torch.cat([probs, pad_row], dim=1)
        embedded = probs @ self.embedding.weight
        return self._classify_embedded(embedded)


class RecurrentTextClassifier(nn.Module):
    """Single-layer LSTM classifier, final-state readout."""

    arch = "recurrent"

    def __init__(self, vocab_size: int, num_classes: int, embed_dim: int = 64,
                 hidden_dim: int = 128, dropout: float = 0.5):
        super().__init__()
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.rnn = nn.LSTM(embed_dim, hidden_dim, batch_first=True)
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(hidden_dim, num_classes)

    @property
    def min_len(self) -> int:
        return 1

    def _classify_embedded(self, embedded: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        out, _ = self.rnn(embedded)
        if lengths is None:
            final = out[:, -1]
        else:
            idx = (lengths - 1).clamp(min=0)
            final = out[torch.arange(out.size(0)), idx]
        return F.log_softmax(self.fc(self.dropout(final)), dim=-1)

    def log_probs_hard(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Reads the state at lengths-1 when lengths is given (padded batches),
        else at the final step; matches log_probs_soft on unpadded input."""
        return self._classify_embedded(self.embedding(ids), lengths)

    def log_probs_soft(self, probs: torch.Tensor) -> torch.Tensor:
        embedded = probs @ self.embedding.weight
        return self._classify_embedded(embedded)


def _check_ids(model, token_ids) -> torch.Tensor:
    ids = list(token_ids)
    if len(ids) == 0:
        raise ValueError("empty token sequence")
    if any(not 0 <= i < model.vocab_size for i in ids):
        raise ValueError(f"token id out of range for vocab of size {model.vocab_size}")
    return torch.tensor([ids], dtype=torch.long)


def forward_hard(model, token_ids) -> np.ndarray:
    """Class log-probabilities for one id sequence (evaluation mode)."""
    ids = _check_ids(model, token_ids)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model.log_probs_hard(ids)[0]
    finally:
        model.train(was_training)
    return out.detach().cpu().numpy()


def validate_soft_rows(probs: torch.Tensor, tol: float = SOFT_ROW_TOL) -> None:
    if probs.dim() != 2:
        raise ValueError("soft sentence must be a T x V matrix")
    if probs.size(0) == 0:
        raise ValueError("empty soft sentence")
    if (probs < -tol).any():
        raise ValueError("soft sentence has negative entries")
    sums = probs.sum(dim=1)
    if (sums - 1.0).abs().max().item() > tol:
        raise ValueError("soft sentence rows must each sum to 1")


def forward_soft(model, soft_sentence) -> np.ndarray:
    """Class log-probabilities for one T x V soft sentence (evaluation mode).

    For gradient work call model.log_probs_soft directly; this wrapper
    validates rows and returns numpy.
    """
    probs = soft_sentence if isinstance(soft_sentence, torch.Tensor) else torch.as_tensor(
        np.asarray(soft_sentence), dtype=torch.float32)
    validate_soft_rows(probs)
    if probs.size(1) != model.vocab_size:
        raise ValueError("soft sentence width does not match vocab size")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model.log_probs_soft(probs.unsqueeze(0))[0]
    finally:
        model.train(was_training)
    return out.detach().cpu().numpy()


def predict(model, token_ids) -> int:
    """Most probable class; ties break toward the lowest class id."""
    return int(np.argmax(forward_hard(model, token_ids)))


def accuracy(model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = sum(1 for ex in dataset if predict(model, ex.tokens) == ex.label)
    return correct / len(dataset)


def _pad_batch(token_lists, min_len: int) -> torch.Tensor:
    width = max(min_len, max(len(t) for t in token_lists))
    out = torch.full((len(token_lists), width), PAD_ID, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        out[i, :len(toks)] = torch.tensor(toks, dtype=torch.long)
    return out


def build_classifier(architecture: str, vocab_size: int, num_classes: int,
                     embed_dim: int = 64, num_filters: int = 32,
                     hidden_dim: int = 128, dropout: float = 0.5):
    if architecture == "conv":
        return ConvTextClassifier(vocab_size, num_classes, embed_dim=embed_dim,
                                  num_filters=num_filters, dropout=dropout)
    if architecture == "recurrent":
        return RecurrentTextClassifier(vocab_size, num_classes, embed_dim=embed_dim,
                                       hidden_dim=hidden_dim, dropout=dropout)
    raise ValueError(f"unknown architecture {architecture!r}")


def train_classifier(dataset: Dataset, config: TrainConfig, architecture: str = "conv",
                     target: str = "label", dev_dataset: Dataset | None = None,
                     embed_dim: int = 64, num_filters: int = 32, hidden_dim: int = 128):
    """SGD-with-momentum training; deterministic under config.seed.

    target selects what the classifier predicts: "label" (task) or
    "attribute". Returns (model, metrics) where metrics carries per-epoch
    train loss and dev accuracy.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.vocab is None:
        raise ValueError("dataset has no vocab attached")
    if target not in ("label", "attribute"):
        raise ValueError(f"unknown target {target!r}")
    num_classes = dataset.num_labels if target == "label" else dataset.num_attributes
    torch.manual_seed(config.seed)
    model = build_classifier(architecture, len(dataset.vocab), num_classes,
                             embed_dim=embed_dim, num_filters=num_filters,
                             hidden_dim=hidden_dim, dropout=config.dropout)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    dev = dev_dataset if dev_dataset is not None else dataset
    rng = random.Random(config.seed)
    order = list(range(len(dataset)))
    labels_of = (lambda ex: ex.label) if target == "label" else (lambda ex: ex.attribute)

    metrics = {"train_loss": [], "dev_accuracy": []}
    for _ in range(config.epochs):
        model.train()
        rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            ids = _pad_batch([ex.tokens for ex in batch], model.min_len)
            lengths = torch.tensor([len(ex.tokens) for ex in batch])
            targets = torch.tensor([labels_of(ex) for ex in batch], dtype=torch.long)
            log_probs = model.log_probs_hard(ids, lengths)
            loss = F.nll_loss(log_probs, targets)
            if not torch.isfinite(loss):
                raise RuntimeError("training diverged: non-finite loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        metrics["train_loss"].append(epoch_loss / max(1, n_batches))
        metrics["dev_accuracy"].append(_target_accuracy(model, dev, labels_of))
    model.eval()
    final = _target_accuracy(model, dev, labels_of)
    metrics["final_dev_accuracy"] = final
    return model, metrics


def _target_accuracy(model, dataset: Dataset, labels_of) -> float:
    correct = sum(1 for ex in dataset if predict(model, ex.tokens) == labels_of(ex))
    return correct / len(dataset)


def attribute_accuracy(model, dataset: Dataset) -> float:
    return _target_accuracy(model, dataset, lambda ex: ex.attribute)


def save_classifier(model, path, meta: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "vocab_size": model.vocab_size,
        "num_classes": model.num_classes,
        "embed_dim": model.embedding.embedding_dim,
        "state": model.state_dict(),
        "meta": meta or {},
    }
    if model.arch == "conv":
        payload["num_filters"] = model.convs[0].out_channels
        payload["filter_widths"] = list(model.filter_widths)
    else:
        payload["hidden_dim"] = model.rnn.hidden_size
    torch.save(payload, path)


def load_classifier(path, expected_vocab_size: int | None = None,
                    expected_num_classes: int | None = None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if expected_vocab_size is not None and payload["vocab_size"] != expected_vocab_size:
        raise ValueError(f"checkpoint vocab size {payload['vocab_size']} != expected {expected_vocab_size}")
    if expected_num_classes is not None and payload["num_classes"] != expected_num_classes:
        raise ValueError(f"checkpoint class count {payload['num_classes']} != expected {expected_num_classes}")
    if payload["arch"] == "conv":
        model = ConvTextClassifier(payload["vocab_size"], payload["num_classes"],
                                   embed_dim=payload["embed_dim"],
                                   filter_widths=tuple(payload["filter_widths"]),
                                   num_filters=payload["num_filters"])
    else:
        model = RecurrentTextClassifier(payload["vocab_size"], payload["num_classes"],
                                        embed_dim=payload["embed_dim"],
                                        hidden_dim=payload["hidden_dim"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model
