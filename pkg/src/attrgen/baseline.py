"""Greedy word-substitution attacker.

A deliberately simple stand-in for synonym-swap attacks: rank positions by how
much deleting them (here: masking with UNK) hurts the true-label probability,
then greedily replace each with its nearest embedding-space neighbor that
lowers that probability further, stopping at a prediction flip or when the
replacement budget runs out. Sentence length never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attack import AttackResult, check_label_drift
from .classifiers import predict
from .corpus import NUM_RESERVED, UNK_ID, Example, Vocab


@dataclass
class SubstitutionConfig:
    max_fraction: float = 0.25
    neighbors: int = 8
    similarity_floor: float = 0.2
    stop_words: tuple[str, ...] = ()

    def validate(self) -> None:
        if not 0 < self.max_fraction <= 1:
            raise ValueError("max_fraction must be in (0, 1]")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")


def nearest_neighbors(embedding_table, word_id: int, k: int, floor: float) -> list[int]:
    """Up to k vocabulary ids most cosine-similar to word_id, similarity >= floor,
    excluding the word itself and the reserved ids. Descending similarity,
    ties broken by lower id."""
    table = np.asarray(embedding_table, dtype=np.float64)
    if not 0 <= word_id < table.shape[0]:
        raise ValueError(f"word id {word_id} out of range")
    query = table[word_id]
    norms = np.linalg.norm(table, axis=1)
    qnorm = np.linalg.norm(query)
    denom = norms * qnorm
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = np.where(denom > 0, table @ query / np.where(denom > 0, denom, 1.0), -1.0)
    order = sorted(
        (i for i in range(NUM_RESERVED, table.shape[0]) if i != word_id and sims[i] >= floor),
        key=lambda i: (-sims[i], i),
    )
    return order[:k]


def _label_probs_batch(model, sequences, label: int) -> np.ndarray:
    """True-label probability for same-length id sequences, one batched pass."""
    ids = torch.tensor(sequences, dtype=torch.long)
    if ids.size(1) < model.min_len:
        pad = ids.new_zeros((ids.size(0), model.min_len - ids.size(1)))
        ids = torch.cat([ids, pad], dim=1)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            log_probs = model.log_probs_hard(ids)
    finally:
        model.train(was_training)
    return np.exp(log_probs[:, label].numpy())


def substitution_attack(example: Example, task_classifier, config: SubstitutionConfig,
                        vocab: Vocab,
                        label_lexicons: dict[int, set] | None = None) -> AttackResult:
    config.validate()
    tokens = list(example.tokens)
    budget = int(config.max_fraction * len(tokens))
    stop_ids = {vocab.stoi[w] for w in config.stop_words if w in vocab.stoi}
    embedding = task_classifier.embedding.weight.detach().cpu().numpy()

    pred_original = predict(task_classifier, tokens)
    base_prob = _label_probs_batch(task_classifier, [tokens], example.label)[0]

    positions = [pos for pos, tok in enumerate(tokens)
                 if tok >= NUM_RESERVED and tok not in stop_ids]
    importance = []
    if positions:
        masked = []
        for pos in positions:
            row = tokens.copy()
            row[pos] = UNK_ID
            masked.append(row)
        drops = base_prob - _label_probs_batch(task_classifier, masked, example.label)
        importance = sorted(zip(positions, drops), key=lambda item: (-item[1], item[0]))

    current = tokens.copy()
    current_prob = base_prob
    replaced = 0
    for pos, _ in importance:
        if replaced >= budget:
            break
        candidates = nearest_neighbors(embedding, current[pos], config.neighbors,
                                       config.similarity_floor)
        if not candidates:
            continue
        trials = []
        for neighbor in candidates:
            row = current.copy()
            row[pos] = neighbor
            trials.append(row)
        probs = _label_probs_batch(task_classifier, trials, example.label)
        best_idx = int(np.argmin(probs))
        if probs[best_idx] >= current_prob:
            continue
        current[pos] = candidates[best_idx]
        current_prob = probs[best_idx]
        replaced += 1
        if predict(task_classifier, current) != example.label:
            break

    generated_text = vocab.decode_to_text(current)
    pred_generated = predict(task_classifier, current)
    return AttackResult(
        method="substitution",
        original_text=example.raw_text,
        original_ids=tokens,
        label=example.label,
        attribute=example.attribute,
        scores={},
        chosen_attribute=None,
        generated_ids=current,
        generated_text=generated_text,
        pred_original=pred_original,
        pred_generated=pred_generated,
        success=pred_generated != example.label,
        originally_misclassified=pred_original != example.label,
        label_drift=check_label_drift(generated_text, example.label, label_lexicons),
    )
