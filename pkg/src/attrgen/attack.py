"""Attack search over the attribute space.

For each input the generator rewrites the sentence once per candidate
attribute; the candidate whose hardened rewrite maximizes the task
classifier's cross-entropy against the ground-truth label wins. Decoding is
zero-noise at a fixed low temperature so the argmax is well defined and
attack records are reproducible.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .classifiers import forward_hard, predict
from .corpus import UNK_ID, Dataset, Example, Vocab, tokenize
from .genmodel import Generator, decode_soft, encode, harden, project_attribute

DEFAULT_ATTACK_TAU = 0.1


@dataclass
class AttackResult:
    method: str
    original_text: str
    original_ids: list[int]
    label: int
    attribute: int
    scores: dict[int, float]
    chosen_attribute: int | None
    generated_ids: list[int]
    generated_text: str
    pred_original: int
    pred_generated: int
    success: bool
    originally_misclassified: bool
    attribute_transferred: bool | None = None
    label_drift: bool | None = None

    def to_json(self) -> str:
        record = asdict(self)
        record["scores"] = {str(k): v for k, v in self.scores.items()}
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttackResult":
        record = json.loads(line)
        record["scores"] = {int(k): float(v) for k, v in record["scores"].items()}
        return cls(**record)


def candidate_attributes(example: Example, num_attributes: int,
                         subset=None) -> list[int]:
    pool = range(num_attributes) if subset is None else subset
    candidates = sorted(a for a in set(pool) if a != example.attribute)
    if any(not 0 <= a < num_attributes for a in candidates):
        raise ValueError("candidate attribute out of range")
    if not candidates:
        raise ValueError("no candidate attributes")
    return candidates


def generation_for(gen: Generator, z: torch.Tensor, attribute: int,
                   tau: float = DEFAULT_ATTACK_TAU) -> list[int]:
    """Hardened zero-noise rewrite of an encoded input under one attribute.

    An all-EOS decode would leave nothing to classify; it degrades to a single
    UNK so every candidate still gets a score.
    """
    c = project_attribute(gen, attribute)
    soft = decode_soft(gen, z, c, tau, noise_seed=None)
    ids = harden(soft)
    return ids if ids else [UNK_ID]


def task_cross_entropy(task_classifier, token_ids, label: int) -> float:
    log_probs = forward_hard(task_classifier, token_ids)
    return float(-log_probs[label])


def search_attribute(example: Example, gen: Generator, task_classifier,
                     attribute_subset=None, tau: float = DEFAULT_ATTACK_TAU):
    """Pick the candidate attribute whose rewrite maximizes the task loss.

    Returns (chosen_attribute, scores) with one score per candidate; ties
    break toward the lowest attribute id.
    """
    candidates = candidate_attributes(example, gen.config.num_attributes, attribute_subset)
    z = encode(gen, example.tokens)
    scores: dict[int, float] = {}
    best = None
    best_score = -float("inf")
    for a_new in candidates:
        ids = generation_for(gen, z, a_new, tau)
        score = task_cross_entropy(task_classifier, ids, example.label)
        scores[a_new] = score
        if score > best_score:
            best, best_score = a_new, score
    return best, scores


def lexicon_label_counts(text_tokens, label_lexicons: dict[int, set]) -> dict[int, int]:
    tokens = set(text_tokens)
    return {label: len(tokens & lex) for label, lex in label_lexicons.items()}


def check_label_drift(text: str, label: int, label_lexicons: dict[int, set] | None) -> bool | None:
    """Lexicon-membership oracle: drift when the original label's words vanished
    or the opposite labels' words outnumber them. None when no oracle given."""
    if label_lexicons is None:
        return None
    counts = lexicon_label_counts(tokenize(text), label_lexicons)
    own = counts.get(label, 0)
    others = max((c for lab, c in counts.items() if lab != label), default=0)
    return own == 0 or others > own


def generate_attack(example: Example, gen: Generator, task_classifier, vocab: Vocab,
                    attribute_subset=None, tau: float = DEFAULT_ATTACK_TAU,
                    heldout_attr_classifier=None,
                    label_lexicons: dict[int, set] | None = None) -> AttackResult:
    """Full attack record for one example under the controlled generator."""
    chosen, scores = search_attribute(example, gen, task_classifier, attribute_subset, tau)
    z = encode(gen, example.tokens)
    generated_ids = generation_for(gen, z, chosen, tau)
    generated_text = vocab.decode_to_text(generated_ids)
    pred_original = predict(task_classifier, example.tokens)
    pred_generated = predict(task_classifier, generated_ids)
    transferred = None
    if heldout_attr_classifier is not None:
        transferred = predict(heldout_attr_classifier, generated_ids) == chosen
    return AttackResult(
        method="controlled",
        original_text=example.raw_text,
        original_ids=list(example.tokens),
        label=example.label,
        attribute=example.attribute,
        scores=scores,
        chosen_attribute=chosen,
        generated_ids=generated_ids,
        generated_text=generated_text,
        pred_original=pred_original,
        pred_generated=pred_generated,
        success=pred_generated != example.label,
        originally_misclassified=pred_original != example.label,
        attribute_transferred=transferred,
        label_drift=check_label_drift(generated_text, example.label, label_lexicons),
    )


def filter_successful(results) -> list[AttackResult]:
    """Exactly the records whose attack flipped the model off the true label;
    task accuracy on this subset is zero by construction."""
    return [r for r in results if r.success]


def valid_results(results) -> list[AttackResult]:
    return [r for r in results if not r.originally_misclassified]


def success_rate(results) -> float:
    """Success rate over inputs the model classified correctly to begin with."""
    valid = valid_results(results)
    if not valid:
        raise ValueError("no valid attack records (all inputs were misclassified)")
    return sum(1 for r in valid if r.success) / len(valid)


def summarize(results) -> dict:
    valid = valid_results(results)
    histogram = Counter(r.chosen_attribute for r in results if r.chosen_attribute is not None)
    summary = {
        "n_records": len(results),
        "n_valid": len(valid),
        "n_success": sum(1 for r in valid if r.success),
        "success_rate": (sum(1 for r in valid if r.success) / len(valid)) if valid else None,
        "chosen_attribute_histogram": {str(k): histogram[k] for k in sorted(histogram)},
        "n_label_drift": sum(1 for r in results if r.label_drift),
        "n_attribute_transferred": sum(1 for r in results if r.attribute_transferred),
    }
    return summary


def write_attack_jsonl(results, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for result in results:
            fh.write(result.to_json() + "\n")


def read_attack_jsonl(path) -> tuple[list[AttackResult], dict]:
    results = []
    meta: dict = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if "_meta" in record:
                meta = record["_meta"]
                continue
            results.append(AttackResult.from_json(line))
    return results, meta


def attack_examples(results, label_names, attribute_names, vocab,
                    split: str = "attack") -> Dataset:
    """Attack records as a dataset (generated ids, original labels), for
    retraining and augmentation experiments."""
    examples = []
    for r in results:
        attribute = r.chosen_attribute if r.chosen_attribute is not None else r.attribute
        examples.append(Example(tokens=list(r.generated_ids), label=r.label,
                                attribute=attribute, raw_text=r.generated_text))
    return Dataset(examples, tuple(label_names), tuple(attribute_names), split=split, vocab=vocab)
