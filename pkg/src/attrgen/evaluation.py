"""Measurement suite: diversity (BLEU-4 against the input), fluency (perplexity
under a locally trained n-gram language model), attack-search-space curves,
transferability under retraining / architecture change, and adversarial
training, plus CSV report emission.
"""

from __future__ import annotations

import csv
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifiers
from .attack import AttackResult, generation_for, task_cross_entropy
from .classifiers import TrainConfig, predict, train_classifier
from .corpus import BOS_ID, EOS_ID, UNK_ID, Dataset, Example
from .genmodel import Generator, encode
from .utils import derive_seed

# ---------------------------------------------------------------------------
# BLEU-4


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_from_counts(matches, totals, cand_len: int, ref_len: int) -> float:
    if cand_len == 0 or matches[1] == 0:
        return 0.0
    smooth = any(matches[n] == 0 for n in range(1, 5))
    log_sum = 0.0
    for n in range(1, 5):
        if smooth and n >= 2:
            precision = (matches[n] + 1) / (totals[n] + 1)
        else:
            precision = matches[n] / totals[n]
        log_sum += math.log(precision)
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / max(1, cand_len))
    return 100.0 * brevity * math.exp(log_sum / 4)


def bleu4(candidate, reference) -> float:
    """Sentence BLEU with orders 1..4, brevity penalty, and add-one smoothing on
    the higher-order precisions whenever any order has zero matches. Empty
    candidates score 0."""
    candidate = list(candidate)
    reference = list(reference)
    if not reference:
        raise ValueError("empty reference")
    if not candidate:
        return 0.0
    matches = {}
    totals = {}
    for n in range(1, 5):
        cand_counts = _ngram_counts(candidate, n)
        ref_counts = _ngram_counts(reference, n)
        matches[n] = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        totals[n] = max(0, len(candidate) - n + 1)
    return _bleu_from_counts(matches, totals, len(candidate), len(reference))


def corpus_bleu4(pairs) -> float:
    """Corpus-level variant: n-gram statistics pooled over all (candidate,
    reference) pairs before the precisions are formed."""
    matches = {n: 0 for n in range(1, 5)}
    totals = {n: 0 for n in range(1, 5)}
    cand_len = 0
    ref_len = 0
    n_pairs = 0
    for candidate, reference in pairs:
        candidate = list(candidate)
        reference = list(reference)
        n_pairs += 1
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, 5):
            cand_counts = _ngram_counts(candidate, n)
            ref_counts = _ngram_counts(reference, n)
            matches[n] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n] += max(0, len(candidate) - n + 1)
    if n_pairs == 0:
        raise ValueError("no sentence pairs")
    return _bleu_from_counts(matches, totals, cand_len, ref_len)


# ---------------------------------------------------------------------------
# Language model and perplexity


@dataclass
class LMConfig:
    order: int = 3
    discount: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not 0 < self.discount < 1:
            raise ValueError("discount must be in (0, 1)")


class NGramLM:
    """Interpolated absolute-discounting n-gram model over token ids.

    Sentences are scored as tokens + EOS with BOS-padded contexts. The base
    distribution is uniform over the full vocabulary, so every in-vocab token
    has nonzero probability in every context and each context's probabilities
    sum to one exactly.
    """

    def __init__(self, vocab_size: int, order: int = 3, discount: float = 0.75):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        LMConfig(order=order, discount=discount).validate()
        self.vocab_size = vocab_size
        self.order = order
        self.discount = discount
        # counts[k][context][token] for context length k
        self.counts: list[dict] = [dict() for _ in range(order)]
        self.context_totals: list[dict] = [dict() for _ in range(order)]

    def fit(self, sequences) -> "NGramLM":
        n_sequences = 0
        for seq in sequences:
            n_sequences += 1
            padded = [BOS_ID] * (self.order - 1) + list(seq) + [EOS_ID]
            for i in range(self.order - 1, len(padded)):
                token = padded[i]
                for k in range(self.order):
                    context = tuple(padded[i - k:i])
                    bucket = self.counts[k].setdefault(context, {})
                    bucket[token] = bucket.get(token, 0) + 1
                    self.context_totals[k][context] = self.context_totals[k].get(context, 0) + 1
        if n_sequences == 0:
            raise ValueError("empty corpus")
        return self

    def prob(self, token: int, context) -> float:
        context = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(token, context)

    def _prob(self, token: int, context: tuple) -> float:
        if len(context) == 0:
            counts = self.counts[0].get((), {})
            total = self.context_totals[0].get((), 0)
            base = 1.0 / self.vocab_size
            if total == 0:
                return base
            seen = counts.get(token, 0)
            distinct = len(counts)
            return max(seen - self.discount, 0.0) / total + \
                self.discount * distinct / total * base
        k = len(context)
        total = self.context_totals[k].get(context, 0)
        backoff = self._prob(token, context[1:])
        if total == 0:
            return backoff
        counts = self.counts[k][context]
        seen = counts.get(token, 0)
        distinct = len(counts)
        return max(seen - self.discount, 0.0) / total + \
            self.discount * distinct / total * backoff

    def sequence_nll(self, tokens) -> float:
        tokens = [t if 0 <= t < self.vocab_size else UNK_ID for t in tokens]
        padded = [BOS_ID] * (self.order - 1) + tokens + [EOS_ID]
        nll = 0.0
        for i in range(self.order - 1, len(padded)):
            context = tuple(padded[i - (self.order - 1):i])
            nll -= math.log(self._prob(padded[i], context))
        return nll


class UniformLM:
    """Assigns 1/V to every token; perplexity is exactly V."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def sequence_nll(self, tokens) -> float:
        return (len(list(tokens)) + 1) * math.log(self.vocab_size)


def train_lm(corpus, config: LMConfig, vocab_size: int | None = None,
             heldout=None) -> tuple[NGramLM, dict]:
    """Fit the n-gram model on token sequences (or a Dataset); reports held-out
    perplexity when a held-out set is given."""
    config.validate()
    if isinstance(corpus, Dataset):
        if corpus.vocab is None:
            raise ValueError("dataset has no vocab attached")
        vocab_size = len(corpus.vocab)
        sequences = [ex.tokens for ex in corpus]
    else:
        sequences = [list(seq) for seq in corpus]
        if vocab_size is None:
            raise ValueError("vocab_size required when corpus is raw sequences")
    if not sequences:
        raise ValueError("empty corpus")
    lm = NGramLM(vocab_size, order=config.order, discount=config.discount).fit(sequences)
    metrics = {"n_sequences": len(sequences)}
    if heldout is not None:
        held_seqs = [ex.tokens for ex in heldout] if isinstance(heldout, Dataset) else heldout
        metrics["heldout_perplexity"] = float(
            np.mean([perplexity(lm, seq) for seq in held_seqs]))
    return lm, metrics


def perplexity(lm, token_sequence) -> float:
    """exp of the mean per-token negative log-likelihood, EOS step included."""
    tokens = list(token_sequence)
    if not tokens:
        raise ValueError("empty sequence")
    return math.exp(lm.sequence_nll(tokens) / (len(tokens) + 1))


# ---------------------------------------------------------------------------
# Attack search-space curve


def candidate_score_table(gen: Generator, task_classifier, dataset: Dataset,
                          tau: float = 0.1) -> list[dict[int, tuple[float, int]]]:
    """Per example: candidate attribute -> (task cross-entropy, predicted label)
    of its hardened rewrite. Computed once so nested subsets can be replayed."""
    table = []
    for ex in dataset:
        z = encode(gen, ex.tokens)
        row: dict[int, tuple[float, int]] = {}
        for a_new in range(gen.config.num_attributes):
            if a_new == ex.attribute:
                continue
            ids = generation_for(gen, z, a_new, tau)
            score = task_cross_entropy(task_classifier, ids, ex.label)
            row[a_new] = (score, predict(task_classifier, ids))
        table.append(row)
    return table


def accuracy_vs_search_space(gen: Generator, task_classifier, dataset: Dataset,
                             category_counts, seeds=(0, 1, 2), tau: float = 0.1,
                             sample_size: int | None = None,
                             attribute_order=None,
                             score_table=None) -> list[dict]:
    """Unfiltered task accuracy as the candidate attribute pool grows.

    Candidate pools are prefixes of a fixed attribute ordering, so they nest;
    the per-example maximum score is checked to be non-decreasing across
    pool sizes. Each seed draws its own evaluation subsample.
    """
    k = gen.config.num_attributes
    counts = list(category_counts)
    if any(c < 2 for c in counts):
        raise ValueError("category counts must each be >= 2")
    if any(c > k for c in counts):
        raise ValueError(f"category count exceeds K={k}")
    if counts != sorted(counts):
        raise ValueError("category counts must be ascending")
    order = list(attribute_order) if attribute_order is not None else list(range(k))
    if score_table is None:
        score_table = candidate_score_table(gen, task_classifier, dataset, tau)

    rows = []
    for count in counts:
        pool = set(order[:count])
        per_seed = []
        for seed in seeds:
            rng = random.Random(derive_seed(seed, "search-space", count))
            indices = list(range(len(dataset)))
            if sample_size is not None and sample_size < len(indices):
                indices = sorted(rng.sample(indices, sample_size))
            correct = 0
            evaluated = 0
            for i in indices:
                ex = dataset[i]
                candidates = [a for a in score_table[i] if a in pool]
                if not candidates:
                    continue
                best = max(candidates, key=lambda a: (score_table[i][a][0], -a))
                evaluated += 1
                if score_table[i][best][1] == ex.label:
                    correct += 1
            per_seed.append(correct / max(1, evaluated))
        rows.append({"count": count, "accuracy_per_seed": per_seed,
                     "mean_accuracy": float(np.mean(per_seed))})

    # nested-pool invariant: the best score can only improve with more candidates
    for i, row in enumerate(score_table):
        best_so_far = -float("inf")
        for count in counts:
            pool = set(order[:count])
            scores = [row[a][0] for a in row if a in pool]
            if not scores:
                continue
            current = max(scores)
            if current < best_so_far - 1e-12:
                raise AssertionError(f"nested-subset monotonicity violated at example {i}")
            best_so_far = max(best_so_far, current)
    return rows


# ---------------------------------------------------------------------------
# Transferability and adversarial training


def _attack_dataset(attacks, reference: Dataset, split: str) -> Dataset:
    examples = [Example(tokens=list(r.generated_ids), label=r.label,
                        attribute=r.chosen_attribute if r.chosen_attribute is not None else r.attribute,
                        raw_text=r.generated_text)
                for r in attacks]
    return Dataset(examples, reference.label_names, reference.attribute_names,
                   split=split, vocab=reference.vocab)


def transferability_experiment(attacks_by_method: dict[str, list[AttackResult]],
                               train_dataset: Dataset, seed: int,
                               train_config: TrainConfig,
                               architectures=("conv", "recurrent"),
                               dev_dataset: Dataset | None = None) -> dict:
    """Retrain the task model (and train the recurrent variant) with a fresh
    seed, then measure accuracy on each method's successful-attack set. Lower
    accuracy = the attacks transfer better."""
    for method, attacks in attacks_by_method.items():
        if not attacks:
            raise ValueError(f"empty attack set for method {method!r}")
    results: dict[str, dict[str, float]] = {}
    for arch in architectures:
        cfg = TrainConfig(lr=train_config.lr, momentum=train_config.momentum,
                          batch_size=train_config.batch_size, epochs=train_config.epochs,
                          dropout=train_config.dropout,
                          seed=derive_seed(seed, "transfer", arch))
        model, _ = train_classifier(train_dataset, cfg, architecture=arch,
                                    target="label", dev_dataset=dev_dataset)
        per_method = {}
        for method, attacks in attacks_by_method.items():
            attack_set = _attack_dataset(attacks, train_dataset, split=f"attacks-{method}")
            per_method[method] = classifiers.accuracy(model, attack_set)
        results[arch] = per_method
    return results


def adversarial_training_experiment(train_dataset: Dataset, test_dataset: Dataset,
                                    augmentation_by_method: dict[str, list[AttackResult]],
                                    holdout_by_method: dict[str, list[AttackResult]],
                                    seed: int, train_config: TrainConfig) -> dict:
    """Augment training data with each method's attacks (rows) and evaluate on
    each method's held-out attacks plus the original test set (columns)."""
    for method in augmentation_by_method:
        aug_keys = {(tuple(r.original_ids), tuple(r.generated_ids))
                    for r in augmentation_by_method[method]}
        hold = holdout_by_method.get(method, [])
        overlap = [r for r in hold
                   if (tuple(r.original_ids), tuple(r.generated_ids)) in aug_keys]
        if overlap:
            raise ValueError(f"augmentation and holdout pools overlap for method {method!r}")

    holdout_sets = {method: _attack_dataset(attacks, train_dataset, split=f"holdout-{method}")
                    for method, attacks in holdout_by_method.items()}

    def evaluate(model) -> dict[str, float]:
        row = {"original_test": classifiers.accuracy(model, test_dataset)}
        for method, holdout in holdout_sets.items():
            row[f"{method}_attacks"] = classifiers.accuracy(model, holdout)
        return row

    matrix: dict[str, dict[str, float]] = {}
    rows = ["original"] + sorted(augmentation_by_method)
    for row_name in rows:
        if row_name == "original":
            train_set = train_dataset
        else:
            extra = _attack_dataset(augmentation_by_method[row_name], train_dataset,
                                    split="augmentation")
            train_set = Dataset(train_dataset.examples + extra.examples,
                                train_dataset.label_names, train_dataset.attribute_names,
                                split="augmented", vocab=train_dataset.vocab)
        cfg = TrainConfig(lr=train_config.lr, momentum=train_config.momentum,
                          batch_size=train_config.batch_size, epochs=train_config.epochs,
                          dropout=train_config.dropout,
                          seed=derive_seed(seed, "augment", row_name))
        model, _ = train_classifier(train_set, cfg, architecture="conv", target="label")
        matrix[row_name] = evaluate(model)
    return matrix


# ---------------------------------------------------------------------------
# Metric tables over attack records


def diversity_table(attacks_by_method: dict[str, list[AttackResult]]) -> list[dict]:
    rows = []
    for method in sorted(attacks_by_method):
        attacks = attacks_by_method[method]
        if not attacks:
            continue
        sentence_scores = [bleu4(r.generated_ids, r.original_ids) for r in attacks]
        rows.append({
            "method": method,
            "n": len(attacks),
            "sentence_bleu4": float(np.mean(sentence_scores)),
            "corpus_bleu4": corpus_bleu4((r.generated_ids, r.original_ids) for r in attacks),
        })
    return rows


def fluency_table(attacks_by_method: dict[str, list[AttackResult]], lm) -> list[dict]:
    rows = []
    for method in sorted(attacks_by_method):
        attacks = attacks_by_method[method]
        if not attacks:
            continue
        scores = [perplexity(lm, r.generated_ids) for r in attacks]
        rows.append({
            "method": method,
            "n": len(attacks),
            "mean_perplexity": float(np.mean(scores)),
            "median_perplexity": float(np.median(scores)),
        })
    return rows


# ---------------------------------------------------------------------------
# Report emission


@dataclass
class EvalReport:
    tables: dict[str, list[dict]]
    metadata: dict = field(default_factory=dict)


REPORT_FILES = {
    "diversity": "diversity.csv",
    "fluency": "fluency.csv",
    "transfer": "transfer.csv",
    "augment": "augment.csv",
    "search_space": "search_space.csv",
}


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write one CSV per table plus a plain-text summary. Values are written
    with repr so parsing them back yields the in-memory floats exactly."""
    tables = {name: rows for name, rows in report.tables.items() if rows}
    if not tables:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_line = "# " + " ".join(f"{k}={report.metadata[k]}" for k in sorted(report.metadata))
    written = []
    for name, rows in tables.items():
        filename = REPORT_FILES.get(name, f"{name}.csv")
        path = out_dir / filename
        fieldnames = list(rows[0].keys())
        with path.open("w", encoding="utf-8", newline="") as fh:
            if report.metadata:
                fh.write(meta_line + "\n")
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format_value(v) for k, v in row.items()})
        written.append(path)
    summary = out_dir / "summary.txt"
    with summary.open("w", encoding="utf-8") as fh:
        if report.metadata:
            fh.write(meta_line + "\n")
        for name, rows in tables.items():
            fh.write(f"[{name}]\n")
            for row in rows:
                fh.write("  " + "  ".join(f"{k}={_format_value(v)}" for k, v in row.items()) + "\n")
        fh.write("\n")
    written.append(summary)
    return written


def read_report_csv(path) -> list[dict]:
    """Parse a report CSV back, restoring ints and floats."""
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        parsed = {}
        for key, value in row.items():
            try:
                parsed[key] = int(value)
            except ValueError:
                try:
                    parsed[key] = float(value)
                except ValueError:
                    parsed[key] = value
        rows.append(parsed)
    return rows
