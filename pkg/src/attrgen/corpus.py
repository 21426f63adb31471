"""Dataset handling: tokenization, vocabulary, JSONL ingestion, balancing and synthetic corpora.

Everything here is pure and deterministic given its seed arguments, so the
synthetic generator can double as a ground-truth oracle in tests: attribute
and sentiment lexicons are disjoint by construction, which makes "attribute
changed, sentiment preserved" mechanically checkable.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")
NUM_RESERVED = len(RESERVED_TOKENS)

DEFAULT_MAX_LEN = 25

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SLOT_RE = re.compile(r"\{(\w+)\}")


def tokenize(text: str) -> list[str]:
    """Lowercased split into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens) -> str:
    return " ".join(tokens)


class Vocab:
    """Bijective token<->id map with ids 0..3 reserved for PAD/UNK/BOS/EOS."""

    def __init__(self, tokens):
        itos = list(RESERVED_TOKENS)
        seen = set(itos)
        for tok in tokens:
            if tok in seen:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            seen.add(tok)
            itos.append(tok)
        self.itos = itos
        self.stoi = {tok: i for i, tok in enumerate(itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token) -> bool:
        return token in self.stoi

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise ValueError(f"id {idx} out of range for vocab of size {len(self.itos)}")
        return self.itos[idx]

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.token_of(i) for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode_to_text(self, ids) -> str:
        return detokenize(self.decode(ids))

    def save(self, path) -> None:
        # One non-reserved token per line; line number == id - 4.
        with Path(path).open("w", encoding="utf-8") as fh:
            for tok in self.itos[NUM_RESERVED:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(texts, min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-sorted vocabulary over tokenized texts.

    Tokens rarer than min_freq are dropped (they will map to UNK); at most
    max_size non-reserved tokens are kept. Sort order is (-count, token) so
    the result is independent of input ordering.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0 or not counts:
        raise ValueError("empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocab(kept)


@dataclass
class Example:
    tokens: list[int]
    label: int
    attribute: int
    raw_text: str


@dataclass
class Dataset:
    examples: list[Example]
    label_names: tuple[str, ...]
    attribute_names: tuple[str, ...]
    split: str = "train"
    vocab: Vocab | None = None

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, idx) -> Example:
        return self.examples[idx]

    def texts(self) -> list[str]:
        return [ex.raw_text for ex in self.examples]

    def cell_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a in range(self.num_attributes):
            for y in range(self.num_labels):
                counts[(a, y)] = 0
        for ex in self.examples:
            counts[(ex.attribute, ex.label)] += 1
        return counts

    def subset(self, indices, split: str | None = None) -> "Dataset":
        return Dataset(
            examples=[self.examples[i] for i in indices],
            label_names=self.label_names,
            attribute_names=self.attribute_names,
            split=split if split is not None else self.split,
            vocab=self.vocab,
        )


def load_jsonl(path, vocab: Vocab, label_names, attribute_names,
               max_len: int = DEFAULT_MAX_LEN, split: str = "train") -> tuple[Dataset, int]:
    """Read a JSONL dataset file ({"text", "label", "attribute"} per line).

    Examples longer than max_len tokens are excluded; the number of exclusions
    is returned alongside the dataset. Lines holding only a "_meta" object
    (written by the pipeline for provenance) are skipped.
    """
    label_names = tuple(label_names)
    attribute_names = tuple(attribute_names)
    label_to_id = {name: i for i, name in enumerate(label_names)}
    attr_to_id = {name: i for i, name in enumerate(attribute_names)}
    examples: list[Example] = []
    excluded = 0
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"line {lineno}: invalid JSON ({err.msg})") from err
            if not isinstance(record, dict):
                raise ValueError(f"line {lineno}: expected an object")
            if "_meta" in record:
                continue
            for key in ("text", "label", "attribute"):
                if key not in record:
                    raise ValueError(f"line {lineno}: missing field {key!r}")
            if record["label"] not in label_to_id:
                raise ValueError(f"line {lineno}: unknown label {record['label']!r}")
            if record["attribute"] not in attr_to_id:
                raise ValueError(f"line {lineno}: unknown attribute {record['attribute']!r}")
            tokens = vocab.encode_text(record["text"])
            if not tokens:
                raise ValueError(f"line {lineno}: empty text")
            if len(tokens) > max_len:
                excluded += 1
                continue
            examples.append(Example(tokens=tokens,
                                    label=label_to_id[record["label"]],
                                    attribute=attr_to_id[record["attribute"]],
                                    raw_text=record["text"]))
    return Dataset(examples, label_names, attribute_names, split=split, vocab=vocab), excluded


def save_jsonl(dataset: Dataset, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for ex in dataset.examples:
            record = {
                "text": ex.raw_text,
                "label": dataset.label_names[ex.label],
                "attribute": dataset.attribute_names[ex.attribute],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def balance_by_label(dataset: Dataset, seed: int = 0) -> Dataset:
    """Downsample every (attribute, label) cell to the size of the smallest cell.

    Selection within a cell is a seeded random sample; the surviving examples
    keep their original corpus order.
    """
    cells: dict[tuple[int, int], list[int]] = {}
    for a in range(dataset.num_attributes):
        for y in range(dataset.num_labels):
            cells[(a, y)] = []
    for idx, ex in enumerate(dataset.examples):
        cells[(ex.attribute, ex.label)].append(idx)
    empty = [key for key, idxs in cells.items() if not idxs]
    if empty:
        names = ", ".join(f"({dataset.attribute_names[a]}, {dataset.label_names[y]})" for a, y in sorted(empty))
        raise ValueError(f"cannot balance: empty cells {names}")
    target = min(len(idxs) for idxs in cells.values())
    rng = random.Random(seed)
    selected: list[int] = []
    for key in sorted(cells):
        selected.extend(rng.sample(cells[key], target))
    selected.sort()
    return dataset.subset(selected)


@dataclass
class SyntheticSpec:
    """Recipe for an attribute- and sentiment-labeled synthetic corpus.

    attributes / labels map a name to its lexicon. Lexicons must be pairwise
    disjoint across attributes, and attribute lexicons disjoint from label
    lexicons, so that lexicon membership is a usable ground-truth signal.
    counts is either a single per-cell count or a full "attribute|label" map.
    """

    attributes: dict[str, tuple[str, ...]]
    labels: dict[str, tuple[str, ...]]
    fillers: tuple[str, ...]
    templates: tuple[str, ...]
    counts: int | dict[str, int] = 10
    seed: int = 0

    def validate(self) -> None:
        if not self.attributes:
            raise ValueError("spec needs at least one attribute")
        if not self.labels:
            raise ValueError("spec needs at least one label")
        if not self.templates:
            raise ValueError("spec needs at least one template")
        attr_sets = {f"attribute {name!r}": set(words) for name, words in self.attributes.items()}
        label_sets = {f"label {name!r}": set(words) for name, words in self.labels.items()}
        for group, words in {**attr_sets, **label_sets}.items():
            if not words:
                raise ValueError(f"empty lexicon for {group}")
        # attribute lexicons: pairwise disjoint, and disjoint from label lexicons
        # and fillers. Label lexicons may share words with each other (ambiguous
        # sentiment) but not with fillers.
        others = {**label_sets, "fillers": set(self.fillers)}
        attr_names = list(attr_sets)
        for i, left in enumerate(attr_names):
            for right in attr_names[i + 1:]:
                overlap = attr_sets[left] & attr_sets[right]
                if overlap:
                    raise ValueError(f"lexicons for {left} and {right} overlap: {sorted(overlap)}")
            for right, words in others.items():
                overlap = attr_sets[left] & words
                if overlap:
                    raise ValueError(f"lexicons for {left} and {right} overlap: {sorted(overlap)}")
        for name, words in label_sets.items():
            overlap = words & set(self.fillers)
            if overlap:
                raise ValueError(f"lexicons for {name} and fillers overlap: {sorted(overlap)}")
        for template in self.templates:
            slots = _SLOT_RE.findall(template)
            unknown = [s for s in slots if s not in ("attr", "label", "filler")]
            if unknown:
                raise ValueError(f"template {template!r} references missing lexicon slot {unknown[0]!r}")
            if "attr" not in slots:
                raise ValueError(f"template {template!r} has no {{attr}} slot")
            if "label" not in slots:
                raise ValueError(f"template {template!r} has no {{label}} slot")
            if "filler" in slots and not self.fillers:
                raise ValueError(f"template {template!r} uses {{filler}} but no filler lexicon is given")
        for a_name in self.attributes:
            for l_name in self.labels:
                if self.cell_count(a_name, l_name) <= 0:
                    raise ValueError(f"cell ({a_name}, {l_name}) has non-positive count")

    def cell_count(self, attribute: str, label: str) -> int:
        if isinstance(self.counts, int):
            return self.counts
        key = f"{attribute}|{label}"
        if key not in self.counts:
            raise ValueError(f"counts missing cell {key!r}")
        return self.counts[key]

    def to_dict(self) -> dict:
        return {
            "attributes": {k: list(v) for k, v in self.attributes.items()},
            "labels": {k: list(v) for k, v in self.labels.items()},
            "fillers": list(self.fillers),
            "templates": list(self.templates),
            "counts": self.counts if isinstance(self.counts, int) else dict(self.counts),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        counts = data.get("counts", 10)
        if not isinstance(counts, int):
            counts = {str(k): int(v) for k, v in counts.items()}
        return cls(
            attributes={str(k): tuple(v) for k, v in data["attributes"].items()},
            labels={str(k): tuple(v) for k, v in data["labels"].items()},
            fillers=tuple(data.get("fillers", ())),
            templates=tuple(data["templates"]),
            counts=counts,
            seed=int(data.get("seed", 0)),
        )


def _fill_template(template: str, rng: random.Random, attr_lex, label_lex, fillers) -> str:
    def draw(match):
        slot = match.group(1)
        if slot == "attr":
            return rng.choice(attr_lex)
        if slot == "label":
            return rng.choice(label_lex)
        return rng.choice(fillers)

    return _SLOT_RE.sub(draw, template)


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None,
                       vocab: Vocab | None = None, split: str = "synthetic") -> Dataset:
    """Generate a synthetic dataset; a pure function of (spec, seed).

    Every sentence contains at least one word from its attribute lexicon and
    one from its label lexicon (templates guarantee the slots). If vocab is
    None a fresh vocabulary is built over the generated text.
    """
    spec.validate()
    rng = random.Random(spec.seed if seed is None else seed)
    attr_names = tuple(spec.attributes)
    label_names = tuple(spec.labels)
    records: list[tuple[str, int, int]] = []
    for a_idx, a_name in enumerate(attr_names):
        attr_lex = list(spec.attributes[a_name])
        for l_idx, l_name in enumerate(label_names):
            label_lex = list(spec.labels[l_name])
            for _ in range(spec.cell_count(a_name, l_name)):
                template = rng.choice(spec.templates)
                text = _fill_template(template, rng, attr_lex, label_lex, list(spec.fillers))
                records.append((text, l_idx, a_idx))
    if vocab is None:
        vocab = build_vocab((text for text, _, _ in records), min_freq=1)
    examples = []
    for text, l_idx, a_idx in records:
        tokens = vocab.encode_text(text)
        if not 1 <= len(tokens) <= DEFAULT_MAX_LEN:
            raise ValueError(f"template produced a sentence of {len(tokens)} tokens: {text!r}")
        examples.append(Example(tokens=tokens, label=l_idx, attribute=a_idx, raw_text=text))
    return Dataset(examples, label_names, attr_names, split=split, vocab=vocab)
