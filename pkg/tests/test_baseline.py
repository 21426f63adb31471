import numpy as np
import pytest
import torch

from attrgen.baseline import SubstitutionConfig, nearest_neighbors, substitution_attack
from attrgen.classifiers import train_classifier, TrainConfig
from attrgen.corpus import NUM_RESERVED, generate_synthetic

from test_corpus import tiny_spec


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.fixture(scope="module")
def trained():
    train = generate_synthetic(tiny_spec(counts=100), seed=1)
    dev = generate_synthetic(tiny_spec(counts=20), seed=2, vocab=train.vocab)
    model, _ = train_classifier(train, TrainConfig(epochs=6, lr=0.1, seed=3), "conv",
                                target="label", dev_dataset=dev)
    return train, dev, model


# ---------------------------------------------------------------------------
# nearest neighbors


def test_neighbors_floor_one_empty():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(12, 6))
    assert nearest_neighbors(table, 5, k=3, floor=1.0) == []


def test_neighbors_duplicate_row_is_top():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(12, 6))
    table[9] = table[5]
    neighbors = nearest_neighbors(table, 5, k=3, floor=-1.0)
    assert neighbors[0] == 9
    assert cosine(table[9], table[5]) == pytest.approx(1.0)


def test_neighbors_match_exhaustive_scan():
    rng = np.random.default_rng(2)
    table = rng.normal(size=(30, 8))
    for word in (4, 11, 29):
        got = nearest_neighbors(table, word, k=1, floor=-1.0)
        sims = {i: cosine(table[i], table[word])
                for i in range(NUM_RESERVED, 30) if i != word}
        best = max(sorted(sims), key=lambda i: sims[i])
        assert got == [best]


def test_neighbors_exclude_self_and_reserved():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(10, 4))
    neighbors = nearest_neighbors(table, 6, k=100, floor=-1.0)
    assert 6 not in neighbors
    assert all(n >= NUM_RESERVED for n in neighbors)
    assert len(neighbors) == 5


def test_neighbors_descending_similarity():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(20, 5))
    neighbors = nearest_neighbors(table, 7, k=10, floor=-1.0)
    sims = [cosine(table[n], table[7]) for n in neighbors]
    assert sims == sorted(sims, reverse=True)


def test_neighbors_word_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        nearest_neighbors(np.zeros((5, 3)), 9, k=1, floor=0.0)


# ---------------------------------------------------------------------------
# substitution attack


def test_budget_zero_means_identity(trained):
    train, _, model = trained
    ex = train[0]
    cfg = SubstitutionConfig(max_fraction=1.0 / (len(ex.tokens) + 1))
    result = substitution_attack(ex, model, cfg, train.vocab)
    assert result.generated_ids == ex.tokens
    assert result.success is False
    assert result.method == "substitution"
    assert result.chosen_attribute is None and result.scores == {}


def test_length_budget_and_floor_respected(trained):
    train, _, model = trained
    cfg = SubstitutionConfig(max_fraction=0.3, neighbors=5, similarity_floor=0.1)
    embedding = model.embedding.weight.detach().numpy()
    for ex in train.examples[:30]:
        result = substitution_attack(ex, model, cfg, train.vocab)
        assert len(result.generated_ids) == len(ex.tokens)
        swaps = [(a, b) for a, b in zip(ex.tokens, result.generated_ids) if a != b]
        assert len(swaps) <= int(cfg.max_fraction * len(ex.tokens))
        for old, new in swaps:
            assert cosine(embedding[old], embedding[new]) >= cfg.similarity_floor - 1e-9
            assert new >= NUM_RESERVED


def test_stop_words_never_replaced(trained):
    train, _, model = trained
    spec = tiny_spec()
    protected = tuple(sorted(set(spec.labels["positive"]) | set(spec.labels["negative"])))
    cfg = SubstitutionConfig(max_fraction=1.0, neighbors=8, similarity_floor=-1.0,
                             stop_words=protected)
    protected_ids = {train.vocab.stoi[w] for w in protected if w in train.vocab.stoi}
    for ex in train.examples[:25]:
        result = substitution_attack(ex, model, cfg, train.vocab)
        for old, new in zip(ex.tokens, result.generated_ids):
            if old in protected_ids:
                assert new == old


class KeyedClassifier(torch.nn.Module):
    """Predicts class 0 iff a trigger token is present; embeddings provided
    so the attacker can search neighbors."""

    def __init__(self, vocab_size, trigger, embedding):
        super().__init__()
        self.vocab_size = vocab_size
        self.num_classes = 2
        self.min_len = 1
        self.trigger = trigger
        self.embedding = embedding

    def log_probs_hard(self, ids, lengths=None):
        out = torch.empty(ids.size(0), 2)
        for i, row in enumerate(ids):
            present = bool((row == self.trigger).any())
            p0 = 0.98 if present else 0.02
            out[i, 0] = float(np.log(p0))
            out[i, 1] = float(np.log(1 - p0))
        return out


def test_keyed_classifier_flips_within_two_substitutions(trained):
    train, _, _ = trained
    vocab = train.vocab
    trigger_word = "good"
    trigger = vocab.stoi[trigger_word]
    torch.manual_seed(0)
    embedding = torch.nn.Embedding(len(vocab), 16)
    model = KeyedClassifier(len(vocab), trigger, embedding)
    example = next(ex for ex in train if trigger in ex.tokens and ex.label == 0)
    cfg = SubstitutionConfig(max_fraction=0.5, neighbors=4, similarity_floor=-1.0)
    result = substitution_attack(example, model, cfg, vocab)
    assert result.success
    changed = sum(1 for a, b in zip(example.tokens, result.generated_ids) if a != b)
    assert changed <= 2
    assert trigger not in result.generated_ids


def test_config_validation():
    with pytest.raises(ValueError):
        SubstitutionConfig(max_fraction=0.0).validate()
    with pytest.raises(ValueError):
        SubstitutionConfig(neighbors=0).validate()
