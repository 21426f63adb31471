import json

import numpy as np
import pytest
import torch

from attrgen.attack import (AttackResult, attack_examples, check_label_drift,
                            filter_successful, generate_attack, read_attack_jsonl,
                            search_attribute, success_rate, summarize, write_attack_jsonl)
from attrgen.classifiers import ConvTextClassifier, forward_hard, predict
from attrgen.corpus import generate_synthetic
from attrgen.genmodel import Generator, GeneratorConfig

from test_corpus import tiny_spec


class ConstantClassifier(torch.nn.Module):
    """Same log-probabilities whatever the input."""

    def __init__(self, vocab_size, num_classes):
        super().__init__()
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.min_len = 1

    def log_probs_hard(self, ids, lengths=None):
        row = torch.full((self.num_classes,), -float(np.log(self.num_classes)))
        return row.unsqueeze(0).expand(ids.size(0), -1)


@pytest.fixture(scope="module")
def env():
    data = generate_synthetic(tiny_spec(counts=25), seed=4)
    torch.manual_seed(21)
    gen = Generator(GeneratorConfig(vocab_size=len(data.vocab),
                                    num_attributes=data.num_attributes,
                                    embed_dim=8, hidden_dim=16, code_dim=16,
                                    max_decode_len=10))
    torch.manual_seed(22)
    clf = ConvTextClassifier(len(data.vocab), data.num_labels, embed_dim=8, num_filters=4)
    clf.eval()
    return data, gen, clf


def test_singleton_candidate_forced(env):
    data, gen, clf = env
    ex = data[0]
    other = (ex.attribute + 1) % data.num_attributes
    chosen, scores = search_attribute(ex, gen, clf, attribute_subset=[other])
    assert chosen == other
    assert set(scores) == {other}


def test_search_matches_score_dict_argmax(env):
    data, gen, clf = env
    for ex in data.examples[:20]:
        chosen, scores = search_attribute(ex, gen, clf)
        best = max(sorted(scores), key=lambda a: scores[a])
        assert chosen == best
        assert chosen != ex.attribute
        assert set(scores) == set(range(data.num_attributes)) - {ex.attribute}


def test_search_tie_breaks_lowest_attribute(env):
    data, gen, _ = env
    const = ConstantClassifier(len(data.vocab), data.num_labels)
    ex = data[0]
    chosen, scores = search_attribute(ex, gen, const)
    candidates = sorted(scores)
    assert len(set(scores.values())) == 1
    assert chosen == candidates[0]


def test_search_empty_candidates_raises(env):
    data, gen, clf = env
    ex = data[0]
    with pytest.raises(ValueError, match="no candidate attributes"):
        search_attribute(ex, gen, clf, attribute_subset=[ex.attribute])
    with pytest.raises(ValueError, match="out of range"):
        search_attribute(ex, gen, clf, attribute_subset=[99])


def test_search_matches_exhaustive_oracle(env):
    # independent enumeration: re-generate and re-score every candidate
    from attrgen.genmodel import decode_soft, encode, harden, project_attribute
    from attrgen.corpus import UNK_ID

    data, gen, clf = env
    for ex in data.examples[:30]:
        chosen, scores = search_attribute(ex, gen, clf)
        best_attr = None
        best_score = -float("inf")
        for a_new in range(data.num_attributes):
            if a_new == ex.attribute:
                continue
            z = encode(gen, ex.tokens)
            soft = decode_soft(gen, z, project_attribute(gen, a_new), 0.1, noise_seed=None)
            ids = harden(soft) or [UNK_ID]
            score = float(-forward_hard(clf, ids)[ex.label])
            if score > best_score:
                best_score, best_attr = score, a_new
        assert chosen == best_attr
        assert scores[chosen] == best_score


def test_generate_attack_record_invariants(env):
    data, gen, clf = env
    lexicons = {0: {"good", "nice"}, 1: {"bad", "awful"}}
    for ex in data.examples[:15]:
        result = generate_attack(ex, gen, clf, data.vocab, label_lexicons=lexicons)
        assert result.chosen_attribute in result.scores
        assert result.chosen_attribute != ex.attribute
        assert result.scores[result.chosen_attribute] == max(result.scores.values())
        ties = [a for a, s in sorted(result.scores.items())
                if s == result.scores[result.chosen_attribute]]
        assert result.chosen_attribute == ties[0]
        assert result.success == (result.pred_generated != ex.label)
        assert result.originally_misclassified == (result.pred_original != ex.label)
        assert result.pred_original == predict(clf, ex.tokens)
        assert result.generated_text == data.vocab.decode_to_text(result.generated_ids)
        assert result.label_drift is not None


def test_generate_attack_deterministic(env):
    data, gen, clf = env
    one = generate_attack(data[3], gen, clf, data.vocab)
    two = generate_attack(data[3], gen, clf, data.vocab)
    assert one.to_json() == two.to_json()


def test_filter_successful_definitional(env):
    data, gen, clf = env
    results = [generate_attack(ex, gen, clf, data.vocab) for ex in data.examples[:40]]
    filtered = filter_successful(results)
    assert all(r.success for r in filtered)
    assert len(filtered) + sum(1 for r in results if not r.success) == len(results)
    # the attacked model never predicts the true label on the filtered set
    hits = sum(1 for r in filtered if predict(clf, r.generated_ids) == r.label)
    assert hits == 0
    # filtered fraction complements accuracy over the generated outputs
    accuracy_on_generated = sum(
        1 for r in results if predict(clf, r.generated_ids) == r.label) / len(results)
    assert len(filtered) / len(results) == pytest.approx(1 - accuracy_on_generated)


def test_success_rate_excludes_misclassified():
    def rec(success, mis):
        return AttackResult(method="controlled", original_text="t", original_ids=[4],
                            label=0, attribute=0, scores={1: 0.5}, chosen_attribute=1,
                            generated_ids=[5], generated_text="x", pred_original=1 if mis else 0,
                            pred_generated=1 if success else 0, success=success,
                            originally_misclassified=mis)

    results = [rec(True, False), rec(False, False), rec(True, True), rec(True, False)]
    assert success_rate(results) == pytest.approx(2 / 3)
    with pytest.raises(ValueError, match="no valid"):
        success_rate([rec(True, True)])
    summary = summarize(results)
    assert summary["n_valid"] == 3
    assert summary["n_success"] == 2
    assert summary["chosen_attribute_histogram"] == {"1": 4}


def test_label_drift_oracle():
    lex = {0: {"good", "nice"}, 1: {"bad", "awful"}}
    assert check_label_drift("a good thing", 0, lex) is False
    assert check_label_drift("a bad thing", 0, lex) is True          # opposite outnumbers
    assert check_label_drift("plain thing", 0, lex) is True          # own words vanished
    assert check_label_drift("good and bad", 0, lex) is False        # tie retained
    assert check_label_drift("whatever", 0, None) is None


def test_attack_jsonl_round_trip(tmp_path, env):
    data, gen, clf = env
    results = [generate_attack(ex, gen, clf, data.vocab) for ex in data.examples[:10]]
    path = tmp_path / "attacks.jsonl"
    write_attack_jsonl(results, path, meta={"config_hash": "h", "seed": 0})
    again, meta = read_attack_jsonl(path)
    assert meta == {"config_hash": "h", "seed": 0}
    assert [r.to_json() for r in again] == [r.to_json() for r in results]
    first = json.loads(path.read_text().splitlines()[0])
    assert first["_meta"]["seed"] == 0


def test_attack_examples_dataset(env):
    data, gen, clf = env
    results = [generate_attack(ex, gen, clf, data.vocab) for ex in data.examples[:8]]
    ds = attack_examples(results, data.label_names, data.attribute_names, data.vocab)
    assert len(ds) == 8
    assert [ex.label for ex in ds] == [r.label for r in results]
    assert [ex.tokens for ex in ds] == [r.generated_ids for r in results]
