import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attrgen import genmodel
from attrgen.classifiers import ConvTextClassifier, TrainConfig, train_classifier
from attrgen.corpus import BOS_ID, EOS_ID, generate_synthetic
from attrgen.genmodel import (Generator, GeneratorConfig, GumbelConfig, SoftSentence,
                              StageConfig, anneal_temperature, attribute_loss, decode_soft,
                              encode, greedy_decode, gumbel_softmax, harden,
                              load_generator, pretrain, project_attribute,
                              reconstruction_loss, save_generator, train_attribute_stage)

from test_corpus import tiny_spec


def tiny_generator(vocab_size=30, num_attributes=4, seed=0, **kwargs):
    torch.manual_seed(seed)
    cfg = GeneratorConfig(vocab_size=vocab_size, num_attributes=num_attributes,
                          embed_dim=kwargs.get("embed_dim", 8),
                          hidden_dim=kwargs.get("hidden_dim", 16),
                          code_dim=kwargs.get("code_dim", 16),
                          max_decode_len=kwargs.get("max_decode_len", 12))
    return Generator(cfg)


@pytest.fixture(scope="module")
def small_data():
    train = generate_synthetic(tiny_spec(counts=60), seed=1)
    dev = generate_synthetic(tiny_spec(counts=15), seed=2, vocab=train.vocab)
    return train, dev


# ---------------------------------------------------------------------------
# encode / project


def test_encode_deterministic_and_sensitive():
    gen = tiny_generator()
    z1 = encode(gen, [4, 5, 6])
    z2 = encode(gen, [4, 5, 6])
    z3 = encode(gen, [4, 5, 7])
    assert torch.equal(z1, z2)
    assert not torch.equal(z1, z3)
    assert z1.shape == (16,)


def test_encode_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        encode(tiny_generator(), [])


def test_project_same_attribute_same_code():
    gen = tiny_generator()
    assert torch.equal(project_attribute(gen, 2), project_attribute(gen, 2))
    assert not torch.equal(project_attribute(gen, 1), project_attribute(gen, 2))


def test_project_range_check():
    gen = tiny_generator(num_attributes=3)
    with pytest.raises(ValueError, match="out of range"):
        project_attribute(gen, 3)


@pytest.mark.parametrize("k", range(2, 11))
def test_projector_output_dim_is_256_by_default(k):
    torch.manual_seed(0)
    gen = Generator(GeneratorConfig(vocab_size=10, num_attributes=k))
    assert project_attribute(gen, k - 1).shape == (256,)


# ---------------------------------------------------------------------------
# reconstruction loss


class _OneHotDecoder(genmodel.Decoder):
    """Stub: emits huge logits on the teacher targets (a perfect copier)."""

    def __init__(self, vocab_size, targets):
        super().__init__(vocab_size, 4, 4, 4, 4)
        self._targets = list(targets)

    def teacher_logits(self, z, c, teacher_ids):
        logits = torch.zeros(1, len(self._targets), self.out.out_features)
        for t, target in enumerate(self._targets):
            logits[0, t, target] = 1000.0
        return logits


def test_reconstruction_loss_zero_for_perfect_decoder():
    gen = tiny_generator(vocab_size=11)
    targets = [5, 6, EOS_ID]
    gen.decoder = _OneHotDecoder(11, targets)
    loss = reconstruction_loss(gen, torch.zeros(16), torch.zeros(16), targets)
    assert loss.item() < 1e-6


def test_reconstruction_loss_uniform_decoder_analytic():
    vocab_size = 19
    gen = tiny_generator(vocab_size=vocab_size).double()
    with torch.no_grad():
        gen.decoder.out.weight.zero_()
        gen.decoder.out.bias.zero_()
    targets = [4, 5, 6, 7, 8, EOS_ID]
    z = torch.zeros(16, dtype=torch.float64)
    c = torch.zeros(16, dtype=torch.float64)
    loss = reconstruction_loss(gen, z, c, targets)
    assert math.isclose(loss.item(), len(targets) * math.log(vocab_size), rel_tol=1e-9)


def test_reconstruction_loss_matches_brute_force():
    gen = tiny_generator(vocab_size=13, seed=3).double()
    ids = [4, 9, 6, 12]
    z = gen.encoder(torch.tensor([ids]), torch.tensor([len(ids)]))[0]
    c = gen.projector.code_for(torch.tensor([1]))[0]
    targets = ids + [EOS_ID]
    loss = reconstruction_loss(gen, z, c, targets)

    # independent step loop: feed teacher inputs one at a time
    teacher = [BOS_ID] + targets[:-1]
    hidden = gen.decoder.initial_state(z.unsqueeze(0), c.unsqueeze(0)).unsqueeze(0)
    total = 0.0
    for step, (prev, target) in enumerate(zip(teacher, targets)):
        logits, hidden = gen.decoder.step(gen.decoder.embedding(torch.tensor([prev])), hidden)
        log_probs = torch.log_softmax(logits[0], dim=-1)
        total -= log_probs[target].item()
    assert math.isclose(loss.item(), total, rel_tol=1e-9)


def test_reconstruction_loss_empty_targets():
    with pytest.raises(ValueError, match="empty"):
        reconstruction_loss(tiny_generator(), torch.zeros(16), torch.zeros(16), [])


# ---------------------------------------------------------------------------
# gumbel softmax and soft decoding


def test_gumbel_low_temperature_approaches_one_hot():
    gen = tiny_generator(seed=5)
    z = encode(gen, [4, 5, 6])
    c = project_attribute(gen, 0)
    soft = decode_soft(gen, z, c, tau=1e-4, noise_seed=None)
    rows = soft.probs.detach().numpy()
    assert (rows.max(axis=1) > 0.999).all()


def test_gumbel_high_temperature_near_uniform():
    gen = tiny_generator(seed=5, vocab_size=30)
    z = encode(gen, [4, 5, 6])
    c = project_attribute(gen, 0)
    soft = decode_soft(gen, z, c, tau=100.0, noise_seed=None, stop_at_eos=False, num_steps=5)
    rows = soft.probs.detach().numpy()
    entropy = -(rows * np.log(rows)).sum(axis=1)
    assert (entropy > 0.99 * math.log(30)).all()


def test_gumbel_softmax_sample_mean_matches_softmax():
    torch.manual_seed(7)
    logits = torch.randn(10) * 0.3
    target = torch.softmax(logits, dim=-1).numpy()
    total = np.zeros(10)
    n = 10_000
    gen = torch.Generator().manual_seed(123)
    for _ in range(n):
        total += gumbel_softmax(logits, tau=1.0, generator=gen).numpy()
    assert np.max(np.abs(total / n - target)) < 0.02


def test_gumbel_rejects_nonpositive_tau():
    with pytest.raises(ValueError, match="tau"):
        gumbel_softmax(torch.zeros(3), tau=0.0)


def test_decode_soft_rows_stochastic_and_deterministic():
    gen = tiny_generator(seed=6)
    z = encode(gen, [7, 8])
    c = project_attribute(gen, 1)
    one = decode_soft(gen, z, c, tau=0.7, noise_seed=42)
    two = decode_soft(gen, z, c, tau=0.7, noise_seed=42)
    other = decode_soft(gen, z, c, tau=0.7, noise_seed=43)
    assert torch.equal(one.probs, two.probs)
    assert not torch.equal(one.probs, other.probs)
    sums = one.probs.sum(dim=1).detach().numpy()
    assert np.allclose(sums, 1.0, atol=1e-5)
    assert len(one) <= gen.config.max_decode_len


def test_decode_soft_eos_position_consistent_with_harden():
    gen = tiny_generator(seed=8)
    z = encode(gen, [4, 9, 10])
    c = project_attribute(gen, 2)
    soft = decode_soft(gen, z, c, tau=0.5, noise_seed=3)
    ids = harden(soft)
    if soft.eos_position is not None:
        assert len(ids) == soft.eos_position
    else:
        assert len(ids) == len(soft)


def test_entropy_monotone_in_temperature():
    torch.manual_seed(9)
    logits = torch.randn(25)
    entropies = []
    for tau in (0.1, 0.3, 1.0, 3.0, 10.0):
        row = gumbel_softmax(logits, tau=tau, generator=None).numpy()
        entropies.append(float(-(row * np.log(row + 1e-20)).sum()))
    assert all(b >= a - 1e-9 for a, b in zip(entropies, entropies[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 5.0), st.integers(0, 100))
def test_decode_soft_row_stochastic_property(seed, tau, noise_seed):
    gen = tiny_generator(seed=seed % 7)
    z = encode(gen, [seed % 20 + 4, 5])
    c = project_attribute(gen, seed % 4)
    soft = decode_soft(gen, z, c, tau=tau, noise_seed=noise_seed)
    rows = soft.probs.detach().numpy()
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-4)
    assert (rows >= 0).all()


# ---------------------------------------------------------------------------
# attribute loss


class _FixedSoftClassifier(torch.nn.Module):
    """Returns a fixed log-probability row regardless of input."""

    def __init__(self, log_probs):
        super().__init__()
        self.row = torch.tensor(log_probs)

    def log_probs_soft(self, probs):
        return self.row.unsqueeze(0).expand(probs.size(0), -1)


def test_attribute_loss_perfect_classifier_zero():
    clf = _FixedSoftClassifier([0.0, -50.0])
    soft = SoftSentence(probs=torch.eye(4)[:3])
    # widen rows to a fake vocab of 4: rows are one-hot already
    assert attribute_loss(clf, soft, 0).item() == 0.0


def test_attribute_loss_uniform_classifier_ln_k():
    k = 5
    clf = _FixedSoftClassifier([math.log(1.0 / k)] * k)
    soft = SoftSentence(probs=torch.eye(6)[:2])
    assert math.isclose(attribute_loss(clf, soft, 3).item(), math.log(k), rel_tol=1e-6)


def test_attribute_loss_requires_frozen_classifier():
    clf = ConvTextClassifier(vocab_size=8, num_classes=3)
    soft = SoftSentence(probs=torch.eye(8)[:4])
    with pytest.raises(ValueError, match="frozen"):
        attribute_loss(clf, soft, 0)
    for p in clf.parameters():
        p.requires_grad_(False)
    attribute_loss(clf, soft, 0)


def test_attribute_loss_gradient_matches_finite_difference():
    torch.manual_seed(11)
    clf = ConvTextClassifier(vocab_size=20, num_classes=3, embed_dim=8, num_filters=2).double()
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    logits = torch.randn(5, 20, dtype=torch.float64, requires_grad=True)

    def loss_of(matrix):
        probs = torch.softmax(matrix / 0.8, dim=-1)
        return attribute_loss(clf, probs, 1)

    loss = loss_of(logits)
    loss.backward()
    analytic = logits.grad.clone()
    eps = 1e-5
    checked = 0
    for t in range(5):
        for v in range(0, 20, 4):
            with torch.no_grad():
                plus = logits.detach().clone()
                plus[t, v] += eps
                minus = logits.detach().clone()
                minus[t, v] -= eps
                fd = (loss_of(plus).item() - loss_of(minus).item()) / (2 * eps)
            an = analytic[t, v].item()
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue
            assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3
            checked += 1
    assert checked > 10


# ---------------------------------------------------------------------------
# harden / greedy / anneal


def test_harden_exact_ids_and_truncation():
    probs = torch.zeros(4, 9)
    probs[0, 5] = 1.0
    probs[1, 6] = 1.0
    probs[2, EOS_ID] = 1.0
    probs[3, 7] = 1.0
    assert harden(SoftSentence(probs=probs)) == [5, 6]


def test_harden_tie_breaks_lowest_id():
    probs = torch.full((1, 6), 0.0)
    probs[0, 4] = 0.5
    probs[0, 5] = 0.5
    assert harden(SoftSentence(probs=probs)) == [4]


def test_harden_matches_greedy_decode():
    gen = tiny_generator(seed=12)
    ids = [4, 11, 7, 5]
    for attribute in range(gen.config.num_attributes):
        z = encode(gen, ids)
        c = project_attribute(gen, attribute)
        soft = decode_soft(gen, z, c, tau=1e-4, noise_seed=None)
        assert harden(soft) == greedy_decode(gen, ids, attribute)


def test_anneal_temperature_schedule():
    cfg = GumbelConfig(tau0=1.0, tau_min=0.1, anneal_rate=1e-3)
    assert anneal_temperature(cfg, 0) == 1.0
    assert anneal_temperature(cfg, 10_000_000) == 0.1
    assert abs(anneal_temperature(cfg, 693) - 0.5) < 1e-3
    taus = [anneal_temperature(cfg, s) for s in range(0, 5000, 250)]
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    with pytest.raises(ValueError):
        anneal_temperature(cfg, -1)
    with pytest.raises(ValueError):
        GumbelConfig(tau0=0.05, tau_min=0.1).validate()


# ---------------------------------------------------------------------------
# training stages


def test_pretrain_zero_epochs_keeps_params(small_data):
    train, dev = small_data
    gen = tiny_generator(vocab_size=len(train.vocab), num_attributes=train.num_attributes)
    before = {k: v.clone() for k, v in gen.state_dict().items()}
    pretrain(gen, train, StageConfig(epochs=0, seed=0), dev_dataset=dev)
    for key, value in gen.state_dict().items():
        assert torch.equal(before[key], value)


def test_pretrain_improves_reconstruction(small_data):
    train, dev = small_data
    torch.manual_seed(0)
    gen = Generator(GeneratorConfig(vocab_size=len(train.vocab),
                                    num_attributes=train.num_attributes,
                                    embed_dim=32, hidden_dim=64, code_dim=32))
    metrics = pretrain(gen, train, StageConfig(epochs=5, lr=3e-3, batch_size=32, seed=1),
                       dev_dataset=dev)
    accs = metrics["dev_token_accuracy"]
    assert accs[-1] > accs[0]
    assert metrics["final_dev_token_accuracy"] == accs[-1]
    # encoded inputs stay finite after training
    z = encode(gen, dev[0].tokens)
    assert torch.isfinite(z).all()


def test_pretrain_divergence_raises(small_data):
    train, dev = small_data
    gen = tiny_generator(vocab_size=len(train.vocab), num_attributes=train.num_attributes)
    with torch.no_grad():
        gen.decoder.out.weight.fill_(float("nan"))
    with pytest.raises(RuntimeError, match="diverged"):
        pretrain(gen, train, StageConfig(epochs=1, seed=0), dev_dataset=dev)


@pytest.fixture(scope="module")
def staged(small_data):
    train, dev = small_data
    torch.manual_seed(0)
    gen = Generator(GeneratorConfig(vocab_size=len(train.vocab),
                                    num_attributes=train.num_attributes,
                                    embed_dim=32, hidden_dim=64, code_dim=32))
    pretrain(gen, train, StageConfig(epochs=8, lr=3e-3, batch_size=32, seed=1), dev_dataset=dev)
    clf, _ = train_classifier(train, TrainConfig(epochs=6, lr=0.1, seed=2), "conv",
                              target="attribute", dev_dataset=dev)
    return gen, clf


def test_attribute_stage_freezes_encoder_and_classifier(small_data, staged):
    train, dev = small_data
    gen, clf = staged
    import copy

    gen = copy.deepcopy(gen)
    clf = copy.deepcopy(clf)
    enc_before = {k: v.clone() for k, v in gen.encoder.state_dict().items()}
    dec_before = {k: v.clone() for k, v in gen.decoder.state_dict().items()}
    clf_before = {k: v.clone() for k, v in clf.state_dict().items()}
    gumbel = GumbelConfig(tau0=1.0, tau_min=0.2, anneal_rate=1e-2, noise_seed=0)
    train_attribute_stage(gen, clf, train, gumbel,
                          StageConfig(epochs=1, lr=1e-3, batch_size=32, seed=3),
                          dev_dataset=dev)
    for key, value in gen.encoder.state_dict().items():
        assert torch.equal(enc_before[key], value), "encoder changed during stage 2"
    for key, value in clf.state_dict().items():
        assert torch.equal(clf_before[key], value), "classifier changed during stage 2"
    assert any(not torch.equal(dec_before[k], v) for k, v in gen.decoder.state_dict().items())


def test_attribute_stage_zero_weight_is_reconstruction_only(small_data, staged):
    train, dev = small_data
    gen, clf = staged
    import copy

    gen = copy.deepcopy(gen)
    clf = copy.deepcopy(clf)
    before = genmodel.reconstruction_token_accuracy(gen, dev)
    gumbel = GumbelConfig(tau0=1.0, tau_min=0.2, anneal_rate=1e-2, noise_seed=0)
    metrics = train_attribute_stage(gen, clf, train, gumbel,
                                    StageConfig(epochs=1, lr=1e-3, batch_size=32,
                                                seed=4, attr_weight=0.0),
                                    dev_dataset=dev)
    assert metrics["final_dev_token_accuracy"] >= before - 0.05


def test_attribute_stage_task_extrapolation_flag(small_data, staged):
    # off by default; when enabled the task classifier joins the stage-2 loss
    train, dev = small_data
    gen, clf = staged
    import copy

    gen = copy.deepcopy(gen)
    clf = copy.deepcopy(clf)
    task_clf, _ = train_classifier(train, TrainConfig(epochs=2, lr=0.1, seed=9), "conv",
                                   target="label", dev_dataset=dev)
    assert StageConfig().task_attack_weight == 0.0
    gumbel = GumbelConfig(tau0=1.0, tau_min=0.2, anneal_rate=1e-2, noise_seed=0)
    cfg = StageConfig(epochs=1, lr=1e-3, batch_size=32, seed=5, task_attack_weight=0.5)
    before = {k: v.clone() for k, v in gen.decoder.state_dict().items()}
    task_before = {k: v.clone() for k, v in task_clf.state_dict().items()}
    metrics = train_attribute_stage(gen, clf, train, gumbel, cfg, dev_dataset=dev,
                                    task_classifier=task_clf)
    assert any(not torch.equal(before[k], v) for k, v in gen.decoder.state_dict().items())
    for key, value in task_clf.state_dict().items():
        assert torch.equal(task_before[key], value), "task classifier must stay frozen"
    assert len(metrics["train_loss"]) == 1


def test_attribute_stage_needs_two_attributes(small_data):
    train, dev = small_data
    gen = tiny_generator(vocab_size=len(train.vocab), num_attributes=1)
    clf = ConvTextClassifier(len(train.vocab), 1)
    for p in clf.parameters():
        p.requires_grad_(False)
    with pytest.raises(ValueError, match="two attributes"):
        train_attribute_stage(gen, clf, train, GumbelConfig(), StageConfig(epochs=1))


# ---------------------------------------------------------------------------
# checkpoints


def test_generator_checkpoint_round_trip(tmp_path):
    gen = tiny_generator(seed=13)
    path = tmp_path / "gen.pt"
    save_generator(gen, path, stage=1, meta={"config_hash": "x"})
    again, stage = load_generator(path, expected_stage=1,
                                  expected_vocab_size=gen.config.vocab_size)
    assert stage == 1
    for a, b in zip(gen.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)


def test_generator_checkpoint_stage_and_shape_validation(tmp_path):
    gen = tiny_generator()
    path = tmp_path / "gen.pt"
    save_generator(gen, path, stage=2)
    with pytest.raises(ValueError, match="stage"):
        load_generator(path, expected_stage=1)
    with pytest.raises(ValueError, match="vocab size"):
        load_generator(path, expected_vocab_size=999)
    with pytest.raises(ValueError, match="stage"):
        save_generator(gen, path, stage=3)
