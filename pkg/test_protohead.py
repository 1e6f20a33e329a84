import math

import numpy as np
import pytest

from autodiff import Module, Tensor, backward, gradcheck
from config import LossConfig
from errors import ConfigurationError, ContractError, DimensionError
from protohead import (PrototypeBank, PrototypeClassifier, ProjectionHead, class_probability, classify_nearest,
                       combined_loss, cross_entropy, dce_loss, dce_loss_from_distances, distances, pl_loss,
                       prototype_probabilities)

F64 = np.float64


def bank_of(prototypes, gamma=1.0, lam=None):
    prototypes = np.asarray(prototypes, dtype=F64)
    c, k, d = prototypes.shape
    bank = PrototypeBank(c, k, d, gamma=gamma, lam=lam, dtype=F64)
    bank.prototypes.data = prototypes.copy()
    return bank


def dist_tensor(values):
    return Tensor(np.asarray(values, dtype=F64), dtype=F64)


# -------------------------------------------------------------- distances

def test_distance_examples():
    bank = bank_of([[[1.0, 0.0, 0.0]], [[0.0, 2.0, 0.0]]])
    d = distances(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), bank).data
    assert d[0, 0, 0] == 0.0
    assert d[1, 0, 0] == 1.0
    assert d[1, 1, 0] == 4.0


def test_distances_match_nested_loops():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(2, 3, 4))
    z = rng.normal(size=(6, 4))
    d = distances(z, bank_of(protos)).data
    for b in range(6):
        for i in range(2):
            for j in range(3):
                assert d[b, i, j] == pytest.approx(np.sum((z[b] - protos[i, j]) ** 2), abs=1e-6)


def test_distances_reject_dimension_mismatch():
    with pytest.raises(DimensionError):
        distances(np.zeros((2, 4)), PrototypeBank(dim=3))


def test_bank_validation_and_default_lambda():
    assert PrototypeBank().lam == pytest.approx(1.0)
    assert PrototypeBank(dim=100).lam == pytest.approx(0.03)
    assert PrototypeBank().prototypes.shape == (2, 1, 3)
    for kwargs in ({"gamma": 0.0}, {"lam": -1.0}, {"num_classes": 1}, {"per_class": 0}):
        with pytest.raises(ConfigurationError):
            PrototypeBank(**kwargs)


# ---------------------------------------------------------- probabilities

def test_equal_distances_are_uniform():
    p = prototype_probabilities(dist_tensor(np.full((3, 2, 2), 5.0)), 1.0).data
    np.testing.assert_allclose(p, 0.25)
    np.testing.assert_allclose(class_probability(p).data, 0.5)


def test_two_class_example():
    p = prototype_probabilities(dist_tensor([[[1.0], [2.0]]]), 1.0).data
    np.testing.assert_allclose(p[0, :, 0], [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_array_equal(class_probability(p).data, p[..., 0])


def test_large_gamma_concentrates_on_nearest():
    p = prototype_probabilities(dist_tensor([[[1.0], [2.0]]]), 100.0).data
    assert p[0, 0, 0] > 1 - 1e-6


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_probabilities_partition(scale):
    rng = np.random.default_rng(1)
    dist = rng.uniform(0.0, 1.0, size=(1000, 2, 2)) * scale
    dist[0] = [[0.0, 1e6], [1e6, 1e6]]
    p = prototype_probabilities(dist_tensor(dist), 1.0).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=(1, 2)), 1.0, atol=1e-6)
    np.testing.assert_allclose(class_probability(p).data.sum(axis=1), 1.0, atol=1e-6)


def test_probabilities_strictly_inside_unit_interval():
    dist = np.random.default_rng(2).uniform(0.0, 5.0, size=(200, 2, 3))
    p = prototype_probabilities(dist_tensor(dist), 1.0).data
    assert np.all(p > 0) and np.all(p < 1)


def test_probabilities_reject_bad_gamma():
    with pytest.raises(ConfigurationError):
        prototype_probabilities(dist_tensor(np.ones((1, 2, 1))), 0.0)


@pytest.mark.parametrize("gamma", [0.01, 1.0, 100.0])
def test_decision_invariant_to_gamma(gamma):
    rng = np.random.default_rng(3)
    protos = rng.normal(size=(2, 1, 3))
    bank = bank_of(protos, gamma=gamma)
    z = rng.normal(size=(500, 3))
    dist = distances(z, bank)
    probs = class_probability(prototype_probabilities(dist, gamma)).data
    np.testing.assert_array_equal(np.argmax(probs, axis=1), np.argmin(dist.data[..., 0], axis=1))
    np.testing.assert_array_equal(classify_nearest(z, bank), np.argmax(probs, axis=1))


# ----------------------------------------------------------------- losses

def test_dce_examples():
    assert dce_loss(dist_tensor([[0.5, 0.5]]), [1]).item() == pytest.approx(math.log(2.0))
    assert dce_loss(dist_tensor([[0.7311, 0.2689]]), [0]).item() == pytest.approx(0.3133, abs=1e-4)
    assert dce_loss(dist_tensor([[1.0 - 1e-12, 1e-12]]), [0]).item() == pytest.approx(0.0, abs=1e-9)
    dist = dist_tensor([[[1.0], [2.0]]])
    assert dce_loss_from_distances(dist, [0], 1.0).item() == pytest.approx(math.log1p(math.exp(-1.0)))
    assert dce_loss_from_distances(dist_tensor(np.full((4, 2, 1), 3.0)), [0, 1, 0, 1], 1.0).item() == \
        pytest.approx(math.log(2.0))


def test_log_space_dce_agrees_with_probability_path():
    rng = np.random.default_rng(4)
    dist = dist_tensor(rng.uniform(0, 4, size=(16, 2, 2)))
    labels = rng.integers(0, 2, size=16)
    direct = dce_loss(class_probability(prototype_probabilities(dist, 1.5)), labels).item()
    assert dce_loss_from_distances(dist, labels, 1.5).item() == pytest.approx(direct, rel=1e-9)


def test_dce_stable_for_huge_distances():
    loss = dce_loss_from_distances(dist_tensor([[[1e6], [0.0]]]), [0], 1.0).item()
    assert loss == pytest.approx(1e6)


def test_labels_out_of_range():
    with pytest.raises(ContractError):
        dce_loss(dist_tensor([[0.5, 0.5]]), [2])
    with pytest.raises(ContractError):
        pl_loss(np.zeros((1, 3)), [-1], PrototypeBank())


def test_pl_examples():
    bank = bank_of([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]])
    assert pl_loss(np.array([[1.0, 0.0, 0.0]]), [0], bank).item() == 0.0
    assert pl_loss(np.array([[0.0, 0.0, 0.0]]), [0], bank).item() == pytest.approx(1.0)


def test_pl_picks_nearest_correct_prototype():
    rng = np.random.default_rng(5)
    protos = rng.normal(size=(2, 2, 3))
    z = rng.normal(size=(50, 3))
    labels = rng.integers(0, 2, size=50)
    brute = np.mean([min(np.sum((z[b] - protos[labels[b], j]) ** 2) for j in range(2)) for b in range(50)])
    assert pl_loss(z, labels, bank_of(protos)).item() == pytest.approx(brute, rel=1e-9)


def test_combined_loss_example():
    bank = bank_of([[[1.0, 0.0, 0.0]], [[math.sqrt(2.0), 0.0, 0.0]]], lam=1.0)
    loss = combined_loss(np.zeros((1, 3)), [0], bank).item()
    assert loss == pytest.approx(1.3133, abs=1e-4)


def test_zero_lambda_reproduces_dce_bitwise():
    rng = np.random.default_rng(6)
    bank = bank_of(rng.normal(size=(2, 1, 3)), lam=0.0)
    z = rng.normal(size=(8, 3))
    labels = rng.integers(0, 2, size=8)
    combined = combined_loss(z, labels, bank).data
    dce = dce_loss_from_distances(distances(z, bank), labels, bank.gamma).data
    assert combined.tobytes() == dce.tobytes()


@pytest.mark.parametrize("seed", range(20))
def test_combined_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    bank = bank_of(rng.normal(size=(2, 2, 3)), gamma=float(rng.uniform(0.5, 2.0)), lam=1.0)
    z = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=F64)
    labels = rng.integers(0, 2, size=5)
    assert gradcheck(lambda: combined_loss(z, labels, bank), [bank.prototypes, z]) < 1e-4


@pytest.mark.parametrize("lr", [0.01, 0.1, 0.4])
def test_prototype_step_reduces_pl(lr):
    rng = np.random.default_rng(7)
    bank = bank_of(rng.normal(size=(2, 1, 3)))
    z = rng.normal(size=(12, 3))
    labels = np.array([0, 1] * 6)
    before = pl_loss(z, labels, bank)
    backward(before)
    bank.prototypes.data = bank.prototypes.data - lr * bank.prototypes.grad
    assert pl_loss(z, labels, bank).item() < before.item()


def test_translation_equivariance():
    rng = np.random.default_rng(8)
    protos = rng.normal(size=(2, 2, 3))
    z = rng.normal(size=(20, 3))
    labels = rng.integers(0, 2, size=20)
    shift = np.array([5.0, -3.0, 0.5])
    a, b = bank_of(protos), bank_of(protos + shift)
    np.testing.assert_allclose(distances(z, a).data, distances(z + shift, b).data, atol=1e-6)
    assert combined_loss(z, labels, a).item() == pytest.approx(combined_loss(z + shift, labels, b).item(), abs=1e-6)
    np.testing.assert_array_equal(classify_nearest(z, a), classify_nearest(z + shift, b))


# --------------------------------------------------------- classification

def test_classify_examples():
    bank = bank_of([[[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]]])
    assert classify_nearest(np.array([[1.0, 1.0, 1.0]]), bank)[0] == 1
    assert classify_nearest(np.array([[0.5, 0.5, 0.5]]), bank)[0] == 0


def test_classify_matches_brute_force():
    rng = np.random.default_rng(9)
    protos = rng.normal(size=(2, 2, 3))
    z = rng.normal(size=(1000, 3))
    brute = [int(np.argmin([np.sum((zz - protos[i, j]) ** 2) for i in range(2) for j in range(2)]) // 2)
             for zz in z]
    np.testing.assert_array_equal(classify_nearest(z, bank_of(protos)), brute)


def test_cross_entropy_matches_manual():
    logits = np.array([[2.0, 0.5], [0.1, 0.3]])
    manual = -np.mean([2.0 - np.log(np.exp(2.0) + np.exp(0.5)), 0.3 - np.log(np.exp(0.1) + np.exp(0.3))])
    assert cross_entropy(dist_tensor(logits), [0, 1]).item() == pytest.approx(manual)


# ------------------------------------------------------------------- heads

def test_projection_head_layouts():
    linear = ProjectionHead(128, 3)
    mlp = ProjectionHead(128, 3, mode="mlp3")
    assert len(linear.layers) == 1 and linear.out_dim == 3
    assert [(l.in_features, l.out_features) for l in mlp.layers] == [(128, 64), (64, 16), (16, 3)]
    assert mlp(Tensor(np.zeros((2, 128)))).shape == (2, 3)
    with pytest.raises(ConfigurationError):
        ProjectionHead(128, 3, mode="deep")


class _Features(Module):
    output_dim = 4

    def forward(self, x):
        return x


def test_classifier_checks_projection_width():
    with pytest.raises(DimensionError):
        PrototypeClassifier(_Features(), ProjectionHead(4, 5), PrototypeBank(dim=3))


def test_prediction_target_uses_predicted_labels():
    rng = np.random.default_rng(10)
    proj = ProjectionHead(4, 3, rng=rng, dtype=F64)
    bank = bank_of(rng.normal(size=(2, 1, 3)))
    model = PrototypeClassifier(_Features(), proj, bank, LossConfig(pl_target="prediction"))
    x = Tensor(rng.normal(size=(6, 4)), dtype=F64)
    labels = np.array([0, 1, 0, 1, 0, 1])
    z = proj(x)
    expected = combined_loss(z, labels, bank, pl_labels=classify_nearest(z, bank)).item()
    assert model.loss(x, labels).item() == pytest.approx(expected)
    assert set(model.predict(x)) <= {0, 1}
    np.testing.assert_allclose(model.class_probabilities(x).sum(axis=1), 1.0)


def test_swin_prototype_loss_gradcheck():
    from encoder import TinySwin, TinySwinConfig

    rng = np.random.default_rng(14)
    cfg = TinySwinConfig(img_size=8, patch_size=2, window_size=2, embed_dim=4, depths=(2, 1), heads=(1, 2),
                         mlp_ratio=2.0, output_dim=5)
    model = PrototypeClassifier(TinySwin(cfg, rng, dtype=F64), ProjectionHead(5, 3, "mlp3", rng=rng, hidden=(4, 4),
                                                                             dtype=F64),
                                PrototypeBank(dim=3, rng=rng, dtype=F64))
    x = Tensor(rng.uniform(-1, 1, size=(3, 1, 8, 8)), dtype=F64)
    labels = np.array([0, 1, 1])
    assert gradcheck(lambda: model.loss(x, labels), model.parameters(), max_coords=5) < 1e-4
