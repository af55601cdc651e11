import math

import numpy as np
import pytest

from ltlab.autograd import Tensor
from ltlab.losses import (
    cross_entropy,
    estimate_prior,
    generalized_la_loss,
    la_loss,
    prop1_simulate,
    uniform_prior,
)


def test_estimate_prior_basic():
    prior = estimate_prior([3, 1])
    np.testing.assert_allclose(prior.probs, [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(estimate_prior([7, 7, 7]).probs, np.full(3, 1 / 3), atol=1e-15)
    prior = estimate_prior([500, 50, 5])
    np.testing.assert_allclose(prior.probs, np.array([500, 50, 5]) / 555.0, atol=1e-15)


def test_estimate_prior_rejects_zero_counts():
    with pytest.raises(ValueError):
        estimate_prior([3, 0])


def test_la_loss_symmetric_case():
    loss = la_loss(Tensor([0.0, 0.0]), 0, uniform_prior(2))
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_la_loss_skewed_prior():
    prior = estimate_prior([9, 1])
    loss = la_loss(Tensor([0.0, 0.0]), 1, prior)
    assert abs(loss.item() - math.log(10.0)) < 1e-12


def test_la_loss_uniform_prior_equals_cross_entropy():
    rng = np.random.default_rng(0)
    prior = uniform_prior(6)
    for _ in range(200):
        z = rng.normal(scale=4.0, size=6)
        j = int(rng.integers(0, 6))
        a = la_loss(Tensor(z), j, prior).item()
        b = cross_entropy(Tensor(z), j).item()
        assert abs(a - b) <= 1e-12


def test_loss_shift_invariance():
    rng = np.random.default_rng(1)
    prior = estimate_prior([5, 3, 2])
    for _ in range(50):
        z = rng.normal(size=3)
        j = int(rng.integers(0, 3))
        base = la_loss(Tensor(z), j, prior).item()
        shifted = la_loss(Tensor(z + 17.5), j, prior).item()
        assert abs(base - shifted) <= 1e-9


def test_la_loss_gradient_closed_form():
    rng = np.random.default_rng(2)
    prior = estimate_prior([10, 5, 1])
    for _ in range(40):
        z = Tensor(rng.normal(size=3), requires_grad=True)
        j = int(rng.integers(0, 3))
        la_loss(z, j, prior).backward()
        adjusted = z.data + prior.log_probs
        p = np.exp(adjusted - adjusted.max())
        p /= p.sum()
        onehot = np.eye(3)[j]
        np.testing.assert_allclose(z.grad, p - onehot, atol=1e-9)


def test_generalized_with_unit_ratio_is_bitwise_equal():
    rng = np.random.default_rng(3)
    prior = estimate_prior([4, 2, 2])
    for _ in range(50):
        z = rng.normal(size=3)
        j = int(rng.integers(0, 3))
        a = la_loss(Tensor(z), j, prior).item()
        b = generalized_la_loss(Tensor(z), j, prior, np.ones(3)).item()
        assert a == b


def test_generalized_underestimation_direction():
    prior = uniform_prior(3)
    z = Tensor([0.3, -0.2, 0.1])
    base = la_loss(z, 1, prior).item()
    bigger = generalized_la_loss(z, 1, prior, np.array([1.0, 0.5, 1.0])).item()
    assert bigger > base  # the plain adjusted loss underestimates class 1


def test_generalized_hand_value():
    loss = generalized_la_loss(Tensor([0.0, 0.0]), 1, uniform_prior(2), np.array([1.0, 0.5]))
    assert abs(loss.item() - math.log(3.0)) < 1e-12


def test_generalized_rejects_nonpositive_ratio():
    with pytest.raises(ValueError):
        generalized_la_loss(Tensor([0.0, 0.0]), 0, uniform_prior(2), np.array([1.0, 0.0]))


def test_batched_loss_is_mean_of_singles():
    rng = np.random.default_rng(4)
    prior = estimate_prior([3, 1])
    z = rng.normal(size=(5, 2))
    labels = rng.integers(0, 2, size=5)
    batched = la_loss(Tensor(z), labels, prior).item()
    singles = np.mean([la_loss(Tensor(z[i]), int(labels[i]), prior).item() for i in range(5)])
    assert abs(batched - singles) < 1e-12


# -- conditional-shift simulator ---------------------------------------------------


def test_prop1_consistent_domains_no_bias():
    prior = estimate_prior([90, 10])
    report = prop1_simulate([0.0, 2.0], [1.0, 1.0], [0.0, 2.0], [1.0, 1.0], prior)
    assert report.threshold_shift == 0.0
    assert report.tail_recall_drop == 0.0
    assert report.threshold_target == 1.0  # equal variances cross at the midpoint
    assert report.quadrature_rel_error <= 1e-6


def test_prop1_shrunk_tail_conditional():
    prior = estimate_prior([90, 10])
    report = prop1_simulate([0.0, 2.0], [1.0, 0.5], [0.0, 2.0], [1.0, 1.0], prior)
    assert report.tail_class == 1
    assert report.quadrature_rel_error <= 1e-6
    assert report.threshold_shift > 0.0  # decision line moves into tail territory
    assert report.tail_recall_source_rule < report.tail_recall_optimal
    assert report.tail_recall_drop > 0.0
    # closed-form recall sanity: optimal rule keeps Phi(1) of the tail class
    assert abs(report.tail_recall_optimal - 0.8413447460685429) < 1e-12


def test_prop1_mirrored_configuration():
    prior = estimate_prior([90, 10])
    base = prop1_simulate([0.0, 2.0], [1.0, 0.5], [0.0, 2.0], [1.0, 1.0], prior)
    mirror = prop1_simulate([0.0, -2.0], [1.0, 0.5], [0.0, -2.0], [1.0, 1.0], prior)
    assert abs(mirror.threshold_shift + base.threshold_shift) < 1e-9
    assert abs(mirror.tail_recall_drop - base.tail_recall_drop) < 1e-9


def test_prop1_validation():
    prior = estimate_prior([90, 10])
    with pytest.raises(ValueError):
        prop1_simulate([0.0, 2.0], [1.0, -1.0], [0.0, 2.0], [1.0, 1.0], prior)
    with pytest.raises(ValueError):
        prop1_simulate([0.0, 1.0, 2.0], [1.0, 1.0, 1.0], [0.0, 1.0, 2.0], [1.0, 1.0, 1.0], prior)
    with pytest.raises(ValueError):
        prop1_simulate([0.0, 2.0], [1.0, 1.0], [0.0, 2.0], [1.0, 1.0], prior, quadrature_points=100)
