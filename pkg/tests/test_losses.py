import math

import numpy as np
import pytest

from livepad import losses as L
from livepad import tensor as T
from livepad.errors import DegenerateInputError, UsageError

import gradsuite


def head_from(cols, s=1.0, m=0.0):
    return L.ArcFaceHead(np.array(cols, dtype=float), s=s, m=m)


def reference_arcface(x, w, labels, s, m):
    """Plain-numpy evaluation of the margin softmax loss."""
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    w = w / np.linalg.norm(w, axis=0, keepdims=True)
    cos = np.clip(x @ w, -1 + 1e-7, 1 - 1e-7)
    logits = cos.copy()
    rows = np.arange(len(labels))
    theta = np.clip(np.arccos(cos[rows, labels]) + m, 0.0, math.pi)
    logits[rows, labels] = np.cos(theta)
    logits *= s
    mx = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - mx).sum(axis=1)) + mx[:, 0]
    return float(np.mean(lse - logits[rows, labels]))


def test_arcface_two_class_example():
    head = head_from([[1.0, 0.0], [0.0, 1.0]])
    loss, logits = L.arcface_loss(np.array([[1.0, 0.0]]), [0], head)
    np.testing.assert_allclose(logits.data, [[1 - 1e-7, 0.0]], atol=1e-12)
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)


def test_arcface_equidistant_is_log2():
    head = head_from([[1.0, 0.0], [0.0, 1.0]])
    loss, _ = L.arcface_loss(np.array([[1.0, 1.0]]), [1], head)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_arcface_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 5))
        x = rng.standard_normal((6, 4))
        w = rng.standard_normal((4, n))
        labels = rng.integers(0, n, 6)
        s, m = float(rng.uniform(1, 40)), float(rng.uniform(0, 1.2))
        head = L.ArcFaceHead(w, s=s, m=m)
        loss, _ = L.arcface_loss(x, labels, head)
        assert loss.item() == pytest.approx(reference_arcface(x, w, labels, s, m), rel=1e-12)


def test_margin_never_lowers_loss_over_theta_sweep():
    # theta_y in [0, pi - m], away from the cosine clamp near theta = 0
    w = np.eye(2)
    for theta in np.linspace(1e-3, math.pi - 0.3, 400):
        x = np.array([[math.cos(theta), math.sin(theta)]])
        with_margin = L.arcface_loss(x, [0], L.ArcFaceHead(w, s=30.0, m=0.3))[0].item()
        without = L.arcface_loss(x, [0], L.ArcFaceHead(w, s=30.0, m=0.0))[0].item()
        assert with_margin >= without


def test_arcface_loss_positive_and_scale_invariant():
    rng = np.random.default_rng(1)
    head = L.ArcFaceHead(rng.standard_normal((4, 2)), s=30.0, m=0.3)
    x = rng.standard_normal((5, 4))
    labels = rng.integers(0, 2, 5)
    base = L.arcface_loss(x, labels, head)[0].item()
    assert base > 0
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert L.arcface_loss(x * c, labels, head)[0].item() == pytest.approx(base, abs=1e-9)


def test_arcface_errors():
    head = head_from([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateInputError, match=r"\[1\]"):
        L.arcface_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), [0, 1], head)
    with pytest.raises(UsageError):
        L.arcface_loss(np.array([[1.0, 0.0]]), [2], head)
    with pytest.raises(UsageError):
        L.ArcFaceHead(np.eye(2), s=0.0)
    with pytest.raises(UsageError):
        L.ArcFaceHead(np.eye(2), m=math.pi / 2)


def test_head_columns_are_unit_norm():
    rng = np.random.default_rng(2)
    head = L.ArcFaceHead(rng.standard_normal((6, 3)) * 5)
    np.testing.assert_allclose(np.linalg.norm(head.weights.data, axis=0), 1.0, atol=1e-12)
    head.weights.data *= 3.0
    head.renormalize()
    np.testing.assert_allclose(np.linalg.norm(head.weights.data, axis=0), 1.0, atol=1e-12)


def test_center_loss_examples():
    bank = L.CenterBank(2, 2)
    bank.centers = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert L.center_loss(np.array([[2.0, 0.0], [0.0, 3.0]]), [0, 1], bank).item() == 0.0
    # normalized embedding (0, 1) against center (0, 0): distance 1
    bank.centers = np.zeros((2, 2))
    assert L.center_loss(np.array([[0.0, 5.0]]), [1], bank).item() == pytest.approx(0.5)


def test_center_loss_is_a_sum_and_gradient_matches_closed_form():
    rng = np.random.default_rng(3)
    bank = L.CenterBank(3, 4)
    bank.centers = rng.standard_normal((3, 4)) * 0.3
    x = rng.standard_normal((5, 4))
    labels = rng.integers(0, 3, 5)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    d = xn - bank.centers[labels]
    t = T.Tensor(xn, requires_grad=True)
    loss = L.center_loss(t, labels, bank)
    assert loss.item() == pytest.approx(0.5 * (d * d).sum(), rel=1e-12)
    loss.backward()
    # on unit rows the gradient is (x - c) projected onto the tangent space
    proj = d - (d * xn).sum(axis=1, keepdims=True) * xn
    np.testing.assert_allclose(t.grad, proj, atol=1e-12)
    assert gradsuite.run_case("center_loss", 0) < 1e-6


def test_center_update_rule():
    bank = L.CenterBank(3, 2, alpha=1.0)
    bank.centers = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    x = np.array([[0.0, 2.0], [0.0, -3.0]])  # normalize to (0, 1), (0, -1)
    L.center_update(bank, x, [0, 1])
    np.testing.assert_allclose(bank.centers[0], [0.0, 0.5])  # midpoint of c and x
    np.testing.assert_allclose(bank.centers[1], [0.5, -0.5])
    np.testing.assert_array_equal(bank.centers[2], [5.0, 5.0])  # absent class unchanged


def test_center_update_converges_to_batch_mean():
    rng = np.random.default_rng(4)
    bank = L.CenterBank(2, 3, alpha=0.5)
    x = rng.standard_normal((6, 3))
    labels = np.array([0, 0, 0, 1, 1, 1])
    for _ in range(200):
        L.center_update(bank, x, labels)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    np.testing.assert_allclose(bank.centers[0], xn[:3].mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(bank.centers[1], xn[3:].mean(axis=0), atol=1e-10)


def test_center_bank_alpha_range():
    with pytest.raises(UsageError):
        L.CenterBank(2, 2, alpha=0.0)
    with pytest.raises(UsageError):
        L.CenterBank(2, 2, alpha=1.5)


def _setup(seed):
    rng = np.random.default_rng(seed)
    head = L.ArcFaceHead(rng.standard_normal((4, 2)), s=30.0, m=0.3)
    bank = L.CenterBank(2, 4)
    bank.centers = rng.standard_normal((2, 4)) * 0.4
    return rng.standard_normal((6, 4)), rng.integers(0, 2, 6), head, bank


def test_joint_loss_identities():
    x, y, head, bank = _setup(5)
    la = L.arcface_loss(x, y, head)[0].item()
    lc = L.center_loss(x, y, bank).item()
    assert L.joint_loss(x, y, head, bank, 0.0)[0].item() == la
    j1 = L.joint_loss(x, y, head, bank, 0.0411)[0].item()
    j2 = L.joint_loss(x, y, head, bank, 0.0822)[0].item()
    assert j1 == la + 0.0411 * lc
    assert j2 - j1 == pytest.approx(0.0411 * lc, rel=1e-12)
    with pytest.raises(UsageError):
        L.joint_loss(x, y, head, bank, -0.1)


def test_joint_loss_non_decreasing_in_lambda():
    x, y, head, bank = _setup(6)
    values = [L.joint_loss(x, y, head, bank, lam)[0].item() for lam in np.linspace(0, 2, 21)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_joint_loss_config_defaults():
    cfg = L.JointLossConfig()
    assert (cfg.lam, cfg.s, cfg.m, cfg.alpha) == (0.0411, 30.0, 0.3, 0.5)
    with pytest.raises(UsageError):
        L.JointLossConfig(lam=-1.0)
