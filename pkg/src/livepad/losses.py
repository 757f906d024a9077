"""ArcFace + center joint loss.

``joint = arcface + lam * center`` where

* arcface is softmax cross-entropy over ``s * cos(theta_j)`` logits, the
  target class angle receiving an additive margin ``m`` before the cosine;
* center is ``0.5 * sum_i ||x_i - c_{y_i}||^2`` over the batch (a sum, not
  a mean).

Both terms see L2-normalized embeddings. Centers are not trained by
backprop; ``center_update`` moves them after each batch.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, UsageError

COS_EPS = 1e-7


class ArcFaceHead:
    """Class weight matrix (D x N) plus scale ``s`` and angular margin ``m``."""

    def __init__(self, weights, s=30.0, m=0.3):
        if not s > 0:
            raise UsageError(f"scale s must be positive, got {s}")
        if not 0.0 <= m < math.pi / 2:
            raise UsageError(f"margin m must lie in [0, pi/2), got {m}")
        self.weights = weights if isinstance(weights, T.Tensor) else T.Tensor(weights)
        self.weights.requires_grad = True
        self.s = float(s)
        self.m = float(m)
        self.renormalize()

    @classmethod
    def init(cls, dim, classes, rng, s=30.0, m=0.3):
        return cls(rng.standard_normal((dim, classes)), s=s, m=m)

    @property
    def dim(self):
        return self.weights.shape[0]

    @property
    def classes(self):
        return self.weights.shape[1]

    def renormalize(self):
        w = self.weights.data
        w /= np.sqrt((w * w).sum(axis=0, keepdims=True))


class CenterBank:
    """One center per class in the normalized embedding space."""

    def __init__(self, classes, dim, alpha=0.5):
        if not 0.0 < alpha <= 1.0:
            raise UsageError(f"center learning rate alpha must lie in (0, 1], got {alpha}")
        self.centers = np.zeros((classes, dim))
        self.alpha = float(alpha)


@dataclass(frozen=True)
class JointLossConfig:
    lam: float = 0.0411
    s: float = 30.0
    m: float = 0.3
    alpha: float = 0.5

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError(f"lambda must be non-negative, got {self.lam}")


def _check_labels(labels, n_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise UsageError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise UsageError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    return labels.astype(np.int64)


def normalize_embeddings(embeddings):
    embeddings = T.as_tensor(embeddings)
    norms = np.sqrt((embeddings.data**2).sum(axis=1))
    if np.any(norms == 0.0):
        rows = np.flatnonzero(norms == 0.0).tolist()
        raise DegenerateInputError(f"zero-norm embedding rows: {rows}")
    return T.l2_normalize(embeddings, axis=1)


def cosine_logits(embeddings, head):
    """Clamped cosines between normalized rows and normalized weight columns."""
    x = normalize_embeddings(embeddings)
    w = T.l2_normalize(head.weights, axis=0)
    return T.clip(x @ w, -1.0 + COS_EPS, 1.0 - COS_EPS)


def arcface_logits(embeddings, labels, head, margin=None):
    m = head.m if margin is None else margin
    cos = cosine_logits(embeddings, head)
    if m == 0.0:
        return cos * head.s
    labels = _check_labels(labels, head.classes, cos.shape[0])
    onehot = np.zeros(cos.shape)
    onehot[np.arange(cos.shape[0]), labels] = 1.0
    target = (cos * onehot).sum(axis=1, keepdims=True)
    theta = T.clip(T.arccos(target) + m, 0.0, math.pi)
    return (cos + onehot * (T.cos(theta) - target)) * head.s


def arcface_loss(embeddings, labels, head):
    """Mean softmax cross-entropy over margin-adjusted scaled cosine logits.

    Returns ``(loss, logits)``.
    """
    embeddings = T.as_tensor(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise UsageError(f"embeddings must be a non-empty B x D matrix, got {embeddings.shape}")
    labels = _check_labels(labels, head.classes, embeddings.shape[0])
    logits = arcface_logits(embeddings, labels, head)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(logits.shape[0]), labels] = 1.0
    nll = T.logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)
    return nll.mean(), logits


def center_loss(embeddings, labels, bank):
    embeddings = T.as_tensor(embeddings)
    labels = _check_labels(labels, bank.centers.shape[0], embeddings.shape[0])
    diff = normalize_embeddings(embeddings) - bank.centers[labels]
    return (diff * diff).sum() * 0.5


def center_update(bank, embeddings, labels):
    """Move each present class center toward its batch members.

    ``delta_j = sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)``;
    ``c_j <- c_j - alpha * delta_j``. Embeddings are normalized first.
    """
    data = embeddings.data if isinstance(embeddings, T.Tensor) else np.asarray(embeddings, float)
    labels = _check_labels(labels, bank.centers.shape[0], data.shape[0])
    x = data / np.sqrt((data * data).sum(axis=1, keepdims=True))
    for j in np.unique(labels):
        members = x[labels == j]
        c = bank.centers[j]
        delta = (c - members).sum(axis=0) / (1.0 + len(members))
        bank.centers[j] = c - bank.alpha * delta
    return bank


def joint_loss_terms(embeddings, labels, head, bank, lam):
    """Returns ``(joint, arcface, center, logits)``."""
    if lam < 0:
        raise UsageError(f"lambda must be non-negative, got {lam}")
    la, logits = arcface_loss(embeddings, labels, head)
    lc = center_loss(embeddings, labels, bank)
    return la + lc * lam, la, lc, logits


def joint_loss(embeddings, labels, head, bank, lam):
    joint, _, _, logits = joint_loss_terms(embeddings, labels, head, bank, lam)
    return joint, logits
