"""Adam, the live+synthetic training loop, and the lambda sweep."""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from . import network as nw
from .errors import ProtocolError, UsageError
from .losses import CenterBank, center_update, joint_loss_terms
from .tensor import NumericError

log = logging.getLogger(__name__)

TRAIN_CLASSES = {"live": nw.LIVE, "synthetic": nw.SPOOF}
DEFAULT_GRID = (0.0, 0.001, 0.00411, 0.01, 0.0411, 0.1, 0.411, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 32
    lam: float = 0.0411
    seed: int = 0
    s: float = 30.0
    m: float = 0.3
    alpha: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        if self.lam < 0:
            raise UsageError("lambda must be non-negative")

    def to_dict(self):
        return {f"train.{k}": v for k, v in asdict(self).items()}


@dataclass
class LabeledImages:
    """Images (n, C, H, W) with their manifest class names and ids."""

    images: np.ndarray
    classes: list
    ids: list = field(default_factory=list)
    species: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        pick = lambda seq: [seq[i] for i in idx] if seq else []  # noqa: E731
        return LabeledImages(self.images[idx], pick(self.classes), pick(self.ids), pick(self.species))


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, state, lr, names=None):
    """One bias-corrected Adam update using each parameter's ``.grad``.

    Missing gradients count as zero. Raises NumericError naming the first
    parameter with a non-finite gradient.
    """
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
        grads.append(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def encode_labels(data):
    bad = sorted({c for c in data.classes if c not in TRAIN_CLASSES})
    if bad:
        raise ProtocolError(
            f"training data may only contain live and synthetic samples, found {bad}"
        )
    return np.array([TRAIN_CLASSES[c] for c in data.classes], dtype=np.int64)


@dataclass
class TrainResult:
    net: nw.Network
    bank: CenterBank
    log: list  # (epoch, joint, arcface, center)


def train(net, data, cfg, bank=None):
    """Train ``net`` (and its ArcFace head) on live + synthetic data.

    Per batch: forward, joint loss, backward, Adam step, center update and
    head column renormalization.
    """
    labels = encode_labels(data)
    head = net.head
    head.s, head.m = cfg.s, cfg.m
    if bank is None:
        bank = CenterBank(net.config.classes, net.config.embedding_dim, cfg.alpha)
    params = net.parameters()
    names = list(net.params) + ["head.w"]
    state = AdamState(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = len(data)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            y = labels[idx]
            net.zero_grad()
            emb, _ = nw.forward(net, data.images[idx], mode="train")
            joint, la, lc, _ = joint_loss_terms(emb, y, head, bank, cfg.lam)
            if not math.isfinite(joint.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            joint.backward()
            adam_step(params, state, cfg.lr, names)
            center_update(bank, emb.data, y)
            head.renormalize()
            sums += (joint.item(), la.item(), lc.item())
            batches += 1
        row = (epoch, *(float(v) for v in sums / batches))
        history.append(row)
        log.debug("epoch %d joint %.6f arcface %.6f center %.6f", *row)
    return TrainResult(net=net, bank=bank, log=history)


def format_loss_log(history):
    return "".join(f"{e}\t{float(j)!r}\t{float(a)!r}\t{float(c)!r}\n" for e, j, a, c in history)


def validation_scoreset(net, data):
    """Bona fide = live samples; attacks grouped by species (synthetic for val)."""
    scores = nw.score(net, data.images)
    bona = [s for s, c in zip(scores, data.classes) if c == "live"]
    attacks = {}
    for i, (s, c) in enumerate(zip(scores, data.classes)):
        if c == "live":
            continue
        species = (data.species[i] if data.species and data.species[i] else c)
        attacks.setdefault(species, []).append(s)
    return metrics.ScoreSet(bona, attacks)


def intra_class_spread(net, data):
    """Mean distance of normalized embeddings to their class mean, averaged over classes."""
    emb = nw.embed_batches(net, data.images)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    classes = np.array(data.classes)
    spreads = []
    for c in sorted(set(data.classes)):
        e = emb[classes == c]
        spreads.append(np.linalg.norm(e - e.mean(axis=0), axis=1).mean())
    return float(np.mean(spreads))


def lambda_seed(seed, index):
    return int(np.random.SeedSequence([seed, 7919, index]).generate_state(1)[0])


@dataclass
class SweepEntry:
    lam: float
    seed: int
    auc: float
    roc: metrics.RocCurve
    threshold: float
    log: list


@dataclass
class SweepResult:
    entries: list
    selected: float

    def summary_csv(self):
        lines = ["lambda,auc,selected\n"]
        for e in self.entries:
            lines.append(f"{float(e.lam)!r},{float(e.auc)!r},{int(e.lam == self.selected)}\n")
        return "".join(lines)


def _sweep_one(args):
    index, lam, net_cfg, cfg, train_data, val_data = args
    seed = lambda_seed(cfg.seed, index)
    run_cfg = replace(cfg, lam=lam, seed=seed)
    net = nw.build(net_cfg, seed=seed, s=run_cfg.s, m=run_cfg.m)
    result = train(net, train_data, run_cfg)
    val = validation_scoreset(net, val_data)
    curve = metrics.roc(val)
    thr = metrics.select_threshold(val)
    return SweepEntry(lam=lam, seed=seed, auc=curve.auc, roc=curve, threshold=thr, log=result.log)


def select_lambda(entries):
    """Highest AUC wins; ties go to the smaller lambda."""
    best = max(entries, key=lambda e: (e.auc, -e.lam))
    return best.lam


def sweep_lambda(grid, net_cfg, cfg, train_data, val_data, workers=1):
    """Train one model per lambda and select by validation AUC.

    Each grid entry gets its own seed derived from ``(cfg.seed, index)``, so
    results do not depend on ``workers``.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise UsageError("lambda grid must be non-empty")
    if any(v < 0 for v in grid):
        raise UsageError(f"lambda values must be non-negative: {grid}")
    kinds = set(val_data.classes)
    if "live" not in kinds or not kinds - {"live"}:
        raise UsageError("validation split needs bona fide and at least one attack source")
    jobs = [(i, lam, net_cfg, cfg, train_data, val_data) for i, lam in enumerate(grid)]
    workers = min(workers or os.cpu_count() or 1, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_sweep_one, jobs))
    else:
        entries = [_sweep_one(j) for j in jobs]
    return SweepResult(entries=entries, selected=select_lambda(entries))
