"""Optimizer, learning-rate schedule, evaluation, and the epoch loops.

SGD with momentum: buf <- m*buf + (grad + wd*param); param <- param - lr*buf.
Weight decay is never applied to batchnorm parameters or quantizer scales,
and scales are re-clamped positive after every step. The schedule divides
the base learning rate by a fixed factor at each passed milestone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bwrf import tensor as T
from bwrf.data import Split, iter_batches
from bwrf.graft import LossWeights, top1_percent, train_step
from bwrf.quantizer import SCALE_FLOOR
from bwrf.tensor import Tensor


class SGD:
    """Momentum SGD over a model's parameter groups.

    Scale parameters (names ending in .scale) optionally use a multiplied
    learning rate and are clamped to stay positive after each update.
    """

    def __init__(self, param_groups, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, scale_lr_mult: float = 1.0):
        self.groups = list(param_groups)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.scale_lr_mult = float(scale_lr_mult)
        self.buffers = {}
        self.steps = 0

    def step(self):
        for name, p, no_decay in self.groups:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not no_decay:
                g = g + np.float32(self.weight_decay) * p.data
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
                self.buffers[name] = buf
            buf *= np.float32(self.momentum)
            buf += g
            is_scale = name.endswith(".scale")
            lr = np.float32(self.lr * (self.scale_lr_mult if is_scale else 1.0))
            p.data -= lr * buf
            if is_scale:
                np.maximum(p.data, np.float32(SCALE_FLOOR), out=p.data)
        self.steps += 1


@dataclass
class Schedule:
    milestones: tuple = (150, 225)
    factor: float = 0.1
    total_epochs: int = 300

    def __post_init__(self):
        ms = list(self.milestones)
        if ms != sorted(set(ms)):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if ms and ms[-1] >= self.total_epochs:
            raise ValueError("milestones must lie before the final epoch")


def lr_at(epoch: int, schedule: Schedule, base_lr: float) -> float:
    """base_lr times factor^(number of milestones at or before this epoch)."""
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return base_lr * schedule.factor ** passed


# -- evaluation --------------------------------------------------------------------


def evaluate(forward, split: Split, batch_size: int = 256) -> tuple:
    """(top1, top5) percentages of a logits function over a split, in order."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    hit1 = hit5 = 0
    for images, labels in iter_batches(split, batch_size):
        logits = forward(Tensor(images)).data
        k = min(5, logits.shape[1])
        top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
        hit1 += int((logits.argmax(axis=1) == labels).sum())
        hit5 += int((top == labels[:, None]).any(axis=1).sum())
    n = len(split)
    return 100.0 * hit1 / n, 100.0 * hit5 / n


def evaluate_branches(lp, fp, split: Split, batch_size: int = 256,
                      branches: tuple | None = None) -> dict:
    """Top-1 of Q, each requested graft M^k, and F in one shared-prefix pass."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    n_blocks = lp.n_blocks
    ks = tuple(branches) if branches is not None else tuple(range(1, n_blocks))
    lp.eval()
    fp.eval()
    hits = {"Q": 0, "F": 0, **{f"M{k}": 0 for k in ks}}
    for images, labels in iter_batches(split, batch_size):
        x = Tensor(images)
        features, y_q = lp.forward_collect(x)
        hits["Q"] += int((y_q.data.argmax(axis=1) == labels).sum())
        for k in ks:
            y_m = fp.forward_from_block(features[k - 1], k)
            hits[f"M{k}"] += int((y_m.data.argmax(axis=1) == labels).sum())
        y_f = fp(x)
        hits["F"] += int((y_f.data.argmax(axis=1) == labels).sum())
    n = len(split)
    return {name: 100.0 * h / n for name, h in hits.items()}


def cosine_similarities(lp, fp, split: Split, n_samples: int = 1024,
                        batch_size: int = 256) -> dict:
    """Batch-averaged cosine metrics between LP and FP features.

    For each block i: cos(x_Q_i, x_F_i) on flattened per-sample features
    (key cos_b{i}), and for i < n the graft alignment
    cos(Q_{i+1}(x_Q_i), F_{i+1}(x_Q_i)) against x_F_{i+1} replaced by the
    frozen suffix block on the LP feature (key cos_g{i}).
    """
    take = min(n_samples, len(split))
    sub = Split(split.images[:take], split.labels[:take])
    n_blocks = lp.n_blocks
    lp.eval()
    fp.eval()
    sums = {f"cos_b{i}": 0.0 for i in range(1, n_blocks + 1)}
    sums.update({f"cos_g{i}": 0.0 for i in range(1, n_blocks)})
    count = 0
    for images, _ in iter_batches(sub, batch_size):
        x = Tensor(images)
        f_lp, _ = lp.forward_collect(x)
        f_fp, _ = fp.forward_collect(x)
        batch = len(images)
        for i in range(1, n_blocks + 1):
            sums[f"cos_b{i}"] += _cos_rows(f_lp[i - 1].data, f_fp[i - 1].data) * batch
        for i in range(1, n_blocks):
            grafted = fp.blocks[i](f_lp[i - 1], False)
            sums[f"cos_g{i}"] += _cos_rows(grafted.data, f_fp[i].data) * batch
        count += batch
    return {k: v / count for k, v in sums.items()}


def _cos_rows(a: np.ndarray, b: np.ndarray) -> float:
    """Mean cosine similarity between per-sample flattened feature rows."""
    af = a.reshape(len(a), -1).astype(np.float64)
    bf = b.reshape(len(b), -1).astype(np.float64)
    num = (af * bf).sum(axis=1)
    den = np.linalg.norm(af, axis=1) * np.linalg.norm(bf, axis=1)
    den = np.where(den == 0, 1.0, den)
    return float((num / den).mean())


# -- epoch loops --------------------------------------------------------------------


def train_fp(model, train_split: Split, test_split: Split, cfg, on_epoch=None) -> list:
    """Plain cross-entropy training of the full-precision model.

    Returns one row per epoch: epoch, lr, loss, train_acc, test_acc. The
    caller follows best test accuracy for checkpoint selection.
    """
    opt = SGD(model.param_groups(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    schedule = Schedule(cfg.milestones, cfg.lr_decay, cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_at(epoch - 1, schedule, cfg.lr)
        model.train()
        losses, accs = [], []
        for images, labels in iter_batches(train_split, cfg.batch_size, rng,
                                           augment=cfg.augment):
            for _, p, _ in model.param_groups():
                p.grad = None
            logits = model(Tensor(images))
            loss = T.cross_entropy(logits, labels)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append(top1_percent(logits, labels))
        model.eval()
        top1, _ = evaluate(model, test_split, cfg.eval_batch_size)
        row = {"epoch": epoch, "lr": opt.lr, "loss": float(np.mean(losses)),
               "train_acc": float(np.mean(accs)), "test_acc": top1}
        rows.append(row)
        if on_epoch:
            on_epoch(row, model)
    return rows


def train_bwrf(lp, fp, train_split: Split, test_split: Split, cfg, w: LossWeights,
               on_epoch=None) -> list:
    """The grafted training loop (also the baseline when all toggles are off).

    Emits one row per epoch with train losses, per-branch test accuracies,
    and optional cosine metrics. The frozen FP model is audited every epoch:
    any parameter drift raises immediately.
    """
    if not fp.frozen:
        raise ValueError("the full-precision counterpart must be frozen")
    opt = SGD(lp.param_groups(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, scale_lr_mult=cfg.scale_lr_mult)
    schedule = Schedule(cfg.milestones, cfg.lr_decay, cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    fp_checksum = fp.checksum()
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_at(epoch - 1, schedule, cfg.lr)
        lp.train()
        sums = {"loss_total": [], "loss_target": [], "loss_distill": [], "train_acc_Q": []}
        for batch in iter_batches(train_split, cfg.batch_size, rng, augment=cfg.augment):
            metrics = train_step(lp, fp, batch, w, opt)
            for key in sums:
                sums[key].append(metrics[key])
        if fp.checksum() != fp_checksum:
            raise RuntimeError(f"frozen model drifted during epoch {epoch}")
        accs = evaluate_branches(lp, fp, test_split, cfg.eval_batch_size)
        row = {"epoch": epoch, "lr": opt.lr}
        row.update({k: float(np.mean(v)) for k, v in sums.items()})
        row["acc_Q"] = accs["Q"]
        for k in range(1, lp.n_blocks):
            row[f"acc_M{k}"] = accs[f"M{k}"]
        row["acc_F"] = accs["F"]
        if cfg.cos_every and (epoch == 1 or epoch % cfg.cos_every == 0 or epoch == cfg.epochs):
            row.update(cosine_similarities(lp, fp, test_split, cfg.cos_samples,
                                           cfg.eval_batch_size))
        rows.append(row)
        if on_epoch:
            on_epoch(row, lp)
    return rows
