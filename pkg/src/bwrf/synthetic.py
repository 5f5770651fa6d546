"""Learnable synthetic image datasets in the on-disk formats the loaders read.

Each class owns a fixed low-frequency color template; samples are the
template plus per-sample noise, a brightness jitter, and a random shift.
The signal-to-noise ratio is chosen so small residual networks separate
the classes quickly, which makes these sets useful for end-to-end smoke
runs and full-protocol rehearsals when the real corpus is unavailable.

Pure template-plus-noise sets saturate under long training: averaging the
noise over every pixel leaves the templates cleanly separable. The `mix`
knob blends each sample toward one other class's template (the label stays
with the dominant side), which puts real mass near the decision boundaries
and holds multi-epoch runs measurably below the accuracy ceiling.
"""

from __future__ import annotations

import os

import numpy as np

from bwrf.data import write_cifar10_batches, write_idx


def class_templates(num_classes: int, channels: int, hw: int, rng, cells: int = 4):
    """Per-class smooth color patterns in [-1, 1], (classes, C, hw, hw)."""
    coarse = rng.standard_normal((num_classes, channels, cells, cells))
    up = np.kron(coarse, np.ones((hw // cells, hw // cells)))
    if up.shape[-1] != hw:  # hw not divisible by the cell grid
        pad = hw - up.shape[-1]
        up = np.pad(up, ((0, 0), (0, 0), (0, pad), (0, pad)), mode="edge")
    up /= np.abs(up).max(axis=(1, 2, 3), keepdims=True)
    return up


def synthetic_arrays(n_train: int, n_test: int, num_classes: int = 10,
                     channels: int = 3, hw: int = 32, seed: int = 0,
                     noise: float = 0.25, max_shift: int = 2, mix: float = 0.0,
                     cells: int = 4):
    """(train_pixels, train_labels, test_pixels, test_labels), pixels uint8 CHW.

    mix > 0 blends every sample with a second class's template, weight
    drawn from U(0, mix); capped at 0.5 so the label is always the
    dominant component. cells sets the template grid resolution: 4 gives
    broad color washes, 8 or 16 give fine patterns that demand more model
    capacity under shift and crop.
    """
    if not 0.0 <= mix <= 0.5:
        raise ValueError("mix must lie in [0, 0.5] so the label stays dominant")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, channels, hw, rng, cells)

    def draw(n):
        labels = rng.integers(0, num_classes, size=n)
        base = templates[labels]
        if mix:
            other = (labels + rng.integers(1, num_classes, size=n)) % num_classes
            m = rng.uniform(0.0, mix, size=(n, 1, 1, 1))
            base = (1.0 - m) * base + m * templates[other]
        jitter = rng.uniform(-0.08, 0.08, size=(n, 1, 1, 1))
        fields = 0.5 + 0.3 * base + jitter + noise * rng.standard_normal(base.shape)
        if max_shift:
            shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
            for i in range(n):
                fields[i] = np.roll(fields[i], tuple(shifts[i]), axis=(1, 2))
        pixels = np.rint(np.clip(fields, 0.0, 1.0) * 255.0).astype(np.uint8)
        return pixels, labels.astype(np.int64)

    train_pixels, train_labels = draw(n_train)
    test_pixels, test_labels = draw(n_test)
    return train_pixels, train_labels, test_pixels, test_labels


def write_synthetic_cifar(data_dir: str, n_train: int = 50000, n_test: int = 10000,
                          seed: int = 0, records_per_file: int = 10000,
                          noise: float = 0.25, max_shift: int = 2, mix: float = 0.0,
                          cells: int = 4):
    """Emit a synthetic dataset in the binary batch layout under data_dir."""
    tr_p, tr_l, te_p, te_l = synthetic_arrays(n_train, n_test, seed=seed,
                                              noise=noise, max_shift=max_shift,
                                              mix=mix, cells=cells)
    write_cifar10_batches(data_dir, tr_p, tr_l, te_p, te_l, records_per_file)


def write_synthetic_idx(data_dir: str, n_train: int = 512, n_test: int = 128,
                        hw: int = 16, seed: int = 0):
    """Emit a small grayscale synthetic dataset in the IDX layout."""
    tr_p, tr_l, te_p, te_l = synthetic_arrays(n_train, n_test, channels=1, hw=hw,
                                              seed=seed)
    os.makedirs(data_dir, exist_ok=True)
    write_idx(os.path.join(data_dir, "train-images-idx3-ubyte"),
              os.path.join(data_dir, "train-labels-idx1-ubyte"),
              tr_p[:, 0], tr_l.astype(np.uint8))
    write_idx(os.path.join(data_dir, "test-images-idx3-ubyte"),
              os.path.join(data_dir, "test-labels-idx1-ubyte"),
              te_p[:, 0], te_l.astype(np.uint8))
