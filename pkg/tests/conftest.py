"""Shared fixtures: canonical analytic problems and an IDX-format digit set."""

import math
import struct

import numpy as np
import pytest

from ssds.core import BudgetConstraint
from ssds.problems import QuadraticSaddleProblem, make_synthetic_dataset


def write_idx_images(path, images):
    """images: (N, rows, cols) uint8."""
    n, rows, cols = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols)
                     + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels))
                     + np.asarray(labels, dtype=np.uint8).tobytes())


@pytest.fixture
def quadratic_problem():
    """Canonical strictly convex-concave instance with an exactly clamped u*."""
    dataset = make_synthetic_dataset(4, 2, 2, 1.0, seed=0)
    budget = BudgetConstraint(math.inf, 0.03)
    return QuadraticSaddleProblem(dataset, budget, c=np.array([0.05, -0.05]))


def _digits_arrays(n_total=3000, seed=123):
    """28x28 uint8 digit images built from sklearn's 8x8 digits by pixel
    tripling, padding, and shift augmentation."""
    from sklearn.datasets import load_digits

    d = load_digits()
    base = np.kron(d.images / 16.0, np.ones((3, 3)))
    base = np.pad(base, ((0, 0), (2, 2), (2, 2)))
    labels = d.target
    xs, ys = [base], [labels]
    shifts = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)]
    i = 0
    while sum(len(y) for y in ys) < n_total:
        dy, dx = shifts[i % len(shifts)]
        xs.append(np.roll(np.roll(base, dy, axis=1), dx, axis=2))
        ys.append(labels)
        i += 1
    images = np.concatenate(xs)
    labels = np.concatenate(ys)
    perm = np.random.default_rng(seed).permutation(len(images))[:n_total]
    return (np.round(images[perm] * 255).astype(np.uint8), labels[perm])


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """(train_images, train_labels, test_images, test_labels) IDX file paths:
    2000 train / 1000 test digit samples."""
    root = tmp_path_factory.mktemp("digits")
    images, labels = _digits_arrays()
    paths = (root / "train-images.idx", root / "train-labels.idx",
             root / "test-images.idx", root / "test-labels.idx")
    write_idx_images(paths[0], images[:2000])
    write_idx_labels(paths[1], labels[:2000])
    write_idx_images(paths[2], images[2000:])
    write_idx_labels(paths[3], labels[2000:])
    return paths
