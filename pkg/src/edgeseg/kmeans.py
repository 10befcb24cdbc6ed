"""K-means over per-pixel feature vectors (the stage-wise feature clustering diagnostic)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_K = 3
MAX_ITER = 100


@dataclass
class KMeansResult:
    labels: np.ndarray          # H x W int
    centers: np.ndarray         # k x C
    inertia: list = field(default_factory=list)   # after each assignment
    iterations: int = 0


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def seed_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """First centre uniformly at random, then repeatedly the point farthest from all chosen."""
    chosen = [int(rng.integers(len(x)))]
    d = ((x - x[chosen[0]]) ** 2).sum(-1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(-1))
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = MAX_ITER):
    """Lloyd's algorithm on ``N x C`` points. Returns (labels, centers, inertia history, iterations)."""
    x = np.asarray(x, dtype=np.float64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    centers = seed_centers(x, k, np.random.default_rng(seed))
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):          # an empty cluster keeps its old centre
                centers[j] = members.mean(0)
    return labels, centers, history, it


def kmeans_features(feats, k: int = DEFAULT_K, seed: int = 0) -> KMeansResult:
    """Cluster the pixels of a ``C x H x W`` feature map into ``k`` groups."""
    f = np.asarray(getattr(feats, "data", feats))
    if f.ndim != 3:
        raise ValueError(f"expected a C x H x W feature map, got shape {f.shape}")
    c, h, w = f.shape
    labels, centers, history, it = kmeans(f.reshape(c, h * w).T, k, seed)
    return KMeansResult(labels.reshape(h, w), centers, history, it)


def label_image(labels: np.ndarray, k: int) -> np.ndarray:
    """Spread labels over 0..255 grey levels for saving as PNG."""
    scale = 255 // max(k - 1, 1)
    return (np.asarray(labels) * scale).astype(np.uint8)
