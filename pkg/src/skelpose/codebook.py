"""Global-rotation codebook.

Rotation matrices are clustered with k-means in the flattened 9-dim
(chordal/Frobenius) embedding. Cluster centers are arithmetic means of
member matrices, which stay near-orthonormal for tight clusters but are
deliberately not re-orthonormalized: blending happens in the same
linear space and the result is orthogonalized afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, ShapeMismatch


@dataclass
class RotationCodebook:
    centers: np.ndarray  # (K, 3, 3)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.ndim != 3 or self.centers.shape[1:] != (3, 3) or len(self.centers) < 1:
            raise ShapeMismatch(f"centers must be (K, 3, 3) with K >= 1, got {self.centers.shape}")

    @property
    def K(self) -> int:
        return len(self.centers)

    def to_json(self) -> dict:
        return {"K": self.K, "centers": [[float(v) for v in c.ravel()] for c in self.centers]}

    @classmethod
    def from_json(cls, obj: dict) -> "RotationCodebook":
        centers = np.array(obj["centers"], dtype=float).reshape(-1, 3, 3)
        return cls(centers=centers)

    @classmethod
    def load(cls, path) -> "RotationCodebook":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


def _kmeans_pp_init(x, k, rng):
    """k-means++ seeding on row vectors of x."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = x[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        centers[i] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def build_codebook(rotations, n_clusters: int = 200, seed: int = 0,
                   max_iters: int = 100) -> RotationCodebook:
    """k-means over vectorized rotation matrices under Frobenius distance.

    Deterministic given the seed. Iteration stops when assignments stop
    changing (or after max_iters); empty clusters are reseeded with the
    point farthest from its current center.
    """
    rotations = np.asarray(rotations, dtype=float)
    if rotations.ndim != 3 or rotations.shape[1:] != (3, 3):
        raise ShapeMismatch(f"rotations must be (N, 3, 3), got {rotations.shape}")
    n = len(rotations)
    if n < n_clusters:
        raise InsufficientData(f"need at least {n_clusters} rotations, got {n}")

    x = rotations.reshape(n, 9)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, n_clusters, rng)

    assign = np.full(n, -1)
    for _ in range(max_iters):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)  # argmin ties go to the lowest index
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(n_clusters):
            members = x[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
            else:
                worst = int(np.argmax(d2[np.arange(n), assign]))
                centers[k] = x[worst]
    return RotationCodebook(centers=centers.reshape(n_clusters, 3, 3))


def classify(cb: RotationCodebook, rotation) -> tuple[int, np.ndarray]:
    """Nearest center in Frobenius distance; ties go to the lowest index.

    Returns (index, one-hot probability vector), the form used as a
    classification label.
    """
    rotation = np.asarray(rotation, dtype=float)
    d2 = np.sum((cb.centers - rotation) ** 2, axis=(1, 2))
    idx = int(np.argmin(d2))
    onehot = np.zeros(cb.K)
    onehot[idx] = 1.0
    return idx, onehot


def blend(cb: RotationCodebook, probabilities) -> np.ndarray:
    """Probability-weighted sum of cluster centers (entry-wise).

    The result is a general linear transform; pass it through
    gram_schmidt to obtain a rotation.
    """
    p = np.asarray(probabilities, dtype=float)
    if p.shape != (cb.K,):
        raise ShapeMismatch(f"probabilities must be ({cb.K},), got {p.shape}")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return np.einsum("k,kij->ij", p, cb.centers)
