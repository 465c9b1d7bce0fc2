"""Latent centroids, PCA reduction and weighted mobility-neighbor selection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

OOD = "out_of_distribution"
NEIGHBORS = "neighbors"
CUMULATIVE_CUTOFF = 0.9
VARIANCE_TO_KEEP = 0.9
DISTANCE_FLOOR = 1e-8


class OutOfDistributionError(RuntimeError):
    """Raised when adaptation is requested for a vehicle with no mobility neighbors."""

    def __init__(self, distances: Mapping[str, float], epsilon: float):
        self.distances = dict(distances)
        self.epsilon = epsilon
        listing = ", ".join(f"{k}={v:.4f}" for k, v in sorted(self.distances.items()))
        super().__init__(f"out of distribution: no centroid within epsilon={epsilon:.4f} ({listing})")


def compute_centroid(embeddings) -> np.ndarray:
    z = np.asarray([np.asarray(getattr(e, "z", e), dtype=float) for e in embeddings])
    if z.size == 0:
        raise ValueError("centroid of an empty embedding set")
    return z.mean(axis=0)


@dataclass
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance_ratio: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) @ self.components.T

    def inverse_transform(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "explained_variance_ratio": self.explained_variance_ratio.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PCAProjection":
        return cls(np.asarray(d["mean"], float), np.asarray(d["components"], float).reshape(-1, len(d["mean"])),
                   np.asarray(d["explained_variance_ratio"], float))


def fit_pca(samples, keep: float = VARIANCE_TO_KEEP) -> PCAProjection:
    """Smallest set of principal axes whose explained variance reaches ``keep``."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs at least two samples in a 2-D array")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1)
    evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 1e-300:
        raise ValueError("PCA on rank-0 data (all samples identical)")
    ratio = evals / total
    k = int(np.searchsorted(np.cumsum(ratio), keep - 1e-12) + 1)
    k = min(k, len(ratio))
    return PCAProjection(mean, evecs[:, :k].T.copy(), ratio[:k].copy())


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def pairwise_cosine_distances(centroids) -> np.ndarray:
    C = [np.asarray(c, float) for c in centroids]
    return np.array([cosine_distance(C[i], C[j]) for i in range(len(C)) for j in range(i + 1, len(C))])


def epsilon_from_distances(d) -> float:
    """Mean plus two population standard deviations."""
    d = np.asarray(d, float)
    return float(d.mean() + 2.0 * d.std(ddof=0))


def adaptive_threshold(centroids) -> float:
    if len(centroids) < 2:
        raise ValueError("adaptive threshold needs at least two centroids")
    return epsilon_from_distances(pairwise_cosine_distances(centroids))


@dataclass
class NeighborMember:
    vehicle_id: str
    distance: float
    raw_weight: float  # normalized inverse-square weight before truncation
    weight: float  # after truncation and re-normalization


@dataclass
class NeighborSet:
    verdict: str
    members: list[NeighborMember]
    epsilon: float
    distances: dict[str, float] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [m.vehicle_id for m in self.members]

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.members])

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "epsilon": self.epsilon,
                "members": [asdict(m) for m in self.members],
                "distances": dict(sorted(self.distances.items()))}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def truncate_weights(weights: Sequence[float], cutoff: float = CUMULATIVE_CUTOFF) -> np.ndarray:
    """Minimal prefix of descending weights whose cumulative sum reaches cutoff, re-normalized."""
    w = np.asarray(weights, float)
    k = int(np.searchsorted(np.cumsum(w), cutoff - 1e-12) + 1)
    k = min(k, len(w))
    kept = w[:k]
    return kept / kept.sum()


def select_neighbors(mu_new, centroids: Mapping[str, np.ndarray], epsilon: float) -> NeighborSet:
    if not centroids:
        raise ValueError("no training centroids")
    if np.linalg.norm(np.asarray(mu_new, float)) == 0:
        raise ValueError("new-vehicle centroid has zero norm")
    dist = {vid: cosine_distance(mu_new, c) for vid, c in centroids.items()}
    inside = [vid for vid, d in dist.items() if d <= epsilon]
    if not inside:
        return NeighborSet(OOD, [], float(epsilon), dist)
    raw = np.array([1.0 / max(dist[v], DISTANCE_FLOOR) ** 2 for v in inside])
    raw = raw / raw.sum()
    order = sorted(range(len(inside)), key=lambda i: (-raw[i], inside[i]))
    final = truncate_weights(raw[order])
    members = [NeighborMember(inside[i], dist[inside[i]], float(raw[i]), float(w))
               for i, w in zip(order, final)]
    return NeighborSet(NEIGHBORS, members, float(epsilon), dist)


@dataclass
class LatentIndex:
    """Projected training centroids plus the threshold derived from them."""

    pca: PCAProjection
    centroids: dict[str, np.ndarray]  # projected
    epsilon: float
    conditional: bool = True

    @classmethod
    def build(cls, embeddings: Mapping[str, np.ndarray], conditional: bool = True) -> "LatentIndex":
        ids = sorted(embeddings)
        pca = fit_pca(np.concatenate([embeddings[i] for i in ids]))
        cents = {i: pca.transform(compute_centroid(embeddings[i])) for i in ids}
        return cls(pca, cents, adaptive_threshold([cents[i] for i in ids]), conditional)

    def query(self, embeddings) -> NeighborSet:
        mu_new = self.pca.transform(compute_centroid(embeddings))
        return select_neighbors(mu_new, self.centroids, self.epsilon)

    def to_dict(self) -> dict:
        return {"pca": self.pca.to_dict(), "epsilon": self.epsilon, "conditional": self.conditional,
                "centroids": {k: v.tolist() for k, v in sorted(self.centroids.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatentIndex":
        return cls(PCAProjection.from_dict(d["pca"]), {k: np.asarray(v, float) for k, v in d["centroids"].items()},
                   float(d["epsilon"]), bool(d.get("conditional", True)))
