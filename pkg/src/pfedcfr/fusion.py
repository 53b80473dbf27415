"""Server-side layer-wise fusion.

Each layer of the uploaded models is fused on its own. Layers ``1..r`` use the
personalized rule: client ``n`` gets a convex combination of everyone's layer,
with cross weights ``zeta = alpha_t / sigma * exp(-||v_n - v_m||^2 / sigma)`` and
the leftover mass on its own layer. Layers ``r+1..L`` are averaged once and the
mean is shared by every client.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import ModelSpec, ShapeError

PERSONALIZED = "personalized"
GENERIC = "generic"


class FusionError(ValueError):
    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class NonContractiveWeights(FusionError):
    """A client's self-weight came out non-positive.

    Raised instead of clamping: it means ``alpha_t`` is too large for ``sigma`` and N.
    """

    def __init__(self, client: int, cross_sum: float, layer: Optional[int] = None):
        self.client = client
        self.cross_sum = cross_sum
        super().__init__(
            f"client {client}: cross weights sum to {cross_sum!r} >= 1, self-weight would be "
            f"{1.0 - cross_sum!r}",
            layer,
        )


@dataclass(frozen=True)
class SimilarityParams:
    alpha_t: float = 1e4
    sigma: float = 1e6
    lam: float = 1.0
    mu: float = 1e-3

    def __post_init__(self):
        for name in ("alpha_t", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")
        # zero penalties are allowed so that e.g. fedprox with mu=0 reduces to fedavg
        for name in ("lam", "mu"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")


@dataclass(frozen=True)
class FusionPlan:
    depth: int
    r: int
    tags: tuple = field(init=False)

    def __post_init__(self):
        if not 0 <= self.r <= self.depth:
            raise FusionError(f"threshold r={self.r} outside [0, {self.depth}]")
        tags = tuple(PERSONALIZED if l <= self.r else GENERIC for l in range(1, self.depth + 1))
        object.__setattr__(self, "tags", tags)

    def tag(self, layer: int) -> str:
        return self.tags[layer - 1]

    @property
    def personalized_layers(self) -> range:
        return range(1, self.r + 1)

    @property
    def generic_layers(self) -> range:
        return range(self.r + 1, self.depth + 1)


def make_plan(spec: ModelSpec, r: Optional[int] = None) -> FusionPlan:
    """Plan with layers ``1..r`` personalized; ``r`` defaults to the feature-layer count."""
    return FusionPlan(spec.depth, spec.num_feature if r is None else int(r))


def similarity_weight(dist_sq, p: SimilarityParams):
    """``alpha_t * A'(dist_sq)`` with ``A(x) = 1 - exp(-x / sigma)``."""
    return p.alpha_t / p.sigma * np.exp(-np.asarray(dist_sq, dtype=np.float64) / p.sigma)


def _stack(snapshots: Sequence[np.ndarray], layer: Optional[int] = None) -> np.ndarray:
    try:
        x = np.stack([np.asarray(v, dtype=np.float64) for v in snapshots])
    except ValueError:
        raise FusionError(
            f"snapshot lengths differ: {sorted({len(v) for v in snapshots})}", layer
        ) from None
    if x.ndim != 2:
        raise FusionError("snapshots must be flat vectors", layer)
    return x


def pairwise_distance_sq(x: np.ndarray) -> np.ndarray:
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        diff = x[i + 1 :] - x[i]
        d[i, i + 1 :] = np.einsum("ij,ij->i", diff, diff)
    return d + d.T


def personalized_weights(x: np.ndarray, p: SimilarityParams, layer: Optional[int] = None) -> np.ndarray:
    zeta = similarity_weight(pairwise_distance_sq(x), p)
    np.fill_diagonal(zeta, 0.0)
    cross = zeta.sum(axis=1)
    for n, s in enumerate(cross):
        if not s < 1.0:
            raise NonContractiveWeights(n, float(s), layer)
    zeta[np.diag_indices_from(zeta)] = 1.0 - cross
    return zeta


def personalized_fuse_layer(layer_snapshots: Sequence[np.ndarray], p: SimilarityParams, layer: Optional[int] = None):
    """Similarity-weighted recombination of one layer for every client.

    Returns ``(fused, weights)``: ``fused[n] = sum_m weights[n, m] * snapshot[m]``.
    """
    x = _stack(layer_snapshots, layer)
    if len(x) < 2:
        raise FusionError("personalized fusion needs at least two clients", layer)
    w = personalized_weights(x, p, layer)
    fused = w @ x
    return list(fused), w


def generic_fuse_layer(layer_snapshots: Sequence[np.ndarray], layer: Optional[int] = None) -> np.ndarray:
    x = _stack(layer_snapshots, layer)
    if len(x) < 1:
        raise FusionError("no snapshots to average", layer)
    return x.mean(axis=0)


@dataclass
class FusionResult:
    per_client: list  # N ModelParams
    global_layers: dict  # layer (1-based) -> shared vector, generic layers only
    weights: dict  # layer (1-based) -> N x N row-stochastic matrix


def fuse_round(uploads: Sequence[Sequence[np.ndarray]], plan: FusionPlan, p: SimilarityParams) -> FusionResult:
    """Fuse one round of uploads layer by layer according to ``plan``."""
    n_clients = len(uploads)
    if n_clients < 2:
        raise FusionError(f"need at least two uploads, got {n_clients}")
    for n, up in enumerate(uploads):
        if len(up) != plan.depth:
            raise ShapeError(f"client {n} uploaded {len(up)} layers, plan has {plan.depth}")

    per_client = [[None] * plan.depth for _ in range(n_clients)]
    global_layers, weights = {}, {}
    uniform = np.full((n_clients, n_clients), 1.0 / n_clients)
    for l in range(1, plan.depth + 1):
        snaps = [up[l - 1] for up in uploads]
        if plan.tag(l) == PERSONALIZED:
            fused, w = personalized_fuse_layer(snaps, p, l)
            for n in range(n_clients):
                per_client[n][l - 1] = fused[n]
            weights[l] = w
        else:
            shared = generic_fuse_layer(snaps, l)
            global_layers[l] = shared
            for n in range(n_clients):
                per_client[n][l - 1] = shared
            weights[l] = uniform.copy()
    return FusionResult(per_client, global_layers, weights)


def fuse_whole_model(uploads: Sequence[Sequence[np.ndarray]], p: SimilarityParams) -> FusionResult:
    """Whole-model personalized fusion: all layers concatenated into one block.

    Distances are taken over the full parameter vector, so every layer of a
    client shares a single set of cross weights.
    """
    sizes = [len(v) for v in uploads[0]]
    cuts = np.cumsum(sizes)[:-1]
    flat = [np.concatenate(up) for up in uploads]
    res = fuse_round([[v] for v in flat], FusionPlan(1, 1), p)
    per_client = [np.split(up[0], cuts) for up in res.per_client]
    weights = {l: res.weights[1] for l in range(1, len(sizes) + 1)}
    return FusionResult(per_client, {}, weights)


def write_weights_csv(path, rounds_weights) -> None:
    """Write ``(round, {layer: matrix})`` pairs as rows ``round,layer,n,m,weight``."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["round", "layer", "n", "m", "weight"])
        for t, weights in rounds_weights:
            for l in sorted(weights):
                w = weights[l]
                for n in range(w.shape[0]):
                    for m in range(w.shape[1]):
                        out.writerow([t, l, n, m, repr(float(w[n, m]))])
