"""Graph head joining category nodes and domain nodes.

Node rows follow one convention everywhere: rows ``0..c-1`` are categories,
rows ``c..c+n-1`` are domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError, Tensor

EXPONENT_FLOOR = -50.0


class DegeneracyError(ValueError):
    """A construction would divide by zero or average over nothing."""


@dataclass(frozen=True)
class GraphHeadConfig:
    n: int
    c: int
    d: int
    D: int
    layers: int = 2
    sigma: float = 0.005
    add_self_loops: bool = False
    init_scale: float = 0.005
    s_val: float = 0.1

    def __post_init__(self):
        if self.n < 2 or self.c < 2:
            raise ValueError(f"need n >= 2 domains and c >= 2 classes, got n={self.n}, c={self.c}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.d < 1 or self.D < 1:
            raise ValueError("embedding and feature widths must be positive")

    @property
    def num_nodes(self) -> int:
        return self.n + self.c

    def layer_widths(self) -> list[tuple[int, int]]:
        widths = [self.d] * self.layers + [self.D]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class GraphHeadParams:
    z_cat: Parameter
    z_dom: Parameter
    W: list[Parameter]
    S: np.ndarray = field(repr=False)

    @property
    def Z(self) -> Tensor:
        return nx.concat([self.z_cat, self.z_dom], axis=0)

    def parameters(self) -> list[Parameter]:
        return [self.z_cat, self.z_dom, *self.W]


@dataclass(frozen=True)
class MaskState:
    """Per-image perturbation state.

    ``negative_domain`` is only consulted on reveal: ``None`` pushes every other
    domain row down by S, an index pushes only that row.
    """

    reveal: bool
    true_domain: int
    negative_domain: int | None = None

    def key(self) -> tuple:
        if not self.reveal:
            return ("masked",)
        return ("reveal", self.true_domain, self.negative_domain)


MASKED = MaskState(False, 0)


def init_embeddings(config: GraphHeadConfig, rng: np.random.Generator) -> GraphHeadParams:
    z = rng.normal(0.0, 1.0, size=(config.num_nodes, config.d)) * config.init_scale
    W = []
    for layer, (fan_in, fan_out) in enumerate(config.layer_widths()):
        W.append(Parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), name=f"gcn.W{layer}"))
    return GraphHeadParams(
        z_cat=Parameter(z[: config.c], name="graph.z_cat"),
        z_dom=Parameter(z[config.c :], name="graph.z_dom"),
        W=W,
        S=np.full(config.d, config.s_val, dtype=np.float64),
    )


def build_adjacency(Z, sigma: float) -> Tensor:
    """Gaussian-kernel adjacency ``exp(-|z_i - z_j|^2 / (2 sigma^2))``.

    The exponent is floored at -50 so far-apart rows never underflow to 0.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    Z = nx.as_tensor(Z)
    if Z.ndim != 2:
        raise ShapeError(f"node embeddings must be a matrix, got shape {Z.shape}")
    N, d = Z.shape
    diff = nx.reshape(Z, (N, 1, d)) - nx.reshape(Z, (1, N, d))
    sq = nx.sum_(diff * diff, axis=2)
    arg = nx.clip_min(nx.scale(sq, -1.0 / (2.0 * sigma * sigma)), EXPONENT_FLOOR)
    return nx.exp(arg)


def normalize_adjacency(A, add_self_loops: bool = False) -> Tensor:
    """Symmetric normalization ``D^-1/2 A D^-1/2`` of (optionally) ``A + I``."""
    A = nx.as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A.shape}")
    N = A.shape[0]
    if add_self_loops:
        A = A + np.eye(N)
    deg = nx.sum_(A, axis=1)
    bad = np.flatnonzero(deg.data <= 0)
    if bad.size:
        raise DegeneracyError(f"adjacency row {int(bad[0])} has zero degree")
    dinv = nx.power(deg, -0.5)
    return A * nx.reshape(dinv, (N, 1)) * nx.reshape(dinv, (1, N))


def gcn_forward(H0, A_hat, W: Sequence) -> Tensor:
    H = nx.as_tensor(H0)
    for layer, w in enumerate(W):
        if H.shape[1] != w.shape[0]:
            raise ShapeError(f"GCN layer {layer}: input width {H.shape[1]} does not match weight {w.shape}")
        H = nx.relu(nx.matmul(nx.matmul(A_hat, H), w))
    return H


def predict(Z_prime, X_raw) -> Tensor:
    """Score every image against every node: ``relu(X) @ Z'^T``."""
    Z_prime, X_raw = nx.as_tensor(Z_prime), nx.as_tensor(X_raw)
    if X_raw.ndim != 2 or Z_prime.ndim != 2 or X_raw.shape[1] != Z_prime.shape[1]:
        raise ShapeError(f"predict: features {X_raw.shape} do not match node features {Z_prime.shape}")
    return nx.matmul(nx.relu(X_raw), nx.transpose(Z_prime))


def perturbation_offset(num_nodes: int, c: int, mask: MaskState, S: np.ndarray) -> np.ndarray:
    """Constant offset added to the node embeddings for one mask state."""
    n = num_nodes - c
    offset = np.zeros((num_nodes, S.shape[0]))
    if not mask.reveal:
        return offset
    if not 0 <= mask.true_domain < n:
        raise IndexError(f"true_domain {mask.true_domain} out of range for {n} domains")
    if mask.negative_domain is None:
        offset[c:] -= S
    else:
        if not 0 <= mask.negative_domain < n or mask.negative_domain == mask.true_domain:
            raise IndexError(f"negative_domain {mask.negative_domain} invalid for true domain {mask.true_domain}")
        offset[c + mask.negative_domain] -= S
    offset[c + mask.true_domain] = S
    return offset


def apply_mask_perturbation(Z, mask: MaskState, S, c: int) -> Tensor:
    Z = nx.as_tensor(Z)
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (Z.shape[1],):
        raise ShapeError(f"perturbation of shape {S.shape} does not fit embeddings {Z.shape}")
    if not mask.reveal:
        if not 0 <= mask.true_domain < Z.shape[0] - c:
            raise IndexError(f"true_domain {mask.true_domain} out of range")
        return Z
    return Z + perturbation_offset(Z.shape[0], c, mask, S)


def sample_mask_states(
    domains: Sequence[int],
    mask_ratio: float,
    rng: np.random.Generator,
    n: int,
    negative: str = "all",
) -> list[MaskState]:
    """Draw one reveal flag per image with probability ``1 - mask_ratio``."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    if negative not in ("all", "one"):
        raise ValueError(f"negative must be 'all' or 'one', got {negative!r}")
    domains = [int(t) for t in domains]
    reveal = rng.random(len(domains)) < 1.0 - mask_ratio
    states = []
    for t, r in zip(domains, reveal):
        neg = None
        if r and negative == "one":
            others = [j for j in range(n) if j != t]
            neg = others[int(rng.integers(len(others)))]
        states.append(MaskState(bool(r), t, neg))
    return states


def prototype_embeddings(features: np.ndarray, labels: np.ndarray, c: int) -> np.ndarray:
    """Per-class mean of source features; row k is the class-k prototype."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((c, features.shape[1]))
    for k in range(c):
        members = features[labels == k]
        if len(members) == 0:
            raise DegeneracyError(f"class {k} has no source samples to build a prototype")
        protos[k] = members.mean(axis=0)
    return protos
