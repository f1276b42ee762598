"""Loss terms and the linear two-head baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import LOG_CLAMP, NonFiniteError, ShapeError, Tensor


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.1
    lam: float = 5.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    l_src: float
    l_tgt: float
    l_ss: float
    l_total: float


def _check_labels(logits: Tensor, labels, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"{what}: logits {logits.shape} need one label per row, got {labels.shape}")
    k = logits.shape[1]
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise LabelError(f"{what}: label {int(labels[bad][0])} outside [0, {k})")
    return labels


def cross_entropy(logits, labels, what: str = "cross_entropy") -> Tensor:
    logits = nx.as_tensor(logits)
    labels = _check_labels(logits, labels, what)
    return nx.scale(nx.mean(nx.pick(nx.log_softmax(logits), labels)), -1.0)


def source_ce(category_logits, labels) -> Tensor:
    """Mean negative log-likelihood of the source labels."""
    return cross_entropy(category_logits, labels, "source_ce")


def target_entropy(category_logits) -> Tensor:
    """Mean Shannon entropy of the softmaxed target predictions."""
    logits = nx.as_tensor(category_logits)
    if logits.ndim != 2:
        raise ShapeError(f"target_entropy expects a batch of logits, got shape {logits.shape}")
    p = nx.softmax(logits)
    plogp = nx.sum_(p * nx.log(p, clamp=LOG_CLAMP), axis=1)
    return nx.scale(nx.mean(plogp), -1.0)


def ss_domain_ce(domain_logits, domain_labels) -> Tensor:
    """Domain classification loss over source and target images alike."""
    return cross_entropy(domain_logits, domain_labels, "ss_domain_ce")


def multitask(l_src: float, l_tgt: float, l_ss: float, weights: LossWeights) -> LossBreakdown:
    for name, v in (("l_src", l_src), ("l_tgt", l_tgt), ("l_ss", l_ss)):
        if not math.isfinite(v):
            raise NonFiniteError(f"{name} is not finite: {v}")
    total = weights.alpha1 * (l_src + weights.lam * l_tgt) + weights.alpha2 * l_ss
    return LossBreakdown(float(l_src), float(l_tgt), float(l_ss), float(total))


def multitask_tensor(l_src: Tensor, l_tgt: Tensor | None, l_ss: Tensor | None, weights: LossWeights) -> Tensor:
    """Differentiable counterpart of :func:`multitask`; ``None`` terms are absent
    from the graph altogether."""
    sup = l_src if l_tgt is None else l_src + nx.scale(l_tgt, weights.lam)
    total = nx.scale(sup, weights.alpha1)
    if l_ss is not None:
        total = total + nx.scale(l_ss, weights.alpha2)
    return total


def linear_head_predict(X_raw, W_sup, W_ss) -> tuple[Tensor, Tensor]:
    X_raw, W_sup, W_ss = nx.as_tensor(X_raw), nx.as_tensor(W_sup), nx.as_tensor(W_ss)
    if X_raw.ndim != 2 or X_raw.shape[1] != W_sup.shape[1] or X_raw.shape[1] != W_ss.shape[1]:
        raise ShapeError(f"linear head: features {X_raw.shape} vs heads {W_sup.shape}, {W_ss.shape}")
    X = nx.relu(X_raw)
    return nx.matmul(X, nx.transpose(W_sup)), nx.matmul(X, nx.transpose(W_ss))
