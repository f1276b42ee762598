"""Feature extractor plus head, for the graph variants and the linear baseline."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph_head import (
    MASKED,
    GraphHeadConfig,
    GraphHeadParams,
    MaskState,
    apply_mask_perturbation,
    build_adjacency,
    gcn_forward,
    init_embeddings,
    normalize_adjacency,
    predict,
    prototype_embeddings,
)
from .numerics import Parameter, ShapeError, Tensor
from .objectives import linear_head_predict

VARIANTS = ("ssg", "ssg_prototype", "ssg_no_mask", "linear")
CHECKPOINT_VERSION = 1


@dataclass
class Extractor:
    """MLP ``F -> hidden... -> D`` with ReLU between layers and a linear output."""

    weights: list[Parameter]
    biases: list[Parameter]

    @classmethod
    def init(cls, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator) -> Extractor:
        widths = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            weights.append(Parameter(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), name=f"extractor.W{i}"))
            biases.append(Parameter(np.zeros((1, b)), name=f"extractor.b{i}"))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Tensor:
        h = nx.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"extractor expects width {self.in_dim}, got shape {h.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.matmul(h, w) + b
            if i < last:
                h = nx.relu(h)
        return h


@dataclass
class SSGModel:
    variant: str
    head_config: GraphHeadConfig
    extractor: Extractor
    graph: GraphHeadParams | None = None
    W_sup: Parameter | None = None
    W_ss: Parameter | None = None
    freeze_prototypes: bool = True
    negative_rows: str = "all"
    extra: dict = field(default_factory=dict)

    @property
    def is_graph(self) -> bool:
        return self.variant != "linear"

    def named_parameters(self) -> list[Parameter]:
        """Every parameter, trainable or frozen, in a fixed order."""
        params = self.extractor.parameters()
        if self.is_graph:
            params += self.graph.parameters()
        else:
            params += [self.W_sup, self.W_ss]
        return params


@dataclass
class ForwardOutput:
    category: Tensor
    domain: Tensor
    A_hat: Tensor | None = None


def build_model(
    variant: str,
    head_config: GraphHeadConfig,
    input_dim: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    *,
    source_features: np.ndarray | None = None,
    source_labels: np.ndarray | None = None,
    freeze_prototypes: bool = True,
    negative_rows: str = "all",
) -> SSGModel:
    """Initialise a model. The prototype variant needs the labelled source
    samples so its category rows can start at the class means of the
    (freshly initialised) extractor output."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = head_config
    extractor = Extractor.init(input_dim, hidden, cfg.D, rng)
    graph = init_embeddings(cfg, rng)
    model = SSGModel(variant, cfg, extractor, freeze_prototypes=freeze_prototypes, negative_rows=negative_rows)
    if variant == "linear":
        scale = 1.0 / np.sqrt(cfg.D)
        model.W_sup = Parameter(rng.normal(0.0, scale, size=(cfg.c, cfg.D)), name="linear.W_sup")
        model.W_ss = Parameter(rng.normal(0.0, scale, size=(cfg.n, cfg.D)), name="linear.W_ss")
        return model
    model.graph = graph
    if variant == "ssg_prototype":
        if cfg.d != cfg.D:
            raise ShapeError(f"prototype embeddings need embed_dim == feature_dim, got {cfg.d} and {cfg.D}")
        if source_features is None or source_labels is None:
            raise ValueError("the prototype variant needs source features and labels")
        with nx.no_grad():
            feats = extractor(source_features).data
        graph.z_cat.data[...] = prototype_embeddings(feats, source_labels, cfg.c)
    return model


def trainable_parameters(model: SSGModel) -> list[Parameter]:
    params = model.extractor.parameters()
    if not model.is_graph:
        return params + [model.W_sup, model.W_ss]
    g = model.graph
    if model.variant == "ssg_prototype" and model.freeze_prototypes:
        return params + [g.z_dom, *g.W]
    return params + [g.z_cat, g.z_dom, *g.W]


def graph_pass(model: SSGModel, A_hat: Tensor, Z: Tensor, state: MaskState) -> Tensor:
    g, cfg = model.graph, model.head_config
    H0 = apply_mask_perturbation(Z, state, g.S, cfg.c)
    return gcn_forward(H0, A_hat, g.W)


def forward_ssg(
    model: SSGModel,
    features,
    mask_states: Sequence[MaskState] | None = None,
    train_mode: bool = False,
) -> ForwardOutput:
    """Graph-head forward pass.

    The adjacency is built and normalised from the unperturbed embeddings
    first; the per-image perturbation is applied afterwards and only feeds the
    GCN input. Images that share a perturbation state share one graph pass.
    """
    if train_mode != (mask_states is not None):
        raise ValueError("mask_states must be given exactly when train_mode is set")
    cfg = model.head_config
    Z = model.graph.Z
    A_hat = normalize_adjacency(build_adjacency(Z, cfg.sigma), cfg.add_self_loops)
    X = model.extractor(features)
    B = X.shape[0]
    if mask_states is None:
        mask_states = [MASKED] * B
    if len(mask_states) != B:
        raise ShapeError(f"{len(mask_states)} mask states for a batch of {B}")

    groups: dict[tuple, list[int]] = {}
    first: dict[tuple, MaskState] = {}
    for i, st in enumerate(mask_states):
        groups.setdefault(st.key(), []).append(i)
        first.setdefault(st.key(), st)

    if len(groups) == 1:
        key = next(iter(groups))
        logits = predict(graph_pass(model, A_hat, Z, first[key]), X)
    else:
        parts, order = [], []
        for key, idx in groups.items():
            Zp = graph_pass(model, A_hat, Z, first[key])
            parts.append(predict(Zp, nx.take(X, idx)))
            order += idx
        logits = nx.take(nx.concat(parts), np.argsort(order, kind="stable"))

    c, n = cfg.c, cfg.n
    return ForwardOutput(
        category=nx.take(logits, np.arange(c), axis=1),
        domain=nx.take(logits, np.arange(c, c + n), axis=1),
        A_hat=A_hat,
    )


def forward_linear(model: SSGModel, features) -> ForwardOutput:
    cat, dom = linear_head_predict(model.extractor(features), model.W_sup, model.W_ss)
    return ForwardOutput(cat, dom)


def forward(model: SSGModel, features, mask_states=None, train_mode: bool = False) -> ForwardOutput:
    if model.is_graph:
        return forward_ssg(model, features, mask_states, train_mode)
    return forward_linear(model, features)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SSGModel, path: str | os.PathLike) -> None:
    lines = [f"#ssg-checkpoint,version={CHECKPOINT_VERSION},variant={model.variant}"]
    for p in model.named_parameters():
        shape = ",".join(str(s) for s in p.shape)
        values = " ".join(format(float(v), ".17g") for v in p.data.ravel())
        lines.append(f"{p.name}\t{shape}\t{values}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(model: SSGModel, path: str | os.PathLike) -> SSGModel:
    """Overwrite ``model``'s parameters from a checkpoint written by
    :func:`save_checkpoint` for the same architecture."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().rstrip("\n").split("\n")
    head = dict(part.partition("=")[::2] for part in lines[0].split(",")[1:])
    if not lines[0].startswith("#ssg-checkpoint") or head.get("version") != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if head.get("variant") != model.variant:
        raise ValueError(f"{path}: checkpoint variant {head.get('variant')} != model variant {model.variant}")
    params = {p.name: p for p in model.named_parameters()}
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        name, shape_s, values_s = line.split("\t")
        if name not in params:
            raise ValueError(f"{path}:{lineno}: unknown parameter {name}")
        shape = tuple(int(s) for s in shape_s.split(","))
        if shape != params[name].shape:
            raise ValueError(f"{path}:{lineno}: {name} has shape {shape}, model expects {params[name].shape}")
        params[name].data[...] = np.array([float(v) for v in values_s.split(" ")]).reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    return model
