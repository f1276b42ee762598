"""Deterministic training and evaluation loops plus the experiment drivers."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import UNLABELED, Batch, BatchPlan, Dataset, SyntheticSpec, generate_synthetic, load_feature_file, make_batches
from .graph_head import GraphHeadConfig, MaskState, sample_mask_states
from .model import VARIANTS, ForwardOutput, SSGModel, build_model, forward, trainable_parameters
from .numerics import Tensor
from .objectives import LossWeights, multitask, multitask_tensor, source_ce, ss_domain_ce, target_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "ssg"
    n_domains: int = 4
    n_classes: int = 4
    embed_dim: int = 16
    feature_dim: int = 16
    gcn_layers: int = 2
    sigma: float = 0.005
    add_self_loops: bool = False
    alpha1: float = 1.0
    alpha2: float = 0.1
    lam: float = 5.0
    mask_ratio: float = 0.95
    s_val: float = 0.1
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    data: dict | str = field(default_factory=dict)
    drop_tgt_loss: bool = False
    drop_ss_loss: bool = False
    extractor_hidden: tuple[int, ...] = (64,)
    init_scale: float = 0.005
    source_fraction: float | None = 0.5
    negative_rows: str = "all"
    freeze_prototypes: bool = True
    target_domain: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio: must lie in [0, 1], got {self.mask_ratio}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr: must be >= 0, got {self.lr}")
        if self.negative_rows not in ("all", "one"):
            raise ValueError(f"negative_rows: expected 'all' or 'one', got {self.negative_rows!r}")
        object.__setattr__(self, "extractor_hidden", tuple(int(h) for h in self.extractor_hidden))
        self.loss_weights()
        self.head_config()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.lam)

    def effective_weights(self) -> LossWeights:
        """Weights with dropped terms zeroed; this is what the loss identity uses."""
        return LossWeights(
            self.alpha1,
            0.0 if self.drop_ss_loss else self.alpha2,
            0.0 if self.drop_tgt_loss else self.lam,
        )

    @property
    def effective_mask_ratio(self) -> float:
        return 1.0 if self.variant == "ssg_no_mask" else self.mask_ratio

    def head_config(self) -> GraphHeadConfig:
        return GraphHeadConfig(
            n=self.n_domains,
            c=self.n_classes,
            d=self.embed_dim,
            D=self.feature_dim,
            layers=self.gcn_layers,
            sigma=self.sigma,
            add_self_loops=self.add_self_loops,
            init_scale=self.init_scale,
            s_val=self.s_val,
        )

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out["lambda" if f.name == "lam" else f.name] = value
        return out


@dataclass
class MetricsRecord:
    epoch: int
    l_src: float
    l_tgt: float
    l_ss: float
    l_total: float
    source_acc: float
    domain_acc: float
    target_acc: float | None
    reveal_rate: float


@dataclass
class TrainResult:
    model: SSGModel
    metrics: list[MetricsRecord]


def subseed(seed: int, name: str) -> np.random.SeedSequence:
    """Named child of the master seed: stable across processes and runs."""
    return np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))


def sub_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, name))


def load_dataset(config: ExperimentConfig) -> Dataset:
    if isinstance(config.data, str):
        ds = load_feature_file(config.data, target_domain=config.target_domain)
    else:
        spec = dict(config.data)
        spec.setdefault("seed", config.seed)
        ds = generate_synthetic(SyntheticSpec(n_domains=config.n_domains, n_classes=config.n_classes, **spec))
    if ds.n_domains != config.n_domains or ds.n_classes != config.n_classes:
        raise ValueError(
            f"dataset has {ds.n_domains} domains/{ds.n_classes} classes, config says "
            f"{config.n_domains}/{config.n_classes}"
        )
    return ds


def init_model(config: ExperimentConfig, dataset: Dataset) -> SSGModel:
    src = dataset.source_mask & (dataset.labels != UNLABELED)
    return build_model(
        config.variant,
        config.head_config(),
        dataset.dim,
        config.extractor_hidden,
        sub_rng(config.seed, "init"),
        source_features=dataset.features[src],
        source_labels=dataset.labels[src],
        freeze_prototypes=config.freeze_prototypes,
        negative_rows=config.negative_rows,
    )


@dataclass
class EvalResult:
    target_accuracy: float | None
    domain_accuracy: float
    category_logits: np.ndarray
    domain_logits: np.ndarray


def evaluate(model: SSGModel, dataset: Dataset) -> EvalResult:
    """Unperturbed forward over the whole dataset; target accuracy against the
    held-out labels, domain accuracy over every sample."""
    with nx.no_grad():
        out = forward(model, dataset.features)
    cat, dom = out.category.data, out.domain.data
    domain_acc = float(np.mean(dom.argmax(axis=1) == dataset.domains)) if len(dataset) else 0.0
    held = dataset.heldout_labels()
    target_acc = None
    if held is not None:
        rows = dataset.target_mask & (held != UNLABELED)
        if rows.any():
            target_acc = float(np.mean(cat[rows].argmax(axis=1) == held[rows]))
    return EvalResult(target_acc, domain_acc, cat, dom)


@dataclass
class BatchLosses:
    output: ForwardOutput
    l_src: Tensor
    l_tgt: Tensor | None
    l_ss: Tensor
    total: Tensor


def compute_losses(
    model: SSGModel, batch: Batch, states: Sequence[MaskState] | None, config: ExperimentConfig
) -> BatchLosses:
    """Forward one batch and assemble the weighted objective.

    Dropped terms are still evaluated for logging but never enter ``total``,
    so they contribute nothing to the backward pass.
    """
    out = forward(model, batch.features, states, train_mode=states is not None)
    src, tgt = batch.source_slice, batch.target_slice
    l_src = source_ce(nx.take(out.category, src), batch.labels[src])
    l_tgt = target_entropy(nx.take(out.category, tgt)) if len(tgt) else None
    l_ss = ss_domain_ce(out.domain, batch.domains)
    total = multitask_tensor(
        l_src,
        None if config.drop_tgt_loss else l_tgt,
        None if config.drop_ss_loss else l_ss,
        config.effective_weights(),
    )
    if not math.isfinite(total.item()):
        raise nx.NonFiniteError("total loss")
    return BatchLosses(out, l_src, l_tgt, l_ss, total)


def train(
    config: ExperimentConfig,
    dataset: Dataset,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
    model: SSGModel | None = None,
) -> TrainResult:
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not dataset.source_mask.any() or not (dataset.labels[dataset.source_mask] != UNLABELED).any():
        raise ValueError("training needs labelled source samples")
    if model is None:
        model = init_model(config, dataset)
    params = trainable_parameters(model)
    weights = config.effective_weights()
    mask_ratio = config.effective_mask_ratio
    mask_rng = sub_rng(config.seed, "mask")
    plan = BatchPlan(
        batch_size=config.batch_size,
        source_fraction=config.source_fraction,
        seed=int(subseed(config.seed, "shuffle").generate_state(1)[0]),
    )
    n = config.n_domains
    metrics = []
    for epoch in range(1, config.epochs + 1):
        sums = {"l_src": 0.0, "l_tgt": 0.0, "l_ss": 0.0}
        n_batches = n_tgt_batches = 0
        src_hit = src_seen = dom_hit = seen = revealed = 0
        for b, batch in enumerate(make_batches(dataset, plan, epoch)):
            states = None
            if model.is_graph:
                states = sample_mask_states(batch.domains, mask_ratio, mask_rng, n, config.negative_rows)
                revealed += sum(s.reveal for s in states)
            try:
                losses = compute_losses(model, batch, states, config)
                nx.backward(losses.total)
                nx.sgd_step(params, config.lr)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            finally:
                nx.zero_grad(params)

            out, src = losses.output, batch.source_slice
            l_src, l_tgt, l_ss = losses.l_src, losses.l_tgt, losses.l_ss
            sums["l_src"] += l_src.item()
            sums["l_ss"] += l_ss.item()
            if l_tgt is not None:
                sums["l_tgt"] += l_tgt.item()
                n_tgt_batches += 1
            n_batches += 1
            src_hit += int((out.category.data[src].argmax(axis=1) == batch.labels[src]).sum())
            src_seen += len(src)
            dom_hit += int((out.domain.data.argmax(axis=1) == batch.domains).sum())
            seen += len(batch)

        parts = multitask(
            sums["l_src"] / n_batches,
            sums["l_tgt"] / n_tgt_batches if n_tgt_batches else 0.0,
            sums["l_ss"] / n_batches,
            weights,
        )
        record = MetricsRecord(
            epoch=epoch,
            l_src=parts.l_src,
            l_tgt=parts.l_tgt,
            l_ss=parts.l_ss,
            l_total=parts.l_total,
            source_acc=src_hit / src_seen,
            domain_acc=dom_hit / seen,
            target_acc=evaluate(model, dataset).target_accuracy,
            reveal_rate=revealed / seen if model.is_graph else 0.0,
        )
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d %s", epoch, record)
    return TrainResult(model, metrics)


def metrics_jsonl(metrics: Iterable[MetricsRecord]) -> str:
    return "".join(json.dumps(dataclasses.asdict(m)) + "\n" for m in metrics)


# ---------------------------------------------------------------------------
# experiment drivers


ABLATION_VARIANTS: dict[str, dict] = {
    "src_only": {"variant": "ssg", "drop_tgt_loss": True, "drop_ss_loss": True},
    "src_tgt": {"variant": "ssg", "drop_ss_loss": True},
    "src_ss": {"variant": "ssg", "drop_tgt_loss": True},
    "ssg": {"variant": "ssg"},
    "ssg_prototype": {"variant": "ssg_prototype"},
    "ssg_no_mask": {"variant": "ssg_no_mask"},
    "linear": {"variant": "linear"},
}


@dataclass
class SuiteRow:
    name: str
    mean: float
    std: float
    seeds: list[int]
    accuracies: list[float]


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    runs: dict[tuple[str, int], list[MetricsRecord]]

    def row(self, name: str) -> SuiteRow:
        return next(r for r in self.rows if r.name == name)


def run_ablation_suite(
    base: ExperimentConfig,
    dataset: Dataset,
    seeds: Sequence[int],
    variants: Sequence[str] | None = None,
) -> SuiteResult:
    """Train every ablation row on every seed; summarize final target accuracy."""
    if len(seeds) < 3:
        raise ValueError(f"the ablation suite needs at least 3 seeds, got {len(seeds)}")
    names = list(variants) if variants is not None else list(ABLATION_VARIANTS)
    rows, runs = [], {}
    for name in names:
        overrides = {"drop_tgt_loss": False, "drop_ss_loss": False, **ABLATION_VARIANTS[name]}
        accs = []
        for seed in seeds:
            cfg = base.replace(seed=seed, **overrides)
            result = train(cfg, dataset)
            runs[(name, seed)] = result.metrics
            final = result.metrics[-1].target_acc
            accs.append(float("nan") if final is None else final)
            log.info("%s seed=%d target_acc=%s", name, seed, final)
        arr = np.array(accs)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(SuiteRow(name, float(arr.mean()), std, list(seeds), accs))
    return SuiteResult(rows, runs)


def run_mask_sweep(
    config: ExperimentConfig, dataset: Dataset, ratios: Sequence[float]
) -> dict[float, list[MetricsRecord]]:
    """One run per mask ratio, all on the same seed."""
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"mask ratio {r} outside [0, 1]")
    return {float(r): train(config.replace(mask_ratio=float(r)), dataset).metrics for r in ratios}


# ---------------------------------------------------------------------------
# gradient check on a fixed tiny problem


GRADCHECK_REVEAL = (True, False, True, False, True, False)


def gradcheck_config(variant: str = "ssg") -> ExperimentConfig:
    return ExperimentConfig(
        variant=variant,
        n_domains=3,
        n_classes=4,
        embed_dim=16 if variant == "ssg_prototype" else 8,
        feature_dim=16,
        gcn_layers=2,
        mask_ratio=0.5,
        batch_size=6,
        extractor_hidden=(8,),
        seed=0,
    )


def gradient_check(variant: str = "ssg", h: float = 1e-6, seed: int = 0) -> nx.GradCheckReport:
    """Finite-difference check of the full objective on a 6-image batch.

    Domains 0 and 1 are labelled sources, domain 2 the target; every other
    image has its domain revealed so both perturbed and unperturbed graph
    passes (and the adjacency built from the embeddings) are exercised.
    """
    config = gradcheck_config(variant).replace(seed=seed)
    rng = np.random.default_rng(seed)
    in_dim = 5
    model = build_model(
        variant,
        config.head_config(),
        in_dim,
        config.extractor_hidden,
        sub_rng(seed, "init"),
        source_features=rng.normal(size=(8, in_dim)),
        source_labels=np.arange(8) % config.n_classes,
    )
    domains = np.array([0, 0, 1, 1, 2, 2])
    is_source = domains != 2
    batch = Batch(
        indices=np.arange(6),
        features=rng.normal(size=(6, in_dim)),
        domains=domains,
        labels=np.where(is_source, np.array([0, 1, 2, 3, 0, 0]), UNLABELED),
        is_source=is_source,
    )
    states = None
    if model.is_graph:
        states = [MaskState(r, int(t)) for r, t in zip(GRADCHECK_REVEAL, domains)]
    params = trainable_parameters(model)
    return nx.finite_diff_check(lambda: compute_losses(model, batch, states, config).total, params, h)
