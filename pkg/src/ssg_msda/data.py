"""Synthetic multi-domain data, feature-file I/O and source/target batching."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

UNLABELED = -1
FEATURE_FILE_VERSION = 1

# shift_level -> (max rotation angle in radians, translation norm)
SHIFT_LEVELS = {
    "low": (0.0, 0.0),
    "medium": (0.9, 0.5),
    "high": (1.2, 1.0),
}


class FeatureFileError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples as parallel arrays.

    ``labels`` is the training view: target-domain rows always hold
    ``UNLABELED``. True target labels live in a separate array that only the
    evaluator reads through :meth:`heldout_labels`.
    """

    ids: np.ndarray
    features: np.ndarray
    domains: np.ndarray
    labels: np.ndarray
    n_domains: int
    n_classes: int
    target_domain: int | None = None
    _heldout: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.ids), -1)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.target_domain is not None:
            tgt = self.domains == self.target_domain
            if (self.labels[tgt] != UNLABELED).any():
                raise ValueError("target-domain samples must be unlabeled in the training view")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def source_mask(self) -> np.ndarray:
        if self.target_domain is None:
            return np.ones(len(self), dtype=bool)
        return self.domains != self.target_domain

    @property
    def target_mask(self) -> np.ndarray:
        return ~self.source_mask

    def heldout_labels(self) -> np.ndarray | None:
        """True labels of target rows (``UNLABELED`` elsewhere), if known."""
        return None if self._heldout is None else self._heldout.copy()


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int = 4
    n_classes: int = 4
    samples_per_class_per_domain: int = 50
    input_dim: int = 16
    shift_level: str = "medium"
    seed: int = 0
    class_sep: float = 3.0
    noise: float = 0.4

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError("need at least two domains (sources plus one target)")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 for the rotation model")
        if self.shift_level not in SHIFT_LEVELS:
            raise ValueError(f"shift_level must be one of {sorted(SHIFT_LEVELS)}, got {self.shift_level!r}")


def _plane_rotation(u: np.ndarray, v: np.ndarray, angle: float) -> np.ndarray:
    dim = u.shape[0]
    return (
        np.eye(dim)
        + np.sin(angle) * (np.outer(v, u) - np.outer(u, v))
        + (np.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    )


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian class clusters whose means rotate from domain to domain.

    Class means sit evenly on a circle of radius ``class_sep`` in a random
    plane. Domain ``j`` rotates that circle by ``max_angle * j / (n - 1)`` and
    translates everything by a random vector of fixed norm. The last domain is
    the unlabeled target, so it extrapolates past the rotations the sources
    cover.
    """
    rng = np.random.default_rng(spec.seed)
    n, c, m, F = spec.n_domains, spec.n_classes, spec.samples_per_class_per_domain, spec.input_dim
    max_angle, shift = SHIFT_LEVELS[spec.shift_level]

    basis, _ = np.linalg.qr(rng.normal(size=(F, 2)))
    u, v = basis[:, 0], basis[:, 1]
    phase = 2 * np.pi * (np.arange(c) / c) + rng.uniform(0, 2 * np.pi)
    means = spec.class_sep * (np.outer(np.cos(phase), u) + np.outer(np.sin(phase), v))
    directions = rng.normal(size=(n, F))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    feats, doms, labs = [], [], []
    for j in range(n):
        rot = _plane_rotation(u, v, max_angle * j / (n - 1))
        dmeans = means @ rot.T + shift * directions[j]
        for k in range(c):
            feats.append(dmeans[k] + spec.noise * rng.normal(size=(m, F)))
            doms.append(np.full(m, j))
            labs.append(np.full(m, k))
    features = np.concatenate(feats)
    domains = np.concatenate(doms)
    true_labels = np.concatenate(labs)
    target = n - 1
    is_tgt = domains == target
    return Dataset(
        ids=np.arange(len(features)),
        features=features,
        domains=domains,
        labels=np.where(is_tgt, UNLABELED, true_labels),
        n_domains=n,
        n_classes=c,
        target_domain=target,
        _heldout=np.where(is_tgt, true_labels, UNLABELED),
    )


# ---------------------------------------------------------------------------
# feature files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_feature_file(dataset: Dataset, path: str | os.PathLike, include_heldout: bool = False) -> None:
    """Write the CSV feature format. With ``include_heldout`` target rows carry
    their true labels; reload with ``target_domain`` to hide them again."""
    labels = dataset.labels
    if include_heldout and dataset.heldout_labels() is not None:
        held = dataset.heldout_labels()
        labels = np.where(dataset.target_mask, held, labels)
    F = dataset.dim if len(dataset) else dataset.features.shape[1]
    buf = io.StringIO()
    buf.write(
        f"#ssg-features,version={FEATURE_FILE_VERSION},n_domains={dataset.n_domains},"
        f"n_classes={dataset.n_classes},dim={F}\n"
    )
    buf.write(",".join(["id", "domain", "label"] + [f"f{i}" for i in range(F)]) + "\n")
    for i in range(len(dataset)):
        row = [str(int(dataset.ids[i])), str(int(dataset.domains[i])), str(int(labels[i]))]
        row += [_fmt(x) for x in dataset.features[i]]
        buf.write(",".join(row) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _parse_header(line: str) -> dict[str, int]:
    parts = line.rstrip("\n").split(",")
    if parts[0] != "#ssg-features":
        raise FeatureFileError("line 1: missing '#ssg-features' marker")
    meta = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise FeatureFileError(f"line 1: malformed header field {part!r}")
        try:
            meta[key] = int(value)
        except ValueError:
            raise FeatureFileError(f"line 1: header field {key} is not an integer") from None
    for key in ("version", "n_domains", "n_classes", "dim"):
        if key not in meta:
            raise FeatureFileError(f"line 1: header lacks {key}")
    if meta["version"] != FEATURE_FILE_VERSION:
        raise FeatureFileError(f"line 1: unsupported version {meta['version']}")
    return meta


def load_feature_file(path: str | os.PathLike, target_domain: int | None = None) -> Dataset:
    """Parse a feature file.

    The target domain is ``target_domain`` when given (its labels, if present,
    become held-out labels); otherwise the single domain whose rows are all
    unlabeled, if there is one.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FeatureFileError("line 1: empty file")
    meta = _parse_header(lines[0])
    n, c, F = meta["n_domains"], meta["n_classes"], meta["dim"]
    expected = ["id", "domain", "label"] + [f"f{i}" for i in range(F)]
    if len(lines) < 2 or lines[1].split(",") != expected:
        raise FeatureFileError(f"line 2: column header does not match dim={F}")

    ids, doms, labs, feats = [], [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        cells = line.split(",")
        if len(cells) != 3 + F:
            raise FeatureFileError(f"line {lineno}: expected {3 + F} fields, got {len(cells)}")
        try:
            i, dom, lab = int(cells[0]), int(cells[1]), int(cells[2])
            row = [float(x) for x in cells[3:]]
        except ValueError as exc:
            raise FeatureFileError(f"line {lineno}: {exc}") from None
        if not 0 <= dom < n:
            raise FeatureFileError(f"line {lineno}: domain {dom} outside [0, {n})")
        if lab != UNLABELED and not 0 <= lab < c:
            raise FeatureFileError(f"line {lineno}: label {lab} outside [0, {c})")
        if not np.isfinite(row).all():
            raise FeatureFileError(f"line {lineno}: non-finite feature")
        ids.append(i)
        doms.append(dom)
        labs.append(lab)
        feats.append(row)

    domains = np.array(doms, dtype=np.int64)
    labels = np.array(labs, dtype=np.int64)
    features = np.array(feats, dtype=np.float64).reshape(len(ids), F)
    if target_domain is None:
        candidates = [j for j in range(n) if (domains == j).any() and (labels[domains == j] == UNLABELED).all()]
        if len(candidates) > 1:
            raise FeatureFileError(f"several fully unlabeled domains {candidates}; pass target_domain")
        target_domain = candidates[0] if candidates else None
    heldout = None
    if target_domain is not None:
        if not 0 <= target_domain < n:
            raise FeatureFileError(f"target_domain {target_domain} outside [0, {n})")
        is_tgt = domains == target_domain
        heldout = np.where(is_tgt, labels, UNLABELED)
        labels = np.where(is_tgt, UNLABELED, labels)
    return Dataset(ids, features, domains, labels, n, c, target_domain, _heldout=heldout)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 32
    source_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.source_fraction is not None and not 0.0 < self.source_fraction <= 1.0:
            raise ValueError("source_fraction must lie in (0, 1]")


@dataclass
class Batch:
    indices: np.ndarray
    features: np.ndarray
    domains: np.ndarray
    labels: np.ndarray
    is_source: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def source_slice(self) -> np.ndarray:
        return np.flatnonzero(self.is_source)

    @property
    def target_slice(self) -> np.ndarray:
        return np.flatnonzero(~self.is_source)


def _interleave(src: np.ndarray, tgt: np.ndarray, frac: float) -> np.ndarray:
    out = np.empty(len(src) + len(tgt), dtype=np.int64)
    si = ti = 0
    for k in range(len(out)):
        take_src = ti >= len(tgt) or (si < len(src) and si < frac * (k + 1))
        if take_src:
            out[k] = src[si]
            si += 1
        else:
            out[k] = tgt[ti]
            ti += 1
    return out


def make_batches(dataset: Dataset, plan: BatchPlan, epoch_seed: int = 0) -> list[Batch]:
    """Shuffle sources and targets separately, interleave them at the planned
    source fraction, and cut consecutive batches."""
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng([plan.seed, epoch_seed])
    src = np.flatnonzero(dataset.source_mask)
    tgt = np.flatnonzero(dataset.target_mask)
    if len(src) == 0:
        raise ValueError("dataset has no source samples")
    src = src[rng.permutation(len(src))]
    tgt = tgt[rng.permutation(len(tgt))]
    frac = plan.source_fraction if plan.source_fraction is not None else len(src) / len(dataset)
    order = _interleave(src, tgt, frac)

    chunks = [order[i : i + plan.batch_size] for i in range(0, len(order), plan.batch_size)]
    source_mask = dataset.source_mask
    merged: list[np.ndarray] = []
    for chunk in chunks:
        if merged and not source_mask[chunk].any():
            merged[-1] = np.concatenate([merged[-1], chunk])
        else:
            merged.append(chunk)
    return [
        Batch(
            indices=idx,
            features=dataset.features[idx],
            domains=dataset.domains[idx],
            labels=dataset.labels[idx],
            is_source=source_mask[idx],
        )
        for idx in merged
    ]


def iter_eval_chunks(dataset: Dataset, size: int = 512) -> Iterator[np.ndarray]:
    for start in range(0, len(dataset), size):
        yield np.arange(start, min(start + size, len(dataset)))
