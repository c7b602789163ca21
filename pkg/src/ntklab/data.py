"""Seeded synthetic classification datasets and orthogonal-complement probes.

Datasets are immutable values: an ``(N, d)`` sample matrix, 1-based integer
labels, and a split tag per row.  The on-disk container is a single
self-describing JSON document that round-trips every float bit-exactly
(Python's ``repr`` shortest-representation guarantee).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataFormatError,
    EmptyOrthogonalComplementError,
    ParameterError,
)

SPLITS = ("train", "val", "test", "ood")

_FORMAT_TAG = "ntklab-dataset"
_FORMAT_VERSION = 1

# Relative drop tolerance for the modified Gram-Schmidt rank decision.
_MGS_TOL = 1e-12


def _freeze(arr: np.ndarray) -> np.ndarray:
    # Copy unless the array is already frozen (frozen arrays are safe to share).
    if arr.flags.writeable:
        arr = np.ascontiguousarray(arr).copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Classification dataset with per-row split tags.

    Labels are class indices in ``1..num_classes``.  ``input_norm_bound`` is
    recomputed from the samples on every access, so persistence can never
    drift it.
    """

    samples: np.ndarray
    labels: np.ndarray
    split_tags: tuple[str, ...]
    num_classes: int
    seed: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        tags = tuple(self.split_tags)
        if samples.ndim != 2:
            raise ParameterError("samples must be a 2-d matrix")
        n, d = samples.shape
        if n < 1 or d < 1:
            raise ParameterError(f"need N >= 1 and d >= 1, got shape {samples.shape}")
        if self.num_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.num_classes}")
        if not np.isfinite(samples).all():
            raise ParameterError("samples contain non-finite entries")
        if labels.shape != (n,):
            raise ParameterError("labels must be a length-N vector")
        if labels.min() < 1 or labels.max() > self.num_classes:
            raise ParameterError(
                f"labels must lie in [1, {self.num_classes}]"
            )
        if len(tags) != n:
            raise ParameterError("need one split tag per row")
        for t in tags:
            if t not in SPLITS:
                raise ParameterError(f"unknown split tag {t!r}")
        object.__setattr__(self, "samples", _freeze(samples))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "split_tags", tags)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def input_norm_bound(self) -> float:
        """Exact maximum Euclidean row norm (recomputed, never stored)."""
        return float(np.linalg.norm(self.samples, axis=1).max())

    def rows(self, split: str) -> np.ndarray:
        """Boolean row mask for one split tag."""
        if split not in SPLITS:
            raise ParameterError(f"unknown split tag {split!r}")
        return np.array([t == split for t in self.split_tags])

    def subset(self, index) -> "Dataset":
        """Dataset restricted to the given row indices (class count kept)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            samples=self.samples[index],
            labels=self.labels[index],
            split_tags=tuple(self.split_tags[i] for i in index),
            num_classes=self.num_classes,
            seed=None,
        )

    def split(self, tag: str) -> "Dataset":
        return self.subset(self.rows(tag))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.seed == other.seed
            and self.split_tags == other.split_tags
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
        )


def _orthonormal_columns(rng: np.random.Generator, d: int) -> np.ndarray:
    """Seeded random orthogonal d x d matrix (QR with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_gaussian_clusters(
    n_per_class: int,
    num_classes: int,
    dim: int,
    separation: float,
    noise_scale: float,
    seed: int,
    split: str = "train",
) -> Dataset:
    """Isotropic Gaussian blobs around pairwise-equidistant class means.

    The means are the first ``num_classes`` columns of a seeded random
    orthogonal matrix scaled by ``separation``, so all pairwise mean
    distances equal ``sqrt(2) * separation`` without hand-tuning.
    Deterministic given the seed.
    """
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    if dim < 2:
        raise ParameterError("dim must be >= 2")
    if num_classes > dim:
        raise ParameterError(
            "orthogonal class means need num_classes <= dim "
            f"(got C={num_classes}, d={dim})"
        )
    if noise_scale <= 0:
        raise ParameterError("noise_scale must be > 0")
    if separation < 0:
        raise ParameterError("separation must be >= 0")

    rng = np.random.default_rng(seed)
    means = separation * _orthonormal_columns(rng, dim)[:, :num_classes].T
    blocks = []
    for k in range(num_classes):
        blocks.append(means[k] + noise_scale * rng.standard_normal((n_per_class, dim)))
    samples = np.concatenate(blocks, axis=0)
    labels = np.repeat(np.arange(1, num_classes + 1), n_per_class)
    return Dataset(
        samples=samples,
        labels=labels,
        split_tags=(split,) * samples.shape[0],
        num_classes=num_classes,
        seed=seed,
    )


def concat_datasets(parts: list[Dataset]) -> Dataset:
    """Concatenate datasets with matching dimension and class count."""
    if not parts:
        raise ParameterError("need at least one dataset")
    first = parts[0]
    for p in parts[1:]:
        if p.dim != first.dim or p.num_classes != first.num_classes:
            raise ParameterError("datasets disagree on dim or num_classes")
    return Dataset(
        samples=np.concatenate([p.samples for p in parts], axis=0),
        labels=np.concatenate([p.labels for p in parts]),
        split_tags=tuple(t for p in parts for t in p.split_tags),
        num_classes=first.num_classes,
        seed=first.seed if len(parts) == 1 else None,
    )


def row_space_basis(samples: np.ndarray, tol: float = _MGS_TOL) -> np.ndarray:
    """Orthonormal basis of the row space of ``samples``.

    Modified Gram-Schmidt with one re-orthogonalization pass; a row is
    dropped when its residual falls below ``tol`` relative to its norm.
    """
    basis: list[np.ndarray] = []
    for row in np.asarray(samples, dtype=float):
        norm0 = np.linalg.norm(row)
        if norm0 == 0.0:
            continue
        v = row.copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > tol * norm0:
            basis.append(v / norm)
    if not basis:
        return np.zeros((0, samples.shape[1]))
    return np.array(basis)


def gen_orthogonal_probe(dataset: Dataset, m: int, seed: int) -> np.ndarray:
    """``m`` unit vectors orthogonal to every sample row, to 1e-12 relative.

    Draws Gaussian vectors, removes their projection onto the sample row
    space (twice), and renormalizes.  Raises if the samples already span
    the whole input space.
    """
    if m < 1:
        raise ParameterError("m must be >= 1")
    basis = row_space_basis(dataset.samples)
    d = dataset.dim
    if basis.shape[0] >= d:
        raise EmptyOrthogonalComplementError(
            f"samples have full rank {d}; the orthogonal complement is empty"
        )
    rng = np.random.default_rng(seed)
    probes = []
    attempts = 0
    while len(probes) < m:
        attempts += 1
        if attempts > 100 * m:
            raise ParameterError("failed to draw orthogonal probes")
        v = rng.standard_normal(d)
        norm0 = np.linalg.norm(v)
        for _ in range(2):
            v = v - basis.T @ (basis @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8 * norm0:
            probes.append(v / norm)
    return np.array(probes)


def is_linearly_separable(
    samples: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    max_epochs: int = 1000,
) -> bool:
    """Multiclass perceptron convergence test (with bias).

    Returns True when an epoch completes without updates, which proves
    linear separability.  Returning False only means the budget ran out.
    """
    x = np.asarray(samples, dtype=float)
    y = np.asarray(labels, dtype=int) - 1
    aug = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w = np.zeros((num_classes, aug.shape[1]))
    for _ in range(max_epochs):
        mistakes = 0
        for i in range(aug.shape[0]):
            pred = int(np.argmax(w @ aug[i]))
            if pred != y[i]:
                w[y[i]] += aug[i]
                w[pred] -= aug[i]
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def save_dataset(dataset: Dataset, path) -> None:
    """Write the self-describing JSON container."""
    doc = {
        "format": _FORMAT_TAG,
        "version": _FORMAT_VERSION,
        "dim": dataset.dim,
        "num_classes": dataset.num_classes,
        "seed": dataset.seed,
        "samples": [[float(v) for v in row] for row in dataset.samples],
        "labels": [int(v) for v in dataset.labels],
        "split_tags": list(dataset.split_tags),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    """Read a dataset container, naming the offending row on any violation."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh, parse_constant=lambda s: math.nan)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT_TAG:
        raise DataFormatError(f"{path}: missing '{_FORMAT_TAG}' format tag")
    for key in ("dim", "num_classes", "samples", "labels", "split_tags"):
        if key not in doc:
            raise DataFormatError(f"{path}: missing key {key!r}")
    dim = doc["dim"]
    num_classes = doc["num_classes"]
    rows = doc["samples"]
    labels = doc["labels"]
    tags = doc["split_tags"]
    if not rows:
        raise DataFormatError(f"{path}: empty sample matrix")
    if len(labels) != len(rows) or len(tags) != len(rows):
        raise DataFormatError(f"{path}: samples, labels and split_tags disagree in length")
    for i, row in enumerate(rows):
        if len(row) != dim:
            raise DataFormatError(f"{path}: row {i} has length {len(row)}, expected {dim}")
        for v in row:
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DataFormatError(f"{path}: row {i} has a non-finite entry")
        lab = labels[i]
        if not isinstance(lab, int) or lab < 1 or lab > num_classes:
            raise DataFormatError(
                f"{path}: row {i} has label {lab!r} outside [1, {num_classes}]"
            )
        if tags[i] not in SPLITS:
            raise DataFormatError(f"{path}: row {i} has unknown split tag {tags[i]!r}")
    return Dataset(
        samples=np.array(rows, dtype=float),
        labels=np.array(labels, dtype=int),
        split_tags=tuple(tags),
        num_classes=num_classes,
        seed=doc.get("seed"),
    )
