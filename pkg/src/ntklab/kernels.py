"""Empirical tangent kernels: decomposition, feature kernel, and statistics.

The ``NC x NC`` kernel over a training set splits into a pre-train-effective
part (from the head weight and bias derivatives, a scalar times the identity
per ``C x C`` block) and an FT-effective part (from the feature-extractor
derivatives, conjugated by the head weight).  Kernels are materialized
densely and capped at 2048 rows; this is a desk-scale tool by design.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import DegenerateResidualsError, ParameterError
from .models import ModelState, feature_jacobian, features_of

MAX_KERNEL_ROWS = 2048

#: denominators below this are skipped (and counted) in the FT ratio
FT_RATIO_EPS = 1e-15


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    # kills 1-ulp assembly asymmetry before any eigendecomposition
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class KernelDecomposition:
    """Tangent kernel of a model on a training set, stored as its two parts.

    ``pretrain_effective + ft_effective`` is the full kernel J J^T.  Rows and
    columns are indexed sample-major: row ``i * C + k`` is output coordinate
    ``k`` of sample ``i``.
    """

    pretrain_effective: np.ndarray
    ft_effective: np.ndarray
    num_classes: int
    anchor: str

    @property
    def n_samples(self) -> int:
        return self.pretrain_effective.shape[0] // self.num_classes

    @property
    def ntk(self) -> np.ndarray:
        return self.pretrain_effective + self.ft_effective

    def block_slice(self, i: int) -> slice:
        c = self.num_classes
        return slice(i * c, (i + 1) * c)

    def block(self, part: np.ndarray, i: int, j: int) -> np.ndarray:
        """C x C block of one of the stored matrices for sample pair (i, j)."""
        return part[self.block_slice(i), self.block_slice(j)]


@dataclass(frozen=True)
class KernelStats:
    """Numerical rank, Frobenius norm, and max-normalized singular values."""

    rank: int
    frobenius_norm: float
    normalized_singular_values: np.ndarray
    ft_ratio: float | None = None


@dataclass(frozen=True)
class FTRatioResult:
    """Mean FT-effective share of the kernel-predicted logit update."""

    value: float
    n_used: int
    n_skipped: int


def _check_kernel_size(n: int, c: int) -> None:
    if n * c > MAX_KERNEL_ROWS:
        raise ParameterError(
            f"kernel would have {n * c} rows; the desk-scale cap is {MAX_KERNEL_ROWS}"
        )


def _train_samples(model: ModelState, dataset: Dataset) -> np.ndarray:
    if dataset.dim != model.input_dim:
        raise ParameterError(
            f"dataset dimension {dataset.dim} != model dimension {model.input_dim}"
        )
    mask = dataset.rows("train")
    x = dataset.samples[mask] if mask.any() else dataset.samples
    return x


def _jacobian_stack(model: ModelState, xs: np.ndarray) -> np.ndarray:
    return np.stack([feature_jacobian(model, x) for x in xs])


def compute_decomposition(model: ModelState, dataset: Dataset) -> KernelDecomposition:
    """Both kernel parts on the dataset's train rows, at the given anchor.

    The pre-train-effective blocks are ``(<phi(x_i), phi(x_j)> + 1) I_C``;
    the FT-effective blocks are ``V J_phi(x_i) J_phi(x_j)^T V^T``.  Both
    matrices are symmetrized after assembly.
    """
    if dataset.num_classes != model.num_classes:
        raise ParameterError("dataset and model disagree on the class count")
    x = _train_samples(model, dataset)
    n = x.shape[0]
    c = model.num_classes
    _check_kernel_size(n, c)

    phi = features_of(model, x)
    gram = phi @ phi.T
    pretrain = np.kron(gram + 1.0, np.eye(c))

    jac = _jacobian_stack(model, x)
    head_jac = np.einsum("ch,nhp->ncp", model.head.weight, jac)
    ft_blocks = np.einsum("ncp,mdp->ncmd", head_jac, head_jac)
    ft = ft_blocks.reshape(n * c, n * c)
    return KernelDecomposition(
        pretrain_effective=_symmetrize(pretrain),
        ft_effective=_symmetrize(ft),
        num_classes=c,
        anchor=model.fingerprint(),
    )


def compute_phi_kernel(
    model: ModelState, xs: np.ndarray, xs2: np.ndarray | None = None
) -> np.ndarray:
    """Feature-extractor kernel blocks ``J_phi(x) J_phi(x')^T``.

    Returns an ``(n1, n2, h, h)`` array of blocks; for the linear branch
    each block equals ``<x, x'> I_h`` exactly (up to rounding).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    j1 = _jacobian_stack(model, xs)
    if xs2 is None:
        j2 = j1
    else:
        xs2 = np.atleast_2d(np.asarray(xs2, dtype=float))
        j2 = _jacobian_stack(model, xs2)
    return np.einsum("nhp,mgp->nmhg", j1, j2)


def ft_ratio(decomp: KernelDecomposition, residuals: np.ndarray) -> FTRatioResult:
    """Mean over train samples of ||sum_i F delta_i|| / ||sum_i (P+F) delta_i||.

    Residuals must come from the same anchor model the decomposition was
    computed at.  Samples whose denominator falls below ``FT_RATIO_EPS``
    are skipped and counted.
    """
    residuals = np.asarray(residuals, dtype=float)
    n, c = decomp.n_samples, decomp.num_classes
    if residuals.shape != (n, c):
        raise ParameterError(f"residuals must have shape ({n}, {c})")
    flat = residuals.reshape(-1)
    num = np.linalg.norm((decomp.ft_effective @ flat).reshape(n, c), axis=1)
    den = np.linalg.norm((decomp.ntk @ flat).reshape(n, c), axis=1)
    keep = den >= FT_RATIO_EPS
    if not keep.any():
        raise DegenerateResidualsError(
            "every kernel-predicted logit update vanished"
        )
    value = float(np.mean(num[keep] / den[keep]))
    return FTRatioResult(value=value, n_used=int(keep.sum()), n_skipped=int((~keep).sum()))


def kernel_stats(matrix: np.ndarray, rank_rel_tol: float = 1e-10) -> KernelStats:
    """Rank, Frobenius norm and normalized spectrum of a symmetric kernel.

    The rank counts singular values above ``rank_rel_tol`` times the largest
    one (default is the double-precision SVD noise floor).  Exact zeros are
    dropped from the normalized spectrum.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ParameterError("kernel must be a square matrix")
    if not rank_rel_tol > 0:
        raise ParameterError("rank_rel_tol must be > 0")
    asym = float(np.abs(matrix - matrix.T).max())
    if asym > 1e-10:
        raise ParameterError(f"matrix is asymmetric by {asym:.3e} (> 1e-10)")
    fro = float(np.linalg.norm(matrix, "fro"))
    sigma = np.linalg.svd(_symmetrize(matrix), compute_uv=False)
    smax = float(sigma[0]) if sigma.size else 0.0
    if smax == 0.0:
        return KernelStats(rank=0, frobenius_norm=fro, normalized_singular_values=np.array([]))
    rank = int((sigma > rank_rel_tol * smax).sum())
    normalized = sigma[sigma > 0.0] / smax
    return KernelStats(
        rank=rank, frobenius_norm=fro, normalized_singular_values=normalized
    )


def decomposition_residual(
    decomp: KernelDecomposition, full_jacobians: np.ndarray
) -> float:
    """Max-norm gap between P + F and the stacked-Jacobian kernel J J^T.

    ``full_jacobians`` is the ``(N, C, p)`` stack of per-sample logit
    Jacobians; the product is the brute-force kernel the decomposition
    must reproduce.
    """
    n, c, _ = full_jacobians.shape
    flat = full_jacobians.reshape(n * c, -1)
    brute = flat @ flat.T
    return float(np.abs(decomp.ntk - brute).max())


def save_matrix_csv(matrix: np.ndarray, path) -> None:
    """Matrix CSV with a header row and full round-trip float precision."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"col_{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def load_matrix_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParameterError(f"{path}: empty matrix file")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=float)
