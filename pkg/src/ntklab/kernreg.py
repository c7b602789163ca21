"""Representer-theorem kernel regression on tangent kernels.

The fitted function is ``f(x) = sum_i alpha_i K(x, x_i)`` over the NC
kernel columns, with each output logit read off its own coordinate row.
The coefficients minimize the multinomial logistic loss plus the
kernel-norm penalty ``lam * alpha^T K alpha``; with that penalty, scaling
the kernel by ``s`` and ``lam`` by ``s`` reparameterizes the optimum as
``alpha / s`` and leaves every prediction unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax as _softmax

from .errors import ConvergenceError, ParameterError

#: log-spaced ridge grid for 5-fold cross-validation
LAMBDA_GRID = tuple(10.0**k for k in range(-4, 3))

_GRAD_TOL = 1e-8
_MAX_ITER = 100_000
_PSD_TOL = 1e-8


@dataclass(frozen=True)
class KernelRegressionResult:
    alpha: np.ndarray
    lam: float
    num_classes: int
    train_accuracy: float
    test_accuracy: float | None = None


@dataclass(frozen=True)
class PredictResult:
    labels: np.ndarray
    logits: np.ndarray
    accuracy: float | None = None


def _validated_kernel(kernel: np.ndarray) -> np.ndarray:
    """Symmetry/PSD gate: reject beyond 1e-8, clip tiny negative eigenvalues."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ParameterError("kernel must be square")
    asym = float(np.abs(kernel - kernel.T).max())
    if asym > _PSD_TOL:
        raise ParameterError(f"kernel asymmetric by {asym:.3e} (> {_PSD_TOL})")
    sym = 0.5 * (kernel + kernel.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals[0] < -_PSD_TOL:
        raise ParameterError(
            f"kernel not positive semidefinite: min eigenvalue {eigvals[0]:.3e}"
        )
    if eigvals[0] < 0:
        eigvals = np.maximum(eigvals, 0.0)
        sym = (eigvecs * eigvals) @ eigvecs.T
        sym = 0.5 * (sym + sym.T)
    return sym


def _logits_from(kernel_rows: np.ndarray, alpha: np.ndarray, c: int) -> np.ndarray:
    return (kernel_rows @ alpha).reshape(-1, c)


def _fit_at_lambda(kernel, labels, c, lam):
    """Damped Newton on the penalized multinomial logistic objective."""
    n = labels.size
    idx = np.arange(n)
    onehot = np.zeros((n, c))
    onehot[idx, labels - 1] = 1.0

    def objective(a):
        logits = _logits_from(kernel, a, c)
        ce = float(np.sum(logsumexp(logits, axis=1) - logits[idx, labels - 1]))
        return ce + lam * float(a @ (kernel @ a))

    alpha = np.zeros(kernel.shape[0])
    value = objective(alpha)
    for iteration in range(_MAX_ITER):
        logits = _logits_from(kernel, alpha, c)
        probs = _softmax(logits, axis=1)
        resid = (probs - onehot).reshape(-1)
        grad = kernel @ (resid + 2.0 * lam * alpha)
        if float(np.linalg.norm(grad)) <= _GRAD_TOL:
            return alpha, probs
        hess = 2.0 * lam * kernel.copy()
        for i in range(n):
            rows = kernel[i * c : (i + 1) * c, :]
            p = probs[i]
            m = np.diag(p) - np.outer(p, p)
            hess += rows.T @ (m @ rows)
        hess[np.diag_indices_from(hess)] += 1e-10 * max(1.0, float(np.abs(hess).max()))
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(50):
            candidate = alpha - scale * step
            cand_value = objective(candidate)
            if cand_value <= value:
                alpha, value = candidate, cand_value
                break
            scale *= 0.5
        else:
            # no descent direction left; re-check the gradient gate below
            logits = _logits_from(kernel, alpha, c)
            probs = _softmax(logits, axis=1)
            grad = kernel @ ((probs - onehot).reshape(-1) + 2.0 * lam * alpha)
            if float(np.linalg.norm(grad)) <= _GRAD_TOL:
                return alpha, probs
            raise ConvergenceError(
                f"line search stalled with gradient norm {np.linalg.norm(grad):.3e}"
            )
    raise ConvergenceError(f"no convergence within {_MAX_ITER} iterations")


def _select_lambda(kernel, labels, c, seed) -> float:
    n = labels.size
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.array_split(order, min(5, n))
    best = (LAMBDA_GRID[-1], -1.0)
    for lam in LAMBDA_GRID:
        scores = []
        for fold in folds:
            train_idx = np.setdiff1d(order, fold)
            if train_idx.size == 0 or fold.size == 0:
                continue
            if np.unique(labels[train_idx]).size < 2:
                continue
            row_idx = (train_idx[:, None] * c + np.arange(c)).ravel()
            val_idx = (fold[:, None] * c + np.arange(c)).ravel()
            sub = kernel[np.ix_(row_idx, row_idx)]
            try:
                alpha, _ = _fit_at_lambda(sub, labels[train_idx], c, lam)
            except ConvergenceError:
                continue
            logits = _logits_from(kernel[np.ix_(val_idx, row_idx)], alpha, c)
            pred = np.argmax(logits, axis=1) + 1
            scores.append(float(np.mean(pred == labels[fold])))
        if not scores:
            continue
        mean = float(np.mean(scores))
        # >= so ties prefer the stronger ridge
        if mean >= best[1]:
            best = (lam, mean)
    return best[0]


def fit(
    kernel_train: np.ndarray,
    labels: np.ndarray,
    lam: float | None = None,
    seed: int = 0,
) -> KernelRegressionResult:
    """Fit the representer coefficients on an ``NC x NC`` training kernel.

    ``lam=None`` selects the penalty by 5-fold cross-validation over
    ``LAMBDA_GRID``.  Deterministic: identical inputs give identical
    coefficients.
    """
    labels = np.asarray(labels, dtype=int)
    kernel = _validated_kernel(kernel_train)
    if lam is not None and lam < 0:
        raise ParameterError("lam must be >= 0")
    n = labels.size
    if n < 1 or kernel.shape[0] % n != 0:
        raise ParameterError(
            f"kernel has {kernel.shape[0]} rows, not a multiple of {n} samples"
        )
    c = kernel.shape[0] // n
    if c < 2:
        raise ParameterError("kernel implies fewer than 2 output coordinates")
    if labels.min() < 1 or labels.max() > c:
        raise ParameterError(f"labels must lie in [1, {c}]")
    if lam is None:
        lam = _select_lambda(kernel, labels, c, seed)
    alpha, probs = _fit_at_lambda(kernel, labels, c, lam)
    pred = np.argmax(probs, axis=1) + 1
    return KernelRegressionResult(
        alpha=alpha,
        lam=float(lam),
        num_classes=c,
        train_accuracy=float(np.mean(pred == labels)),
    )


def predict(
    kernel_test_train: np.ndarray,
    result: KernelRegressionResult,
    labels: np.ndarray | None = None,
) -> PredictResult:
    """Labels (and accuracy, when reference labels are given) on a test kernel.

    ``kernel_test_train`` has one row per (test sample, output coordinate)
    against the training columns; ties in the argmax resolve toward the
    lower class index.
    """
    kernel = np.asarray(kernel_test_train, dtype=float)
    if kernel.ndim != 2 or kernel.shape[1] != result.alpha.size:
        raise ParameterError(
            f"test kernel needs {result.alpha.size} columns, got {kernel.shape}"
        )
    c = result.num_classes
    if kernel.shape[0] % c != 0:
        raise ParameterError(f"test kernel rows must come in blocks of {c}")
    logits = _logits_from(kernel, result.alpha, c)
    pred = np.argmax(logits, axis=1) + 1
    accuracy = None
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (logits.shape[0],):
            raise ParameterError("need one label per test sample")
        accuracy = float(np.mean(pred == labels))
    return PredictResult(labels=pred, logits=logits, accuracy=accuracy)
