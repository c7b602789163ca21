"""Feature-change statistics, calibration error, and temperature scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax as _softmax

from .errors import (
    ConvergenceError,
    DegenerateInputError,
    ParameterError,
)
from .models import HeadParams, ModelState, logits_of
from .report import CheckReport

#: improvement below this counts as a plateau step for early stopping
_NLL_IMPROVEMENT_TOL = 1e-12


@dataclass(frozen=True)
class FeatureChangeStats:
    """Per-sample cosine similarity and diff norm between two feature sets.

    Rows where either feature vector has zero norm are excluded from the
    cosine mean and counted in ``n_excluded``.
    """

    mean_cosine_similarity: float
    mean_diff_norm: float
    fdr: float
    n_excluded: int


@dataclass(frozen=True)
class CalibrationReport:
    """Binned calibration summary; ``temperature`` is None before fitting."""

    ece: float
    mce: float
    nll: float
    n_bins: int
    bin_confidence: tuple
    bin_accuracy: tuple
    bin_count: tuple
    temperature: float | None = None


def fdr(features: np.ndarray, labels: np.ndarray) -> float:
    """Between-class over within-class scatter, trace form.

    ``trace(S_B) / trace(S_W)`` with S_B the class-count-weighted scatter
    of class means about the global mean and S_W the pooled within-class
    scatter.  Scale-invariant; returns ``inf`` when the within-class
    scatter vanishes.  The trace form is implementation-defined (the ratio
    of scatter matrices has many conventions), so only orderings of this
    statistic are meaningful, not absolute values.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ParameterError("features must be (N, h) with one label per row")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ParameterError("need at least 2 classes present")
    global_mean = features.mean(axis=0)
    between = 0.0
    within = 0.0
    for k in classes:
        rows = features[labels == k]
        if rows.shape[0] < 2:
            raise ParameterError(f"class {k} has fewer than 2 samples")
        mu = rows.mean(axis=0)
        between += rows.shape[0] * float(np.sum((mu - global_mean) ** 2))
        within += float(np.sum((rows - mu) ** 2))
    if within == 0.0:
        return math.inf
    return between / within


def feature_change_stats(
    features_before: np.ndarray,
    features_after: np.ndarray,
    labels: np.ndarray,
) -> FeatureChangeStats:
    """Mean cosine similarity and diff norm per sample; FDR of the new features."""
    before = np.asarray(features_before, dtype=float)
    after = np.asarray(features_after, dtype=float)
    if before.shape != after.shape:
        raise ParameterError("feature matrices must have matching shapes")
    norm_b = np.linalg.norm(before, axis=1)
    norm_a = np.linalg.norm(after, axis=1)
    valid = (norm_b > 0) & (norm_a > 0)
    if not valid.any():
        raise DegenerateInputError("all feature rows have zero norm")
    cosines = np.sum(before[valid] * after[valid], axis=1) / (
        norm_b[valid] * norm_a[valid]
    )
    diffs = np.linalg.norm(after - before, axis=1)
    return FeatureChangeStats(
        mean_cosine_similarity=float(np.mean(cosines)),
        mean_diff_norm=float(np.mean(diffs)),
        fdr=fdr(after, labels),
        n_excluded=int((~valid).sum()),
    )


def _validate_probabilities(probabilities: np.ndarray) -> np.ndarray:
    probs = np.asarray(probabilities, dtype=float)
    if probs.ndim != 2:
        raise ParameterError("probabilities must be an (N, C) matrix")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
    if bad.size:
        raise ParameterError(
            f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1 within 1e-9"
        )
    if (probs < 0).any():
        raise ParameterError("probabilities must be nonnegative")
    return probs


def ece_mce(
    probabilities: np.ndarray, labels: np.ndarray, n_bins: int = 15
) -> CalibrationReport:
    """Expected and maximum calibration error over equal-width confidence bins.

    Confidence is the maximum predicted probability.  A confidence exactly
    on a bin boundary lands in the upper bin; 1.0 lands in the last bin.
    """
    probs = _validate_probabilities(probabilities)
    labels = np.asarray(labels, dtype=int)
    if n_bins < 1:
        raise ParameterError("n_bins must be >= 1")
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ParameterError("need one label per probability row")
    confidence = probs.max(axis=1)
    predicted = np.argmax(probs, axis=1) + 1
    correct = (predicted == labels).astype(float)
    idx = np.minimum((confidence * n_bins).astype(int), n_bins - 1)

    bin_conf, bin_acc, bin_count = [], [], []
    ece = 0.0
    mce = 0.0
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        bin_count.append(count)
        if count == 0:
            bin_conf.append(0.0)
            bin_acc.append(0.0)
            continue
        conf = float(confidence[mask].mean())
        acc = float(correct[mask].mean())
        bin_conf.append(conf)
        bin_acc.append(acc)
        gap = abs(acc - conf)
        ece += count / n * gap
        mce = max(mce, gap)
    with np.errstate(divide="ignore"):
        true_prob = probs[np.arange(n), labels - 1]
        nll = float(np.mean(-np.log(true_prob)))
    return CalibrationReport(
        ece=ece,
        mce=mce,
        nll=nll,
        n_bins=n_bins,
        bin_confidence=tuple(bin_conf),
        bin_accuracy=tuple(bin_acc),
        bin_count=tuple(bin_count),
    )


def _mean_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    scaled = logits / temperature
    return float(
        np.mean(logsumexp(scaled, axis=1) - scaled[np.arange(labels.size), labels - 1])
    )


def fit_temperature(
    logits_val: np.ndarray,
    labels_val: np.ndarray,
    learning_rate: float = 1e-3,
    max_steps: int = 100_000,
    patience: int = 10,
    initial: float = 1.0,
) -> float:
    """Temperature minimizing the validation NLL of softmax(logits / T).

    Plain gradient descent on T from 1.0 with learning rate 1e-3, at most
    1e5 steps, early-stopped after ``patience`` consecutive steps without
    improvement.  Returns the best temperature seen, so the fitted value
    never has higher validation NLL than the starting point.
    """
    logits = np.asarray(logits_val, dtype=float)
    labels = np.asarray(labels_val, dtype=int)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ParameterError("need at least one validation row")
    if labels.shape != (logits.shape[0],):
        raise ParameterError("need one label per logits row")

    t = float(initial)
    best_t, best_nll = t, _mean_nll(logits, labels, t)
    if not math.isfinite(best_nll):
        raise ConvergenceError("non-finite NLL at the initial temperature")
    stale = 0
    idx = np.arange(labels.size)
    for _ in range(max_steps):
        scaled = logits / t
        probs = _softmax(scaled, axis=1)
        # d(mean NLL)/dT with z = logits/T: mean(z_y - sum_k p_k z_k) / T
        grad = float(
            np.mean(scaled[idx, labels - 1] - np.sum(probs * scaled, axis=1)) / t
        )
        candidate = t - learning_rate * grad
        if candidate <= 0:
            candidate = t / 2.0
        t = candidate
        nll = _mean_nll(logits, labels, t)
        if not math.isfinite(nll):
            raise ConvergenceError(f"non-finite NLL at temperature {t!r}")
        if nll < best_nll - _NLL_IMPROVEMENT_TOL:
            best_t, best_nll = t, nll
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best_t


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T); the argmax is invariant for every T > 0."""
    if not temperature > 0:
        raise ParameterError("temperature must be > 0")
    return _softmax(np.asarray(logits, dtype=float) / temperature, axis=1)


def head_scaling_equivalence(
    model: ModelState, temperature: float, inputs: np.ndarray
) -> CheckReport:
    """Tempered softmax versus a model whose head is divided by T.

    softmax(f(x) / T) must match the forward pass of the model with head
    (V / T, b / T) to 1e-12, and the argmax labels must agree exactly for
    every input.
    """
    if not temperature > 0:
        raise ParameterError("temperature must be > 0")
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    logits = logits_of(model, x)
    tempered = apply_temperature(logits, temperature)

    scaled_model = ModelState(
        head=HeadParams(
            weight=model.head.weight / temperature, bias=model.head.bias / temperature
        ),
        feature=model.feature,
    )
    scaled_logits = logits_of(scaled_model, x)
    direct = _softmax(scaled_logits, axis=1)

    prob_gap = float(np.abs(tempered - direct).max())
    argmax_mismatch = int(
        (np.argmax(logits, axis=1) != np.argmax(scaled_logits, axis=1)).sum()
    )
    return CheckReport(
        name="head_scaling_equivalence",
        measured={
            "max_probability_gap": prob_gap,
            "argmax_mismatches": float(argmax_mismatch),
        },
        tolerances={"max_probability_gap": 1e-12, "argmax_mismatches": 0.0},
        notes={"temperature": temperature, "n_inputs": int(x.shape[0])},
    )
