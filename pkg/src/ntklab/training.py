"""Full-batch gradient-descent trainers and linearized one-epoch predictors.

Gradients are sum-aggregated over the training samples (not averaged), so
the kernel-predicted one-step updates hold verbatim with the configured
learning rate.  Callers who prefer the mean-risk convention can divide the
learning rate by N; the CLI exposes a flag that does exactly that.

One "epoch" is one full-batch gradient step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp, softmax as _softmax

from .data import Dataset
from .errors import DivergenceError, ParameterError
from .kernels import compute_phi_kernel
from .models import (
    ALL_VIEWS,
    FEATURE,
    HEAD_BIAS,
    HEAD_WEIGHT,
    HeadParams,
    LinearFeatureParams,
    LoRAAdapter,
    MLPFeatureParams,
    ModelState,
    features_of,
    logits_of,
)

MODES = ("LP", "FT", "LoRA", "LP-FT", "LP-LoRA")
TWO_STAGE_MODES = ("LP-FT", "LP-LoRA")
LP_SOLVERS = ("gradient_descent", "ridge_logistic")

#: abort threshold on the mean cross-entropy
DIVERGENCE_LOSS = 1e6

#: log-spaced ridge grid used by 5-fold cross-validation
RIDGE_GRID = tuple(10.0**k for k in range(-4, 3))

TRACE_COLUMNS = (
    "step",
    "phase",
    "phase_step",
    "loss",
    "accuracy",
    "v_norm",
    "b_norm",
    "mean_logit_norm",
    "mean_feature_drift",
)


@dataclass(frozen=True)
class TrainConfig:
    """Training mode and hyperparameters.

    ``epochs`` drives the (final) gradient-descent stage; two-stage modes
    run their probing stage first, with ``lp_epochs`` steps when the probe
    solver is gradient descent or a direct ridge-logistic solve otherwise.
    ``lp_lambda=None`` selects the ridge strength by 5-fold cross-validation
    over ``RIDGE_GRID``.
    """

    mode: str
    learning_rate: float
    epochs: int
    lp_solver: str = "ridge_logistic"
    lp_epochs: int = 0
    lp_learning_rate: float | None = None
    lp_lambda: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.lp_solver not in LP_SOLVERS:
            raise ParameterError(f"unknown lp_solver {self.lp_solver!r}")
        needs_lp = self.mode in TWO_STAGE_MODES or self.mode == "LP"
        if needs_lp and self.lp_solver == "gradient_descent":
            steps = self.lp_epochs if self.mode in TWO_STAGE_MODES else self.epochs
            if steps < 1:
                raise ParameterError(
                    "gradient-descent probing needs at least one step"
                )
        if self.lp_learning_rate is not None and not self.lp_learning_rate > 0:
            raise ParameterError("lp_learning_rate must be > 0")
        if self.lp_lambda is not None and self.lp_lambda < 0:
            raise ParameterError("lp_lambda must be >= 0")


@dataclass(frozen=True)
class TrainingTrace:
    """Per-step records plus the final model.

    ``records`` is a tuple of dicts keyed by ``TRACE_COLUMNS``; the global
    step index is strictly increasing, with row 0 the untouched initial
    state and one row per update event afterwards (a gradient step, or the
    one-shot ridge solve of a probing stage).
    """

    records: tuple[dict, ...]
    final_state: ModelState
    mode: str

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise ParameterError(f"unknown trace column {name!r}")
        return np.array([r[name] for r in self.records])


def residuals(model: ModelState, dataset: Dataset) -> np.ndarray:
    """Per-sample one-hot label minus softmax prediction, on the train rows.

    Softmax is evaluated with max subtraction, so saturated logits cannot
    overflow.  Rows sum to zero by construction.
    """
    x, y = _train_arrays(dataset, model)
    probs = _softmax(logits_of(model, x), axis=1)
    onehot = np.zeros_like(probs)
    onehot[np.arange(y.size), y - 1] = 1.0
    return onehot - probs


def _train_arrays(dataset: Dataset, model: ModelState) -> tuple[np.ndarray, np.ndarray]:
    if dataset.dim != model.input_dim:
        raise ParameterError("dataset and model disagree on the input dimension")
    if dataset.num_classes != model.num_classes:
        raise ParameterError("dataset and model disagree on the class count")
    mask = dataset.rows("train")
    if mask.any():
        return dataset.samples[mask], dataset.labels[mask]
    return dataset.samples, dataset.labels


def mean_cross_entropy(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    logits = logits_of(model, x)
    log_z = logsumexp(logits, axis=1)
    return float(np.mean(log_z - logits[np.arange(y.size), y - 1]))


def accuracy_of(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.argmax(logits_of(model, x), axis=1) + 1
    return float(np.mean(pred == y))


def _feature_gradient(model: ModelState, x: np.ndarray, upstream: np.ndarray):
    """Sum-aggregated loss gradient w.r.t. the trainable feature parameters.

    ``upstream`` is the (N, h) array of per-sample dLoss/dFeatures.  Returns
    the same structure as the model's feature parameters.
    """
    feat = model.feature
    if isinstance(feat, LinearFeatureParams):
        return LinearFeatureParams(weight=upstream.T @ x)
    if isinstance(feat, LoRAAdapter):
        projected = x @ feat.down.T
        grad_up = upstream.T @ projected
        grad_down = feat.up.T @ (upstream.T @ x)
        return LoRAAdapter(
            base=feat.base, down=grad_down, up=grad_up, init_variance=feat.init_variance
        )
    # MLP: standard batched backprop through the tanh layers
    activations = [x]
    a = x
    for w, b in zip(feat.weights[:-1], feat.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        activations.append(a)
    grads_w = []
    grads_b = []
    delta = upstream
    for layer in reversed(range(len(feat.weights))):
        a_prev = activations[layer]
        grads_w.append(delta.T @ a_prev)
        grads_b.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ feat.weights[layer]) * (1.0 - a_prev**2)
    return MLPFeatureParams(
        weights=tuple(reversed(grads_w)), biases=tuple(reversed(grads_b))
    )


def _check_finite_gradient(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise DivergenceError("non-finite gradient; aborting the step")


def gd_step(
    model: ModelState,
    dataset: Dataset,
    eta: float,
    trainable=ALL_VIEWS,
) -> ModelState:
    """One full-batch gradient step on the sum cross-entropy.

    Only the parameter views named in ``trainable`` move; the remaining
    arrays are shared with the input state, hence bit-identical.  With
    ``eta == 0`` the input state is returned unchanged.
    """
    trainable = tuple(trainable)
    if not trainable:
        raise ParameterError("trainable must name at least one parameter view")
    for name in trainable:
        if name not in ALL_VIEWS:
            raise ParameterError(f"unknown parameter view {name!r}")
    if eta == 0.0:
        return model
    x, _ = _train_arrays(dataset, model)
    delta = residuals(model, dataset)

    head = model.head
    feature = model.feature
    if HEAD_WEIGHT in trainable or HEAD_BIAS in trainable:
        phi = features_of(model, x)
        weight = head.weight
        bias = head.bias
        if HEAD_WEIGHT in trainable:
            grad_w = -(delta.T @ phi)
            _check_finite_gradient(grad_w)
            weight = head.weight - eta * grad_w
        if HEAD_BIAS in trainable:
            grad_b = -delta.sum(axis=0)
            _check_finite_gradient(grad_b)
            bias = head.bias - eta * grad_b
        head = HeadParams(weight=weight, bias=bias)
    if FEATURE in trainable:
        upstream = -(delta @ model.head.weight)
        grad = _feature_gradient(model, x, upstream)
        if isinstance(grad, LinearFeatureParams):
            _check_finite_gradient(grad.weight)
            feature = LinearFeatureParams(weight=model.feature.weight - eta * grad.weight)
        elif isinstance(grad, LoRAAdapter):
            _check_finite_gradient(grad.down, grad.up)
            feature = LoRAAdapter(
                base=model.feature.base,
                down=model.feature.down - eta * grad.down,
                up=model.feature.up - eta * grad.up,
                init_variance=model.feature.init_variance,
            )
        else:
            _check_finite_gradient(*grad.weights, *grad.biases)
            feature = MLPFeatureParams(
                weights=tuple(
                    w - eta * g for w, g in zip(model.feature.weights, grad.weights)
                ),
                biases=tuple(
                    b - eta * g for b, g in zip(model.feature.biases, grad.biases)
                ),
            )
    return ModelState(head=head, feature=feature)


# ---------------------------------------------------------------------------
# ridge-logistic probe solver
# ---------------------------------------------------------------------------


def fit_ridge_logistic(
    phi: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    lam: float | None = None,
    seed: int = 0,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic head on fixed features, by damped Newton.

    Minimizes the sum cross-entropy plus ``lam * ||V||_F^2`` (the bias is
    not penalized).  ``lam=None`` runs 5-fold cross-validation over
    ``RIDGE_GRID``, scored by validation accuracy with ties broken toward
    the stronger ridge.
    """
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if lam is None:
        lam = _select_ridge_lambda(phi, labels, num_classes, seed)
    n, h = phi.shape
    aug = np.concatenate([phi, np.ones((n, 1))], axis=1)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels - 1] = 1.0
    idx = np.arange(n)

    def objective(p):
        logits = aug @ p.T
        return float(
            np.sum(logsumexp(logits, axis=1) - logits[idx, labels - 1])
            + lam * np.sum(p[:, :h] ** 2)
        )

    params = np.zeros((num_classes, h + 1))
    pen = np.concatenate([np.full(h, 2.0 * lam), [0.0]])
    value = objective(params)
    for _ in range(max_iter):
        probs = _softmax(aug @ params.T, axis=1)
        grad = (probs - onehot).T @ aug + params * pen
        if float(np.abs(grad).max()) <= tol:
            break
        step = _newton_step_logistic(aug, probs, grad, pen, num_classes)
        scale = 1.0
        for _ in range(30):
            candidate = params - scale * step
            cand_value = objective(candidate)
            if cand_value <= value:
                params, value = candidate, cand_value
                break
            scale *= 0.5
        else:
            break
    return params[:, :h], params[:, h]


def _newton_step_logistic(aug, probs, grad, pen, num_classes):
    n, m = aug.shape
    size = num_classes * m
    hess = np.zeros((size, size))
    for k in range(num_classes):
        for l in range(num_classes):
            w = probs[:, k] * ((k == l) - probs[:, l])
            hess[k * m : (k + 1) * m, l * m : (l + 1) * m] = (aug * w[:, None]).T @ aug
    hess[np.arange(size), np.arange(size)] += np.tile(pen, num_classes)
    hess[np.arange(size), np.arange(size)] += 1e-10
    step = np.linalg.solve(hess, grad.reshape(-1))
    return step.reshape(num_classes, m)


def _select_ridge_lambda(phi, labels, num_classes, seed) -> float:
    n = phi.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.array_split(order, min(5, n))
    best = (RIDGE_GRID[-1], -1.0)
    for lam in RIDGE_GRID:
        scores = []
        for f in folds:
            train_idx = np.setdiff1d(order, f)
            if train_idx.size == 0 or f.size == 0:
                continue
            if np.unique(labels[train_idx]).size < 2:
                continue
            v, b = fit_ridge_logistic(
                phi[train_idx], labels[train_idx], num_classes, lam=lam
            )
            pred = np.argmax(phi[f] @ v.T + b, axis=1) + 1
            scores.append(float(np.mean(pred == labels[f])))
        if not scores:
            continue
        mean = float(np.mean(scores))
        # >= so ties prefer the larger (later) ridge strength
        if mean >= best[1]:
            best = (lam, mean)
    return best[0]


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


def _views_for_stage(model: ModelState, stage: str):
    if stage == "lp":
        return (HEAD_WEIGHT, HEAD_BIAS)
    return ALL_VIEWS


def _record(model, x, y, phi0, step, phase, phase_step) -> dict:
    logits = logits_of(model, x)
    phi = features_of(model, x)
    rec = {
        "step": step,
        "phase": phase,
        "phase_step": phase_step,
        "loss": mean_cross_entropy(model, x, y),
        "accuracy": accuracy_of(model, x, y),
        "v_norm": float(np.linalg.norm(model.head.weight, "fro")),
        "b_norm": float(np.linalg.norm(model.head.bias)),
        "mean_logit_norm": float(np.mean(np.linalg.norm(logits, axis=1))),
        "mean_feature_drift": float(np.mean(np.linalg.norm(phi - phi0, axis=1))),
    }
    return rec


def train(model: ModelState, dataset: Dataset, config: TrainConfig) -> TrainingTrace:
    """Train per the configured mode, tracing every update event.

    LP moves the head only; FT moves everything; the adapter mode moves the
    adapter plus the head (the frozen base never enters the parameter
    vector).  Two-stage modes run the probe first and start the final stage
    from the probed head.  Divergence aborts with the partial trace attached
    to the raised error.
    """
    if config.mode in ("LoRA", "LP-LoRA") and not isinstance(
        model.feature, LoRAAdapter
    ):
        raise ParameterError(f"mode {config.mode} needs an adapter-bearing model")
    x, y = _train_arrays(dataset, model)
    phi0 = features_of(model, x)
    records = [_record(model, x, y, phi0, 0, "init", 0)]
    step = 0

    def run_gd_stage(state, phase, steps, eta):
        nonlocal step
        for k in range(steps):
            try:
                state = gd_step(state, dataset, eta, _views_for_stage(state, phase))
            except DivergenceError as exc:
                raise DivergenceError(
                    str(exc), trace=TrainingTrace(tuple(records), state, config.mode)
                ) from exc
            step += 1
            rec = _record(state, x, y, phi0, step, phase, k + 1)
            records.append(rec)
            if not np.isfinite(rec["loss"]) or rec["loss"] > DIVERGENCE_LOSS:
                raise DivergenceError(
                    f"loss {rec['loss']} exceeded the divergence threshold",
                    trace=TrainingTrace(tuple(records), state, config.mode),
                )
        return state

    state = model
    if config.mode in ("LP", *TWO_STAGE_MODES):
        lp_eta = config.lp_learning_rate or config.learning_rate
        lp_steps = config.lp_epochs if config.mode in TWO_STAGE_MODES else config.epochs
        if config.lp_solver == "gradient_descent":
            state = run_gd_stage(state, "lp", lp_steps, lp_eta)
        else:
            v, b = fit_ridge_logistic(
                phi0, y, model.num_classes, lam=config.lp_lambda, seed=config.seed
            )
            state = ModelState(head=HeadParams(weight=v, bias=b), feature=state.feature)
            step += 1
            records.append(_record(state, x, y, phi0, step, "lp", 1))
    if config.mode in ("FT", "LoRA", *TWO_STAGE_MODES):
        state = run_gd_stage(state, "ft", config.epochs, config.learning_rate)
    return TrainingTrace(tuple(records), state, config.mode)


# ---------------------------------------------------------------------------
# linearized one-epoch predictors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearizedDeltas:
    """Kernel-predicted one-step changes at the probe points."""

    logit_deltas: np.ndarray
    feature_deltas: np.ndarray


def linearized_one_epoch(
    model: ModelState,
    dataset: Dataset,
    eta: float,
    probe_points: np.ndarray,
    anchor_residuals: np.ndarray | None = None,
) -> LinearizedDeltas:
    """First-order predicted logit and feature changes after one step.

    Logit deltas: ``eta * sum_i (P(x, x_i) + F(x, x_i)) delta_i``.
    Feature deltas: ``eta * sum_i Theta_phi(x, x_i) V^T delta_i``.
    Residuals default to the anchor model's own; pass them explicitly to
    study scaling laws at fixed residuals.
    """
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    x, _ = _train_arrays(dataset, model)
    delta = (
        residuals(model, dataset)
        if anchor_residuals is None
        else np.asarray(anchor_residuals, dtype=float)
    )
    if delta.shape != (x.shape[0], model.num_classes):
        raise ParameterError("residuals shape does not match the train rows")

    phi_train = features_of(model, x)
    phi_probe = features_of(model, probes)
    gram = phi_probe @ phi_train.T + 1.0
    pretrain_term = gram @ delta

    head_pullback = delta @ model.head.weight
    theta_phi = compute_phi_kernel(model, probes, x)
    feature_deltas = eta * np.einsum("mnhg,ng->mh", theta_phi, head_pullback)
    logit_deltas = eta * pretrain_term + feature_deltas @ model.head.weight.T
    return LinearizedDeltas(logit_deltas=logit_deltas, feature_deltas=feature_deltas)


# ---------------------------------------------------------------------------
# head-norm sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    scale: float
    feature_diff: float
    diverged: bool
    baseline: bool


def scale_head(model: ModelState, scale: float) -> ModelState:
    if not scale > 0:
        raise ParameterError("head scale must be > 0")
    return ModelState(
        head=HeadParams(weight=scale * model.head.weight, bias=scale * model.head.bias),
        feature=model.feature,
    )


def head_norm_sweep(
    model: ModelState,
    dataset: Dataset,
    scales,
    mode: str,
    config: TrainConfig,
) -> list[SweepRow]:
    """Feature change after training vs. head scale at the final-stage start.

    For each scale the head (weight and bias) is rescaled right before the
    final training stage: after probing for two-stage modes, directly at
    the start otherwise.  The reported number is the mean feature-vector
    change over the evaluation rows (the test split when present, else the
    train rows) between the stage start and the trained model.  Divergent
    runs yield a NaN row with the flag set instead of aborting.
    """
    scales = [float(s) for s in scales]
    if any(s <= 0 for s in scales):
        raise ParameterError("scales must be positive")
    if mode not in MODES or mode == "LP":
        raise ParameterError(f"sweep mode must be a fine-tuning mode, got {mode!r}")

    test_mask = dataset.rows("test")
    eval_x = dataset.samples[test_mask] if test_mask.any() else _train_arrays(dataset, model)[0]

    start = model
    if mode in TWO_STAGE_MODES:
        probe_cfg = replace(config, mode="LP", epochs=config.lp_epochs)
        start = train(model, dataset, probe_cfg).final_state
    stage_cfg = replace(
        config, mode={"LP-FT": "FT", "LP-LoRA": "LoRA"}.get(mode, mode)
    )

    rows = []
    for s in scales:
        scaled = scale_head(start, s)
        phi_start = features_of(scaled, eval_x)
        try:
            trained = train(scaled, dataset, stage_cfg).final_state
        except DivergenceError:
            rows.append(SweepRow(scale=s, feature_diff=float("nan"), diverged=True, baseline=s == 1.0))
            continue
        diff = float(
            np.mean(np.linalg.norm(features_of(trained, eval_x) - phi_start, axis=1))
        )
        rows.append(SweepRow(scale=s, feature_diff=diff, diverged=False, baseline=s == 1.0))
    return rows


def trace_to_csv(trace: TrainingTrace, path) -> None:
    """Trace CSV in the documented column order, full float precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace.records:
            writer.writerow(
                [
                    rec["step"],
                    rec["phase"],
                    rec["phase_step"],
                    *(repr(float(rec[k])) for k in TRACE_COLUMNS[3:]),
                ]
            )
