"""Models under study: two-layer linear, small tanh MLP, and low-rank adapters.

Every model is a linear head ``(V, b)`` on top of a feature extractor, so
``logits = V @ features + b`` exactly.  All parameters live in float64.

The flattened parameter vector is ordered: head weight row-major, head
bias, then feature parameters.  Feature parameters flatten layer by layer
from input to output (each weight row-major, then its bias); a low-rank
adapter flattens its down projection first, then its up projection.  The
frozen base of an adapter is not part of the parameter vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ParameterError

_FORMAT_TAG = "ntklab-model"
_FORMAT_VERSION = 1

HEAD_WEIGHT = "head_weight"
HEAD_BIAS = "head_bias"
FEATURE = "feature"
ALL_VIEWS = (HEAD_WEIGHT, HEAD_BIAS, FEATURE)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    # Copy unless the array is already frozen (frozen arrays are safe to share).
    if arr.flags.writeable:
        arr = np.ascontiguousarray(arr).copy()
        arr.flags.writeable = False
    return arr


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class HeadParams:
    """Classifier weight ``(C, h)`` and bias ``(C,)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _freeze(self.weight)
        b = _freeze(self.bias)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ParameterError("head weight must be (C, h) with a length-C bias")
        _require_finite("head weight", w)
        _require_finite("head bias", b)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class LinearFeatureParams:
    """Single weight matrix ``(h, d)``; features are ``B @ x``."""

    weight: np.ndarray

    def __post_init__(self):
        w = _freeze(self.weight)
        if w.ndim != 2:
            raise ParameterError("feature weight must be (h, d)")
        _require_finite("feature weight", w)
        object.__setattr__(self, "weight", w)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class MLPFeatureParams:
    """Feedforward tanh net; the output layer is linear.

    ``weights[l]`` has shape ``(n_l, n_{l-1})`` and chains from the input
    dimension to the feature dimension.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(_freeze(w) for w in self.weights)
        bs = tuple(_freeze(b) for b in self.biases)
        if len(ws) < 1 or len(ws) != len(bs):
            raise ParameterError("need one bias per layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ParameterError(f"layer {i} weight/bias shapes disagree")
            _require_finite(f"layer {i} weight", w)
            _require_finite(f"layer {i} bias", b)
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ParameterError(f"layer {i} does not chain with layer {i - 1}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]


@dataclass(frozen=True)
class LoRAAdapter:
    """Frozen base ``(h, d)`` plus a trainable low-rank update ``up @ down``.

    ``down`` is ``(r, d)`` with i.i.d. N(0, init_variance) entries at
    initialization; ``up`` is ``(h, r)`` and starts at zero, so the adapted
    forward pass coincides with the base model until training moves it.
    """

    base: np.ndarray
    down: np.ndarray
    up: np.ndarray
    init_variance: float

    def __post_init__(self):
        base = _freeze(self.base)
        down = _freeze(self.down)
        up = _freeze(self.up)
        if base.ndim != 2 or down.ndim != 2 or up.ndim != 2:
            raise ParameterError("adapter matrices must be 2-d")
        h, d = base.shape
        r = down.shape[0]
        if down.shape != (r, d) or up.shape != (h, r):
            raise ParameterError("adapter shapes must be down (r, d), up (h, r)")
        if r > min(h, d):
            raise ParameterError(f"rank {r} exceeds min(h, d) = {min(h, d)}")
        if not self.init_variance > 0:
            raise ParameterError("init_variance must be > 0")
        for name, arr in (("base", base), ("down", down), ("up", up)):
            _require_finite(name, arr)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def out_dim(self) -> int:
        return self.base.shape[0]

    @property
    def in_dim(self) -> int:
        return self.base.shape[1]


FeatureParams = LinearFeatureParams | MLPFeatureParams | LoRAAdapter


@dataclass(frozen=True)
class ModelState:
    """Immutable head + feature-extractor parameter bundle."""

    head: HeadParams
    feature: FeatureParams

    def __post_init__(self):
        if self.head.weight.shape[1] != self.feature.out_dim:
            raise ParameterError(
                "head width does not match the feature dimension"
            )

    @property
    def arch(self) -> str:
        if isinstance(self.feature, LinearFeatureParams):
            return "linear"
        if isinstance(self.feature, MLPFeatureParams):
            return "mlp"
        return "lora"

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.feature.out_dim

    @property
    def input_dim(self) -> int:
        return self.feature.in_dim

    def fingerprint(self) -> str:
        """Stable content hash of architecture and parameters."""
        digest = hashlib.sha256()
        digest.update(self.arch.encode())
        digest.update(flatten_params(self).tobytes())
        if isinstance(self.feature, LoRAAdapter):
            digest.update(self.feature.base.tobytes())
        return digest.hexdigest()[:16]


def init_model(
    arch: str,
    dim: int,
    feature_dim: int,
    num_classes: int,
    head_init: str = "zeros",
    head_scale: float = 1e-2,
    seed: int = 0,
    hidden_layers: tuple[int, ...] = (32, 32),
    rank: int | None = None,
    init_variance: float | None = None,
) -> ModelState:
    """Seeded model construction.

    ``head_init`` is ``"zeros"`` or ``"gaussian"`` (entries scaled by
    ``head_scale``).  The adapter branch wraps a freshly drawn linear base;
    its up projection starts at exactly zero.
    """
    if dim < 1 or feature_dim < 1 or num_classes < 2:
        raise ParameterError("dimensions must be positive with num_classes >= 2")
    if head_init not in ("zeros", "gaussian"):
        raise ParameterError(f"unknown head_init {head_init!r}")
    if head_init == "gaussian" and not head_scale > 0:
        raise ParameterError("head_scale must be > 0")
    rng = np.random.default_rng(seed)

    if head_init == "zeros":
        head = HeadParams(
            weight=np.zeros((num_classes, feature_dim)),
            bias=np.zeros(num_classes),
        )
    else:
        head = HeadParams(
            weight=head_scale * rng.standard_normal((num_classes, feature_dim)),
            bias=head_scale * rng.standard_normal(num_classes),
        )

    if arch == "linear":
        feature = LinearFeatureParams(
            weight=rng.standard_normal((feature_dim, dim)) / math.sqrt(dim)
        )
    elif arch == "mlp":
        sizes = (dim, *hidden_layers, feature_dim)
        weights = []
        biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        feature = MLPFeatureParams(weights=tuple(weights), biases=tuple(biases))
    elif arch == "lora":
        if rank is None:
            raise ParameterError("the adapter branch requires an explicit rank")
        if rank > min(feature_dim, dim):
            raise ParameterError(
                f"rank {rank} exceeds min(h, d) = {min(feature_dim, dim)}"
            )
        sigma2 = 1.0 / rank if init_variance is None else init_variance
        base = rng.standard_normal((feature_dim, dim)) / math.sqrt(dim)
        down = math.sqrt(sigma2) * rng.standard_normal((rank, dim))
        feature = LoRAAdapter(
            base=base,
            down=down,
            up=np.zeros((feature_dim, rank)),
            init_variance=sigma2,
        )
    else:
        raise ParameterError(f"unknown architecture {arch!r}")
    return ModelState(head=head, feature=feature)


def attach_adapter(
    model: ModelState, rank: int, init_variance: float, seed: int
) -> ModelState:
    """Wrap a linear model's feature matrix with a fresh low-rank adapter.

    The base weight is taken over frozen and the head is shared, which is
    the configuration whose tangent kernel matches full fine-tuning up to
    the adapter's scalar factor.
    """
    if not isinstance(model.feature, LinearFeatureParams):
        raise ParameterError("adapters attach to the linear feature branch only")
    if rank > min(model.feature_dim, model.input_dim):
        raise ParameterError("rank exceeds min(h, d)")
    if not init_variance > 0:
        raise ParameterError("init_variance must be > 0")
    rng = np.random.default_rng(seed)
    down = math.sqrt(init_variance) * rng.standard_normal((rank, model.input_dim))
    adapter = LoRAAdapter(
        base=model.feature.weight,
        down=down,
        up=np.zeros((model.feature_dim, rank)),
        init_variance=init_variance,
    )
    return ModelState(head=model.head, feature=adapter)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def features_of(model: ModelState, x: np.ndarray) -> np.ndarray:
    """Features for a batch ``(N, d)`` (or a single vector)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.input_dim:
        raise ParameterError(
            f"input dimension {batch.shape[1]} != model dimension {model.input_dim}"
        )
    feat = model.feature
    if isinstance(feat, LinearFeatureParams):
        out = batch @ feat.weight.T
    elif isinstance(feat, MLPFeatureParams):
        a = batch
        for w, b in zip(feat.weights[:-1], feat.biases[:-1]):
            a = np.tanh(a @ w.T + b)
        out = a @ feat.weights[-1].T + feat.biases[-1]
    else:
        out = batch @ (feat.base + feat.up @ feat.down).T
    return out[0] if single else out


def logits_of(model: ModelState, x: np.ndarray) -> np.ndarray:
    phi = features_of(model, x)
    return phi @ model.head.weight.T + model.head.bias


def forward(model: ModelState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(features, logits) for one input vector; logits = V @ features + b."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ParameterError("forward takes a single input vector")
    if not np.isfinite(x).all():
        raise ParameterError("input contains non-finite entries")
    phi = features_of(model, x)
    return phi, model.head.weight @ phi + model.head.bias


# ---------------------------------------------------------------------------
# flattened parameter views
# ---------------------------------------------------------------------------


def _feature_param_count(feat: FeatureParams) -> int:
    if isinstance(feat, LinearFeatureParams):
        return feat.weight.size
    if isinstance(feat, MLPFeatureParams):
        return sum(w.size + b.size for w, b in zip(feat.weights, feat.biases))
    return feat.down.size + feat.up.size


def _flatten_feature(feat: FeatureParams) -> np.ndarray:
    if isinstance(feat, LinearFeatureParams):
        return feat.weight.ravel()
    if isinstance(feat, MLPFeatureParams):
        parts = []
        for w, b in zip(feat.weights, feat.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)
    return np.concatenate([feat.down.ravel(), feat.up.ravel()])


def _unflatten_feature(feat: FeatureParams, vec: np.ndarray) -> FeatureParams:
    if isinstance(feat, LinearFeatureParams):
        return LinearFeatureParams(weight=vec.reshape(feat.weight.shape))
    if isinstance(feat, MLPFeatureParams):
        weights = []
        biases = []
        pos = 0
        for w, b in zip(feat.weights, feat.biases):
            weights.append(vec[pos : pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(vec[pos : pos + b.size])
            pos += b.size
        return MLPFeatureParams(weights=tuple(weights), biases=tuple(biases))
    n_down = feat.down.size
    return LoRAAdapter(
        base=feat.base,
        down=vec[:n_down].reshape(feat.down.shape),
        up=vec[n_down:].reshape(feat.up.shape),
        init_variance=feat.init_variance,
    )


def param_views(model: ModelState) -> dict[str, slice]:
    """Disjoint, exhaustive slices of the flattened parameter vector."""
    c, h = model.head.weight.shape
    n_feat = _feature_param_count(model.feature)
    return {
        HEAD_WEIGHT: slice(0, c * h),
        HEAD_BIAS: slice(c * h, c * h + c),
        FEATURE: slice(c * h + c, c * h + c + n_feat),
    }


def flatten_params(model: ModelState) -> np.ndarray:
    return np.concatenate(
        [model.head.weight.ravel(), model.head.bias, _flatten_feature(model.feature)]
    )


def unflatten_params(model: ModelState, vec: np.ndarray) -> ModelState:
    """New state with the same architecture and the given flat parameters."""
    vec = np.asarray(vec, dtype=float)
    views = param_views(model)
    if vec.shape != (views[FEATURE].stop,):
        raise ParameterError(
            f"expected a flat vector of length {views[FEATURE].stop}"
        )
    head = HeadParams(
        weight=vec[views[HEAD_WEIGHT]].reshape(model.head.weight.shape),
        bias=vec[views[HEAD_BIAS]],
    )
    return ModelState(
        head=head, feature=_unflatten_feature(model.feature, vec[views[FEATURE]])
    )


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def feature_jacobian(model: ModelState, x: np.ndarray) -> np.ndarray:
    """Dense ``(h, p_phi)`` Jacobian of the features w.r.t. feature params.

    Linear branch: the exact Kronecker structure x (x) I_h.  Adapter branch:
    exact closed-form blocks for the down and up projections.  MLP branch:
    reverse accumulation.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise ParameterError("input dimension mismatch")
    feat = model.feature
    h = model.feature_dim
    if isinstance(feat, LinearFeatureParams):
        return np.kron(np.eye(h), x[None, :])
    if isinstance(feat, LoRAAdapter):
        down_block = np.kron(feat.up, x[None, :])
        up_block = np.kron(np.eye(h), (feat.down @ x)[None, :])
        return np.concatenate([down_block, up_block], axis=1)
    # reverse accumulation through the tanh layers
    activations = [x]
    a = x
    for w, b in zip(feat.weights[:-1], feat.biases[:-1]):
        a = np.tanh(w @ a + b)
        activations.append(a)
    blocks: list[np.ndarray] = []
    grad = np.eye(h)
    for layer in reversed(range(len(feat.weights))):
        a_prev = activations[layer]
        w_block = (grad[:, :, None] * a_prev[None, None, :]).reshape(h, -1)
        blocks.append(np.concatenate([w_block, grad], axis=1))
        if layer > 0:
            grad = (grad @ feat.weights[layer]) * (1.0 - a_prev**2)
    return np.concatenate(list(reversed(blocks)), axis=1)


def full_jacobian(model: ModelState, x: np.ndarray) -> np.ndarray:
    """Dense ``(C, p)`` Jacobian of the logits w.r.t. all parameters.

    Blocks in flattening order: phi(x)^T (x) I_C for the head weight, the
    C x C identity for the bias, and V @ feature_jacobian for the rest.
    """
    c = model.num_classes
    phi = features_of(model, x)
    head_weight_block = np.kron(np.eye(c), phi[None, :])
    head_bias_block = np.eye(c)
    feature_block = model.head.weight @ feature_jacobian(model, x)
    return np.concatenate([head_weight_block, head_bias_block, feature_block], axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _array_to_lists(arr: np.ndarray):
    return [[float(v) for v in row] for row in np.atleast_2d(arr)]


def save_model(model: ModelState, path) -> None:
    """Write the model checkpoint in the same JSON container style as datasets."""
    doc: dict = {
        "format": _FORMAT_TAG,
        "version": _FORMAT_VERSION,
        "arch": model.arch,
        "head_weight": _array_to_lists(model.head.weight),
        "head_bias": [float(v) for v in model.head.bias],
    }
    feat = model.feature
    if isinstance(feat, LinearFeatureParams):
        doc["feature_weight"] = _array_to_lists(feat.weight)
    elif isinstance(feat, MLPFeatureParams):
        doc["layers"] = [
            {"weight": _array_to_lists(w), "bias": [float(v) for v in b]}
            for w, b in zip(feat.weights, feat.biases)
        ]
    else:
        doc["base"] = _array_to_lists(feat.base)
        doc["down"] = _array_to_lists(feat.down)
        doc["up"] = _array_to_lists(feat.up)
        doc["init_variance"] = float(feat.init_variance)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_model(path) -> ModelState:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh, parse_constant=lambda s: math.nan)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT_TAG:
        raise DataFormatError(f"{path}: missing '{_FORMAT_TAG}' format tag")
    try:
        head = HeadParams(
            weight=np.array(doc["head_weight"], dtype=float),
            bias=np.array(doc["head_bias"], dtype=float),
        )
        arch = doc["arch"]
        if arch == "linear":
            feature: FeatureParams = LinearFeatureParams(
                weight=np.array(doc["feature_weight"], dtype=float)
            )
        elif arch == "mlp":
            feature = MLPFeatureParams(
                weights=tuple(np.array(l["weight"], dtype=float) for l in doc["layers"]),
                biases=tuple(np.array(l["bias"], dtype=float) for l in doc["layers"]),
            )
        elif arch == "lora":
            feature = LoRAAdapter(
                base=np.array(doc["base"], dtype=float),
                down=np.array(doc["down"], dtype=float),
                up=np.array(doc["up"], dtype=float),
                init_variance=doc["init_variance"],
            )
        else:
            raise DataFormatError(f"{path}: unknown architecture {arch!r}")
        return ModelState(head=head, feature=feature)
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing key {exc}") from exc
    except ParameterError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
