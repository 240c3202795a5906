"""Desk-scale classifiers: a one-hidden-layer MLP and a two-stage convnet.

Parameters live in an ordered ``dict`` of :class:`~sldd.tensor.Tensor`
segments. Batch-norm running statistics are kept apart from the trainable
parameters in ``bn_state`` because they are what gets shipped with a
distilled artifact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("mlp", "convnet")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    __pydantic_config__ = {"extra": "forbid"}

    kind: str = "mlp"
    hidden: tuple[int, ...] = (128,)
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    use_batchnorm: bool = False
    num_classes: int = 3
    input_shape: tuple[int, int, int] = (1, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.kind == "mlp" and any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.kind == "convnet":
            if not self.conv_channels or any(c < 1 for c in self.conv_channels):
                raise ValueError("convnet needs at least one positive conv stage")
            _, h, w = self.input_shape
            for _ in self.conv_channels:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_shape} too small for {len(self.conv_channels)} pooling stages")

    @property
    def name(self) -> str:
        if self.kind == "mlp":
            body = "x".join(str(h) for h in self.hidden) or "linear"
        else:
            body = "-".join(str(c) for c in self.conv_channels)
        return f"{self.kind}-{body}{'-bn' if self.use_batchnorm else ''}"

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) of every trainable segment."""
        shapes = []
        if self.kind == "mlp":
            width = int(np.prod(self.input_shape))
            for i, h in enumerate(self.hidden):
                shapes.append((f"fc{i}.weight", (h, width)))
                shapes.append((f"fc{i}.bias", (h,)))
                if self.use_batchnorm:
                    shapes.append((f"bn{i}.weight", (h,)))
                    shapes.append((f"bn{i}.bias", (h,)))
                width = h
        else:
            c, hh, ww = self.input_shape
            k = self.kernel_size
            for i, out in enumerate(self.conv_channels):
                shapes.append((f"conv{i}.weight", (out, c, k, k)))
                shapes.append((f"conv{i}.bias", (out,)))
                if self.use_batchnorm:
                    shapes.append((f"bn{i}.weight", (out,)))
                    shapes.append((f"bn{i}.bias", (out,)))
                c, hh, ww = out, hh // 2, ww // 2
            width = c * hh * ww
        shapes.append(("head.weight", (self.num_classes, width)))
        shapes.append(("head.bias", (self.num_classes,)))
        return shapes

    def bn_layers(self) -> list[tuple[str, int]]:
        if not self.use_batchnorm:
            return []
        widths = self.hidden if self.kind == "mlp" else self.conv_channels
        return [(f"bn{i}", w) for i, w in enumerate(widths)]

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def bn_stat_count(self) -> int:
        return sum(2 * w for _, w in self.bn_layers())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "use_batchnorm": self.use_batchnorm,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**dict(d))


@dataclass(frozen=True)
class ModelState:
    """Weights plus batch-norm running statistics for one :class:`ModelSpec`.

    Treated as immutable; the helpers below return new states.
    """

    spec: ModelSpec
    params: dict[str, Tensor]
    bn_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = [n for n, _ in self.spec.param_shapes()]
        if list(self.params) != expected:
            raise ValueError(f"parameter segments {list(self.params)} do not match spec {expected}")
        for name, shape in self.spec.param_shapes():
            if self.params[name].shape != shape:
                raise ValueError(f"segment {name} has shape {self.params[name].shape}, expected {shape}")
        if bool(self.bn_state) != self.spec.use_batchnorm:
            raise ValueError("bn_state must be non-empty exactly when the model uses batch norm")

    def with_params(self, params) -> "ModelState":
        if not isinstance(params, Mapping):
            params = dict(zip(self.params, params))
        return ModelState(self.spec, dict(params), self.bn_state)

    def with_bn_state(self, bn_state: Mapping[str, np.ndarray] | None) -> "ModelState":
        return ModelState(self.spec, self.params, dict(bn_state) if bn_state else {})

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for name in sorted(self.bn_state):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.bn_state[name], dtype=np.float64).tobytes())
        return h.hexdigest()


def initial_bn_state(spec: ModelSpec) -> dict[str, np.ndarray]:
    state = {}
    for name, width in spec.bn_layers():
        state[f"{name}.running_mean"] = np.zeros(width)
        state[f"{name}.running_var"] = np.ones(width)
    return state


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def init_xavier(spec: ModelSpec, seed: int | np.random.Generator = 0, requires_grad: bool = True) -> ModelState:
    """Xavier-uniform weights, zero biases, unit BN scale, fresh running stats."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.startswith("bn") and name.endswith(".weight"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=requires_grad)
    return ModelState(spec, params, initial_bn_state(spec))


def _check_batch(spec: ModelSpec, x: Tensor) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match (N, {', '.join(map(str, spec.input_shape))})")


def run(state: ModelState, batch, mode: str = "eval", momentum: float = BN_MOMENTUM):
    """Forward pass returning ``(logits, bn_state_after)``.

    ``mode='train'`` normalizes with (constant) batch statistics and folds
    them into the running statistics; ``mode='eval'`` uses ``state.bn_state``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec, p = state.spec, state.params
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_batch(spec, x)
    training = mode == "train"
    new_bn = dict(state.bn_state)

    def norm(h, i):
        if not spec.use_batchnorm:
            return h
        key = f"bn{i}"
        h, m, v = T.batch_norm(
            h,
            p[f"{key}.weight"],
            p[f"{key}.bias"],
            new_bn[f"{key}.running_mean"],
            new_bn[f"{key}.running_var"],
            training=training,
            momentum=momentum,
            eps=BN_EPS,
        )
        new_bn[f"{key}.running_mean"], new_bn[f"{key}.running_var"] = m, v
        return h

    if spec.kind == "mlp":
        h = x.reshape(x.shape[0], -1)
        for i in range(len(spec.hidden)):
            h = h @ p[f"fc{i}.weight"].T + p[f"fc{i}.bias"]
            h = T.relu(norm(h, i))
    else:
        h = x
        pad = spec.kernel_size // 2
        for i in range(len(spec.conv_channels)):
            h = T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=pad)
            h = T.max_pool2d(T.relu(norm(h, i)), 2)
        h = h.reshape(h.shape[0], -1)
    logits = h @ p["head.weight"].T + p["head.bias"]
    return logits, new_bn


def forward(state: ModelState, batch, mode: str = "eval") -> Tensor:
    return run(state, batch, mode)[0]


def loss_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum_c targets[c] * log_softmax(logits)[c]``.

    Targets are used as given (no renormalization), so soft labels may be any
    real vectors; the loss is linear in them.
    """
    if not isinstance(targets, Tensor):
        targets = Tensor(targets)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} must both be (batch, classes)")
    return -(targets * T.log_softmax(logits, axis=1)).sum() / float(logits.shape[0])


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
