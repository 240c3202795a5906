"""Training phase: learn distilled images, soft labels and an inner
learning rate by differentiating through unrolled gradient steps."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .nets import ModelSpec, ModelState, init_xavier, loss_cross_entropy, one_hot, run
from .patches import PatchDataset
from .tensor import Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MIN_RATE = 1e-6
INIT_POLICIES = ("resample", "fixed")
BN_MODES = ("batch", "running")


@dataclass
class DistillConfig:
    """Knobs of one distillation run.

    ``init_labels`` holds one row of length ``num_classes`` per distilled
    image; ``None`` means one-hot labels cycling through the classes.
    ``steps`` counts outer updates, not passes over the training set.
    ``label_lr`` and ``rate_lr`` are step sizes for the soft labels and the
    inner rate; ``None`` reuses ``lr``.
    """
    __pydantic_config__ = {"extra": "forbid"}

    num_images: int = 3
    steps: int = 200
    batch_size: int = 256
    lr: float = 10.0
    label_lr: float | None = 0.3
    rate_lr: float | None = 0.001
    init_labels: list[list[float]] | None = None
    init_rate: float = 0.05
    distill_epochs: int = 1
    distill_steps: int = 1
    init_policy: str = "resample"
    bn_mode: str = "batch"
    seed: int = 0
    learn_labels: bool = True
    learn_rate: bool = True
    clip_norm: float | None = None
    eval_every: int | None = None
    val_fraction: float = 0.1
    strict: bool = True

    def __post_init__(self):
        for name in ("num_images", "batch_size", "distill_epochs", "distill_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}")
        if self.init_policy not in INIT_POLICIES:
            raise ValueError(f"init_policy must be one of {INIT_POLICIES}")
        if self.init_rate < 0:
            raise ValueError("init_rate must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def unroll_length(self) -> int:
        return self.distill_epochs * self.distill_steps

    def interval(self) -> int:
        return self.eval_every or max(1, self.steps // 100)

    def initial_labels(self, num_classes: int) -> np.ndarray:
        if self.init_labels is None:
            return one_hot(np.arange(self.num_images) % num_classes, num_classes)
        y0 = np.asarray(self.init_labels, dtype=np.float64)
        if y0.shape != (self.num_images, num_classes):
            raise ValueError(
                f"init_labels has shape {y0.shape}; need {self.num_images} rows of {num_classes} classes"
            )
        return y0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class DistilledArtifact:
    images: np.ndarray
    labels: np.ndarray
    inner_rate: float
    model_spec: ModelSpec
    config: dict = field(default_factory=dict)
    bn_params: dict[str, np.ndarray] | None = None
    best_metric: float = math.nan
    best_step: int = 0
    validation_seed: int = 0
    normalization: tuple[float, float] | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.inner_rate = float(self.inner_rate)
        if self.normalization is not None:
            self.normalization = tuple(float(v) for v in self.normalization)
        if self.images.shape[1:] != self.model_spec.input_shape:
            raise ValueError(f"images {self.images.shape} do not fit model input {self.model_spec.input_shape}")
        if self.labels.shape != (len(self.images), self.model_spec.num_classes):
            raise ValueError(f"labels {self.labels.shape} do not match {len(self.images)} images x classes")
        if bool(self.bn_params) != self.model_spec.use_batchnorm:
            raise ValueError("bn_params must be present exactly when the model uses batch norm")

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def unroll_length(self) -> int:
        return int(self.config.get("distill_epochs", 1)) * int(self.config.get("distill_steps", 1))

    def __eq__(self, other):
        if not isinstance(other, DistilledArtifact):
            return NotImplemented
        from .artifact_io import dumps

        return dumps(self) == dumps(other)

    def normalized_labels(self) -> np.ndarray:
        """Soft labels passed through a softmax, for reporting only."""
        z = self.labels - self.labels.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def inner_unroll(
    state: ModelState,
    images: Tensor,
    labels: Tensor,
    rate: Tensor | float,
    epochs: int,
    steps: int,
    create_graph: bool = True,
    bn_mode: str = "batch",
) -> ModelState:
    """``epochs * steps`` full-batch gradient steps on the distilled set.

    With ``create_graph`` the returned parameters stay differentiable with
    respect to ``images``, ``labels`` and ``rate``. Otherwise each step is
    detached and the result holds fresh leaf tensors.

    Batch norm statistics are constants at every step: ``bn_mode='batch'``
    takes them from the distilled batch itself, ``'running'`` uses
    ``state.bn_state``. The running statistics of the returned state are
    left untouched either way.
    """
    if bn_mode not in BN_MODES:
        raise ValueError(f"bn_mode must be one of {BN_MODES}")
    mode = "train" if bn_mode == "batch" and state.spec.use_batchnorm else "eval"
    params = list(state.params.values())
    if not create_graph:
        params = [Tensor._wrap(p.data).requires_grad_() for p in params]
    for i in range(epochs * steps):
        current = state.with_params(params)
        try:
            logits, _ = run(current, images, mode)
            loss = loss_cross_entropy(logits, labels)
            grads = T.grad(loss, params, create_graph=create_graph)
            if create_graph:
                params = [p - rate * g for p, g in zip(params, grads)]
            else:
                with T.no_grad():
                    r = rate.data if isinstance(rate, Tensor) else rate
                    params = [Tensor._wrap(p.data - r * g.data).requires_grad_() for p, g in zip(params, grads)]
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(exc.op, f"inner step {i}") from exc
    return state.with_params(params)


@dataclass
class DistillState:
    """Quantities being learned, as plain arrays between outer steps."""

    images: np.ndarray
    labels: np.ndarray
    rate: float
    bn_state: dict[str, np.ndarray] = field(default_factory=dict)


def outer_step(
    config: DistillConfig,
    current: DistillState,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    theta: ModelState,
) -> tuple[DistillState, float]:
    """One plain gradient-descent update of images, labels and rate.

    ``batch_y`` is one-hot. With batch norm, the real batch's statistics
    under the unrolled weights are folded into the running statistics, and
    the loss is then taken in eval mode, i.e. exactly as replay will
    predict. Those running statistics are what the next unroll uses.
    """
    x = Tensor(current.images, requires_grad=True)
    y = Tensor(current.labels, requires_grad=config.learn_labels)
    rate = Tensor(current.rate, requires_grad=config.learn_rate)
    theta = theta.with_bn_state(current.bn_state)
    learned = [t for t in (x, y, rate) if t.requires_grad]

    with T.strict(config.strict):
        theta_opt = inner_unroll(
            theta, x, y, rate, config.distill_epochs, config.distill_steps, bn_mode=config.bn_mode
        )
        bn_after = current.bn_state
        if theta.spec.use_batchnorm:
            with T.no_grad():
                _, bn_after = run(theta_opt, batch_x, "train")
        logits, _ = run(theta_opt.with_bn_state(bn_after), batch_x, "eval")
        loss = loss_cross_entropy(logits, batch_y)
        if not learned:
            return DistillState(current.images, current.labels, current.rate, bn_after), loss.item()
        grads = T.grad(loss, learned, allow_unused=True)

    gd = {id(t): g.data for t, g in zip(learned, grads)}
    if config.clip_norm:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in gd.values()))
        if norm > config.clip_norm:
            gd = {k: g * (config.clip_norm / norm) for k, g in gd.items()}
    images = current.images - config.lr * gd[id(x)] if id(x) in gd else current.images
    label_step = config.lr if config.label_lr is None else config.label_lr
    labels = current.labels - label_step * gd[id(y)] if id(y) in gd else current.labels
    new_rate = current.rate
    if id(rate) in gd:
        step = config.lr if config.rate_lr is None else config.rate_lr
        new_rate = max(current.rate - step * float(gd[id(rate)]), MIN_RATE)
    return DistillState(images, labels, new_rate, bn_after), loss.item()


def _batches(n: int, k: int, rng: np.random.Generator):
    """Endless mini-batches, sampled without replacement within an epoch."""
    k = min(k, n)
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - k + 1, k):
            yield order[lo:lo + k]


def accuracy(predictions: np.ndarray, dataset: PatchDataset) -> float:
    if len(dataset) == 0:
        return math.nan
    return float(np.mean(np.asarray(predictions) == dataset.labels))


def snapshot(
    state: DistillState,
    spec: ModelSpec,
    config: DistillConfig,
    metric: float,
    step: int,
    val_seed: int,
    normalization: tuple[float, float] | None = None,
) -> DistilledArtifact:
    return DistilledArtifact(
        images=state.images.copy(),
        labels=state.labels.copy(),
        inner_rate=state.rate,
        model_spec=spec,
        config=config.to_dict(),
        bn_params={k: v.copy() for k, v in state.bn_state.items()} or None,
        best_metric=metric,
        best_step=step,
        validation_seed=val_seed,
        normalization=normalization,
    )


def distill(
    config: DistillConfig,
    dataset: PatchDataset,
    spec: ModelSpec,
    validation: PatchDataset | None = None,
    metric: Callable[[np.ndarray, PatchDataset], float] = accuracy,
    callback: Callable[[int, float, float | None], None] | None = None,
) -> DistilledArtifact:
    """Run the full training phase and return the best validated snapshot.

    Without an explicit ``validation`` set, ``config.val_fraction`` of
    ``dataset`` is held out. ``callback(step, loss, metric_or_None)`` is
    called after every outer step.
    """
    from .replay import evaluate

    labeled = dataset.subset(np.flatnonzero(dataset.labels >= 0))
    if len(labeled) == 0:
        raise ValueError("cannot distill an empty dataset")
    if labeled.patch_shape != spec.input_shape:
        raise ValueError(f"patches {labeled.patch_shape} do not match model input {spec.input_shape}")
    if labeled.labels.max() >= spec.num_classes:
        raise ValueError(f"dataset has labels beyond the model's {spec.num_classes} classes")
    y0 = config.initial_labels(spec.num_classes)

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, theta_rng, batch_rng = (np.random.default_rng(s) for s in seeds[:3])
    val_seed = int(seeds[3].generate_state(1)[0])

    train = labeled
    if validation is None and config.val_fraction > 0 and len(labeled) > 1:
        train, validation = labeled.split(config.val_fraction, seed=config.seed)
    targets = one_hot(train.labels, spec.num_classes)

    state = DistillState(
        images=init_rng.standard_normal((config.num_images, *spec.input_shape)),
        labels=y0.copy(),
        rate=float(config.init_rate),
        bn_state=init_xavier(spec, 0).bn_state,
    )
    # a fixed theta is drawn from the validation seed so replay can recreate it
    fixed_theta = init_xavier(spec, val_seed) if config.init_policy == "fixed" else None

    def score(s: DistillState, step: int) -> DistilledArtifact:
        snap = snapshot(s, spec, config, math.nan, step, val_seed, dataset.norm)
        if validation is not None and len(validation):
            snap.best_metric = metric(evaluate(snap, validation, seed=val_seed), validation)
        return snap

    best = score(state, 0) if config.steps == 0 else None
    every = config.interval()
    batches = _batches(len(train), config.batch_size, batch_rng)
    for t in range(config.steps):
        idx = next(batches)
        theta = fixed_theta if fixed_theta is not None else init_xavier(spec, theta_rng)
        state, loss = outer_step(config, state, train.images[idx], targets[idx], theta)
        value = None
        if (t + 1) % every == 0 or t + 1 == config.steps:
            snap = score(state, t + 1)
            value = snap.best_metric
            if best is None or (value > best.best_metric) or math.isnan(best.best_metric):
                best = snap
        if callback is not None:
            callback(t + 1, loss, value)
        log.debug("step %d loss %.6f metric %s", t + 1, loss, value)
    return best
