"""Comparison runs: ordinary training on random real subsets, and the
minimum-distilled-images sweep over model sizes."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .distill import DistillConfig, accuracy, distill
from .nets import ModelSpec, ModelState, init_xavier, loss_cross_entropy, one_hot, run
from .patches import PatchDataset
from .replay import evaluate, predict


def random_subset(dataset: PatchDataset, per_class: int, seed: int) -> PatchDataset:
    """``per_class`` patches drawn uniformly from each labeled class."""
    if per_class < 1:
        raise ValueError("subset size per class must be >= 1")
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(dataset.labels[dataset.labels >= 0]):
        pool = np.flatnonzero(dataset.labels == c)
        if per_class > len(pool):
            raise ValueError(f"asked for {per_class} patches of class {c}, only {len(pool)} available")
        picks.append(rng.choice(pool, per_class, replace=False))
    return dataset.subset(np.sort(np.concatenate(picks)))


@dataclass(frozen=True)
class TrainConfig:
    """Ordinary mini-batch SGD on real patches."""

    __pydantic_config__ = {"extra": "forbid"}

    lr: float = 0.05
    epochs: int = 5
    batch_size: int = 64
    min_steps: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.min_steps < 0:
            raise ValueError("lr must be positive; epochs and batch_size >= 1")


def train_ordinary(spec: ModelSpec, dataset: PatchDataset, seed: int, config: TrainConfig = TrainConfig()) -> ModelState:
    """Xavier init, then SGD; tiny subsets get at least ``min_steps`` steps."""
    labeled = dataset.subset(np.flatnonzero(dataset.labels >= 0))
    if len(labeled) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    state = init_xavier(spec, rng)
    targets = one_hot(labeled.labels, spec.num_classes)
    k = min(config.batch_size, len(labeled))
    per_epoch = max(1, len(labeled) // k)
    epochs = max(config.epochs, math.ceil(config.min_steps / per_epoch))
    # a batch of one cannot feed batch statistics
    mode = "train" if spec.use_batchnorm and k > 1 else "eval"
    params = list(state.params.values())
    for _ in range(epochs):
        order = rng.permutation(len(labeled))
        for lo in range(0, per_epoch * k, k):
            idx = order[lo:lo + k]
            logits, bn = run(state.with_params(params), labeled.images[idx], mode)
            grads = T.grad(loss_cross_entropy(logits, targets[idx]), params)
            params = [T.Tensor(p.data - config.lr * g.data, requires_grad=True) for p, g in zip(params, grads)]
            state = state.with_params(params).with_bn_state(bn)
    return state


BASELINE_COLUMNS = ("method", "images_used", "seed", "metric")


def baseline_rows(
    train: PatchDataset,
    test: PatchDataset,
    spec: ModelSpec,
    distill_config: DistillConfig,
    subset_sizes=(1, 3, 10),
    distilled_sizes=(1, 2, 3),
    seeds=(0,),
    train_config: TrainConfig = TrainConfig(),
) -> list[tuple[str, int, int, float]]:
    """(method, images_used, seed, test accuracy) for every run."""
    classes = len(np.unique(train.labels[train.labels >= 0]))
    rows = []
    for seed in seeds:
        for n in subset_sizes:
            sub = random_subset(train, n, seed)
            state = train_ordinary(spec, sub, seed, train_config)
            rows.append((f"random-{n}-per-class", n * classes, seed, accuracy(predict(state, test.images).predictions, test)))
        for m in distilled_sizes:
            cfg = replace(distill_config, num_images=m, seed=seed, init_labels=_labels_for(distill_config, m))
            art = distill(cfg, train, spec)
            rows.append((f"distilled-{m}", m, seed, accuracy(evaluate(art, test, seed=seed + 1000), test)))
    return rows


def _labels_for(config: DistillConfig, m: int):
    if config.init_labels is not None and len(config.init_labels) == m:
        return config.init_labels
    return None


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# minimum-M sweep

SWEEP_COLUMNS = ("model", "parameter_count", "M", "metric")


def _sweep_cell(args):
    spec, m, cfg, train, test = args
    cfg = replace(cfg, num_images=m, init_labels=_labels_for(cfg, m))
    art = distill(cfg, train, spec)
    seed = art.validation_seed if cfg.init_policy == "fixed" else cfg.seed + 1000
    return spec.name, spec.parameter_count(), m, accuracy(evaluate(art, test, seed=seed), test)


def sweep(specs, sizes, config: DistillConfig, train: PatchDataset, test: PatchDataset, jobs: int = 1):
    """One distillation per (spec, M); rows come back in grid order."""
    if not specs or not sizes:
        raise ValueError("sweep needs at least one model and one M")
    cells = [(s, m, config, train, test) for s in specs for m in sizes]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def minimum_m(rows, floor: float) -> dict[str, int | None]:
    """Smallest M reaching ``floor`` per model, ``None`` if never reached."""
    best: dict[str, int | None] = {}
    for model, _, m, metric in rows:
        best.setdefault(model, None)
        if metric >= floor and (best[model] is None or m < best[model]):
            best[model] = m
    return best


def plot_sweep(rows, path, floor: float | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model in dict.fromkeys(r[0] for r in rows):
        pts = sorted((r[2], r[3]) for r in rows if r[0] == model)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=model)
    if floor is not None and floor <= 1:
        ax.axhline(floor, color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("distilled images M")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
