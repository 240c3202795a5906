"""Test phase: rebuild trained weights from a distilled artifact and predict."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .distill import DistilledArtifact, inner_unroll
from .nets import ModelState, forward, init_xavier
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ReplayResult:
    predictions: np.ndarray
    logits: np.ndarray | None = None
    theta_opt_digest: str = ""

    def __len__(self):
        return len(self.predictions)


def rebuild(artifact: DistilledArtifact, seed: int, use_bn: bool = True) -> ModelState:
    """Fresh Xavier weights trained on the distilled set by the stored unroll.

    When the artifact carries batch-norm statistics they are installed
    before the unroll; ``use_bn=False`` leaves the freshly initialized
    running statistics in place instead (the ablation).
    """
    spec = artifact.model_spec
    if artifact.images.shape[1:] != spec.input_shape:
        raise ValueError("artifact images do not match its model spec")
    state = init_xavier(spec, seed)
    if spec.use_batchnorm and use_bn:
        state = state.with_bn_state(artifact.bn_params)
    epochs = int(artifact.config.get("distill_epochs", 1))
    steps = int(artifact.config.get("distill_steps", 1))
    trained = inner_unroll(
        state,
        Tensor(artifact.images),
        Tensor(artifact.labels),
        artifact.inner_rate,
        epochs,
        steps,
        create_graph=False,
        bn_mode=artifact.config.get("bn_mode", "batch"),
    )
    return trained.with_params({k: p.detach() for k, p in trained.params.items()})


def predict(state: ModelState, patches, keep_logits: bool = False, chunk: int = 1024) -> ReplayResult:
    """Eval-mode argmax per patch; ``np.argmax`` breaks ties toward index 0."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[:, None]
    if patches.ndim != 4 or tuple(patches.shape[1:]) != state.spec.input_shape:
        raise ValueError(f"patches {patches.shape} do not match model input {state.spec.input_shape}")
    k = state.spec.num_classes
    logits = np.zeros((0, k))
    with no_grad():
        if len(patches):
            logits = np.concatenate(
                [forward(state, patches[i:i + chunk], "eval").data for i in range(0, len(patches), chunk)]
            )
    preds = np.argmax(logits, axis=1) if len(logits) else np.zeros(0, dtype=int)
    return ReplayResult(preds.astype(int), logits if keep_logits else None, state.digest())


def evaluate(artifact: DistilledArtifact, dataset, seed: int, use_bn: bool = True) -> np.ndarray:
    """Predicted class per patch of ``dataset`` after rebuilding with ``seed``."""
    return predict(rebuild(artifact, seed, use_bn=use_bn), dataset.images).predictions


def write_predictions(path, patch_ids, result: ReplayResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "predicted_class"])
        for pid, p in zip(patch_ids, result.predictions):
            w.writerow([pid, int(p)])
