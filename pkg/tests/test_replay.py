import csv

import numpy as np
import pytest

from sldd.distill import DistillConfig, DistilledArtifact, accuracy, distill
from sldd.nets import ModelSpec, init_xavier
from sldd.replay import evaluate, predict, rebuild, write_predictions
from sldd.tensor import Tensor


def artifact(rate=0.05, spec=ModelSpec(hidden=(8,), input_shape=(1, 2, 2)), m=3):
    r = np.random.default_rng(0)
    return DistilledArtifact(r.standard_normal((m, *spec.input_shape)), np.eye(3)[:m], rate, spec, DistillConfig(num_images=m).to_dict())


def test_zero_rate_rebuild_is_fresh_xavier():
    a = artifact(rate=0.0)
    assert rebuild(a, 11).digest() == init_xavier(a.model_spec, 11).digest()


def test_rebuild_is_deterministic():
    a = artifact()
    assert rebuild(a, 3).digest() == rebuild(a, 3).digest()
    assert rebuild(a, 3).digest() != rebuild(a, 4).digest()


def test_rebuild_uses_the_stored_unroll_length():
    a = artifact()
    longer = DistilledArtifact(a.images, a.labels, a.inner_rate, a.model_spec, {"distill_epochs": 2, "distill_steps": 2})
    assert rebuild(a, 0).digest() != rebuild(longer, 0).digest()


def test_predict_breaks_ties_toward_lowest_index():
    spec = ModelSpec(hidden=(2,), input_shape=(1, 1, 1))
    s = init_xavier(spec, 0)
    params = {k: Tensor(np.zeros(p.shape)) for k, p in s.params.items()}
    params["head.bias"] = Tensor(np.array([2.0, 1.0, 0.5]))
    res = predict(s.with_params(params), np.zeros((1, 1, 1, 1)), keep_logits=True)
    assert res.predictions.tolist() == [0]
    params["head.bias"] = Tensor(np.array([1.0, 3.0, 3.0]))
    assert predict(s.with_params(params), np.zeros((2, 1, 1, 1))).predictions.tolist() == [1, 1]


def test_predict_empty_and_mismatched():
    s = init_xavier(ModelSpec(), 0)
    res = predict(s, np.zeros((0, 1, 16, 16)))
    assert len(res) == 0
    with pytest.raises(ValueError, match="do not match"):
        predict(s, np.zeros((2, 1, 8, 8)))


def test_artifact_spec_mismatch():
    with pytest.raises(ValueError, match="model input"):
        DistilledArtifact(np.zeros((3, 1, 4, 4)), np.eye(3), 0.1, ModelSpec())


def test_write_predictions(tmp_path):
    s = init_xavier(ModelSpec(), 0)
    res = predict(s, np.random.default_rng(0).standard_normal((4, 1, 16, 16)))
    write_predictions(tmp_path / "p.csv", ["a", "b", "c", "d"], res)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["patch_id", "predicted_class"]
    assert [r[1] for r in rows[1:]] == [str(p) for p in res.predictions]


def test_replay_across_seeds_is_stable(benchmark):
    train, test = benchmark
    art = distill(DistillConfig(seed=0), train, ModelSpec())
    accs = [accuracy(evaluate(art, test, seed=s), test) for s in range(100, 105)]
    assert min(accs) >= 0.9
    assert max(accs) - min(accs) < 0.10


def test_replay_reproduces_snapshot_validation_metric(benchmark):
    train, _ = benchmark
    art = distill(DistillConfig(seed=3, steps=40), train, ModelSpec())
    _, val = train.split(0.1, seed=3)
    assert accuracy(evaluate(art, val, seed=art.validation_seed), val) == art.best_metric
