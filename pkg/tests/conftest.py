import numpy as np
import pytest

from sldd.patches import normalize
from sldd.synthetic import make_patch_benchmark

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark():
    """Normalized 3-class 16x16 texture benchmark: (train, test)."""
    train, test = make_patch_benchmark(n_train=3000, n_test=1000, seed=0)
    train = normalize(train)
    return train, normalize(test, train.norm)


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """d f / d x for scalar ``f`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        step = h * max(1.0, abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        out[i] = (f(up) - f(down)) / (2 * step)
    return out


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def outer_loss(theta, x, y, rate, bx, by, epochs, steps) -> float:
    """Outer loss of a non-BN model as a plain function of (x, y, rate)."""
    from sldd.distill import inner_unroll
    from sldd.nets import forward, loss_cross_entropy
    from sldd.tensor import Tensor

    trained = inner_unroll(theta, Tensor(x), Tensor(y), rate, epochs, steps, create_graph=False)
    return loss_cross_entropy(forward(trained, bx, "eval"), by).item()


def applied_gradients(config, state, bx, by, theta):
    """Gradients ``outer_step`` applied, recovered from (old - new) / step."""
    from sldd.distill import outer_step

    new, loss = outer_step(config, state, bx, by, theta)
    gx = (state.images - new.images) / config.lr
    gy = (state.labels - new.labels) / config.label_lr
    gr = (state.rate - new.rate) / config.rate_lr
    return gx, gy, gr, loss
