import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sldd import tensor as T
from sldd.tensor import NonFiniteError, Tape, Tensor

from conftest import central_difference, rel_error

H = 1e-4


def check_grad(fn, *arrays, tol=1e-6):
    """Compare grad of scalar fn(*tensors) with central differences."""
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    grads = T.grad(fn(*xs), xs)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return fn(*args).item()

        fd = central_difference(f, a, H)
        assert rel_error(grads[i].data, fd) < tol, f"argument {i}"


rng = np.random.default_rng(0)
A = rng.standard_normal((3, 4))
B = rng.standard_normal((3, 4))
W = rng.standard_normal((4, 2))
POS = rng.uniform(0.5, 2.0, (3, 4))


@pytest.mark.parametrize(
    "fn,args",
    [
        (lambda a, b: (a + b * b).sum(), (A, B)),
        (lambda a, b: (a - b).mean() * (a * b).sum(), (A, B)),
        (lambda a, b: (a / b).sum(), (A, POS)),
        (lambda a: (a ** 3).sum(), (A,)),
        (lambda a: (a ** 0.5).sum(), (POS,)),
        (lambda a: a.exp().mean(), (A,)),
        (lambda a: a.log().sum(), (POS,)),
        (lambda a, w: ((a @ w) ** 2).sum(), (A, W)),
        (lambda a: (a.T @ a).sum(), (A,)),
        (lambda a: a.sum(axis=0).exp().sum(), (A,)),
        (lambda a: (a.mean(axis=1, keepdims=True) * a).sum(), (A,)),
        (lambda a: (a.reshape(2, 6)[1] ** 2).sum(), (A,)),
        (lambda a: (a[1:, ::2] * 3.0).sum(), (A,)),
        (lambda a: T.log_softmax(a, axis=1)[:, 1].sum(), (A,)),
        (lambda a: (T.softmax(a, axis=0) ** 2).sum(), (A,)),
        (lambda a: T.logsumexp(a, axis=1).sum(), (A,)),
        (lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(), (A, B)),
        (lambda a, b: (T.stack([a, b], axis=0).sum(axis=0) ** 3).sum(), (A, B)),
        (lambda a: T.broadcast_to(a[0], (5, 4)).exp().sum(), (A,)),
        (lambda a: (a.transpose(1, 0).T @ W).exp().sum(), (A,)),
    ],
)
def test_first_order_matches_finite_differences(fn, args):
    check_grad(fn, *args)


def test_relu_and_max_away_from_kinks():
    x = np.array([[-1.3, 0.7, 2.1], [0.4, -0.2, 1.5]])
    check_grad(lambda a: (a.relu() ** 2).sum(), x)
    check_grad(lambda a: (a.max(axis=1) ** 2).sum(), x)
    check_grad(lambda a: a.max() * 2.0, x)


def test_max_shares_gradient_among_ties():
    x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
    (g,) = T.grad(x.max(), [x])
    np.testing.assert_array_equal(g.data, [0.0, 0.5, 0.5])


def test_conv2d_matches_naive_loop():
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (xp.shape[2] - 3) // stride + 1
        wo = (xp.shape[3] - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        win = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = np.sum(win * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_pool_gradients():
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    check_grad(lambda a, k: (T.conv2d(a, k, padding=1) ** 2).sum(), x, w)
    check_grad(lambda a: (T.max_pool2d(a, 2) ** 2).sum(), x)
    check_grad(lambda a: (T.pad2d(a, 2) * 1.5).exp().sum(), x)


def test_batch_norm_gradient_treats_statistics_as_constants():
    x = rng.standard_normal((5, 3))
    g = rng.uniform(0.5, 1.5, 3)
    b = rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    mu, var = x.mean(axis=0), x.var(axis=0)

    def fn(a, gamma, beta):
        y, _, _ = T.batch_norm(a, gamma, beta, rm, rv, training=True)
        return (y ** 2).sum()

    xs = [Tensor(v, requires_grad=True) for v in (x, g, b)]
    grads = T.grad(fn(*xs), xs)
    # with constant statistics, y = (x - mu) * s * gamma + beta is affine in x
    s = 1 / np.sqrt(var + 1e-5)
    y = (x - mu) * s * g + b
    np.testing.assert_allclose(grads[0].data, 2 * y * s * g, rtol=1e-12)
    check_grad(lambda gamma, beta: fn(Tensor(x), gamma, beta), g, b)


def test_batch_norm_running_statistics():
    x = rng.standard_normal((6, 2, 3, 3))
    rm, rv = np.full(2, 0.5), np.full(2, 2.0)
    _, m, v = T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(m, 0.9 * rm + 0.1 * flat.mean(axis=1), rtol=1e-14)
    np.testing.assert_allclose(v, 0.9 * rv + 0.1 * flat.var(axis=1, ddof=1), rtol=1e-14)
    y, m2, v2 = T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=False)
    assert m2 is rm and v2 is rv
    np.testing.assert_allclose(y.data, (x - 0.5) / np.sqrt(2.0 + 1e-5), rtol=1e-14)


# -- second order -------------------------------------------------------------

SECOND_ORDER = [
    lambda a: (a ** 3).sum() + (a.exp() * a).sum(),
    lambda a: T.log_softmax(a.reshape(3, 4), axis=1)[:, 0].sum() * a.sum(),
    lambda a: ((a.reshape(3, 4) @ W).exp() ** 2).mean(),
    lambda a: (a * a).sum().log() + (a.relu() * a ** 2).sum(),
    lambda a: T.logsumexp((a.reshape(3, 4) @ W) * 0.5, axis=1).sum() ** 2,
]


@pytest.mark.parametrize("fn", SECOND_ORDER)
def test_hessian_vector_product_matches_fd_of_gradient(fn):
    x0 = rng.standard_normal(12)
    v = rng.standard_normal(12)
    x = Tensor(x0, requires_grad=True)
    (g,) = T.grad(fn(x), [x], create_graph=True)
    (hv,) = T.grad((g * Tensor(v)).sum(), [x])

    def grad_dot_v(z):
        zt = Tensor(z, requires_grad=True)
        (gz,) = T.grad(fn(zt), [zt])
        return float(gz.data @ v)

    assert rel_error(hv.data, central_difference(grad_dot_v, x0, H)) < 1e-5


def test_third_order_of_cube():
    x = Tensor(np.array([0.7, -1.2]), requires_grad=True)
    (g,) = T.grad((x ** 3).sum(), [x], create_graph=True)
    (h,) = T.grad(g.sum(), [x], create_graph=True)
    (t,) = T.grad(h.sum(), [x])
    np.testing.assert_allclose(g.data, 3 * x.data ** 2)
    np.testing.assert_allclose(h.data, 6 * x.data)
    np.testing.assert_allclose(t.data, [6.0, 6.0])


def test_gradient_through_conv_is_twice_differentiable():
    x0 = rng.standard_normal((1, 1, 4, 4))
    w = Tensor(rng.standard_normal((2, 1, 3, 3)))

    def fn(a):
        return (T.conv2d(a, w, padding=1).exp()).sum()

    x = Tensor(x0, requires_grad=True)
    (g,) = T.grad(fn(x), [x], create_graph=True)
    (hv,) = T.grad(g.sum(), [x])

    def gsum(z):
        zt = Tensor(z, requires_grad=True)
        return float(T.grad(fn(zt), [zt])[0].data.sum())

    assert rel_error(hv.data, central_difference(gsum, x0, H)) < 1e-5


# -- linear primitives ----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 12),
    m=st.integers(1, 20),
    seed=st.integers(0, 2**31 - 1),
)
def test_take_and_scatter_add_are_adjoint(n, m, seed):
    r = np.random.default_rng(seed)
    index = r.integers(0, n, size=m)
    x, y = r.standard_normal(n), r.standard_normal(m)
    # <take(x), y> == <x, scatter_add(y)>
    lhs = float(T.take(Tensor(x), index).data @ y)
    rhs = float(x @ T.scatter_add(Tensor(y), index, n).data)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linear_ops_are_linear(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 5, 5)), r.standard_normal((2, 1, 5, 5))
    w = Tensor(r.standard_normal((2, 1, 3, 3)))

    def op(v):
        return T.conv2d(T.pad2d(Tensor(v), 1), w).data

    np.testing.assert_allclose(op(a * x + b * y), a * op(x) + b * op(y), atol=1e-12 * (1 + abs(a) + abs(b)) * 10)


# -- graph bookkeeping ----------------------------------------------------------

def test_tape_records_in_topological_order():
    x = Tensor(A, requires_grad=True)
    with Tape() as tape:
        y = ((x * 2.0).exp() @ W).sum()
    assert tape.ops()[-1] == "sum"
    assert tape.is_topological()
    assert y.tape_id == tape.nodes[-1].id
    (g,) = T.grad(y, [x], create_graph=True)
    with Tape() as tape2:
        T.grad(g.sum(), [x], create_graph=True)
    assert len(tape2) > 0 and tape2.is_topological()


def test_no_grad_records_nothing():
    x = Tensor(A, requires_grad=True)
    with Tape() as tape, T.no_grad():
        y = (x * 3.0).sum()
    assert len(tape) == 0 and not y.requires_grad
    with pytest.raises(ValueError, match="does not depend"):
        T.grad(y, [x])


def test_grad_errors():
    x = Tensor(A, requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.grad(x * 2.0, [x])
    with pytest.raises(ValueError, match="does not require grad"):
        T.grad((x * 2.0).sum(), [Tensor(A)])
    z = Tensor(B, requires_grad=True)
    with pytest.raises(ValueError, match="not on the tape"):
        T.grad((x * 2.0).sum(), [x, z])
    gx, gz = T.grad((x * 2.0).sum(), [x, z], allow_unused=True)
    np.testing.assert_array_equal(gz.data, np.zeros_like(B))
    np.testing.assert_array_equal(gx.data, np.full_like(A, 2.0))


def test_gradient_for_intermediate_tensor():
    x = Tensor(A, requires_grad=True)
    h = x * 2.0
    y = (h ** 2).sum()
    gh, gx = T.grad(y, [h, x])
    np.testing.assert_allclose(gh.data, 2 * h.data)
    np.testing.assert_allclose(gx.data, 8 * A)


def test_strict_mode_names_the_operation():
    x = Tensor([1.0, -1.0], requires_grad=True)
    with T.strict():
        with pytest.raises(NonFiniteError, match="log"):
            x.log()
    with T.strict(False):
        with np.errstate(invalid="ignore"):
            assert np.isnan(x.log().data[1])


def test_inputs_are_copied_and_frozen():
    a = np.ones(3)
    t = Tensor(a)
    a[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0
