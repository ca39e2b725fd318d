import numpy as np
import pytest

from pdunet import autodiff as ad
from pdunet.autodiff import AutodiffStateError, ParamStore, ShapeError, Tensor, parameter
from pdunet.autodiff import ops
from pdunet.projectors import back_project, forward_project


def fd_check(fn, inputs, rng, eps=1e-4, tol=1e-3):
    """Compare reverse-mode gradients of ``sum(fn(*inputs) * R)`` with central differences."""
    params = [parameter(np.array(x, dtype=np.float64)) for x in inputs]
    out = fn(*params)
    weights = rng.standard_normal(out.shape)
    loss = (out * weights).sum()
    loss.backward()
    for p in params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(np.sum(fn(*[Tensor(q.data) for q in params]).data * weights))
            flat[i] = old - eps
            down = float(np.sum(fn(*[Tensor(q.data) for q in params]).data * weights))
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        err = np.linalg.norm(p.grad - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert err < tol, f"relative gradient error {err:.2e}"


def conv_oracle(x, w):
    # direct loop: out[b,o,i,j] = sum_c,dy,dx w[o,c,dy,dx] * xpad[b,c,i+dy,j+dx]
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((b, o, h, wd))
    for i in range(h):
        for j in range(wd):
            out[:, :, i, j] = np.einsum("bcyx,ocyx->bo", xp[:, :, i : i + k, j : j + k], w)
    return out


SHAPES = [(1, 2, 4, 4), (2, 3, 6, 4), (1, 1, 8, 6)]


@pytest.mark.parametrize("shape", SHAPES)
def test_conv2d_matches_loop(shape, rng):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, shape[1], 3, 3))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w)).data, conv_oracle(x, w), atol=1e-12)


@pytest.mark.parametrize("shape", SHAPES)
def test_conv2d_gradients(shape, rng):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((2, shape[1], 3, 3))
    b = rng.standard_normal(2)
    fd_check(lambda x, w, b: ad.conv2d(x, w, b), [x, w, b], rng)


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    w = parameter(np.ones((1, 1, 1, 1)))
    y = ad.conv2d(Tensor(x), w)
    np.testing.assert_array_equal(y.data, x)
    y.sum().backward()
    assert w.grad[0, 0, 0, 0] == pytest.approx(x.sum())


def test_conv2d_5x5_gradients(rng):
    fd_check(lambda x, w: ad.conv2d(x, w), [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 2, 5, 5))], rng)


@pytest.mark.parametrize("shape", SHAPES)
def test_stride2_gradients(shape, rng):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((2, shape[1], 2, 2))
    fd_check(lambda x, w: ad.conv2d_stride2(x, w), [x, w], rng)


def test_stride2_values(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 2, 2))
    out = ad.conv2d_stride2(Tensor(x), Tensor(w)).data
    ref = np.einsum("bcyx,ocyx->bo", x[:, :, 2:4, 0:2], w)
    np.testing.assert_allclose(out[:, :, 1, 0], ref)


@pytest.mark.parametrize("shape", SHAPES)
def test_transpose_gradients(shape, rng):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], 2, 2, 2))
    fd_check(lambda x, w: ad.conv_transpose2d_stride2(x, w), [x, w], rng)


def test_transpose_is_adjoint_of_stride2(rng):
    x = rng.standard_normal((2, 3, 6, 4))
    w = rng.standard_normal((2, 3, 2, 2))
    y = rng.standard_normal((2, 2, 3, 2))
    lhs = np.sum(ad.conv2d_stride2(Tensor(x), Tensor(w)).data * y)
    rhs = np.sum(x * ad.conv_transpose2d_stride2(Tensor(y), Tensor(w)).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("shape", SHAPES)
def test_prelu_gradients(shape, rng):
    x = rng.standard_normal(shape)
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    fd_check(lambda x, a: ad.prelu(x, a), [x, rng.uniform(0.1, 0.5, shape[1])], rng)


@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_gradients(shape, rng):
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    fd_check(lambda a, b: a * b + a - b * 2.0, [a, b], rng)
    scale = rng.standard_normal((1, shape[1], 1, 1))
    fd_check(lambda a: ad.affine(a, scale, 0.3), [a], rng)


@pytest.mark.parametrize("shape", SHAPES)
def test_structural_gradients(shape, rng):
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    fd_check(lambda a, b: ad.concat([a, b], axis=1), [a, b], rng)
    fd_check(lambda a: ad.pad2d(a, 2, 1), [a], rng)
    fd_check(lambda a: a[:, 0:1], [a], rng)
    fd_check(lambda a: ad.max_pool2(a), [a], rng)
    fd_check(lambda a: ad.bilinear_upsample2(a), [a], rng)
    fd_check(lambda a: ad.relu(a + 0.05), [a], rng)


def test_getitem_advanced_index_accumulates(rng):
    x = parameter(rng.standard_normal((4, 3)))
    x[[0, 0, 2]].sum().backward()
    np.testing.assert_array_equal(x.grad[:, 0], [2, 0, 1, 0])


@pytest.mark.parametrize("shape", SHAPES)
def test_l1_gradients(shape, rng):
    a, t = rng.standard_normal(shape), rng.standard_normal(shape)
    fd_check(lambda a: ad.l1_loss(a, t), [a], rng)


def test_l1_of_equal_inputs(rng):
    x = parameter(rng.standard_normal((1, 1, 4, 4)))
    loss = ad.l1_loss(x, x.data.copy())
    assert loss.data == 0
    loss.backward()
    assert not x.grad.any()


def test_small_net_gradients(rng):
    x = rng.standard_normal((4, 1, 8, 8))
    w1 = rng.standard_normal((3, 1, 3, 3)) * 0.5
    b1 = rng.standard_normal(3) * 0.1
    a1 = np.full(3, 0.25)
    w2 = rng.standard_normal((1, 3, 3, 3)) * 0.5
    b2 = rng.standard_normal(1) * 0.1

    def net(w1, b1, a1, w2, b2):
        return ad.conv2d(ad.prelu(ad.conv2d(Tensor(x), w1, b1), a1), w2, b2)

    fd_check(net, [w1, b1, a1, w2, b2], rng)


def test_projector_node_gradient(small_parallel, rng):
    x = parameter(rng.standard_normal((1, 1, 16, 16)))
    ad.project(x, small_parallel).sum().backward()
    ones = np.ones((small_parallel.n_angles, small_parallel.n_detectors))
    np.testing.assert_allclose(x.grad[0, 0], back_project(ones, small_parallel, 16), rtol=1e-10)


def test_projector_node_fd(rng):
    from pdunet.geometry import ParallelGeometry

    geom = ParallelGeometry(n_angles=10, angle_step=np.pi / 10, n_detectors=13)
    x = rng.standard_normal((1, 1, 8, 8))
    fd_check(lambda x: ad.project(x, geom), [x], rng)
    y = rng.standard_normal((1, 1, 10, 13))
    fd_check(lambda y: ad.backproject(y, geom, 8), [y], rng)


def test_projector_node_values(small_fan, rng):
    x = rng.standard_normal((2, 1, 16, 16))
    out = ad.project(Tensor(x), small_fan).data
    np.testing.assert_allclose(out[1, 0], forward_project(x[1, 0], small_fan), rtol=1e-10)


def test_zero_upstream_gives_zero_gradient(small_parallel, rng):
    x = parameter(rng.standard_normal((1, 1, 16, 16)))
    y = ad.project(x, small_parallel)
    y.backward(np.zeros(y.shape))
    assert not x.grad.any()


def test_backward_linearity(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3))

    def grads(a, b):
        p = parameter(w.copy())
        y = ad.conv2d(Tensor(x), p)
        loss = ad.affine(ad.l1_loss(y, np.zeros(y.shape)), a, 0) + ad.affine((y * y).sum(), b, 0)
        loss.backward()
        return p.grad

    np.testing.assert_allclose(grads(2.0, -3.0), 2.0 * grads(1.0, 0.0) - 3.0 * grads(0.0, 1.0), atol=1e-10)


def test_determinism(rng):
    def run():
        store = ParamStore(np.float32, seed=9)
        w = store.kaiming_uniform("w", (4, 2, 3, 3), 18)
        y = ad.conv2d(Tensor(np.ones((1, 2, 6, 6), np.float32)), w)
        (y * y).sum().backward()
        return y.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, Tensor(rng.standard_normal((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        x + Tensor(np.zeros((1, 2, 4, 5)))
    with pytest.raises(ShapeError):
        ad.conv2d_stride2(Tensor(np.zeros((1, 1, 5, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        ad.l1_loss(x, np.zeros((1, 2, 4, 3)))
    with pytest.raises(ShapeError):
        ad.prelu(x, Tensor(np.zeros(3)))


def test_state_errors(rng):
    x = parameter(rng.standard_normal(3))
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(AutodiffStateError):
        loss.backward()
    with pytest.raises(AutodiffStateError):
        Tensor(np.ones(3)).sum().backward()
    with pytest.raises(AutodiffStateError):
        ParamStore().adam_step()


def test_retain_graph_accumulates(rng):
    x = parameter(rng.standard_normal(3))
    loss = (x * x).sum()
    loss.backward(retain_graph=True)
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_adam_first_step():
    store = ParamStore(np.float64)
    w = store.zeros("w", (1,))
    w.grad = np.ones(1)
    store.adam_step(lr=1e-3)
    assert w.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-12)
    assert store.step_count == 1 and w.grad is None


def test_adam_matches_reference_sequence(rng):
    # hand-rolled Adam on a quadratic, three steps
    store = ParamStore(np.float64)
    w = store.add("w", rng.standard_normal(4))
    ref = w.data.copy()
    m = v = np.zeros(4)
    for t in range(1, 4):
        w.grad = 2 * w.data
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        store.adam_step(lr=1e-2)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_adam_zero_gradient_keeps_params(rng):
    store = ParamStore(np.float64)
    w = store.add("w", rng.standard_normal(5))
    before = w.data.copy()
    w.grad = np.zeros(5)
    store.adam_step()
    np.testing.assert_array_equal(w.data, before)


def test_accumulation_equals_summed_loss(rng):
    x1, x2 = rng.standard_normal((1, 1, 6, 6)), rng.standard_normal((1, 1, 6, 6))
    w0 = rng.standard_normal((1, 1, 3, 3))

    def loss(w, x):
        y = ad.conv2d(Tensor(x), w)
        return ad.l1_loss(y, np.zeros(y.shape))

    w = parameter(w0.copy())
    loss(w, x1).backward()
    loss(w, x2).backward()
    acc = w.grad.copy()
    w = parameter(w0.copy())
    (loss(w, x1) + loss(w, x2)).backward()
    np.testing.assert_allclose(acc, w.grad, atol=1e-6)


def test_adam_keeps_grad_on_request(rng):
    store = ParamStore(np.float64)
    w = store.add("w", np.ones(2))
    w.grad = np.ones(2)
    store.adam_step(zero_grad=False)
    assert w.grad is not None


def test_param_store_state_dict(rng):
    store = ParamStore(np.float32, seed=3)
    store.kaiming_uniform("a", (2, 2), 4)
    store.full("b", (3,), 0.25)
    state = store.state_dict()
    other = ParamStore(np.float32, seed=99)
    other.zeros("a", (2, 2))
    other.zeros("b", (3,))
    other.load_state_dict(state)
    assert other["a"].data.tobytes() == store["a"].data.tobytes()
    assert store.count() == 7 and len(store) == 2
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
    with pytest.raises(ValueError):
        other.load_state_dict({"a": np.zeros(3), "b": np.zeros(3)})
    with pytest.raises(KeyError):
        other.load_state_dict({"a": np.zeros((2, 2))})


def test_kaiming_bound():
    store = ParamStore(np.float64, seed=0)
    w = store.kaiming_uniform("w", (64, 9), 9)
    assert np.abs(w.data).max() <= np.sqrt(6 / 9)


def test_no_grad_builds_no_graph(rng):
    w = parameter(rng.standard_normal((2, 1, 3, 3)))
    x = Tensor(rng.standard_normal((1, 1, 5, 5)))
    with ad.no_grad():
        y = ad.conv2d(x, w)
        assert not ad.grad_enabled()
    assert ad.grad_enabled()
    assert not y.requires_grad and y.parents == ()
    assert ad.conv2d(x, w).requires_grad
