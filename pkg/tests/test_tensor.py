import numpy as np
import pytest

from vce import tensor as T
from vce.tensor import Adam, ShapeError, Tensor

import gradcheck


def test_add_elementwise():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, np.array([4.0, 6.0], dtype=np.float32))


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_conv2d_ones_center():
    # 3x3 all-ones kernel over 5x5 all-ones image: center value is 9
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w)
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0  # corner sees a 2x2 patch


def test_shape_mismatch_message():
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(w, w))
    loss.backward()
    assert np.allclose(w.grad, [2.0, 4.0])


def test_backward_l1():
    w = Tensor([2.0], requires_grad=True)
    loss = T.mean(T.tabs(T.sub(w, Tensor([0.0]))))
    loss.backward()
    assert np.allclose(w.grad, [1.0])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    out = T.mul(w, w)
    with pytest.raises(ShapeError):
        out.backward()


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4)).astype(np.float32)

    def grads(scale):
        w = Tensor(x, requires_grad=True)
        loss = T.mean(T.mul(T.silu(w), Tensor(np.full((4, 4), scale, dtype=np.float32))))
        loss.backward()
        return w.grad.copy()

    g1, g3 = grads(1.0), grads(3.0)
    assert np.allclose(3.0 * g1, g3, rtol=1e-5, atol=1e-7)


def test_mlp_gradcheck_finite_differences():
    # small MLP: 6 parameters, composite graph, FD oracle in float64
    rng = np.random.default_rng(7)
    x64 = rng.normal(size=(1, 2))
    w1_ = rng.normal(size=(2, 2))
    w2_ = rng.normal(size=(2, 1))

    def np_loss(w1, w2):
        h = gradcheck.np_silu(x64 @ w1)
        return float(np.mean(h @ w2))

    w1 = Tensor(w1_, requires_grad=True)
    w2 = Tensor(w2_, requires_grad=True)
    loss = T.mean(T.matmul(T.silu(T.matmul(Tensor(x64), w1)), w2))
    loss.backward()

    h = 1e-3
    for wt, base, idx in ((w1, w1_, 0), (w2, w2_, 1)):
        fd = np.zeros_like(base)
        for j in range(base.size):
            args = [w1_.copy(), w2_.copy()]
            args[idx].reshape(-1)[j] += h
            up = np_loss(*args)
            args[idx].reshape(-1)[j] -= 2 * h
            dn = np_loss(*args)
            fd.reshape(-1)[j] = (up - dn) / (2 * h)
        rel = np.linalg.norm(wt.grad - fd) / (np.linalg.norm(fd) + 1e-12)
        assert rel < 1e-3


@pytest.mark.parametrize("op", sorted(gradcheck.OPS))
def test_gradcheck_every_op(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    for _ in range(5):
        gradcheck.check_op(op, rng)


def test_adam_first_step_magnitude():
    # w=1, grad=1, lr=0.1: bias-corrected first update is ~lr
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0], dtype=np.float32)
    opt = Adam([w], lr=0.1)
    opt.step()
    assert abs(w.data[0] - 0.9) < 1e-6
    assert w.grad is None


def test_adam_zero_grad_no_move():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([0.0], dtype=np.float32)
    Adam([w], lr=0.1).step()
    assert w.data[0] == 1.0


def test_adam_symmetry():
    a = Tensor([0.5, -0.3], requires_grad=True)
    b = Tensor([0.5, -0.3], requires_grad=True)
    opt = Adam([a, b], lr=1e-2)
    rng = np.random.default_rng(11)
    for _ in range(5):
        g = rng.normal(size=2).astype(np.float32)
        a.grad = g.copy()
        b.grad = g.copy()
        opt.step()
    assert np.array_equal(a.data, b.data)


def test_adam_missing_grad_errors():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="grad"):
        Adam([w]).step()


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w)).data
    b = T.conv2d(Tensor(x), Tensor(w)).data
    assert np.array_equal(a, b)


def test_vct_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.vct"
    T.save_vct(path, arr)
    back = T.load_vct(path)
    assert back.shape == (3, 4, 5)
    assert np.array_equal(back, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"VCT1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert int.from_bytes(raw[8:16], "little") == 3  # first extent


def test_vct_bad_magic(tmp_path):
    p = tmp_path / "bad.vct"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        T.load_vct(p)
