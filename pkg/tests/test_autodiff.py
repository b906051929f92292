import numpy as np
import pytest

from grpolab import autodiff as ad
from grpolab.autodiff import (
    NondeterministicFunctionError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_add_zero_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = ad.add(x, Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, x.data)


def test_softmax_symmetry():
    out = ad.softmax_last(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_backward_sum_gives_ones():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    grads = tape.backward(loss, [x])
    np.testing.assert_array_equal(grads[x.uid], np.ones(3))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.mul(x, x))
    grads = tape.backward(loss, [x])
    np.testing.assert_array_equal(grads[x.uid], [2.0, 4.0, 6.0])


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(42)
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b1 = Tensor(rng.normal(size=(5,)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))

    def f():
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        return ad.reduce_sum(ad.exp(ad.scale(ad.matmul(h, w2), 0.2)))

    assert ad.finite_diff_check(f, [w1, b1, w2], h=1e-5) < 1e-4


def test_backward_is_linear_in_loss():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)

    def grad_of(builder):
        with Tape() as tape:
            loss = builder()
        return tape.backward(loss, [x])[x.uid]

    f = lambda: ad.reduce_sum(ad.mul(x, x))
    g = lambda: ad.reduce_sum(ad.exp(x))
    both = lambda: ad.add(ad.reduce_sum(ad.mul(x, x)), ad.reduce_sum(ad.exp(x)))
    np.testing.assert_allclose(grad_of(both), grad_of(f) + grad_of(g), atol=1e-12)


def test_untouched_leaf_gets_exact_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    grads = tape.backward(loss, [x, unused])
    assert np.all(grads[unused.uid] == 0.0)
    assert grads[unused.uid].shape == (1,)


def test_tape_consumed_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    tape.backward(loss, [x])
    with pytest.raises(TapeError):
        tape.backward(loss, [x])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(TapeError):
        tape.backward(y, [x])


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_nonfinite_error_names_op():
    with pytest.raises(NonFiniteError) as err:
        ad.log(Tensor([0.0]))
    assert "log" in str(err.value)


def test_finite_diff_trivial_sum():
    x = Tensor(np.random.default_rng(1).normal(size=(4,)), requires_grad=True)
    err = ad.finite_diff_check(lambda: ad.reduce_sum(x), [x])
    assert err < 1e-8


def test_finite_diff_exp():
    x = Tensor(np.random.default_rng(2).normal(scale=0.3, size=(5,)), requires_grad=True)
    err = ad.finite_diff_check(lambda: ad.reduce_sum(ad.exp(x)), [x])
    assert err < 1e-4


def test_finite_diff_negative_control():
    # A primitive with a deliberately wrong local gradient must be caught.
    x = Tensor(np.random.default_rng(3).normal(size=(4,)), requires_grad=True)

    def bad_exp(t):
        out = np.exp(t.data)
        return ad._emit("bad_exp", (t,), out, lambda g: (g * out * 0.5,))

    err = ad.finite_diff_check(lambda: ad.reduce_sum(bad_exp(x)), [x])
    assert err > 1e-1


def test_finite_diff_detects_nondeterminism():
    x = Tensor([1.0], requires_grad=True)
    state = {"n": 0}

    def f():
        state["n"] += 1
        return ad.reduce_sum(ad.scale(x, float(state["n"])))

    with pytest.raises(NondeterministicFunctionError):
        ad.finite_diff_check(f, [x])


def _primitive_cases(rng):
    """(name, builder, params) triples over smooth, kink-free random inputs."""
    def t(shape, scale=1.0, offset=0.0):
        return Tensor(offset + rng.normal(scale=scale, size=shape), requires_grad=True)

    a23, b23 = t((2, 3)), t((2, 3))
    bias = t((3,))
    m34 = t((3, 4))
    batch = t((2, 3, 4))
    pos = Tensor(np.abs(rng.normal(size=(2, 3))) + 0.5, requires_grad=True)
    # relu/minimum/clip inputs bounded away from their kinks
    ra = Tensor(np.where(np.abs(z := rng.normal(size=(2, 3))) < 0.05, 0.2, z), requires_grad=True)
    mb = Tensor(ra.data + np.where(rng.normal(size=(2, 3)) > 0, 0.3, -0.3), requires_grad=True)
    ln_g, ln_b = t((3,)), t((3,))
    ids = rng.integers(0, 2, size=(2,))
    pick = rng.integers(0, 3, size=(2,))
    return [
        ("add", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.add(a23, b23), 0.3))), [a23, b23]),
        ("add_bias", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.add(a23, bias), 0.3))), [a23, bias]),
        ("mul", lambda: ad.reduce_sum(ad.mul(a23, b23)), [a23, b23]),
        ("scale", lambda: ad.reduce_sum(ad.scale(a23, -1.7)), [a23]),
        ("matmul2d", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.matmul(a23, m34), 0.2))), [a23, m34]),
        ("matmul3d2d", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.matmul(batch, ad.transpose_last(m34)), 0.1))), [batch, m34]),
        ("transpose", lambda: ad.reduce_sum(ad.mul(ad.transpose_last(a23), ad.transpose_last(b23))), [a23, b23]),
        ("reshape", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.reshape(a23, (3, 2)), 0.3))), [a23]),
        ("sum_axis", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.reduce_sum(batch, axis=1), 0.2))), [batch]),
        ("mean", lambda: ad.reduce_sum(ad.exp(ad.mean(a23, axis=1, keepdims=True))), [a23]),
        ("pow", lambda: ad.reduce_sum(ad.pow_const(pos, -0.5)), [pos]),
        ("exp", lambda: ad.reduce_sum(ad.exp(ad.scale(a23, 0.5))), [a23]),
        ("log", lambda: ad.reduce_sum(ad.log(pos)), [pos]),
        ("relu", lambda: ad.reduce_sum(ad.mul(ad.relu(ra), ad.relu(ra))), [ra]),
        ("softmax", lambda: ad.reduce_sum(ad.mul(ad.softmax_last(a23), b23)), [a23, b23]),
        ("log_softmax", lambda: ad.reduce_sum(ad.mul(ad.log_softmax_last(a23), b23)), [a23, b23]),
        ("layer_norm", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.layer_norm(a23, ln_g, ln_b), 0.2))), [a23, ln_g, ln_b]),
        ("gather", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.gather_rows(a23, ids), 0.3))), [a23]),
        ("take_along", lambda: ad.reduce_sum(ad.exp(ad.take_along_last(a23, pick))), [a23]),
        ("slice", lambda: ad.reduce_sum(ad.exp(ad.slice_last(a23, 1, 3))), [a23]),
        ("concat", lambda: ad.reduce_sum(ad.exp(ad.scale(ad.concat_last([a23, b23]), 0.3))), [a23, b23]),
        ("minimum", lambda: ad.reduce_sum(ad.minimum(ra, mb)), [ra, mb]),
        ("clip", lambda: ad.reduce_sum(ad.mul(ad.clip_const(ra, -0.9, 0.9), mb)), [ra, mb]),
    ]


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, builder, params in _primitive_cases(rng):
        err = ad.finite_diff_check(builder, params, h=1e-5)
        assert err <= 1e-4, f"primitive {name} failed at seed {seed}: {err}"


def test_independent_tapes_on_threads():
    import threading

    results = {}

    def work(key, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(8,)), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
        results[key] = (tape.backward(loss, [x])[x.uid], 2 * x.data)

    threads = [threading.Thread(target=work, args=(i, i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got, want in results.values():
        np.testing.assert_allclose(got, want, atol=1e-15)
