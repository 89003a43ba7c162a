import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lecnav import autodiff as ad
from tests.fd import fd_check


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = ad.matmul(ad.Tensor(np.eye(4)), ad.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_softmax_uniform_logits():
    out = ad.softmax(ad.Tensor(np.full(8, 3.7)))
    np.testing.assert_allclose(out.data, np.full(8, 1 / 8), rtol=0, atol=1e-15)


def test_tanh_zero_and_slope():
    x = ad.parameter(0.0)
    y = ad.tanh(x)
    y.backward()
    assert y.data == 0.0
    assert x.grad == pytest.approx(1.0)


def test_sum_gives_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_mean_square_gradient():
    xv = np.array([1.0, -2.0, 3.0, 0.5])
    x = ad.parameter(xv)
    ad.mean(ad.square(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * xv / 4)


def test_backward_accumulates_until_zeroed():
    x = ad.parameter([1.0, 2.0])
    ad.sum_(ad.mul(x, 3.0)).backward()
    ad.sum_(ad.mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_on_vector_raises():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.concat([ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 3)))], axis=1)


def test_no_grad_records_nothing():
    x = ad.parameter([1.0])
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and ad.graph_size(y) == 0


def test_graph_released_after_backward():
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.normal(size=(3, 3)))
    x = ad.Tensor(rng.normal(size=(2, 3)))

    def loss():
        return ad.sum_(ad.tanh(ad.matmul(x, w)))

    first = loss()
    baseline = ad.graph_size(first)
    first.backward()
    assert first._parents == ()
    w.zero_grad()
    second = loss()
    assert ad.graph_size(second) == baseline


def test_kld_equal_is_zero():
    q = np.array([0.1, 0.2, 0.7])
    assert ad.kld(ad.Tensor(np.log(q)), q).data == pytest.approx(0.0, abs=1e-15)


def test_kld_hand_value():
    # p = (0.5, 0.5) from equal logits, q = (0.9, 0.1)
    expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
    val = ad.kld(ad.Tensor([0.0, 0.0]), [0.9, 0.1]).data
    assert val == pytest.approx(expected, rel=1e-12)
    assert val == pytest.approx(0.5108, abs=1e-4)


def test_kld_rejects_zero_entry():
    with pytest.raises(ValueError):
        ad.kld(ad.Tensor([0.0, 0.0]), [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9))
def test_kld_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(n)) + 1e-9
    q /= q.sum()
    assert ad.kld(ad.Tensor(rng.normal(scale=5, size=n)), q).data >= -1e-12


def test_gru_zero_fixed_point():
    h = ad.gru_cell(ad.Tensor(np.zeros((2, 4))), ad.Tensor(np.zeros((2, 5))),
                    ad.Tensor(np.zeros((4, 15))), ad.Tensor(np.zeros((5, 15))),
                    ad.Tensor(np.zeros((1, 15))), ad.Tensor(np.zeros((1, 15))))
    np.testing.assert_array_equal(h.data, np.zeros((2, 5)))


def test_gru_unroll_shape_and_gradient():
    rng = np.random.default_rng(3)
    p = ad.ParamSet()
    ad.add_gru_params(p, "g", rng, 3, 4)
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]

    def f():
        h = ad.Tensor(np.zeros((2, 4)))
        for x in xs:
            h = ad.gru(p, "g", ad.Tensor(x), h)
            assert h.shape == (2, 4)
        return ad.sum_(ad.square(h))

    for name, t in p:
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        assert fd_check(f, t) < 1e-4, name


def test_adam_zero_grad_leaves_params():
    p = ad.ParamSet()
    p.add("w", [1.0, 2.0])
    ad.adam_step(p, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
    assert p.step == 1


@pytest.mark.parametrize("g", [1e-3, 1.0, 1e6])
def test_adam_first_step_is_lr(g):
    p = ad.ParamSet()
    w = p.add("w", [0.0])
    w.grad = np.array([g])
    ad.adam_step(p, 1e-3)
    assert w.data[0] == pytest.approx(-1e-3, rel=1e-4)
    assert w.grad is None


def test_adam_solves_quadratic():
    p = ad.ParamSet()
    x = p.add("x", [5.0])
    for _ in range(2000):
        ad.sum_(ad.square(x)).backward()
        ad.adam_step(p, 1e-2)
    assert abs(x.data[0]) < 1e-3


def test_paramset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    p = ad.ParamSet()
    p.add("a", rng.normal(size=(2, 3, 4)))
    p.add("b", rng.normal(size=(5,)))
    p.save(tmp_path / "ck.json")
    q = ad.ParamSet.load(tmp_path / "ck.json")
    for name, t in p:
        np.testing.assert_array_equal(q[name].data, t.data)
    with pytest.raises(KeyError):
        p.add("a", np.zeros(1))


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        w = ad.parameter(rng.normal(size=(4, 4)))
        out = ad.sum_(ad.sigmoid(ad.matmul(ad.Tensor(rng.normal(size=(3, 4))), w)))
        out.backward()
        return out.data, w.grad

    (a, ga), (b, gb) = run(), run()
    assert a == b and np.array_equal(ga, gb)
