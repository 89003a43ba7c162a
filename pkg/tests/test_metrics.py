import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lecnav import metrics as mt


def test_cppr_no_weak_is_zero():
    g = np.ones(6)
    assert all(mt.cppr(g, 0.5, [6, 4], t) == 0 for t in range(7))


def test_cppr_saturates_at_one():
    g = np.full(5, 1e-9)
    assert mt.cppr(g, 1e-3, [5, 3], 5) == 1.0


def test_cppr_hand_count():
    # T_1 = 4, T_2 = 6, UE1 weak after steps 2 and 3
    g1 = np.array([1.0, 1e-9, 1e-9, 1.0])
    assert mt.cppr(g1, 1e-3, [4, 6], 4) == 2 / 6


def test_cppr_incomplete_raises():
    with pytest.raises(mt.IncompleteEpisode):
        mt.cppr(np.ones(3), 0.5, [3, None], 2)


def test_cppr_t_out_of_range():
    with pytest.raises(ValueError):
        mt.cppr(np.ones(3), 0.5, [3, 2], 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 30))
def test_cppr_curve_monotone_bounded(weak, extra):
    g = np.where(weak, 1e-9, 1.0)
    lengths = [len(g), len(g) + extra]
    c = mt.cppr_curve(g, 1e-3, lengths)
    assert np.all(np.diff(c) >= 0) and c[0] == 0 and c[-1] <= 1


def test_smooth_constant():
    y = np.full(50, 3.25)
    np.testing.assert_allclose(mt.smooth(y, 3, 11), y, rtol=0, atol=1e-12)


def test_smooth_reproduces_cubic():
    x = np.linspace(-2, 2, 41)
    y = 0.5 * x ** 3 - x ** 2 + 2 * x - 1
    np.testing.assert_allclose(mt.smooth(y, 3, 41), y, atol=1e-10)
    np.testing.assert_allclose(mt.smooth(y, 3, 9), y, atol=1e-10)


def test_smooth_reduces_noise():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 4 * np.pi, 600)
    clean = np.sin(x)
    noisy = clean + rng.normal(0, 0.3, x.size)
    s = mt.smooth(noisy, 3, 61)
    assert np.var(s - clean) < 0.2 * np.var(noisy - clean)


def test_smooth_preserves_length_and_validates():
    y = np.arange(20.0)
    assert len(mt.smooth(y, 3, 7)) == 20
    for w in (8, 3, 21):
        with pytest.raises(ValueError):
            mt.smooth(y, 3, w)


def test_smooth_edges_shrink_symmetrically():
    rng = np.random.default_rng(1)
    y = rng.normal(size=30)
    s = mt.smooth(y, 3, 11)
    assert s[0] == y[0] and s[-1] == y[-1]
    # index 2 uses a 5-point window
    from scipy.signal import savgol_coeffs
    assert s[2] == pytest.approx(savgol_coeffs(5, 3, use="dot") @ y[:5])


def test_desk_window():
    assert mt.desk_window(3000) == 301
    assert mt.desk_window(200) % 2 == 1
    assert mt.desk_window(10) <= 10


def test_convergence_monotone():
    y = np.linspace(0, 10, 101)  # crosses 8 at index 80
    assert mt.convergence_episode(y) == 80


def test_convergence_sustainment():
    y = np.array([0, 9, 10, 5, 9, 9, 10, 9.5])
    assert mt.convergence_episode(y) == 4


def test_convergence_never_sustained():
    assert mt.convergence_episode(np.array([0.0, 10.0, 0.0])) is None


@pytest.mark.parametrize("c", [0.5, 3.0, 100.0])
def test_convergence_scale_invariant(c):
    rng = np.random.default_rng(2)
    y = mt.smooth(np.cumsum(rng.random(300)), 3, 31)
    assert mt.convergence_episode(c * y) == mt.convergence_episode(y)


def test_lec_like_curve_converges_first():
    n = np.arange(3000)
    rng = np.random.default_rng(3)
    lec = 10 * (1 - np.exp(-n / 300)) + rng.normal(0, 0.5, n.size)
    ec = 10 * (1 - np.exp(-n / 900)) + rng.normal(0, 0.5, n.size)
    w = mt.desk_window(3000)
    assert mt.convergence_episode(mt.smooth(lec, 3, w)) < mt.convergence_episode(mt.smooth(ec, 3, w))


def test_top_k_of_m():
    t = [5, 1, 9, 3, 3, 7]
    assert list(mt.top_k_of_m(t, 3)) == [1, 3, 4]
    with pytest.raises(ValueError):
        mt.top_k_of_m(t, 7)


def test_reduction_examples():
    assert mt.reduction(9520, 3636) == pytest.approx(0.618, abs=5e-4)
    assert mt.reduction(100, 100) == 0.0


def test_runcurve_smooth_keeps_metadata():
    rc = mt.RunCurve(np.arange(20.0), scheme="lec", seed=3, config_hash="ab")
    out = mt.smooth(rc, 3, 7)
    assert isinstance(out, mt.RunCurve) and out.scheme == "lec" and len(out) == 20
