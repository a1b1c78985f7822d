import math

import numpy as np
import pytest

from precipdiff.schedule import cosine_schedule, linear_schedule, make_schedule

# Product accumulation in plain python floats, frozen (T=1000, 1e-4..0.02).
LINEAR_1000_ALPHA_BAR_T = 4.0358297653756754e-05


def fresh_product(alpha, t):
    p = 1.0
    for i in range(1, t + 1):
        p *= float(alpha[i])
    return p


ALL = [linear_schedule(T) for T in (10, 200, 1000)] + [cosine_schedule(T, 0.008) for T in (10, 50, 200, 1000)]


@pytest.mark.parametrize("sched", ALL, ids=lambda s: f"{s.kind}-{s.T}")
def test_invariants(sched):
    T = sched.T
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    b = sched.beta[1:]
    assert np.all((b > 0) & (b < 1))
    np.testing.assert_array_equal(sched.alpha, 1.0 - sched.beta)
    np.testing.assert_array_equal(sched.sigma, np.sqrt(sched.beta))
    for t in (1, T // 2, T):
        assert abs(sched.alpha_bar[t] - fresh_product(sched.alpha, t)) < 1e-12


def test_linear_endpoints():
    s = linear_schedule(50, 1e-3, 0.05)
    assert s.beta[1] == 1e-3
    assert math.isclose(s.beta[50], 0.05, rel_tol=1e-15)


def test_linear_terminal_alpha_bar():
    s = linear_schedule(1000)
    assert math.isclose(s.alpha_bar[1000], LINEAR_1000_ALPHA_BAR_T, rel_tol=1e-9)
    assert math.isclose(s.alpha_bar[1000], 4.0e-5, rel_tol=0.02)


def test_linear_constant_beta():
    s = linear_schedule(30, 0.01, 0.01)
    np.testing.assert_allclose(s.beta[1:], 0.01)
    t = np.arange(31)
    np.testing.assert_allclose(s.alpha_bar, 0.99**t, rtol=1e-12)


def test_linear_rejects_bad_betas():
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.5, 0.1)
    with pytest.raises(ValueError):
        linear_schedule(0)


def test_cosine_direct_evaluation():
    T, s = 50, 0.008
    sched = cosine_schedule(T, s)
    f = lambda j: math.cos((j / T + s) / (1 + s) * math.pi / 2) ** 2
    for j in range(1, T):
        assert math.isclose(sched.alpha_bar[j], f(j) / f(0), rel_tol=1e-10)
        ref_beta = 1 - (f(j) / f(0)) / (f(j - 1) / f(0))
        assert math.isclose(sched.beta[j], min(ref_beta, 0.999), rel_tol=1e-9)
    assert np.all(sched.beta[1:] <= 0.999)
    assert sched.beta[T] == 0.999


def test_cosine_above_linear_midway():
    assert cosine_schedule(1000).alpha_bar[500] > linear_schedule(1000).alpha_bar[500]
    # desk T=200 uses betas rescaled by 1000/T (same terminal noise level)
    assert cosine_schedule(200).alpha_bar[100] > linear_schedule(200, 5e-4, 0.1).alpha_bar[100]


def test_make_schedule_dispatch():
    assert make_schedule("cosine", 20, s=0.01).params == {"s": 0.01}
    with pytest.raises(ValueError):
        make_schedule("sigmoid", 10)


def test_check_step():
    s = linear_schedule(10)
    s.check_step(np.array([1, 10]))
    with pytest.raises(ValueError):
        s.check_step(0)
    with pytest.raises(ValueError):
        s.check_step(11)
