import numpy as np
import pytest

from leffa.gradcheck import (
    TOLERANCE,
    analytic_gradient,
    finite_difference_check,
    format_table,
    numerical_gradient,
    relative_error,
    run_suite,
)
from leffa.tensor import NumericalError, ParameterError, Tensor, precision


def test_sum_has_no_error(rng):
    assert finite_difference_check(lambda x: x.sum(), rng.standard_normal((3, 4))) < 1e-9


def test_sum_of_squares_is_tight(rng):
    assert finite_difference_check(lambda x: (x * x).sum(), rng.standard_normal((4, 5))) <= 1e-6


def test_doubled_gradient_reports_one_half(rng):
    x = rng.standard_normal((3, 3))
    f = lambda t: (t * t).sum()  # noqa: E731
    with precision(np.float64):
        wrong = 2.0 * analytic_gradient(f, x)
    err = finite_difference_check(f, x, analytic=wrong)
    assert err == pytest.approx(0.5, abs=1e-6)


def test_non_finite_function_is_an_error():
    with pytest.raises(NumericalError):
        numerical_gradient(lambda t: t.sum() * float("nan"), np.ones(2))


def test_step_must_be_positive():
    with pytest.raises(ParameterError):
        numerical_gradient(lambda t: t.sum(), np.ones(2), step=0.0)


def test_relative_error_uses_larger_magnitude():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0


def test_suite_subset_and_table():
    results = run_suite(seed=3, cases=2, ops=["softmax", "grid_sample_flow"])
    assert {r.op for r in results} == {"softmax", "grid_sample_flow"}
    assert all(r.ok and r.max_rel_error <= TOLERANCE for r in results)
    table = format_table(results)
    assert table.splitlines()[0].split() == ["op", "cases", "max_rel_err", "status"]


def test_thirty_two_bit_mode_within_loose_bound(rng):
    x = rng.standard_normal((3, 4))
    err = finite_difference_check(lambda t: (t * t * Tensor(np.full((3, 4), 0.5))).sum(), x,
                                  step=1e-2, dtype=np.float32)
    assert err <= 1e-2
