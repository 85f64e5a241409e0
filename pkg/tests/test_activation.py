import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minima_atlas import activation as A
from minima_atlas.activation import ActivationKind, ActivationSpec, Verdict

ALL_KINDS = [
    ActivationSpec(),
    ActivationSpec(ActivationKind.SHIFTED_SIGMOID, shift=0.4),
    ActivationSpec(ActivationKind.SHIFTED_TANH, shift=0.3),
    ActivationSpec(ActivationKind.SHIFTED_SOFTPLUS, shift=-0.2),
    ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=(1.0, -2.0, 0.5, 0.25)),
    ActivationSpec(ActivationKind.CUSTOM_SERIES, coeffs=(1.0, 1.0, 0.5, 1 / 6, 1 / 24, 1 / 120)),
]


def test_eval_examples():
    assert A.eval(ActivationSpec(), 0.0) == 1.0
    assert A.eval(ActivationSpec(ActivationKind.SHIFTED_TANH, shift=0.3), 0.0) == pytest.approx(math.tanh(0.3), abs=1e-15)
    assert A.eval(ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=(1, 2)), 3.0) == 7.0


def test_shifted_tanh_value_matches_series_oracle():
    act = ActivationSpec(ActivationKind.SHIFTED_TANH, shift=0.3)
    # frozen from the closed form, checked against the J=64 series
    assert A.eval(act, 0.0) == pytest.approx(0.2913126124515909, abs=1e-15)
    assert A.series_eval(act, 0.0, 64) == pytest.approx(0.2913126124515909, abs=1e-15)


def test_derivative_examples():
    assert A.d1(ActivationSpec(), 0.0) == 1.0
    assert A.d2(ActivationSpec(ActivationKind.SHIFTED_SIGMOID), 0.0) == 0.0
    assert A.d1(ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=(0, 0, 1)), 2.0) == 4.0


def test_series_examples():
    np.testing.assert_allclose(A.series_coeffs(ActivationSpec(), 4), [1, 1, 1 / 2, 1 / 6, 1 / 24], rtol=1e-15)
    np.testing.assert_allclose(A.series_coeffs(ActivationSpec(ActivationKind.SHIFTED_TANH), 3), [0, 1, 0, -1 / 3],
                               atol=1e-15)
    np.testing.assert_array_equal(A.series_coeffs(ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=(2, 0, 5)), 4),
                                  [2, 0, 5, 0, 0])
    with pytest.raises(ValueError):
        A.series_coeffs(ActivationSpec(), 0)


def test_series_recurrences_against_known_expansions():
    # sigmoid(x) = 1/2 + x/4 - x^3/48 + x^5/480
    c = A.series_coeffs(ActivationSpec(ActivationKind.SHIFTED_SIGMOID), 5)
    np.testing.assert_allclose(c, [0.5, 0.25, 0, -1 / 48, 0, 1 / 480], atol=1e-15)
    # softplus(x) = log 2 + x/2 + x^2/8 - x^4/192
    c = A.series_coeffs(ActivationSpec(ActivationKind.SHIFTED_SOFTPLUS), 4)
    np.testing.assert_allclose(c, [math.log(2), 0.5, 0.125, 0, -1 / 192], atol=1e-15)
    # tanh: 2/15 x^5 - 17/315 x^7
    c = A.series_coeffs(ActivationSpec(ActivationKind.SHIFTED_TANH), 7)
    np.testing.assert_allclose(c[5:], [2 / 15, 0, -17 / 315], atol=1e-15)


@pytest.mark.parametrize("act", ALL_KINDS, ids=lambda a: a.kind.value)
def test_derivatives_match_finite_differences(act):
    h = 1e-5
    for x in np.linspace(-3, 3, 61):
        for f, df in ((A.eval, A.d1), (A.d1, A.d2)):
            fd = (f(act, x + h) - f(act, x - h)) / (2 * h)
            exact = df(act, x)
            assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


@pytest.mark.parametrize("kind", [ActivationKind.SHIFTED_TANH, ActivationKind.SHIFTED_SIGMOID,
                                  ActivationKind.SHIFTED_SOFTPLUS])
@given(x=st.floats(-0.5, 0.5), shift=st.floats(-1.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_truncated_series_matches_closed_form(kind, x, shift):
    act = ActivationSpec(kind, shift=shift)
    assert abs(A.series_eval(act, x, 64) - A.eval(act, x)) < 1e-10


@given(J=st.integers(8, 200))
def test_exponential_certificate_is_good_for_all_depths(J):
    assert A.good_certificate(ActivationSpec(), J).verdict is Verdict.GOOD


@given(coeffs=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=10), J=st.integers(10, 40))
def test_polynomial_tail_vanishes(coeffs, J):
    act = ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=tuple(coeffs))
    c = A.series_coeffs(act, J)
    assert np.all(c[len(coeffs):] == 0)
    assert A.good_certificate(act, J).verdict is Verdict.NOT_GOOD


def test_certificate_examples():
    assert A.good_certificate(ActivationSpec(), 64).verdict is Verdict.GOOD
    tanh = A.good_certificate(ActivationSpec(ActivationKind.SHIFTED_TANH), 64)
    assert tanh.verdict is Verdict.NOT_GOOD and "c_0" in tanh.reason
    poly = A.good_certificate(ActivationSpec(ActivationKind.POLYNOMIAL, coeffs=(1, 1)), 64)
    assert poly.verdict is Verdict.NOT_GOOD and "tail" in poly.reason


def test_shifted_series_never_certified_good():
    for act in ALL_KINDS[1:4]:
        assert A.good_certificate(act, 64).verdict is not Verdict.GOOD
    with pytest.raises(ValueError):
        A.good_certificate(ActivationSpec(), 7)


def test_overflow_is_reported():
    with pytest.raises(A.NonFiniteError):
        A.eval(ActivationSpec(), 1000.0)
    with pytest.raises(A.NonFiniteError):
        A.d1(ActivationSpec(), np.nan)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        ActivationSpec(shift=0.1)
    with pytest.raises(ValueError):
        ActivationSpec(ActivationKind.POLYNOMIAL)
    with pytest.raises(ValueError):
        ActivationSpec(ActivationKind.SHIFTED_TANH, shift=float("inf"))
    with pytest.raises(ValueError):
        ActivationSpec(ActivationKind.SHIFTED_TANH, coeffs=(1.0,))
    for act in ALL_KINDS:
        assert ActivationSpec.from_dict(act.to_dict()) == act
