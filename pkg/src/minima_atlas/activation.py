"""Analytic activations with exact derivatives and truncated Taylor series."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """Raised when an evaluation overflows or produces NaN."""


class ActivationKind(str, enum.Enum):
    EXPONENTIAL = "exponential"
    SHIFTED_SIGMOID = "shifted_sigmoid"
    SHIFTED_TANH = "shifted_tanh"
    SHIFTED_SOFTPLUS = "shifted_softplus"
    POLYNOMIAL = "polynomial"
    CUSTOM_SERIES = "custom_series"


_SHIFTED = {
    ActivationKind.SHIFTED_SIGMOID,
    ActivationKind.SHIFTED_TANH,
    ActivationKind.SHIFTED_SOFTPLUS,
}
_LITERAL = {ActivationKind.POLYNOMIAL, ActivationKind.CUSTOM_SERIES}


@dataclass(frozen=True)
class ActivationSpec:
    """Scalar activation x -> sigma(x + shift).

    Sigmoid is 1/(1+e^-x), softplus is log(1+e^x). Polynomial and
    CustomSeries take literal Taylor coefficients about 0 and ignore shift.
    """

    kind: ActivationKind = ActivationKind.EXPONENTIAL
    shift: float = 0.0
    coeffs: Optional[tuple] = None
    series_depth: int = 64

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind(self.kind))
        if not math.isfinite(self.shift):
            raise ValueError("shift must be finite")
        if self.series_depth < 1:
            raise ValueError("series_depth must be positive")
        if self.kind in _LITERAL:
            if not self.coeffs:
                raise ValueError(f"{self.kind.value} needs coeffs")
            c = tuple(float(v) for v in self.coeffs)
            if not all(math.isfinite(v) for v in c):
                raise ValueError("coeffs must be finite")
            object.__setattr__(self, "coeffs", c)
        elif self.coeffs is not None:
            raise ValueError(f"{self.kind.value} takes no coeffs")
        if self.kind not in _SHIFTED and self.shift != 0.0:
            raise ValueError(f"{self.kind.value} takes no shift")

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "shift": self.shift, "series_depth": self.series_depth}
        if self.coeffs is not None:
            out["coeffs"] = list(self.coeffs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ActivationSpec":
        coeffs = data.get("coeffs")
        return cls(
            kind=ActivationKind(data.get("kind", "exponential")),
            shift=float(data.get("shift", 0.0)),
            coeffs=tuple(coeffs) if coeffs is not None else None,
            series_depth=int(data.get("series_depth", 64)),
        )


EXPONENTIAL = ActivationSpec()


def _checked(y):
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("activation produced a non-finite value; bound the input domain")
    return y


def _derivative(act: ActivationSpec, x, order: int):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("activation input is not finite")
    kind = act.kind
    with np.errstate(over="ignore", invalid="ignore"):
        if kind is ActivationKind.EXPONENTIAL:
            y = np.exp(x)
        elif kind is ActivationKind.SHIFTED_SIGMOID:
            s = expit(x + act.shift)
            y = (s, s * (1 - s), s * (1 - s) * (1 - 2 * s))[order]
        elif kind is ActivationKind.SHIFTED_TANH:
            t = np.tanh(x + act.shift)
            y = (t, 1 - t * t, -2 * t * (1 - t * t))[order]
        elif kind is ActivationKind.SHIFTED_SOFTPLUS:
            z = x + act.shift
            if order == 0:
                y = np.logaddexp(0.0, z)
            else:
                s = expit(z)
                y = s if order == 1 else s * (1 - s)
        else:
            c = np.asarray(act.coeffs)
            for _ in range(order):
                c = npoly.polyder(c) if len(c) > 1 else np.zeros(1)
            y = npoly.polyval(x, c)
    return _checked(y)


def eval(act: ActivationSpec, x):
    """sigma(x + shift), elementwise."""
    return _derivative(act, x, 0)


def d1(act: ActivationSpec, x):
    return _derivative(act, x, 1)


def d2(act: ActivationSpec, x):
    return _derivative(act, x, 2)


def _sigmoid_series(s0: float, J: int) -> np.ndarray:
    # s' = s(1 - s): (j+1) b_{j+1} = b_j - sum_{i<=j} b_i b_{j-i}
    b = np.zeros(J + 1)
    b[0] = expit(s0)
    for j in range(J):
        b[j + 1] = (b[j] - np.dot(b[: j + 1], b[j::-1])) / (j + 1)
    return b


def _tanh_series(s0: float, J: int) -> np.ndarray:
    # t' = 1 - t^2
    b = np.zeros(J + 1)
    b[0] = math.tanh(s0)
    for j in range(J):
        b[j + 1] = ((1.0 if j == 0 else 0.0) - np.dot(b[: j + 1], b[j::-1])) / (j + 1)
    return b


def series_coeffs(act: ActivationSpec, J: int) -> np.ndarray:
    """Taylor coefficients c_0..c_J of x -> sigma(x + shift) about 0."""
    if J < 1:
        raise ValueError("J must be >= 1")
    kind = act.kind
    if kind is ActivationKind.EXPONENTIAL:
        c = np.ones(J + 1)
        c[1:] = np.cumprod(1.0 / np.arange(1, J + 1, dtype=float))
        return c
    if kind is ActivationKind.SHIFTED_SIGMOID:
        return _sigmoid_series(act.shift, J)
    if kind is ActivationKind.SHIFTED_TANH:
        return _tanh_series(act.shift, J)
    if kind is ActivationKind.SHIFTED_SOFTPLUS:
        # softplus' = sigmoid
        c = np.zeros(J + 1)
        c[0] = np.logaddexp(0.0, act.shift)
        c[1:] = _sigmoid_series(act.shift, J - 1) / np.arange(1, J + 1)
        return c
    c = np.zeros(J + 1)
    lit = np.asarray(act.coeffs)[: J + 1]
    c[: len(lit)] = lit
    return c


def series_eval(act: ActivationSpec, x, J: Optional[int] = None):
    """Truncated Taylor sum of degree J (default series_depth)."""
    return npoly.polyval(np.asarray(x, dtype=float), series_coeffs(act, J or act.series_depth))


class Verdict(str, enum.Enum):
    GOOD = "good"
    NOT_GOOD = "not_good"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Certificate:
    verdict: Verdict
    reason: str = ""


REL_NONZERO = 1e-12


def _window_parities(c: np.ndarray, J: int) -> tuple:
    nz = np.abs(c) > REL_NONZERO * np.max(np.abs(c))
    idx = [j for j in range(J // 2 + 1, J + 1) if nz[j]]
    return any(j % 2 for j in idx), any(j % 2 == 0 for j in idx)


def good_certificate(act: ActivationSpec, J: int = 64) -> Certificate:
    """Finite-depth check that c_0 != 0 and odd and even coefficients persist.

    Only the exponential gets a definite Good (c_j = 1/j! > 0 for all j).
    Window evidence for any other series is reported as Inconclusive.
    """
    if J < 8:
        raise ValueError("J must be >= 8")
    c = series_coeffs(act, J)
    scale = np.max(np.abs(c))
    if scale == 0.0 or abs(c[0]) <= REL_NONZERO * scale:
        return Certificate(Verdict.NOT_GOOD, "c_0 = 0")
    if act.kind is ActivationKind.POLYNOMIAL:
        return Certificate(Verdict.NOT_GOOD, "tail vanishes")
    if act.kind is ActivationKind.EXPONENTIAL:
        return Certificate(Verdict.GOOD, "c_j = 1/j! > 0 for every j")
    odd, even = _window_parities(c, J)
    if odd and even:
        reason = f"odd and even coefficients present in ({J // 2}, {J}]; not a proof for all orders"
    else:
        missing = " and ".join(p for p, ok in (("odd", odd), ("even", even)) if not ok)
        reason = f"no {missing} coefficient above threshold in ({J // 2}, {J}]"
    return Certificate(Verdict.INCONCLUSIVE, reason)
