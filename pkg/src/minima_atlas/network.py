"""Two-layer network, teacher network, empirical squared loss and its derivatives.

Parameters are flat vectors laid out as (a_1, w_1, ..., a_m, w_m).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import activation as act_mod
from .activation import EXPONENTIAL, ActivationSpec, NonFiniteError

SAMPLE_BOX = 1.0
WEIGHT_BOX = 2.0


def unpack(theta, d: int):
    """Split a flat parameter vector into outer weights a (m,) and inner weights W (m, d)."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size % (d + 1):
        raise ValueError(f"parameter length {theta.size} is not a multiple of d+1={d + 1}")
    block = theta.reshape(-1, d + 1)
    return block[:, 0], block[:, 1:]


def pack(a, W) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float).reshape(a.size, -1)
    return np.column_stack([a, W]).reshape(-1)


def width(theta, d: int) -> int:
    return np.asarray(theta).size // (d + 1)


def _as_points(x, d: int) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if d > 1 or X.size == 1 else X.reshape(-1, 1)
    if X.shape[1] != d:
        raise ValueError(f"inputs have dimension {X.shape[1]}, expected {d}")
    return X


def forward(theta, x, act: ActivationSpec = EXPONENTIAL, d: int = None):
    """g(theta, x) = sum_k a_k sigma(w_k . x) at one point (d,) or many (n, d)."""
    x_arr = np.asarray(x, dtype=float)
    if d is None:
        d = x_arr.shape[-1] if x_arr.ndim else 1
    single = x_arr.ndim <= 1 and x_arr.size == d
    a, W = unpack(theta, d)
    X = _as_points(x_arr.reshape(1, d) if single else x_arr, d)
    y = act_mod.eval(act, X @ W.T) @ a
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("forward pass produced a non-finite value")
    return float(y[0]) if single else y


@dataclass(frozen=True)
class TargetNetwork:
    """Teacher f* = sum_t bar_a_t sigma(bar_w_t . x) with nonzero bar_a and distinct bar_w."""

    bar_a: np.ndarray
    bar_w: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.bar_a, dtype=float).reshape(-1)
        W = np.asarray(self.bar_w, dtype=float).reshape(a.size, -1)
        if np.any(a == 0):
            raise ValueError("target outer weights must be nonzero")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(W))):
            raise ValueError("target parameters must be finite")
        object.__setattr__(self, "bar_a", a)
        object.__setattr__(self, "bar_w", W)
        if self.min_gap <= 0:
            raise ValueError("target inner weights must be pairwise distinct")

    @property
    def m0(self) -> int:
        return self.bar_a.size

    @property
    def d(self) -> int:
        return self.bar_w.shape[1]

    @property
    def min_gap(self) -> float:
        if self.m0 < 2:
            return float("inf")
        diff = self.bar_w[:, None, :] - self.bar_w[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        return float(dist[np.triu_indices(self.m0, 1)].min())

    @property
    def theta(self) -> np.ndarray:
        """The target as a width-m0 parameter vector."""
        return pack(self.bar_a, self.bar_w)

    def __call__(self, x, act: ActivationSpec = EXPONENTIAL):
        return forward(self.theta, x, act, self.d)

    def to_dict(self) -> dict:
        return {"bar_a": self.bar_a.tolist(), "bar_w": self.bar_w.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TargetNetwork":
        return cls(np.array(data["bar_a"], dtype=float), np.array(data["bar_w"], dtype=float))


def random_target(m0: int, d: int, rng, min_gap: float = 0.1, box: float = WEIGHT_BOX,
                  min_abs_a: float = 0.5, max_tries: int = 1000) -> TargetNetwork:
    """Teacher with |bar_a| in [min_abs_a, 1.5] and weights in [-box, box]^d pairwise >= min_gap apart."""
    for _ in range(max_tries):
        W = rng.uniform(-box, box, size=(m0, d))
        a = rng.uniform(min_abs_a, 1.5, size=m0) * rng.choice([-1.0, 1.0], size=m0)
        t = TargetNetwork(a, W)
        if t.min_gap >= min_gap:
            return t
    raise ValueError("could not place target weights with the requested gap")


@dataclass(frozen=True)
class LossContext:
    """Teacher, sample points and activation; labels are cached at construction."""

    target: TargetNetwork
    samples: np.ndarray
    activation: ActivationSpec = EXPONENTIAL
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = _as_points(self.samples, self.target.d)
        if len(np.unique(X, axis=0)) < len(X):
            raise ValueError("sample points must be pairwise distinct")
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "labels", forward(self.target.theta, X, self.activation, self.target.d))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.target.d

    @property
    def m0(self) -> int:
        return self.target.m0

    def with_samples(self, samples) -> "LossContext":
        return LossContext(self.target, samples, self.activation)

    # objective protocol used by the flow module
    def loss(self, theta) -> float:
        return loss(theta, self)

    def grad(self, theta) -> np.ndarray:
        return grad(theta, self)

    def hessian(self, theta) -> np.ndarray:
        return hessian_full(theta, self)

    def to_dict(self) -> dict:
        return {
            "target": self.target.to_dict(),
            "samples": self.samples.tolist(),
            "activation": self.activation.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "LossContext":
        return cls(
            TargetNetwork.from_dict(data["target"]),
            np.array(data["samples"], dtype=float),
            ActivationSpec.from_dict(data.get("activation", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "LossContext":
        return cls.from_dict(json.loads(text))


def _features(theta, ctx: LossContext):
    a, W = unpack(theta, ctx.d)
    Z = ctx.samples @ W.T
    return a, W, Z


def residuals(theta, ctx: LossContext) -> np.ndarray:
    a, _, Z = _features(theta, ctx)
    r = act_mod.eval(ctx.activation, Z) @ a - ctx.labels
    if not np.all(np.isfinite(r)):
        raise NonFiniteError("residuals are not finite")
    return r


def loss(theta, ctx: LossContext) -> float:
    r = residuals(theta, ctx)
    return float(r @ r)


def grad(theta, ctx: LossContext) -> np.ndarray:
    """+grad R: dR/da_k = 2 sum r_i s(w_k.x_i), dR/dw_k = 2 a_k sum r_i s'(w_k.x_i) x_i."""
    a, _, Z = _features(theta, ctx)
    S = act_mod.eval(ctx.activation, Z)
    r = S @ a - ctx.labels
    ga = 2.0 * (r @ S)
    gw = 2.0 * a[:, None] * ((act_mod.d1(ctx.activation, Z) * r[:, None]).T @ ctx.samples)
    out = np.column_stack([ga, gw]).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("gradient is not finite")
    return out


def jacobian(theta, ctx: LossContext) -> np.ndarray:
    """Rows h_i = grad_theta g(theta, x_i); shape (n, (d+1)m)."""
    a, _, Z = _features(theta, ctx)
    n, d = ctx.samples.shape
    S = act_mod.eval(ctx.activation, Z)
    D = act_mod.d1(ctx.activation, Z) * a[None, :]
    J = np.empty((n, Z.shape[1], d + 1))
    J[:, :, 0] = S
    J[:, :, 1:] = D[:, :, None] * ctx.samples[:, None, :]
    return J.reshape(n, -1)


def hessian_gn(theta, ctx: LossContext) -> np.ndarray:
    """Gauss-Newton part 2 sum_i h_i h_i^T."""
    J = jacobian(theta, ctx)
    H = 2.0 * J.T @ J
    return 0.5 * (H + H.T)


def hessian_full(theta, ctx: LossContext, symmetrize: bool = True) -> np.ndarray:
    """2 sum_i [h_i h_i^T + r_i Hess g_i]."""
    a, _, Z = _features(theta, ctx)
    X = ctx.samples
    n, d = X.shape
    m = a.size
    S = act_mod.eval(ctx.activation, Z)
    r = S @ a - ctx.labels
    J = jacobian(theta, ctx)
    H = 2.0 * J.T @ J
    S1 = act_mod.d1(ctx.activation, Z)
    S2 = act_mod.d2(ctx.activation, Z)
    # Hess g_i is block diagonal over neurons: d/da_k d/dw_k = s' x, d2/dw_k^2 = a_k s'' x x^T
    cross = 2.0 * (S1 * r[:, None]).T @ X  # (m, d)
    curv = 2.0 * np.einsum("ik,ip,iq->kpq", S2 * r[:, None], X, X) * a[:, None, None]
    H4 = H.reshape(m, d + 1, m, d + 1)
    for k in range(m):
        H4[k, 0, k, 1:] += cross[k]
        H4[k, 1:, k, 0] += cross[k]
        H4[k, 1:, k, 1:] += curv[k]
    H = H4.reshape(m * (d + 1), m * (d + 1))
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def random_samples(n: int, d: int, rng, box: float = SAMPLE_BOX) -> np.ndarray:
    return rng.uniform(-box, box, size=(n, d))
