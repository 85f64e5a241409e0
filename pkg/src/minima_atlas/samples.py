"""Separating sample sets: neuron-value (Type-I) and value-plus-derivative (Type-II) rank tests,
inductive constructions, and random perturbations."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import activation as act_mod
from .activation import EXPONENTIAL, ActivationSpec
from .network import SAMPLE_BOX

RANK_TOL = 1e-8
MIN_SEPARATION = 1e-12
STALL = 0.9
LINE_POINTS = 65
EPS_GRID = np.concatenate([-(2.0 ** np.arange(3, -11, -1)), 2.0 ** np.arange(-10, 4)])


class Provenance(str, enum.Enum):
    RANDOM = "random"
    CONSTRUCTED_TYPE_I = "constructed_type1"
    CONSTRUCTED_TYPE_II = "constructed_type2"
    PERTURBED = "perturbed"


class ConstructionError(RuntimeError):
    def __init__(self, message, best_margin):
        super().__init__(f"{message} (best margin {best_margin:.3e})")
        self.best_margin = best_margin


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    seed: Optional[int] = None
    provenance: Provenance = Provenance.RANDOM
    base_seed: Optional[int] = None
    eps: Optional[float] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def distinct(self) -> bool:
        return self.min_distance > MIN_SEPARATION

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def min_distance(self) -> float:
        if self.n < 2:
            return float("inf")
        diff = self.points[:, None, :] - self.points[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        return float(dist[np.triu_indices(self.n, 1)].min())

    def head(self, n: int) -> "SampleSet":
        return SampleSet(self.points[:n], self.seed, self.provenance, self.base_seed, self.eps)

    def to_dict(self) -> dict:
        prov = {"kind": self.provenance.value}
        if self.provenance is Provenance.PERTURBED:
            prov.update(base_seed=self.base_seed, eps=self.eps)
        return {"points": self.points.tolist(), "seed": self.seed, "provenance": prov}

    @classmethod
    def from_dict(cls, data: dict) -> "SampleSet":
        prov = data.get("provenance", {"kind": "random"})
        if isinstance(prov, str):
            prov = {"kind": prov}
        return cls(np.array(data["points"], dtype=float), data.get("seed"), Provenance(prov["kind"]),
                   prov.get("base_seed"), prov.get("eps"))


def random_sample_set(n: int, d: int, seed: int, box: float = SAMPLE_BOX) -> SampleSet:
    rng = np.random.default_rng(seed)
    return SampleSet(rng.uniform(-box, box, size=(n, d)), seed, Provenance.RANDOM)


@dataclass(frozen=True)
class RankReport:
    rows: int
    cols: int
    singular_values: np.ndarray
    numerical_rank: int
    tolerance: float
    margin: float

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "singular_values": [float(s) for s in self.singular_values],
            "numerical_rank": self.numerical_rank,
            "tolerance": self.tolerance,
            "margin": self.margin,
        }


def rank_report(M, tol: float = RANK_TOL) -> RankReport:
    """Numerical rank as the count of singular values above tol * s_max."""
    if not tol > 0:
        raise ValueError("rank tolerance must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    s = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(0)
    smax = s[0] if s.size else 0.0
    keep = s > tol * smax if smax > 0 else np.zeros(s.size, dtype=bool)
    rank = int(keep.sum())
    margin = float(s[rank - 1] / smax) if rank else 0.0
    return RankReport(M.shape[0], M.shape[1], s, rank, tol, margin)


def _points(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.points
    X = np.asarray(samples, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def _weights(weights, d: Optional[int] = None) -> np.ndarray:
    W = np.asarray(weights, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, d or 1)
    return W


def min_weight_gap(weights) -> float:
    W = _weights(weights)
    if W.shape[0] < 2:
        return float("inf")
    dist = np.linalg.norm(W[:, None, :] - W[None, :, :], axis=-1)
    return float(dist[np.triu_indices(W.shape[0], 1)].min())


def type1_matrix(weights, samples, act: ActivationSpec = EXPONENTIAL) -> np.ndarray:
    """n x r matrix with entries sigma(w_k . x_i)."""
    X = _points(samples)
    W = _weights(weights, X.shape[1])
    return act_mod.eval(act, X @ W.T)


def type2_matrix(weights, samples, act: ActivationSpec = EXPONENTIAL) -> np.ndarray:
    """n x (d+1)r matrix [sigma(w_k . x_i) ..., sigma'(w_k . x_i) x_i^T ...]."""
    X = _points(samples)
    W = _weights(weights, X.shape[1])
    Z = X @ W.T
    deriv = act_mod.d1(act, Z)[:, :, None] * X[:, None, :]
    return np.hstack([act_mod.eval(act, Z), deriv.reshape(X.shape[0], -1)])


def is_type1(weights, samples, act: ActivationSpec = EXPONENTIAL, tol: float = RANK_TOL):
    """True iff the neuron-value matrix has full column rank r."""
    M = type1_matrix(weights, samples, act)
    n, r = M.shape
    if n < r:
        raise ValueError(f"need at least r={r} samples, got {n}")
    rep = rank_report(M, tol)
    return rep.numerical_rank == r, rep


def is_type2(weights, samples, act: ActivationSpec = EXPONENTIAL, tol: float = RANK_TOL,
             m: Optional[int] = None):
    """True iff Type-I holds and the value-plus-derivative matrix has rank min(n, (d+1)r).

    The admissible sample count is r <= n <= (d+1)m, with m the model width
    (defaults to r).
    """
    X = _points(samples)
    W = _weights(weights, X.shape[1])
    n, d = X.shape
    r = W.shape[0]
    m = r if m is None else m
    if m < r:
        raise ValueError("model width m must be at least the number of weights")
    if not r <= n <= (d + 1) * m:
        raise ValueError(f"need r <= n <= (d+1)m, got r={r}, n={n}, (d+1)m={(d + 1) * m}")
    ok1, _ = is_type1(W, X, act, tol)
    rep = rank_report(type2_matrix(W, X, act), tol)
    return ok1 and rep.numerical_rank == min(n, (d + 1) * r), rep


def _random_direction(W: np.ndarray, rng, min_gap: float = 1e-6, max_tries: int = 1000):
    d = W.shape[1]
    for _ in range(max_tries):
        e = rng.standard_normal(d)
        e /= np.linalg.norm(e)
        p = np.sort(W @ e)
        if p.size < 2 or np.min(np.diff(p)) > min_gap:
            return e
    raise ConstructionError("no direction with distinct projections", 0.0)


def _orth_fraction(rows: np.ndarray, basis: Optional[np.ndarray]) -> np.ndarray:
    """Relative norm of each row's component orthogonal to span(basis rows)."""
    norms = np.linalg.norm(rows, axis=1)
    resid = rows if basis is None else rows - (rows @ basis.T) @ basis
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(norms > 0, np.linalg.norm(resid, axis=1) / norms, 0.0)
    return frac


def _line_search(row_fn, e, basis, box, used):
    reach = box / np.max(np.abs(e))
    # geometric grid for small steps plus a uniform grid that reaches the box faces
    eps = np.unique(np.concatenate([EPS_GRID[np.abs(EPS_GRID) <= reach], np.linspace(-reach, reach, LINE_POINTS)]))
    cand = eps[:, None] * e[None, :]
    if used:
        taken = np.array(used)
        fresh = np.min(np.linalg.norm(cand[:, None, :] - taken[None, :, :], axis=-1), axis=1) > 1e-9
        cand, eps = cand[fresh], eps[fresh]
    score = _orth_fraction(row_fn(cand), basis)
    best = score.max()
    # among near-ties prefer the smallest |eps| to keep feature values moderate
    ties = np.flatnonzero(score >= best * (1 - 1e-9))
    k = ties[np.argmin(np.abs(eps[ties]))]
    return cand[k], best


def _span_basis(rows: list) -> np.ndarray:
    q, _ = np.linalg.qr(np.array(rows).T)
    return q.T


def _construct(weights, act, rng, row_fn, active, checker, provenance, seed, box, tol,
               stall, redraws, max_restarts):
    """Greedy inductive build: point i is scored on the rows of the first active(i)
    weights, so every prefix is separating for the matching prefix of weights."""
    W = _weights(weights)
    if min_weight_gap(W) <= 0:
        raise ValueError("weights must be pairwise distinct")
    count = active.count
    best_margin = 0.0
    for _ in range(max_restarts):
        e = _random_direction(W, rng)
        pts = []
        for i in range(count):
            k = active(i)
            rows = lambda X, k=k: row_fn(W[:k], X)
            basis = _span_basis([rows(p[None, :])[0] for p in pts]) if pts else None
            x, score = _line_search(rows, e, basis, box, pts)
            tries = 0
            while score < stall and tries < redraws:
                e_new = _random_direction(W, rng)
                x_new, s_new = _line_search(rows, e_new, basis, box, pts)
                if s_new > score:
                    x, score, e = x_new, s_new, e_new
                tries += 1
            pts.append(x)
        X = np.array(pts)
        ok, rep = checker(W, X)
        best_margin = max(best_margin, rep.margin)
        if ok and rep.margin > tol:
            return SampleSet(X, seed, provenance)
    raise ConstructionError("construction did not reach the required margin", best_margin)


class _Schedule:
    """Number of weights in play for the i-th point: one more weight every `per` points."""

    def __init__(self, per: int, count: int):
        self.per, self.count = per, count

    def __call__(self, i: int) -> int:
        return i // self.per + 1


def construct_type1(weights, act: ActivationSpec = EXPONENTIAL, rng=None, seed: Optional[int] = None,
                    box: float = SAMPLE_BOX, tol: float = RANK_TOL, max_restarts: int = 20) -> SampleSet:
    """r samples on lines x = eps * e; the i-th maximises its row's component orthogonal
    to the earlier rows, restricted to the first i+1 weights."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    W = _weights(weights)
    return _construct(W, act, rng, lambda Wk, X: type1_matrix(Wk, X, act), _Schedule(1, W.shape[0]),
                      lambda W_, X: is_type1(W_, X, act, tol), Provenance.CONSTRUCTED_TYPE_I, seed,
                      box, tol, stall=0.0, redraws=0, max_restarts=max_restarts)


def construct_type2(weights, act: ActivationSpec = EXPONENTIAL, rng=None, seed: Optional[int] = None,
                    box: float = SAMPLE_BOX, tol: float = RANK_TOL, stall: float = STALL,
                    redraws: int = 20, max_restarts: int = 20) -> SampleSet:
    """(d+1)r samples, d+1 per weight in order; the line direction is re-drawn whenever
    the best orthogonal fraction along it falls below `stall`."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    W = _weights(weights)
    per = W.shape[1] + 1
    return _construct(W, act, rng, lambda Wk, X: type2_matrix(Wk, X, act), _Schedule(per, per * W.shape[0]),
                      lambda W_, X: is_type2(W_, X, act, tol), Provenance.CONSTRUCTED_TYPE_II, seed,
                      box, tol, stall=stall, redraws=redraws, max_restarts=max_restarts)


def perturb_samples(samples: SampleSet, eps: float, rng=None, seed: Optional[int] = None) -> SampleSet:
    """Move each point by an independent uniform vector from the ball of radius eps."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(seed)
    X = samples.points
    if eps == 0:
        shifted = X.copy()
    else:
        n, d = X.shape
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        radius = eps * rng.uniform(size=(n, 1)) ** (1.0 / d)
        shifted = X + radius * v
    out = SampleSet(shifted, seed, Provenance.PERTURBED, base_seed=samples.seed, eps=float(eps))
    if eps > 0 and not out.distinct:
        raise ValueError("perturbed points are not distinct")
    return out
