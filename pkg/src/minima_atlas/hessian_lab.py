"""Hessian rank at zero-loss branch points: rank bounds, Morse-Bott test,
separation probes, threshold sweeps and the isolated-minimum check.

Ranks are read off the singular values of the sample Jacobian J. Since the
Gauss-Newton Hessian is 2 J^T J, its eigenvalues are 2 s^2 and the relative
cut is applied on the s scale, where rounding noise sits near 1e-16.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .branches import (LOSS_TOL, Branch, Outcome, branch_classes, classify, is_generic, sample_point)
from .flow import PROBE_FLOW, TAIL_FLOW, FlowOptions, Terminal, integrate, uniform_ball
from .network import LossContext, TargetNetwork, jacobian, loss, width
from .samples import RANK_TOL, ConstructionError, SampleSet, construct_type2, is_type2, perturb_samples

REFERENCE_GAP = 0.5
PERTURB_EPS = 1e-2
SEPARATION_RADIUS = 0.05
ISOLATION_RADIUS = 0.05
ISOLATION_TOL = 1e-6
FUNCTION_TOL = 1e-6
# smallest nonzero GN eigenvalue required of flow start points (rate ~ eigenvalue)
CONDITION_FLOOR = 1e-3
COARSE_CLUSTER_TOLS = (1e-5, 1e-4, 1e-3)
SWEEP_COLUMNS = ("m", "m0", "d", "n", "r", "P", "l", "seed", "rank", "codim", "morse_bott", "separated",
                 "witness_class")


class MembershipError(ValueError):
    """The point is not a zero-loss point of the stated branch."""


@dataclass
class HessianReport:
    branch: Branch
    point: np.ndarray
    n: int
    rank: int
    singular_values: np.ndarray  # of the Gauss-Newton Hessian, descending
    lower_bound: int
    upper_bound: int
    codim: int
    morse_bott: bool
    tolerance: float
    generic: bool = True

    @property
    def cap(self) -> int:
        """min(n, upper_bound, (d+1)m): the largest rank the bounds allow."""
        return min(self.n, self.upper_bound, self.point.size)

    @property
    def bounds_hold(self) -> bool:
        return self.lower_bound <= self.rank <= self.cap

    @property
    def rank_equals_n(self) -> bool:
        return self.rank == self.n

    def to_dict(self) -> dict:
        return {
            "branch": self.branch.to_dict(),
            "point": self.point.tolist(),
            "n": self.n,
            "rank": self.rank,
            "singular_values": self.singular_values.tolist(),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "codim": self.codim,
            "morse_bott": self.morse_bott,
            "tolerance": self.tolerance,
            "generic": self.generic,
        }


def rank_bounds(branch: Branch) -> tuple:
    """(r, r + (r - l) d)."""
    return branch.r, branch.r + (branch.r - branch.deficient) * branch.d


def gn_spectrum(theta, ctx: LossContext, tol: float = RANK_TOL) -> tuple:
    """Numerical rank and descending eigenvalues of 2 J^T J via the SVD of J."""
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    s = np.linalg.svd(jacobian(theta, ctx), compute_uv=False)
    full = np.zeros(np.size(theta))
    full[: s.size] = s
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return rank, 2.0 * full ** 2


def analyze_point(theta, branch: Branch, ctx: LossContext, tol: float = RANK_TOL,
                  loss_tol: float = LOSS_TOL) -> HessianReport:
    """Rank of the Hessian at a zero-loss branch point, with its bounds and the Morse-Bott flag."""
    theta = np.asarray(theta, dtype=float)
    verdict = classify(theta, ctx.target, act=ctx.activation)
    if not verdict.on_branch or not verdict.branch.same_as(branch):
        raise MembershipError(f"point does not classify onto {branch} ({verdict.outcome.value})")
    L = loss(theta, ctx)
    if L > loss_tol:
        raise MembershipError(f"loss {L:.3e} exceeds {loss_tol:.1e}")
    rank, sv = gn_spectrum(theta, ctx, tol)
    lower, upper = rank_bounds(branch)
    return HessianReport(branch, theta, ctx.n, rank, sv, lower, upper, branch.codim, rank == branch.codim, tol,
                         is_generic(theta, branch, ctx.target))


def predicted_morse_bott(branch: Branch, n: int) -> bool:
    """Morse-Bott is expected exactly when l = 2r - m - m0 and n reaches the codimension."""
    return branch.deficient == 2 * branch.r - branch.m - branch.m0 and n >= branch.codim


def predicted_separation(branch: Branch, n: int) -> Optional[bool]:
    """True from the codimension on, False up to (d+1) m0, None in between."""
    if n >= branch.codim:
        return True
    if n <= (branch.d + 1) * branch.m0:
        return False
    return None


# ---------------------------------------------------------------- sample plans

def reference_weights(target: TargetNetwork, m: int, rng, gap: float = REFERENCE_GAP,
                      box: float = 2.0, max_tries: int = 10000) -> np.ndarray:
    """Target inner weights followed by m - m0 fresh ones, all pairwise >= gap apart."""
    W = [w for w in target.bar_w]
    while len(W) < m:
        for _ in range(max_tries):
            u = rng.uniform(-box, box, size=target.d)
            if all(np.linalg.norm(u - w) >= gap for w in W):
                break
        else:
            raise ValueError("could not place reference weights with the requested gap")
        W.append(u)
    return np.array(W)


def study_samples(target: TargetNetwork, m: int, seed: int, eps: float = PERTURB_EPS,
                  gap: float = REFERENCE_GAP, attempts: int = 10) -> SampleSet:
    """(d+1) m Type-II samples for reference weights of width m, optionally perturbed by eps.

    Prefixes of the result serve every n up to (d+1) m. Fresh reference weights
    are re-drawn from the same seeded stream when a construction falls short.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(attempts):
        try:
            ss = construct_type2(reference_weights(target, m, rng, gap), rng=rng, seed=seed)
            break
        except ConstructionError:
            if attempt == attempts - 1:
                raise
    return perturb_samples(ss, eps, rng=rng, seed=seed) if eps > 0 else ss


def conditioned_point(branch: Branch, ctx: LossContext, rng, lam_floor: float = CONDITION_FLOOR,
                      max_draws: int = 1000, tol: float = RANK_TOL) -> np.ndarray:
    """Generic branch point whose smallest nonzero GN eigenvalue is at least lam_floor.

    Flows near the point converge at a rate of that eigenvalue, so the floor
    bounds the time needed to resolve a tail."""
    for _ in range(max_draws):
        theta = sample_point(branch, ctx.target, rng)
        rank, lam = gn_spectrum(theta, ctx, tol)
        if rank and lam[rank - 1] >= lam_floor:
            return theta
    raise ValueError(f"no point of {branch} with smallest nonzero eigenvalue >= {lam_floor} in {max_draws} draws")


# ---------------------------------------------------------------- rank = n

@dataclass
class RankCheck:
    holds: bool
    rank: int
    n: int
    generic: bool

    def __bool__(self):
        return self.holds


def rank_equals_n_check(branch: Branch, ctx: LossContext, rng=None, theta=None,
                        tol: float = RANK_TOL) -> RankCheck:
    """Whether the rank equals n at a (by default freshly sampled generic) branch point."""
    _, upper = rank_bounds(branch)
    if ctx.n > upper:
        raise ValueError(f"needs n <= r + (r - l) d = {upper}, got n = {ctx.n}")
    if theta is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        theta = sample_point(branch, ctx.target, rng)
    rank, _ = gn_spectrum(theta, ctx, tol)
    return RankCheck(rank == ctx.n, rank, ctx.n, is_generic(theta, branch, ctx.target))


# ---------------------------------------------------------------- separation

class WitnessClass(str, enum.Enum):
    NONE = ""
    OFF_QSTAR = "off_qstar"
    OTHER_BRANCH = "other_branch"


@dataclass
class SeparationReport:
    separated: bool
    center: np.ndarray
    trials: int
    zeros: int = 0
    on_branch: int = 0
    other_branch: int = 0
    off_qstar: int = 0
    ambiguous: int = 0
    unresolved: int = 0
    non_converged: int = 0
    coarse: int = 0
    witness: Optional[np.ndarray] = None
    witness_class: WitnessClass = WitnessClass.NONE
    witness_residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "separated": self.separated,
            "center": self.center.tolist(),
            "trials": self.trials,
            "zeros": self.zeros,
            "on_branch": self.on_branch,
            "other_branch": self.other_branch,
            "off_qstar": self.off_qstar,
            "ambiguous": self.ambiguous,
            "unresolved": self.unresolved,
            "non_converged": self.non_converged,
            "coarse": self.coarse,
            "witness": None if self.witness is None else self.witness.tolist(),
            "witness_class": self.witness_class.value,
            "witness_residual": self.witness_residual,
        }


def classify_zero(theta, ctx: LossContext, function_tol: float = FUNCTION_TOL) -> tuple:
    """Classify a zero of the empirical loss; returns (verdict, used_coarse_clustering).

    Weights that merge only at a polynomial rate stall around 1e-5 apart in double
    precision. When such a point still matches the target function to function_tol
    on the probe grid, the branch is read from the first coarser clustering that resolves.
    """
    v = classify(theta, ctx.target, act=ctx.activation)
    if v.on_branch or v.residual > function_tol:
        return v, False
    for tol in COARSE_CLUSTER_TOLS:
        vc = classify(theta, ctx.target, cluster_tol=tol, act=ctx.activation)
        if vc.on_branch:
            return vc, True
    return v, False


def separation_probe(branch: Branch, ctx: LossContext, radius: float = SEPARATION_RADIUS, trials: int = 50,
                     rng=None, theta=None, opts: FlowOptions = PROBE_FLOW,
                     loss_tol: float = LOSS_TOL, function_tol: float = FUNCTION_TOL) -> SeparationReport:
    """Flow from `trials` uniform inits around a branch point and classify every zero reached.

    Separated when every zero is on the same branch. A zero off the target set
    (function mismatch above function_tol on the probe grid) is the preferred
    witness, otherwise one on another branch. Zeros that match the function but
    no branch are counted as unresolved and never serve as witnesses.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    center = sample_point(branch, ctx.target, rng) if theta is None else np.asarray(theta, dtype=float)
    inits = [uniform_ball(center, radius, rng) for _ in range(trials)]
    rep = SeparationReport(True, center, trials)
    for y0 in inits:
        tr = integrate(y0, ctx, opts)
        if tr.terminal is Terminal.DIVERGED or tr.final_loss > loss_tol:
            rep.non_converged += 1
            continue
        rep.zeros += 1
        v, coarse = classify_zero(tr.theta_lim, ctx, function_tol)
        rep.coarse += coarse
        if v.outcome is Outcome.AMBIGUOUS:
            rep.ambiguous += 1
            continue
        if v.outcome is Outcome.NOT_IN_QSTAR and v.residual <= function_tol:
            # realises the target function but the weights have not merged onto any branch yet
            rep.unresolved += 1
            continue
        if v.outcome is Outcome.NOT_IN_QSTAR:
            rep.off_qstar += 1
            if rep.witness_class is not WitnessClass.OFF_QSTAR or v.residual > rep.witness_residual:
                rep.witness, rep.witness_class, rep.witness_residual = tr.theta_lim, WitnessClass.OFF_QSTAR, v.residual
        elif v.branch.same_as(branch):
            rep.on_branch += 1
        else:
            rep.other_branch += 1
            if rep.witness is None:
                rep.witness, rep.witness_class = tr.theta_lim, WitnessClass.OTHER_BRANCH
    rep.separated = rep.witness is None
    return rep


# ---------------------------------------------------------------- sweeps

def turning_points(m: int, m0: int, d: int) -> list:
    """(d+1) m0, every branch codimension r + (m + m0 - r) d, and (d+1) m."""
    pts = {(d + 1) * m0, (d + 1) * m}
    pts.update(r + (m + m0 - r) * d for r in range(m0, m + 1))
    return sorted(pts)


def sweep_cell(m: int, m0: int, d: int, n: int, branch: Branch, ctx: LossContext, seed: int,
               probe_trials: int = 0, radius: float = SEPARATION_RADIUS,
               opts: FlowOptions = PROBE_FLOW, tol: float = RANK_TOL) -> dict:
    """One sweep row: rank data at a seeded generic point, plus a separation verdict when probing."""
    rng = np.random.default_rng([seed, n, branch.r] + list(branch.partition.q))
    theta = sample_point(branch, ctx.target, rng)
    rank, _ = gn_spectrum(theta, ctx, tol)
    row = {
        "m": m, "m0": m0, "d": d, "n": n, "r": branch.r, "P": str(branch.partition), "l": branch.deficient,
        "seed": seed, "rank": rank, "codim": branch.codim, "morse_bott": rank == branch.codim,
        "separated": "", "witness_class": "",
    }
    if probe_trials:
        rep = separation_probe(branch, ctx, radius, probe_trials, rng, theta=theta, opts=opts)
        row["separated"] = rep.separated
        row["witness_class"] = rep.witness_class.value
    return row


def threshold_sweep(m: int, m0: int, d: int, n_list: Sequence[int], ctx_factory: Callable[[int], LossContext],
                    seeds: Sequence[int] = (0,), probe_trials: int = 0, radius: float = SEPARATION_RADIUS,
                    opts: FlowOptions = PROBE_FLOW, tol: float = RANK_TOL, mapper=map) -> list:
    """Rows over n, branch classes and seeds, in that order. `mapper` may be a parallel map
    that preserves order; rows are the same either way."""
    cells = []
    for n in n_list:
        ctx = ctx_factory(n)
        for b in branch_classes(m, m0, d):
            for s in seeds:
                cells.append((m, m0, d, n, b, ctx, s, probe_trials, radius, opts, tol))
    return list(mapper(_run_cell, cells))


def _run_cell(args):
    return sweep_cell(*args)


# ---------------------------------------------------------------- isolated minimum

@dataclass
class IsolationReport:
    isolated: bool
    trials: int
    worst_distance: float
    failures: int

    def __bool__(self):
        return self.isolated

    def to_dict(self) -> dict:
        return {"isolated": self.isolated, "trials": self.trials, "worst_distance": self.worst_distance,
                "failures": self.failures}


def isolated_minimum_check(target: TargetNetwork, ctx: LossContext, center=None, trials: int = 200,
                           radius: float = ISOLATION_RADIUS, tol: float = ISOLATION_TOL, rng=None,
                           opts: FlowOptions = TAIL_FLOW) -> IsolationReport:
    """Flows from a ball around the width-m0 target parameters must return to that very point.

    A flow stops about grad_tol / lambda_min short of its limit, so the default
    stopping rule is tight enough for small eigenvalues to stay under `tol`.
    """
    center = target.theta if center is None else np.asarray(center, dtype=float)
    if width(center, target.d) != target.m0:
        raise ValueError("the isolated-minimum check needs model width m = m0")
    if ctx.target is not target and not np.array_equal(ctx.target.theta, target.theta):
        raise ValueError("context was built for a different target")
    need = (target.d + 1) * target.m0
    if ctx.n < need or not is_type2(target.bar_w, ctx.samples[:need], ctx.activation)[0]:
        raise ValueError("needs n >= (d+1) m0 Type-II samples for the target weights")
    rng = rng if rng is not None else np.random.default_rng(0)
    inits = [uniform_ball(center, radius, rng) for _ in range(trials)]
    worst, failures = 0.0, 0
    for y0 in inits:
        tr = integrate(y0, ctx, opts)
        dist = float(np.linalg.norm(tr.theta_lim - center)) if tr.terminal is not Terminal.DIVERGED else np.inf
        worst = max(worst, dist)
        failures += dist > tol
    return IsolationReport(failures == 0, trials, worst, failures)
