"""Gradient flow theta' = -grad R: integration, convergence, rates, limit-point
subspace split, direction ratios, loss decay and stability probes.

Any object with loss(theta), grad(theta) and hessian(theta) can be integrated;
LossContext and the small fixtures below qualify.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate as sp_int
from scipy.optimize import nnls

from .activation import NonFiniteError
from .branches import LOSS_TOL, Branch, probe_points, tangent_basis
from .network import LossContext, forward, jacobian
from .samples import RANK_TOL

TAU_S = RANK_TOL ** 2
DENOM_FLOOR = 1e-14
SOLVERS = {
    "RK45": sp_int.RK45,
    "DOP853": sp_int.DOP853,
    "LSODA": sp_int.LSODA,
    "BDF": sp_int.BDF,
    "Radau": sp_int.Radau,
}
IMPLICIT = {"LSODA", "BDF", "Radau"}
MAX_SUBDIVISION = 50


@dataclass(frozen=True)
class FlowOptions:
    grad_tol: float = 1e-10
    t_max: float = 1e6
    rtol: float = 1e-10
    atol: float = 1e-12
    method: str = "RK45"
    diverge_norm: float = 1e6
    t_first: float = 1e-3
    t_per_decade: int = 20
    loss_per_decade: int = 20
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.method not in SOLVERS:
            raise ValueError(f"unknown method {self.method}; choose from {sorted(SOLVERS)}")
        for name in ("t_max", "rtol", "atol", "diverge_norm", "t_first"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_tol < 0:
            raise ValueError("grad_tol must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# Long-horizon stiff settings for probes that must resolve slow (quartic) tails.
PROBE_FLOW = FlowOptions(method="LSODA", grad_tol=0.0, t_max=1e16)
# Tight settings for tail fits: second-order components near the limit sit far below 1e-12.
TAIL_FLOW = FlowOptions(method="LSODA", grad_tol=1e-13, rtol=1e-13, atol=1e-15)


class Terminal(str, enum.Enum):
    CONVERGED = "converged"
    MAX_TIME = "max_time"
    DIVERGED = "diverged"
    STEP_FAILURE = "step_failure"


@dataclass
class FlowTrace:
    times: np.ndarray
    states: np.ndarray
    losses: np.ndarray
    grad_norms: np.ndarray
    terminal: Terminal
    stats: dict = field(default_factory=dict)

    @property
    def theta_lim(self) -> np.ndarray:
        return self.states[-1]

    @property
    def converged(self) -> bool:
        return self.terminal is Terminal.CONVERGED

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def distances(self, theta_lim=None) -> np.ndarray:
        ref = self.theta_lim if theta_lim is None else np.asarray(theta_lim)
        return np.linalg.norm(self.states - ref, axis=1)

    def csv_rows(self, split: Optional["SubspaceSplit"] = None, theta_lim=None) -> list:
        ref = self.theta_lim if theta_lim is None else np.asarray(theta_lim)
        rows = []
        for t, y, L, g in zip(self.times, self.states, self.losses, self.grad_norms):
            v = y - ref
            row = {"t": t, "loss": L, "grad_norm": g, "dist_to_lim": float(np.linalg.norm(v))}
            if split is not None:
                row.update(zip(("pi_s", "pi_c", "pi_p"), split.component_norms(v)))
            rows.append(row)
        return rows


class _Recorder:
    def __init__(self, objective):
        self.objective = objective
        self.t, self.y, self.L, self.g = [], [], [], []

    def add(self, t, y):
        if self.t and t <= self.t[-1]:
            return self.L[-1], self.g[-1]
        L = float(self.objective.loss(y))
        g = float(np.linalg.norm(self.objective.grad(y)))
        self.t.append(float(t))
        self.y.append(np.array(y, dtype=float))
        self.L.append(L)
        self.g.append(g)
        return L, g


def integrate(theta0, objective, opts: FlowOptions = FlowOptions()) -> FlowTrace:
    """Integrate the negative gradient field from theta0 with an adaptive solver.

    Checkpoints are stored on a geometric time grid and whenever the loss
    crosses a geometric level, so tails have uniform log-scale coverage.
    """
    y0 = np.array(theta0, dtype=float)
    rec = _Recorder(objective)

    def field_(t, y):
        return -objective.grad(y)

    kwargs = dict(rtol=opts.rtol, atol=opts.atol)
    if opts.method in IMPLICIT and hasattr(objective, "hessian"):
        kwargs["jac"] = lambda t, y: -objective.hessian(y)
    stats = {"method": opts.method, "steps": 0, "message": "", "atol": opts.atol}

    def finish(terminal):
        stats["nfev"] = getattr(solver, "nfev", 0) if solver is not None else 0
        stats["njev"] = getattr(solver, "njev", 0) if solver is not None else 0
        return FlowTrace(np.array(rec.t), np.array(rec.y), np.array(rec.L), np.array(rec.g), terminal, stats)

    solver = None
    try:
        L, g = rec.add(0.0, y0)
    except NonFiniteError as exc:
        stats["message"] = str(exc)
        raise
    if g <= opts.grad_tol:
        return finish(Terminal.CONVERGED)

    decades = np.log10(opts.t_max / opts.t_first)
    grid = opts.t_first * 10.0 ** (np.arange(int(np.ceil(decades * opts.t_per_decade)) + 1) / opts.t_per_decade)
    grid = grid[grid < opts.t_max]
    gi = 0
    level = 10.0 ** (np.floor(np.log10(L) * opts.loss_per_decade) / opts.loss_per_decade) if L > 0 else 0.0
    level_step = 10.0 ** (-1.0 / opts.loss_per_decade)

    solver = SOLVERS[opts.method](field_, 0.0, y0, opts.t_max, **kwargs)
    try:
        while True:
            t_old = solver.t
            try:
                msg = solver.step()
            except NonFiniteError as exc:
                # a trial stage overflowed; the last accepted state is still finite
                stats["message"] = f"trial step overflow: {exc}"
                rec.add(solver.t, solver.y)
                return finish(Terminal.STEP_FAILURE)
            stats["steps"] += 1
            if solver.status == "failed":
                stats["message"] = str(msg)
                return finish(Terminal.STEP_FAILURE)
            t_new, y_new = solver.t, solver.y
            if gi < grid.size and grid[gi] <= t_new:
                dense = solver.dense_output()
                while gi < grid.size and grid[gi] <= t_new:
                    if grid[gi] > t_old:
                        rec.add(grid[gi], dense(grid[gi]))
                    gi += 1
            L = float(objective.loss(y_new))
            g = float(np.linalg.norm(objective.grad(y_new)))
            if np.linalg.norm(y_new) > opts.diverge_norm:
                rec.add(t_new, y_new)
                return finish(Terminal.DIVERGED)
            if g <= opts.grad_tol:
                rec.add(t_new, y_new)
                return finish(Terminal.CONVERGED)
            if L <= level:
                crossed = 0
                while level > 0 and L <= level:
                    level *= level_step
                    crossed += 1
                # one checkpoint per crossed loss level, spread evenly over the step
                k = min(crossed, MAX_SUBDIVISION)
                if k > 1:
                    dense = solver.dense_output()
                    for j in range(1, k):
                        tj = t_old + (t_new - t_old) * j / k
                        rec.add(tj, dense(tj))
                rec.add(t_new, y_new)
            if solver.status == "finished":
                rec.add(t_new, y_new)
                return finish(Terminal.MAX_TIME)
            if stats["steps"] >= opts.max_steps:
                rec.add(t_new, y_new)
                stats["message"] = "step budget exhausted"
                return finish(Terminal.MAX_TIME)
    except NonFiniteError as exc:
        stats["message"] = str(exc)
        return finish(Terminal.DIVERGED)


# ---------------------------------------------------------------- fixtures

class QuadraticFixture:
    """R = |theta|^2; the flow is theta0 exp(-2t)."""

    def loss(self, y):
        return float(np.dot(y, y))

    def grad(self, y):
        return 2.0 * np.asarray(y, dtype=float)

    def hessian(self, y):
        return 2.0 * np.eye(np.size(y))


class CubicFixture:
    """R = x^4 / 4 in one variable; the flow is x0 / sqrt(1 + 2 x0^2 t)."""

    def loss(self, y):
        return float(y[0] ** 4 / 4)

    def grad(self, y):
        return np.array([y[0] ** 3])

    def hessian(self, y):
        return np.array([[3 * y[0] ** 2]])


class SplitFixture:
    """R(x, y, z) = x^2 + y^4, flat in z."""

    def loss(self, v):
        return float(v[0] ** 2 + v[1] ** 4)

    def grad(self, v):
        return np.array([2 * v[0], 4 * v[1] ** 3, 0.0])

    def hessian(self, v):
        return np.diag([2.0, 12 * v[1] ** 2, 0.0])

    def tangent(self, v=None):
        return np.array([[0.0], [0.0], [1.0]])


# ---------------------------------------------------------------- subspace split

class AmbiguousSplitError(ValueError):
    pass


@dataclass
class SubspaceSplit:
    at: np.ndarray
    basis_s: np.ndarray
    basis_c: np.ndarray
    basis_p: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dims(self) -> tuple:
        return self.basis_s.shape[1], self.basis_c.shape[1], self.basis_p.shape[1]

    def component_norms(self, v) -> tuple:
        return tuple(float(np.linalg.norm(B.T @ v)) for B in (self.basis_s, self.basis_c, self.basis_p))


def _orthonormal(M, tol=1e-10):
    if M.shape[1] == 0:
        return M
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    return U[:, s > tol * max(1.0, s[0] if s.size else 0.0)]


def split_from_spectrum(at, eigenvalues, eigenvectors, tangent, tau_s: float = TAU_S) -> SubspaceSplit:
    """Stable directions are eigenvectors with eigenvalue > tau_s * lambda_max, made orthogonal
    to the tangent directions; the centre space is what is left."""
    lam = np.asarray(eigenvalues, dtype=float)
    dim = eigenvectors.shape[0]
    lmax = lam.max() if lam.size else 0.0
    cut = tau_s * lmax
    if lmax > 0 and np.any((lam > cut / 10) & (lam < cut * 10)):
        raise AmbiguousSplitError(f"eigenvalue within a decade of the cut {cut:.3e}; adjust tau_s")
    Bp = _orthonormal(np.asarray(tangent, dtype=float).reshape(dim, -1))
    Vs = eigenvectors[:, lam > cut] if lmax > 0 else np.zeros((dim, 0))
    Vs = Vs - Bp @ (Bp.T @ Vs)
    Bs = _orthonormal(Vs)
    taken = np.hstack([Bs, Bp])
    Q, _ = np.linalg.qr(taken, mode="complete") if taken.shape[1] else (np.eye(dim), None)
    Bc = Q[:, taken.shape[1]:]
    return SubspaceSplit(np.asarray(at, dtype=float), Bs, Bc, Bp, lam)


def subspace_split(theta_star, branch: Branch, ctx: LossContext, tau_s: float = TAU_S) -> SubspaceSplit:
    """Split at a branch point using the Gauss-Newton spectrum and the analytic branch tangent.

    Eigenpairs of 2 J^T J come from the SVD of the sample Jacobian J, which
    keeps small genuine eigenvalues clear of rounding noise.
    """
    J = jacobian(theta_star, ctx)
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    lam = np.zeros(Vt.shape[0])
    lam[: s.size] = 2.0 * s ** 2
    return split_from_spectrum(theta_star, lam, Vt.T, tangent_basis(branch), tau_s)


def fixture_split(at, fixture, tau_s: float = TAU_S) -> SubspaceSplit:
    lam, vec = np.linalg.eigh(fixture.hessian(at))
    return split_from_spectrum(at, lam, vec, fixture.tangent(at), tau_s)


# ---------------------------------------------------------------- rates

class RateKind(str, enum.Enum):
    LINEAR = "linear"
    SUBLINEAR = "sublinear"
    UNDETERMINED = "undetermined"


@dataclass
class RateVerdict:
    kind: RateKind
    value: float = float("nan")  # beta for linear, power p for sublinear
    fit_quality: float = float("nan")
    window: tuple = (float("nan"), float("nan"))
    r2_linear: float = float("nan")
    r2_power: float = float("nan")
    points: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["window"] = list(self.window)
        return out


MIN_WINDOW_POINTS = 10
LOSS_FLOOR = 1e-24
ACCURACY_MARGIN = 1e3
R2_GATE = 0.99


def _linfit(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 0.0
    return coef[0], coef[1], r2


def tail_window(trace: FlowTrace, theta_lim=None, skip_decades: Optional[float] = None,
                width_decades: float = 1.0):
    """Checkpoint indices forming the final decade of distance decay.

    When the limit is the trace's own endpoint the closest approaches are biased,
    so the window starts `skip_decades` (default 2) above the smallest distance and
    2 * skip_decades of loss above the final loss.
    Losses below LOSS_FLOOR sit at rounding level and distances below
    ACCURACY_MARGIN * atol are dominated by integration error; both are left out.
    """
    if skip_decades is None:
        skip_decades = 2.0 if theta_lim is None else 0.0
    dist = trace.distances(theta_lim)
    ok = (dist > 0) & (trace.times > 0)
    if theta_lim is None:
        ok[-1] = False
    above_floor = ok & (trace.losses >= LOSS_FLOOR)
    if not above_floor.any():
        return np.flatnonzero(above_floor), dist
    idx = np.flatnonzero(above_floor)
    lo = max(dist[ok].min() * 10.0 ** skip_decades, dist[idx].min(), ACCURACY_MARGIN * trace.stats.get("atol", 0.0))
    if theta_lim is None and trace.losses[-1] > 0:
        # dense final checkpoints make the smallest distance a poor proxy for the endpoint's own
        # error; the loss is monotone, so also keep 2 * skip decades of loss above the final value
        far = ok & (trace.losses >= trace.losses[-1] * 10.0 ** (2 * skip_decades))
        if far.any():
            lo = max(lo, dist[far].min())
    hi = lo * 10.0 ** width_decades
    above = np.flatnonzero(dist > hi)
    start = above[-1] + 1 if above.size else 0
    sel = idx[(idx >= start) & (dist[idx] >= lo) & (dist[idx] <= hi)]
    return sel, dist


def estimate_rate(trace: FlowTrace, theta_lim=None, skip_decades: Optional[float] = None) -> RateVerdict:
    """Competing fits of log distance against t (linear rate) and log t (power law)."""
    if trace.terminal is Terminal.DIVERGED:
        raise ValueError("rate estimation needs a non-divergent trace")
    sel, dist = tail_window(trace, theta_lim, skip_decades)
    if sel.size < MIN_WINDOW_POINTS:
        return RateVerdict(RateKind.UNDETERMINED, points=int(sel.size))
    t = trace.times[sel]
    y = np.log(dist[sel])
    b_lin, _, r2_lin = _linfit(t, y)
    b_pow, _, r2_pow = _linfit(np.log(t), y)
    window = (float(t[0]), float(t[-1]))
    best = max(r2_lin, r2_pow)
    if best < R2_GATE:
        return RateVerdict(RateKind.UNDETERMINED, fit_quality=best, window=window, r2_linear=r2_lin,
                           r2_power=r2_pow, points=int(sel.size))
    if r2_lin >= r2_pow:
        return RateVerdict(RateKind.LINEAR, -b_lin, r2_lin, window, r2_lin, r2_pow, int(sel.size))
    return RateVerdict(RateKind.SUBLINEAR, b_pow, r2_pow, window, r2_lin, r2_pow, int(sel.size))


def _loglog_slope(x, y):
    ok = (x > 0) & (y > 0)
    if ok.sum() < 3:
        return float("nan")
    return float(_linfit(np.log(x[ok]), np.log(y[ok]))[0])


def direction_diagnostics(trace: FlowTrace, split: SubspaceSplit, theta_lim=None,
                          skip_decades: Optional[float] = None) -> dict:
    """Ratios |pi_p|/|pi_s|, |pi_p|/|pi_s|^2 and |pi_s|/|pi_c|^2 along the tail."""
    ref = split.at if theta_lim is None else np.asarray(theta_lim)
    V = trace.states - ref
    comps = np.array([[np.linalg.norm(B.T @ v) for B in (split.basis_s, split.basis_c, split.basis_p)]
                      for v in V])
    ps, pc, pp = comps.T
    sel, dist = tail_window(trace, ref if theta_lim is not None else None, skip_decades)

    def ratio(num, den):
        out = np.full(num.shape, np.nan)
        ok = den > DENOM_FLOOR
        out[ok] = num[ok] / den[ok]
        return out

    ratios = {
        "rho_ps": ratio(pp, ps),
        "rho_pss": ratio(pp, ps ** 2),
        "rho_sc2": ratio(ps, pc ** 2),
    }
    report = {"window_points": int(sel.size)}
    for name, vals in ratios.items():
        tail = vals[sel]
        tail = tail[np.isfinite(tail)]
        if tail.size == 0:
            report[name] = {"active": False}
            continue
        report[name] = {
            "active": True,
            "sup": float(tail.max()),
            "median": float(np.median(tail)),
            "series": vals,
        }
    d = dist[sel]
    report["exponents"] = {
        "s": _loglog_slope(d, ps[sel]),
        "c": _loglog_slope(d, pc[sel]),
        "p": _loglog_slope(d, pp[sel]),
    }
    return report


def loss_decay_check(trace: FlowTrace, theta_lim=None, morse_bott: bool = False,
                     skip_decades: Optional[float] = None) -> dict:
    """Fit the tail loss as c1 dist^4 + c2 exp(-beta t) by non-negative least squares,
    plus the log-log slope of loss against distance."""
    if trace.terminal is Terminal.DIVERGED:
        raise ValueError("loss decay needs a non-divergent trace")
    if np.all(trace.losses == 0):
        return {"trivial": True, "passed": True}
    sel, dist = tail_window(trace, theta_lim, skip_decades)
    sel = sel[trace.losses[sel] > 0]
    if sel.size < MIN_WINDOW_POINTS:
        return {"trivial": False, "passed": False, "points": int(sel.size), "reason": "too few tail points"}
    t = trace.times[sel]
    L = trace.losses[sel]
    d = dist[sel]
    best = None
    span = max(t[-1] - t[0], 1e-300)
    for beta in np.geomspace(1e-3, 1e3, 121) / span:
        A = np.column_stack([d ** 4, np.exp(-beta * (t - t[0]))]) / L[:, None]
        coef, res = nnls(A, np.ones_like(L))
        if best is None or res < best[0]:
            best = (res, beta, coef)
    res, beta, coef = best
    slope_t, _, r2_t = _linfit(t, np.log(L))
    report = {
        "trivial": False,
        "points": int(sel.size),
        "c_dist4": float(coef[0]),
        "c_exp": float(coef[1] * np.exp(beta * t[0])),
        "beta": float(beta),
        "relative_residual": float(res / np.sqrt(sel.size)),
        "exponent_vs_dist": _loglog_slope(d, L),
        "log_loss_rate": float(-slope_t),
        "r2_log_loss_vs_t": float(r2_t),
    }
    report["passed"] = bool(r2_t >= R2_GATE) if morse_bott else True
    return report


# ---------------------------------------------------------------- stability

def uniform_ball(center, radius: float, rng) -> np.ndarray:
    center = np.asarray(center, dtype=float)
    v = rng.standard_normal(center.size)
    v /= np.linalg.norm(v)
    return center + radius * rng.uniform() ** (1.0 / center.size) * v


@dataclass
class StabilityReport:
    stable: bool
    trials: int
    converged: int
    worst_sup_error: float
    witness: Optional[np.ndarray] = None
    sup_errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stable": self.stable,
            "trials": self.trials,
            "converged": self.converged,
            "worst_sup_error": self.worst_sup_error,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


STABLE_SUP = 1e-6
MIN_CONVERGED_FRACTION = 0.95


def stability_probe(theta_star, ctx: LossContext, delta: float, trials: int, rng, probe=None,
                    opts: FlowOptions = PROBE_FLOW, loss_tol: float = LOSS_TOL) -> StabilityReport:
    """Flows from a ball around theta_star must end at parameters realising the same function."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    X = probe_points(ctx.d) if probe is None else probe
    ref = forward(theta_star, X, ctx.activation, ctx.d)
    errors = []
    worst, witness, converged = 0.0, None, 0
    for _ in range(trials):
        tr = integrate(uniform_ball(theta_star, delta, rng), ctx, opts)
        if tr.terminal is Terminal.DIVERGED or tr.final_loss > loss_tol:
            errors.append(float("nan"))
            continue
        converged += 1
        err = float(np.max(np.abs(forward(tr.theta_lim, X, ctx.activation, ctx.d) - ref)))
        errors.append(err)
        if err > worst:
            worst, witness = err, tr.theta_lim
    stable = converged >= MIN_CONVERGED_FRACTION * trials and worst <= STABLE_SUP
    return StabilityReport(stable, trials, converged, worst, witness if not stable else None, errors)
