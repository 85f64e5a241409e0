"""Seeded, configuration-driven experiment runner.

Every command reads one JSON config, writes CSV and JSON reports into --out and
exits 0 when all assertions pass, 2 when some fail and 1 on configuration or
runtime errors. Reports embed the resolved config and the package version; no
timings or other ambient state reach the output, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .activation import ActivationSpec
from .branches import (A_SUM_TOL, CLUSTER_TOL, LOSS_TOL, Branch, branch_classes, classify,
                       enumerate_branches, enumerate_partitions, probe_points, sample_point)
from .flow import (PROBE_FLOW, TAIL_FLOW, FlowOptions, RateKind, direction_diagnostics, estimate_rate,
                   integrate, loss_decay_check, stability_probe, subspace_split, uniform_ball)
from .hessian_lab import (FUNCTION_TOL, PERTURB_EPS, REFERENCE_GAP, SEPARATION_RADIUS, SWEEP_COLUMNS,
                          analyze_point, conditioned_point, gn_spectrum, predicted_morse_bott, predicted_separation,
                          reference_weights, separation_probe, turning_points)
from .network import LossContext, TargetNetwork, forward, random_target
from .samples import (RANK_TOL, construct_type1, construct_type2,
                      is_type1, is_type2, perturb_samples, random_sample_set, rank_report)

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2
COMMANDS = ("independence", "atlas", "samples", "hessian", "flow", "stability", "sweep")
SAMPLE_MODES = ("random", "construct1", "construct2", "perturbed")
JOBS_ENV = "MINIMA_ATLAS_JOBS"
# share of flows per Morse-Bott cell that must land on a generic branch point
MIN_REACH_FRACTION = 0.9
BETA_FACTOR = 2.0
DIRECTION_FACTOR = 10.0
ATLAS_COLUMNS = ("r", "P", "l", "dim", "codim", "min_n_separate")
TRACE_COLUMNS = ("t", "loss", "grad_norm", "dist_to_lim", "pi_s", "pi_c", "pi_p")
STABILITY_COLUMNS = ("m", "m0", "d", "n", "r", "P", "l", "seed", "predicted", "stable", "converged", "trials",
                     "worst_sup_error")

DEFAULTS = {
    "activation": {"kind": "exponential"},
    "m": 2,
    "m0": 1,
    "d": 1,
    "seed": 0,
    "replicates": 1,
    "target": None,
    "target_seed": None,
    "target_min_gap": REFERENCE_GAP,
    "samples": {"mode": "perturbed", "n": None, "n_list": None, "seed": None, "eps": PERTURB_EPS,
                "gap": REFERENCE_GAP},
    "branches": None,
    "flow": None,
    "trials": 50,
    "radius": SEPARATION_RADIUS,
    "tolerances": {"rank": RANK_TOL, "loss": LOSS_TOL, "cluster": CLUSTER_TOL, "a_sum": A_SUM_TOL,
                   "function": FUNCTION_TOL},
    "independence": {"r_list": [1, 2, 3, 4], "probe_count": 200, "gap_max": 1.0, "gap_min": 1e-6,
                     "gap_points": 13},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _positive(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ConfigError(f"{name} must be a positive number, got {value!r}")


def _int(name, value, lo):
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}, got {value!r}")


def resolve_config(raw: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    """Merge raw onto the defaults, apply the seed override, fill derived seeds and validate."""
    cfg = _merge(DEFAULTS, raw or {})
    if seed is not None:
        cfg["seed"] = seed
    _int("m0", cfg["m0"], 1)
    _int("m", cfg["m"], cfg["m0"])
    _int("d", cfg["d"], 1)
    _int("seed", cfg["seed"], 0)
    _int("replicates", cfg["replicates"], 1)
    _int("trials", cfg["trials"], 1)
    _positive("radius", cfg["radius"])
    _positive("target_min_gap", cfg["target_min_gap"])
    for name, val in cfg["tolerances"].items():
        _positive(f"tolerances.{name}", val)
    if cfg["target_seed"] is None:
        cfg["target_seed"] = cfg["seed"]
    _int("target_seed", cfg["target_seed"], 0)
    try:
        ActivationSpec.from_dict(cfg["activation"])
        if cfg["target"] is not None:
            t = TargetNetwork.from_dict(cfg["target"])
            if t.m0 != cfg["m0"] or t.d != cfg["d"]:
                raise ConfigError("explicit target does not match m0 and d")
        if cfg["flow"] is not None:
            FlowOptions(**cfg["flow"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc

    sp = cfg["samples"]
    if sp["mode"] not in SAMPLE_MODES:
        raise ConfigError(f"samples.mode must be one of {SAMPLE_MODES}")
    if sp["seed"] is None:
        sp["seed"] = cfg["seed"]
    _int("samples.seed", sp["seed"], 0)
    _positive("samples.gap", sp["gap"])
    if sp["mode"] == "perturbed":
        _positive("samples.eps", sp["eps"])
    m, m0, d = cfg["m"], cfg["m0"], cfg["d"]
    if sp["n_list"] is None:
        sp["n_list"] = [sp["n"]] if sp["n"] is not None else turning_points(m, m0, d)
    if not isinstance(sp["n_list"], list) or not sp["n_list"]:
        raise ConfigError("samples.n_list must be a non-empty list")
    for n in sp["n_list"]:
        _int("samples.n_list entry", n, 1)
    sp["n_list"] = sorted(set(sp["n_list"]))
    if sp["n"] is None:
        sp["n"] = sp["n_list"][-1]
    _int("samples.n", sp["n"], 1)
    cap = available_samples(cfg)
    if cap is not None and max(sp["n"], sp["n_list"][-1]) > cap:
        raise ConfigError(f"samples.mode {sp['mode']} provides at most {cap} points")

    if cfg["branches"] is not None:
        if not isinstance(cfg["branches"], list):
            raise ConfigError("branches must be a list of r values or partition strings")
        known = {str(b.partition) for b in branch_classes(m, m0, d)}
        for item in cfg["branches"]:
            if isinstance(item, bool) or not isinstance(item, (int, str)):
                raise ConfigError(f"bad branch filter entry {item!r}")
            if isinstance(item, str) and item not in known:
                raise ConfigError(f"partition {item} is not a branch class of ({m}, {m0}, {d})")
    ind = cfg["independence"]
    for r in ind["r_list"]:
        _int("independence.r_list entry", r, 1)
    _int("independence.probe_count", ind["probe_count"], 1)
    _int("independence.gap_points", ind["gap_points"], 2)
    _positive("independence.gap_max", ind["gap_max"])
    _positive("independence.gap_min", ind["gap_min"])
    if not ind["gap_min"] < ind["gap_max"]:
        raise ConfigError("independence.gap_min must be below gap_max")
    return cfg


def available_samples(cfg: dict) -> Optional[int]:
    mode = cfg["samples"]["mode"]
    if mode == "random":
        return None
    if mode == "construct1":
        return cfg["m"]
    return (cfg["d"] + 1) * cfg["m"]


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


# ---------------------------------------------------------------- experiment objects

def build_activation(cfg) -> ActivationSpec:
    return ActivationSpec.from_dict(cfg["activation"])


def build_target(cfg) -> TargetNetwork:
    if cfg["target"] is not None:
        return TargetNetwork.from_dict(cfg["target"])
    rng = np.random.default_rng(cfg["target_seed"])
    return random_target(cfg["m0"], cfg["d"], rng, min_gap=cfg["target_min_gap"])


def build_samples(cfg, target: TargetNetwork) -> tuple:
    """Sample set with enough points for every requested n, plus the reference weights it was built for."""
    sp = cfg["samples"]
    act = build_activation(cfg)
    n_max = max(sp["n"], sp["n_list"][-1])
    rng = np.random.default_rng(sp["seed"])
    if sp["mode"] == "random":
        return random_sample_set(n_max, cfg["d"], sp["seed"]), None
    ref = reference_weights(target, cfg["m"], rng, sp["gap"])
    if sp["mode"] == "construct1":
        return construct_type1(ref, act, rng=rng, seed=sp["seed"]), ref
    ss = construct_type2(ref, act, rng=rng, seed=sp["seed"])
    if sp["mode"] == "perturbed":
        ss = perturb_samples(ss, sp["eps"], rng=rng, seed=sp["seed"])
    return ss, ref


def selected_branches(cfg) -> list:
    classes = branch_classes(cfg["m"], cfg["m0"], cfg["d"])
    filt = cfg["branches"]
    if filt is None:
        return classes
    return [b for b in classes if b.r in filt or str(b.partition) in filt]


def flow_options(cfg, default: FlowOptions) -> FlowOptions:
    return default if cfg["flow"] is None else FlowOptions(**cfg["flow"])


def cell_seeds(cfg) -> list:
    return [cfg["seed"] + k for k in range(cfg["replicates"])]


def cell_rng(seed: int, n: int, branch: Branch):
    return np.random.default_rng([seed, n, branch.r] + list(branch.partition.q))


class Ledger:
    """Assertion and event log shared by all commands."""

    def __init__(self):
        self.total = 0
        self.failures = []
        self.events = []

    def check(self, ok: bool, label: str):
        self.total += 1
        if not ok:
            self.failures.append(label)
        return ok

    def event(self, text: str):
        self.events.append(text)

    def to_dict(self) -> dict:
        return {"total": self.total, "failed": len(self.failures), "failures": self.failures,
                "events": self.events}


# ---------------------------------------------------------------- serialization

def _clean(obj):
    """JSON-safe copy: numpy to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    path.write_text(buf.getvalue())


def write_report(path: Path, command: str, cfg: dict, results, ledger: Ledger):
    doc = {"tool": "minima_atlas", "version": __version__, "command": command, "config": cfg,
           "results": results, "assertions": ledger.to_dict()}
    path.write_text(json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")


def _map(jobs: int):
    if jobs <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=jobs)
    return pool.map, pool


def _parallel(fn, items, jobs):
    mapper, pool = _map(jobs)
    try:
        return list(mapper(fn, items))
    finally:
        if pool is not None:
            pool.shutdown()


# ---------------------------------------------------------------- commands

def _feature_matrix(W, X, act):
    return np.column_stack([forward(np.concatenate([[1.0], w]), X, act, W.shape[1]) for w in W])


def cmd_independence(cfg, out: Path, jobs: int = 1) -> Ledger:
    """Feature-matrix rank of random distinct weights, a duplicated weight, and a gap continuation."""
    led = Ledger()
    act, d = build_activation(cfg), cfg["d"]
    ind = cfg["independence"]
    X = probe_points(d, ind["probe_count"], cfg["seed"])
    tol = cfg["tolerances"]["rank"]
    rng = np.random.default_rng([cfg["seed"], d])
    results = {"distinct": [], "duplicated": [], "gap_sweep": []}
    rows = []
    for r in ind["r_list"]:
        W = reference_weights(TargetNetwork(np.ones(1), rng.uniform(-2, 2, size=(1, d))), r, rng,
                              gap=cfg["target_min_gap"])
        rep = rank_report(_feature_matrix(W, X, act), tol)
        results["distinct"].append({"r": r, "rank": rep.numerical_rank, "margin": rep.margin})
        led.check(rep.numerical_rank == r, f"distinct weights r={r}: rank {rep.numerical_rank} != {r}")
        if r >= 2:
            Wd = W.copy()
            Wd[-1] = Wd[0]
            dup = rank_report(_feature_matrix(Wd, X, act), tol)
            results["duplicated"].append({"r": r, "rank": dup.numerical_rank})
            led.check(dup.numerical_rank == r - 1, f"duplicated weight r={r}: rank {dup.numerical_rank} != {r - 1}")
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            gaps = np.geomspace(ind["gap_max"], ind["gap_min"], ind["gap_points"])
            svals = []
            for g in gaps:
                Wg = W.copy()
                Wg[-1] = Wg[0] + g * u
                M = _feature_matrix(Wg, X, act)
                s = np.linalg.svd(M / np.linalg.norm(M, axis=0), compute_uv=False)
                svals.append(float(s[-1]))
                rows.append({"r": r, "gap": float(g), "min_singular": float(s[-1])})
            mono = all(b <= a for a, b in zip(svals, svals[1:]))
            results["gap_sweep"].append({"r": r, "monotone": mono})
            led.check(mono, f"gap continuation r={r}: min singular value not monotone in the gap")
    write_csv(out / "independence.csv", ("r", "gap", "min_singular"), rows)
    write_report(out / "independence.json", "independence", cfg, results, led)
    return led


def _composition_count(m: int, r: int) -> int:
    # ordered splits of m into r positive parts, by brute force over cut positions
    return sum(1 for _ in itertools.combinations(range(1, m), r - 1))


def cmd_atlas(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    m, m0, d = cfg["m"], cfg["m0"], cfg["d"]
    classes = branch_classes(m, m0, d)
    rows = []
    for b in classes:
        rows.append({"r": b.r, "P": str(b.partition), "l": b.deficient, "dim": b.dim, "codim": b.codim,
                     "min_n_separate": b.min_n_separate})
        led.check(b.dim == (m - b.r) + (b.r - m0) * d, f"{b.partition}: dimension formula")
    expected = sum(_composition_count(m, r) for r in range(m0, m + 1))
    led.check(len(rows) == expected, f"row count {len(rows)} != brute-force partition count {expected}")
    for r in range(m0, m + 1):
        led.check(len(enumerate_partitions(m, r)) == _composition_count(m, r), f"partition count r={r}")
    distinct = enumerate_branches(m, m0, d) if m <= 6 else None
    write_csv(out / "atlas.csv", ATLAS_COLUMNS, rows)
    results = {"rows": rows, "classes": len(rows),
               "distinct_branches": None if distinct is None else len(distinct)}
    write_report(out / "atlas.json", "atlas", cfg, results, led)
    return led


def cmd_samples(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    target = build_target(cfg)
    act = build_activation(cfg)
    ss, ref = build_samples(cfg, target)
    mode = cfg["samples"]["mode"]
    results = {"target": target.to_dict(), "samples": ss.to_dict(), "min_distance": ss.min_distance,
               "reference_weights": None if ref is None else ref.tolist(), "checks": []}
    led.check(ss.distinct, "sample points are not pairwise distinct")
    if ref is not None:
        for n in cfg["samples"]["n_list"]:
            X = ss.points[:n]
            entry = {"n": n}
            if n <= cfg["m"]:
                ok1, rep1 = is_type1(ref, X, act, cfg["tolerances"]["rank"])
                entry["type1"] = {"holds": ok1, **rep1.to_dict()}
            if ref.shape[0] <= n <= (cfg["d"] + 1) * cfg["m"]:
                ok2, rep2 = is_type2(ref, X, act, cfg["tolerances"]["rank"])
                entry["type2"] = {"holds": ok2, **rep2.to_dict()}
            results["checks"].append(entry)
        full = ss.points
        if mode == "construct1":
            ok, _ = is_type1(ref, full, act, cfg["tolerances"]["rank"])
            led.check(ok, "constructed Type-I samples fail the Type-I test")
        else:
            ok, _ = is_type2(ref, full, act, cfg["tolerances"]["rank"])
            led.check(ok, f"{mode} samples fail the Type-II test")
    write_report(out / "samples.json", "samples", cfg, results, led)
    return led


def _context(cfg):
    target = build_target(cfg)
    ss, _ = build_samples(cfg, target)
    return target, ss, build_activation(cfg)


def _hessian_cell(args):
    cfg, target, X, act, n, b, seed = args
    ctx = LossContext(target, X[:n], act)
    rng = cell_rng(seed, n, b)
    theta = sample_point(b, target, rng)
    rep = analyze_point(theta, b, ctx, cfg["tolerances"]["rank"], cfg["tolerances"]["loss"])
    return rep


def cmd_hessian(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    target, ss, act = _context(cfg)
    m, m0, d = cfg["m"], cfg["m0"], cfg["d"]
    cells = [(cfg, target, ss.points, act, n, b, s) for n in cfg["samples"]["n_list"]
             for b in selected_branches(cfg) for s in cell_seeds(cfg)]
    reports = _parallel(_hessian_cell, cells, jobs)
    rows, points = [], []
    for (_, _, _, _, n, b, s), rep in zip(cells, reports):
        rows.append({"m": m, "m0": m0, "d": d, "n": n, "r": b.r, "P": str(b.partition), "l": b.deficient,
                     "seed": s, "rank": rep.rank, "codim": b.codim, "morse_bott": rep.morse_bott,
                     "separated": "", "witness_class": ""})
        points.append({"n": n, "branch": b.to_dict(), "seed": s, **rep.to_dict()})
        tag = f"n={n} {b} seed={s}"
        if n >= b.r:
            led.check(rep.bounds_hold, f"{tag}: rank {rep.rank} outside [{rep.lower_bound}, {rep.upper_bound}]")
            led.check(rep.morse_bott == predicted_morse_bott(b, n),
                      f"{tag}: Morse-Bott {rep.morse_bott}, predicted {predicted_morse_bott(b, n)}")
        else:
            led.event(f"{tag}: n < r, rank bounds not applicable")
    write_csv(out / "hessian.csv", SWEEP_COLUMNS, rows)
    write_report(out / "hessian.json", "hessian", cfg, {"target": target.to_dict(), "points": points}, led)
    return led


def _flow_cell(args):
    target, X, act, n, b, seed, radius, opts, tol = args
    ctx = LossContext(target, X[:n], act)
    rng = cell_rng(seed, n, b)
    mb = predicted_morse_bott(b, n)
    # Morse-Bott tails converge at the smallest normal eigenvalue; keep it resolvable
    center = conditioned_point(b, ctx, rng, tol=tol["rank"]) if mb else sample_point(b, target, rng)
    tr = integrate(uniform_ball(center, radius, rng), ctx, opts)
    v = classify(tr.theta_lim, target, tol["cluster"], tol["a_sum"], act)
    summary = {"n": n, "branch": str(b), "P": str(b.partition), "seed": seed, "terminal": tr.terminal.value,
               "final_loss": tr.final_loss, "steps": tr.stats["steps"], "classified": v.outcome.value,
               "reached_branch": bool(v.on_branch and v.branch.same_as(b)), "predicted_morse_bott": mb}
    if not summary["reached_branch"] or tr.final_loss > tol["loss"]:
        summary["reached_branch"] = False
        return summary, tr.csv_rows()
    split = subspace_split(tr.theta_lim, v.branch, ctx)
    rate = estimate_rate(tr)
    diag = direction_diagnostics(tr, split)
    decay = loss_decay_check(tr, morse_bott=mb)
    rank, lam = gn_spectrum(tr.theta_lim, ctx, tol["rank"])
    lam_min = float(lam[rank - 1]) if rank else float("nan")
    summary.update(
        rate=rate.to_dict(),
        lambda_min=lam_min,
        beta_ratio=rate.value / lam_min if rate.kind is RateKind.LINEAR and lam_min > 0 else float("nan"),
        split_dims=list(split.dims),
        directions={k: {kk: vv for kk, vv in val.items() if kk != "series"} if isinstance(val, dict) else val
                    for k, val in diag.items()},
        loss_decay=decay,
    )
    return summary, tr.csv_rows(split)


def cmd_flow(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    target, ss, act = _context(cfg)
    tol = cfg["tolerances"]
    cells = []
    for n in cfg["samples"]["n_list"]:
        for b in selected_branches(cfg):
            opts = flow_options(cfg, TAIL_FLOW if predicted_morse_bott(b, n) else PROBE_FLOW)
            for s in cell_seeds(cfg):
                cells.append((target, ss.points, act, n, b, s, cfg["radius"], opts, tol))
    outputs = _parallel(_flow_cell, cells, jobs)
    trace_dir = out / "flow"
    trace_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    groups = {}
    for idx, (summary, rows) in enumerate(outputs):
        name = f"run_{idx:04d}.csv"
        summary["trace_csv"] = f"flow/{name}"
        # off-branch runs have no split; their projection columns stay empty
        write_csv(trace_dir / name, TRACE_COLUMNS, [{"pi_s": "", "pi_c": "", "pi_p": "", **r} for r in rows])
        runs.append(summary)
        groups.setdefault((summary["n"], summary["P"]), []).append(summary)
        tag = f"n={summary['n']} {summary['branch']} seed={summary['seed']}"
        if not summary["reached_branch"]:
            led.event(f"{tag}: flow ended {summary['terminal']} ({summary['classified']}) off the branch")
            continue
        if summary["predicted_morse_bott"]:
            rate = summary["rate"]
            led.check(rate["kind"] == RateKind.LINEAR.value and rate["fit_quality"] >= 0.99,
                      f"{tag}: rate {rate['kind']} R2 {rate['fit_quality']:.4f}, expected linear")
            ratio = summary["beta_ratio"]
            led.check(1 / BETA_FACTOR <= ratio <= BETA_FACTOR, f"{tag}: beta / lambda_min = {ratio:.3g}")
            pss = summary["directions"]["rho_pss"]
            if pss["active"]:
                led.check(pss["sup"] < DIRECTION_FACTOR * pss["median"],
                          f"{tag}: |pi_p|/|pi_s|^2 sup {pss['sup']:.3g} vs median {pss['median']:.3g}")
            led.check(summary["loss_decay"]["passed"], f"{tag}: loss decay not exponential")
    for (n, P), group in sorted(groups.items()):
        if group[0]["predicted_morse_bott"]:
            reached = sum(g["reached_branch"] for g in group)
            led.check(reached >= MIN_REACH_FRACTION * len(group),
                      f"n={n} P={P}: only {reached}/{len(group)} flows reached a generic branch point")
    write_report(out / "flow.json", "flow", cfg, {"target": target.to_dict(), "runs": runs}, led)
    return led


def _stability_cell(args):
    target, X, act, n, b, seed, radius, trials, opts, loss_tol = args
    ctx = LossContext(target, X[:n], act)
    rng = cell_rng(seed, n, b)
    center = sample_point(b, target, rng)
    return stability_probe(center, ctx, radius, trials, rng, opts=opts, loss_tol=loss_tol)


def cmd_stability(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    target, ss, act = _context(cfg)
    m, m0, d = cfg["m"], cfg["m0"], cfg["d"]
    opts = flow_options(cfg, PROBE_FLOW)
    cells = [(target, ss.points, act, n, b, s, cfg["radius"], cfg["trials"], opts, cfg["tolerances"]["loss"])
             for n in cfg["samples"]["n_list"] for b in selected_branches(cfg) for s in cell_seeds(cfg)]
    reports = _parallel(_stability_cell, cells, jobs)
    rows, results = [], []
    for (_, _, _, n, b, s, *_), rep in zip(cells, reports):
        pred = predicted_separation(b, n)
        rows.append({"m": m, "m0": m0, "d": d, "n": n, "r": b.r, "P": str(b.partition), "l": b.deficient,
                     "seed": s, "predicted": "" if pred is None else pred, "stable": rep.stable,
                     "converged": rep.converged, "trials": rep.trials, "worst_sup_error": rep.worst_sup_error})
        results.append({"n": n, "branch": str(b), "seed": s, "predicted_stable": pred, **rep.to_dict()})
        tag = f"n={n} {b} seed={s}"
        if rep.converged < rep.trials:
            led.event(f"{tag}: {rep.trials - rep.converged}/{rep.trials} flows did not reach zero loss")
        if pred is not None:
            led.check(rep.stable == pred, f"{tag}: stable={rep.stable}, predicted {pred} "
                                          f"(worst sup error {rep.worst_sup_error:.3g})")
    write_csv(out / "stability.csv", STABILITY_COLUMNS, rows)
    write_report(out / "stability.json", "stability", cfg, {"target": target.to_dict(), "cells": results}, led)
    return led


def _sweep_cell(args):
    cfg, target, X, act, n, b, seed, opts = args
    m, m0, d = cfg["m"], cfg["m0"], cfg["d"]
    ctx = LossContext(target, X[:n], act)
    rng = cell_rng(seed, n, b)
    theta = sample_point(b, target, rng)
    rank, _ = gn_spectrum(theta, ctx, cfg["tolerances"]["rank"])
    rep = separation_probe(b, ctx, cfg["radius"], cfg["trials"], rng, theta=theta, opts=opts,
                           loss_tol=cfg["tolerances"]["loss"], function_tol=cfg["tolerances"]["function"])
    row = {"m": m, "m0": m0, "d": d, "n": n, "r": b.r, "P": str(b.partition), "l": b.deficient, "seed": seed,
           "rank": rank, "codim": b.codim, "morse_bott": rank == b.codim, "separated": rep.separated,
           "witness_class": rep.witness_class.value}
    return row, rep.to_dict()


def _mark(value) -> str:
    return "-" if value is None else ("yes" if value else "no")


def cmd_sweep(cfg, out: Path, jobs: int = 1) -> Ledger:
    led = Ledger()
    target, ss, act = _context(cfg)
    opts = flow_options(cfg, PROBE_FLOW)
    branches = selected_branches(cfg)
    cells = [(cfg, target, ss.points, act, n, b, s, opts) for n in cfg["samples"]["n_list"]
             for b in branches for s in cell_seeds(cfg)]
    outputs = _parallel(_sweep_cell, cells, jobs)
    rows, probes = [], []
    lines = [f"threshold sweep m={cfg['m']} m0={cfg['m0']} d={cfg['d']}, {cfg['trials']} trials per cell",
             f"{'n':>3}  {'branch':<24} {'seed':>4}  {'rank':>4} {'codim':>5}  "
             f"{'MB obs/pred':<11}  {'sep obs/pred':<12}  witness"]
    for (_, _, _, _, n, b, s, _), (row, probe) in zip(cells, outputs):
        rows.append(row)
        probes.append({"n": n, "branch": str(b), "seed": s, **probe})
        tag = f"n={n} {b} seed={s}"
        mb_pred = predicted_morse_bott(b, n)
        sep_pred = predicted_separation(b, n)
        if n >= b.r:
            led.check(row["morse_bott"] == mb_pred, f"{tag}: Morse-Bott {row['morse_bott']}, predicted {mb_pred}")
        if sep_pred is not None:
            led.check(row["separated"] == sep_pred, f"{tag}: separated {row['separated']}, predicted {sep_pred}")
        if sep_pred is False:
            led.check(probe["witness_class"] == "off_qstar", f"{tag}: no off-target zero witness")
        if n >= (cfg["d"] + 1) * cfg["m"]:
            led.check(probe["off_qstar"] == 0, f"{tag}: {probe['off_qstar']} zeros off the target set")
        if probe["non_converged"]:
            led.event(f"{tag}: {probe['non_converged']}/{probe['trials']} probe flows did not reach zero loss")
        if probe["ambiguous"]:
            led.event(f"{tag}: {probe['ambiguous']} zeros with ambiguous classification")
        if probe["unresolved"]:
            led.event(f"{tag}: {probe['unresolved']} zeros match the target function but no branch")
        lines.append(f"{n:>3}  {str(b):<24} {s:>4}  {row['rank']:>4} {b.codim:>5}  "
                     f"{_mark(row['morse_bott']) + '/' + _mark(mb_pred if n >= b.r else None):<11}  "
                     f"{_mark(row['separated']) + '/' + _mark(sep_pred):<12}  {row['witness_class'] or '-'}")
    lines.append(f"assertions: {led.total - len(led.failures)}/{led.total} passed")
    lines.extend(f"FAIL {f}" for f in led.failures)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    (out / "sweep_summary.txt").write_text("\n".join(lines) + "\n")
    write_report(out / "sweep.json", "sweep", cfg, {"target": target.to_dict(), "probes": probes}, led)
    return led


HANDLERS = {
    "independence": cmd_independence,
    "atlas": cmd_atlas,
    "samples": cmd_samples,
    "hessian": cmd_hessian,
    "flow": cmd_flow,
    "stability": cmd_stability,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- entry point

def resolve_jobs(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get(JOBS_ENV)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{JOBS_ENV} must be an integer, got {env!r}") from exc
    if value < 1:
        raise ConfigError("jobs must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minima-atlas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file; omitted keys take defaults")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--jobs", type=int, help=f"worker processes (falls back to ${JOBS_ENV}, then 1)")
    return p


def run(command: str, raw: Optional[dict] = None, out=".", seed: Optional[int] = None, jobs: int = 1) -> Ledger:
    cfg = resolve_config(raw, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[command](cfg, out, jobs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        jobs = resolve_jobs(args.jobs)
        led = run(args.command, load_config(args.config), args.out, args.seed, jobs)
    except Exception as exc:  # reported as a runtime error, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    passed = led.total - len(led.failures)
    print(f"{args.command}: {passed}/{led.total} assertions passed, {len(led.events)} events")
    for f in led.failures:
        print(f"FAIL {f}")
    if led.failures:
        print(f"{len(led.failures)} assertion failure(s)", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
