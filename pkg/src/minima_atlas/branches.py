"""Atlas of the zero-generalization set: partitions, branches, exact branch points,
membership classification and closure-intersection counts.

Indices are 0-based. A branch is a partition q of range(m) into r consecutive
blocks plus a permutation pi; student neuron k copies neuron pi[k] of the
unpermuted point, so its block is the q-block containing pi[k]. The first m0
blocks carry the target neurons, the rest are non-target blocks.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activation import EXPONENTIAL, ActivationSpec
from .network import WEIGHT_BOX, TargetNetwork, forward, pack, unpack

CLUSTER_TOL = 1e-6
A_SUM_TOL = 1e-8
LOSS_TOL = 1e-16
FRESH_MARGIN = 0.1
A_FLOOR = 0.05
GRAY_FACTOR = 10.0


@dataclass(frozen=True)
class Partition:
    q: tuple

    def __post_init__(self):
        q = tuple(int(v) for v in self.q)
        if len(q) < 2 or q[0] != 0 or any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError(f"invalid partition {q}")
        object.__setattr__(self, "q", q)

    @property
    def r(self) -> int:
        return len(self.q) - 1

    @property
    def m(self) -> int:
        return self.q[-1]

    @property
    def sizes(self) -> tuple:
        return tuple(b - a for a, b in zip(self.q, self.q[1:]))

    def blocks(self) -> list:
        return [list(range(a, b)) for a, b in zip(self.q, self.q[1:])]

    def block_of(self) -> np.ndarray:
        """block index of every position 0..m-1"""
        return np.repeat(np.arange(self.r), self.sizes)

    def __str__(self):
        return "(" + ",".join(map(str, self.q)) + ")"


def enumerate_partitions(m: int, r: int) -> list:
    """All compositions of m into r positive parts, in lexicographic order of q."""
    if not 1 <= r <= m:
        raise ValueError("need 1 <= r <= m")
    return [Partition((0, *cuts, m)) for cuts in itertools.combinations(range(1, m), r - 1)]


def deficient_number(P: Partition, m0: int) -> int:
    """Number of singleton blocks among the non-target blocks m0+1..r."""
    if P.r < m0:
        raise ValueError("partition has fewer blocks than target neurons")
    return sum(1 for s in P.sizes[m0:] if s == 1)


def min_deficient(r: int, m: int, m0: int) -> int:
    if not m0 <= r <= m:
        raise ValueError("need m0 <= r <= m")
    return max(0, 2 * r - m - m0)


def branch_dimension(m: int, m0: int, r: int, d: int) -> int:
    return (m - r) + (r - m0) * d


def branch_codimension(m: int, m0: int, r: int, d: int) -> int:
    return r + (m + m0 - r) * d


@dataclass(frozen=True)
class Branch:
    partition: Partition
    perm: tuple
    m0: int
    d: int

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        if sorted(perm) != list(range(self.partition.m)):
            raise ValueError("perm must be a permutation of range(m)")
        if not self.m0 <= self.partition.r:
            raise ValueError("branch needs at least m0 blocks")
        if self.d < 1:
            raise ValueError("d must be positive")
        object.__setattr__(self, "perm", perm)

    @property
    def r(self) -> int:
        return self.partition.r

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def deficient(self) -> int:
        return deficient_number(self.partition, self.m0)

    @property
    def dim(self) -> int:
        return branch_dimension(self.m, self.m0, self.r, self.d)

    @property
    def codim(self) -> int:
        return branch_codimension(self.m, self.m0, self.r, self.d)

    @property
    def min_n_separate(self) -> int:
        return self.codim

    def blocks(self) -> list:
        """Student indices of each block, block order as in the partition."""
        owner = self.partition.block_of()[list(self.perm)]
        return [sorted(np.flatnonzero(owner == t).tolist()) for t in range(self.r)]

    def key(self) -> tuple:
        """Canonical identity: target blocks in target order, non-target blocks sorted by min index."""
        blocks = self.blocks()
        return tuple(map(tuple, blocks[: self.m0])), tuple(sorted(map(tuple, blocks[self.m0:])))

    def canonical(self) -> "Branch":
        tb, nb = self.key()
        return branch_from_blocks(tb, nb, self.d)

    def same_as(self, other: "Branch") -> bool:
        return self.key() == other.key() and self.d == other.d

    def to_dict(self) -> dict:
        return {"r": self.r, "q": list(self.partition.q), "pi": list(self.perm)}

    @classmethod
    def from_dict(cls, data: dict, m0: int, d: int) -> "Branch":
        b = cls(Partition(tuple(data["q"])), tuple(data["pi"]), m0, d)
        if "r" in data and data["r"] != b.r:
            raise ValueError("r does not match the partition")
        return b

    def __str__(self):
        tb, nb = self.key()
        fmt = lambda bl: "{" + ",".join(str(i + 1) for i in bl) + "}"
        return "T[" + " ".join(map(fmt, tb)) + "] N[" + " ".join(map(fmt, nb)) + "]"


def branch_from_blocks(target_blocks, nontarget_blocks, d: int) -> Branch:
    """Canonical (P, pi) realising the given blocks; elements inside a block keep increasing order."""
    target_blocks = [sorted(b) for b in target_blocks]
    nontarget_blocks = sorted(sorted(b) for b in nontarget_blocks)
    blocks = target_blocks + nontarget_blocks
    q = [0]
    for b in blocks:
        q.append(q[-1] + len(b))
    inv = [k for b in blocks for k in b]  # position j in the partition <- student index inv[j]
    perm = [0] * len(inv)
    for j, k in enumerate(inv):
        perm[k] = j
    return Branch(Partition(tuple(q)), tuple(perm), len(target_blocks), d)


def enumerate_branches(m: int, m0: int, d: int) -> list:
    """Distinct branches over all (r, P, pi), deduplicated by canonical form."""
    seen = {}
    for r in range(m0, m + 1):
        for P in enumerate_partitions(m, r):
            for perm in itertools.permutations(range(m)):
                b = Branch(P, perm, m0, d)
                seen.setdefault(b.key(), b.canonical())
    return [seen[k] for k in sorted(seen, key=lambda k: (len(k[0]) + len(k[1]), k))]


def branch_classes(m: int, m0: int, d: int) -> list:
    """One representative (identity permutation) per partition, r = m0..m."""
    ident = tuple(range(m))
    return [Branch(P, ident, m0, d) for r in range(m0, m + 1) for P in enumerate_partitions(m, r)]


def atlas_rows(m: int, m0: int, d: int) -> list:
    rows = []
    for b in branch_classes(m, m0, d):
        rows.append({
            "r": b.r,
            "P": str(b.partition),
            "l": b.deficient,
            "dim": b.dim,
            "codim": b.codim,
            "min_n_separate": b.min_n_separate,
        })
    return rows


def _split(total: float, size: int, rng, floor: float, max_tries: int = 1000) -> np.ndarray:
    """Random reals with the given sum, each at least `floor` in absolute value."""
    if size == 1:
        return np.array([total])
    for _ in range(max_tries):
        head = rng.uniform(floor, 1.0, size=size - 1) * rng.choice([-1.0, 1.0], size=size - 1)
        last = total - head.sum()
        if abs(last) >= floor:
            out = np.append(head, last)
            out[-1] = total - out[:-1].sum()
            return out
    raise ValueError("could not split outer weight away from zero")


def sample_point(branch: Branch, target: TargetNetwork, rng, margin: float = FRESH_MARGIN,
                 box: float = WEIGHT_BOX, a_floor: float = A_FLOOR, max_tries: int = 10000) -> np.ndarray:
    """A generic point of the branch for the given target."""
    if target.m0 != branch.m0 or target.d != branch.d:
        raise ValueError("branch and target disagree on m0 or d")
    d = branch.d
    placed = [w for w in target.bar_w]
    fresh = []
    for _ in range(branch.r - branch.m0):
        for _ in range(max_tries):
            u = rng.uniform(-box, box, size=d)
            if all(np.linalg.norm(u - w) >= margin for w in placed):
                break
        else:
            raise ValueError("fresh-weight margin unachievable in the weight box")
        placed.append(u)
        fresh.append(u)
    a = np.zeros(branch.m)
    W = np.zeros((branch.m, d))
    for t, block in enumerate(branch.blocks()):
        if t < branch.m0:
            w, total = target.bar_w[t], target.bar_a[t]
        else:
            w, total = fresh[t - branch.m0], 0.0
        if t >= branch.m0 and len(block) == 1:
            vals = np.zeros(1)
        else:
            vals = _split(total, len(block), rng, a_floor)
        a[block] = vals
        W[block] = w
    return pack(a, W)


def is_generic(theta, branch: Branch, target: TargetNetwork, margin: float = FRESH_MARGIN,
               a_floor: float = A_FLOOR) -> bool:
    """Fresh weights at least `margin` from all other weights; every block that must carry
    a nonzero outer weight has one of size >= a_floor."""
    a, W = unpack(theta, branch.d)
    centers = []
    for t, block in enumerate(branch.blocks()):
        centers.append(W[block[0]])
        if t < branch.m0 or len(block) > 1:
            if np.max(np.abs(a[block])) < a_floor:
                return False
    centers = np.array(centers)
    for t in range(branch.m0, branch.r):
        others = np.delete(centers, t, axis=0)
        if others.size and np.min(np.linalg.norm(others - centers[t], axis=1)) < margin:
            return False
    return True


def tangent_basis(branch: Branch) -> np.ndarray:
    """Orthonormal columns spanning the direction space of the branch closure.

    Per block: outer-weight moves with zero block sum; per non-target block:
    the shared inner weight moving rigidly.
    """
    d, m = branch.d, branch.m
    stride = d + 1
    vecs = []
    for t, block in enumerate(branch.blocks()):
        for k in block[1:]:
            v = np.zeros(stride * m)
            v[stride * block[0]] = 1.0
            v[stride * k] = -1.0
            vecs.append(v)
        if t >= branch.m0:
            for j in range(d):
                v = np.zeros(stride * m)
                v[[stride * k + 1 + j for k in block]] = 1.0
                vecs.append(v)
    if not vecs:
        return np.zeros((stride * m, 0))
    q, _ = np.linalg.qr(np.array(vecs).T)
    return q


def permute_point(theta, perm, d: int) -> np.ndarray:
    """Block coordinate transform: neuron k of the result is neuron perm[k] of theta."""
    a, W = unpack(theta, d)
    perm = list(perm)
    return pack(a[perm], W[perm])


class Outcome(str, enum.Enum):
    ON_BRANCH = "on_branch"
    AMBIGUOUS = "ambiguous"
    NOT_IN_QSTAR = "not_in_qstar"


@dataclass
class MembershipVerdict:
    outcome: Outcome
    clusters: list
    cluster_tolerance: float
    branch: Optional[Branch] = None
    candidates: list = field(default_factory=list)
    distance: float = float("nan")
    residual: float = float("nan")

    @property
    def on_branch(self) -> bool:
        return self.outcome is Outcome.ON_BRANCH

    def to_dict(self) -> dict:
        out = {
            "outcome": self.outcome.value,
            "clusters": [list(c) for c in self.clusters],
            "cluster_tolerance": self.cluster_tolerance,
            "distance": self.distance,
            "residual": self.residual,
        }
        if self.branch is not None:
            out["branch"] = self.branch.to_dict()
        if self.candidates:
            out["candidates"] = [b.to_dict() for b in self.candidates]
        return out


def cluster_weights(W: np.ndarray, tol: float) -> list:
    """Single-linkage groups of rows of W at distance <= tol, ordered by first index."""
    m = W.shape[0]
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    dist = np.linalg.norm(W[:, None, :] - W[None, :, :], axis=-1)
    for i, j in zip(*np.triu_indices(m, 1)):
        if dist[i, j] <= tol:
            parent[find(j)] = find(i)
    groups = {}
    for k in range(m):
        groups.setdefault(find(k), []).append(k)
    return sorted(groups.values(), key=lambda g: g[0])


def probe_points(d: int, count: int = 200, seed: int = 0, box: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-box, box, size=(count, d))


def sup_residual(theta, target: TargetNetwork, act: ActivationSpec = EXPONENTIAL, probe=None) -> float:
    X = probe_points(target.d) if probe is None else probe
    return float(np.max(np.abs(forward(theta, X, act, target.d) - target(X, act))))


def _match(theta, target: TargetNetwork, tol: float, a_sum_tol: float):
    """Branch induced by clustering at tol, or None if some cluster check fails."""
    a, W = unpack(theta, target.d)
    clusters = cluster_weights(W, tol)
    target_blocks = [None] * target.m0
    nontarget = []
    proj_a = a.copy()
    proj_W = W.copy()
    for c in clusters:
        near = [t for t in range(target.m0) if np.min(np.linalg.norm(W[c] - target.bar_w[t], axis=1)) <= tol]
        s = a[c].sum()
        if len(near) > 1:
            return clusters, None, None
        if near:
            t = near[0]
            if target_blocks[t] is not None or abs(s - target.bar_a[t]) > a_sum_tol:
                return clusters, None, None
            target_blocks[t] = c
            proj_W[c] = target.bar_w[t]
            proj_a[c] -= (s - target.bar_a[t]) / len(c)
        else:
            if abs(s) > a_sum_tol:
                return clusters, None, None
            nontarget.append(c)
            proj_W[c] = W[c].mean(axis=0)
            proj_a[c] -= s / len(c)
    if any(b is None for b in target_blocks):
        return clusters, None, None
    branch = branch_from_blocks(target_blocks, nontarget, target.d)
    dist = float(np.linalg.norm(np.asarray(theta) - pack(proj_a, proj_W)))
    return clusters, branch, dist


def classify(theta, target: TargetNetwork, cluster_tol: float = CLUSTER_TOL, a_sum_tol: float = A_SUM_TOL,
             act: ActivationSpec = EXPONENTIAL, probe=None) -> MembershipVerdict:
    """Decide whether theta realises the target function and on which branch.

    Weights are single-linkage clustered at cluster_tol. When some pair of
    weights falls in the grey band (tol, 10 tol] the coarser clustering is also
    tried; disagreement between the two yields an ambiguous verdict.
    """
    theta = np.asarray(theta, dtype=float)
    residual = sup_residual(theta, target, act, probe)
    clusters, branch, dist = _match(theta, target, cluster_tol, a_sum_tol)
    _, W = unpack(theta, target.d)
    pd = np.linalg.norm(W[:, None, :] - W[None, :, :], axis=-1)[np.triu_indices(W.shape[0], 1)]
    grey = np.any((pd > cluster_tol) & (pd <= GRAY_FACTOR * cluster_tol))
    if grey:
        _, coarse, _ = _match(theta, target, GRAY_FACTOR * cluster_tol, a_sum_tol)
        if coarse is not None and (branch is None or not coarse.same_as(branch)):
            cands = [b for b in (branch, coarse) if b is not None]
            return MembershipVerdict(Outcome.AMBIGUOUS, clusters, cluster_tol, candidates=cands,
                                     residual=residual)
    if branch is None:
        return MembershipVerdict(Outcome.NOT_IN_QSTAR, clusters, cluster_tol, residual=residual)
    return MembershipVerdict(Outcome.ON_BRANCH, clusters, cluster_tol, branch=branch, distance=dist,
                             residual=residual)


def closure_intersection_bound(P: Partition, P2: Partition, perm, m0: int):
    """Count blocks of P2 whose image under perm straddles several P-blocks.

    Returns (m_prime, r - m_prime), the second number bounding the distinct
    weights left at a common closure point.
    """
    if P.m != P2.m:
        raise ValueError("partitions of different m")
    owner = P.block_of()
    perm = list(perm)
    m_prime = sum(1 for block in P2.blocks() if len({owner[perm[k]] for k in block}) > 1)
    return m_prime, P.r - m_prime
