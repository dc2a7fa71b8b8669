"""Discrete optimal transport between weighted point sets.

Solves the M x M transportation problem

    minimize    sum_ij t_ij * cost_ij
    subject to  sum_j t_ij = row_i,   sum_i t_ij = col_j,   t_ij >= 0

with a primal transportation simplex (northwest-corner start, spanning-tree
basis, cycle pivots) and exposes the induced column-stochastic transition
matrix plus optimality diagnostics.  The solver is a pure function; distinct
problems can be solved concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


__all__ = [
    "TransportError",
    "InfeasibleMarginals",
    "PivotLimitExceeded",
    "CostMatrix",
    "MarginalPair",
    "Coupling",
    "TransitionMatrix",
    "cost_matrix",
    "solve_transport",
    "transition_from_coupling",
    "support_pattern",
    "check_cyclical_monotonicity",
    "coupling_support_pairs",
    "sample_index_cycles",
]

# Support threshold: entries above SUPPORT_REL * max(row marginal) count as
# nonzero, separating true support from pivot dust.
SUPPORT_REL = 1e-12

_MARGINAL_SUM_TOL = 1e-12


class TransportError(Exception):
    """Base class for transport solver failures."""


class InfeasibleMarginals(TransportError, ValueError):
    """Marginal vectors are not valid matching probability vectors."""


class PivotLimitExceeded(TransportError):
    """The simplex did not terminate within the pivot safety limit."""


def _as_states(ensemble) -> np.ndarray:
    """Extract an (N, M) state array from an Ensemble-like object or array."""
    states = np.asarray(getattr(ensemble, "states", ensemble), dtype=float)
    if states.ndim == 1:
        states = states[np.newaxis, :]
    if states.ndim != 2 or states.shape[1] < 1:
        raise ValueError(f"expected states of shape (N, M), got {states.shape}")
    return states


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise squared-distance matrix between ensemble members."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.ascontiguousarray(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"cost matrix must be square, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("cost matrix has non-finite entries")
        if np.any(entries < 0):
            raise ValueError("cost matrix has negative entries")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class MarginalPair:
    """Row (posterior) and column (prior) marginals of a coupling.

    Both must be probability vectors of equal length: nonnegative entries
    summing to one within 1e-12.
    """

    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        row = np.ascontiguousarray(self.row, dtype=float)
        col = np.ascontiguousarray(self.col, dtype=float)
        for name, vec in (("row", row), ("col", col)):
            if vec.ndim != 1 or vec.size < 1:
                raise ValueError(f"{name} marginal must be a nonempty vector")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} marginal has non-finite entries")
            if np.any(vec < 0):
                raise InfeasibleMarginals(f"{name} marginal has negative entries")
            if abs(vec.sum() - 1.0) > _MARGINAL_SUM_TOL:
                raise InfeasibleMarginals(
                    f"{name} marginal sums to {vec.sum()!r}, not 1"
                )
        if row.size != col.size:
            raise InfeasibleMarginals(
                f"marginal lengths differ: {row.size} vs {col.size}"
            )
        object.__setattr__(self, "row", row)
        object.__setattr__(self, "col", col)

    @property
    def size(self) -> int:
        return self.row.size


@dataclass(frozen=True)
class Coupling:
    """Optimal transport plan with its objective and support pattern."""

    t: np.ndarray
    objective: float
    support: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.t.shape[0]


@dataclass(frozen=True)
class TransitionMatrix:
    """Column-stochastic Markov matrix induced from a coupling."""

    p: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.p, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"transition matrix must be square, got {p.shape}")
        if np.any(p < -1e-12):
            raise ValueError("transition matrix has negative entries")
        colsums = p.sum(axis=0)
        if np.max(np.abs(colsums - 1.0)) > 1e-10:
            raise ValueError("transition matrix columns do not sum to 1")
        object.__setattr__(self, "p", p)

    @property
    def size(self) -> int:
        return self.p.shape[0]


def cost_matrix(ensemble) -> CostMatrix:
    """Squared Euclidean distances between all member pairs of one ensemble.

    entries[i, j] = ||x_i - x_j||^2 over all state components; exactly
    symmetric with a zero diagonal.
    """
    states = _as_states(ensemble)
    if not np.all(np.isfinite(states)):
        raise ValueError("ensemble states have non-finite entries")
    diff = states[:, :, np.newaxis] - states[:, np.newaxis, :]
    return CostMatrix(np.einsum("kij,kij->ij", diff, diff))


@njit(cache=True)
def _transportation_simplex(cost, row, col, max_pivots):  # pragma: no cover
    """Primal transportation simplex on a balanced M x M problem.

    Entering rule: most negative reduced cost, lexicographic (i, j) on exact
    ties; switches to Bland's first-negative rule during a long degenerate
    run to prevent cycling.  Leaving rule: ratio test with lexicographic
    tie-break.  Returns (plan, status, pivots) with status 0 = optimal,
    1 = pivot limit hit.
    """
    M = row.shape[0]
    nb = 2 * M - 1

    bi = np.zeros(nb, np.int64)
    bj = np.zeros(nb, np.int64)
    flow = np.zeros(nb, np.float64)

    # Northwest-corner start: a monotone staircase of exactly 2M-1 basic
    # cells; ties produce degenerate (zero-flow) basic cells.
    a = row.copy()
    b = col.copy()
    i = 0
    j = 0
    for k in range(nb):
        bi[k] = i
        bj[k] = j
        if i == M - 1 and j == M - 1:
            q = 0.5 * (a[i] + b[j])
            flow[k] = q if q > 0.0 else 0.0
            break
        if j == M - 1:
            advance_row = True
        elif i == M - 1:
            advance_row = False
        else:
            advance_row = a[i] <= b[j]
        if advance_row:
            q = a[i] if a[i] > 0.0 else 0.0
            flow[k] = q
            b[j] -= q
            a[i] = 0.0
            i += 1
        else:
            q = b[j] if b[j] > 0.0 else 0.0
            flow[k] = q
            a[i] -= q
            b[j] = 0.0
            j += 1

    cell_slot = -np.ones((M, M), np.int64)
    for k in range(nb):
        cell_slot[bi[k], bj[k]] = k

    n_nodes = 2 * M
    first = np.empty(n_nodes, np.int64)
    nxt = np.empty(2 * nb, np.int64)
    u = np.zeros(M, np.float64)
    v = np.zeros(M, np.float64)
    stack = np.empty(n_nodes, np.int64)
    visited = np.zeros(n_nodes, np.uint8)
    parent_node = np.empty(n_nodes, np.int64)
    parent_slot = np.empty(n_nodes, np.int64)
    path = np.empty(nb, np.int64)

    cmax = 0.0
    for r in range(M):
        for c in range(M):
            x = abs(cost[r, c])
            if x > cmax:
                cmax = x
    scale = cmax if cmax > 0.0 else 1.0
    # Optimality tolerance: covers roundoff accumulated along potential
    # chains of depth <= 2M while staying far below 1e-12 objective accuracy
    # for unit-scale costs.
    width = 8.0 * M
    if width < 256.0:
        width = 256.0
    tol = scale * 2.220446049250313e-16 * width
    degen_tol = 1e-15

    bland = False
    degen_run = 0
    bland_after = 2 * M + 20

    status = 0
    pivots = 0
    while True:
        # adjacency of the spanning tree (rows 0..M-1, columns M..2M-1)
        for n in range(n_nodes):
            first[n] = -1
        for k in range(nb):
            e = 2 * k
            nxt[e] = first[bi[k]]
            first[bi[k]] = e
            e = 2 * k + 1
            nxt[e] = first[M + bj[k]]
            first[M + bj[k]] = e

        # dual potentials: u_i + v_j = c_ij on basic cells, rooted at u_0 = 0
        for n in range(n_nodes):
            visited[n] = 0
        top = 0
        stack[top] = 0
        top += 1
        visited[0] = 1
        u[0] = 0.0
        while top > 0:
            top -= 1
            n = stack[top]
            e = first[n]
            while e != -1:
                k = e >> 1
                if n < M:
                    other = M + bj[k]
                else:
                    other = bi[k]
                if visited[other] == 0:
                    visited[other] = 1
                    if other >= M:
                        v[other - M] = cost[bi[k], bj[k]] - u[bi[k]]
                    else:
                        u[other] = cost[bi[k], bj[k]] - v[bj[k]]
                    stack[top] = other
                    top += 1
                e = nxt[e]

        # entering cell
        ei = -1
        ej = -1
        if bland:
            for r in range(M):
                if ei != -1:
                    break
                for c in range(M):
                    if cell_slot[r, c] >= 0:
                        continue
                    if cost[r, c] - u[r] - v[c] < -tol:
                        ei = r
                        ej = c
                        break
        else:
            best = -tol
            for r in range(M):
                for c in range(M):
                    if cell_slot[r, c] >= 0:
                        continue
                    rc = cost[r, c] - u[r] - v[c]
                    if rc < best:
                        best = rc
                        ei = r
                        ej = c
        if ei == -1:
            break
        if pivots >= max_pivots:
            status = 1
            break
        pivots += 1

        # unique tree path from row node ei to column node M+ej
        for n in range(n_nodes):
            visited[n] = 0
        src = ei
        dst = M + ej
        top = 0
        stack[top] = src
        top += 1
        visited[src] = 1
        while top > 0:
            top -= 1
            n = stack[top]
            if n == dst:
                break
            e = first[n]
            while e != -1:
                k = e >> 1
                if n < M:
                    other = M + bj[k]
                else:
                    other = bi[k]
                if visited[other] == 0:
                    visited[other] = 1
                    parent_node[other] = n
                    parent_slot[other] = k
                    stack[top] = other
                    top += 1
                e = nxt[e]

        plen = 0
        n = dst
        while n != src:
            path[plen] = parent_slot[n]
            plen += 1
            n = parent_node[n]

        # Walking from the column node, even path positions alternate with
        # the entering cell and give up flow; ratio test over those.
        theta = np.inf
        for p in range(0, plen, 2):
            f = flow[path[p]]
            if f < theta:
                theta = f
        leave_pos = -1
        li = M
        lj = M
        for p in range(0, plen, 2):
            k = path[p]
            if flow[k] <= theta:
                if bi[k] < li or (bi[k] == li and bj[k] < lj):
                    li = bi[k]
                    lj = bj[k]
                    leave_pos = p
        if theta < 0.0:
            theta = 0.0

        for p in range(plen):
            k = path[p]
            if p % 2 == 0:
                f = flow[k] - theta
                flow[k] = f if f > 0.0 else 0.0
            else:
                flow[k] += theta

        slot = path[leave_pos]
        cell_slot[bi[slot], bj[slot]] = -1
        bi[slot] = ei
        bj[slot] = ej
        flow[slot] = theta
        cell_slot[ei, ej] = slot

        if theta <= degen_tol:
            degen_run += 1
            if degen_run > bland_after:
                bland = True
        else:
            degen_run = 0
            bland = False

    t = np.zeros((M, M), np.float64)
    for k in range(nb):
        if flow[k] > 0.0:
            t[bi[k], bj[k]] = flow[k]
    return t, status, pivots


def solve_transport(cost, marginals: MarginalPair, max_pivots: int | None = None) -> Coupling:
    """Solve the transportation LP to global optimality.

    Parameters
    ----------
    cost:
        CostMatrix (or square array) of nonnegative finite entries.
    marginals:
        MarginalPair with row (posterior) and col (prior) probabilities.
    max_pivots:
        Pivot safety limit; defaults to 100 * M**2.

    Returns
    -------
    Coupling whose plan satisfies both marginals to 1e-10, achieves the
    minimum expected cost, and has at most 2M-1 support entries.
    """
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix(cost)
    if not isinstance(marginals, MarginalPair):
        raise TypeError("marginals must be a MarginalPair")
    if marginals.size != cost.size:
        raise InfeasibleMarginals(
            f"marginal length {marginals.size} does not match cost size {cost.size}"
        )
    # Rescale away the <=1e-12 sum slack so the kernel sees a balanced problem.
    row = marginals.row / marginals.row.sum()
    col = marginals.col / marginals.col.sum()
    if max_pivots is None:
        max_pivots = 100 * cost.size * cost.size

    t, status, pivots = _transportation_simplex(cost.entries, row, col, max_pivots)
    if status != 0:
        raise PivotLimitExceeded(f"no optimum after {pivots} pivots (limit {max_pivots})")

    objective = float(np.sum(t * cost.entries))
    threshold = SUPPORT_REL * float(row.max())
    idx_i, idx_j = np.nonzero(t > threshold)
    support = sorted(zip(idx_i.tolist(), idx_j.tolist()))
    return Coupling(t=t, objective=objective, support=support)


def transition_from_coupling(coupling: Coupling, col_marginal) -> TransitionMatrix:
    """Markov transition matrix p_ij = t_ij / col_j from a coupling.

    A zero column marginal whose column also carries no mass is replaced by
    the unit vector e_j (the member maps to itself), preserving column
    stochasticity; zero marginal under nonzero mass is a degeneracy error.
    """
    col = np.asarray(col_marginal, dtype=float)
    t = coupling.t
    if col.ndim != 1 or col.size != t.shape[1]:
        raise ValueError("column marginal length does not match coupling size")
    if np.any(col < 0):
        raise ValueError("column marginal has negative entries")

    p = np.zeros_like(t)
    positive = col > 0
    p[:, positive] = t[:, positive] / col[positive]
    if not np.all(positive):
        mass_tol = SUPPORT_REL * max(float(t.max()), 1e-300)
        for j in np.nonzero(~positive)[0]:
            if float(t[:, j].sum()) > mass_tol:
                raise TransportError(
                    f"column {j} has zero marginal but nonzero transported mass"
                )
            p[j, j] = 1.0
    return TransitionMatrix(p)


def support_pattern(coupling: Coupling) -> tuple[list, int]:
    """Sorted nonzero (i, j) index pairs of a coupling and their count."""
    support = sorted(coupling.support)
    return support, len(support)


def check_cyclical_monotonicity(support_pairs, cycles, tol: float = 1e-9):
    """Check the cyclic inequality on sampled index cycles.

    ``support_pairs`` is a sequence of (prior point, posterior point) pairs;
    each cycle is a sequence of pair indices with length >= 2.  For a cycle
    (c_1, ..., c_k) the quantity

        <a_1, f_2 - f_1> + <a_2, f_3 - f_2> + ... + <a_k, f_1 - f_k>

    must not exceed ``tol``.  Returns ``(ok, worst)`` where ``worst`` is the
    maximum left-hand side found over all cycles.
    """
    if len(support_pairs) == 0:
        raise ValueError("support pairs must be nonempty")
    f_pts = [np.atleast_1d(np.asarray(f, dtype=float)) for f, _ in support_pairs]
    a_pts = [np.atleast_1d(np.asarray(a, dtype=float)) for _, a in support_pairs]
    dim = f_pts[0].shape
    for f, a in zip(f_pts, a_pts):
        if f.shape != dim or a.shape != dim:
            raise ValueError("support pairs have mismatched dimensions")

    worst = -np.inf
    for cycle in cycles:
        if len(cycle) < 2:
            raise ValueError("cycles must have length >= 2")
        lhs = 0.0
        for m, c in enumerate(cycle):
            c_next = cycle[(m + 1) % len(cycle)]
            lhs += float(np.dot(a_pts[c], f_pts[c_next] - f_pts[c]))
        worst = max(worst, lhs)
    return bool(worst <= tol), worst


def coupling_support_pairs(ensemble, coupling: Coupling):
    """(prior member, matched posterior value) pairs over a coupling support.

    Support entry (i, j) couples prior member j with posterior value i, both
    drawn from the same state set.
    """
    states = _as_states(ensemble)
    return [(states[:, j].copy(), states[:, i].copy()) for i, j in coupling.support]


def sample_index_cycles(n_pairs: int, length: int, count: int, rng) -> list:
    """Sample ``count`` index cycles of the given length without replacement."""
    if length < 2 or length > n_pairs:
        raise ValueError("cycle length must be in [2, number of pairs]")
    return [tuple(rng.choice(n_pairs, size=length, replace=False)) for _ in range(count)]
