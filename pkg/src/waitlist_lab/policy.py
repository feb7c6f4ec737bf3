"""Applicant preferences and the choice of a pair of ranked lists.

An applicant entering at age ``a0`` submits ``R1``; if waitlisted she reapplies
once with ``R2`` under a bonus-adjusted score and keeps whatever she gets until
age 5.  Lists are always canonicalised to descending flow utility, which is
value-optimal for a given set of centers when admission chances are
independent across centers.

Two objectives are available.  ``"expanded"`` follows the explicit three-branch
decomposition (assigned in period 1 / waitlisted then assigned / waitlisted
twice) and is the one used for choices.  ``"succinct"`` is the single blended
lottery form; it is kept for diagnostics because it does not coincide with the
expanded form in general (see :func:`objective_mode_agreement`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy.special import ndtr

from .lottery import CellKey, LotteryBelief, horizon_weights, lottery_from_rol
from .mechanism import MAX_LIST, InvalidInputError, SCORE_MAX, SCORE_MIN, validate_rol

N_AGES = 6
EXPANDED = "expanded"
SUCCINCT = "succinct"
_TOL = 1e-12


class ParameterError(ValueError):
    """Preference parameters violate their constraints."""


class EnumerationTooLarge(ValueError):
    pass


@dataclass
class Theta:
    """Preference parameters.

    ``sigma`` is the area-level covariance of the taste shock: a center in
    area ``k`` receives the applicant's area shock ``eta_k``.  ``idio_var``
    adds an optional independent per-center component on top.
    """

    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    mu0: np.ndarray = field(default_factory=lambda: np.zeros(N_AGES))
    sigma0sq: np.ndarray = field(default_factory=lambda: np.zeros(N_AGES))
    gamma: float = -1.0
    delta: float = 0.95
    idio_var: float = 0.0
    normalized_age: int = 0

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.sigma0sq = np.asarray(self.sigma0sq, dtype=float)

    @property
    def n_centers(self) -> int:
        return self.alpha.size

    def validate(self) -> None:
        if self.beta.shape != self.alpha.shape:
            raise ParameterError("alpha and beta must have the same length")
        if self.mu0.shape != (N_AGES,) or self.sigma0sq.shape != (N_AGES,):
            raise ParameterError("outside-option parameters need one entry per age 0..5")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise ParameterError("sigma is not symmetric")
        eig = np.linalg.eigvalsh(self.sigma)
        if eig.min() < -1e-10 * max(1.0, abs(eig.max())):
            raise ParameterError(f"sigma is not PSD (min eigenvalue {eig.min():.3g})")
        if np.any(self.sigma0sq < 0) or self.idio_var < 0:
            raise ParameterError("variances must be nonnegative")
        if self.gamma != -1.0:
            raise ParameterError("gamma is normalised to -1")
        if self.mu0[self.normalized_age] != 0.0:
            raise ParameterError(f"mu0 at age {self.normalized_age} is normalised to 0")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError("delta must lie in (0, 1)")

    def sigma_factor(self) -> np.ndarray:
        """``F`` with ``F @ F.T == sigma``; works for singular PSD matrices."""
        w, U = np.linalg.eigh(self.sigma)
        return U * np.sqrt(np.clip(w, 0.0, None))

    def full_covariance(self, center_area: Sequence[int]) -> np.ndarray:
        ca = np.asarray(center_area)
        return self.sigma[np.ix_(ca, ca)] + self.idio_var * np.eye(ca.size)

    def copy(self) -> "Theta":
        return Theta(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()})

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
            "sigma_factor": np.linalg.cholesky(self.sigma + 1e-12 * np.eye(len(self.sigma))).tolist(),
            "mu0": self.mu0.tolist(),
            "sigma0sq": self.sigma0sq.tolist(),
            "gamma": self.gamma,
            "delta": self.delta,
            "idio_var": self.idio_var,
            "normalized_age": self.normalized_age,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Theta":
        keys = ("alpha", "beta", "sigma", "mu0", "sigma0sq", "gamma", "delta", "idio_var", "normalized_age")
        kw = {k: d[k] for k in keys if k in d}
        if "sigma" not in kw and "sigma_factor" in d:
            F = np.asarray(d["sigma_factor"], dtype=float)
            kw["sigma"] = F @ F.T
        return cls(**kw)


@dataclass
class UtilityDraw:
    v: np.ndarray  # per-center flow utility
    v0: np.ndarray  # outside option by age 0..5


def flow_utility(
    theta: Theta, s1: int, same_area: Sequence[float], eps: Sequence[float]
) -> np.ndarray:
    d = np.asarray(same_area, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if d.shape != theta.alpha.shape or eps.shape != theta.alpha.shape:
        raise ValueError(
            f"expected {theta.n_centers} centers, got flags {d.shape} and shocks {eps.shape}"
        )
    return theta.alpha + theta.beta * s1 + theta.gamma * d + eps


def draw_utilities(
    theta: Theta,
    s1: int,
    same_area: Sequence[float],
    center_area: Sequence[int],
    rng: np.random.Generator,
) -> UtilityDraw:
    theta.validate()
    F = theta.sigma_factor()
    ca = np.asarray(center_area)
    eta = F @ rng.standard_normal(F.shape[1])
    eps = eta[ca] + math.sqrt(theta.idio_var) * rng.standard_normal(ca.size)
    v0 = theta.mu0 + np.sqrt(theta.sigma0sq) * rng.standard_normal(N_AGES)
    return UtilityDraw(flow_utility(theta, s1, same_area, eps), v0)


@dataclass
class StandardShocks:
    """Parameter-free normal draws; combined with a :class:`Theta` they give
    utilities, so one set of shocks serves every parameter value."""

    area: np.ndarray  # (N, n_areas)
    idio: np.ndarray  # (N, J)
    outside: np.ndarray  # (N, 6)

    @classmethod
    def draw(cls, n: int, n_areas: int, n_centers: int, seed: int) -> "StandardShocks":
        rng = np.random.default_rng(seed)
        return cls(
            rng.standard_normal((n, n_areas)),
            rng.standard_normal((n, n_centers)),
            rng.standard_normal((n, N_AGES)),
        )


def population_utilities(
    theta: Theta,
    s1: np.ndarray,
    same_area: np.ndarray,
    center_area: np.ndarray,
    shocks: StandardShocks,
) -> tuple[np.ndarray, np.ndarray]:
    """``(V, V0)`` with shapes (N, J) and (N, 6)."""
    theta.validate()
    F = theta.sigma_factor()
    eta = shocks.area @ F.T
    eps = eta[:, center_area] + math.sqrt(theta.idio_var) * shocks.idio
    V = theta.alpha + np.outer(s1, theta.beta) + theta.gamma * same_area + eps
    V0 = theta.mu0 + np.sqrt(theta.sigma0sq) * shocks.outside
    return V, V0


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _parts(v, pi, rol, n):
    surv = 1.0
    vl = 0.0
    for k in range(n):
        j = rol[k]
        vl += surv * pi[j] * v[j]
        surv *= 1.0 - pi[j]
    return vl, surv


@njit(cache=True)
def _insert(rol, n, j, v, out):
    m = 0
    placed = False
    for k in range(n):
        c = rol[k]
        if not placed and (v[j] > v[c] or (v[j] == v[c] and j < c)):
            out[m] = j
            m += 1
            placed = True
        out[m] = c
        m += 1
    if not placed:
        out[m] = j
        m += 1
    return m


@njit(cache=True)
def _mia(v, pi, outside, K, out):
    """Marginal improvement: add the best center while the value strictly rises."""
    J = v.shape[0]
    n = 0
    cur = outside
    in_list = np.zeros(J, dtype=np.bool_)
    cand = np.empty(K, dtype=np.int64)
    best = np.empty(K, dtype=np.int64)
    while n < K:
        best_val = -np.inf
        best_j = -1
        for j in range(J):
            if in_list[j]:
                continue
            m = _insert(out, n, j, v, cand)
            vl, p = _parts(v, pi, cand, m)
            val = vl + p * outside
            if val > best_val:
                best_val = val
                best_j = j
                best[:m] = cand[:m]
        if best_j < 0 or best_val <= cur + 1e-12:
            break
        n += 1
        out[:n] = best[:n]
        in_list[best_j] = True
        cur = best_val
    return n


@njit(cache=True)
def _horizon_terms(v0, a0, delta):
    D = 1.0
    O2 = 0.0
    w = 1.0
    for k in range(1, 6 - a0):
        w *= delta
        D += w
        O2 += w * v0[a0 + k]
    return D, O2


@njit(cache=True)
def _pair_value(vl1, p1, vl2, p2, D, O2, v0a0, succinct):
    dt = D - 1.0
    if succinct:
        pt = dt / D * p1
        return (1.0 - pt) * vl1 + pt * vl2 + v0a0 * p1 + O2 * p2
    return D * vl1 + p1 * (v0a0 + dt * vl2 + p2 * O2)


@njit(cache=True)
def _approx_one(v, v0, a0, pi1, pi2, K, delta, succinct, r1, r2):
    J = v.shape[0]
    D, O2 = _horizon_terms(v0, a0, delta)
    n2 = 0
    if a0 < 5:
        n2 = _mia(v, pi2, O2 / (D - 1.0), K, r2)
    vl2, p2 = _parts(v, pi2, r2, n2)
    v0a0 = v0[a0]
    n1 = _mia(v, pi1, v0a0, K, r1)
    vl1, p1 = _parts(v, pi1, r1, n1)
    cur = _pair_value(vl1, p1, vl2, p2, D, O2, v0a0, succinct)
    in_list = np.zeros(J, dtype=np.bool_)
    for k in range(n1):
        in_list[r1[k]] = True
    tmp = np.empty(K, dtype=np.int64)
    cand = np.empty(K, dtype=np.int64)
    best = np.empty(K, dtype=np.int64)
    updates = 0
    for _ in range(100):
        best_val = -np.inf
        best_n = -1
        for k in range(n1):
            m = 0
            for q in range(n1):
                if q != k:
                    tmp[m] = r1[q]
                    m += 1
            for jj in range(-1, J):
                if jj >= 0 and in_list[jj]:
                    continue
                if jj < 0:
                    cand[:m] = tmp[:m]
                    nc = m
                else:
                    nc = _insert(tmp, m, jj, v, cand)
                vl, p = _parts(v, pi1, cand, nc)
                val = _pair_value(vl, p, vl2, p2, D, O2, v0a0, succinct)
                if val > best_val:
                    best_val = val
                    best_n = nc
                    best[:nc] = cand[:nc]
        if best_n < 0 or best_val <= cur + 1e-12:
            break
        for k in range(n1):
            in_list[r1[k]] = False
        n1 = best_n
        r1[:n1] = best[:n1]
        for k in range(n1):
            in_list[r1[k]] = True
        cur = best_val
        updates += 1
    return n1, n2, updates, cur


@njit(cache=True)
def approx_batch(V, V0, A0, P1, P2, K, delta, succinct):
    """Approximate optimal pairs for many applicants at once.

    Returns ``(R1, R2, updates, value)``; lists are (N, K) padded with -1.
    """
    N, J = V.shape
    R1 = np.full((N, K), -1, dtype=np.int64)
    R2 = np.full((N, K), -1, dtype=np.int64)
    upd = np.zeros(N, dtype=np.int64)
    val = np.zeros(N)
    r1 = np.empty(K, dtype=np.int64)
    r2 = np.empty(K, dtype=np.int64)
    for i in range(N):
        n1, n2, u, x = _approx_one(V[i], V0[i], A0[i], P1[i], P2[i], K, delta, succinct, r1, r2)
        R1[i, :n1] = r1[:n1]
        R2[i, :n2] = r2[:n2]
        upd[i] = u
        val[i] = x
    return R1, R2, upd, val


# ---------------------------------------------------------------------------
# problem-level API


@dataclass
class PolicyProblem:
    """One applicant's choice problem with beliefs already evaluated at her
    period-1 score (``pi1``) and bonus-adjusted period-2 score (``pi2``)."""

    v: np.ndarray
    v0: np.ndarray
    a0: int
    pi1: np.ndarray
    pi2: np.ndarray
    delta: float = 0.95
    K: int = MAX_LIST
    mode: str = EXPANDED
    s1: int | None = None
    bonus: int | None = None

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)
        self.pi1 = np.asarray(self.pi1, dtype=float)
        self.pi2 = np.asarray(self.pi2, dtype=float)
        if self.v0.shape == ():
            self.v0 = np.full(N_AGES, float(self.v0))
        if not (self.v.shape == self.pi1.shape == self.pi2.shape):
            raise ValueError("v, pi1 and pi2 must have one entry per center")
        if self.v0.shape != (N_AGES,):
            raise ValueError("v0 needs one entry per age 0..5")
        if not 0 <= self.a0 <= 5:
            raise InvalidInputError(f"entry age {self.a0} outside 0..5")
        if self.mode not in (EXPANDED, SUCCINCT):
            raise ValueError(f"unknown objective mode {self.mode!r}")

    @classmethod
    def from_belief(
        cls,
        draw: UtilityDraw,
        belief: LotteryBelief,
        cell1: CellKey,
        cell2: CellKey | None,
        s1: int,
        bonus: int,
        a0: int,
        **kw,
    ) -> "PolicyProblem":
        """Look up both periods' probabilities; the period-2 score is ``s1 + bonus``
        and must be on the belief grid."""
        pi1 = belief.vector(cell1, s1)
        if cell2 is None or a0 >= 5:
            pi2 = np.zeros_like(pi1)
        else:
            pi2 = belief.vector(cell2, s1 + bonus)
        return cls(draw.v, draw.v0, a0, pi1, pi2, s1=s1, bonus=bonus, **kw)

    @property
    def n_centers(self) -> int:
        return self.v.size


@dataclass(frozen=True)
class PairSolution:
    R1: tuple[int, ...]
    R2: tuple[int, ...]
    value: float
    updates: int = 0


def _lottery_parts(v: np.ndarray, pi: np.ndarray, R: Sequence[int]) -> tuple[float, float]:
    lot = lottery_from_rol(dict(enumerate(pi.tolist())), R)
    return sum(p * v[j] for j, p in lot.assign.items()), lot.waitlist


def total_value(problem: PolicyProblem, R1: Sequence[int], R2: Sequence[int]) -> float:
    """Objective of a pair of lists, evaluated in the order given."""
    R1, R2 = validate_rol(R1, problem.K), validate_rol(R2, problem.K)
    vl1, p1 = _lottery_parts(problem.v, problem.pi1, R1)
    vl2, p2 = _lottery_parts(problem.v, problem.pi2, R2)
    dt, D = horizon_weights(problem.a0, problem.delta)
    O2 = sum(problem.delta**k * problem.v0[problem.a0 + k] for k in range(1, 6 - problem.a0))
    v0a0 = problem.v0[problem.a0]
    if problem.mode == SUCCINCT:
        pt = dt / (1 + dt) * p1
        return (1 - pt) * vl1 + pt * vl2 + v0a0 * p1 + O2 * p2
    return D * vl1 + p1 * ((1 - p2) * (v0a0 + dt * (vl2 / (1 - p2) if p2 < 1 else 0.0))
                           + p2 * (v0a0 + O2))


def single_period_value(v: np.ndarray, v0: float, pi: np.ndarray, R: Sequence[int]) -> float:
    vl, p = _lottery_parts(np.asarray(v, float), np.asarray(pi, float), R)
    return vl + p * v0


def best_single_period_rol(v, v0_effective: float, pi, K: int = MAX_LIST) -> tuple[int, ...]:
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    v = np.ascontiguousarray(v, dtype=float)
    pi = np.ascontiguousarray(pi, dtype=float)
    out = np.empty(K, dtype=np.int64)
    n = _mia(v, pi, float(v0_effective), K, out)
    return tuple(int(j) for j in out[:n])


def solve_pair(problem: PolicyProblem) -> PairSolution:
    K = problem.K
    r1 = np.empty(K, dtype=np.int64)
    r2 = np.empty(K, dtype=np.int64)
    n1, n2, upd, val = _approx_one(
        problem.v, problem.v0, problem.a0, problem.pi1, problem.pi2,
        K, problem.delta, problem.mode == SUCCINCT, r1, r2,
    )
    return PairSolution(tuple(int(j) for j in r1[:n1]), tuple(int(j) for j in r2[:n2]), float(val), int(upd))


def approx_optimal_pair(problem: PolicyProblem) -> tuple[tuple[int, ...], tuple[int, ...]]:
    sol = solve_pair(problem)
    return sol.R1, sol.R2


def canonical_lists(J: int, K: int) -> np.ndarray:
    """Every subset of ``range(J)`` with at most ``K`` elements, as rank
    positions in ascending order (so mapping through a descending-utility
    order yields canonical lists).  Padded with -1."""
    rows = [c for k in range(K + 1) for c in itertools.combinations(range(J), k)]
    out = np.full((len(rows), max(K, 1)), -1, dtype=np.int64)
    for i, c in enumerate(rows):
        out[i, : len(c)] = c
    return out


def _lists_parts(v: np.ndarray, pi: np.ndarray, lists: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vp = np.append(v, 0.0)
    pp = np.append(pi, 0.0)
    idx = np.where(lists < 0, v.size, lists)
    P = pp[idx]
    surv_before = np.cumprod(np.hstack([np.ones((P.shape[0], 1)), 1 - P[:, :-1]]), axis=1)
    return (vp[idx] * P * surv_before).sum(axis=1), np.prod(1 - P, axis=1)


def _pair_matrix(problem: PolicyProblem, lists: np.ndarray) -> np.ndarray:
    vl1, p1 = _lists_parts(problem.v, problem.pi1, lists)
    vl2, p2 = _lists_parts(problem.v, problem.pi2, lists)
    dt, D = horizon_weights(problem.a0, problem.delta)
    O2 = sum(problem.delta**k * problem.v0[problem.a0 + k] for k in range(1, 6 - problem.a0))
    v0a0 = problem.v0[problem.a0]
    if problem.mode == SUCCINCT:
        c = dt / D
        return ((1 - c * p1) * vl1 + v0a0 * p1)[:, None] + c * np.outer(p1, vl2) + (O2 * p2)[None, :]
    return (D * vl1)[:, None] + p1[:, None] * (v0a0 + dt * vl2 + p2 * O2)[None, :]


def brute_force_solution(problem: PolicyProblem, K: int | None = None,
                         max_pairs: int = 10**7) -> PairSolution:
    """Exact maximiser over all pairs of canonical lists of length <= K."""
    K = problem.K if K is None else K
    J = problem.n_centers
    n_lists = sum(math.comb(J, k) for k in range(K + 1))
    if n_lists**2 > max_pairs:
        raise EnumerationTooLarge(f"{n_lists}^2 pairs exceeds guard {max_pairs}")
    order = np.lexsort((np.arange(J), -problem.v))
    ranks = canonical_lists(J, K)
    lists = np.where(ranks < 0, -1, order[np.clip(ranks, 0, None)])
    W = _pair_matrix(problem, lists)
    i1, i2 = np.unravel_index(int(np.argmax(W)), W.shape)
    as_tuple = lambda row: tuple(int(j) for j in row if j >= 0)  # noqa: E731
    return PairSolution(as_tuple(lists[i1]), as_tuple(lists[i2]), float(W[i1, i2]))


def brute_force_optimal_pair(problem: PolicyProblem, K: int | None = None,
                             max_pairs: int = 10**7) -> tuple[tuple[int, ...], tuple[int, ...]]:
    sol = brute_force_solution(problem, K, max_pairs)
    return sol.R1, sol.R2


# ---------------------------------------------------------------------------
# diagnostics


def synthetic_benchmark_belief(J: int = 10, seed: int = 0, score: int = 26, bonus: int = 2,
                               spread: tuple[float, float] = (23.0, 30.0),
                               noise: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Stand-in for single-center admission chances at one score.

    Each center's cutoff is modelled as normal around a center-specific mean,
    so ``pi(s) = Phi((s + 0.5 - m_j) / noise)``; period 2 uses ``score + bonus``.
    """
    rng = np.random.default_rng(seed)
    m = rng.uniform(*spread, size=J)
    pi1 = ndtr((score + 0.5 - m) / noise)
    pi2 = ndtr((score + bonus + 0.5 - m) / noise)
    return pi1, pi2


BENCH_C_TABLE = (0.0, 1.0, 2.0)
BENCH_C_TEXT = (0.0, 0.5, 1.0)


def mia_benchmark(
    J: int = 10,
    K: int = 3,
    M: int = 1000,
    c_list: Sequence[float] = BENCH_C_TABLE,
    seed: int = 0,
    pi1: np.ndarray | None = None,
    pi2: np.ndarray | None = None,
    a0: int = 0,
    delta: float = 0.95,
    v0: float | np.ndarray = 0.0,
    tol: float = 1e-9,
) -> list[dict]:
    """How often the swap/drop approximation attains the exhaustive optimum.

    For each ``c``, draw ``v_j ~ N(c (1 - pi1_j), 1)`` ``M`` times.  Returns one
    row per ``c`` with the success fraction and the distribution of the number
    of swap/drop updates.
    """
    if pi1 is None or pi2 is None:
        pi1, pi2 = synthetic_benchmark_belief(J, seed)
    pi1 = np.asarray(pi1, float)
    pi2 = np.asarray(pi2, float)
    v0v = np.broadcast_to(np.asarray(v0, float), (N_AGES,)).copy()
    ranks = canonical_lists(J, K)
    rows = []
    for ci, c in enumerate(c_list):
        rng = np.random.default_rng([seed, ci])
        V = rng.normal(c * (1 - pi1), 1.0, size=(M, J))
        V0 = np.tile(v0v, (M, 1))
        _, _, upd, approx_val = approx_batch(
            V, V0, np.full(M, a0, dtype=np.int64), np.tile(pi1, (M, 1)), np.tile(pi2, (M, 1)),
            K, delta, False,
        )
        correct = 0
        for m in range(M):
            prob = PolicyProblem(V[m], v0v, a0, pi1, pi2, delta=delta, K=K)
            order = np.lexsort((np.arange(J), -V[m]))
            lists = np.where(ranks < 0, -1, order[np.clip(ranks, 0, None)])
            best = _pair_matrix(prob, lists).max()
            correct += approx_val[m] >= best - tol
        hist = np.bincount(np.minimum(upd, 5), minlength=6) / M
        row = {"c": float(c), "fraction_correct": correct / M}
        row.update({f"updates_{k}": float(hist[k]) for k in range(5)})
        row["updates_5plus"] = float(hist[5])
        rows.append(row)
    return rows


def objective_mode_agreement(n: int = 500, J: int = 4, K: int = 2, seed: int = 0,
                             a0: int = 0, delta: float = 0.95) -> float:
    """Share of random instances where both objectives pick the same pair."""
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(n):
        v = rng.standard_normal(J)
        v0 = rng.standard_normal(N_AGES) * 0.5
        pi1 = rng.uniform(size=J)
        pi2 = np.minimum(1.0, pi1 + rng.uniform(0, 0.5, size=J))
        a = PolicyProblem(v, v0, a0, pi1, pi2, delta=delta, K=K, mode=EXPANDED)
        b = PolicyProblem(v, v0, a0, pi1, pi2, delta=delta, K=K, mode=SUCCINCT)
        sa, sb = brute_force_solution(a), brute_force_solution(b)
        agree += (sa.R1, sa.R2) == (sb.R1, sb.R2)
    return agree / n


def lookup_beliefs(
    belief: LotteryBelief,
    cell1: np.ndarray,
    cell2: list[CellKey | None],
    s1: np.ndarray,
    bonus: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(N, J) period-1 and period-2 admission chances for a population.

    ``cell1`` is (N, 2) of (year, age); ``cell2`` may hold ``None`` where no
    second period exists, which yields zero chances.
    """
    N = s1.size
    J = len(belief.centers)
    P1 = np.empty((N, J))
    P2 = np.zeros((N, J))
    s2 = np.clip(s1 + bonus, belief.lo, belief.hi)
    for i in range(N):
        P1[i] = belief.tables[(int(cell1[i, 0]), int(cell1[i, 1]))][:, int(s1[i]) - belief.lo]
        if cell2[i] is not None:
            P2[i] = belief.tables[cell2[i]][:, int(s2[i]) - belief.lo]
    return P1, P2


__all__ = [
    "Theta", "UtilityDraw", "PolicyProblem", "PairSolution", "ParameterError",
    "flow_utility", "draw_utilities", "population_utilities", "StandardShocks",
    "total_value", "single_period_value", "best_single_period_rol", "approx_optimal_pair",
    "solve_pair", "brute_force_optimal_pair", "brute_force_solution", "mia_benchmark",
    "synthetic_benchmark_belief", "objective_mode_agreement", "approx_batch", "lookup_beliefs",
    "SCORE_MIN", "SCORE_MAX",
]
