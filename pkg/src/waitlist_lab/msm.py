"""Second-stage preference estimation by simulated method of moments.

Each applicant in the estimation cohort contributes a vector of individual
moments (listing indicators for both lists, the same interacted with the
initial score, waitlist indicators, DropSafety and not reapplying).  The
simulated counterpart averages the same encoding over ``S`` utility draws,
with every draw run through the full market so that later cells see the
seats taken earlier.  Draw ``s`` always uses the named stream ``"sim/{s}"``,
which makes the objective a deterministic function of the parameters.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .lottery import CellKey, LotteryBelief
from .market import ApplicantHistory, Panel, drop_safety, drop_safety_array
from .mechanism import MAX_LIST, Cutoff, InvalidInputError
from .policy import N_AGES, StandardShocks, Theta, approx_batch, lookup_beliefs, population_utilities
from .seeding import derive_seed
from .simulation import UNOBSERVED, WAITLISTED, belief_cells, simulate_market

log = logging.getLogger(__name__)

BLOCKS = ("alpha", "beta", "sigma", "mu0", "sigma0sq", "idio_var")


def moment_length(J: int) -> int:
    return 4 * J + 4


def moment_labels(center_ids: Sequence[int]) -> list[str]:
    c = list(center_ids)
    return ([f"in_R1[{j}]" for j in c] + [f"in_R1[{j}]*s1" for j in c] + ["waitlisted_1"]
            + [f"in_R2[{j}]" for j in c] + [f"in_R2[{j}]*s1" for j in c] + ["waitlisted_2"]
            + ["drop_safety", "no_reapply"])


def individual_moments(
    history: ApplicantHistory, cutoffs: Mapping[int, Cutoff], center_ids: Sequence[int]
) -> np.ndarray:
    """Moment vector of one applicant; ``cutoffs`` are those of her entry cell."""
    J = len(center_ids)
    idx = {c: k for k, c in enumerate(center_ids)}
    m = np.zeros(moment_length(J))
    for j in history.R1:
        m[idx[j]] = 1.0
        m[J + idx[j]] = history.s1
    if history.waitlisted:
        m[2 * J] = 1.0
        R2 = history.R2 or ()
        for j in R2:
            m[2 * J + 1 + idx[j]] = 1.0
            m[3 * J + 1 + idx[j]] = history.s1
        m[4 * J + 1] = float(history.outcome2 is None)
        m[4 * J + 2] = float(drop_safety(history, cutoffs))
        m[4 * J + 3] = float(len(R2) == 0)
    return m


def moments_array(
    R1: np.ndarray, R2: np.ndarray, out1: np.ndarray, out2: np.ndarray,
    s1: np.ndarray, codes1: np.ndarray,
) -> np.ndarray:
    """Row-wise :func:`individual_moments` on index-coded arrays."""
    N, J = codes1.shape
    rows = np.arange(N)
    m = np.zeros((N, moment_length(J)))
    wl = out1 == WAITLISTED
    R2 = np.where(wl[:, None], R2, -1)
    for k in range(R1.shape[1]):
        ok = R1[:, k] >= 0
        m[rows[ok], R1[ok, k]] = 1.0
        ok = R2[:, k] >= 0
        m[rows[ok], 2 * J + 1 + R2[ok, k]] = 1.0
    m[:, J:2 * J] = m[:, :J] * s1[:, None]
    m[:, 3 * J + 1:4 * J + 1] = m[:, 2 * J + 1:3 * J + 1] * s1[:, None]
    m[:, 2 * J] = wl
    m[:, 4 * J + 1] = wl & (out2 < 0)
    m[:, 4 * J + 2] = drop_safety_array(R1, R2, codes1, s1) * wl
    m[:, 4 * J + 3] = wl & (R2[:, 0] < 0)
    return m


# ---------------------------------------------------------------------------
# parameter vector <-> Theta


@dataclass
class ThetaMap:
    """Free parameters of a :class:`Theta` as a flat vector.

    ``alpha`` is searched as ``alpha + beta * s_ref`` so that the level and
    slope move independently; ``sigma`` through its lower-triangular factor;
    variances through their square roots.  ``gamma``, ``delta`` and the
    normalised outside-option mean never move.
    """

    template: Theta
    blocks: tuple[str, ...] = ("alpha", "beta")
    s_ref: float = 25.0

    def __post_init__(self) -> None:
        for b in self.blocks:
            if b not in BLOCKS:
                raise ValueError(f"unknown parameter block {b!r}; choose from {BLOCKS}")

    def _free_mu(self) -> list[int]:
        return [a for a in range(N_AGES) if a != self.template.normalized_age]

    def to_vector(self, theta: Theta) -> np.ndarray:
        parts = []
        for b in self.blocks:
            if b == "alpha":
                parts.append(theta.alpha + theta.beta * self.s_ref)
            elif b == "beta":
                parts.append(theta.beta)
            elif b == "sigma":
                L = np.linalg.cholesky(theta.sigma + 1e-12 * np.eye(len(theta.sigma)))
                parts.append(L[np.tril_indices(len(L))])
            elif b == "mu0":
                parts.append(theta.mu0[self._free_mu()])
            elif b == "sigma0sq":
                parts.append(np.sqrt(theta.sigma0sq))
            elif b == "idio_var":
                parts.append(np.array([np.sqrt(theta.idio_var)]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def from_vector(self, x: np.ndarray) -> Theta:
        th = self.template.copy()
        x = np.asarray(x, dtype=float)
        k = 0
        level = None
        for b in self.blocks:
            if b == "alpha":
                level = x[k:k + th.n_centers]
                k += th.n_centers
            elif b == "beta":
                th.beta = x[k:k + th.n_centers].copy()
                k += th.n_centers
            elif b == "sigma":
                n = len(th.sigma)
                L = np.zeros((n, n))
                m = n * (n + 1) // 2
                L[np.tril_indices(n)] = x[k:k + m]
                th.sigma = L @ L.T
                k += m
            elif b == "mu0":
                free = self._free_mu()
                th.mu0 = th.mu0.copy()
                th.mu0[free] = x[k:k + len(free)]
                k += len(free)
            elif b == "sigma0sq":
                th.sigma0sq = x[k:k + N_AGES] ** 2
                k += N_AGES
            elif b == "idio_var":
                th.idio_var = float(x[k] ** 2)
                k += 1
        if level is not None:
            th.alpha = level - th.beta * self.s_ref
        return th

    def size(self) -> int:
        return self.to_vector(self.template).size

    def steps(self, base: float) -> np.ndarray:
        """Per-coordinate simplex steps; slopes move on the score scale."""
        J = self.template.n_centers
        n_s = len(self.template.sigma)
        scale = {"alpha": (J, 1.0), "beta": (J, 0.1), "sigma": (n_s * (n_s + 1) // 2, 0.5),
                 "mu0": (N_AGES - 1, 1.0), "sigma0sq": (N_AGES, 0.5), "idio_var": (1, 0.5)}
        return np.concatenate([np.full(scale[b][0], base * scale[b][1]) for b in self.blocks])

    def shift_levels(self, theta: Theta, c: float) -> Theta:
        th = theta.copy()
        th.alpha = th.alpha + c
        return th


# ---------------------------------------------------------------------------
# the simulated-moment model


@dataclass
class MsmConfig:
    S: int = 100
    budget: int = 400  # objective evaluations per stage
    seed: int = 0
    noise_seed: int | None = None
    tol: float = 1e-4
    blocks: tuple[str, ...] = ("alpha", "beta")
    cohort_ages: tuple[int, ...] = (0,)
    initial_step: float = 0.5
    restarts: int = 3
    two_stage: bool = True

    def validate(self) -> None:
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")


class MomentModel:
    """Observed moments of a panel and their simulated counterparts."""

    def __init__(self, panel: Panel, belief: LotteryBelief, S: int, seed: int,
                 cohort_ages: Sequence[int] = (0,), K: int = MAX_LIST):
        if S < 1:
            raise ValueError("S must be at least 1")
        self.panel = panel
        self.S = int(S)
        self.seed = int(seed)
        self.K = K
        pop, st, sim = panel.population, panel.structure, panel.sim
        self.J = st.n_centers
        self.L = moment_length(self.J)
        cohort = np.isin(pop.entry_age, list(cohort_ages))
        observed2 = np.array(
            [st.period2_cell(int(y), int(a))[1] for y, a in zip(pop.entry_year, pop.entry_age)], dtype=bool
        ) if len(pop) else np.zeros(0, bool)
        self.rows = np.flatnonzero(cohort & observed2)
        keys = sorted({(int(pop.entry_year[i]), int(pop.entry_age[i])) for i in self.rows})
        self.cells: list[CellKey] = keys
        self.cell_of = np.array(
            [keys.index((int(pop.entry_year[i]), int(pop.entry_age[i]))) for i in self.rows], dtype=np.int64
        )
        self.n = self.rows.size
        self.m_obs = self._moments(sim, self.rows)
        cell1, cell2 = belief_cells(pop, st)
        self.P1, self.P2 = lookup_beliefs(belief, cell1, cell2, pop.s1, panel.bonus)
        self.same_area = pop.same_area(st.center_area)
        self.shocks = [
            StandardShocks.draw(len(pop), st.n_areas, self.J, derive_seed(self.seed, f"sim/{s}"))
            for s in range(self.S)
        ]
        self._cache: dict[bytes, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return len(self.cells) * self.L

    def _moments(self, sim, rows: np.ndarray) -> np.ndarray:
        pop = self.panel.population
        codes1 = np.stack([sim.cutoffs[(int(pop.entry_year[i]), int(pop.entry_age[i]))] for i in rows]) \
            if rows.size else np.zeros((0, self.J), np.int64)
        return moments_array(sim.R1[rows], sim.R2[rows], sim.out1[rows], sim.out2[rows],
                             pop.s1[rows], codes1)

    def simulated(self, theta: Theta) -> np.ndarray:
        """(n, L) simulated moments averaged over the ``S`` draws."""
        key = _theta_key(theta)
        if key in self._cache:
            return self._cache[key]
        pop, st = self.panel.population, self.panel.structure
        acc = np.zeros((self.n, self.L))
        a0 = pop.entry_age.astype(np.int64)
        for shocks in self.shocks:
            V, V0 = population_utilities(theta, pop.s1, self.same_area, st.center_area, shocks)
            R1, R2, _, _ = approx_batch(V, np.ascontiguousarray(V0), a0, self.P1, self.P2,
                                        self.K, theta.delta, False)
            sim = simulate_market(pop, st, R1, R2, self.panel.bonus)
            acc += self._moments(sim, self.rows)
        out = acc / self.S
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = out
        return out

    def individual_gaps(self, theta: Theta) -> np.ndarray:
        """(n, dim): each applicant's gap placed in her cell's block."""
        g = self.m_obs - self.simulated(theta)
        H = np.zeros((self.n, self.dim))
        for c in range(len(self.cells)):
            m = self.cell_of == c
            H[m, c * self.L:(c + 1) * self.L] = g[m]
        return H

    def gap(self, theta: Theta) -> np.ndarray:
        """Stacked mean gap; block ``c`` equals the within-cell mean times the
        cell's share of the cohort."""
        if self.n == 0:
            raise InvalidInputError("estimation cohort is empty")
        g = self.m_obs - self.simulated(theta)
        out = np.zeros(self.dim)
        for c in range(len(self.cells)):
            out[c * self.L:(c + 1) * self.L] = g[self.cell_of == c].sum(axis=0) / self.n
        return out

    def cell_gaps(self, theta: Theta) -> dict[CellKey, np.ndarray]:
        g = self.m_obs - self.simulated(theta)
        return {k: g[self.cell_of == c].mean(axis=0) for c, k in enumerate(self.cells)}

    def objective(self, theta: Theta, W: np.ndarray | None = None) -> float:
        h = self.gap(theta)
        return float(h @ h) if W is None else float(h @ W @ h)


def _theta_key(theta: Theta) -> bytes:
    return b"".join(np.ascontiguousarray(np.asarray(v, dtype=float)).tobytes()
                    for v in (theta.alpha, theta.beta, theta.sigma, theta.mu0, theta.sigma0sq,
                              [theta.idio_var, theta.gamma, theta.delta]))


def simulated_moment_gap(theta: Theta, panel: Panel, belief: LotteryBelief, S: int, seed: int,
                         cohort_ages: Sequence[int] = (0,)) -> np.ndarray:
    return MomentModel(panel, belief, S, seed, cohort_ages).gap(theta)


# ---------------------------------------------------------------------------
# weighting


@dataclass
class WeightMatrix:
    S: np.ndarray
    inverse: np.ndarray
    singular: bool


def weight_matrix(H: np.ndarray, rng: np.random.Generator | None = None, noise: bool = True) -> WeightMatrix:
    """``S = (1/n) sum (h_i + u_i)(h_i + u_i)'`` with ``u_i ~ N(0, I)``.

    ``H`` is (n, d).  Without noise a rank-deficient ``S`` is flagged and
    inverted by pseudo-inverse.
    """
    H = np.asarray(H, dtype=float)
    n, d = H.shape
    if n == 0:
        raise InvalidInputError("weight matrix needs at least one applicant")
    X = H + rng.standard_normal((n, d)) if noise else H
    S = X.T @ X / n
    S = 0.5 * (S + S.T)
    try:
        c = scipy.linalg.cho_factor(S, lower=True)
        inv = scipy.linalg.cho_solve(c, np.eye(d))
        singular = bool(np.linalg.cond(S) > 1e12)
    except np.linalg.LinAlgError:
        inv = scipy.linalg.pinvh(S)
        singular = True
    if singular:
        inv = scipy.linalg.pinvh(S)
    return WeightMatrix(S, 0.5 * (inv + inv.T), singular)


def weight_matrix_at(theta_init: Theta, model: MomentModel, seed: int) -> WeightMatrix:
    return weight_matrix(model.individual_gaps(theta_init), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    theta_hat: Theta
    theta_init: Theta
    q_hat: float
    trajectory: list[dict] = field(default_factory=list)
    budget_exhausted: bool = False
    weight: WeightMatrix | None = None
    moment_fit: list[dict] = field(default_factory=list)
    evaluations: int = 0


def start_from_shares(panel: Panel, template: Theta, rows: np.ndarray | None = None) -> Theta:
    """Rough starting point: levels follow log listing shares, slopes zero."""
    sim = panel.sim
    R1 = sim.R1 if rows is None else sim.R1[rows]
    J = panel.structure.n_centers
    share = np.array([(R1 == j).any(axis=1).mean() for j in range(J)]) if len(R1) else np.full(J, 0.5)
    th = template.copy()
    lvl = np.log(np.clip(share, 0.01, 0.99) / (1 - np.clip(share, 0.01, 0.99)))
    th.alpha = lvl - lvl.mean() + float(np.mean(template.mu0))
    th.beta = np.zeros(J)
    return th


def _level_search(model: MomentModel, tmap: ThetaMap, theta: Theta, traj: list[dict],
                  grid: Sequence[float] = tuple(np.arange(-2.0, 8.01, 1.0))) -> Theta:
    """Common shift of all center levels that best fits under identity weight."""
    best, best_q = theta, np.inf
    for c in grid:
        th = tmap.shift_levels(theta, float(c))
        qv = model.objective(th)
        traj.append({"iteration": len(traj), "stage": "start", "Q": qv, "best_Q": min(qv, best_q)})
        if qv < best_q:
            best, best_q = th, qv
    return best


def _minimize(fun, x0: np.ndarray, budget: int, step: np.ndarray, tol: float, restarts: int,
              stage: str, trajectory: list[dict]) -> tuple[np.ndarray, float, bool]:
    best_x = np.asarray(x0, float).copy()
    best_f = fun(best_x)
    used = 1
    trajectory.append({"iteration": len(trajectory), "stage": stage, "Q": best_f, "best_Q": best_f})

    def wrapped(x):
        nonlocal best_x, best_f, used
        f = fun(x)
        used += 1
        if f < best_f:
            best_x, best_f = np.array(x, float), f
        trajectory.append({"iteration": len(trajectory), "stage": stage, "Q": f, "best_Q": best_f})
        return f

    if budget <= 0:
        return best_x, best_f, True
    d = best_x.size
    for r in range(restarts + 1):
        left = budget - used
        if left <= d + 1:
            break
        simplex = np.vstack([best_x] + [best_x + step[k] * np.eye(d)[k] for k in range(d)])
        res = minimize(wrapped, best_x, method="Nelder-Mead",
                       options={"maxfev": left, "initial_simplex": simplex,
                                "xatol": tol, "fatol": tol * max(best_f, 1e-12)})
        log.info("%s: restart %d ended at Q=%.6g after %d evaluations", stage, r, best_f, used)
        step *= 0.5
        if not res.success:
            break
    exhausted = used >= budget
    return best_x, best_f, exhausted


def fit(panel: Panel, belief: LotteryBelief, config: MsmConfig, template: Theta,
        start: Theta | None = None) -> FitResult:
    """Two-stage MSM: identity weight first, then the noisy inverse weight at
    the first-stage estimate.

    ``template`` supplies every parameter that is not estimated.  The search
    is a Nelder-Mead simplex with restarts; both stages share the same
    simulation draws.
    """
    config.validate()
    model = MomentModel(panel, belief, config.S, config.seed, config.cohort_ages)
    if model.n == 0:
        raise InvalidInputError("estimation cohort is empty")
    tmap = ThetaMap(template, tuple(config.blocks),
                    s_ref=float(panel.population.s1[model.rows].mean()))
    traj: list[dict] = []
    if start is None:
        theta0 = start_from_shares(panel, template, model.rows)
        if "alpha" in config.blocks and config.budget > 0:
            theta0 = _level_search(model, tmap, theta0, traj)
    else:
        theta0 = start
    steps = tmap.steps(config.initial_step)

    def q(x, W=None):
        try:
            th = tmap.from_vector(x)
            th.validate()
        except (ValueError, np.linalg.LinAlgError):
            return 1e10
        return model.objective(th, W)

    x1, f1, ex1 = _minimize(lambda x: q(x), tmap.to_vector(theta0), config.budget,
                            steps, config.tol, config.restarts, "identity", traj)
    theta_init = tmap.from_vector(x1)
    exhausted = ex1
    W = None
    theta_hat, q_hat = theta_init, f1
    if config.two_stage and config.budget > 0:
        noise_seed = config.noise_seed if config.noise_seed is not None else derive_seed(config.seed, "msm/noise")
        W = weight_matrix_at(theta_init, model, noise_seed)
        x2, f2, ex2 = _minimize(lambda x: q(x, W.inverse), x1, config.budget,
                                steps * 0.5, config.tol, config.restarts, "optimal", traj)
        theta_hat, q_hat = tmap.from_vector(x2), f2
        exhausted = exhausted or ex2
    if exhausted:
        warnings.warn("optimizer budget exhausted; returning best point found", RuntimeWarning, stacklevel=2)
    report = moment_fit_report(model, theta_hat)
    return FitResult(theta_hat, theta_init, q_hat, traj, exhausted, W, report, len(traj))


def moment_fit_report(model: MomentModel, theta: Theta) -> list[dict]:
    labels = moment_labels(model.panel.center_ids)
    sim = model.simulated(theta)
    rows = []
    for c, key in enumerate(model.cells):
        m = model.cell_of == c
        obs, fit_ = model.m_obs[m].mean(axis=0), sim[m].mean(axis=0)
        for k, lab in enumerate(labels):
            rows.append({"year": key[0], "age": key[1], "moment": lab,
                         "observed": float(obs[k]), "simulated": float(fit_[k]),
                         "gap": float(obs[k] - fit_[k])})
    return rows
