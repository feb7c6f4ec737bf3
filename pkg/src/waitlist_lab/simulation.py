"""Array-level market simulation shared by generation, estimation and
counterfactuals.

A market is a grid of (year, age) cells.  Entrants apply with ``R1`` at their
entry cell; waitlisted entrants with a nonempty ``R2`` reapply one year later,
one age up, with the bonus-adjusted score.  Seats taken at age ``a`` stay
occupied at age ``a + 1`` the following year.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .lottery import CellKey, LotteryBelief, bootstrap_codes, pi_table
from .mechanism import MAX_LIST, SCORE_MAX, SCORE_MIN, cutoff_codes, sd_assign
from .policy import approx_batch, lookup_beliefs
from .seeding import derive_seed

log = logging.getLogger(__name__)

WAITLISTED = -1
NOT_APPLICABLE = -2
UNOBSERVED = -3


@dataclass
class Population:
    ids: np.ndarray
    entry_year: np.ndarray
    entry_age: np.ndarray
    area: np.ndarray
    s1: np.ndarray
    tiebreak: np.ndarray

    def __len__(self) -> int:
        return self.ids.size

    def same_area(self, center_area: np.ndarray) -> np.ndarray:
        return (self.area[:, None] == np.asarray(center_area)[None, :]).astype(float)

    def subset(self, mask: np.ndarray) -> "Population":
        return Population(*(getattr(self, f)[mask] for f in
                            ("ids", "entry_year", "entry_age", "area", "s1", "tiebreak")))


@dataclass
class MarketStructure:
    center_ids: list[int]
    center_area: np.ndarray
    capacity: np.ndarray  # (J, 6) seats per age class
    incumbents: np.ndarray  # (J, 6) occupied seats entering year 0
    n_years: int
    ages: tuple[int, ...]
    n_areas: int
    lo: int = SCORE_MIN
    hi: int = SCORE_MAX

    @property
    def n_centers(self) -> int:
        return len(self.center_ids)

    def cells(self) -> list[CellKey]:
        return [(y, a) for y in range(self.n_years) for a in self.ages]

    def period2_cell(self, year: int, age: int) -> tuple[CellKey | None, bool]:
        """Cell whose belief governs reapplication, and whether it is simulated.

        Falls back to the same-year cell one age up when the next year lies
        beyond the panel; returns ``None`` when no older age is simulated.
        """
        if age >= 5 or (age + 1) not in self.ages:
            return None, False
        if year + 1 < self.n_years:
            return (year + 1, age + 1), True
        return (year, age + 1), False


@dataclass
class Pool:
    """A cell's applicants in priority order, as seen by the mechanism."""

    idx: np.ndarray  # population rows
    scores: np.ndarray
    rols: np.ndarray
    vacancy: np.ndarray
    reapplicant: np.ndarray


@dataclass
class SimOutcome:
    R1: np.ndarray
    R2: np.ndarray
    out1: np.ndarray
    out2: np.ndarray
    s2: np.ndarray
    cutoffs: dict[CellKey, np.ndarray]
    pools: dict[CellKey, Pool]


def simulate_market(
    pop: Population,
    struct: MarketStructure,
    R1: np.ndarray,
    R2: np.ndarray,
    bonus: int,
) -> SimOutcome:
    N = len(pop)
    J = struct.n_centers
    out1 = np.full(N, WAITLISTED, dtype=np.int64)
    out2 = np.full(N, NOT_APPLICABLE, dtype=np.int64)
    s2 = np.clip(pop.s1 + bonus, struct.lo, struct.hi)
    cutoffs: dict[CellKey, np.ndarray] = {}
    pools: dict[CellKey, Pool] = {}
    occ = struct.incumbents.astype(np.int64).copy()
    has_r2 = R2[:, 0] >= 0
    for y in range(struct.n_years):
        taken = np.zeros((J, 6), dtype=np.int64)
        for a in struct.ages:
            vac = np.clip(struct.capacity[:, a] - occ[:, a], 0, None).astype(np.int64)
            ent = np.flatnonzero((pop.entry_year == y) & (pop.entry_age == a))
            rea = np.flatnonzero(
                (pop.entry_year == y - 1) & (pop.entry_age == a - 1) & (out1 == WAITLISTED) & has_r2
            )
            idx = np.concatenate([ent, rea])
            scores = np.concatenate([pop.s1[ent], s2[rea]])
            rols = np.concatenate([R1[ent], R2[rea]]).reshape(-1, R1.shape[1])
            order = np.lexsort((pop.tiebreak[idx], -scores))
            idx, scores, rols = idx[order], scores[order], np.ascontiguousarray(rols[order])
            is_re = np.concatenate([np.zeros(ent.size, bool), np.ones(rea.size, bool)])[order]
            assign, remaining, last = sd_assign(rols, vac)
            cutoffs[(y, a)] = cutoff_codes(vac, remaining, last, scores)
            out1[idx[~is_re]] = assign[~is_re]
            out2[idx[is_re]] = assign[is_re]
            np.add.at(taken[:, a], assign[assign >= 0], 1)
            pools[(y, a)] = Pool(idx, scores, rols, vac, is_re)
        occ_next = np.zeros_like(occ)
        occ_next[:, 1:] = (occ + taken)[:, :-1]
        occ = occ_next
    # waitlisted entrants who do not reapply; second rounds outside the panel are unobserved
    wl = out1 == WAITLISTED
    out2[wl & ~has_r2] = WAITLISTED
    for i in np.flatnonzero(wl):
        _, observed = struct.period2_cell(int(pop.entry_year[i]), int(pop.entry_age[i]))
        if not observed:
            out2[i] = UNOBSERVED
    out2[wl & (pop.entry_age >= 5)] = NOT_APPLICABLE
    return SimOutcome(R1, R2, out1, out2, s2, cutoffs, pools)


def bootstrap_belief(
    sim: SimOutcome, struct: MarketStructure, B: int, seed: int
) -> LotteryBelief:
    grid = np.arange(struct.lo, struct.hi + 1)
    tables = {}
    for key, pool in sim.pools.items():
        codes = bootstrap_codes(
            pool.rols, pool.scores, pool.vacancy, B, derive_seed(seed, f"bootstrap/{key[0]}/{key[1]}")
        )
        tables[key] = pi_table(codes, grid)
    return LotteryBelief(list(struct.center_ids), tables, struct.lo, struct.hi)


def belief_cells(pop: Population, struct: MarketStructure) -> tuple[np.ndarray, list]:
    cell1 = np.stack([pop.entry_year, pop.entry_age], axis=1)
    cell2 = [struct.period2_cell(int(y), int(a))[0] for y, a in cell1]
    return cell1, cell2


def solve_population(
    pop: Population,
    struct: MarketStructure,
    V: np.ndarray,
    V0: np.ndarray,
    belief: LotteryBelief,
    bonus: int,
    delta: float,
    K: int = MAX_LIST,
    cells: tuple[np.ndarray, list] | None = None,
    succinct: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cell1, cell2 = cells if cells is not None else belief_cells(pop, struct)
    P1, P2 = lookup_beliefs(belief, cell1, cell2, pop.s1, bonus)
    R1, R2, upd, _ = approx_batch(
        np.ascontiguousarray(V), np.ascontiguousarray(V0), pop.entry_age.astype(np.int64),
        P1, P2, K, delta, succinct,
    )
    return R1, R2, upd


def sincere_rols(V: np.ndarray, V0: np.ndarray, entry_age: np.ndarray, K: int = MAX_LIST):
    """Top-K centers above the current outside option, for both periods."""
    N = V.shape[0]
    rows = np.arange(N)
    order = np.argsort(-V, axis=1, kind="stable")[:, :K].astype(np.int64)
    vals = np.take_along_axis(V, order, axis=1)
    R1 = np.where(vals > V0[rows, entry_age][:, None], order, -1)
    R2 = np.where(vals > V0[rows, np.minimum(entry_age + 1, 5)][:, None], order, -1)
    R2[entry_age >= 5] = -1
    # keep padding contiguous at the end of each row
    return _compact(R1), _compact(R2)


def _compact(R: np.ndarray) -> np.ndarray:
    out = np.full_like(R, -1)
    for i in range(R.shape[0]):
        row = R[i][R[i] >= 0]
        out[i, : row.size] = row
    return out


@dataclass
class FixedPoint:
    belief: LotteryBelief
    previous: LotteryBelief
    converged: bool
    iterations: int
    changes: list[float] = field(default_factory=list)
    oscillating: bool = False
    sim: SimOutcome | None = None
    updates: np.ndarray | None = None


def fixed_point_belief(
    pop: Population,
    struct: MarketStructure,
    V: np.ndarray,
    V0: np.ndarray,
    belief0: LotteryBelief,
    bonus: int,
    delta: float,
    B: int,
    seed: int,
    epsilon: float = 0.01,
    max_iters: int = 50,
    damping: float = 0.0,
    K: int = MAX_LIST,
) -> FixedPoint:
    """Iterate beliefs -> optimal lists -> assignments -> bootstrap beliefs.

    Stops once the relative Frobenius change of the stacked admission table
    is at most ``epsilon`` or after ``max_iters`` rounds.  ``sim`` is the
    market realised under the belief held going into the last round.
    """
    cells = belief_cells(pop, struct)
    belief = belief0
    changes: list[float] = []
    sim = None
    upd = None
    prev = belief0
    for k in range(1, max_iters + 1):
        R1, R2, upd = solve_population(pop, struct, V, V0, belief, bonus, delta, K, cells)
        sim = simulate_market(pop, struct, R1, R2, bonus)
        new = bootstrap_belief(sim, struct, B, derive_seed(seed, f"iter/{k}"))
        if damping > 0:
            new = new.blend(belief, damping)
        change = new.relative_change(belief)
        changes.append(change)
        prev, belief = belief, new
        log.debug("fixed point iteration %d: relative change %.5f", k, change)
        if change <= epsilon:
            break
    converged = bool(changes) and changes[-1] <= epsilon
    oscillating = len(changes) >= 4 and not converged and _oscillates(changes)
    return FixedPoint(belief, prev, converged, len(changes), changes, oscillating, sim, upd)


def _oscillates(changes: list[float]) -> bool:
    d = np.diff(changes[-4:])
    return bool(np.all(d[:-1] * d[1:] < 0))


def realized_welfare(
    sim: SimOutcome, pop: Population, V: np.ndarray, V0: np.ndarray, delta: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-applicant ``(V1, V2, V)`` with ``V = V1 + delta * V2``.

    ``V1`` is the flow in the entry year, ``V2`` the discounted stream from
    age ``a0 + 1`` to 5 valued at age ``a0 + 1``.  Applicants whose second
    period falls outside the panel get NaN.
    """
    N = len(pop)
    rows = np.arange(N)
    a0 = pop.entry_age
    disc = np.array([sum(delta**k for k in range(5 - a)) for a in range(6)])
    tail = np.zeros((N,))
    for a in range(5):
        m = a0 == a
        if m.any():
            w = delta ** np.arange(5 - a)
            tail[m] = V0[m][:, a + 1:] @ w
    v_out1 = V[rows, np.clip(sim.out1, 0, None)]
    v_out2 = V[rows, np.clip(sim.out2, 0, None)]
    V1 = np.where(sim.out1 >= 0, v_out1, V0[rows, a0])
    V2 = np.where(
        sim.out1 >= 0,
        v_out1 * disc[a0],
        np.where(sim.out2 >= 0, v_out2 * disc[a0], np.where(sim.out2 == WAITLISTED, tail, 0.0)),
    )
    V2 = np.where((sim.out1 < 0) & (sim.out2 == UNOBSERVED), np.nan, V2)
    return V1, V2, V1 + delta * V2
