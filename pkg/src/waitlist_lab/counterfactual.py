"""Counterfactual equilibria under alternative waitlist bonuses.

For each bonus ``b`` and utility draw ``m`` the market is re-solved to a
belief fixed point: lists are re-optimised under the current admission
table, the market is run, and the table is re-estimated from bootstrap
resamples of the resulting pools.  Draw ``m`` uses the named stream
``"sim/{m}"``, shared across bonuses, so differences between scenarios are
not driven by fresh noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lottery import LotteryBelief
from .market import MarketConfig, population_from_config
from .mechanism import OPEN_CODE, SCORE_MAX, SCORE_MIN, code_to_sentinel
from .policy import StandardShocks, Theta, population_utilities
from .seeding import derive_seed
from .simulation import (
    NOT_APPLICABLE,
    UNOBSERVED,
    WAITLISTED,
    MarketStructure,
    Population,
    SimOutcome,
    fixed_point_belief,
    realized_welfare,
)

log = logging.getLogger(__name__)

BONUS_SWEEP = (-1, 0, 1, 2, 3)
SCORE_BUCKETS = (("<=25", None, 25), ("26", 26, 26), ("27", 27, 27), (">=28", 28, None))


@dataclass
class Scenario:
    b: int
    M: int = 7
    epsilon: float = 0.01
    max_iters: int = 50
    damping: float = 0.0
    B: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


@dataclass
class EquilibriumOutcome:
    b: int
    m: int
    converged: bool
    iterations: int
    changes: list[float]
    oscillating: bool
    belief: LotteryBelief
    delta: float
    population: Population
    sim: SimOutcome
    V1: np.ndarray
    V2: np.ndarray
    V: np.ndarray
    cell_summaries: list[dict] = field(default_factory=list)
    cutoff_hist: list[dict] = field(default_factory=list)


def iterate_equilibrium(
    theta: Theta,
    config: MarketConfig,
    scenario: Scenario,
    belief0: LotteryBelief,
    m: int = 0,
    population: Population | None = None,
) -> EquilibriumOutcome:
    """One ``(b, m)`` equilibrium starting from ``belief0``.

    Non-convergence is reported through ``converged=False``.
    """
    scenario.validate()
    st = config.structure()
    pop = population if population is not None else population_from_config(config, scenario.seed)
    shocks = StandardShocks.draw(len(pop), st.n_areas, st.n_centers, derive_seed(scenario.seed, f"sim/{m}"))
    V, V0 = population_utilities(theta, pop.s1, pop.same_area(st.center_area), st.center_area, shocks)
    fp = fixed_point_belief(
        pop, st, V, V0, belief0, scenario.b, theta.delta, scenario.B,
        derive_seed(scenario.seed, f"cf/{scenario.b}/{m}"),
        scenario.epsilon, scenario.max_iters, scenario.damping, config.K,
    )
    if not fp.converged:
        log.warning("b=%d m=%d: no fixed point after %d iterations (last change %.4f)",
                    scenario.b, m, fp.iterations, fp.changes[-1])
    V1, V2, Vt = realized_welfare(fp.sim, pop, V, V0, theta.delta)
    out = EquilibriumOutcome(
        scenario.b, m, fp.converged, fp.iterations, fp.changes, fp.oscillating, fp.belief,
        theta.delta, pop, fp.sim, V1, V2, Vt,
    )
    out.cell_summaries = _cell_summaries(out, st)
    out.cutoff_hist = cutoff_histogram_report(out)
    return out


def run_scenarios(
    theta: Theta,
    config: MarketConfig,
    scenarios: Sequence[Scenario],
    belief0: LotteryBelief,
) -> list[EquilibriumOutcome]:
    """Every ``(b, m)`` pair; the population is drawn once per seed."""
    outs = []
    pops: dict[int, Population] = {}
    for sc in scenarios:
        pop = pops.setdefault(sc.seed, population_from_config(config, sc.seed))
        for m in range(sc.M):
            outs.append(iterate_equilibrium(theta, config, sc, belief0, m, pop))
    return outs


def _cell_summaries(out: EquilibriumOutcome, st: MarketStructure) -> list[dict]:
    sim = out.sim
    rows = []
    for (y, a), pool in sorted(sim.pools.items()):
        n = pool.idx.size
        assigned = np.where(pool.reapplicant, sim.out2[pool.idx], sim.out1[pool.idx])
        rows.append({
            "b": out.b, "m": out.m, "year": y, "age": a, "applicants": n,
            "mean_list_length": float((pool.rols >= 0).sum(axis=1).mean()) if n else 0.0,
            "waitlist_share": float(np.mean(assigned < 0)) if n else 0.0,
        })
    return rows


def cutoff_histogram_report(out: EquilibriumOutcome) -> list[dict]:
    """Per-cell frequencies of realised cutoffs across centers.

    A center with no vacancy is recorded as 35 and one that never fills as
    11.
    """
    rows = []
    for (y, a), codes in sorted(out.sim.cutoffs.items()):
        vals = code_to_sentinel(codes)
        u, c = np.unique(vals, return_counts=True)
        for v, k in zip(u.tolist(), c.tolist()):
            rows.append({"year": y, "age": a, "b": out.b, "m": out.m,
                         "cutoff": int(v), "frequency": k / vals.size})
    return rows


def pooled_cutoff_histogram(outs: Iterable[EquilibriumOutcome]) -> list[dict]:
    """Cutoff frequencies per ``(year, age, b)`` pooled over draws."""
    counts: dict[tuple[int, int, int], dict[int, int]] = {}
    for o in outs:
        for (y, a), codes in o.sim.cutoffs.items():
            d = counts.setdefault((y, a, o.b), {})
            for v in code_to_sentinel(codes).tolist():
                d[v] = d.get(v, 0) + 1
    rows = []
    for (y, a, b), d in sorted(counts.items()):
        tot = sum(d.values())
        for v in sorted(d):
            rows.append({"year": y, "age": a, "b": b, "cutoff": v, "frequency": d[v] / tot})
    return rows


def _bucket(s: np.ndarray, lo, hi) -> np.ndarray:
    m = np.ones(s.shape, bool)
    if lo is not None:
        m &= s >= lo
    if hi is not None:
        m &= s <= hi
    return m


@dataclass
class WelfareReport:
    by_cell: list[dict]
    by_bucket: list[dict]

    CELL_COLUMNS = ["year", "entry_age", "b", "draws", "applicants", "mean_len1", "mean_len2",
                    "waitlist_share1", "waitlist_share2", "mean_V1", "mean_V2", "mean_V"]
    BUCKET_COLUMNS = ["bucket", "b", "n", "mean_V", "sd_V", "p10_V", "p25_V", "p50_V", "p75_V", "p90_V"]


def welfare_report(outs: Sequence[EquilibriumOutcome]) -> WelfareReport:
    """Behaviour and welfare per ``(year, entry age, b)`` pooled over draws,
    plus the V distribution by initial-score bucket.

    Second-period quantities use only applicants whose second round is
    inside the panel.
    """
    groups: dict[tuple[int, int, int], list[EquilibriumOutcome]] = {}
    for o in outs:
        for y, a in sorted(set(zip(o.population.entry_year.tolist(), o.population.entry_age.tolist()))):
            groups.setdefault((y, a, o.b), []).append(o)
    by_cell = []
    for (y, a, b), os_ in sorted(groups.items()):
        len1, len2, wl1, wl2, v1, v2, v = [], [], [], [], [], [], []
        n = 0
        for o in os_:
            pop, sim = o.population, o.sim
            sel = (pop.entry_year == y) & (pop.entry_age == a)
            n += int(sel.sum())
            waited = sel & (sim.out1 == WAITLISTED)
            obs2 = waited & (sim.out2 != UNOBSERVED) & (sim.out2 != NOT_APPLICABLE)
            len1.append((sim.R1[sel] >= 0).sum(axis=1))
            len2.append((sim.R2[obs2] >= 0).sum(axis=1))
            wl1.append(waited[sel])
            wl2.append(sim.out2[obs2] < 0)
            ok = sel & ~np.isnan(o.V)
            v1.append(o.V1[ok])
            v2.append(o.V2[ok])
            v.append(o.V[ok])
        cat = np.concatenate
        mean = lambda xs: float(cat(xs).mean()) if cat(xs).size else float("nan")  # noqa: E731
        by_cell.append({
            "year": y, "entry_age": a, "b": b, "draws": len(os_), "applicants": n,
            "mean_len1": mean(len1), "mean_len2": mean(len2),
            "waitlist_share1": mean(wl1), "waitlist_share2": mean(wl2),
            "mean_V1": mean(v1), "mean_V2": mean(v2), "mean_V": mean(v),
        })
    by_bucket = []
    for b in sorted({o.b for o in outs}):
        vals_s = [(o.V, o.population.s1) for o in outs if o.b == b]
        V = np.concatenate([x[0] for x in vals_s])
        S = np.concatenate([x[1] for x in vals_s])
        for name, lo, hi in SCORE_BUCKETS:
            x = V[_bucket(S, lo, hi) & ~np.isnan(V)]
            row = {"bucket": name, "b": b, "n": int(x.size)}
            if x.size:
                q = np.percentile(x, [10, 25, 50, 75, 90])
                row.update({"mean_V": float(x.mean()), "sd_V": float(x.std()),
                            **{f"p{p}_V": float(v) for p, v in zip((10, 25, 50, 75, 90), q)}})
            by_bucket.append(row)
    return WelfareReport(by_cell, by_bucket)


def convergence_rows(outs: Iterable[EquilibriumOutcome]) -> list[dict]:
    rows = []
    for o in outs:
        for k, ch in enumerate(o.changes, 1):
            rows.append({"b": o.b, "m": o.m, "iteration": k, "relative_change": ch,
                         "converged": int(o.converged), "oscillating": int(o.oscillating)})
    return rows


def sentinel_support() -> set[int]:
    return set(range(SCORE_MIN, SCORE_MAX + 1)) | {11, 35}


__all__ = [
    "Scenario", "EquilibriumOutcome", "iterate_equilibrium", "run_scenarios", "welfare_report",
    "cutoff_histogram_report", "pooled_cutoff_histogram", "convergence_rows", "BONUS_SWEEP",
    "WelfareReport", "OPEN_CODE",
]
