"""Synthetic daycare market: configuration, panel generation, panel files and
the descriptive strategic-waiting measures."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from . import io as fio
from .lottery import CellKey, LotteryBelief
from .mechanism import (
    CLOSED_CODE,
    MAX_LIST,
    OPEN_CODE,
    SCORE_MAX,
    SCORE_MIN,
    Applicant,
    AssignmentResult,
    Cutoff,
    InvalidInputError,
    MarketCell,
    apply_waitlist_bonus,
)
from .policy import N_AGES, StandardShocks, Theta, ParameterError, population_utilities
from .seeding import derive_seed, stream
from .simulation import (
    NOT_APPLICABLE,
    UNOBSERVED,
    WAITLISTED,
    MarketStructure,
    Population,
    SimOutcome,
    bootstrap_belief,
    fixed_point_belief,
    simulate_market,
    sincere_rols,
    solve_population,
)

log = logging.getLogger(__name__)

AREAS = "ABCDEFGH"
OUTSIDE_AREA = 7  # area H: applicants from outside the municipality
GRID = np.arange(SCORE_MIN, SCORE_MAX + 1)


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


def _area(v: Any, path: str) -> int:
    if isinstance(v, str) and len(v) == 1 and v.upper() in AREAS:
        return AREAS.index(v.upper())
    if isinstance(v, int) and not isinstance(v, bool) and 0 <= v < len(AREAS):
        return v
    raise ConfigError(path, f"unknown area {v!r} (expected one of {AREAS} or 0..7)")


def _int(v: Any, path: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(path, f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(path, f"must be <= {hi}, got {v}")
    return int(v)


def default_score_probs(mean: float = 25.0, sd: float = 2.5) -> np.ndarray:
    edges = np.append(GRID - 0.5, GRID[-1] + 0.5)
    p = np.diff(stats.norm.cdf(edges, mean, sd))
    return p / p.sum()


@dataclass
class BeliefSettings:
    B: int = 200
    max_iters: int = 10
    epsilon: float = 0.01
    damping: float = 0.5


@dataclass
class MarketConfig:
    years: int
    ages: tuple[int, ...]
    center_area: list[int]
    capacity: np.ndarray  # (J, 6); -1 where not given
    applicants: np.ndarray  # (years, 6) entrants per cell
    theta_true: Theta
    area_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    score_probs: np.ndarray = field(default_factory=default_score_probs)
    bonus: int = 2
    seed: int = 0
    incumbent_fill: float = 0.0
    K: int = MAX_LIST
    belief: BeliefSettings = field(default_factory=BeliefSettings)

    def __post_init__(self) -> None:
        self.ages = tuple(int(a) for a in self.ages)
        self.capacity = np.asarray(self.capacity, dtype=np.int64)
        self.applicants = np.asarray(self.applicants, dtype=np.int64)
        self.score_probs = np.asarray(self.score_probs, dtype=float)
        if self.area_probs.size == 0:
            p = np.zeros(len(AREAS))
            p[sorted(set(self.center_area))] = 1.0
            self.area_probs = p / p.sum()
        self.area_probs = np.asarray(self.area_probs, dtype=float)

    @property
    def n_centers(self) -> int:
        return len(self.center_area)

    @property
    def n_areas(self) -> int:
        return self.theta_true.sigma.shape[0]

    def validate(self) -> None:
        if self.years < 1:
            raise ConfigError("market.years", "must be >= 1")
        if not self.ages or len(set(self.ages)) != len(self.ages):
            raise ConfigError("market.ages", "need a nonempty list of distinct ages")
        for k, a in enumerate(self.ages):
            _int(a, f"market.ages[{k}]", 0, 5)
        J = self.n_centers
        if J < 1:
            raise ConfigError("market.centers", "need at least one center")
        if self.capacity.shape != (J, N_AGES):
            raise ConfigError("market.centers", "capacity table has the wrong shape")
        for j in range(J):
            if self.center_area[j] == OUTSIDE_AREA:
                raise ConfigError(f"market.centers[{j}].area", "centers cannot sit in area H")
            for a in self.ages:
                if self.capacity[j, a] < 0:
                    raise ConfigError(
                        f"market.centers[{j}].capacity.{a}",
                        "capacity missing or negative for a simulated age",
                    )
        if self.applicants.shape != (self.years, N_AGES) or np.any(self.applicants < 0):
            raise ConfigError("market.applicants", "counts must be nonnegative per (year, age)")
        for a in range(N_AGES):
            if a not in self.ages and self.applicants[:, a].any():
                raise ConfigError(f"market.applicants.{a}", "entrants at an age that is not simulated")
        for name, p in (("score_probs", self.score_probs), ("applicant_areas", self.area_probs)):
            if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
                raise ConfigError(f"market.{name}", "probabilities must be nonnegative and sum to 1")
        if self.score_probs.size != GRID.size:
            raise ConfigError("market.score_probs", f"need {GRID.size} entries for scores 20..35")
        if max(self.center_area) >= self.n_areas:
            raise ConfigError("market.theta_true.sigma", "sigma must cover every center area")
        if self.n_areas > OUTSIDE_AREA:
            raise ConfigError("market.theta_true.sigma", "sigma covers at most the seven areas A..G")
        if self.theta_true.n_centers != J:
            raise ConfigError("market.theta_true.alpha", f"need one entry per center ({J})")
        try:
            self.theta_true.validate()
        except ParameterError as exc:
            raise ConfigError("market.theta_true", str(exc)) from exc
        if not 0.0 <= self.incumbent_fill <= 1.0:
            raise ConfigError("market.incumbent_fill", "must lie in [0, 1]")
        _int(self.K, "market.K", 1, MAX_LIST)
        _int(self.belief.B, "market.belief.B", 1)
        _int(self.belief.max_iters, "market.belief.max_iters", 0)
        if not 0.0 <= self.belief.damping < 1.0:
            raise ConfigError("market.belief.damping", "must lie in [0, 1)")

    def structure(self) -> MarketStructure:
        cap = np.clip(self.capacity, 0, None)
        inc = np.zeros_like(cap)
        inc[:, 1:] = np.floor(self.incumbent_fill * cap[:, 1:]).astype(np.int64)
        return MarketStructure(
            center_ids=list(range(self.n_centers)),
            center_area=np.asarray(self.center_area, dtype=np.int64),
            capacity=cap,
            incumbents=inc,
            n_years=self.years,
            ages=self.ages,
            n_areas=self.n_areas,
        )

    # -- dict round trip ----------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping, seed: int | None = None) -> "MarketConfig":
        p = "market"
        try:
            years = _int(d["years"], f"{p}.years", 1)
            ages = d.get("ages", [0])
            if not isinstance(ages, list):
                raise ConfigError(f"{p}.ages", "expected a list")
            ages = tuple(_int(a, f"{p}.ages[{k}]", 0, 5) for k, a in enumerate(ages))
            centers = d["centers"]
            if not isinstance(centers, list) or not centers:
                raise ConfigError(f"{p}.centers", "expected a nonempty list")
        except KeyError as exc:
            raise ConfigError(f"{p}.{exc.args[0]}", "required field missing") from exc
        J = len(centers)
        area = []
        cap = np.full((J, N_AGES), -1, dtype=np.int64)
        for j, c in enumerate(centers):
            cp = f"{p}.centers[{j}]"
            if not isinstance(c, Mapping) or "capacity" not in c:
                raise ConfigError(cp, "need an object with 'area' and 'capacity'")
            area.append(_area(c.get("area", "A"), f"{cp}.area"))
            raw = c["capacity"]
            items = enumerate(raw) if isinstance(raw, list) else raw.items()
            for a, v in items:
                a_int = _int(int(a), f"{cp}.capacity", 0, 5)
                cap[j, a_int] = _int(v, f"{cp}.capacity.{a}")
                if v < 0:
                    raise ConfigError(f"{cp}.capacity.{a}", f"capacity must be >= 0, got {v}")
        napp = np.zeros((years, N_AGES), dtype=np.int64)
        raw = d.get("applicants", {})
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{p}.applicants", "expected an object keyed by age")
        for a, v in raw.items():
            a_int = _int(int(a), f"{p}.applicants", 0, 5)
            vals = v if isinstance(v, list) else [v] * years
            if len(vals) != years:
                raise ConfigError(f"{p}.applicants.{a}", f"need {years} yearly counts")
            for y, n in enumerate(vals):
                napp[y, a_int] = _int(n, f"{p}.applicants.{a}[{y}]", 0)
        if "theta_true" not in d:
            raise ConfigError(f"{p}.theta_true", "required field missing")
        th = d["theta_true"]
        try:
            theta = Theta.from_dict({
                "mu0": [0.0] * N_AGES, "sigma0sq": [1.0] * N_AGES, **th,
            })
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{p}.theta_true", str(exc)) from exc
        kw: dict[str, Any] = {}
        if "score_probs" in d:
            sp = d["score_probs"]
            if isinstance(sp, Mapping):
                arr = np.zeros(GRID.size)
                for s, q in sp.items():
                    arr[_int(int(s), f"{p}.score_probs", SCORE_MIN, SCORE_MAX) - SCORE_MIN] = q
                sp = arr
            kw["score_probs"] = np.asarray(sp, dtype=float)
        elif "score_mean" in d:
            kw["score_probs"] = default_score_probs(float(d["score_mean"]), float(d.get("score_sd", 2.5)))
        if "applicant_areas" in d:
            arr = np.zeros(len(AREAS))
            for k, q in d["applicant_areas"].items():
                arr[_area(k, f"{p}.applicant_areas")] = float(q)
            kw["area_probs"] = arr
        b = d.get("belief", {})
        cfg = cls(
            years=years,
            ages=ages,
            center_area=area,
            capacity=cap,
            applicants=napp,
            theta_true=theta,
            bonus=_int(d.get("bonus", 2), f"{p}.bonus"),
            seed=int(seed if seed is not None else d.get("seed", 0)),
            incumbent_fill=float(d.get("incumbent_fill", 0.0)),
            K=int(d.get("K", MAX_LIST)),
            belief=BeliefSettings(
                B=int(b.get("B", 200)),
                max_iters=int(b.get("max_iters", 10)),
                epsilon=float(b.get("epsilon", 0.01)),
                damping=float(b.get("damping", 0.5)),
            ),
            **kw,
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        th = self.theta_true.to_dict()
        th.pop("sigma_factor", None)
        return {
            "years": self.years,
            "ages": list(self.ages),
            "centers": [
                {"area": AREAS[a], "capacity": {str(k): int(self.capacity[j, k])
                                                for k in range(N_AGES) if self.capacity[j, k] >= 0}}
                for j, a in enumerate(self.center_area)
            ],
            "applicants": {str(a): self.applicants[:, a].tolist() for a in self.ages},
            "theta_true": th,
            "score_probs": self.score_probs.tolist(),
            "applicant_areas": {AREAS[k]: float(q) for k, q in enumerate(self.area_probs) if q > 0},
            "bonus": self.bonus,
            "seed": self.seed,
            "incumbent_fill": self.incumbent_fill,
            "K": self.K,
            "belief": vars(self.belief).copy(),
        }


def default_market_config(
    n_entrants: int = 300,
    years: int = 3,
    ages: Sequence[int] = (0, 1),
    seed: int = 0,
    bonus: int = 2,
    tightness: float = 0.6,
) -> MarketConfig:
    """Six centers in three areas; center 0 is small and strongly preferred.

    Age-1 classes are larger than age-0 classes, so seats open up a year
    later and waiting can pay off.  ``tightness`` is total age-0 seats per
    age-0 entrant.
    """
    shares = np.array([0.08, 0.2, 0.18, 0.2, 0.18, 0.16])
    cap0 = np.maximum(1, np.round(shares * tightness * n_entrants)).astype(int)
    cap1 = cap0 + np.maximum(1, np.round(cap0 * 0.5)).astype(int)
    cap1[0] = cap0[0] + max(1, round(n_entrants / 30))
    capacity = np.full((6, N_AGES), -1)
    capacity[:, 0], capacity[:, 1] = cap0, cap1
    for a in range(2, N_AGES):
        capacity[:, a] = cap1
    napp = np.zeros((years, N_AGES), dtype=int)
    napp[:, 0] = n_entrants
    if 1 in ages:
        napp[:, 1] = n_entrants // 4
    theta = Theta(
        alpha=np.array([5.2, 3.2, 3.0, 2.8, 2.6, 2.4]),
        beta=np.array([0.02, 0.0, -0.01, 0.01, 0.0, -0.02]),
        sigma=np.array([[0.4, 0.1, 0.0], [0.1, 0.4, 0.1], [0.0, 0.1, 0.4]]),
        mu0=np.array([0.0, -0.6, -0.6, -0.6, -0.6, -0.6]),
        sigma0sq=np.ones(N_AGES),
        idio_var=0.6,
    )
    return MarketConfig(
        years=years,
        ages=tuple(ages),
        center_area=[0, 0, 1, 1, 2, 2],
        capacity=capacity,
        applicants=napp,
        theta_true=theta,
        area_probs=np.array([0.3, 0.3, 0.3, 0, 0, 0, 0, 0.1]),
        bonus=bonus,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# histories and panels


@dataclass(frozen=True)
class ApplicantHistory:
    id: int
    entry_year: int
    entry_age: int
    area: int
    s1: int
    tiebreak: int
    R1: tuple[int, ...]
    outcome1: int | None  # center id, None = waitlisted
    s2: int | None = None
    R2: tuple[int, ...] | None = None  # () = did not reapply
    outcome2: int | None = None
    period2_observed: bool = False

    @property
    def waitlisted(self) -> bool:
        return self.outcome1 is None

    @property
    def reapplied(self) -> bool:
        return bool(self.R2)

    def validate(self, bonus: int) -> None:
        if (self.R2 is not None) != self.waitlisted:
            raise InvalidInputError(f"applicant {self.id}: R2 recorded iff waitlisted in period 1")
        if self.waitlisted and self.entry_age < 5 and self.s2 != apply_waitlist_bonus(self.s1, bonus)[0]:
            raise InvalidInputError(f"applicant {self.id}: s2 inconsistent with bonus {bonus}")


def population_from_config(cfg: MarketConfig, seed: int) -> Population:
    rng = stream(seed, "population")
    ent_y, ent_a, area, score = [], [], [], []
    for y in range(cfg.years):
        for a in cfg.ages:
            n = int(cfg.applicants[y, a])
            if n == 0:
                continue
            ent_y.append(np.full(n, y))
            ent_a.append(np.full(n, a))
            score.append(rng.choice(GRID, size=n, p=cfg.score_probs))
            area.append(rng.choice(len(AREAS), size=n, p=cfg.area_probs))
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, np.int64)  # noqa: E731
    N = sum(x.size for x in ent_y)
    return Population(
        ids=np.arange(1, N + 1, dtype=np.int64),
        entry_year=cat(ent_y),
        entry_age=cat(ent_a),
        area=cat(area),
        s1=cat(score),
        tiebreak=rng.permutation(N).astype(np.int64) + 1,
    )


@dataclass
class Panel:
    structure: MarketStructure
    population: Population
    sim: SimOutcome
    bonus: int
    belief: LotteryBelief | None = None
    theta: Theta | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.population)

    @property
    def center_ids(self) -> list[int]:
        return self.structure.center_ids

    def histories(self) -> list[ApplicantHistory]:
        pop, sim, ids = self.population, self.sim, self.center_ids
        cid = lambda k: None if k < 0 else ids[k]  # noqa: E731
        rol = lambda row: tuple(ids[k] for k in row if k >= 0)  # noqa: E731
        out = []
        for i in range(len(pop)):
            wl = sim.out1[i] == WAITLISTED
            a0 = int(pop.entry_age[i])
            has2 = wl and a0 < 5
            observed = has2 and sim.out2[i] != UNOBSERVED
            out.append(ApplicantHistory(
                id=int(pop.ids[i]),
                entry_year=int(pop.entry_year[i]),
                entry_age=a0,
                area=int(pop.area[i]),
                s1=int(pop.s1[i]),
                tiebreak=int(pop.tiebreak[i]),
                R1=rol(sim.R1[i]),
                outcome1=cid(int(sim.out1[i])),
                s2=int(sim.s2[i]) if has2 else None,
                R2=(rol(sim.R2[i]) if has2 else ()) if wl else None,
                outcome2=cid(int(sim.out2[i])) if observed else None,
                period2_observed=bool(observed),
            ))
        return out

    def cells(self) -> dict[CellKey, MarketCell]:
        pop, ids = self.population, self.center_ids
        out = {}
        for key, pool in self.sim.pools.items():
            apps = [
                Applicant(int(pop.ids[r]), int(s), int(pop.tiebreak[r]),
                          tuple(ids[k] for k in rol if k >= 0))
                for r, s, rol in zip(pool.idx, pool.scores, pool.rols)
            ]
            out[key] = MarketCell(key[0], key[1], apps, dict(zip(ids, pool.vacancy.tolist())))
        return out

    def results(self) -> dict[CellKey, AssignmentResult]:
        pop, sim, ids = self.population, self.sim, self.center_ids
        out = {}
        for key, pool in sim.pools.items():
            assign = {}
            for r, re in zip(pool.idx, pool.reapplicant):
                k = sim.out2[r] if re else sim.out1[r]
                assign[int(pop.ids[r])] = ids[k] if k >= 0 else None
            out[key] = AssignmentResult(assign, self.cutoffs(key))
        return out

    def cutoffs(self, key: CellKey) -> dict[int, Cutoff]:
        return {c: Cutoff.from_code(v) for c, v in zip(self.center_ids, self.sim.cutoffs[key])}

    def cutoff_codes(self, key: CellKey) -> np.ndarray:
        return self.sim.cutoffs[key]

    # -- files ---------------------------------------------------------------

    def save(self, out_dir: str | Path, meta: Mapping | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(meta if meta is not None else self.meta)
        files = [out / "applicants.csv", out / "centers.csv", out / "histories.csv"]
        fio.write_csv(files[0], fio.APPLICANT_COLUMNS, self._applicant_rows(), meta)
        fio.write_csv(files[1], fio.CENTER_COLUMNS, self._center_rows(), meta)
        fio.write_csv(files[2], HISTORY_COLUMNS, self._history_rows(), meta)
        return files

    def _applicant_rows(self):
        pop, ids = self.population, self.center_ids
        for (y, a), pool in sorted(self.sim.pools.items()):
            for r, s, rol in zip(pool.idx, pool.scores, pool.rols):
                yield {
                    "id": int(pop.ids[r]), "year": y, "age": a, "area": AREAS[pop.area[r]],
                    "score": int(s), "tiebreak": int(pop.tiebreak[r]),
                    **fio.rol_columns([ids[k] for k in rol if k >= 0]),
                }

    def _center_rows(self):
        st = self.structure
        occ = st.incumbents.astype(np.int64).copy()
        for y in range(st.n_years):
            taken = np.zeros_like(occ)
            for a in st.ages:
                pool = self.sim.pools[(y, a)]
                assigned = np.where(pool.reapplicant, self.sim.out2[pool.idx], self.sim.out1[pool.idx])
                np.add.at(taken[:, a], assigned[assigned >= 0], 1)
            for j, c in enumerate(st.center_ids):
                row = {"id": c, "year": y, "area": AREAS[st.center_area[j]]}
                for a in range(N_AGES):
                    vac = max(int(st.capacity[j, a] - occ[j, a]), 0)
                    row[f"capacity_age{a}"] = vac if a in st.ages else None
                    row[f"total_age{a}"] = int(st.capacity[j, a])
                    row[f"occupied_age{a}"] = int(occ[j, a])
                yield row
            nxt = np.zeros_like(occ)
            nxt[:, 1:] = (occ + taken)[:, :-1]
            occ = nxt

    def _history_rows(self):
        for h in self.histories():
            yield {
                "id": h.id, "entry_year": h.entry_year, "entry_age": h.entry_age,
                "area": AREAS[h.area], "s1": h.s1, "tiebreak": h.tiebreak,
                **fio.rol_columns(h.R1, "r1_"), "outcome1": h.outcome1,
                "s2": h.s2, "reapplied": int(h.reapplied) if h.R2 is not None else None,
                **fio.rol_columns(h.R2 or (), "r2_"), "outcome2": h.outcome2,
                "period2_observed": int(h.period2_observed),
            }

    @classmethod
    def load(cls, in_dir: str | Path, bonus: int | None = None) -> "Panel":
        """Rebuild a panel from its files and re-run the mechanism on it.

        Raises :class:`InvalidInputError` if the recorded outcomes disagree
        with the mechanism.
        """
        d = Path(in_dir)
        meta, hrows = fio.read_csv(d / "histories.csv")
        _, crows = fio.read_csv(d / "centers.csv")
        _, arows = fio.read_csv(d / "applicants.csv")
        if not crows:
            raise InvalidInputError("centers.csv has no rows")
        ids = sorted({int(r["id"]) for r in crows})
        index = {c: k for k, c in enumerate(ids)}
        n_years = max(int(r["year"]) for r in crows) + 1
        J = len(ids)
        cap = np.zeros((J, N_AGES), np.int64)
        inc = np.zeros((J, N_AGES), np.int64)
        area = np.zeros(J, np.int64)
        ages: set[int] = set()
        for r in crows:
            k = index[int(r["id"])]
            area[k] = AREAS.index(r["area"])
            if int(r["year"]) == 0:
                for a in range(N_AGES):
                    cap[k, a] = int(r[f"total_age{a}"])
                    inc[k, a] = int(r[f"occupied_age{a}"])
                    if r[f"capacity_age{a}"] != "":
                        ages.add(a)
        n = len(hrows)
        col = lambda name: np.array([int(r[name]) for r in hrows], dtype=np.int64)  # noqa: E731
        pop = Population(
            ids=col("id"), entry_year=col("entry_year"), entry_age=col("entry_age"),
            area=np.array([AREAS.index(r["area"]) for r in hrows], dtype=np.int64),
            s1=col("s1"), tiebreak=col("tiebreak"),
        )
        R1 = np.full((n, MAX_LIST), -1, np.int64)
        R2 = np.full((n, MAX_LIST), -1, np.int64)
        for i, r in enumerate(hrows):
            for k, c in enumerate(fio.parse_rol(r, "r1_")):
                R1[i, k] = index[c]
            for k, c in enumerate(fio.parse_rol(r, "r2_")):
                R2[i, k] = index[c]
        if bonus is None:
            bonus = _infer_bonus(hrows, arows)
        st = MarketStructure(ids, area, cap, inc, n_years, tuple(sorted(ages)),
                             n_areas=int(area.max()) + 1 if J else 1)
        sim = simulate_market(pop, st, R1, R2, bonus)
        panel = cls(st, pop, sim, bonus, meta=dict(meta))
        for h, r in zip(panel.histories(), hrows):
            rec1 = int(r["outcome1"]) if r["outcome1"] else None
            rec2 = int(r["outcome2"]) if r["outcome2"] else None
            if h.outcome1 != rec1 or (h.period2_observed and h.outcome2 != rec2):
                raise InvalidInputError(f"applicant {h.id}: recorded outcomes disagree with the mechanism")
        return panel


HISTORY_COLUMNS = [
    "id", "entry_year", "entry_age", "area", "s1", "tiebreak",
    *[f"r1_{k}" for k in range(1, MAX_LIST + 1)], "outcome1",
    "s2", "reapplied", *[f"r2_{k}" for k in range(1, MAX_LIST + 1)], "outcome2",
    "period2_observed",
]


def _infer_bonus(hrows, arows) -> int:
    for r in hrows:
        if r["s2"] and int(r["s2"]) not in (SCORE_MIN, SCORE_MAX):
            return int(r["s2"]) - int(r["s1"])
    return 2


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationInfo:
    belief_converged: bool
    belief_iterations: int
    belief_changes: list[float]


def generate_market(
    config: MarketConfig,
    seed: int | None = None,
    belief: LotteryBelief | None = None,
) -> Panel:
    """Draw a population, solve every applicant's list pair and run the market.

    Utilities come from the named stream ``"sim/0"`` of the master seed, the
    same stream the estimator's first simulation draw uses.  Without a
    supplied ``belief`` a self-consistent one is found by iterating from the
    outcome of sincere top-K lists.
    """
    config.validate()
    seed = config.seed if seed is None else int(seed)
    st = config.structure()
    pop = population_from_config(config, seed)
    theta = config.theta_true
    shocks = StandardShocks.draw(len(pop), st.n_areas, st.n_centers, derive_seed(seed, "sim/0"))
    V, V0 = population_utilities(theta, pop.s1, pop.same_area(st.center_area), st.center_area, shocks)
    bs = config.belief
    info = GenerationInfo(True, 0, [])
    if belief is None:
        R1, R2 = sincere_rols(V, V0, pop.entry_age, config.K)
        sim0 = simulate_market(pop, st, R1, R2, config.bonus)
        belief = bootstrap_belief(sim0, st, bs.B, derive_seed(seed, "belief/init"))
        if bs.max_iters > 0 and len(pop):
            fp = fixed_point_belief(
                pop, st, V, V0, belief, config.bonus, theta.delta, bs.B,
                derive_seed(seed, "belief"), bs.epsilon, bs.max_iters, bs.damping, config.K,
            )
            belief = fp.belief
            info = GenerationInfo(fp.converged, fp.iterations, fp.changes)
            if not fp.converged:
                log.warning("self-consistent belief not reached in %d rounds (last change %.4f)",
                            fp.iterations, fp.changes[-1])
    R1, R2, _ = solve_population(pop, st, V, V0, belief, config.bonus, theta.delta, config.K)
    sim = simulate_market(pop, st, R1, R2, config.bonus)
    meta = {"config_sha256": fio.config_hash(config.to_dict()), "seed": seed}
    panel = Panel(st, pop, sim, config.bonus, belief, theta, meta)
    panel.meta_info = info  # type: ignore[attr-defined]
    return panel


# ---------------------------------------------------------------------------
# strategic-waiting measures


def drop_safety(history: ApplicantHistory, cutoffs_period1: Mapping[int, Cutoff]) -> int:
    if history.R2 is None:
        raise InvalidInputError(f"applicant {history.id} has no period-2 list")
    r1 = set(history.R1)
    for j in history.R2:
        if j in r1:
            continue
        c = cutoffs_period1.get(j)
        if c is not None and c.admits(history.s1):
            return 1
    return 0


def drop_safety_array(R1: np.ndarray, R2: np.ndarray, codes1: np.ndarray, s1: np.ndarray) -> np.ndarray:
    """Vectorised DropSafety; ``codes1`` is (N, J) period-1 cutoff codes per row.

    Rows with an empty ``R2`` get 0.
    """
    N, J = codes1.shape
    in1 = np.zeros((N, J), bool)
    in2 = np.zeros((N, J), bool)
    rows = np.arange(N)
    for k in range(R1.shape[1]):
        m = R1[:, k] >= 0
        in1[rows[m], R1[m, k]] = True
        m = R2[:, k] >= 0
        in2[rows[m], R2[m, k]] = True
    safe = codes1 <= s1[:, None]
    return np.any(in2 & ~in1 & safe, axis=1).astype(np.int64)


def delta_k(history_or_s1: ApplicantHistory | int, thresholds: tuple[float, float], bonus: int = 2) -> int:
    s1 = history_or_s1.s1 if isinstance(history_or_s1, ApplicantHistory) else int(history_or_s1)
    t1, t2 = thresholds
    return int(s1 < t1 and s1 + bonus >= t2)


THRESHOLD_SPECS = ("actual", "fixed28", "p90", "mode")


def _code_as_threshold(code: int) -> int:
    if code == OPEN_CODE:
        return SCORE_MIN
    if code == CLOSED_CODE:
        return SCORE_MAX + 1
    return int(code)


def benefit_thresholds(history: ApplicantHistory, panel: Panel, spec: str) -> tuple[float, float]:
    """``(s_bar1, s_bar2)`` under one of :data:`THRESHOLD_SPECS`.

    ``actual`` uses the cutoff of the top-ranked center in each list; an
    Open cutoff counts as the grid minimum and a Closed one as unreachable.
    ``p90`` and ``mode`` use binding (score-valued) cutoffs only.
    """
    if spec == "fixed28":
        return 28.0, 28.0
    k1 = (history.entry_year, history.entry_age)
    k2 = (history.entry_year + 1, history.entry_age + 1)
    if spec not in THRESHOLD_SPECS:
        raise InvalidInputError(f"unknown threshold spec {spec!r}")
    if k1 not in panel.sim.cutoffs or k2 not in panel.sim.cutoffs:
        raise InvalidInputError(f"applicant {history.id}: period-2 cell {k2} not in panel")
    if spec == "actual":
        if not history.R1 or not history.R2:
            raise InvalidInputError(f"applicant {history.id}: actual thresholds need both lists nonempty")
        idx = {c: k for k, c in enumerate(panel.center_ids)}
        c1 = panel.sim.cutoffs[k1][idx[history.R1[0]]]
        c2 = panel.sim.cutoffs[k2][idx[history.R2[0]]]
        return float(_code_as_threshold(c1)), float(_code_as_threshold(c2))
    out = []
    for key in (k1, k2):
        codes = panel.sim.cutoffs[key]
        binding = codes[(codes != OPEN_CODE) & (codes != CLOSED_CODE)]
        if binding.size == 0:
            raise InvalidInputError(f"cell {key} has no binding cutoffs")
        if spec == "p90":
            out.append(float(np.percentile(binding, 90)))
        else:
            cnt = Counter(binding.tolist())
            top = max(cnt.values())
            out.append(float(min(v for v, c in cnt.items() if c == top)))
    return out[0], out[1]


def reapplicant_measures(panel: Panel, spec: str = "actual", bonus: int = 2) -> list[dict]:
    """DropSafety and the benefit indicator for every observed reapplicant."""
    rows = []
    for h in panel.histories():
        if not (h.waitlisted and h.reapplied and h.period2_observed):
            continue
        cut1 = panel.cutoffs((h.entry_year, h.entry_age))
        try:
            thr = benefit_thresholds(h, panel, spec)
        except InvalidInputError:
            continue
        rows.append({"id": h.id, "entry_age": h.entry_age, "s1": h.s1,
                     "drop_safety": drop_safety(h, cut1), "delta": delta_k(h, thr, bonus)})
    return rows


# ---------------------------------------------------------------------------
# summaries


def _pct(num: int, den: int) -> str:
    return f"{round(100.0 * num / den, 2):g}%" if den else "-"


@dataclass
class Summary:
    cells: list[dict]
    entry_ages: list[dict]

    CELL_COLUMNS = ["year", "age", "applicants", "entrants", "reapplicants", "mean_score",
                    "mean_list_length", *[f"share_rank{k}" for k in range(1, MAX_LIST + 1)],
                    "share_unassigned"]
    AGE_COLUMNS = ["entry_age", "applications", "waitlisted", "reapplied", "drop_safety",
                   "pct_waitlisted", "pct_reapplied", "pct_drop_safety"]

    def text(self) -> str:
        lines = ["Per-cell summary",
                 f"{'year':>4} {'age':>3} {'n':>6} {'score':>6} {'len':>5} {'rank1':>6} {'unassigned':>10}"]
        for r in self.cells:
            lines.append(f"{r['year']:>4} {r['age']:>3} {r['applicants']:>6} {r['mean_score']:>6.2f} "
                         f"{r['mean_list_length']:>5.2f} {r['share_rank1']:>6.3f} {r['share_unassigned']:>10.3f}")
        lines += ["", "Initial age & Applications & Waitlisted & Reapplied & DropSafety"]
        for r in self.entry_ages:
            label = "All ages" if r["entry_age"] == "all" else str(r["entry_age"])
            lines.append(
                f"{label} & {r['applications']} & {r['waitlisted']} ({r['pct_waitlisted']}) & "
                f"{r['reapplied']} ({r['pct_reapplied']}) & {r['drop_safety']} ({r['pct_drop_safety']})"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path, meta: Mapping | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "summary_cells.csv", out / "summary_entry_ages.csv", out / "summary.txt"]
        fio.write_csv(paths[0], self.CELL_COLUMNS, self.cells, meta)
        fio.write_csv(paths[1], self.AGE_COLUMNS, self.entry_ages, meta)
        paths[2].write_text("\n".join(fio.header_lines(meta) + [self.text()]), encoding="utf-8")
        return paths


def summarize(panel: Panel) -> Summary:
    if len(panel) == 0:
        raise InvalidInputError("cannot summarise an empty panel")
    sim, pop = panel.sim, panel.population
    cells = []
    for (y, a), pool in sorted(sim.pools.items()):
        n = pool.idx.size
        if n == 0:
            continue
        assigned = np.where(pool.reapplicant, sim.out2[pool.idx], sim.out1[pool.idx])
        lens = (pool.rols >= 0).sum(axis=1)
        rank = np.full(n, -1)
        for k in range(pool.rols.shape[1]):
            rank[(rank < 0) & (assigned >= 0) & (pool.rols[:, k] == assigned)] = k
        row = {"year": y, "age": a, "applicants": n, "entrants": int((~pool.reapplicant).sum()),
               "reapplicants": int(pool.reapplicant.sum()), "mean_score": float(pool.scores.mean()),
               "mean_list_length": float(lens.mean())}
        for k in range(MAX_LIST):
            row[f"share_rank{k + 1}"] = float(np.mean(rank == k))
        row["share_unassigned"] = float(np.mean(assigned < 0))
        cells.append(row)
    codes1 = np.stack([sim.cutoffs[(int(y), int(a))] for y, a in zip(pop.entry_year, pop.entry_age)]) \
        if len(pop) else np.zeros((0, panel.structure.n_centers), np.int64)
    ds = drop_safety_array(sim.R1, sim.R2, codes1, pop.s1)
    wl = sim.out1 == WAITLISTED
    observed = wl & (sim.out2 != UNOBSERVED) & (sim.out2 != NOT_APPLICABLE)
    re = observed & (sim.R2[:, 0] >= 0)
    # applicants whose second round lies outside the panel are left out
    eligible = ~wl | observed
    ages = []
    for a in sorted(set(pop.entry_age.tolist())) + ["all"]:
        m = eligible & ((pop.entry_age == a) if a != "all" else True)
        n_app, n_wl, n_re = int(m.sum()), int((m & wl).sum()), int((m & re).sum())
        n_ds = int((m & re & (ds == 1)).sum())
        ages.append({"entry_age": a, "applications": n_app, "waitlisted": n_wl, "reapplied": n_re,
                     "drop_safety": n_ds, "pct_waitlisted": _pct(n_wl, n_app),
                     "pct_reapplied": _pct(n_re, n_wl), "pct_drop_safety": _pct(n_ds, n_re)})
    return Summary(cells, ages)


def recovery_market_config(n_cohort: int = 500, seed: int = 0) -> MarketConfig:
    """Five centers in two areas with one entry cohort observed twice.

    Used for parameter-recovery checks: the age-0 entrants of year 0 form
    the estimation cohort.
    """
    cap0 = np.round(np.array([0.08, 0.14, 0.12, 0.16, 0.12]) * n_cohort).astype(int)
    capacity = np.full((5, N_AGES), -1)
    capacity[:, 0] = cap0
    for a in range(1, N_AGES):
        capacity[:, a] = cap0 + np.round(np.array([0.04, 0.06, 0.06, 0.08, 0.06]) * n_cohort).astype(int)
    napp = np.zeros((2, N_AGES), dtype=int)
    napp[:, 0] = n_cohort
    napp[:, 1] = n_cohort // 5
    theta = Theta(
        alpha=np.array([4.6, 3.4, 2.8, 2.2, 3.8]),
        beta=np.array([0.02, -0.01, 0.0, 0.01, -0.02]),
        sigma=np.array([[0.5, 0.15], [0.15, 0.5]]),
        mu0=np.array([0.0, -0.5, -0.5, -0.5, -0.5, -0.5]),
        sigma0sq=np.ones(N_AGES),
        idio_var=0.8,
    )
    return MarketConfig(
        years=2, ages=(0, 1), center_area=[0, 0, 1, 1, 1], capacity=capacity,
        applicants=napp, theta_true=theta,
        area_probs=np.array([0.45, 0.45, 0, 0, 0, 0, 0, 0.1]), seed=seed,
    )
