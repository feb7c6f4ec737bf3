"""First-stage lottery estimation.

Applicants in a cell are resampled with replacement, the mechanism is rerun on
every resample, and the resulting cutoff draws give the score-conditional
admission probability ``pi_j(s) = P(cutoff_j <= s)``.  Lotteries for whole
lists are then composed under independence across centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .mechanism import (
    CLOSED_CODE,
    OPEN_CODE,
    SCORE_MAX,
    SCORE_MIN,
    Cutoff,
    InvalidInputError,
    MarketCell,
    cell_to_arrays,
    sd_cutoffs_weighted,
    validate_rol,
)
from .seeding import derive_seed

CellKey = tuple[int, int]  # (year, age)

DEFAULT_B = 2000


def _key_str(key: CellKey) -> str:
    return f"{key[0]}:{key[1]}"


def _key_parse(s: str) -> CellKey:
    y, a = s.split(":")
    return int(y), int(a)


@dataclass
class CutoffDistribution:
    """Bootstrap cutoff draws: ``codes[key]`` is (B, J) in mechanism codes."""

    centers: list[int]
    codes: dict[CellKey, np.ndarray] = field(default_factory=dict)

    def replications(self, key: CellKey) -> int:
        return self.codes[key].shape[0]

    def distribution(self, key: CellKey, j: int) -> dict[Cutoff, float]:
        col = self.codes[key][:, self.centers.index(j)]
        vals, counts = np.unique(col, return_counts=True)
        return {Cutoff.from_code(v): c / col.size for v, c in zip(vals, counts)}

    def merge(self, other: "CutoffDistribution") -> "CutoffDistribution":
        if other.centers != self.centers:
            raise InvalidInputError("cannot merge distributions over different centers")
        return CutoffDistribution(self.centers, {**self.codes, **other.codes})


def bootstrap_codes(
    rols: np.ndarray,
    scores: np.ndarray,
    capacity: np.ndarray,
    B: int,
    seed: int,
) -> np.ndarray:
    """(B, J) cutoff codes from resampling a priority-ordered pool.

    Replication ``r`` draws from its own stream seeded by ``(seed, r)``.
    """
    n = rols.shape[0]
    J = capacity.shape[0]
    out = np.empty((B, J), dtype=np.int64)
    if n == 0:
        for r in range(B):
            out[r] = np.where(capacity > 0, OPEN_CODE, CLOSED_CODE)
        return out
    for r in range(B):
        rng = np.random.default_rng([seed, r])
        counts = np.bincount(rng.integers(0, n, n), minlength=n)
        out[r] = sd_cutoffs_weighted(rols, scores, counts, capacity)
    return out


def bootstrap_cutoffs(cell: MarketCell, B: int = DEFAULT_B, seed: int = 0) -> CutoffDistribution:
    if B < 1:
        raise InvalidInputError("B must be at least 1")
    if not cell.applicants:
        raise InvalidInputError(f"cell ({cell.year},{cell.age}) has no applicants")
    arr = cell_to_arrays(cell)
    codes = bootstrap_codes(
        arr.rols, arr.scores, arr.capacity, B, derive_seed(seed, f"bootstrap/{cell.year}/{cell.age}")
    )
    return CutoffDistribution(arr.centers, {(cell.year, cell.age): codes})


def admission_prob(dist: CutoffDistribution, j: int, t: CellKey, s: int) -> float:
    if t not in dist.codes:
        raise KeyError(f"no cutoff draws for cell {t}")
    if j not in dist.centers:
        raise KeyError(f"unknown center {j}")
    col = dist.codes[t][:, dist.centers.index(j)]
    return float(np.mean(col <= s))


def pi_table(codes: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """(J, G) admission probabilities from (B, J) cutoff codes."""
    return (codes[:, :, None] <= grid[None, None, :]).mean(axis=0)


@dataclass
class LotteryBelief:
    """``tables[key][j, s - lo]`` is the admission probability at score ``s``."""

    centers: list[int]
    tables: dict[CellKey, np.ndarray]
    lo: int = SCORE_MIN
    hi: int = SCORE_MAX

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @classmethod
    def from_distribution(
        cls, dist: CutoffDistribution, lo: int = SCORE_MIN, hi: int = SCORE_MAX
    ) -> "LotteryBelief":
        grid = np.arange(lo, hi + 1)
        return cls(list(dist.centers), {k: pi_table(c, grid) for k, c in dist.codes.items()}, lo, hi)

    @classmethod
    def constant(cls, centers: Sequence[int], keys: Sequence[CellKey], value: float = 1.0,
                 lo: int = SCORE_MIN, hi: int = SCORE_MAX) -> "LotteryBelief":
        G = hi - lo + 1
        return cls(list(centers), {k: np.full((len(centers), G), float(value)) for k in keys}, lo, hi)

    def _col(self, s: int) -> int:
        if not self.lo <= s <= self.hi:
            raise KeyError(f"score {s} outside belief grid [{self.lo}, {self.hi}]")
        return int(s) - self.lo

    def pi(self, key: CellKey, j: int, s: int) -> float:
        return float(self.tables[key][self.centers.index(j), self._col(s)])

    def vector(self, key: CellKey, s: int) -> np.ndarray:
        if key not in self.tables:
            raise KeyError(f"belief has no cell {key}")
        return self.tables[key][:, self._col(s)].copy()

    def as_map(self, key: CellKey, s: int) -> dict[int, float]:
        return dict(zip(self.centers, self.vector(key, s).tolist()))

    def keys(self) -> list[CellKey]:
        return sorted(self.tables)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.tables[k].ravel() for k in self.keys()])

    def relative_change(self, previous: "LotteryBelief") -> float:
        """Frobenius ``||self - previous|| / ||previous||`` over the stacked table."""
        if previous.keys() != self.keys():
            raise InvalidInputError("beliefs cover different cells")
        prev = previous.stacked()
        denom = np.linalg.norm(prev)
        diff = np.linalg.norm(self.stacked() - prev)
        if denom == 0.0:
            return 0.0 if diff == 0.0 else np.inf
        return float(diff / denom)

    def blend(self, other: "LotteryBelief", weight_other: float) -> "LotteryBelief":
        w = float(weight_other)
        return LotteryBelief(
            self.centers,
            {k: (1 - w) * self.tables[k] + w * other.tables[k] for k in self.keys()},
            self.lo,
            self.hi,
        )

    def is_monotone(self) -> bool:
        return all(np.all(np.diff(t, axis=1) >= -1e-15) for t in self.tables.values())

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        grid = self.grid.tolist()
        return {
            "format": "waitlist-lab/belief",
            "version": 1,
            "score_min": self.lo,
            "score_max": self.hi,
            "centers": list(self.centers),
            "pi": {
                _key_str(k): {
                    str(c): {str(s): float(p) for s, p in zip(grid, self.tables[k][jx])}
                    for jx, c in enumerate(self.centers)
                }
                for k in self.keys()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LotteryBelief":
        lo, hi = int(d["score_min"]), int(d["score_max"])
        centers = [int(c) for c in d["centers"]]
        grid = range(lo, hi + 1)
        tables = {}
        for k, by_center in d["pi"].items():
            tables[_key_parse(k)] = np.array(
                [[float(by_center[str(c)][str(s)]) for s in grid] for c in centers]
            )
        return cls(centers, tables, lo, hi)

    def save(self, path: str | Path, meta: Mapping | None = None) -> None:
        d = self.to_dict()
        if meta:
            d["meta"] = dict(meta)
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LotteryBelief":
        """Read a belief file, or the ``belief`` entry of a truth file."""
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d["belief"] if "belief" in d and "pi" not in d else d)


@dataclass(frozen=True)
class Lottery:
    assign: dict[int, float]
    waitlist: float

    def expected(self, v: Mapping[int, float]) -> float:
        return sum(p * v[j] for j, p in self.assign.items())

    def total(self) -> float:
        return sum(self.assign.values()) + self.waitlist


def lottery_from_rol(
    belief: LotteryBelief | Mapping[int, float],
    R: Sequence[int],
    s: int | None = None,
    t: CellKey | None = None,
) -> Lottery:
    """Product-form lottery of a list.

    ``belief`` is either a full :class:`LotteryBelief` (then ``s`` and ``t``
    select the column) or a plain ``center -> pi`` map already evaluated at the
    applicant's score.
    """
    R = validate_rol(R)
    pi = belief.as_map(t, s) if isinstance(belief, LotteryBelief) else belief
    surv = 1.0
    assign: dict[int, float] = {}
    for j in R:
        if j not in pi:
            raise KeyError(f"belief has no center {j}")
        assign[j] = surv * pi[j]
        surv *= 1.0 - pi[j]
    return Lottery(assign, surv)


def horizon_weights(a0: int, delta: float) -> tuple[float, float]:
    """``(deltatilde, D)``: discounted weight of period 2 and of the whole stay."""
    n = 5 - int(a0)
    dt = delta * (1 - delta**n) / (1 - delta)
    return dt, 1.0 + dt


def blend_two_period(
    L1: Lottery, L2: Lottery, a0: int, delta: float
) -> tuple[Lottery, float, float]:
    """Single blended lottery with weights ``(1 - ptilde, ptilde)``.

    Returns ``(Ltilde, ptilde, deltatilde)``.
    """
    if not 0 <= a0 <= 5:
        raise InvalidInputError(f"entry age {a0} outside 0..5")
    dt, _ = horizon_weights(a0, delta)
    pt = dt / (1 + dt) * L1.waitlist
    centers = set(L1.assign) | set(L2.assign)
    blended = {
        j: (1 - pt) * L1.assign.get(j, 0.0) + pt * L2.assign.get(j, 0.0) for j in sorted(centers)
    }
    return Lottery(blended, (1 - pt) * L1.waitlist + pt * L2.waitlist), pt, dt
