"""Truncated serial dictatorship with priority scores and waitlist bonus.

Applicants are processed in descending ``(score, -tiebreak)`` order; each takes
the highest-ranked center on her list that still has a vacant seat, or is
waitlisted.  Cutoffs are reported as a three-way tagged value; the numeric
sentinels used in the counterfactual figures (35 for no vacancy, 11 for no
binding cutoff) only appear at report time.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

SCORE_MIN = 20
SCORE_MAX = 35
MAX_LIST = 5

#: numeric cutoff codes used by the array kernels; ``code <= s`` means "admits s"
OPEN_CODE = -1
CLOSED_CODE = 10**6

#: report-time sentinels
CLOSED_SENTINEL = 35
OPEN_SENTINEL = 11


class InvalidInputError(ValueError):
    """Malformed market data (duplicate priority, unknown center, bad list)."""


class EmptyResultError(ValueError):
    """An aggregation had nothing to aggregate over."""


Rol = tuple[int, ...]


def validate_rol(rol: Sequence[int], max_len: int = MAX_LIST) -> Rol:
    rol = tuple(int(j) for j in rol)
    if len(rol) > max_len:
        raise InvalidInputError(f"ROL {rol} longer than {max_len}")
    if len(set(rol)) != len(rol):
        raise InvalidInputError(f"ROL {rol} lists a center twice")
    return rol


@dataclass(frozen=True)
class Cutoff:
    kind: str  # "score" | "open" | "closed"
    score: int | None = None

    @classmethod
    def at(cls, s: int) -> "Cutoff":
        return cls("score", int(s))

    def admits(self, s: int) -> bool:
        if self.kind == "open":
            return True
        if self.kind == "closed":
            return False
        return s >= self.score

    @property
    def code(self) -> int:
        if self.kind == "open":
            return OPEN_CODE
        if self.kind == "closed":
            return CLOSED_CODE
        return int(self.score)

    @classmethod
    def from_code(cls, code: int) -> "Cutoff":
        code = int(code)
        if code == OPEN_CODE:
            return OPEN
        if code == CLOSED_CODE:
            return CLOSED
        return cls.at(code)

    def sentinel(self) -> int:
        if self.kind == "open":
            return OPEN_SENTINEL
        if self.kind == "closed":
            return CLOSED_SENTINEL
        return int(self.score)

    def label(self) -> int | str:
        return self.score if self.kind == "score" else self.kind

    def __repr__(self) -> str:
        return f"Score({self.score})" if self.kind == "score" else self.kind.capitalize()


OPEN = Cutoff("open")
CLOSED = Cutoff("closed")


def code_to_sentinel(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    out = codes.copy()
    out[codes == OPEN_CODE] = OPEN_SENTINEL
    out[codes == CLOSED_CODE] = CLOSED_SENTINEL
    return out


@dataclass(frozen=True)
class Applicant:
    id: int
    score: int
    tiebreak: int
    rol: Rol = ()


@dataclass
class MarketCell:
    """One (year, age) admission round."""

    year: int
    age: int
    applicants: list[Applicant]
    capacities: dict[int, int]

    def validate(self) -> None:
        seen: set[tuple[int, int]] = set()
        ids: set[int] = set()
        for a in self.applicants:
            validate_rol(a.rol)
            key = (a.score, a.tiebreak)
            if key in seen:
                raise InvalidInputError(
                    f"cell ({self.year},{self.age}): duplicate (score, tiebreak) {key}"
                )
            seen.add(key)
            if a.id in ids:
                raise InvalidInputError(f"cell ({self.year},{self.age}): duplicate applicant {a.id}")
            ids.add(a.id)
            for j in a.rol:
                if j not in self.capacities:
                    raise InvalidInputError(
                        f"applicant {a.id} lists unknown center {j}"
                    )
        for j, c in self.capacities.items():
            if c < 0:
                raise InvalidInputError(f"center {j} has negative capacity {c}")


@dataclass(frozen=True)
class AssignmentResult:
    assignment: dict[int, int | None]  # applicant id -> center id, None = waitlisted
    cutoffs: dict[int, Cutoff]
    residual: dict[int, int] = field(default_factory=dict)

    def waitlisted(self) -> list[int]:
        return [i for i, j in self.assignment.items() if j is None]


def priority_order(applicants: Iterable[Applicant]) -> list[Applicant]:
    return sorted(applicants, key=lambda a: (-a.score, a.tiebreak))


def run_serial_dictatorship(cell: MarketCell) -> AssignmentResult:
    """Reference implementation on a :class:`MarketCell`."""
    cell.validate()
    remaining = dict(cell.capacities)
    last_admitted: dict[int, int] = {}
    assignment: dict[int, int | None] = {}
    for a in priority_order(cell.applicants):
        assignment[a.id] = None
        for j in a.rol:
            if remaining[j] > 0:
                remaining[j] -= 1
                assignment[a.id] = j
                last_admitted[j] = a.score
                break
    cutoffs = {}
    for j, cap in cell.capacities.items():
        if cap == 0:
            cutoffs[j] = CLOSED
        elif remaining[j] == 0:
            cutoffs[j] = Cutoff.at(last_admitted[j])
        else:
            cutoffs[j] = OPEN
    return AssignmentResult(assignment, cutoffs, remaining)


def apply_waitlist_bonus(
    s: int, b: int, lo: int = SCORE_MIN, hi: int = SCORE_MAX
) -> tuple[int, bool]:
    """Return ``(clamped score, clamped?)`` for a reapplicant with bonus ``b``."""
    raw = int(s) + int(b)
    out = min(max(raw, lo), hi)
    if out != raw:
        log.debug("waitlist bonus clamped %d%+d -> %d", s, b, out)
    return out, out != raw


def clamp_scores(s: np.ndarray, lo: int = SCORE_MIN, hi: int = SCORE_MAX) -> np.ndarray:
    return np.clip(s, lo, hi)


def cutoff_transition_matrix(
    cutoffs_t1: Mapping[int, Cutoff], cutoffs_t2: Mapping[int, Cutoff]
) -> dict[int | str, dict[int | str, float]]:
    """Row-normalised frequencies of period-2 cutoff given period-1 cutoff.

    Categories are the score for binding cutoffs and ``"open"``/``"closed"``
    otherwise.  Only centers present in both maps are counted.
    """
    common = sorted(set(cutoffs_t1) & set(cutoffs_t2))
    if not common:
        raise EmptyResultError("cutoff maps share no centers")
    counts: dict[int | str, Counter] = defaultdict(Counter)
    for j in common:
        counts[cutoffs_t1[j].label()][cutoffs_t2[j].label()] += 1
    out = {}
    for row, c in counts.items():
        tot = sum(c.values())
        out[row] = {col: n / tot for col, n in c.items()}
    return out


# ---------------------------------------------------------------------------
# array kernels


@njit(cache=True)
def sd_assign(rols: np.ndarray, capacity: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Serial dictatorship over applicants already in priority order.

    ``rols`` is (n, K) with -1 padding.  Returns ``(assign, remaining, last)``
    where ``last[j]`` is the row of the last applicant admitted to ``j``.
    """
    n, K = rols.shape
    remaining = capacity.copy()
    assign = np.full(n, -1, dtype=np.int64)
    last = np.full(capacity.shape[0], -1, dtype=np.int64)
    for i in range(n):
        for k in range(K):
            j = rols[i, k]
            if j < 0:
                break
            if remaining[j] > 0:
                remaining[j] -= 1
                assign[i] = j
                last[j] = i
                break
    return assign, remaining, last


@njit(cache=True)
def cutoff_codes(capacity, remaining, last, scores):
    J = capacity.shape[0]
    out = np.empty(J, dtype=np.int64)
    for j in range(J):
        if capacity[j] <= 0:
            out[j] = 1000000
        elif remaining[j] == 0:
            out[j] = scores[last[j]]
        else:
            out[j] = -1
    return out


@njit(cache=True)
def sd_cutoffs_weighted(rols, scores, counts, capacity):
    """Cutoff codes when row ``i`` stands for ``counts[i]`` identical applicants.

    Rows must be in priority order.  Copies of one applicant are processed
    back to back, so a block can spill over to her lower choices once a
    center fills.
    """
    n, K = rols.shape
    remaining = capacity.copy()
    J = capacity.shape[0]
    last_score = np.full(J, -1, dtype=np.int64)
    for i in range(n):
        c = counts[i]
        if c == 0:
            continue
        for k in range(K):
            j = rols[i, k]
            if j < 0:
                break
            if remaining[j] > 0:
                take = c if c < remaining[j] else remaining[j]
                remaining[j] -= take
                c -= take
                last_score[j] = scores[i]
                if c == 0:
                    break
    out = np.empty(J, dtype=np.int64)
    for j in range(J):
        if capacity[j] <= 0:
            out[j] = 1000000
        elif remaining[j] == 0:
            out[j] = last_score[j]
        else:
            out[j] = -1
    return out


def rols_to_array(rols: Sequence[Sequence[int]], K: int = MAX_LIST) -> np.ndarray:
    out = np.full((len(rols), K), -1, dtype=np.int64)
    for i, r in enumerate(rols):
        out[i, : len(r)] = r
    return out


def array_to_rol(row: np.ndarray) -> Rol:
    return tuple(int(j) for j in row if j >= 0)


@dataclass
class CellArrays:
    """A cell in priority order with centers re-indexed to ``0..J-1``."""

    ids: np.ndarray
    scores: np.ndarray
    tiebreaks: np.ndarray
    rols: np.ndarray
    capacity: np.ndarray
    centers: list[int]


def cell_to_arrays(cell: MarketCell) -> CellArrays:
    cell.validate()
    centers = sorted(cell.capacities)
    index = {c: k for k, c in enumerate(centers)}
    ordered = priority_order(cell.applicants)
    rols = rols_to_array([[index[j] for j in a.rol] for a in ordered])
    return CellArrays(
        ids=np.array([a.id for a in ordered], dtype=np.int64),
        scores=np.array([a.score for a in ordered], dtype=np.int64),
        tiebreaks=np.array([a.tiebreak for a in ordered], dtype=np.int64),
        rols=rols,
        capacity=np.array([cell.capacities[c] for c in centers], dtype=np.int64),
        centers=centers,
    )
