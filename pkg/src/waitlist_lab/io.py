"""CSV and JSON plumbing.

Every file written here starts with a block of ``# key=value`` lines
(configuration hash, seed) followed by an ordinary header row.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .mechanism import MAX_LIST, Applicant, InvalidInputError, MarketCell


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def header_lines(meta: Mapping | None) -> list[str]:
    return [f"# {k}={v}" for k, v in (meta or {}).items()]


def write_csv(path: str | Path, fieldnames: Sequence[str], rows: Iterable[Mapping],
              meta: Mapping | None = None) -> None:
    buf = io.StringIO()
    for line in header_lines(meta):
        buf.write(line + "\n")
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """``(meta, rows)``; comment lines at the top become ``meta``."""
    meta: dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        body = lines[k][1:].strip()
        if "=" in body:
            key, val = body.split("=", 1)
            meta[key.strip()] = val.strip()
        k += 1
    rows = list(csv.DictReader(lines[k:]))
    return meta, rows


def write_json(path: str | Path, obj, meta: Mapping | None = None) -> None:
    if meta:
        obj = {**obj, "meta": dict(meta)}
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


ROL_COLUMNS = [f"rol_{k}" for k in range(1, MAX_LIST + 1)]
APPLICANT_COLUMNS = ["id", "year", "age", "area", "score", "tiebreak", *ROL_COLUMNS]
AGE_COLUMNS = lambda prefix: [f"{prefix}_age{a}" for a in range(6)]  # noqa: E731
CENTER_COLUMNS = ["id", "year", "area", *AGE_COLUMNS("capacity"), *AGE_COLUMNS("total"),
                  *AGE_COLUMNS("occupied")]


def parse_rol(row: Mapping[str, str], prefix: str = "rol_") -> tuple[int, ...]:
    out = []
    for k in range(1, MAX_LIST + 1):
        v = (row.get(f"{prefix}{k}") or "").strip()
        if v:
            out.append(int(v))
    return tuple(out)


def rol_columns(rol: Sequence[int], prefix: str = "rol_") -> dict[str, int | None]:
    return {f"{prefix}{k + 1}": (rol[k] if k < len(rol) else None) for k in range(MAX_LIST)}


def load_cells(applicants_csv: str | Path, centers_csv: str | Path) -> dict[tuple[int, int], MarketCell]:
    """Market cells from the two ingestion files.

    ``capacity_age{a}`` on a center's row for year ``y`` is the number of
    seats offered in cell ``(y, a)``.
    """
    _, arows = read_csv(applicants_csv)
    _, crows = read_csv(centers_csv)
    caps: dict[tuple[int, int], dict[int, int]] = {}
    for r in crows:
        try:
            y, j = int(r["year"]), int(r["id"])
            for a in range(6):
                v = (r.get(f"capacity_age{a}") or "").strip()
                if v:
                    caps.setdefault((y, a), {})[j] = int(v)
        except (KeyError, ValueError) as exc:
            raise InvalidInputError(f"centers.csv: bad row {r}: {exc}") from exc
    cells: dict[tuple[int, int], MarketCell] = {}
    for r in arows:
        try:
            key = (int(r["year"]), int(r["age"]))
            app = Applicant(int(r["id"]), int(r["score"]), int(r["tiebreak"]), parse_rol(r))
        except (KeyError, ValueError) as exc:
            raise InvalidInputError(f"applicants.csv: bad row {r}: {exc}") from exc
        if key not in caps:
            raise InvalidInputError(f"no capacities for cell {key}")
        cells.setdefault(key, MarketCell(key[0], key[1], [], caps[key])).applicants.append(app)
    for cell in cells.values():
        cell.validate()
    return cells
