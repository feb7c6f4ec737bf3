"""Batch pipeline: generate -> first-stage -> fit -> counterfactual, plus
report and bench-mia.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 a
counterfactual failed to converge under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import io as fio
from .counterfactual import (
    BONUS_SWEEP,
    Scenario,
    convergence_rows,
    pooled_cutoff_histogram,
    run_scenarios,
    welfare_report,
    WelfareReport,
)
from .lottery import DEFAULT_B, LotteryBelief
from .market import (
    ConfigError,
    MarketConfig,
    Panel,
    THRESHOLD_SPECS,
    generate_market,
    reapplicant_measures,
    summarize,
)
from .mechanism import cutoff_transition_matrix
from .msm import BLOCKS, MomentModel, MsmConfig, ThetaMap, fit
from .policy import BENCH_C_TABLE, Theta, mia_benchmark
from .seeding import derive_seed
from .simulation import bootstrap_belief

log = logging.getLogger("waitlist_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NONCONVERGED = 0, 2, 3, 4
CONFIG_VERSION = 1

_num = {"type": "number"}
_int = {"type": "integer"}
_nonneg = {"type": "integer", "minimum": 0}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["version"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": _nonneg,
        "market": {
            "type": "object",
            "required": ["years", "centers", "theta_true"],
            "properties": {
                "years": {"type": "integer", "minimum": 1},
                "ages": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 5}},
                "centers": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object", "required": ["capacity"],
                        "properties": {
                            "area": {"type": ["string", "integer"]},
                            "capacity": {
                                "oneOf": [
                                    {"type": "array", "items": _nonneg, "maxItems": 6},
                                    {"type": "object", "additionalProperties": _nonneg,
                                     "propertyNames": {"pattern": "^[0-5]$"}},
                                ]
                            },
                        },
                    },
                },
                "applicants": {
                    "type": "object", "propertyNames": {"pattern": "^[0-5]$"},
                    "additionalProperties": {"oneOf": [_nonneg, {"type": "array", "items": _nonneg}]},
                },
                "theta_true": {
                    "type": "object", "required": ["alpha", "beta", "sigma"],
                    "properties": {
                        "alpha": {"type": "array", "items": _num},
                        "beta": {"type": "array", "items": _num},
                        "sigma": {"type": "array", "items": {"type": "array", "items": _num}},
                        "mu0": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6},
                        "sigma0sq": {"type": "array", "items": {"type": "number", "minimum": 0},
                                     "minItems": 6, "maxItems": 6},
                        "idio_var": {"type": "number", "minimum": 0},
                        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "score_probs": {"type": ["array", "object"]},
                "score_mean": _num,
                "score_sd": {"type": "number", "exclusiveMinimum": 0},
                "applicant_areas": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                "bonus": _int,
                "incumbent_fill": {"type": "number", "minimum": 0, "maximum": 1},
                "K": {"type": "integer", "minimum": 1, "maximum": 5},
                "belief": {
                    "type": "object",
                    "properties": {
                        "B": {"type": "integer", "minimum": 1},
                        "max_iters": _nonneg,
                        "epsilon": {"type": "number", "exclusiveMinimum": 0},
                        "damping": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "paths": {
            "type": "object",
            "properties": {k: {"type": "string"} for k in ("panel", "belief", "theta", "out")},
        },
        "first_stage": {"type": "object", "properties": {"B": {"type": "integer", "minimum": 1}}},
        "msm": {
            "type": "object",
            "properties": {
                "S": {"type": "integer", "minimum": 1},
                "budget": _nonneg,
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "noise_seed": _nonneg,
                "blocks": {"type": "array", "items": {"enum": list(BLOCKS)}},
                "cohort_ages": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 5}},
                "restarts": _nonneg,
                "initial_step": {"type": "number", "exclusiveMinimum": 0},
                "two_stage": {"type": "boolean"},
            },
        },
        "counterfactual": {
            "type": "object",
            "properties": {
                "bonuses": {"type": "array", "items": _int},
                "M": {"type": "integer", "minimum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "B": {"type": "integer", "minimum": 1},
                "theta": {"type": "string"},
            },
        },
        "bench": {
            "type": "object",
            "properties": {
                "J": {"type": "integer", "minimum": 1}, "K": {"type": "integer", "minimum": 1, "maximum": 5},
                "M": {"type": "integer", "minimum": 1}, "c": {"type": "array", "items": _num},
            },
        },
    },
}


def _path_str(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {"version": CONFIG_VERSION}
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}", f"invalid JSON: {exc.msg}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(_path_str(e.absolute_path), e.message)


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = load_config(args.config)
        self.seed = args.seed if args.seed is not None else self.config.get("seed")
        out = args.out or self.config.get("paths", {}).get("out") or "."
        self.out = Path(out)
        self.meta = {"config_sha256": fio.config_hash(self.config), "seed": self.seed,
                     "command": args.command}

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed", "a master seed is required (config 'seed' or --seed)")
        return int(self.seed)

    def path(self, key: str, override: str | None, default: str | None = None) -> Path:
        val = override or self.config.get("paths", {}).get(key) or default
        if val is None:
            raise ConfigError(f"paths.{key}", "required path missing")
        return Path(val)

    def market(self) -> MarketConfig:
        if "market" not in self.config:
            raise ConfigError("market", "required section missing")
        return MarketConfig.from_dict(self.config["market"], seed=self.require_seed())


def _existing(p: Path, what: str) -> Path:
    if not p.exists():
        raise ConfigError(what, f"not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_generate(ctx: Context) -> int:
    cfg = ctx.market()
    panel = generate_market(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    files = panel.save(ctx.out, ctx.meta)
    if ctx.args.write_truth:
        th = cfg.theta_true.to_dict()
        fio.write_json(ctx.out / "truth.json", {"theta_true": th, "belief": panel.belief.to_dict()}, ctx.meta)
    if len(panel):
        print(summarize(panel).text(), end="")
    else:
        print("empty panel: no applicants")
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


def cmd_first_stage(ctx: Context) -> int:
    seed = ctx.require_seed()
    panel_dir = _existing(ctx.path("panel", ctx.args.panel), "paths.panel")
    panel = Panel.load(panel_dir, ctx.config.get("market", {}).get("bonus"))
    B = int(ctx.args.B or ctx.config.get("first_stage", {}).get("B", DEFAULT_B))
    belief = bootstrap_belief(panel.sim, panel.structure, B, derive_seed(seed, "first-stage"))
    assert belief.is_monotone(), "admission probabilities must be nondecreasing in score"
    ctx.out.mkdir(parents=True, exist_ok=True)
    target = ctx.out / "belief.json"
    belief.save(target, {**ctx.meta, "B": B})
    print(f"belief for {len(belief.keys())} cells and {len(belief.centers)} centers -> {target}")
    return EXIT_OK


def _msm_config(ctx: Context, seed: int) -> MsmConfig:
    m = ctx.config.get("msm", {})
    cfg = MsmConfig(
        S=int(m.get("S", 100)), budget=int(m.get("budget", 400)), seed=seed,
        noise_seed=m.get("noise_seed"), tol=float(m.get("tol", 1e-4)),
        blocks=tuple(m.get("blocks", ("alpha", "beta"))),
        cohort_ages=tuple(m.get("cohort_ages", (0,))), restarts=int(m.get("restarts", 3)),
        initial_step=float(m.get("initial_step", 0.5)), two_stage=bool(m.get("two_stage", True)),
    )
    if ctx.args.S is not None:
        cfg.S = ctx.args.S
    if ctx.args.budget is not None:
        cfg.budget = ctx.args.budget
    return cfg


def cmd_fit(ctx: Context) -> int:
    seed = ctx.require_seed()
    market = ctx.market()
    panel = Panel.load(_existing(ctx.path("panel", ctx.args.panel), "paths.panel"), market.bonus)
    belief = LotteryBelief.load(_existing(ctx.path("belief", ctx.args.belief), "paths.belief"))
    mcfg = _msm_config(ctx, seed)
    template = market.theta_true
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = fit(panel, belief, mcfg, template)
    model = MomentModel(panel, belief, mcfg.S, mcfg.seed, mcfg.cohort_ages)
    W = res.weight.inverse if res.weight is not None else None
    q_true = model.objective(template, W)
    ctx.out.mkdir(parents=True, exist_ok=True)
    th = res.theta_hat.to_dict()
    fio.write_json(ctx.out / "theta_hat.json", {
        "theta_hat": th,
        "theta_init": res.theta_init.to_dict(),
        "Q_hat": res.q_hat,
        "Q_theta_true": q_true,
        "budget_exhausted": res.budget_exhausted,
        "estimated_blocks": list(mcfg.blocks),
        "S": mcfg.S,
        "cohort_size": model.n,
    }, ctx.meta)
    fio.write_csv(ctx.out / "fit_diagnostics.csv", ["iteration", "stage", "Q", "best_Q"], res.trajectory, ctx.meta)
    fio.write_csv(ctx.out / "moment_fit.csv", ["year", "age", "moment", "observed", "simulated", "gap"],
                  res.moment_fit, ctx.meta)
    print(f"Q(theta_hat) = {res.q_hat:.6g}")
    print(f"Q(theta_true) = {q_true:.6g}")
    if res.budget_exhausted:
        print("warning: optimizer budget exhausted; best point so far returned")
    for w in caught:
        log.debug("fit warning: %s", w.message)
    return EXIT_OK


def _scenarios(ctx: Context, seed: int) -> list[Scenario]:
    c = ctx.config.get("counterfactual", {})
    bonuses = c.get("bonuses", list(BONUS_SWEEP))
    if ctx.args.bonus:
        bonuses = ctx.args.bonus
    return [Scenario(b=int(b), M=int(c.get("M", 7)), epsilon=float(c.get("epsilon", 0.01)),
                     max_iters=int(c.get("max_iters", 50)), damping=float(c.get("damping", 0.0)),
                     B=int(c.get("B", 200)), seed=seed) for b in bonuses]


def cmd_counterfactual(ctx: Context) -> int:
    seed = ctx.require_seed()
    scenarios = _scenarios(ctx, seed)
    if not scenarios:
        print("no scenarios configured; nothing to do")
        return EXIT_OK
    market = ctx.market()
    theta = market.theta_true
    tpath = ctx.args.theta or ctx.config.get("counterfactual", {}).get("theta") \
        or ctx.config.get("paths", {}).get("theta")
    if tpath:
        d = json.loads(_existing(Path(tpath), "paths.theta").read_text())
        theta = Theta.from_dict(d.get("theta_hat", d.get("theta_true", d)))
    belief0 = LotteryBelief.load(_existing(ctx.path("belief", ctx.args.belief), "paths.belief"))
    outs = run_scenarios(theta, market, scenarios, belief0)
    rep = welfare_report(outs)
    ctx.out.mkdir(parents=True, exist_ok=True)
    fio.write_csv(ctx.out / "welfare.csv", WelfareReport.CELL_COLUMNS, rep.by_cell, ctx.meta)
    fio.write_csv(ctx.out / "welfare_buckets.csv", WelfareReport.BUCKET_COLUMNS, rep.by_bucket, ctx.meta)
    fio.write_csv(ctx.out / "cutoff_hist.csv", ["year", "age", "b", "cutoff", "frequency"],
                  pooled_cutoff_histogram(outs), ctx.meta)
    fio.write_csv(ctx.out / "convergence.csv",
                  ["b", "m", "iteration", "relative_change", "converged", "oscillating"],
                  convergence_rows(outs), ctx.meta)
    n_bad = sum(not o.converged for o in outs)
    print(f"{len(outs)} equilibria ({len(scenarios)} bonuses x draws); {n_bad} not converged")
    for r in rep.by_cell:
        if r["entry_age"] == 0:
            print(f"year {r['year']} age 0 b={r['b']:+d}: waitlist share {r['waitlist_share1']:.3f}, "
                  f"mean V {r['mean_V']:.3f}")
    if n_bad and ctx.args.strict:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    panel = Panel.load(_existing(ctx.path("panel", ctx.args.panel), "paths.panel"),
                       ctx.config.get("market", {}).get("bonus"))
    summ = summarize(panel)
    ctx.out.mkdir(parents=True, exist_ok=True)
    summ.save(ctx.out, ctx.meta)
    trans = []
    keys = sorted(panel.sim.cutoffs)
    for (y, a) in keys:
        if (y + 1, a) in panel.sim.cutoffs:
            for r, cols in cutoff_transition_matrix(panel.cutoffs((y, a)), panel.cutoffs((y + 1, a))).items():
                for c, f in cols.items():
                    trans.append({"year": y, "age": a, "from": r, "to": c, "share": f})
    fio.write_csv(ctx.out / "cutoff_transitions.csv", ["year", "age", "from", "to", "share"], trans, ctx.meta)
    rows = []
    for spec in THRESHOLD_SPECS:
        for r in reapplicant_measures(panel, spec):
            rows.append({"spec": spec, **r})
    fio.write_csv(ctx.out / "strategic_waiting.csv", ["spec", "id", "entry_age", "s1", "drop_safety", "delta"],
                  rows, ctx.meta)
    print(summ.text(), end="")
    return EXIT_OK


def cmd_bench_mia(ctx: Context) -> int:
    b = ctx.config.get("bench", {})
    seed = int(ctx.seed) if ctx.seed is not None else 0
    rows = mia_benchmark(J=int(b.get("J", 10)), K=int(b.get("K", 3)), M=int(ctx.args.M or b.get("M", 1000)),
                         c_list=tuple(b.get("c", BENCH_C_TABLE)), seed=seed)
    ctx.out.mkdir(parents=True, exist_ok=True)
    cols = ["c", "fraction_correct", *[f"updates_{k}" for k in range(5)], "updates_5plus"]
    fio.write_csv(ctx.out / "bench_mia.csv", cols, rows, ctx.meta)
    for r in rows:
        print(f"c={r['c']:.1f}: fraction correct {r['fraction_correct']:.3f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "first-stage": cmd_first_stage,
    "fit": cmd_fit,
    "counterfactual": cmd_counterfactual,
    "report": cmd_report,
    "bench-mia": cmd_bench_mia,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads for compiled kernels")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="waitlist-lab", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="draw a synthetic panel")
    g.add_argument("--write-truth", action="store_true", help="also write truth.json")
    f = sub.add_parser("first-stage", parents=[common], help="bootstrap admission probabilities")
    f.add_argument("--panel", metavar="DIR")
    f.add_argument("--B", type=int)
    t = sub.add_parser("fit", parents=[common], help="simulated method of moments")
    t.add_argument("--panel", metavar="DIR")
    t.add_argument("--belief", metavar="PATH")
    t.add_argument("--S", type=int)
    t.add_argument("--budget", type=int)
    c = sub.add_parser("counterfactual", parents=[common], help="bonus sweep to belief fixed points")
    c.add_argument("--belief", metavar="PATH")
    c.add_argument("--theta", metavar="PATH")
    c.add_argument("--bonus", type=int, action="append", help="override the bonus list (repeatable)")
    c.add_argument("--strict", action="store_true", help="exit 4 if any equilibrium fails to converge")
    r = sub.add_parser("report", parents=[common], help="summary tables of a panel")
    r.add_argument("--panel", metavar="DIR")
    b = sub.add_parser("bench-mia", parents=[common], help="approximation benchmark")
    b.add_argument("--M", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
