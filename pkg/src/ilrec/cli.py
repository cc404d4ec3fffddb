"""Command-line entry point: ``ilrec <subcommand> [--config FILE] [--set section.key=value ...]``.

Each run directory holds ``effective_config.yaml``, ``manifest.json`` and the
artifacts of the stages run in it. Stage subcommands pick up where the
previous one left off; a missing prerequisite is reported by file name.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
error, 4 provider error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evalbench as eb
from .config import config_hash, dump_config, load_config
from .errors import ConfigError, DataError, ILRecError, NumericError, UsageError
from .pipeline import ARTIFACTS, Pipeline, data_key

log = logging.getLogger("ilrec")

EFFECTIVE = "effective_config.yaml"
MANIFEST = "manifest.json"
STAGE_INPUTS = {
    "simulate": (),
    "fit-world-model": ("catalog", "log"),
    "collect-demos": ("catalog", "world_model"),
    "train": ("catalog", "world_model", "demos"),
    "evaluate": ("catalog", "policy"),
}
BUDGET_KEYS = ("rounds", "rollout_episodes", "critic_updates", "policy_updates", "batch_size")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _versions():
    import numba

    return {"ilrec": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- run directories ----------------------------------------------------------------------

def _resolve_config(args):
    """Config for a stage command: the run directory's persisted config, then file, then overrides."""
    import yaml

    run_dir = Path(args.run_dir) if args.run_dir else None
    stored = run_dir / EFFECTIVE if run_dir is not None else None
    if stored is not None and stored.exists() and args.config is None:
        base = yaml.safe_load(stored.read_text()) or {}
        from .config import apply_overrides, from_dict

        cfg = from_dict(apply_overrides(base, args.set))
    else:
        cfg = load_config(args.config, args.set)
    if run_dir is None:
        run_dir = Path(cfg.output_dir)
    cfg.output_dir = str(run_dir)
    return cfg, run_dir


def _check_run_dir(cfg, run_dir):
    """Refuse to mix data artifacts built from another env / world-model / expert config."""
    m = _read_manifest(run_dir)
    if m and any((run_dir / ARTIFACTS[k]).exists() for k in ("catalog", "log", "world_model", "demos")):
        if m.get("data_key") not in (None, data_key(cfg)):
            raise ConfigError(f"{run_dir} holds artifacts from a different seed or env/world_model/expert config; "
                              f"use a fresh --run-dir")


def _read_manifest(run_dir):
    p = Path(run_dir) / MANIFEST
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p} is not valid JSON") from exc


def _record(cfg, run_dir, stage, inputs, outputs):
    m = _read_manifest(run_dir)
    m.update({"seed": cfg.seed, "config_hash": config_hash(cfg), "data_key": data_key(cfg),
              "variant": cfg.variant, "versions": _versions()})
    stages = m.setdefault("stages", {})
    stages[stage] = {
        "inputs": {Path(p).name: _sha256(p) for p in inputs},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "config_hash": config_hash(cfg),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (Path(run_dir) / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _start(args):
    cfg, run_dir = _resolve_config(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    _check_run_dir(cfg, run_dir)
    dump_config(cfg, run_dir / EFFECTIVE)
    return cfg, run_dir


# -- stage commands -----------------------------------------------------------------------

def cmd_stage(args):
    cfg, run_dir = _start(args)
    stage = args.command
    pipe = Pipeline(cfg, run_dir=run_dir)
    needs = STAGE_INPUTS[stage]
    if stage == "evaluate" and cfg.variant == "no_irl_baseline":
        needs = ("catalog", "world_model", "demos")
    for name in needs:
        pipe.require(name, f"ilrec {stage}")
    inputs = [run_dir / ARTIFACTS[n] for n in needs]
    if stage == "evaluate":
        m = pipe.evaluate_variant()
        summary = {"variant": cfg.variant, "seed": cfg.seed, "config_hash": config_hash(cfg),
                   "budget": {k: getattr(cfg.policy, k) for k in BUDGET_KEYS}, **m.summary()}
        mp = run_dir / ARTIFACTS["metrics"]
        mp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        outputs = [mp, eb.write_jsonl(run_dir / ARTIFACTS["episodes"], m.table())]
        print(json.dumps(m.summary(), sort_keys=True))
    else:
        outputs = pipe.save(stage)
    _record(cfg, run_dir, stage, inputs, outputs)
    return 0


def cmd_ablate(args):
    cfg, run_dir = _start(args)
    variants = tuple(args.variants) if args.variants else eb.VARIANTS
    res = eb.run_ablation(cfg, variants, args.seeds)
    seeds = list(args.seeds if args.seeds is not None else cfg.evalbench.seeds)
    rows = []
    for v in eb.VARIANTS:
        for k, m in enumerate(res.get(v, [])):
            rows.append({"variant": v, "seed": seeds[k], **m.summary()})
    outputs = [eb.write_csv(run_dir / "ablation.csv", rows), eb.write_jsonl(run_dir / "ablation.jsonl", rows)]
    if "full" in res:
        worse = tuple(v for v in ("no_w", "no_w_env") if v in res)
        counts = eb.ordering_counts(res, "full", worse)
        p = run_dir / "ablation_ordering.json"
        p.write_text(json.dumps({"n_seeds": len(seeds), "full_beats": counts}, indent=2, sort_keys=True) + "\n")
        outputs.append(p)
    _record(cfg, run_dir, "ablate", [], outputs)
    for r in rows:
        print(f"{r['variant']:>16} seed {r['seed']}: R_traj {r['r_traj_mean']:.3f}  Len {r['len_mean']:.2f}")
    return 0


def cmd_sweep(args):
    cfg, run_dir = _start(args)
    rows, series = eb.sweep(cfg, args.param, args.grid, args.seeds)
    stem = f"sweep_{args.param}"
    outputs = [eb.write_csv(run_dir / f"{stem}.csv", rows), eb.write_jsonl(run_dir / f"{stem}.jsonl", rows),
               eb.write_jsonl(run_dir / f"{stem}_series.jsonl", series)]
    _record(cfg, run_dir, f"sweep:{args.param}", [], outputs)
    for s in series:
        print(f"{args.param}={s['x']}: R_traj {s['mean']:.3f} +/- {s['std']:.3f}")
    return 0


# -- report -------------------------------------------------------------------------------

def collect_rows(run_dirs):
    """One row per evaluated run, plus the rows of any ablation tables found."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        if not d.is_dir():
            raise DataError(f"run directory {d} does not exist")
        found = False
        mp = d / ARTIFACTS["metrics"]
        if mp.exists():
            m = json.loads(mp.read_text())
            rows.append({"run": str(d), **m})
            found = True
        ap = d / "ablation.jsonl"
        if ap.exists():
            manifest = _read_manifest(d)
            for ln in ap.read_text().splitlines():
                if ln.strip():
                    rows.append({"run": str(d), "config_hash": manifest.get("config_hash"), **json.loads(ln)})
            found = True
        if not found:
            raise DataError(f"{d} has no {ARTIFACTS['metrics']} or ablation.jsonl; run ilrec evaluate or ablate first")
    return rows


def build_report(rows):
    """Rows ordered as in the ablation table, with comparison warnings."""
    order = {v: k for k, v in enumerate(eb.VARIANTS)}
    rows = sorted(rows, key=lambda r: (order.get(r.get("variant"), len(order)), r.get("seed", 0), r["run"]))
    warnings = []
    by_variant = {}
    for r in rows:
        by_variant.setdefault(r.get("variant"), set()).add(r.get("seed"))
    seed_sets = {v: tuple(sorted(s)) for v, s in by_variant.items()}
    if len(set(seed_sets.values())) > 1:
        warnings.append({"kind": "seed_mismatch", "detail": {str(k): list(v) for k, v in seed_sets.items()}})
    budgets = {json.dumps(r["budget"], sort_keys=True) for r in rows if "budget" in r}
    if len(budgets) > 1:
        warnings.append({"kind": "budget_mismatch", "detail": sorted(budgets)})
    return rows, warnings


def cmd_report(args):
    rows, warnings = build_report(collect_rows(args.runs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat = [{k: (json.dumps(v, sort_keys=True) if isinstance(v, dict) else v) for k, v in r.items()} for r in rows]
    eb.write_csv(out / "report.csv", flat)
    (out / "report.json").write_text(json.dumps({"rows": rows, "warnings": warnings, "flagged": bool(warnings)},
                                                indent=2, sort_keys=True) + "\n")
    for w in warnings:
        print(f"warning: {w['kind']}: {w['detail']}", file=sys.stderr)
    print(f"{len(rows)} rows -> {out / 'report.csv'}")
    return 0


# -- entry point --------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--run-dir", help="run directory (defaults to output_dir from the config)")

    p = _Parser(prog="ilrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"simulate": "build the catalog and the offline interaction log",
             "fit-world-model": "fit the reward model on the offline log",
             "collect-demos": "run the scripted expert inside the world model",
             "train": "weigh demonstrations and train the policy",
             "evaluate": "grade the policy (or the expert baseline) in the simulator"}
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.set_defaults(func=cmd_stage)
    sp = sub.add_parser("ablate", parents=[common], help="train and evaluate every ablation variant on shared seeds")
    sp.add_argument("--variants", nargs="+", choices=eb.VARIANTS)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("sweep", parents=[common], help="sensitivity sweep over one hyperparameter")
    sp.add_argument("param", choices=tuple(eb.SWEEP_PARAMS))
    sp.add_argument("--grid", nargs="+", type=float)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("report", help="merge run directories into comparison tables")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", default="report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ILRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
