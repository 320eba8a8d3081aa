"""Command-line experiment runner.

Each run writes into its own directory:

* ``config.json``: the fully resolved config (feeding it back via
  ``--config`` reproduces the run).
* ``metrics.jsonl``: one :class:`MetricsRecord` per logged step, then one
  ``{"kind": "probe", "probe_acc": ...}`` line if the linear probe ran.
* ``summary.json``: verdict, evidence, final kNN and probe accuracy.
* ``checkpoint.npz`` and, for the alternating trainer, ``eta_bank.npz``.

Exit statuses are listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import PRESETS, SWEEPS, ConfigError, ExperimentConfig, config_from_dict, parse_config, preset_config
from .diagnostics import CollapseVerdict, InsufficientHistory, MetricsRecord, ProbeConfig, collapse_verdict, linear_probe
from .nn import save_checkpoint
from .training import Experiment, run_experiment

logger = logging.getLogger("siamlab")

EXIT_CODES = {
    "healthy": 0,
    "error": 1,
    "usage": 2,
    "collapsed": 3,
    "diverged": 4,
    "unstable": 5,
    "undetermined": 6,  # history shorter than the verdict window
}


def read_metrics(path: str | Path) -> tuple[list[MetricsRecord], dict]:
    """Split a metrics file into training records and extra (probe) entries."""
    records, extra = [], {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("kind") == "probe":
                extra["probe_acc"] = obj["probe_acc"]
            else:
                records.append(MetricsRecord.from_json(obj))
    return records, extra


def summarize(run_dir: str | Path) -> dict:
    """Recompute a run's summary from ``metrics.jsonl`` and ``config.json``."""
    run_dir = Path(run_dir)
    cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    records, extra = read_metrics(run_dir / "metrics.jsonl")
    try:
        verdict = collapse_verdict(records, cfg.model.output_dim, cfg.diagnostics.verdict)
    except InsufficientHistory as err:
        verdict = CollapseVerdict("undetermined", {"reason": str(err)})
    knn = [r.knn_acc for r in records if r.knn_acc is not None]
    return {
        "name": cfg.name,
        "verdict": verdict.status,
        "evidence": verdict.evidence,
        "steps": records[-1].step + 1 if records else 0,
        "final_knn_acc": knn[-1] if knn else None,
        "probe_acc": extra.get("probe_acc"),
    }


def run(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Train one config, write all artifacts under ``out`` and return the summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    exp = Experiment(cfg)
    bank = None
    if cfg.trainer == "alternating":
        from .hypothesis import alternating_train, make_bank

        bank = make_bank(cfg.hypothesis, len(exp.train_ds), exp.model.d, exp.dtype)
        stream = alternating_train(cfg, exp, bank)
    else:
        stream = run_experiment(cfg, exp)
    last = None
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in stream:
            fh.write(json.dumps(rec.to_json()) + "\n")
            fh.flush()
            last = rec
        aborted = last is not None and last.aborted
        if cfg.diagnostics.linear_probe and not aborted and exp.test_ds.labels is not None:
            acc = linear_probe(
                exp.features(exp.train_ds.x), exp.train_ds.labels, ProbeConfig(seed=cfg.seed),
                exp.features(exp.test_ds.x), exp.test_ds.labels,
            )
            fh.write(json.dumps({"kind": "probe", "probe_acc": acc}) + "\n")
    save_checkpoint(exp.model, out / "checkpoint.npz", extra={"name": cfg.name, "steps": exp.total_steps})
    if bank is not None:
        bank.save(out / "eta_bank.npz")
    summary = summarize(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _run_named(name: str, seed: int | None, out: str) -> dict:
    over = {} if seed is None else {"seed": seed}
    return run(preset_config(name, over), out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="siamlab",
        description="Train and diagnose Siamese self-supervised models.",
        epilog="Exit status: " + ", ".join(f"{v} {k}" for k, v in EXIT_CODES.items())
        + ". Dataset root for CIFAR-10 runs: $SIAMLAB_DATA.",
    )
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="YAML or JSON config file")
    src.add_argument("--preset", metavar="NAME", help="named preset (see --list-presets)")
    src.add_argument("--sweep", metavar="NAME", help="run every preset of a sweep in parallel processes")
    src.add_argument("--list-presets", action="store_true", help="print presets and sweeps, then exit")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", metavar="DIR", help="output directory (default: runs/<name>)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel processes for --sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.list_presets:
        for name in sorted(PRESETS):
            print(name)
        for name, members in sorted(SWEEPS.items()):
            print(f"sweep {name}: {' '.join(members)}")
        return 0
    try:
        if args.sweep:
            return _sweep(args)
        if args.config:
            cfg = parse_config(Path(args.config).read_text())
        elif args.preset:
            cfg = preset_config(args.preset)
        else:
            cfg = preset_config("baseline")
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out or cfg.out or f"runs/{cfg.name}"
        summary = run(cfg, out)
    except ConfigError as err:
        print(f"siamlab: {err}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except (OSError, ValueError) as err:
        print(f"siamlab: {err}", file=sys.stderr)
        return EXIT_CODES["error"]
    print(json.dumps({k: summary[k] for k in ("name", "verdict", "final_knn_acc", "probe_acc")}))
    return EXIT_CODES[summary["verdict"]]


def _sweep(args) -> int:
    if args.sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep '{args.sweep}'")
    root = Path(args.out or f"runs/{args.sweep}")
    names = SWEEPS[args.sweep]
    results = {}
    failed = False
    with ProcessPoolExecutor(max_workers=max(1, min(args.jobs, len(names)))) as pool:
        futures = {n: pool.submit(_run_named, n, args.seed, str(root / n)) for n in names}
        for name, fut in futures.items():
            try:
                results[name] = fut.result()["verdict"]
            except Exception as err:  # one failed run must not hide the others
                failed = True
                results[name] = f"error: {err}"
            print(f"{name}: {results[name]}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep_summary.json").write_text(json.dumps(results, indent=2))
    return EXIT_CODES["error"] if failed else 0


if __name__ == "__main__":
    sys.exit(main())
