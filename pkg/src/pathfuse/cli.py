"""Command-line entry point: ``pathfuse {synth,graph-build,train,eval,attribute}``.

Options come from an optional JSON file (``--config``) holding RunConfig
fields, plus a ``synth`` section of SynthSpec fields; flags given on the
command line override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cellgraph import AlignmentError, build_cell_graph, read_gray, read_mask
from .evalstats import c_index
from .fusion import CheckpointError, ConfigurationError
from .numcore import DimensionError, ParameterError
from .pipeline import MODELS, RunConfig, load_config, run_attribute, run_eval, run_train
from .synthio import IngestionError, SynthSpec, save_cohort, synth_generate

log = logging.getLogger("pathfuse")

USER_ERRORS = (AlignmentError, ConfigurationError, CheckpointError, IngestionError, ParameterError,
               DimensionError, FileNotFoundError)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="cohort manifest JSON")
    p.add_argument("--task", choices=["surv", "grade3"])
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--folds", type=int, help="number of Monte Carlo folds")
    p.add_argument("--fold", type=int, action="append",
                   help="run only this fold index (repeatable)")
    p.add_argument("--parallel", type=int, help="folds trained concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathfuse", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run options")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--patients", type=int)
    p.add_argument("--rois", type=int, help="ROIs per patient")

    p = sub.add_parser("graph-build", parents=[common], help="cell graph from a nuclei mask")
    p.add_argument("--mask", required=True, help="label mask (PNG or CSV)")
    p.add_argument("--image", required=True, help="grayscale or RGB tissue image")
    p.add_argument("--features", help="CSV of external per-nucleus features, one row per label")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-distance", type=float, default=100.0)

    for name, text in (("train", "train a model on each fold"),
                       ("eval", "metrics, KM curves and plot data from fold predictions"),
                       ("attribute", "Integrated Gradients / Grad-CAM on test patients")):
        p = sub.add_parser(name, parents=[common], help=text)
        _add_run_flags(p)
        if name == "attribute":
            p.add_argument("--nodes", type=int, help="Gauss-Legendre nodes")
            p.add_argument("--limit", type=int, help="patients per fold")
    return parser


def run_config(args) -> RunConfig:
    data = load_config(args.config) if args.config else {}
    data.pop("synth", None)
    overrides = {
        "manifest": getattr(args, "manifest", None),
        "task": getattr(args, "task", None),
        "model": getattr(args, "model", None),
        "folds": getattr(args, "folds", None),
        "fold": getattr(args, "fold", None),
        "parallel": getattr(args, "parallel", None),
        "seed": args.seed,
        "out": args.out,
        "attribution_nodes": getattr(args, "nodes", None),
        "attribution_limit": getattr(args, "limit", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def cmd_synth(args) -> int:
    data = load_config(args.config).get("synth", {}) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.patients is not None:
        data["n_patients"] = args.patients
    if args.rois is not None:
        data["rois_per_patient"] = args.rois
    spec = SynthSpec(**data)
    out = Path(args.out or "cohort")
    cohort = synth_generate(spec)
    manifest = save_cohort(cohort, out)
    risk = np.array([r.true_risk for r in cohort.records])
    meta = {
        "spec": asdict(spec),
        "bayes_c_index": c_index([r.time for r in cohort.records],
                                 [r.event for r in cohort.records], risk),
        "censoring_rate": 1.0 - float(np.mean([r.event for r in cohort.records])),
    }
    (out / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    print(f"wrote {manifest} ({len(cohort)} patients, Bayes c-index {meta['bayes_c_index']:.4f})")
    return 0


def cmd_graph_build(args) -> int:
    mask = read_mask(args.mask)
    gray = read_gray(args.image)
    external = None
    if args.features:
        external = np.loadtxt(args.features, delimiter=",", ndmin=2)
    graph = build_cell_graph(mask, gray, external, k=args.k, d=args.max_distance)
    out = Path(args.out or "graph.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    graph.save(out)
    print(f"wrote {out} ({graph.n_nodes} nodes, {len(graph.edges())} edges)")
    return 0


def cmd_train(args) -> int:
    cfg = run_config(args)
    for row in run_train(cfg):
        print(f"fold {row['fold']}: {row['n_test']} test patients, {row['seconds']:.1f}s")
    return 0


def cmd_eval(args) -> int:
    cfg = run_config(args)
    metrics = run_eval(cfg)
    if "c_index" in metrics:
        ci = metrics["c_index"]
        print(f"{cfg.model}: c-index {ci['mean']:.4f} +/- {ci['sd']:.4f}")
    else:
        auc = metrics["micro_auc"]
        print(f"{cfg.model}: micro AUC {auc['mean']:.4f} +/- {auc['sd']:.4f}")
    return 0


def cmd_attribute(args) -> int:
    cfg = run_config(args)
    report = run_attribute(cfg)
    gaps = [f["max_completeness_gap"] for f in report["folds"].values()]
    print(f"{cfg.model}: attributed {len(gaps)} fold(s), max completeness gap {max(gaps):.2e}")
    return 0


COMMANDS = {"synth": cmd_synth, "graph-build": cmd_graph_build, "train": cmd_train,
            "eval": cmd_eval, "attribute": cmd_attribute}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"pathfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
