"""Command line entry point: ``subpop {cluster,attack,defend,theory,fig2,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import split_dataset
from .experiments import (ExperimentConfig, RunReport, _prepare, emit_reports, load_dataset,
                          run_attack_pipeline, run_defenses, run_fig2_scenario, run_theory)
from .models import train
from .selection import cluster_match


def _load_config(args) -> ExperimentConfig:
    obj = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        obj["seed"] = args.seed
    if getattr(args, "out", None):
        obj["output_dir"] = args.out
    return ExperimentConfig.from_dict(obj)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.output_dir if cfg else "results")


def cmd_cluster(args) -> dict:
    cfg = _load_config(args)
    sel = cfg.selection
    aux, surrogate = _prepare_split(cfg)
    filters, model = cluster_match(aux, surrogate, sel.get("layer", 0), sel.get("n_components", 10),
                                   sel.get("n_clusters", 100), seed=cfg.seed)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cluster_model.json").write_text(model.to_json())
    sizes = np.bincount(model.assign(aux.X), minlength=model.n_clusters)
    lines = ["cluster,aux_size"] + [f"{j},{int(s)}" for j, s in enumerate(sizes)]
    (out / "clusters.csv").write_text("\n".join(lines) + "\n")
    return {"written": [str(out / "cluster_model.json"), str(out / "clusters.csv")]}


def _prepare_split(cfg: ExperimentConfig):
    split = split_dataset(load_dataset(cfg), cfg.split, cfg.seed)
    return split.aux, train(split.aux, cfg.hidden("surrogate"), cfg.train_config("surrogate"))


def cmd_attack(args) -> dict:
    cfg = _load_config(args)
    report = run_attack_pipeline(cfg)
    return {"written": [str(p) for p in emit_reports(report, _out_dir(args, cfg), args.format)]}


def cmd_defend(args) -> dict:
    cfg = _load_config(args)
    if not cfg.defenses:
        cfg.defenses = {"trim": {}, "sever": {}}
    state = _prepare(cfg)
    report = run_defenses(cfg, state)
    return {"written": [str(p) for p in emit_reports(report, _out_dir(args, cfg), args.format)]}


def cmd_theory(args) -> dict:
    weights = label_probs = None
    n, trials, k = args.n, args.trials, args.k
    seed = args.seed if args.seed is not None else 0
    if args.config:
        obj = json.loads(Path(args.config).read_text())
        th = obj.get("theory", obj)
        weights, label_probs = th.get("weights"), th.get("label_probs")
        n, trials, k = th.get("n", n), th.get("trials", trials), th.get("k", k)
        if args.seed is None:
            seed = obj.get("seed", 0)
    result = run_theory(weights, label_probs, n=n, trials=trials, seed=seed, k=k)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "theory.json"
    path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return {"written": [str(path)], "flip_rate": result["verification"]["flip_rate"]}


def cmd_fig2(args) -> dict:
    report = run_fig2_scenario(seed=args.seed if args.seed is not None else 0)
    return {"written": [str(p) for p in emit_reports(report, Path(args.out or "results"), args.format)]}


def cmd_report(args) -> dict:
    report = RunReport.from_json(args.input)
    return {"written": [str(p) for p in emit_reports(report, Path(args.out or "results"), args.format)]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subpop", description="Subpopulation poisoning experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--format", nargs="+", choices=("csv", "json"), default=["csv", "json"])

    common(sub.add_parser("cluster", help="fit ClusterMatch on the auxiliary split"))
    common(sub.add_parser("attack", help="run the attack pipeline"))
    common(sub.add_parser("defend", help="attack, then apply defenses"))
    th = sub.add_parser("theory", help="Monte Carlo check of the mixture-learner attack")
    common(th, config_required=False)
    th.add_argument("--n", type=int, default=1000)
    th.add_argument("--k", type=int, default=5)
    th.add_argument("--trials", type=int, default=200)
    common(sub.add_parser("fig2", help="synthetic TRIM failure scenario"), config_required=False)
    rp = sub.add_parser("report", help="re-emit tables from a report.json")
    rp.add_argument("--input", required=True)
    rp.add_argument("--out", default=None)
    rp.add_argument("--format", nargs="+", choices=("csv", "json"), default=["csv"])
    return p


COMMANDS = {"cluster": cmd_cluster, "attack": cmd_attack, "defend": cmd_defend, "theory": cmd_theory,
            "fig2": cmd_fig2, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as JSON for callers
        json.dump({"error": type(exc).__name__, "message": str(exc), "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump({"status": "ok", "command": args.command, **result}, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
