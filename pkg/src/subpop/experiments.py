"""Config-driven experiment pipelines and report emission.

The adversary side of every pipeline (filter construction, target picking,
poison generation) only ever receives the auxiliary split and models
trained on it. The train split is touched only to fit victim models and the
test split only to measure damage.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, grad_opt, influence_attack, label_flip
from .data import Dataset, GaussianSubpop, load_csv, split_dataset, synth_gaussian_subpops
from .defenses import (TABLE_COLUMNS, activation_clustering, retrain_without, sever,
                       spectral_signatures, trim, with_damages)
from .metrics import DamageReport, damage_report, worst_k_summary
from .models import ModelParams, TrainConfig, predict, train
from .selection import (annotation_filters, cluster_match, feature_match,
                        rank_filters)
from .theory import MixtureSpec, chernoff_attack_bound, pigeonhole_attack_size, verify_theorem

DAMAGE_COLUMNS = ("subpop", "alpha", "n_poison", "subpop_aux_count", "subpop_test_count",
                  "target_damage", "collateral_damage", "clean_acc", "poisoned_acc")
WORST_K_COLUMNS = ("alpha", "worst_k", "target_damage", "collateral_damage", "subpop_size")
SWEEP_COLUMNS = ("layer", "alpha", "worst_k", "target_damage", "collateral_damage")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULT_TRAIN = {"learning_rate": 0.05, "epochs": 100, "batch_size": 32, "l2_reg": 0.001,
                 "optimizer": "adam"}


@dataclass
class ExperimentConfig:
    dataset: dict
    seed: int = 0
    split: Sequence[float] = (0.5, 0.25, 0.25)
    model: dict = field(default_factory=dict)
    surrogate: dict | None = None
    selection: dict = field(default_factory=lambda: {"method": "cluster_match"})
    attack: dict = field(default_factory=dict)
    defenses: dict = field(default_factory=dict)
    worst_k: Sequence[int] = (1, 5, 10)
    layer_sweep: Sequence[int] | None = None
    trials: int = 1
    theory: dict | None = None
    output_dir: str = "results"

    def __post_init__(self):
        alphas = self.attack.get("alphas", [1.0])
        if not alphas or min(float(a) for a in alphas) <= 0:
            raise ConfigError("attack.alphas must be positive")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        src = self.dataset
        if "csv" in src and not Path(src["csv"]["path"]).exists():
            raise ConfigError(f"dataset file {src['csv']['path']} does not exist")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in obj:
            raise ConfigError("config needs a 'dataset' section")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    # derived pieces
    def hidden(self, which: str = "model") -> tuple:
        sec = self.model if which == "model" else (self.surrogate or self.model)
        return tuple(sec.get("hidden", ()))

    def train_config(self, which: str = "model", seed: int | None = None) -> TrainConfig:
        sec = self.model if which == "model" else (self.surrogate or self.model)
        kw = {**DEFAULT_TRAIN, **sec.get("train", {})}
        kw["seed"] = self.seed if seed is None else seed
        return TrainConfig(**kw)

    def attack_config(self, alpha: float) -> AttackConfig:
        a = self.attack
        return AttackConfig(poison_rate=float(alpha), target_label=a.get("target_label", "max_loss"),
                            steps=int(a.get("steps", 50)), step_size=float(a.get("step_size", 0.1)),
                            clamp=bool(a.get("clamp", True)))


def orthogonal_blobs(n_blobs: int = 6, per_blob: int = 100, separation: float = 10.0, std: float = 1.0,
                     dim: int | None = None, labels: Sequence[int] | None = None, seed: int = 0) -> Dataset:
    """Gaussian blobs centred at ``separation * e_j``; labels alternate 0/1 by default.

    Each blob sits on its own axis, so a linear model can move one blob's
    decision without touching the others.
    """
    dim = dim or n_blobs
    labels = labels if labels is not None else [j % 2 for j in range(n_blobs)]
    spec = []
    for j in range(n_blobs):
        mean = np.zeros(dim)
        mean[j % dim] = separation
        spec.append(GaussianSubpop(mean.tolist(), std, per_blob, int(labels[j]), f"blob{j}"))
    return synth_gaussian_subpops(spec, seed=seed, n_classes=max(2, max(labels) + 1))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    src = cfg.dataset
    if "csv" in src:
        c = dict(src["csv"])
        path = c.pop("path")
        return load_csv(path, **c)
    if "synthetic" in src:
        entries = [GaussianSubpop(e["mean"], e.get("std", 1.0), e["count"], e["label"], e.get("annotation"))
                   for e in src["synthetic"]]
        return synth_gaussian_subpops(entries, seed=cfg.seed)
    if "orthogonal_blobs" in src:
        return orthogonal_blobs(**src["orthogonal_blobs"], seed=cfg.seed)
    raise ConfigError("dataset must define one of 'csv', 'synthetic', 'orthogonal_blobs'")


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    config: dict
    seed: int
    damage: list = field(default_factory=list)
    worst_k: list = field(default_factory=list)
    defenses: list = field(default_factory=list)
    layer_sweep: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    theory: dict | None = None
    fig2: dict | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_json_default))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunReport":
        return cls(**obj)

    @classmethod
    def from_json(cls, text_or_path) -> "RunReport":
        s = str(text_or_path)
        if not s.lstrip().startswith("{"):
            s = Path(s).read_text()
        return cls.from_dict(json.loads(s))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return v


def emit_reports(report: RunReport, outdir, formats: Sequence[str] = ("csv", "json")) -> list:
    """Write the report's tables; returns the written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(report.to_json())
        written.append(p)
    if "csv" in formats:
        tables = [("damage.csv", report.damage, DAMAGE_COLUMNS),
                  ("worst_k.csv", report.worst_k, WORST_K_COLUMNS),
                  ("defenses.csv", report.defenses, TABLE_COLUMNS + ("subpop", "n_removed", "n_poison")),
                  ("layer_sweep.csv", report.layer_sweep, SWEEP_COLUMNS)]
        for name, rows, cols in tables:
            if rows:
                p = out / name
                p.write_text(_csv_text(rows, cols))
                written.append(p)
        if report.fig2 and report.fig2.get("grid"):
            p = out / "fig2_grid.csv"
            p.write_text(_csv_text(report.fig2["grid"], ("x1", "x2", "unpoisoned", "poisoned", "trim")))
            written.append(p)
    return written


# ---------------------------------------------------------------------------
# attack pipeline

@dataclass
class _State:
    cfg: ExperimentConfig
    split: object
    clean: ModelParams
    surrogate: ModelParams
    filters: list
    order: np.ndarray
    poisoned: dict = field(default_factory=dict)  # (filter index, alpha) -> (train+poison, model)


def _build_filters(cfg: ExperimentConfig, aux: Dataset, surrogate: ModelParams, layer: int | None = None):
    sel = cfg.selection
    method = sel.get("method", "cluster_match")
    if method == "feature_match":
        tags = sel.get("tags")
        return [feature_match(aux, t) for t in tags] if tags else annotation_filters(aux)
    if method == "cluster_match":
        filters, _ = cluster_match(aux, surrogate, sel.get("layer", 0) if layer is None else layer,
                                   sel.get("n_components", 10), sel.get("n_clusters", 100), seed=cfg.seed)
        return filters
    raise ConfigError(f"unknown selection method {method!r}")


def _rank(cfg: ExperimentConfig, filters, aux, surrogate):
    sel = cfg.selection
    order, _ = rank_filters(filters, aux, surrogate, sel.get("pick", "highest_surrogate_damage"),
                            alpha=float(sel.get("pick_alpha", 1.0)), hidden=cfg.hidden("surrogate"),
                            config=cfg.train_config("surrogate"), seed=cfg.seed)
    limit = sel.get("max_subpops")
    return order if limit is None else order[:int(limit)]


def generate_poison(cfg: ExperimentConfig, aux: Dataset, F, surrogate: ModelParams, alpha: float, seed: int):
    """Adversary step: sees only ``aux`` and the surrogate."""
    acfg = cfg.attack_config(alpha)
    poison = label_flip(aux, F, acfg, surrogate, seed=seed)
    gen = cfg.attack.get("generator", "label_flip")
    if gen == "label_flip" or len(poison) == 0:
        return poison
    m = F.mask(aux)
    target = (aux.X[m], aux.y[m])
    if gen == "grad_opt":
        return grad_opt(poison, surrogate, target, acfg, aux.bounds)
    if gen == "influence":
        l2 = cfg.train_config("surrogate").l2_reg
        return influence_attack(poison, surrogate, target, acfg, (aux.X, aux.y), l2, aux.bounds)
    raise ConfigError(f"unknown generator {gen!r}")


def _prepare(cfg: ExperimentConfig) -> _State:
    data = load_dataset(cfg)
    split = split_dataset(data, cfg.split, cfg.seed)
    clean = train(split.train, cfg.hidden(), cfg.train_config())
    surrogate = train(split.aux, cfg.hidden("surrogate"), cfg.train_config("surrogate"))
    filters = _build_filters(cfg, split.aux, surrogate)
    order = _rank(cfg, filters, split.aux, surrogate)
    return _State(cfg, split, clean, surrogate, filters, order)


def _attack_cells(state: _State, filters=None, order=None, keep_models=True):
    cfg, split = state.cfg, state.split
    filters = state.filters if filters is None else filters
    order = state.order if order is None else order
    alphas = [float(a) for a in cfg.attack.get("alphas", [1.0])]
    reports, skipped = [], []
    for fi in order:
        F = filters[int(fi)]
        name = getattr(F, "name", str(fi))
        aux_count = int(F.mask(split.aux).sum())
        if not F.mask(split.test).any():
            skipped.append(name)
            continue
        for alpha in alphas:
            trial_reports = []
            for t in range(cfg.trials):
                seed = cfg.seed + 1000 * t
                poison = generate_poison(cfg, split.aux, F, state.surrogate, alpha, seed)
                pdata = split.train.concat(poison.to_dataset(split.train))
                clean = state.clean if t == 0 else train(split.train, cfg.hidden(), cfg.train_config(seed=seed))
                model = train(pdata, cfg.hidden(), cfg.train_config(seed=seed)) if len(poison) else clean
                if keep_models and t == 0:
                    state.poisoned[(int(fi), alpha)] = (pdata, model)
                trial_reports.append(damage_report(clean, model, split.test, F, subpop=name, alpha=alpha,
                                                   n_poison=len(poison), subpop_aux_count=aux_count))
            reports.append(_mean_report(trial_reports))
    return reports, skipped


def _mean_report(rs: list) -> DamageReport:
    if len(rs) == 1:
        return rs[0]
    r0 = rs[0]
    avg = lambda a: float(np.mean([getattr(r, a) for r in rs]))
    return DamageReport(avg("target_damage"), avg("collateral_damage"), r0.subpop_test_count,
                        avg("clean_acc"), avg("poisoned_acc"), r0.subpop, r0.alpha, r0.n_poison,
                        r0.subpop_aux_count)


def _worst_k_rows(reports, worst_k, extra=None):
    rows = []
    for alpha in sorted({r.alpha for r in reports}):
        sub = [r for r in reports if r.alpha == alpha]
        for k in worst_k:
            s = worst_k_summary(sub, k)
            rows.append({**(extra or {}), "alpha": alpha, "worst_k": k, "target_damage": s.target_damage,
                         "collateral_damage": s.collateral_damage, "subpop_size": s.subpop_size})
    return rows


def run_attack_pipeline(config: ExperimentConfig, state: _State | None = None) -> RunReport:
    """Clean fit, adversary-side filters and poisons, poisoned fits, test damages.

    One damage row per (subpopulation, alpha); subpopulations with no test
    points are listed in ``skipped``.
    """
    state = state or _prepare(config)
    reports, skipped = _attack_cells(state)
    report = RunReport(config=config.to_dict(), seed=config.seed,
                       damage=[r.to_dict() for r in reports], skipped=skipped,
                       metadata={"seed": config.seed, "trials": config.trials,
                                 "n_train": len(state.split.train), "n_aux": len(state.split.aux),
                                 "n_test": len(state.split.test), "n_filters": len(state.filters)})
    if reports:
        report.worst_k = _worst_k_rows(reports, config.worst_k)
    if config.layer_sweep:
        report.layer_sweep = run_layer_sweep(config, state)
    return report


def run_layer_sweep(config: ExperimentConfig, state: _State | None = None) -> list:
    """Worst-k target damage of ClusterMatch + label flipping for each surrogate layer."""
    state = state or _prepare(config)
    rows = []
    for layer in config.layer_sweep:
        filters = _build_filters(config, state.split.aux, state.surrogate, layer=int(layer))
        order = _rank(config, filters, state.split.aux, state.surrogate)
        reports, _ = _attack_cells(state, filters, order, keep_models=False)
        if reports:
            rows += _worst_k_rows(reports, config.worst_k, {"layer": int(layer)})
    return rows


def run_defenses(config: ExperimentConfig, state: _State | None = None,
                 report: RunReport | None = None) -> RunReport:
    """Attack, then defend the ``defend_top`` most damaged subpopulations per alpha.

    The defenses know the exact poison count (best case for the defender).
    """
    state = state or _prepare(config)
    report = report or run_attack_pipeline(config, state)
    dcfg = config.defenses
    top = int(dcfg.get("defend_top", 1))
    hidden, tcfg = config.hidden(), config.train_config()
    for alpha in sorted({r["alpha"] for r in report.damage}):
        rows = sorted((r for r in report.damage if r["alpha"] == alpha), key=lambda r: -r["target_damage"])
        for r in rows[:top]:
            fi = next(i for i, f in enumerate(state.filters) if getattr(f, "name", "") == r["subpop"])
            F = state.filters[fi]
            pdata, pmodel = state.poisoned[(fi, alpha)]
            m = int(pdata.poison.sum())
            outcomes = []
            if "trim" in dcfg:
                outcomes.append(trim(pdata, hidden, tcfg, m, dcfg["trim"].get("max_iter", 5)))
            if "sever" in dcfg:
                outcomes.append(sever(pdata, hidden, tcfg, m, dcfg["sever"].get("max_iter", 5)))
            if "ss" in dcfg:
                s = dcfg["ss"]
                removed = spectral_signatures(pdata, pmodel, s.get("layer", 1), s.get("expected_fraction", 0.1),
                                              s.get("eps_multiplier", 1.5))
                outcomes.append(retrain_without(pdata, removed, hidden, tcfg, "SS"))
            if "ac" in dcfg:
                a = dcfg["ac"]
                removed = activation_clustering(pdata, pmodel, a.get("layer", 1), seed=config.seed)
                outcomes.append(retrain_without(pdata, removed, hidden, tcfg, "AC"))
            for out in outcomes:
                out = with_damages(out, state.clean, pmodel, state.split.test, F)
                report.defenses.append({**out.table_row(alpha), "subpop": r["subpop"],
                                        "n_removed": len(out.removed_indices), "n_poison": out.n_poison})
    return report


# ---------------------------------------------------------------------------
# synthetic TRIM failure

FIG2_MEANS = ((-4.0, 0.0), (0.0, 0.0), (4.0, 0.0))
FIG2_LABELS = (0, 1, 1)


def run_fig2_scenario(seed: int = 0, per_subpop: int = 20, n_poison: int = 30, target: int = 1,
                      std: float = 0.7, test_per_subpop: int = 200, max_iter: int = 5,
                      grid_step: float = 0.25) -> RunReport:
    """Three 2-d subpopulations, label-flip poison on the second, TRIM with exact m.

    Emits damages for the poisoned and TRIM-defended logistic regressions
    plus a grid of the three models' predictions.
    """
    def draw(count, s):
        return synth_gaussian_subpops(
            [GaussianSubpop(list(mu), std, count, lab) for mu, lab in zip(FIG2_MEANS, FIG2_LABELS)], seed=s)

    ss = np.random.SeedSequence(seed).generate_state(3)
    train_d, aux, test = draw(per_subpop, int(ss[0])), draw(per_subpop, int(ss[1])), draw(test_per_subpop, int(ss[2]))
    tcfg = TrainConfig(learning_rate=0.1, epochs=200, batch_size=16, l2_reg=0.001, seed=seed, optimizer="sgd")

    class _Subpop:
        name = f"subpop={target}"

        @staticmethod
        def mask(d):
            return d.subpop_ids == target

    F = _Subpop()
    rate = n_poison / int(F.mask(aux).sum())
    poison = label_flip(aux, F, AttackConfig(poison_rate=rate), seed=seed)
    pdata = train_d.concat(poison.to_dataset(train_d))
    clean = train(train_d, (), tcfg)
    poisoned = train(pdata, (), tcfg)
    outcome = trim(pdata, (), tcfg, len(poison), max_iter)
    defended = outcome.final_model
    outcome = with_damages(outcome, clean, poisoned, test, F)
    removed = np.array(sorted(outcome.removed_indices), dtype=int)
    genuine = int(np.sum((pdata.subpop_ids[removed] == target) & ~pdata.poison[removed]))
    sub = test.subset(F.mask(test))

    xs = np.arange(-7.0, 7.0 + 1e-9, grid_step)
    ys = np.arange(-4.0, 4.0 + 1e-9, grid_step)
    gx, gy = np.meshgrid(xs, ys)
    G = np.column_stack([gx.ravel(), gy.ravel()])
    preds = [predict(mod, G) for mod in (clean, poisoned, defended)]
    grid = [{"x1": float(a), "x2": float(b), "unpoisoned": int(p0), "poisoned": int(p1), "trim": int(p2)}
            for (a, b), p0, p1, p2 in zip(G, *preds)]

    fig2 = {
        "n_poison": len(poison),
        "unpoisoned_subpop_error": float(np.mean(predict(clean, sub.X) != sub.y)),
        "poisoned_target_damage": outcome.target_before,
        "trim_target_damage": outcome.target_after,
        "trim_collateral_damage": outcome.collateral_after,
        "trim_removed": len(removed),
        "trim_removed_genuine_subpop": genuine,
        "trim_removed_genuine_fraction": genuine / len(removed) if len(removed) else 0.0,
        "trim_found_fraction": outcome.found_fraction,
        "trim_iterations": outcome.n_iter,
        "grid": grid,
    }
    return RunReport(config={"scenario": "fig2", "per_subpop": per_subpop, "n_poison": n_poison,
                             "target": target, "std": std, "max_iter": max_iter},
                     seed=seed, defenses=[{**outcome.table_row(rate), "subpop": F.name,
                                           "n_removed": len(removed), "n_poison": outcome.n_poison}],
                     fig2=fig2, metadata={"seed": seed})


# ---------------------------------------------------------------------------
# theory

def run_theory(weights: Sequence[float] | None = None, label_probs: Sequence[float] | None = None,
               n: int = 1000, trials: int = 200, seed: int = 0, k: int = 5) -> dict:
    """Monte Carlo theorem check plus the closed-form bounds."""
    if weights is None:
        weights = (1.0 / k,) * k
    if label_probs is None:
        label_probs = tuple(0.1 if i % 2 == 0 else 0.9 for i in range(len(weights)))
    spec = MixtureSpec(tuple(weights), tuple(label_probs))
    rep = verify_theorem(spec, n, trials, seed)
    bound = chernoff_attack_bound(min(spec.weights), n)
    return {
        "spec": {"weights": list(spec.weights), "label_probs": list(spec.label_probs)},
        "verification": rep.to_dict(),
        "chernoff": {"alpha": min(spec.weights), "n": n, "size_bound": bound.size_bound,
                     "success_prob_lower": bound.success_prob_lower},
        "pigeonhole": {"n": n, "k": spec.k, "attack_size": pigeonhole_attack_size(n, spec.k)},
    }
