"""Fold-wise training, evaluation and attribution over a cohort manifest.

Output layout under ``RunConfig.out``::

    {task}/fold_{k}/normalization.json
    {task}/fold_{k}/{net}.params.json          unimodal checkpoints (snn, gcn, cnn)
    {task}/fold_{k}/{model}.fusion.json        fusion descriptor
    {task}/fold_{k}/{model}.model.params.json  parameters of the evaluated model
    {task}/fold_{k}/{model}.predictions.csv
    {task}/eval/{model}/metrics.json, km_*.csv, plot_data.csv
    {task}/attribution/{model}/fold_{k}/...
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attribution as attr
from .cellgraph import fit_normalizer
from .evalstats import (
    BIN_SCHEMES,
    bin_comparisons,
    c_index,
    cls_metrics,
    hazard_bins,
    logrank_test,
    write_km_csvs,
)
from .fusion import (
    MODES,
    CheckpointError,
    ConfigurationError,
    FusionConfig,
    FusionHyper,
    GatedFusionNet,
    build_embedders,
    fusion_predict,
    train_schedule,
)
from .nets import CnnConfig, CnnNet, GcnConfig, GcnNet, SnnConfig, SnnNet, UnimodalNet
from .numcore import ParamStore, rng_stream
from .synthio import Cohort, load_cohort, split_folds
from .training import InstanceSet, TrainHyper, predict, train_unimodal, unimodal_forward

log = logging.getLogger(__name__)

TASKS = {"surv": "survival", "survival": "survival", "grade3": "grade", "grade": "grade"}
UNIMODAL = {"snn": "genomic", "gcn": "graph", "cnn": "image"}
MODELS = tuple(UNIMODAL) + tuple(MODES)


def _default_unimodal():
    return {
        "snn": TrainHyper(epochs=30, lr=2e-3, batch_size=64, l1=3e-4),
        "gcn": TrainHyper(epochs=8, lr=2e-3, batch_size=32),
        "cnn": TrainHyper(epochs=20, lr=5e-4, batch_size=8, augment=True),
    }


@dataclass
class RunConfig:
    task: str = "surv"
    model: str = "cnn-gcn-snn"
    seed: int = 0
    folds: int = 15
    fold: list[int] | None = None
    train_fraction: float = 0.8
    out: str = "runs"
    manifest: str | None = None
    parallel: int = 1
    train_missing_unimodal: bool = False
    snn: SnnConfig = field(default_factory=SnnConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    unimodal: dict = field(default_factory=_default_unimodal)
    fusion: FusionConfig | None = None
    fusion_train: FusionHyper = field(default_factory=FusionHyper)
    attribution_nodes: int = attr.DEFAULT_NODES
    attribution_limit: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected surv or grade3")
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.fold is not None:
            self.fold = [int(k) for k in self.fold]
            bad = [k for k in self.fold if not 0 <= k < self.folds]
            if bad:
                raise ConfigurationError(f"fold index {bad[0]} outside 0..{self.folds - 1}")
        if self.parallel < 1:
            raise ConfigurationError("--parallel must be at least 1")

    @property
    def task_name(self) -> str:
        return TASKS[self.task]

    @property
    def fold_indices(self) -> list[int]:
        return list(range(self.folds)) if self.fold is None else list(self.fold)

    def fusion_config(self, mode: str) -> FusionConfig:
        base = asdict(self.fusion) if self.fusion is not None else {}
        base.update(mode=mode, task=self.task_name)
        return FusionConfig(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        nested = {"snn": SnnConfig, "gcn": GcnConfig, "cnn": CnnConfig,
                  "fusion_train": FusionHyper}
        for key, kind in nested.items():
            if isinstance(data.get(key), dict):
                data[key] = kind(**data[key])
        if isinstance(data.get("fusion"), dict):
            data["fusion"] = FusionConfig(**{"mode": "cnn-gcn-snn", "task": "survival",
                                             **data["fusion"]})
        if isinstance(data.get("unimodal"), dict):
            merged = _default_unimodal()
            for net, hyper in data["unimodal"].items():
                if net not in merged:
                    raise ConfigurationError(f"unknown unimodal network {net!r}")
                merged[net] = hyper if isinstance(hyper, TrainHyper) else TrainHyper(
                    **{**asdict(merged[net]), **hyper})
            data["unimodal"] = merged
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def thread_cap(requested: int) -> int:
    env = os.environ.get("PATHFUSE_THREADS")
    if env:
        try:
            return max(1, min(requested, int(env)))
        except ValueError as exc:
            raise ConfigurationError(f"PATHFUSE_THREADS must be an integer, got {env!r}") from exc
    return requested


def model_modalities(model: str) -> tuple[str, ...]:
    if model in UNIMODAL:
        return (UNIMODAL[model],)
    return tuple(sorted(set(MODES[model])))


def fold_dir(cfg: RunConfig, k: int) -> Path:
    return Path(cfg.out) / cfg.task / f"fold_{k}"


def fold_seed(seed: int, k: int) -> int:
    return int(rng_stream(seed, f"fold/{k}").integers(2**31 - 1))


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class Normalization:
    genomic_mean: list[float] | None = None
    genomic_std: list[float] | None = None
    graph_mean: list[float] | None = None
    graph_std: list[float] | None = None
    image_mean: list[float] | None = None
    image_std: list[float] | None = None

    @classmethod
    def fit(cls, cohort: Cohort, train_ids) -> "Normalization":
        recs = cohort.by_id(train_ids)
        out = cls()
        gen = [r.genomic for r in recs if r.genomic is not None]
        if gen:
            G = np.array(gen)
            std = G.std(axis=0)
            out.genomic_mean = G.mean(axis=0).tolist()
            out.genomic_std = np.where(std > 0, std, 1.0).tolist()
        graphs = [roi.graph for r in recs for roi in r.rois if roi.graph is not None]
        if graphs:
            mean, std = fit_normalizer(graphs)
            out.graph_mean, out.graph_std = mean.tolist(), std.tolist()
        images = [roi.image for r in recs for roi in r.rois if roi.image is not None]
        if images:
            pix = np.array(images, dtype=np.float64) / 255.0
            std = pix.std(axis=(0, 1, 2))
            out.image_mean = pix.mean(axis=(0, 1, 2)).tolist()
            out.image_std = np.where(std > 0, std, 1.0).tolist()
        return out

    def apply(self, data: InstanceSet) -> InstanceSet:
        genomic = data.genomic
        if genomic is not None and self.genomic_mean is not None:
            genomic = (genomic - np.array(self.genomic_mean)) / np.array(self.genomic_std)
        graphs = data.graphs
        if graphs is not None and self.graph_mean is not None:
            mean, std = np.array(self.graph_mean), np.array(self.graph_std)
            graphs = [g.normalized(mean, std) for g in graphs]
        images = data.images
        if images is not None and self.image_mean is not None:
            images = (images - np.array(self.image_mean)) / np.array(self.image_std)
        return InstanceSet(data.patient_ids, data.time, data.event, data.grade, genomic,
                           graphs, images)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Normalization":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# model construction


def _embedder(cfg: RunConfig, cohort: Cohort, net: str, prefix: str | None = None):
    prefix = prefix or net
    if net == "snn":
        width = len(cohort.genomic_names) or cfg.snn.input_dim
        return SnnNet(SnnConfig(**{**asdict(cfg.snn), "input_dim": width}), prefix)
    if net == "gcn":
        g = next((roi.graph for r in cohort.records for roi in r.rois if roi.graph is not None), None)
        width = g.X.shape[1] if g is not None else cfg.gcn.input_dim
        return GcnNet(GcnConfig(**{**asdict(cfg.gcn), "input_dim": width}), prefix)
    if net == "cnn":
        img = next((roi.image for r in cohort.records for roi in r.rois if roi.image is not None), None)
        side = img.shape[0] if img is not None else cfg.cnn.input_side
        return CnnNet(CnnConfig(**{**asdict(cfg.cnn), "input_side": side}), prefix)
    raise ConfigurationError(f"unknown network {net!r}")


def _embedders_for(cfg: RunConfig, cohort: Cohort, mode: str) -> dict:
    names = build_embedders(mode, SnnConfig(), GcnConfig(), CnnConfig()).keys()
    return {name: _embedder(cfg, cohort, name.split("_")[0], name) for name in names}


def build_model(cfg: RunConfig, cohort: Cohort, model: str | None = None):
    model = model or cfg.model
    if model in UNIMODAL:
        return UnimodalNet(_embedder(cfg, cohort, model), cfg.task_name)
    return GatedFusionNet(cfg.fusion_config(model), _embedders_for(cfg, cohort, model))


def _instances(cohort: Cohort, cfg: RunConfig, ids, modalities, norm: Normalization):
    data = cohort.instances(modalities, ids, need_grade=cfg.task_name == "grade")
    return norm.apply(data)


def _check_modalities(cohort: Cohort, model: str) -> None:
    for m in model_modalities(model):
        if not any(r.has(m) for r in cohort.records):
            raise ConfigurationError(f"model {model} needs {m} data, which the manifest lacks")


# ---------------------------------------------------------------------------
# per-patient aggregation


def aggregate(task: str, patient_ids, outputs):
    """Per-patient predictions from per-instance outputs.

    Survival: mean hazard over a patient's instances. Grade: the class of the
    instance whose largest softmax probability is highest, with its probabilities.
    """
    order = list(dict.fromkeys(patient_ids))
    rows = {pid: [] for pid in order}
    for pid, out in zip(patient_ids, outputs):
        rows[pid].append(out)
    result = {}
    for pid in order:
        outs = np.array(rows[pid])
        if task == "survival":
            result[pid] = float(outs.mean())
        else:
            probs = np.exp(outs)
            best = int(np.argmax(probs.max(axis=1)))
            result[pid] = probs[best]
    return result


def _write_predictions(path: Path, task: str, cohort: Cohort, preds: dict) -> None:
    recs = {r.id: r for r in cohort.by_id(list(preds))}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if task == "survival":
            writer.writerow(["patient_id", "time", "event", "hazard"])
            for pid, h in preds.items():
                writer.writerow([pid, repr(recs[pid].time), recs[pid].event, repr(h)])
        else:
            n = len(next(iter(preds.values())))
            writer.writerow(["patient_id", "grade"] + [f"p{c}" for c in range(n)] + ["predicted"])
            for pid, p in preds.items():
                writer.writerow([pid, recs[pid].grade] + [repr(float(v)) for v in p]
                                + [int(np.argmax(p))])


def _read_predictions(path: Path) -> list[dict]:
    if not path.exists():
        raise CheckpointError(f"no predictions at {path}; run train first")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# training


def _unimodal_checkpoint(cfg, cohort, train_ids, norm, directory: Path, net: str, prefix: str,
                         seed: int, create: bool) -> ParamStore:
    path = directory / f"{prefix}.params.json"
    if path.exists() and not create:
        return ParamStore.load(path)
    if not create:
        raise CheckpointError(
            f"missing unimodal checkpoint {path}; train --model {net} for this fold first"
        )
    unet = UnimodalNet(_embedder(cfg, cohort, net, prefix), cfg.task_name)
    data = _instances(cohort, cfg, train_ids, (UNIMODAL[net],), norm)
    params, history = train_unimodal(unet, data, UNIMODAL[net], cfg.unimodal[net], seed)
    params.save(path)
    log.info("fold %s: trained %s (final loss %.4f)", directory.name, prefix, history.loss[-1])
    return params


def train_fold(cfg: RunConfig, cohort: Cohort, k: int, fold) -> dict:
    """Train ``cfg.model`` on one fold and write its test predictions."""
    start = _time.perf_counter()
    directory = fold_dir(cfg, k)
    directory.mkdir(parents=True, exist_ok=True)
    seed = fold_seed(cfg.seed, k)
    norm = Normalization.fit(cohort, fold.train_ids)
    norm.save(directory / "normalization.json")
    task = cfg.task_name
    model = build_model(cfg, cohort)
    modalities = model_modalities(cfg.model)
    if cfg.model in UNIMODAL:
        params = _unimodal_checkpoint(cfg, cohort, fold.train_ids, norm, directory, cfg.model,
                                      cfg.model, seed, create=True)
        test = _instances(cohort, cfg, fold.test_ids, modalities, norm)
        outs = predict(unimodal_forward(model, test, UNIMODAL[cfg.model]), params, len(test))
    else:
        checkpoints = {}
        for b in model.branches:
            net = b.name.split("_")[0]
            duplicate = b.name != net
            checkpoints[b.name] = _unimodal_checkpoint(
                cfg, cohort, fold.train_ids, norm, directory, net, b.name, seed,
                create=duplicate or (cfg.train_missing_unimodal
                                     and not (directory / f"{b.name}.params.json").exists()),
            )
        train = _instances(cohort, cfg, fold.train_ids, modalities, norm)
        params, _ = train_schedule(model, checkpoints, train, cfg.fusion_train, seed)
        model.save_descriptor(directory / f"{cfg.model}.fusion.json")
        test = _instances(cohort, cfg, fold.test_ids, modalities, norm)
        outs = fusion_predict(model, params, test)
    params.save(directory / f"{cfg.model}.model.params.json")
    preds = aggregate(task, test.patient_ids, outs)
    _write_predictions(directory / f"{cfg.model}.predictions.csv", task, cohort, preds)
    elapsed = _time.perf_counter() - start
    log.info("fold %d: %s trained in %.1fs", k, cfg.model, elapsed)
    return {"fold": k, "n_test": len(preds), "seconds": elapsed}


def _train_fold_job(args):
    cfg, manifest, k = args
    cohort = load_cohort(manifest)
    folds = split_folds(cohort, cfg.folds, cfg.train_fraction, cfg.seed)
    return train_fold(cfg, cohort, k, folds[k])


def run_train(cfg: RunConfig, cohort: Cohort | None = None) -> list[dict]:
    if cohort is None:
        if cfg.manifest is None:
            raise ConfigurationError("train needs --manifest")
        cohort = load_cohort(cfg.manifest)
    _check_modalities(cohort, cfg.model)
    folds = split_folds(cohort, cfg.folds, cfg.train_fraction, cfg.seed)
    workers = thread_cap(cfg.parallel)
    if workers > 1 and len(cfg.fold_indices) > 1 and cfg.manifest is not None:
        jobs = [(cfg, cfg.manifest, k) for k in cfg.fold_indices]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_fold_job, jobs))
    return [train_fold(cfg, cohort, k, folds[k]) for k in cfg.fold_indices]


# ---------------------------------------------------------------------------
# evaluation


def _mean_sd(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "per_fold": [float(v) for v in arr]}


def run_eval(cfg: RunConfig) -> dict:
    """Aggregate fold predictions into metrics JSON, KM CSVs and plot data."""
    out_dir = Path(cfg.out) / cfg.task / "eval" / cfg.model
    out_dir.mkdir(parents=True, exist_ok=True)
    task = cfg.task_name
    per_fold = [(k, _read_predictions(fold_dir(cfg, k) / f"{cfg.model}.predictions.csv"))
                for k in cfg.fold_indices]
    metrics = {"task": cfg.task, "model": cfg.model, "folds": cfg.fold_indices, "seed": cfg.seed}
    if task == "survival":
        cis, pooled, plot_rows = [], [], []
        for k, rows in per_fold:
            t = np.array([float(r["time"]) for r in rows])
            e = np.array([int(r["event"]) for r in rows])
            h = np.array([float(r["hazard"]) for r in rows])
            cis.append(c_index(t, e, h))
            sd = h.std()
            z = (h - h.mean()) / sd if sd > 0 else np.zeros_like(h)
            for r, hz in zip(rows, z):
                plot_rows.append([k, r["patient_id"], r["time"], r["event"], r["hazard"], repr(float(hz))])
            pooled.append((t, e, h))
        metrics["c_index"] = _mean_sd(cis)
        t = np.concatenate([p[0] for p in pooled])
        e = np.concatenate([p[1] for p in pooled])
        h = np.concatenate([p[2] for p in pooled])
        metrics["n_test_predictions"] = int(h.size)
        metrics["logrank"] = {}
        for scheme in ("p33_66_100", "p50_100"):
            bins = hazard_bins(h, scheme)
            comps = []
            for a, b, label in bin_comparisons(scheme):
                chi2, p = logrank_test(t[bins == a], e[bins == a], t[bins == b], e[bins == b])
                comps.append({"comparison": label, "chi2": chi2, "p": p})
            metrics["logrank"][scheme] = comps
            write_km_csvs(out_dir, t, e, bins, prefix=f"km_{scheme}")
        with open(out_dir / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "patient_id", "time", "event", "hazard", "hazard_z"])
            writer.writerows(plot_rows)
    else:
        summary = {"micro_auc": [], "average_precision": [], "f1_micro": []}
        for _, rows in per_fold:
            labels = np.array([int(r["grade"]) for r in rows])
            probs = np.array([[float(r[c]) for c in r if c.startswith("p") and c[1:].isdigit()]
                              for r in rows])
            m = cls_metrics(probs, labels)
            for key in summary:
                summary[key].append(m[key])
        metrics.update({key: _mean_sd(v) for key, v in summary.items()})
    text = json.dumps(metrics, indent=2, sort_keys=True)
    (out_dir / "metrics.json").write_text(text + "\n", encoding="utf-8")
    return metrics


# ---------------------------------------------------------------------------
# attribution


def run_attribute(cfg: RunConfig, cohort: Cohort | None = None) -> dict:
    """Integrated Gradients (and Grad-CAM for a CNN survival model) on test patients."""
    if cohort is None:
        if cfg.manifest is None:
            raise ConfigurationError("attribute needs --manifest")
        cohort = load_cohort(cfg.manifest)
    if cfg.task_name != "survival":
        raise ConfigurationError("attribution targets the hazard output; use --task surv")
    folds = split_folds(cohort, cfg.folds, cfg.train_fraction, cfg.seed)
    report = {"model": cfg.model, "nodes": cfg.attribution_nodes, "folds": {}}
    for k in cfg.fold_indices:
        directory = fold_dir(cfg, k)
        ckpt = directory / f"{cfg.model}.model.params.json"
        if not ckpt.exists():
            raise CheckpointError(f"missing checkpoint {ckpt}; run train first")
        params = ParamStore.load(ckpt)
        norm = Normalization.load(directory / "normalization.json")
        model = build_model(cfg, cohort)
        modalities = model_modalities(cfg.model)
        test = _instances(cohort, cfg, folds[k].test_ids, modalities, norm)
        limit = len(test) if cfg.attribution_limit is None else min(len(test), cfg.attribution_limit)
        out_dir = Path(cfg.out) / cfg.task / "attribution" / cfg.model / f"fold_{k}"
        out_dir.mkdir(parents=True, exist_ok=True)
        gaps, genomic_attrs = [], []
        for i in range(limit):
            pid = test.patient_ids[i]
            tag = f"{pid}_{i}"
            for branch, modality, fn in _attribution_targets(cfg, model, params, test, i):
                x = test.modality(modality, [i])
                if modality == "graph":
                    res = attr.integrated_gradients(fn, x[0], nodes=cfg.attribution_nodes, mode="graph")
                    sal = attr.node_saliency(res.values)
                    with open(out_dir / f"{tag}_{branch}_cells.csv", "w", newline="",
                              encoding="utf-8") as fh:
                        writer = csv.writer(fh)
                        writer.writerow(["node", "x", "y", "saliency"])
                        for j, s in enumerate(sal):
                            cx, cy = x[0].centroids[j]
                            writer.writerow([j, repr(float(cx)), repr(float(cy)), repr(float(s))])
                else:
                    res = attr.integrated_gradients(fn, x[0], nodes=cfg.attribution_nodes)
                    if modality == "genomic":
                        attr.write_attribution_csv(out_dir / f"{tag}_{branch}.csv",
                                                   cohort.genomic_names, res.values, x[0])
                        genomic_attrs.append(res.values)
                    else:
                        sal = np.abs(res.values).sum(axis=-1)
                        top = sal.max()
                        attr.write_heatmap(sal / top if top > 0 else sal,
                                           out_dir / f"{tag}_{branch}_ig.csv",
                                           out_dir / f"{tag}_{branch}_ig.png")
                gaps.append(res.completeness_gap)
            if cfg.model == "cnn":
                cam = attr.grad_cam(model, params, test.images[i])
                attr.write_heatmap(cam.heatmap, out_dir / f"{tag}_gradcam.csv",
                                   out_dir / f"{tag}_gradcam.png")
        if genomic_attrs:
            attr.write_summary_csv(out_dir / "genomic_summary.csv", cohort.genomic_names,
                                   np.array(genomic_attrs))
        report["folds"][str(k)] = {
            "patients": limit,
            "max_completeness_gap": float(max(gaps)) if gaps else 0.0,
        }
    path = Path(cfg.out) / cfg.task / "attribution" / cfg.model / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def _attribution_targets(cfg, model, params, data: InstanceSet, i: int):
    if cfg.model in UNIMODAL:
        modality = UNIMODAL[cfg.model]
        yield cfg.model, modality, attr.unimodal_grad_fn(model, params, modality)
        return
    inputs = {b.name: data.modality(b.modality, [i]) for b in model.branches}
    for b in model.branches:
        yield b.name, b.modality, attr.fusion_grad_fn(model, params, inputs, b.name)
