"""Synthetic multimodal cohorts, manifest-based ingestion, and fold splitting.

Manifest layout (all paths relative to the manifest file)::

    {
      "format": "pathfuse-cohort",
      "genomic_csv": "genomic.csv",          # header: patient_id,<feature>,...
      "patients": [
        {"id": "P0000", "time": 3.2, "event": 1, "grade": 2, "true_risk": 0.4,
         "rois": [{"image": "images/P0000_0.png", "graph": "graphs/P0000_0.json"}]}
      ]
    }

``grade`` and ``true_risk`` may be null; a ROI may omit ``image`` or
``graph``. Patients absent from the genomic CSV, or whose row has empty
cells, are flagged as missing genomic data.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cellgraph import CellGraph, build_cell_graph
from .numcore import ParameterError, rng_stream
from .training import MODALITIES, InstanceSet


class IngestionError(ValueError):
    pass


@dataclass
class Roi:
    image: np.ndarray | None = None
    graph: CellGraph | None = None


@dataclass
class PatientRecord:
    id: str
    time: float
    event: int
    grade: int | None = None
    genomic: np.ndarray | None = None
    rois: list[Roi] = field(default_factory=list)
    true_risk: float | None = None

    def has(self, modality: str) -> bool:
        if modality == "genomic":
            return self.genomic is not None
        attr = "image" if modality == "image" else "graph"
        return any(getattr(r, attr) is not None for r in self.rois)

    @property
    def missing(self) -> set[str]:
        return {m for m in MODALITIES if not self.has(m)}


@dataclass
class Cohort:
    records: list[PatientRecord]
    genomic_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise IngestionError(f"duplicate patient id {dup!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, ids) -> list[PatientRecord]:
        index = {r.id: r for r in self.records}
        return [index[i] for i in ids]

    def complete(self, modalities) -> list[str]:
        return [r.id for r in self.records if all(r.has(m) for m in modalities)]

    def instances(self, modalities, ids=None, need_grade: bool = False) -> InstanceSet:
        """One instance per ROI carrying every requested modality.

        Each ROI inherits its patient's labels and genomic vector. Patients
        missing a requested modality contribute nothing.
        """
        records = self.records if ids is None else self.by_id(ids)
        pid, time, event, grade, gen, graphs, images = [], [], [], [], [], [], []
        for r in records:
            if need_grade and r.grade is None:
                continue
            if "genomic" in modalities and r.genomic is None:
                continue
            rois = r.rois if any(m in modalities for m in ("image", "graph")) else [Roi()]
            for roi in rois:
                if "image" in modalities and roi.image is None:
                    continue
                if "graph" in modalities and roi.graph is None:
                    continue
                pid.append(r.id)
                time.append(r.time)
                event.append(r.event)
                grade.append(-1 if r.grade is None else r.grade)
                gen.append(r.genomic)
                graphs.append(roi.graph)
                images.append(roi.image)
        return InstanceSet(
            pid,
            np.array(time, dtype=np.float64),
            np.array(event, dtype=int),
            np.array(grade, dtype=int),
            np.array(gen, dtype=np.float64).reshape(len(pid), len(self.genomic_names) if not pid else -1)
            if "genomic" in modalities else None,
            graphs if "graph" in modalities else None,
            np.array(images, dtype=np.float64) / 255.0 if "image" in modalities else None,
        )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthSpec:
    n_patients: int = 600
    genomic_dim: int = 16
    beta_gen: tuple[float, ...] = (0.7, -0.6, 0.5, 0.4)
    beta_img: float = 0.9
    beta_graph: float = 0.9
    beta_int: float = 1.0
    censoring_rate: float = 0.25
    noise: float = 0.05
    motif_noise: float = 0.5
    image_side: int = 32
    tissue_side: int = 128
    cells: tuple[int, int] = (14, 20)
    cluster_cells: int = 8
    rois_per_patient: int = 1
    baseline_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.beta_gen = tuple(self.beta_gen)
        self.cells = tuple(self.cells)
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ParameterError("censoring rate must be in [0, 1)")
        if len(self.beta_gen) > self.genomic_dim:
            raise ParameterError("more genomic coefficients than genomic features")


def true_risk(spec: SynthSpec, g, u, motif) -> np.ndarray:
    beta = np.zeros(spec.genomic_dim)
    beta[: len(spec.beta_gen)] = spec.beta_gen
    return g @ beta + spec.beta_img * u + spec.beta_graph * motif + spec.beta_int * g[:, 0] * motif


def synth_image(u: float, side: int, noise: float, rng) -> np.ndarray:
    """RGB tile whose central stain intensity increases with ``u``."""
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1) - 0.5
    blob = np.exp(-(xx**2 + yy**2) / (2 * 0.18**2))
    level = math.tanh(u / 1.5)
    red = 0.55 + 0.35 * level * blob
    green = 0.5 - 0.2 * level * blob
    blue = 0.6 + 0.1 * np.cos(8 * np.pi * xx) * blob
    img = np.stack([red, green, blue], axis=-1) + noise * rng.normal(size=(side, side, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _ellipse(mask, gray, label, cx, cy, a, b, theta, intensity, texture, rng):
    side = mask.shape[0]
    r = int(math.ceil(max(a, b))) + 1
    r0, r1 = max(0, int(cy) - r), min(side, int(cy) + r + 2)
    c0, c1 = max(0, int(cx) - r), min(side, int(cx) + r + 2)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    inside &= mask[r0:r1, c0:c1] == 0
    mask[r0:r1, c0:c1][inside] = label
    gray[r0:r1, c0:c1][inside] = intensity + texture * rng.normal(size=int(inside.sum()))


def synth_tissue(motif: bool, spec: SynthSpec, rng):
    """Label mask and gray image with scattered nuclei and, if ``motif``, one dense cluster
    of small, round, dark and coarsely textured nuclei."""
    side = spec.tissue_side
    mask = np.zeros((side, side), dtype=np.int64)
    gray = 205 + 6 * rng.normal(size=(side, side))
    placed = []

    def try_place(cx, cy, rad):
        if not (rad + 1 <= cx <= side - rad - 2 and rad + 1 <= cy <= side - rad - 2):
            return False
        return all(math.hypot(cx - px, cy - py) > rad + pr + 1.5 for px, py, pr in placed)

    n_regular = int(rng.integers(spec.cells[0], spec.cells[1] + 1))
    if motif:
        ccx, ccy = rng.uniform(30, side - 30, size=2)
        n_done = 0
        for _ in range(400):
            if n_done == spec.cluster_cells:
                break
            ang, dist = rng.uniform(0, 2 * math.pi), rng.uniform(0, 16)
            cx, cy = ccx + dist * math.cos(ang), ccy + dist * math.sin(ang)
            rad = rng.uniform(2.6, 3.2)
            if try_place(cx, cy, rad):
                placed.append((cx, cy, rad))
                _ellipse(mask, gray, len(placed), cx, cy, rad, rad * rng.uniform(0.9, 1.0),
                         rng.uniform(0, math.pi), 55, 25, rng)
                n_done += 1
        n_regular = max(1, n_regular - n_done)
    n_done = 0
    for _ in range(2000):
        if n_done == n_regular:
            break
        cx, cy = rng.uniform(0, side, size=2)
        a = rng.uniform(4.0, 6.5)
        b = a * rng.uniform(0.55, 0.85)
        if try_place(cx, cy, a):
            placed.append((cx, cy, a))
            _ellipse(mask, gray, len(placed), cx, cy, a, b, rng.uniform(0, math.pi), 110, 8, rng)
            n_done += 1
    # relabel to 1..N in case an ellipse was fully occluded
    labels = [v for v in np.unique(mask) if v != 0]
    remap = np.zeros(mask.max() + 1, dtype=np.int64)
    remap[labels] = np.arange(1, len(labels) + 1)
    return remap[mask], np.clip(gray, 0, 255)


def _censor(event_time, rate, rng):
    """Independent uniform censoring on [0, c_max] with c_max chosen to hit ``rate``."""
    n = event_time.size
    if rate == 0.0:
        return event_time.copy(), np.ones(n, dtype=int)
    v = rng.uniform(size=n)
    target = round(rate * n)
    lo, hi = 0.0, float(event_time.max() / max(v.min(), 1e-12)) * 2
    for _ in range(200):
        mid = (lo + hi) / 2
        if np.sum(mid * v < event_time) > target:
            lo = mid
        else:
            hi = mid
    c = hi * v
    event = (event_time <= c).astype(int)
    return np.minimum(event_time, c), event


def synth_latents(spec: SynthSpec):
    """Draw ``(g, u, motif, risk, event_time)`` for every patient of ``spec``."""
    rng = rng_stream(spec.seed, "synth/cohort")
    n = spec.n_patients
    g = rng.normal(size=(n, spec.genomic_dim))
    u = rng.normal(size=n)
    motif = (u + spec.motif_noise * rng.normal(size=n) > 0).astype(float)
    risk = true_risk(spec, g, u, motif)
    event_time = rng.exponential(1.0 / (spec.baseline_rate * np.exp(risk)))
    return g, u, motif, risk, event_time


def synth_generate(spec: SynthSpec, with_graphs: bool = True) -> Cohort:
    """Cohort with exponential survival times driven by a known risk.

    risk = beta_gen.g + beta_img*u + beta_graph*motif + beta_int*g_1*motif,
    where u drives the image stain pattern and, through a noisy threshold,
    the presence of a dense nuclear cluster in the tissue.
    """
    n = spec.n_patients
    g, u, motif, risk, event_time = synth_latents(spec)
    time, event = _censor(event_time, spec.censoring_rate, rng_stream(spec.seed, "synth/censor"))
    ranks = np.argsort(np.argsort(risk, kind="stable"), kind="stable")
    grade = (ranks * 3) // n
    records = []
    for i in range(n):
        prng = rng_stream(spec.seed, f"synth/patient/{i}")
        rois = []
        for _ in range(spec.rois_per_patient):
            image = synth_image(u[i], spec.image_side, spec.noise, prng)
            graph = None
            if with_graphs:
                mask, gray = synth_tissue(bool(motif[i]), spec, prng)
                graph = build_cell_graph(mask, gray)
            rois.append(Roi(image, graph))
        records.append(PatientRecord(f"P{i:04d}", float(time[i]), int(event[i]), int(grade[i]),
                                     g[i].copy(), rois, float(risk[i])))
    return Cohort(records, [f"gene_{j}" for j in range(spec.genomic_dim)])


# ---------------------------------------------------------------------------
# manifest IO


def save_cohort(cohort: Cohort, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    with open(out / "genomic.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + list(cohort.genomic_names))
        for r in cohort.records:
            if r.genomic is not None:
                writer.writerow([r.id] + [repr(float(v)) for v in r.genomic])
    patients = []
    for r in cohort.records:
        rois = []
        for k, roi in enumerate(r.rois):
            entry = {}
            if roi.image is not None:
                entry["image"] = f"images/{r.id}_{k}.png"
                Image.fromarray(np.asarray(roi.image, dtype=np.uint8)).save(out / entry["image"])
            if roi.graph is not None:
                entry["graph"] = f"graphs/{r.id}_{k}.json"
                roi.graph.save(out / entry["graph"])
            rois.append(entry)
        patients.append({"id": r.id, "time": r.time, "event": r.event, "grade": r.grade,
                         "true_risk": r.true_risk, "rois": rois})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"format": "pathfuse-cohort", "genomic_csv": "genomic.csv",
                                    "patients": patients}, indent=1), encoding="utf-8")
    return manifest


def _read_genomic(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read genomic CSV {path}: {exc}") from exc
    if not rows or rows[0][0] != "patient_id":
        raise IngestionError(f"{path}: header row must start with patient_id")
    names = rows[0][1:]
    table = {}
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise IngestionError(
                f"{path}:{line}: patient {row[0]!r} has {len(row) - 1} values, expected {len(names)}"
            )
        if row[0] in table:
            raise IngestionError(f"{path}:{line}: duplicate genomic row for {row[0]!r}")
        if any(cell.strip() == "" for cell in row[1:]):
            table[row[0]] = None
            continue
        try:
            table[row[0]] = np.array([float(c) for c in row[1:]])
        except ValueError as exc:
            raise IngestionError(f"{path}:{line}: patient {row[0]!r}: {exc}") from exc
    return names, table


def load_cohort(manifest_path) -> Cohort:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc}") from exc
    names, table = [], {}
    if manifest.get("genomic_csv"):
        names, table = _read_genomic(base / manifest["genomic_csv"])
    records = []
    seen = set()
    for entry in manifest["patients"]:
        pid = str(entry["id"])
        if pid in seen:
            raise IngestionError(f"duplicate patient id {pid!r} in manifest")
        seen.add(pid)
        rois = []
        for roi in entry.get("rois", []):
            image = graph = None
            try:
                if roi.get("image"):
                    image = np.asarray(Image.open(base / roi["image"]).convert("RGB"))
                if roi.get("graph"):
                    graph = CellGraph.load(base / roi["graph"])
            except Exception as exc:  # noqa: BLE001 - any reader failure names the patient
                raise IngestionError(f"patient {pid!r}: unreadable ROI file: {exc}") from exc
            rois.append(Roi(image, graph))
        records.append(PatientRecord(
            pid, float(entry["time"]), int(entry["event"]),
            None if entry.get("grade") is None else int(entry["grade"]),
            table.get(pid), rois,
            None if entry.get("true_risk") is None else float(entry["true_risk"]),
        ))
    return Cohort(records, names)


# ---------------------------------------------------------------------------
# folds


@dataclass
class Fold:
    train_ids: list[str]
    test_ids: list[str]


def split_folds(cohort: Cohort, folds: int = 15, train_fraction: float = 0.8, seed: int = 0,
                require=MODALITIES) -> list[Fold]:
    """Monte Carlo splits by patient id.

    Every fold is an independent random split; all ROIs of a patient stay on one
    side. Test sides keep only patients complete for ``require`` so that models
    using different modalities are scored on the same patients.
    """
    if folds < 1 or not 0.0 < train_fraction < 1.0:
        raise ParameterError("need folds >= 1 and 0 < train_fraction < 1")
    ids = sorted(cohort.ids)
    n_train = int(round(train_fraction * len(ids)))
    complete = set(cohort.complete(require))
    out = []
    for f in range(folds):
        perm = rng_stream(seed, f"folds/{f}").permutation(len(ids))
        train = sorted(ids[i] for i in perm[:n_train])
        test = sorted(ids[i] for i in perm[n_train:] if ids[i] in complete)
        if not test:
            raise ParameterError(f"fold {f} has an empty test side")
        out.append(Fold(train, test))
    return out
