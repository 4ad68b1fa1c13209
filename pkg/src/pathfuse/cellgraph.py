"""Cell graphs from nuclei label masks: morphometric features and KNN edges.

Node features are eight contour descriptors followed by four GLCM texture
statistics, optionally extended with externally computed per-cell vectors.
Centroids are stored as (x, y) = (column, row) pixel coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.measure import perimeter
from skimage.morphology import convex_hull_image

from .numcore import DimensionError

CONTOUR_FEATURES = (
    "major_axis_length",
    "minor_axis_length",
    "orientation",
    "eccentricity",
    "roundness",
    "area",
    "solidity",
    "perimeter",
)
GLCM_FEATURES = ("dissimilarity", "homogeneity", "asm", "energy")
FEATURE_NAMES = CONTOUR_FEATURES + GLCM_FEATURES

DEFAULT_K = 5
DEFAULT_MAX_DISTANCE = 100.0
CROP_SIZE = 64
GLCM_LEVELS = 8
GLCM_OFFSETS = ((0, 1), (1, 0))


class AlignmentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-nucleus features


def contour_features(mask, label: int) -> np.ndarray:
    """Shape descriptors of one labelled component from its second-order moments.

    Orientation is the angle of the major axis from the +x (column) axis,
    in (-pi/2, pi/2]; it is 0 for collinear or isotropic components.
    """
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask == label)
    area = rows.size
    if area == 0:
        raise KeyError(f"label {label} not present in mask")
    if area < 4:
        raise ValueError(f"label {label} has area {area} < 4 pixels")
    x = cols - cols.mean()
    y = rows - rows.mean()
    mu_xx, mu_yy, mu_xy = np.mean(x * x), np.mean(y * y), np.mean(x * y)
    common = math.sqrt(((mu_xx - mu_yy) / 2) ** 2 + mu_xy**2)
    lam1 = (mu_xx + mu_yy) / 2 + common
    lam2 = max((mu_xx + mu_yy) / 2 - common, 0.0)
    major = 4.0 * math.sqrt(lam1)
    minor = 4.0 * math.sqrt(lam2)
    if lam2 <= 1e-12 * max(lam1, 1.0) or common == 0.0:
        orientation = 0.0
    else:
        orientation = 0.5 * math.atan2(2 * mu_xy, mu_xx - mu_yy)
    eccentricity = math.sqrt(1.0 - lam2 / lam1) if lam1 > 0 else 0.0

    r0, c0 = rows.min(), cols.min()
    local = np.zeros((rows.max() - r0 + 3, cols.max() - c0 + 3), dtype=np.uint8)
    local[rows - r0 + 1, cols - c0 + 1] = 1
    perim = float(perimeter(local, neighborhood=4))
    roundness = 4 * math.pi * area / perim**2 if perim > 0 else 0.0
    # lattice points inside the hull of pixel centres: a digitally convex set scores exactly 1
    if lam2 <= 1e-12 * max(lam1, 1.0):
        solidity = 1.0  # collinear pixels are their own hull
    else:
        solidity = area / float(convex_hull_image(local, offset_coordinates=False).sum())
    return np.array(
        [major, minor, orientation, eccentricity, roundness, float(area), solidity, perim]
    )


def quantize(crop, levels: int = GLCM_LEVELS) -> np.ndarray:
    """Map intensities onto ``levels`` bins spanning the crop's min-max range."""
    crop = np.asarray(crop, dtype=np.float64)
    lo, hi = crop.min(), crop.max()
    if hi == lo:
        return np.zeros(crop.shape, dtype=int)
    return np.minimum(((crop - lo) / (hi - lo) * levels).astype(int), levels - 1)


def glcm(q, levels: int, offsets=GLCM_OFFSETS) -> np.ndarray:
    """Symmetric, normalised co-occurrence matrix averaged over offsets."""
    q = np.asarray(q)
    total = np.zeros((levels, levels))
    h, w = q.shape
    for dr, dc in offsets:
        a = q[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)]
        b = q[max(0, dr) : h - max(0, -dr), max(0, dc) : w - max(0, -dc)]
        counts = np.bincount((a * levels + b).ravel(), minlength=levels * levels)
        m = counts.reshape(levels, levels).astype(np.float64)
        m = m + m.T
        total += m / m.sum()
    return total / len(offsets)


def glcm_features(gray_crop, levels: int = GLCM_LEVELS, offsets=GLCM_OFFSETS,
                  size: int | None = CROP_SIZE) -> np.ndarray:
    """Dissimilarity, homogeneity, angular second moment and energy."""
    gray_crop = np.asarray(gray_crop, dtype=np.float64)
    if size is not None and gray_crop.shape != (size, size):
        raise DimensionError(f"GLCM crop must be {size}x{size}, got {gray_crop.shape}")
    p = glcm(quantize(gray_crop, levels), levels, offsets)
    i, j = np.indices(p.shape)
    asm = float(np.sum(p * p))
    return np.array(
        [
            float(np.sum(p * np.abs(i - j))),
            float(np.sum(p / (1.0 + (i - j) ** 2))),
            asm,
            math.sqrt(asm),
        ]
    )


def centered_crop(image, center_xy, size: int = CROP_SIZE) -> np.ndarray:
    """``size`` x ``size`` window around a centroid, mirror-padded at the edges."""
    image = np.asarray(image, dtype=np.float64)
    half = size // 2
    padded = np.pad(image, half, mode="symmetric")
    r = int(round(center_xy[1])) + half
    c = int(round(center_xy[0])) + half
    return padded[r - half : r - half + size, c - half : c - half + size]


# ---------------------------------------------------------------------------
# adjacency


def knn_adjacency(centroids, k: int = DEFAULT_K, d: float = DEFAULT_MAX_DISTANCE) -> np.ndarray:
    """Symmetric 0/1 adjacency joining each node to its k nearest neighbours closer than d.

    Directed edges i -> j are kept when j is among the k nearest (distance ties
    broken by lower index) and the distance is strictly below ``d``; the result
    is symmetrised by union.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    A = np.zeros((n, n))
    if n < 2:
        return A
    idx = np.arange(n)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n, chunk):
        rows = idx[start : start + chunk]
        diff = pts[rows, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        dist[np.arange(rows.size), rows] = np.inf
        for local, i in enumerate(rows):
            order = np.lexsort((idx, dist[local]))[: min(k, n - 1)]
            keep = order[dist[local, order] < d]
            A[i, keep] = 1.0
    return np.maximum(A, A.T)


# ---------------------------------------------------------------------------
# graph container


@dataclass
class CellGraph:
    X: np.ndarray
    A: np.ndarray
    centroids: np.ndarray
    feature_names: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        r, c = np.nonzero(np.triu(self.A, 1))
        return list(zip(r.tolist(), c.tolist()))

    def normalized(self, mean, std) -> "CellGraph":
        return CellGraph((self.X - mean) / std, self.A, self.centroids,
                         list(self.feature_names), np.asarray(mean), np.asarray(std))

    def to_json(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "feature_names": list(self.feature_names),
            "X": self.X.tolist(),
            "edges": [list(e) for e in self.edges()],
            "normalization": None
            if self.norm_mean is None
            else {"mean": self.norm_mean.tolist(), "std": self.norm_std.tolist()},
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CellGraph":
        X = np.array(payload["X"], dtype=np.float64).reshape(-1, len(payload["feature_names"]))
        n = X.shape[0]
        A = np.zeros((n, n))
        for i, j in payload["edges"]:
            A[i, j] = A[j, i] = 1.0
        norm = payload.get("normalization")
        return cls(
            X,
            A,
            np.array(payload["centroids"], dtype=np.float64).reshape(n, 2),
            list(payload["feature_names"]),
            None if norm is None else np.array(norm["mean"]),
            None if norm is None else np.array(norm["std"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CellGraph":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_cell_graph(mask, gray_image, external_features=None, k: int = DEFAULT_K,
                     d: float = DEFAULT_MAX_DISTANCE, crop_size: int = CROP_SIZE,
                     levels: int = GLCM_LEVELS) -> CellGraph:
    mask = np.asarray(mask)
    labels = [int(v) for v in np.unique(mask) if v != 0]
    if not labels:
        raise ValueError("mask contains no nuclei")
    if external_features is not None:
        external_features = np.asarray(external_features, dtype=np.float64)
        if external_features.ndim != 2 or external_features.shape[0] != len(labels):
            raise AlignmentError(
                f"external features have {np.shape(external_features)[0]} rows "
                f"for {len(labels)} nuclei"
            )
    rows = []
    centroids = []
    for lab in labels:
        rr, cc = np.nonzero(mask == lab)
        center = (cc.mean(), rr.mean())
        centroids.append(center)
        texture = glcm_features(centered_crop(gray_image, center, crop_size), levels, size=crop_size)
        rows.append(np.concatenate([contour_features(mask, lab), texture]))
    X = np.array(rows)
    names = list(FEATURE_NAMES)
    if external_features is not None:
        X = np.hstack([X, external_features])
        names += [f"ext_{i}" for i in range(external_features.shape[1])]
    centroids = np.array(centroids)
    return CellGraph(X, knn_adjacency(centroids, k, d), centroids, names)


def fit_normalizer(graphs) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard deviations over all nodes of the training graphs."""
    stacked = np.vstack([g.X for g in graphs])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


# ---------------------------------------------------------------------------
# image IO


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    return np.asarray(Image.open(path)).astype(np.int64)


def write_mask_png(mask, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint16)).save(path)


def read_gray(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64)
