"""Integrated Gradients with Gauss-Legendre quadrature, and hazard Grad-CAM."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .fusion import ConfigurationError
from .numcore import DimensionError, ParamStore

DEFAULT_NODES = 51


@dataclass
class Attribution:
    values: np.ndarray
    baseline: np.ndarray
    nodes: int
    method: str
    output: float
    baseline_output: float

    @property
    def completeness_gap(self) -> float:
        return abs(float(self.values.sum()) - (self.output - self.baseline_output))


def gauss_legendre_unit(nodes: int):
    """Gauss-Legendre abscissae and weights mapped to [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    return (t + 1.0) / 2.0, w / 2.0


def integrated_gradients(fn, x, baseline=None, nodes: int = DEFAULT_NODES,
                         mode: str = "vector") -> Attribution:
    """Path-integrated gradients from ``baseline`` (default zeros) to ``x``.

    ``fn(x)`` returns ``(F(x), dF/dx)``. In ``graph`` mode ``x`` is an object
    with node features ``X`` and adjacency ``A``; only ``X`` is interpolated and
    ``fn`` is called as ``fn(X, A)``.
    """
    if nodes < 2:
        raise ValueError("need at least two quadrature nodes")
    if mode == "graph":
        A = x.A
        feats = np.asarray(x.X, dtype=np.float64)
        call = lambda z: fn(z, A)  # noqa: E731
    elif mode == "vector":
        feats = np.asarray(x, dtype=np.float64)
        call = fn
    else:
        raise ValueError(f"unknown mode {mode!r}")
    base = np.zeros_like(feats) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != feats.shape:
        raise DimensionError(f"baseline shape {base.shape} != input shape {feats.shape}")
    alphas, weights = gauss_legendre_unit(nodes)
    delta = feats - base
    total = np.zeros_like(feats)
    for a, w in zip(alphas, weights):
        _, grad = call(base + a * delta)
        total += w * np.asarray(grad, dtype=np.float64)
    out, _ = call(feats)
    out0, _ = call(base)
    return Attribution(delta * total, base, nodes, "gauss-legendre", float(out), float(out0))


def riemann_integrated_gradients(fn, x, baseline=None, steps: int = 10_000) -> np.ndarray:
    """Left-Riemann IG; a slow reference for the quadrature version."""
    x = np.asarray(x, dtype=np.float64)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    total = np.zeros_like(x)
    for k in range(steps):
        total += fn(base + (k / steps) * (x - base))[1]
    return (x - base) * total / steps


# ---------------------------------------------------------------------------
# model adapters


def _scratch(params: ParamStore) -> ParamStore:
    # shares weight arrays, fresh gradient buffers: callers' grads stay untouched
    out = ParamStore()
    for name, p in params.entries.items():
        out.entries[name] = type(p)(p.value, np.zeros_like(p.value), p.m, p.v, p.step)
    return out


def unimodal_grad_fn(net, params: ParamStore, modality: str):
    """Hazard and input gradient of a survival UnimodalNet for a single input."""
    scratch = _scratch(params)

    if modality == "graph":
        from types import SimpleNamespace

        def fn(X, A):
            out, _, back = net.forward(scratch, [SimpleNamespace(X=X, A=A)], None, False)
            return float(out[0]), back(np.ones(1))[0]

        return fn

    def fn(x):
        x = np.asarray(x, dtype=np.float64)
        out, _, back = net.forward(scratch, x[None], None, False)
        return float(out[0]), back(np.ones(1))[0]

    return fn


def fusion_grad_fn(model, params: ParamStore, inputs: dict, branch: str):
    """Hazard gradient of a fusion model with respect to one branch's input.

    The other branches are held at ``inputs``. Graph branches take ``(X, A)``.
    """
    scratch = _scratch(params)
    modality = next(b.modality for b in model.branches if b.name == branch)

    def run(value):
        feed = {k: v for k, v in inputs.items()}
        feed[branch] = value
        out, back = model.forward(scratch, feed, None, False)
        return float(out[0]), back(np.ones(1))[branch][0]

    if modality == "graph":
        from types import SimpleNamespace

        return lambda X, A: run([SimpleNamespace(X=X, A=A)])
    return lambda x: run(np.asarray(x, dtype=np.float64)[None])


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass
class GradCam:
    heatmap: np.ndarray
    degenerate: bool
    hazard: float


def grad_cam(net, params: ParamStore, image) -> GradCam:
    """Grad-CAM on the single hazard neuron of a CNN survival network.

    Channel weights are the spatial means of d hazard / d activation of the last
    conv layer; the map is ReLU of the weighted channel sum, min-max scaled.
    A constant map is returned as zeros and flagged degenerate.
    """
    cnn = net.embedder
    if not getattr(cnn, "conv_shapes", None):
        raise ConfigurationError("model exposes no convolutional layer")
    scratch = _scratch(params)
    pooled, act, tape = cnn.conv_features(scratch, np.asarray(image, dtype=np.float64)[None])
    h, dense_back = cnn.dense(scratch, pooled)
    hazard, head_back = net.head(scratch, h)
    dact = tape[-1][3](dense_back(head_back(np.ones(1))))
    weights = dact[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act[0], axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi == lo:
        return GradCam(np.zeros_like(cam), True, float(hazard[0]))
    return GradCam((cam - lo) / (hi - lo), False, float(hazard[0]))


# ---------------------------------------------------------------------------
# exports


def node_saliency(attr) -> np.ndarray:
    """Per-cell saliency: summed absolute attribution over each node's features."""
    return np.abs(np.asarray(attr)).sum(axis=1)


def write_attribution_csv(path, names, attribution, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_name", "attribution", "feature_value"])
        for name, a, v in zip(names, np.ravel(attribution), np.ravel(values)):
            writer.writerow([name, repr(float(a)), repr(float(v))])


def rank_features(names, attributions, top: int | None = None):
    """Features ordered by mean absolute attribution across patients."""
    attributions = np.atleast_2d(np.asarray(attributions, dtype=np.float64))
    mean_abs = np.abs(attributions).mean(axis=0)
    mean = attributions.mean(axis=0)
    order = np.lexsort((np.arange(mean_abs.size), -mean_abs))
    if top is not None:
        order = order[:top]
    return [(names[i], float(mean_abs[i]), float(mean[i])) for i in order]


def write_summary_csv(path, names, attributions, top: int | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "feature_name", "mean_abs_attribution", "mean_attribution"])
        for rank, (name, mean_abs, mean) in enumerate(rank_features(names, attributions, top), 1):
            writer.writerow([rank, name, repr(mean_abs), repr(mean)])


def write_heatmap(heatmap, csv_path=None, png_path=None) -> None:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if csv_path is not None:
        np.savetxt(csv_path, heatmap, delimiter=",", fmt="%.17g")
    if png_path is not None:
        Image.fromarray(np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8)).save(png_path)
