"""Gated Kronecker-product fusion of unimodal embeddings.

Each branch embedding is gated by a sigmoid attention vector computed from a
context of embeddings, optionally projected to a smaller width, extended with
a constant 1 and combined with the other branches by an outer product. The
flattened tensor feeds a small dense head.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nets import CnnNet, GcnNet, OutputHead, SnnNet
from .numcore import (
    DimensionError,
    Linear,
    ParamStore,
    activation,
    affine,
    dropout,
    rng_stream,
    sigmoid,
)
from .training import History, InstanceSet, TrainHyper, embed_all, fit

MODES = {
    "gcn-snn": ("graph", "genomic"),
    "cnn-snn": ("image", "genomic"),
    "cnn-gcn-snn": ("image", "graph", "genomic"),
    "snn-snn": ("genomic", "genomic"),
    "gcn-gcn": ("graph", "graph"),
    "cnn-cnn": ("image", "image"),
}
MODALITY_NET = {"image": "cnn", "graph": "gcn", "genomic": "snn"}
# which modality gates the others, in order of preference
GATER_PRIORITY = {
    "survival": ("genomic", "graph", "image"),
    "grade": ("image", "graph", "genomic"),
}


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitives


def gate(h, context, W_h, b_h, W_z, b_z):
    """``sigmoid(context W_z + b_z) * ReLU(h W_h + b_h)``.

    Pullback returns (dh, dcontext, dW_h, db_h, dW_z, db_z).
    """
    pre, h_back = affine(h, W_h, b_h)
    hp, relu_back = activation(pre, "relu")
    zpre, z_back = affine(context, W_z, b_z)
    z = sigmoid(zpre)

    def pullback(dout):
        dh, dW_h, db_h = h_back(relu_back(dout * z))
        dctx, dW_z, db_z = z_back(dout * hp * z * (1.0 - z))
        return dh, dctx, dW_h, db_h, dW_z, db_z

    return z * hp, pullback


def kron_fuse(vectors):
    """Outer product of the one-extended vectors, flattened row-major.

    Accepts two or three arrays of shape (d,) or (B, d). Returns
    ``(flat, extents, pullback)``; the pullback returns one gradient per input.
    """
    if len(vectors) not in (2, 3):
        raise ValueError("kron_fuse takes two or three vectors")
    batched = np.ndim(vectors[0]) == 2
    vs = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in vectors]
    if not all(np.all(np.isfinite(v)) for v in vs):
        raise ValueError("kron_fuse inputs must be finite")
    B = vs[0].shape[0]
    ext = [np.concatenate([v, np.ones((B, 1))], axis=1) for v in vs]
    extents = tuple(e.shape[1] for e in ext)
    if len(ext) == 2:
        T = np.einsum("bi,bj->bij", *ext)
    else:
        T = np.einsum("bi,bj,bk->bijk", *ext)
    flat = T.reshape(B, -1)

    def pullback(dflat):
        dT = np.asarray(dflat, dtype=np.float64).reshape((B,) + extents)
        if len(ext) == 2:
            a, b = ext
            grads = [np.einsum("bij,bj->bi", dT, b), np.einsum("bij,bi->bj", dT, a)]
        else:
            a, b, c = ext
            grads = [
                np.einsum("bijk,bj,bk->bi", dT, b, c),
                np.einsum("bijk,bi,bk->bj", dT, a, c),
                np.einsum("bijk,bi,bj->bk", dT, a, b),
            ]
        grads = [g[:, :-1] for g in grads]
        return grads if batched else [g[0] for g in grads]

    return (flat if batched else flat[0]), extents, pullback


# ---------------------------------------------------------------------------
# model


@dataclass
class FusionConfig:
    mode: str = "cnn-gcn-snn"
    task: str = "survival"
    reduced_dim: int = 16
    gate_dropout: float = 0.25
    tensor_dropout: float = 0.25
    head_widths: tuple[int, ...] = (128, 32)
    n_classes: int = 3
    init: str = "kaiming_uniform"

    def __post_init__(self):
        self.head_widths = tuple(self.head_widths)
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown fusion mode {self.mode!r}")
        if self.task not in GATER_PRIORITY:
            raise ConfigurationError(f"unknown task {self.task!r}")


@dataclass
class Branch:
    name: str
    modality: str
    embedder: object


def make_branches(mode: str, embedders: dict) -> list[Branch]:
    """Branches for a mode; repeated modalities get suffixed names (snn, snn_b)."""
    branches = []
    seen: dict[str, int] = {}
    for modality in MODES[mode]:
        base = MODALITY_NET[modality]
        count = seen.get(base, 0)
        seen[base] = count + 1
        name = base if count == 0 else f"{base}_{'abc'[count]}"
        if name not in embedders:
            raise ConfigurationError(f"mode {mode} needs an embedder for branch {name!r}")
        branches.append(Branch(name, modality, embedders[name]))
    return branches


class GatedFusionNet:
    """Gated tensor fusion over the branches of ``cfg.mode``.

    Kronecker order puts the gating branch first, followed by the other
    branches in mode order, so trimodal survival fuses (genomic, image, graph).
    In trimodal mode the gating branch keeps its width and the others are
    projected to ``cfg.reduced_dim``.
    """

    def __init__(self, cfg: FusionConfig, embedders: dict):
        self.cfg = cfg
        branches = make_branches(cfg.mode, embedders)
        gater = next(
            b for m in GATER_PRIORITY[cfg.task] for b in branches if b.modality == m
        )
        self.branches = [gater] + [b for b in branches if b is not gater]
        self.gater = gater.name
        trimodal = len(self.branches) == 3
        self.gates = {}
        total = sum(b.embedder.embed_dim for b in self.branches)
        self.out_dims = {}
        for b in self.branches:
            d = b.embedder.embed_dim
            ctx = total if b.name == self.gater else d + gater.embedder.embed_dim
            out = cfg.reduced_dim if trimodal and b.name != self.gater else d
            self.out_dims[b.name] = out
            p = f"fusion.{b.name}"
            self.gates[b.name] = (
                Linear(f"{p}.h", d, d, cfg.init),
                Linear(f"{p}.z", ctx, d, cfg.init),
                Linear(f"{p}.o", d, out, cfg.init),
            )
        self.extents = tuple(self.out_dims[b.name] + 1 for b in self.branches)
        dims = (math.prod(self.extents),) + cfg.head_widths
        self.head_layers = [
            Linear(f"fusion.fc{i}", dims[i], dims[i + 1], cfg.init)
            for i in range(len(cfg.head_widths))
        ]
        self.head = OutputHead("fusion.out", dims[-1], cfg.task, cfg.n_classes)

    @property
    def tensor_width(self) -> int:
        return math.prod(self.extents)

    def fusion_names(self, params: ParamStore) -> list[str]:
        return params.names("fusion.")

    def init_fusion(self, params: ParamStore, rng) -> None:
        for layers in self.gates.values():
            for layer in layers:
                layer.init(params, rng)
        for layer in self.head_layers:
            layer.init(params, rng)
        self.head.init(params, rng)

    def _context(self, name, embs):
        if name == self.gater:
            return np.concatenate([embs[b.name] for b in self.branches], axis=1)
        return np.concatenate([embs[name], embs[self.gater]], axis=1)

    def _split_context(self, name, dctx, grads):
        if name == self.gater:
            i = 0
            for b in self.branches:
                d = b.embedder.embed_dim
                grads[b.name] = grads[b.name] + dctx[:, i : i + d]
                i += d
        else:
            d = self.gates[name][0].n_in
            grads[name] = grads[name] + dctx[:, :d]
            grads[self.gater] = grads[self.gater] + dctx[:, d:]

    def forward_embeddings(self, params: ParamStore, embs: dict, rng=None, training=False):
        """Fuse precomputed embeddings ``{branch name: (B, d)}``.

        Returns ``(output, pullback)``; the pullback returns embedding gradients
        keyed like ``embs``.
        """
        for b in self.branches:
            if b.name not in embs:
                raise ConfigurationError(f"missing embedding for branch {b.name!r}")
            if np.shape(embs[b.name])[-1] != b.embedder.embed_dim:
                raise DimensionError(f"branch {b.name} embedding width mismatch")
        tape = {}
        reduced = []
        for b in self.branches:
            lh, lz, lo = self.gates[b.name]
            g, g_back = gate(
                embs[b.name], self._context(b.name, embs),
                params[lh.weight], params[lh.bias], params[lz.weight], params[lz.bias],
            )
            o, o_back = lo(params, g)
            o, r_back = activation(o, "relu")
            o, d_back = dropout(o, self.cfg.gate_dropout, rng, training)
            reduced.append(o)
            tape[b.name] = (g_back, o_back, r_back, d_back)
        T, _, kron_back = kron_fuse(reduced)
        h, t_back = dropout(T, self.cfg.tensor_dropout, rng, training)
        head_backs = []
        for layer in self.head_layers:
            h, b1 = layer(params, h)
            h, b2 = activation(h, "relu")
            head_backs.append((b1, b2))
        out, out_back = self.head(params, h)

        def pullback(dout):
            dh = out_back(dout)
            for b1, b2 in reversed(head_backs):
                dh = b1(b2(dh))
            dreduced = kron_back(t_back(dh))
            grads = {b.name: np.zeros_like(np.asarray(embs[b.name], dtype=np.float64))
                     for b in self.branches}
            for b, dr in zip(self.branches, dreduced):
                g_back, o_back, r_back, d_back = tape[b.name]
                dg = o_back(r_back(d_back(dr)))
                dh_m, dctx, dW_h, db_h, dW_z, db_z = g_back(dg)
                lh, lz, _ = self.gates[b.name]
                params.accumulate(lh.weight, dW_h)
                params.accumulate(lh.bias, db_h)
                params.accumulate(lz.weight, dW_z)
                params.accumulate(lz.bias, db_z)
                grads[b.name] = grads[b.name] + dh_m
                self._split_context(b.name, dctx, grads)
            return grads

        return out, pullback

    def forward(self, params: ParamStore, inputs: dict, rng=None, training=False, cached=None):
        """Full forward from raw branch inputs ``{branch name: batch}``.

        Branches present in ``cached`` use those embeddings and receive no
        gradient. The pullback returns input gradients for the other branches.
        """
        cached = cached or {}
        embs, backs = {}, {}
        for b in self.branches:
            if b.name in cached:
                embs[b.name] = cached[b.name]
                continue
            if b.name not in inputs:
                raise ConfigurationError(f"mode {self.cfg.mode} needs {b.modality} input")
            embs[b.name], backs[b.name] = b.embedder.embed(params, inputs[b.name], rng, training)
        out, fuse_back = self.forward_embeddings(params, embs, rng, training)

        def pullback(dout):
            demb = fuse_back(dout)
            return {name: back(demb[name]) for name, back in backs.items()}

        return out, pullback

    def describe(self) -> dict:
        return {
            "mode": self.cfg.mode,
            "task": self.cfg.task,
            "branch_order": [b.name for b in self.branches],
            "modalities": [b.modality for b in self.branches],
            "gater": self.gater,
            "extents": list(self.extents),
            "config": asdict(self.cfg),
        }

    def save_descriptor(self, path) -> None:
        Path(path).write_text(json.dumps(self.describe(), indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# training schedule


@dataclass
class FusionHyper:
    lr: float = 1e-4
    frozen_epochs: int = 5
    finetune_epochs: int = 25
    batch_size: int = 32
    l1: float = 3e-4
    unfreeze: tuple[str, ...] = ("graph", "genomic")

    def __post_init__(self):
        self.unfreeze = tuple(self.unfreeze)


def load_branch_params(model: GatedFusionNet, checkpoints: dict) -> ParamStore:
    """Copy each branch's pretrained embedder weights into one store.

    ``checkpoints`` maps branch name to a ParamStore holding that branch's
    unimodal network under its own prefix.
    """
    params = ParamStore()
    for b in model.branches:
        if b.name not in checkpoints:
            raise CheckpointError(f"no unimodal checkpoint for branch {b.name!r}")
        probe = ParamStore()
        b.embedder.init(probe, rng_stream(0))
        src = checkpoints[b.name]
        for name in probe.names():
            if name not in src:
                raise CheckpointError(f"checkpoint for {b.name} lacks {name}")
            if src[name].shape != probe[name].shape:
                raise CheckpointError(
                    f"checkpoint {name} has shape {src[name].shape}, expected {probe[name].shape}"
                )
            params.add(name, src[name])
    return params


def _branch_inputs(model, data: InstanceSet, idx):
    return {b.name: data.modality(b.modality, idx) for b in model.branches}


def train_schedule(model: GatedFusionNet, checkpoints: dict, data: InstanceSet,
                   hyper: FusionHyper, seed: int):
    """Two-phase fusion training.

    Phase 1 trains gates and head on frozen embeddings at a constant rate.
    Phase 2 also updates the embedders of modalities in ``hyper.unfreeze``
    with a linearly decaying rate; the remaining branches keep cached
    embeddings. An L1 penalty applies to genomic embedder weights in phase 2.
    """
    for b in model.branches:
        data.modality(b.modality)
    params = load_branch_params(model, checkpoints)
    model.init_fusion(params, rng_stream(seed, f"init/fusion/{model.cfg.mode}"))
    rng = rng_stream(seed, f"train/fusion/{model.cfg.mode}")
    cached = {b.name: embed_all(b.embedder, params, data, b.modality) for b in model.branches}
    fusion_names = model.fusion_names(params)
    history = History()

    def frozen_forward(p, idx, r, training):
        out, back = model.forward_embeddings(p, {k: v[idx] for k, v in cached.items()}, r, training)
        return out, back

    phase1 = TrainHyper(epochs=hyper.frozen_epochs, lr=hyper.lr, batch_size=hyper.batch_size,
                        schedule="constant")
    fit(frozen_forward, params, data, model.cfg.task, fusion_names, phase1, rng, history=history)

    live = [b for b in model.branches if b.modality in hyper.unfreeze]
    frozen = {b.name: cached[b.name] for b in model.branches if b not in live}
    trainable = fusion_names + [n for b in live for n in params.names(b.embedder.prefix + ".")]
    l1_names = [n for b in live if b.modality == "genomic"
                for n in getattr(b.embedder, "weight_names", lambda: [])()]

    def live_forward(p, idx, r, training):
        inputs = {b.name: data.modality(b.modality, idx) for b in live}
        return model.forward(p, inputs, r, training, cached={k: v[idx] for k, v in frozen.items()})

    phase2 = TrainHyper(epochs=hyper.finetune_epochs, lr=hyper.lr, batch_size=hyper.batch_size,
                        schedule="linear_decay", l1=hyper.l1)
    if hyper.finetune_epochs > 0:
        fit(live_forward if live else frozen_forward, params, data, model.cfg.task, trainable,
            phase2, rng, l1_names=l1_names, history=history)
    return params, history


def fusion_predict(model: GatedFusionNet, params: ParamStore, data: InstanceSet,
                   batch_size: int = 128) -> np.ndarray:
    outs = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(len(data), start + batch_size))
        out, _ = model.forward(params, _branch_inputs(model, data, idx), None, False)
        outs.append(out)
    return np.concatenate(outs, axis=0)


def build_embedders(mode: str, snn_cfg=None, gcn_cfg=None, cnn_cfg=None) -> dict:
    """Fresh embedders for every branch of ``mode`` keyed by branch name."""
    factories = {
        "snn": lambda p: SnnNet(snn_cfg, p),
        "gcn": lambda p: GcnNet(gcn_cfg, p),
        "cnn": lambda p: CnnNet(cnn_cfg, p),
    }
    out = {}
    seen: dict[str, int] = {}
    for modality in MODES[mode]:
        base = MODALITY_NET[modality]
        count = seen.get(base, 0)
        seen[base] = count + 1
        name = base if count == 0 else f"{base}_{'abc'[count]}"
        out[name] = factories[base](name)
    return out
