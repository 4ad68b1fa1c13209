"""Unimodal networks: genomic SNN, cell-graph GCN, small CNN, and output heads.

Each network keeps its weights in a shared ParamStore under a name prefix and
exposes ``embed(params, x, rng, training) -> (h, pullback)``. Pullbacks
accumulate parameter gradients into the store and return input gradients.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import (
    DimensionError,
    Linear,
    ParameterError,
    ParamStore,
    activation,
    affine,
    alpha_dropout,
    dropout,
    sigmoid,
)

EMBED_DIM = 32


@dataclass
class SnnConfig:
    input_dim: int = 80
    widths: tuple[int, ...] = (64, 48, 32, 32)
    dropout: float = 0.25
    activation: str = "elu"
    init: str = "lecun_normal"

    def __post_init__(self):
        self.widths = tuple(self.widths)


@dataclass
class GcnConfig:
    input_dim: int = 12
    blocks: int = 3
    hidden: int = 128
    keep_ratio: float = 0.5
    head_widths: tuple[int, ...] = (128, 32)
    dropout: float = 0.25
    init: str = "lecun_normal"

    def __post_init__(self):
        self.head_widths = tuple(self.head_widths)
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ParameterError("keep_ratio must be in (0, 1]")


@dataclass
class CnnConfig:
    input_side: int = 64
    channels_in: int = 3
    # (out_channels, kernel, stride); every conv is followed by ReLU and 2x2 max pooling
    layers: tuple[tuple[int, int, int], ...] = ((8, 3, 1), (16, 3, 1), (16, 3, 1))
    hidden: int = 64
    embed_dim: int = EMBED_DIM
    dropout: float = 0.25
    embed_dropout: float = 0.05
    init: str = "kaiming_uniform"

    def __post_init__(self):
        self.layers = tuple(tuple(layer) for layer in self.layers)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def _rng_or_none(rng, training):
    if training and rng is None:
        raise ValueError("training mode needs a random generator")
    return rng


# ---------------------------------------------------------------------------
# heads


class OutputHead:
    """Survival: hazard = -3 + 6 * sigmoid(w.h + b). Grade: log-softmax over classes.

    The projection starts at zero by default. The Cox loss is blind to a
    common shift of all hazards, and a head that starts off-centre drifts
    into the flat tail of the sigmoid, where every hazard reads -3 or 3.
    """

    def __init__(self, name: str, in_dim: int, task: str, n_classes: int = 3,
                 init: str = "zeros"):
        if task not in ("survival", "grade"):
            raise ParameterError(f"unknown task {task!r}")
        self.task = task
        self.linear = Linear(name, in_dim, 1 if task == "survival" else n_classes, init)

    def init(self, params: ParamStore, rng) -> None:
        self.linear.init(params, rng)

    def __call__(self, params: ParamStore, h):
        z, lin_back = self.linear(params, h)
        if self.task == "survival":
            s = sigmoid(z[..., 0])
            hazard = -3.0 + 6.0 * s

            def pullback(dy):
                dz = (np.asarray(dy) * 6.0 * s * (1.0 - s))[..., None]
                return lin_back(dz)

            return hazard, pullback
        y, act_back = activation(z, "log_softmax")
        return y, lambda dy: lin_back(act_back(dy))


def output_head(h, task: str, params: ParamStore, name: str = "head"):
    """Functional form of :class:`OutputHead` for weights already in ``params``."""
    n_out = params[f"{name}.W"].shape[1]
    head = OutputHead(name, np.shape(h)[-1], task, n_classes=max(n_out, 2))
    return head(params, h)


# ---------------------------------------------------------------------------
# genomic SNN


class SnnNet:
    def __init__(self, cfg: SnnConfig, prefix: str = "snn"):
        self.cfg, self.prefix = cfg, prefix
        dims = (cfg.input_dim,) + cfg.widths
        self.layers = [
            Linear(f"{prefix}.fc{i}", dims[i], dims[i + 1], cfg.init)
            for i in range(len(cfg.widths))
        ]

    @property
    def embed_dim(self) -> int:
        return self.cfg.widths[-1]

    def init(self, params: ParamStore, rng) -> None:
        for layer in self.layers:
            layer.init(params, rng)

    def weight_names(self) -> list[str]:
        return [layer.weight for layer in self.layers]

    def embed(self, params: ParamStore, x, rng=None, training: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.cfg.input_dim:
            raise DimensionError(f"SNN expects width {self.cfg.input_dim}, got {x.shape[-1]}")
        _rng_or_none(rng, training)
        backs = []
        h = x
        for layer in self.layers:
            h, b1 = layer(params, h)
            h, b2 = activation(h, self.cfg.activation)
            h, b3 = alpha_dropout(h, self.cfg.dropout, rng, training)
            backs.append((b1, b2, b3))

        def pullback(dh):
            for b1, b2, b3 in reversed(backs):
                dh = b1(b2(b3(dh)))
            return dh

        return h, pullback


# ---------------------------------------------------------------------------
# graph layers


def graphsage_conv(X, A, W_agg, b_agg, W, b):
    """GraphSAGE max-pool convolution.

    a_v = max_{u in N(v)} ReLU(W_agg h_u + b_agg) (zero for isolated nodes),
    h'_v = W [h_v, a_v] + b. Neighbourhoods are the nonzero entries of row v of A.
    Pullback returns (dX, dW_agg, db_agg, dW, db).
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A)
    n = X.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"adjacency {A.shape} does not match {n} nodes")
    pre, agg_back = affine(X, W_agg, b_agg)
    M, relu_back = activation(pre, "relu")
    nbr = A > 0
    has_nbr = nbr.any(axis=1)
    masked = np.where(nbr[:, :, None], M[None, :, :], -np.inf)
    arg = masked.argmax(axis=1)
    agg = np.take_along_axis(M, arg, axis=0) * has_nbr[:, None]
    cat = np.concatenate([X, agg], axis=1)
    out, lin_back = affine(cat, W, b)
    f_in = X.shape[1]

    def pullback(dout):
        dcat, dW, db = lin_back(dout)
        dX = dcat[:, :f_in].copy()
        dagg = dcat[:, f_in:] * has_nbr[:, None]
        dM = np.zeros_like(M)
        cols = np.broadcast_to(np.arange(M.shape[1]), arg.shape)
        np.add.at(dM, (arg, cols), dagg)
        dX2, dW_agg, db_agg = agg_back(relu_back(dM))
        return dX + dX2, dW_agg, db_agg, dW, db

    return out, pullback


def pooling_adjacency(A) -> np.ndarray:
    """Binarised A + A^2 with self-loops, the neighbourhood used for attention scores."""
    A = (np.asarray(A) > 0).astype(np.float64)
    S = A + A @ A + np.eye(A.shape[0])
    return (S > 0).astype(np.float64)


def sagpool(X, A, keep_ratio, W_agg, b_agg, W, b):
    """Self-attention pooling.

    Scores are sigmoid(SAGEConv(X, A + A^2)); the top ceil(r N) nodes (ties to
    the lower index) are kept in ascending index order, scaled by their score.
    Returns ``(X_kept, A_kept, kept, pullback)``; the pullback maps dX_kept to
    (dX, dW_agg, db_agg, dW, db).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    raw, conv_back = graphsage_conv(X, pooling_adjacency(A), W_agg, b_agg, W, b)
    score = sigmoid(raw[:, 0])
    n_keep = max(1, math.ceil(keep_ratio * n - 1e-12))
    order = np.lexsort((np.arange(n), -score))
    kept = np.sort(order[:n_keep])
    X_kept = X[kept] * score[kept, None]
    A_kept = np.asarray(A)[np.ix_(kept, kept)]

    def pullback(dX_kept):
        dX = np.zeros_like(X)
        dX[kept] += dX_kept * score[kept, None]
        dscore = np.zeros(n)
        dscore[kept] = np.sum(dX_kept * X[kept], axis=1)
        draw = (dscore * score * (1.0 - score))[:, None]
        dX2, *grads = conv_back(draw)
        return (dX + dX2, *grads)

    return X_kept, A_kept, kept, pullback


class _SageParams:
    def __init__(self, prefix: str, f_in: int, f_out: int, init: str):
        self.agg = Linear(f"{prefix}.agg", f_in, f_in, init)
        self.out = Linear(f"{prefix}.out", 2 * f_in, f_out, init)

    def init(self, params, rng):
        self.agg.init(params, rng)
        self.out.init(params, rng)

    def tensors(self, params):
        return (params[self.agg.weight], params[self.agg.bias],
                params[self.out.weight], params[self.out.bias])

    def accumulate(self, params, grads):
        for name, g in zip((self.agg.weight, self.agg.bias, self.out.weight, self.out.bias), grads):
            params.accumulate(name, g)


class GcnNet:
    """GraphSAGE + SAGPool blocks with a summed per-block mean readout."""

    def __init__(self, cfg: GcnConfig, prefix: str = "gcn"):
        self.cfg, self.prefix = cfg, prefix
        self.convs, self.pools = [], []
        f_in = cfg.input_dim
        for i in range(cfg.blocks):
            self.convs.append(_SageParams(f"{prefix}.conv{i}", f_in, cfg.hidden, cfg.init))
            self.pools.append(_SageParams(f"{prefix}.pool{i}", cfg.hidden, 1, cfg.init))
            f_in = cfg.hidden
        dims = (cfg.hidden,) + cfg.head_widths
        self.head = [
            Linear(f"{prefix}.lin{i}", dims[i], dims[i + 1], cfg.init)
            for i in range(len(cfg.head_widths))
        ]

    @property
    def embed_dim(self) -> int:
        return self.cfg.head_widths[-1]

    def init(self, params: ParamStore, rng) -> None:
        for conv, pool in zip(self.convs, self.pools):
            conv.init(params, rng)
            pool.init(params, rng)
        for layer in self.head:
            layer.init(params, rng)

    def readout(self, params: ParamStore, X, A):
        """Sum over blocks of the mean surviving node features; returns (r, pullback)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.cfg.input_dim or X.shape[0] < 1:
            raise DimensionError(f"graph features must be N x {self.cfg.input_dim}")
        h, adj = X, np.asarray(A)
        tape = []
        r = np.zeros(self.cfg.hidden)
        for conv, pool in zip(self.convs, self.pools):
            c, conv_back = graphsage_conv(h, adj, *conv.tensors(params))
            a, relu_back = activation(c, "relu")
            h, adj, _, pool_back = sagpool(a, adj, self.cfg.keep_ratio, *pool.tensors(params))
            r = r + h.mean(axis=0)
            tape.append((conv, pool, conv_back, relu_back, pool_back, h.shape[0]))

        def pullback(dr):
            dh = np.zeros((tape[-1][5], self.cfg.hidden))
            for conv, pool, conv_back, relu_back, pool_back, n_kept in reversed(tape):
                dh = dh + np.broadcast_to(dr / n_kept, (n_kept, dr.size))
                da, *pgrads = pool_back(dh)
                pool.accumulate(params, pgrads)
                dh, *cgrads = conv_back(relu_back(da))
                conv.accumulate(params, cgrads)
            return dh

        return r, pullback

    def embed(self, params: ParamStore, graphs, rng=None, training: bool = False):
        """Embed a list of graphs (objects with ``X`` and ``A``) into a (B, 32) array."""
        _rng_or_none(rng, training)
        outs = [self.readout(params, g.X, g.A) for g in graphs]
        h = np.stack([r for r, _ in outs])
        backs = []
        for i, layer in enumerate(self.head):
            h, b1 = layer(params, h)
            h, b2 = activation(h, "relu")
            if i < len(self.head) - 1:
                h, b3 = dropout(h, self.cfg.dropout, rng, training)
            else:
                b3 = lambda d: d  # noqa: E731
            backs.append((b1, b2, b3))

        def pullback(dh):
            for b1, b2, b3 in reversed(backs):
                dh = b1(b2(b3(dh)))
            return [back(dh[i]) for i, (_, back) in enumerate(outs)]

        return h, pullback


# ---------------------------------------------------------------------------
# convolutional embedder


def conv2d(x, W, b, stride: int = 1):
    """Same-padded 2-d convolution. x: (B, C, H, W); W: (O, C, k, k)."""
    B, C, H, Wd = x.shape
    O, C2, k, _ = W.shape
    if C != C2:
        raise DimensionError(f"conv expects {C2} channels, got {C}")
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    Wm = W.reshape(O, C * k * k)
    y = (cols @ Wm.T + b).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def pullback(dy):
        dy2 = dy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        dW = (dy2.T @ cols).reshape(W.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ Wm).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return dxp[:, :, pad : pad + H, pad : pad + Wd], dW, db

    return y, pullback


def maxpool2(x):
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    x = x[:, :, : 2 * H2, : 2 * W2]
    blocks = x.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def pullback(dy):
        dblocks = np.zeros(blocks.shape)
        np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
        dx = dblocks.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
        if (H, W) != (2 * H2, 2 * W2):
            dx = np.pad(dx, ((0, 0), (0, 0), (0, H - 2 * H2), (0, W - 2 * W2)))
        return dx

    return y, pullback


class CnnNet:
    """Conv/ReLU/max-pool stack, then two dense layers to a 32-wide embedding."""

    def __init__(self, cfg: CnnConfig, prefix: str = "cnn"):
        self.cfg, self.prefix = cfg, prefix
        side, ch = cfg.input_side, cfg.channels_in
        self.conv_shapes = []
        for i, (out_ch, k, stride) in enumerate(cfg.layers):
            self.conv_shapes.append((f"{prefix}.conv{i}", (out_ch, ch, k, k), stride))
            side = -(-side // stride) // 2
            ch = out_ch
            if side < 1:
                raise ParameterError("CNN stack shrinks the image below one pixel")
        self.last_side = side
        self.flat_dim = ch * side * side
        self.fc1 = Linear(f"{prefix}.fc1", self.flat_dim, cfg.hidden, cfg.init)
        self.fc2 = Linear(f"{prefix}.fc2", cfg.hidden, cfg.embed_dim, cfg.init)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def init(self, params: ParamStore, rng) -> None:
        for name, shape, _ in self.conv_shapes:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            params.add(f"{name}.W", rng.uniform(-bound, bound, size=shape))
            params.add(f"{name}.b", np.zeros(shape[0]))
        self.fc1.init(params, rng)
        self.fc2.init(params, rng)

    def _check(self, images):
        x = np.asarray(images, dtype=np.float64)
        s, c = self.cfg.input_side, self.cfg.channels_in
        if x.ndim != 4 or x.shape[1:] != (s, s, c):
            raise DimensionError(f"CNN expects images of shape (B, {s}, {s}, {c}), got {x.shape}")
        return x.transpose(0, 3, 1, 2)

    def conv_features(self, params: ParamStore, images):
        """Run the conv stack. Returns (pooled output, last conv activation, pullbacks)."""
        h = self._check(images)
        tape = []
        last_act = None
        for name, _, stride in self.conv_shapes:
            h, cb = conv2d(h, params[f"{name}.W"], params[f"{name}.b"], stride)
            h, rb = activation(h, "relu")
            last_act = h
            h, pb = maxpool2(h)
            tape.append((name, cb, rb, pb))
        return h, last_act, tape

    def _conv_pullback(self, params, tape, dh):
        for name, cb, rb, pb in reversed(tape):
            dh, dW, db = cb(rb(pb(dh)))
            params.accumulate(f"{name}.W", dW)
            params.accumulate(f"{name}.b", db)
        return dh.transpose(0, 2, 3, 1)

    def dense(self, params: ParamStore, pooled, rng=None, training: bool = False):
        """Map pooled conv output (B, C, h, w) to the embedding."""
        shape = pooled.shape
        h, b1 = self.fc1(params, pooled.reshape(shape[0], -1))
        h, b2 = activation(h, "relu")
        h, b3 = dropout(h, self.cfg.dropout, rng, training)
        h, b4 = self.fc2(params, h)
        h, b5 = activation(h, "relu")
        h, b6 = dropout(h, self.cfg.embed_dropout, rng, training)

        def pullback(dh):
            return b1(b2(b3(b4(b5(b6(dh)))))).reshape(shape)

        return h, pullback

    def embed(self, params: ParamStore, images, rng=None, training: bool = False):
        _rng_or_none(rng, training)
        pooled, _, tape = self.conv_features(params, images)
        h, dense_back = self.dense(params, pooled, rng, training)
        return h, lambda dh: self._conv_pullback(params, tape, dense_back(dh))


# ---------------------------------------------------------------------------
# embedder + head


class UnimodalNet:
    """An embedder followed by a task head."""

    def __init__(self, embedder, task: str, n_classes: int = 3):
        self.embedder = embedder
        self.task = task
        self.head = OutputHead(f"{embedder.prefix}.head", embedder.embed_dim, task, n_classes)

    @property
    def prefix(self) -> str:
        return self.embedder.prefix

    def init(self, params: ParamStore, rng) -> None:
        self.embedder.init(params, rng)
        self.head.init(params, rng)

    def forward(self, params: ParamStore, x, rng=None, training: bool = False):
        """Returns (output, embedding, pullback); pullback maps d output to d input."""
        h, emb_back = self.embedder.embed(params, x, rng, training)
        out, head_back = self.head(params, h)
        return out, h, lambda dout: emb_back(head_back(dout))
