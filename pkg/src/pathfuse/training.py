"""Mini-batch training loops shared by the unimodal and fusion networks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evalstats import cox_loss_grad
from .numcore import ParamStore, adam_step, rng_stream, scheduled_lr

log = logging.getLogger(__name__)

MODALITIES = ("image", "graph", "genomic")


@dataclass
class InstanceSet:
    """Aligned per-instance arrays; several instances may share one patient id."""

    patient_ids: list[str]
    time: np.ndarray
    event: np.ndarray
    grade: np.ndarray
    genomic: np.ndarray | None = None
    graphs: list | None = None
    images: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx) -> "InstanceSet":
        idx = np.asarray(idx, dtype=int)
        return InstanceSet(
            [self.patient_ids[i] for i in idx],
            self.time[idx],
            self.event[idx],
            self.grade[idx],
            None if self.genomic is None else self.genomic[idx],
            None if self.graphs is None else [self.graphs[i] for i in idx],
            None if self.images is None else self.images[idx],
        )

    def modality(self, name: str, idx=None):
        data = {"genomic": self.genomic, "graph": self.graphs, "image": self.images}[name]
        if data is None:
            raise KeyError(f"instances carry no {name} data")
        if idx is None:
            return data
        if name == "graph":
            return [data[i] for i in idx]
        return data[np.asarray(idx, dtype=int)]


@dataclass
class TrainHyper:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 32
    schedule: str = "linear_decay"
    flat_epochs: int = 0
    l1: float = 0.0
    weight_decay: float = 0.0
    augment: bool = False


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def task_loss(task: str, out, data: InstanceSet, idx):
    """Batch loss and its gradient in the network output.

    Survival uses the Cox partial likelihood divided by the number of events in
    the batch; batches without events contribute nothing. Grade uses the mean
    negative log-likelihood of the log-probabilities.
    """
    if task == "survival":
        event = data.event[idx]
        n_events = int(event.sum())
        if n_events == 0:
            return 0.0, np.zeros_like(out)
        loss, grad = cox_loss_grad(data.time[idx], event, out)
        return loss / n_events, grad / n_events
    labels = data.grade[idx].astype(int)
    rows = np.arange(labels.size)
    grad = np.zeros_like(out)
    grad[rows, labels] = -1.0 / labels.size
    return float(-out[rows, labels].mean()), grad


def fit(forward, params: ParamStore, data: InstanceSet, task: str, trainable: list[str],
        hyper: TrainHyper, rng: np.random.Generator, l1_names=(), epoch_offset: int = 0,
        total_epochs: int | None = None, history: History | None = None) -> History:
    """Adam over shuffled mini-batches.

    ``forward(params, idx, rng, training)`` returns ``(out, pullback)`` for the
    instances ``idx``. Only ``trainable`` entries are updated; an L1 penalty of
    ``hyper.l1`` is applied to ``l1_names``; ``hyper.weight_decay`` adds an L2
    term to every trainable entry before the Adam update.
    """
    history = History() if history is None else history
    total = hyper.epochs if total_epochs is None else total_epochs
    n = len(data)
    for epoch in range(hyper.epochs):
        lr = scheduled_lr(hyper.lr, epoch_offset + epoch, hyper.schedule, total, hyper.flat_epochs)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = np.sort(order[start : start + hyper.batch_size])
            params.zero_grad()
            out, pullback = forward(params, idx, rng, True)
            loss, dout = task_loss(task, out, data, idx)
            pullback(dout)
            for name in l1_names:
                params.accumulate(name, hyper.l1 * np.sign(params[name]))
            if hyper.weight_decay > 0:
                for name in trainable:
                    params.accumulate(name, hyper.weight_decay * params[name])
            adam_step(params, lr, trainable)
            epoch_loss += loss * idx.size
        history.loss.append(epoch_loss / n)
        history.lr.append(lr)
        log.debug("epoch %d lr %.2e loss %.4f", epoch_offset + epoch, lr, epoch_loss / n)
    params.zero_grad()
    return history


def predict(forward, params: ParamStore, n: int, batch_size: int = 128) -> np.ndarray:
    outs = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        out, _ = forward(params, idx, None, False)
        outs.append(out)
    return np.concatenate(outs, axis=0)


def flip_augment(images, rng: np.random.Generator) -> np.ndarray:
    """Independent random horizontal and vertical flips of (B, H, W, C) images."""
    out = np.array(images, copy=True)
    h = rng.random(len(out)) < 0.5
    v = rng.random(len(out)) < 0.5
    out[h] = out[h][:, :, ::-1]
    out[v] = out[v][:, ::-1]
    return out


def unimodal_forward(net, data: InstanceSet, modality: str, augment: bool = False):
    def forward(params, idx, rng, training):
        x = data.modality(modality, idx)
        if training and augment and modality == "image":
            x = flip_augment(x, rng)
        out, _, pullback = net.forward(params, x, rng, training)
        return out, pullback

    return forward


def train_unimodal(net, data: InstanceSet, modality: str, hyper: TrainHyper, seed: int,
                   params: ParamStore | None = None):
    """Initialise (unless ``params`` is given) and train an embedder + head."""
    if params is None:
        params = ParamStore()
        net.init(params, rng_stream(seed, f"init/{net.prefix}"))
    l1_names = []
    if hyper.l1 > 0 and hasattr(net.embedder, "weight_names"):
        l1_names = net.embedder.weight_names()
    history = fit(unimodal_forward(net, data, modality, hyper.augment), params, data, net.task,
                  params.names(), hyper, rng_stream(seed, f"train/{net.prefix}"), l1_names)
    return params, history


def embed_all(embedder, params: ParamStore, data: InstanceSet, modality: str,
              batch_size: int = 128) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(len(data), start + batch_size))
        h, _ = embedder.embed(params, data.modality(modality, idx), None, False)
        out.append(h)
    return np.concatenate(out, axis=0)
