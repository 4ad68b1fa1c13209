"""Dense float64 primitives with explicit pullbacks, parameter storage and Adam.

Every differentiable primitive returns ``(output, pullback)``. Calling the
pullback with the upstream gradient returns the gradients with respect to the
primitive's array inputs, in argument order.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams


def rng_stream(seed: int, stream: int | str = 0) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, stream)``.

    Philox output depends only on the key, so each stream is reproducible on
    any platform and independently of how many other streams were drawn.
    String stream names are mapped through CRC32.
    """
    if isinstance(stream, str):
        stream = zlib.crc32(stream.encode("utf-8"))
    mask = (1 << 64) - 1
    return np.random.Generator(np.random.Philox(key=[seed & mask, stream & mask]))


# ---------------------------------------------------------------------------
# primitives


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine(x, W, b):
    """``y = x @ W + b`` for ``x`` of shape (..., n_in)."""
    x, W, b = _f64(x), _f64(W), _f64(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine shapes do not match: x{x.shape} W{W.shape} b{b.shape}"
        )
    y = x @ W + b

    def pullback(dy):
        dy = _f64(dy)
        dx = dy @ W.T
        x2 = x.reshape(-1, W.shape[0])
        dy2 = dy.reshape(-1, W.shape[1])
        return dx, x2.T @ dy2, dy2.sum(axis=0)

    return y, pullback


ACTIVATIONS = ("relu", "elu", "selu", "sigmoid", "tanh", "log_softmax")


def sigmoid(x):
    x = _f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x):
    x = _f64(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def activation(x, kind: str):
    x = _f64(x)
    if kind not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {kind!r}")
    if not np.all(np.isfinite(x)):
        raise ValueError("activation input contains non-finite values")

    if kind == "relu":
        y = np.maximum(x, 0.0)
        deriv = (x > 0).astype(np.float64)
    elif kind == "elu":
        neg = np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0, x, neg)
        deriv = np.where(x > 0, 1.0, neg + 1.0)
    elif kind == "selu":
        neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
        y = SELU_LAMBDA * np.where(x > 0, x, neg)
        deriv = SELU_LAMBDA * np.where(x > 0, 1.0, neg + SELU_ALPHA)
    elif kind == "sigmoid":
        y = sigmoid(x)
        deriv = y * (1.0 - y)
    elif kind == "tanh":
        y = np.tanh(x)
        deriv = 1.0 - y * y
    else:
        y = log_softmax(x)
        probs = np.exp(y)

        def pullback(dy):
            dy = _f64(dy)
            return dy - probs * dy.sum(axis=-1, keepdims=True)

        return y, pullback

    return y, lambda dy: _f64(dy) * deriv


def alpha_dropout(x, p: float, rng: np.random.Generator | None, training: bool):
    """Dropout that keeps SeLU activations at zero mean and unit variance.

    Dropped units are set to the SeLU negative saturation value and the result
    is rescaled so the first two moments are preserved in expectation.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _f64(x)
    if not training or p == 0.0:
        return x, lambda dy: _f64(dy)
    keep = 1.0 - p
    sat = -SELU_LAMBDA * SELU_ALPHA
    a = (keep + sat * sat * keep * p) ** -0.5
    b = -a * p * sat
    mask = rng.random(x.shape) < keep
    y = a * np.where(mask, x, sat) + b
    return y, lambda dy: _f64(dy) * a * mask


def dropout(x, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _f64(x)
    if not training or p == 0.0:
        return x, lambda dy: _f64(dy)
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * scale, lambda dy: _f64(dy) * scale


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named float64 parameters with gradients and Adam moments.

    A store is mutated by one training loop at a time.
    """

    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.entries[name] = Param(
            value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value)
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.entries[name].value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self[name].shape}")
        self.entries[name].value = value.copy()

    def grad(self, name: str) -> np.ndarray:
        return self.entries[name].grad

    def accumulate(self, name: str, g) -> None:
        self.entries[name].grad += g

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0.0

    def merge(self, other: "ParamStore", prefix: str = "") -> None:
        for name, p in other.entries.items():
            self.add(prefix + name, p.value)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.entries.items():
            out.entries[name] = Param(
                p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.step
            )
        return out

    def flat(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = list(self.entries) if names is None else list(names)
        return np.concatenate([self[n].ravel() for n in names])

    def flat_grad(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = list(self.entries) if names is None else list(names)
        return np.concatenate([self.grad(n).ravel() for n in names])

    def load_flat(self, vec, names: Iterable[str] | None = None) -> None:
        names = list(self.entries) if names is None else list(names)
        i = 0
        for n in names:
            size = self[n].size
            self.entries[n].value = np.asarray(vec[i : i + size], dtype=np.float64).reshape(
                self[n].shape
            )
            i += size

    def save(self, path) -> None:
        """Write the JSON checkpoint: one {name, shape, dtype, values} entry per tensor."""
        payload = {
            "format": "pathfuse-params",
            "params": [
                {
                    "name": n,
                    "shape": list(p.value.shape),
                    "dtype": "f64",
                    "values": p.value.ravel().tolist(),
                }
                for n, p in self.entries.items()
            ],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParamStore":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        store = cls()
        for entry in payload["params"]:
            if entry.get("dtype") != "f64":
                raise ValueError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
            values = np.array(entry["values"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if values.size != math.prod(shape):
                raise ValueError(f"{path}: {entry['name']} has {values.size} values for shape {shape}")
            store.add(entry["name"], values.reshape(shape))
        return store


def adam_step(params: ParamStore, lr: float, names: Iterable[str] | None = None) -> None:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) on the named entries."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    for name in params.names() if names is None else names:
        p = params.entries[name]
        p.step += 1
        p.m = ADAM_BETA1 * p.m + (1 - ADAM_BETA1) * p.grad
        p.v = ADAM_BETA2 * p.v + (1 - ADAM_BETA2) * p.grad * p.grad
        m_hat = p.m / (1 - ADAM_BETA1**p.step)
        v_hat = p.v / (1 - ADAM_BETA2**p.step)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def scheduled_lr(base_lr: float, epoch: int, schedule: str = "constant",
                 total_epochs: int = 1, flat_epochs: int = 0) -> float:
    """Learning rate for a 0-based ``epoch``.

    ``linear_decay`` holds ``base_lr`` for ``flat_epochs`` and then decays
    linearly towards zero, reaching ``base_lr / decay_epochs`` on the last epoch.
    """
    if schedule == "constant":
        return base_lr
    if schedule != "linear_decay":
        raise ParameterError(f"unknown schedule {schedule!r}")
    decay = total_epochs - flat_epochs
    if epoch < flat_epochs or decay <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - (epoch - flat_epochs) / decay)


# ---------------------------------------------------------------------------
# initialisation


def lecun_normal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))


def kaiming_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def zeros(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return np.zeros((n_in, n_out))


INITIALIZERS = {"lecun_normal": lecun_normal, "kaiming_uniform": kaiming_uniform, "zeros": zeros}


class Linear:
    """Affine layer whose weights live in a ParamStore under ``name``."""

    def __init__(self, name: str, n_in: int, n_out: int, init: str = "kaiming_uniform"):
        self.name, self.n_in, self.n_out, self.init_scheme = name, n_in, n_out, init

    @property
    def weight(self) -> str:
        return f"{self.name}.W"

    @property
    def bias(self) -> str:
        return f"{self.name}.b"

    def init(self, params: ParamStore, rng: np.random.Generator) -> None:
        params.add(self.weight, INITIALIZERS[self.init_scheme](rng, self.n_in, self.n_out))
        params.add(self.bias, np.zeros(self.n_out))

    def __call__(self, params: ParamStore, x):
        y, back = affine(x, params[self.weight], params[self.bias])

        def pullback(dy):
            dx, dW, db = back(dy)
            params.accumulate(self.weight, dW)
            params.accumulate(self.bias, db)
            return dx

        return y, pullback


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheck:
    passed: bool
    max_rel_error: float


def numerical_gradient(fun: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fun(x)
        flat[i] = orig - h
        down = fun(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Largest absolute deviation divided by the gradient's magnitude."""
    analytic, numeric = _f64(analytic), _f64(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def finite_diff_check(f, x, tol: float = 1e-5, h: float = 1e-5, seed: int = 0) -> GradCheck:
    """Compare the pullback of ``f`` against central differences.

    ``f(x)`` must return ``(y, pullback)``. The output is contracted with a fixed
    random cotangent so that a single scalar gradient is compared. If the
    pullback returns a tuple its first element is taken as the input gradient.
    """
    x = np.array(x, dtype=np.float64)
    y, pullback = f(x.copy())
    cot = rng_stream(seed, "finite-diff").normal(size=np.shape(y))
    analytic = pullback(cot)
    if isinstance(analytic, tuple):
        analytic = analytic[0]
    numeric = numerical_gradient(lambda z: float(np.sum(cot * f(z)[0])), x, h)
    err = relative_error(analytic, numeric)
    return GradCheck(bool(err < tol), err)
