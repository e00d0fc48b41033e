"""Small numpy 1-D CNN: layers with hand-written backward passes, AdamW, training loop."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import Divergence, ShapeError

# ---------------------------------------------------------------- activations


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def swish(x):
    return x * sigmoid(x)


def log_softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def quantize_symmetric(x: np.ndarray, bits: int | None, x_range=None) -> np.ndarray:
    """Uniform quantization onto 2**bits - 1 levels spanning [-range, range].

    Without an explicit range, each sample (leading axis) uses its own max |x|.
    """
    if bits is None:
        return x
    if x_range is None:
        r = np.max(np.abs(x), axis=tuple(range(1, x.ndim)), keepdims=True) if x.ndim > 1 else np.max(np.abs(x))
    else:
        r = np.asarray(x_range, dtype=np.float64)
    half = 2 ** (bits - 1) - 1
    step = np.where(r > 0, r / half, 1.0)
    return np.clip(np.round(x / step), -half, half) * step


def read_noise(x: np.ndarray, w_max: float, sigma: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Output noise given in normalized units: full-scale weight times the sample's DAC range.

    A sample with all-zero input keeps a unit range so the noise floor stays visible.
    """
    r = np.max(np.abs(x), axis=tuple(range(1, x.ndim)), keepdims=True) if x.ndim > 1 else np.max(np.abs(x))
    r = np.where(r > 0, r, 1.0)
    return rng.normal(0.0, 1.0, shape) * (sigma * (w_max if w_max > 0 else 1.0)) * r


# ---------------------------------------------------------------- layers


class Layer:
    kind = ""
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def spec(self) -> dict:
        return {"type": self.kind}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, train=False, noise=None, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    @property
    def is_mvm(self) -> bool:
        return False


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = int(in_ch), int(out_ch), int(kernel), int(stride)
        self.params = {"W": np.zeros((self.out_ch, self.in_ch, self.kernel)), "b": np.zeros(self.out_ch)}

    def spec(self):
        return {"type": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride}

    @property
    def is_mvm(self):
        return True

    @property
    def fan_in(self):
        return self.in_ch * self.kernel

    def out_len(self, length: int) -> int:
        return (length - self.kernel) // self.stride + 1

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv1d expects {self.in_ch} channels, got {c}")
        if length < self.kernel:
            raise ShapeError(f"conv1d kernel {self.kernel} longer than input {length}")
        return (self.out_ch, self.out_len(length))

    def matrix(self) -> np.ndarray:
        """Crossbar form: rows indexed by (in_ch, tap), columns by output channel."""
        return self.params["W"].reshape(self.out_ch, -1).T

    def patches(self, x: np.ndarray) -> np.ndarray:
        # (N, C, L) -> (N, Lout, C*k), row order matches matrix()
        win = sliding_window_view(x, self.kernel, axis=2)[:, :, :: self.stride, :]
        return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(x.shape[0], win.shape[2], -1)

    def forward(self, x, train=False, noise=None, rng=None):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv1d expects (N, {self.in_ch}, L), got {x.shape}")
        if x.shape[2] < self.kernel:
            raise ShapeError("input shorter than kernel")
        p = self.patches(x)
        if noise is not None:
            p = quantize_symmetric(p, noise.input_bits)
        w = self.matrix()
        w_max = float(np.max(np.abs(w)))
        if noise is not None and noise.weight_noise_frac > 0:
            w = w + rng.normal(0.0, noise.weight_noise_frac * w_max, w.shape)
        y = p @ w
        if noise is not None and noise.mvm_out_noise_sigma > 0:
            y = y + read_noise(p, w_max, noise.mvm_out_noise_sigma, y.shape, rng)
        y = y + self.params["b"]
        if train:
            self.cache = (p, w, x.shape)
        return y.transpose(0, 2, 1)

    def backward(self, g, input_grad: bool = True):
        p, w, xshape = self.cache
        g = g.transpose(0, 2, 1)  # (N, Lout, out)
        n, l_out, _ = g.shape
        self.grads["W"] = (p.reshape(-1, p.shape[2]).T @ g.reshape(-1, self.out_ch)).T.reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=(0, 1))
        if not input_grad:
            return None
        dp = (g @ w.T).reshape(n, l_out, self.in_ch, self.kernel)
        dx = np.zeros(xshape)
        span = self.stride * (l_out - 1) + 1
        for j in range(self.kernel):
            dx[:, :, j: j + span: self.stride] += dp[:, :, :, j].transpose(0, 2, 1)
        return dx


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        self.params = {"W": np.zeros((self.out_features, self.in_features)), "b": np.zeros(self.out_features)}

    def spec(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}

    @property
    def is_mvm(self):
        return True

    @property
    def fan_in(self):
        return self.in_features

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def matrix(self) -> np.ndarray:
        return self.params["W"].T

    def forward(self, x, train=False, noise=None, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        if noise is not None:
            x = quantize_symmetric(x, noise.input_bits)
        w = self.matrix()
        w_max = float(np.max(np.abs(w)))
        if noise is not None and noise.weight_noise_frac > 0:
            w = w + rng.normal(0.0, noise.weight_noise_frac * w_max, w.shape)
        y = x @ w
        if noise is not None and noise.mvm_out_noise_sigma > 0:
            y = y + read_noise(x, w_max, noise.mvm_out_noise_sigma, y.shape, rng)
        if train:
            self.cache = (x, w)
        return y + self.params["b"]

    def backward(self, g):
        x, w = self.cache
        self.grads["W"] = g.T @ x
        self.grads["b"] = g.sum(axis=0)
        return g @ w.T


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.ch, self.momentum, self.eps = int(ch), momentum, eps
        self.params = {"gamma": np.ones(self.ch), "beta": np.zeros(self.ch)}
        self.running_mean = np.zeros(self.ch)
        self.running_var = np.ones(self.ch)

    def spec(self):
        return {"type": self.kind, "ch": self.ch}

    def out_shape(self, in_shape):
        if in_shape[0] != self.ch:
            raise ShapeError(f"batchnorm expects {self.ch} channels, got {in_shape[0]}")
        return in_shape

    def _axes(self, x):
        return (0, 2) if x.ndim == 3 else (0,)

    def _b(self, v, x):
        return v[None, :, None] if x.ndim == 3 else v[None, :]

    def forward(self, x, train=False, noise=None, rng=None):
        ax = self._axes(x)
        if train:
            mu = x.mean(axis=ax)
            var = x.var(axis=ax)
            n = x.size // self.ch
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * n / max(n - 1, 1)
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._b(mu, x)) * self._b(inv, x)
        if train:
            self.cache = (xhat, inv, ax)
        return xhat * self._b(self.params["gamma"], x) + self._b(self.params["beta"], x)

    def backward(self, g):
        xhat, inv, ax = self.cache
        self.grads["gamma"] = (g * xhat).sum(axis=ax)
        self.grads["beta"] = g.sum(axis=ax)
        gx = g * self._b(self.params["gamma"], g)
        mean_g = gx.mean(axis=ax, keepdims=True)
        mean_gx = (gx * xhat).mean(axis=ax, keepdims=True)
        return (gx - mean_g - xhat * mean_gx) * self._b(inv, g)


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("tanh", "swish", "log_sigmoid", "relu"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def spec(self):
        return {"type": self.kind, "fn": self.fn}

    def forward(self, x, train=False, noise=None, rng=None):
        if self.fn == "tanh":
            y = np.tanh(x)
        elif self.fn == "swish":
            y = swish(x)
        elif self.fn == "relu":
            y = np.maximum(x, 0.0)
        else:
            y = log_sigmoid(x)
        if train:
            self.cache = (x, y)
        return y

    def backward(self, g):
        x, y = self.cache
        if self.fn == "tanh":
            return g * (1 - y * y)
        if self.fn == "relu":
            return g * (x > 0)
        s = sigmoid(x)
        if self.fn == "swish":
            return g * (s + x * s * (1 - s))
        return g * (1 - s)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, width: int):
        super().__init__()
        self.width = int(width)

    def spec(self):
        return {"type": self.kind, "width": self.width}

    def out_shape(self, in_shape):
        c, length = in_shape
        if length < self.width:
            raise ShapeError("pool wider than input")
        return (c, length // self.width)

    def forward(self, x, train=False, noise=None, rng=None):
        n, c, length = x.shape
        lo = length // self.width
        xr = x[:, :, : lo * self.width].reshape(n, c, lo, self.width)
        idx = xr.argmax(axis=3)
        if train:
            self.cache = (idx, x.shape)
        return np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]

    def backward(self, g):
        idx, shape = self.cache
        n, c, length = shape
        lo = g.shape[2]
        dx = np.zeros((n, c, lo, self.width))
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=3)
        out = np.zeros(shape)
        out[:, :, : lo * self.width] = dx.reshape(n, c, lo * self.width)
        return out


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False, noise=None, rng=None):
        if train:
            self.cache = x.shape
        return x.mean(axis=2)

    def backward(self, g):
        shape = self.cache
        return np.broadcast_to(g[:, :, None] / shape[2], shape).copy()


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, noise=None, rng=None):
        if train:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self.cache)


_LAYERS = {
    "conv1d": lambda d: Conv1d(d["in_ch"], d["out_ch"], d["kernel"], d.get("stride", 1)),
    "linear": lambda d: Linear(d["in"], d["out"]),
    "batchnorm": lambda d: BatchNorm(d["ch"]),
    "activation": lambda d: Activation(d["fn"]),
    "maxpool": lambda d: MaxPool(d["width"]),
    "global_avg_pool": lambda d: GlobalAvgPool(),
    "flatten": lambda d: Flatten(),
}


# ---------------------------------------------------------------- architecture


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    input_shape: tuple  # (channels, length)
    head: str = "log_softmax"   # or "log_sigmoid"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(d) for d in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.head not in ("log_softmax", "log_sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "head": self.head,
                "layers": [dict(d) for d in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["layers"]), tuple(d["input_shape"]), d.get("head", "log_softmax"), d.get("name", ""))

    def instantiate(self) -> list[Layer]:
        return [_LAYERS[d["type"]](d) for d in self.layers]

    def shapes(self) -> list[tuple]:
        """Output shape of every layer; raises ShapeError on incompatibility."""
        shape = self.input_shape
        out = []
        for layer in self.instantiate():
            shape = layer.out_shape(shape)
            out.append(shape)
        if self.layers and self.layers[-1]["type"] != "linear":
            raise ShapeError("architecture must end in a linear layer")
        return out

    @property
    def n_classes(self) -> int:
        return int(self.layers[-1]["out"])


def conv(in_ch, out_ch, kernel, stride=1):
    return {"type": "conv1d", "in_ch": in_ch, "out_ch": out_ch, "kernel": kernel, "stride": stride}


def linear(i, o):
    return {"type": "linear", "in": i, "out": o}


def bn(ch):
    return {"type": "batchnorm", "ch": ch}


def act(fn):
    return {"type": "activation", "fn": fn}


def maxpool(w):
    return {"type": "maxpool", "width": w}


GAP = {"type": "global_avg_pool"}
FLATTEN = {"type": "flatten"}


def head_arch(in_ch: int, length: int = 1250, n_classes: int = 10, conv_out: int = 32, kernel: int = 8,
              fn: str = "tanh") -> ArchSpec:
    """One conv layer, activation, global average pooling, linear classifier."""
    return ArchSpec((conv(in_ch, conv_out, kernel), act(fn), GAP, linear(conv_out, n_classes)),
                    (in_ch, length), "log_softmax", f"head-{in_ch}")


def linear_arch(in_ch: int, length: int, n_classes: int = 10) -> ArchSpec:
    return ArchSpec((FLATTEN, linear(in_ch * length, n_classes)), (in_ch, length), "log_sigmoid",
                    f"linear-{in_ch}x{length}")


def ti46_aimc_arch(in_ch: int = 64, length: int = 1250, n_classes: int = 10, fn: str = "tanh") -> ArchSpec:
    """3 conv layers (k=8,3,3) sized to the 512x96 / 288x96 / 288x36 / 36x10 crossbar blocks."""
    return ArchSpec((
        conv(in_ch, 96, 8), bn(96), act(fn), maxpool(4),
        conv(96, 96, 3), bn(96), act(fn), maxpool(4),
        conv(96, 36, 3), bn(36), act(fn), GAP,
        linear(36, n_classes),
    ), (in_ch, length), "log_softmax", f"ti46-aimc-{in_ch}")


def gsc_arch(in_ch: int = 64, length: int = 1984, n_classes: int = 12, fn: str = "swish") -> ArchSpec:
    """4 conv + 2 linear layers for 12-way keyword spotting (~470k parameters, 18 crossbar cores)."""
    return ArchSpec((
        conv(in_ch, 320, 8), bn(320), act(fn), maxpool(4),
        conv(320, 96, 3), bn(96), act(fn), maxpool(4),
        conv(96, 288, 3), bn(288), act(fn), maxpool(4),
        conv(288, 128, 3), bn(128), act(fn), GAP,
        linear(128, 128), act(fn),
        linear(128, n_classes),
    ), (in_ch, length), "log_softmax", "gsc-6layer")


def count_params(arch: ArchSpec) -> int:
    total = 0
    for d in arch.layers:
        t = d["type"]
        if t == "conv1d":
            total += d["in_ch"] * d["out_ch"] * d["kernel"] + d["out_ch"]
        elif t == "linear":
            total += d["in"] * d["out"] + d["out"]
        elif t == "batchnorm":
            total += 2 * d["ch"]
    return total


def count_macs(arch: ArchSpec, input_len: int | None = None) -> int:
    if not arch.layers:
        return 0
    shape = (arch.input_shape[0], input_len if input_len is not None else arch.input_shape[1])
    total = 0
    for layer in arch.instantiate():
        out = layer.out_shape(shape)
        if isinstance(layer, Conv1d):
            total += layer.in_ch * layer.out_ch * layer.kernel * out[1]
        elif isinstance(layer, Linear):
            total += layer.in_features * layer.out_features
        shape = out
    return total


# ---------------------------------------------------------------- model


class CnnModel:
    def __init__(self, arch: ArchSpec, layers: list[Layer], init_seed: int | None = None):
        self.arch = arch
        self.layers = layers
        self.init_seed = init_seed

    def copy(self) -> "CnnModel":
        other = build(self.arch, None)
        other.init_seed = self.init_seed
        other.load_state(self.state())
        return other

    def mvm_layers(self) -> list[tuple[int, Layer]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.is_mvm]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v.copy()
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean.copy()
                out[f"{i}.running_var"] = layer.running_var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, val in state.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            if name in layer.params:
                if layer.params[name].shape != val.shape:
                    raise ShapeError(f"{key}: shape {val.shape} != {layer.params[name].shape}")
                layer.params[name] = np.array(val, dtype=np.float64)
            else:
                setattr(layer, name, np.array(val, dtype=np.float64))

    def n_params(self) -> int:
        return sum(v.size for l in self.layers for v in l.params.values())

    def forward(self, x: np.ndarray, train: bool = False, noise=None, rng=None) -> np.ndarray:
        """Log-probabilities (N, classes)."""
        h = self.logits(x, train, noise, rng)
        return log_softmax(h) if self.arch.head == "log_softmax" else log_sigmoid(h)

    def logits(self, x: np.ndarray, train: bool = False, noise=None, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] != self.arch.input_shape[0]:
            raise ShapeError(f"expected {self.arch.input_shape[0]} input channels, got {x.shape[1]}")
        h = x
        for layer in self.layers:
            h = layer.forward(h, train, noise if layer.is_mvm else None, rng)
        return h

    def backward(self, g_logits: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        g = g_logits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not input_grad and isinstance(layer, Conv1d):
                return layer.backward(g, input_grad=False)
            g = layer.backward(g)
        return g

    def params_and_grads(self):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{i}.{k}", layer.params, layer.grads, k


def _kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def build(arch: ArchSpec, init_seed: int | None = 0) -> CnnModel:
    arch.shapes()
    layers = arch.instantiate()
    rng = np.random.default_rng(init_seed if init_seed is not None else 0)
    for layer in layers:
        if isinstance(layer, (Conv1d, Linear)):
            layer.params["W"] = _kaiming_uniform(rng, layer.params["W"].shape, layer.fan_in)
            bound = 1.0 / math.sqrt(layer.fan_in)
            layer.params["b"] = rng.uniform(-bound, bound, layer.params["b"].shape)
    return CnnModel(arch, layers, init_seed)


# ---------------------------------------------------------------- loss / optimizer


def nll_loss(logits: np.ndarray, y: np.ndarray, head: str) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    log_softmax: categorical likelihood. log_sigmoid: independent per-class
    Bernoulli likelihood (target class on, all others off).
    """
    n = logits.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), y] = 1.0
    if head == "log_softmax":
        lp = log_softmax(logits)
        loss = -lp[np.arange(n), y].mean()
        grad = (np.exp(lp) - onehot) / n
    else:
        loss = -(onehot * log_sigmoid(logits) + (1 - onehot) * log_sigmoid(-logits)).sum(axis=1).mean()
        grad = (sigmoid(logits) - onehot) / n
    return float(loss), grad


class AdamW:
    """Adam with decoupled weight decay: w -= lr*mhat/(sqrt(vhat)+eps) + lr*wd*w."""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: CnnModel) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, params, grads, name in model.params_and_grads():
            g = grads[name]
            w = params[name]
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(w)
                self.v[key] = np.zeros_like(w)
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps) - self.lr * self.wd * w


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: CnnModel
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)


def train(model: CnnModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, x_test=None, y_test=None,
          noise=None, after_batch: Callable[[CnnModel], None] | None = None) -> TrainResult:
    """Minibatch AdamW on the NLL loss. ``model`` is updated in place and returned.

    ``noise`` (weight/output noise, input quantization) is applied to every
    forward pass; ``after_batch`` runs after each optimizer step.
    """
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("training needs at least two classes")
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_seq, noise_seq = ss.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    opt = AdamW(cfg.lr, cfg.weight_decay)
    res = TrainResult(model)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s: s + cfg.batch_size]
            logits = model.logits(x[idx], train=True, noise=noise, rng=noise_rng)
            loss, g = nll_loss(logits, y[idx], model.arch.head)
            if not math.isfinite(loss):
                raise Divergence(epoch, loss)
            model.backward(g, input_grad=False)
            opt.step(model)
            if after_batch is not None:
                after_batch(model)
            total += loss * idx.size
        res.train_loss.append(total / n)
        if x_test is not None:
            res.test_acc.append(evaluate(model, x_test, y_test).accuracy)
    return res


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows true class, columns predicted

    def per_class_tpr(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), rows, out=np.zeros(rows.shape), where=rows > 0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def score(pred_logits: np.ndarray, y: np.ndarray, n_classes: int) -> EvalResult:
    pred = np.argmax(pred_logits, axis=1)
    cm = confusion_matrix(y, pred, n_classes)
    return EvalResult(float(np.trace(cm) / max(cm.sum(), 1)), cm)


def evaluate(model: CnnModel, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> EvalResult:
    logits = np.concatenate([model.logits(x[s: s + batch_size]) for s in range(0, x.shape[0], batch_size)])
    return score(logits, y, model.arch.n_classes)


# ---------------------------------------------------------------- checkpoint io


def _write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos: pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def save_checkpoint(model: CnnModel, stem, extra: dict | None = None) -> tuple[Path, Path]:
    """Writes <stem>.json (arch, seed, metadata) and <stem>.bin (float64 tensors)."""
    stem = Path(stem)
    manifest = {"schema": "inmateria.checkpoint/1", "arch": model.arch.to_dict(), "init_seed": model.init_seed,
                "weights": stem.name + ".bin"}
    if extra:
        manifest.update(extra)
    jpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    _write_tensors(bpath, model.state())
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return jpath, bpath


def load_checkpoint(stem) -> tuple[CnnModel, dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    model = build(ArchSpec.from_dict(manifest["arch"]), manifest.get("init_seed"))
    model.init_seed = manifest.get("init_seed")
    model.load_state(_read_tensors(stem.with_suffix(".bin")))
    return model, manifest
