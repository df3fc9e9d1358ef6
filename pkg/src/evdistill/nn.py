"""Small dense networks with exact backprop, frozen weights and LoRA adapters.

Everything runs in float64. A ``Network`` is a stack of ``DenseLayer``s; any
layer can carry a ``LoraAdapter``, in which case the forward pass uses
``W + scale * B @ A``. Only parameters flagged trainable (adapter factors and
any layer weights/biases explicitly unfrozen) ever receive gradients.
"""

import copy
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from evdistill.errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("identity", "relu", "tanh", "softplus")

NETWORK_FORMAT = "evdistill-network"
CHECKPOINT_FORMAT = "evdistill-checkpoint"
FORMAT_VERSION = 1


def _activate(name, pre):
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    if name == "softplus":
        return np.maximum(pre, 0.0) + np.log1p(np.exp(-np.abs(pre)))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, pre, out):
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    if name == "softplus":
        e = np.exp(-np.abs(pre))
        return np.where(pre >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"
    train_W: bool = False
    train_b: bool = False

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64, ndmin=1)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias shape {self.b.shape} does not match W {self.W.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng, trainable=True):
        # He/Glorot-style scaling keeps pre-activations O(1)
        gain = 2.0 if activation == "relu" else 1.0
        W = rng.normal(0.0, np.sqrt(gain / in_dim), size=(out_dim, in_dim))
        return cls(W, np.zeros(out_dim), activation, trainable, trainable)


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, in_dim)
    B: np.ndarray  # (out_dim, r)
    scale: float = 1.0

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64, ndmin=2)
        self.B = np.array(self.B, dtype=np.float64, ndmin=2)
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(f"LoRA rank mismatch: A {self.A.shape}, B {self.B.shape}")
        if self.scale < 0:
            raise ValueError("LoRA scale must be nonnegative")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, rank, rng, scale=1.0):
        """A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0, so the update starts at zero."""
        if not 0 < rank < min(in_dim, out_dim):
            raise ValueError(f"LoRA rank must satisfy 0 < r < min({in_dim}, {out_dim}), got {rank}")
        bound = 1.0 / np.sqrt(in_dim)
        A = rng.uniform(-bound, bound, size=(rank, in_dim))
        return cls(A, np.zeros((out_dim, rank)), scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


class Network:
    """Feed-forward stack mapping feature vectors to K logits."""

    def __init__(self, layers: List[DenseLayer], adapters: Optional[Dict[int, LoraAdapter]] = None):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {layers[i].in_dim} inputs, layer {i - 1} emits {layers[i - 1].out_dim}"
                )
        self.layers = list(layers)
        self.adapters: Dict[int, LoraAdapter] = {}
        for idx, ad in (adapters or {}).items():
            self.attach(int(idx), ad)
        self._cache = None

    @classmethod
    def mlp(cls, sizes, rng, hidden_activation="relu", trainable=True):
        """Fully connected net; the last layer is linear (it emits logits)."""
        layers = []
        for i in range(len(sizes) - 1):
            act = "identity" if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.init(sizes[i], sizes[i + 1], act, rng, trainable))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def attach(self, idx: int, adapter: LoraAdapter) -> None:
        layer = self.layers[idx]
        if adapter.A.shape[1] != layer.in_dim or adapter.B.shape[0] != layer.out_dim:
            raise ShapeError(f"adapter shape does not fit layer {idx} ({layer.out_dim}x{layer.in_dim})")
        self.adapters[idx] = adapter

    def add_lora(self, rank: int, rng, layers=None, scale: float = 1.0) -> None:
        """Attach fresh adapters (all layers by default) and freeze base weights."""
        for idx in range(len(self.layers)) if layers is None else layers:
            layer = self.layers[idx]
            self.attach(idx, LoraAdapter.init(layer.in_dim, layer.out_dim, rank, rng, scale))
        for layer in self.layers:
            layer.train_W = False
            layer.train_b = False

    def effective_weight(self, idx: int) -> np.ndarray:
        W = self.layers[idx].W
        ad = self.adapters.get(idx)
        return W if ad is None else W + ad.delta()

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        cache = []
        for idx, layer in enumerate(self.layers):
            W = self.effective_weight(idx)
            pre = a @ W.T + layer.b
            out = _activate(layer.activation, pre)
            cache.append((a, pre, out, W))
            a = out
        self._cache = cache
        return a[0] if single else a

    __call__ = forward

    def backward(self, grad_logits) -> Dict[str, np.ndarray]:
        """Gradients for every trainable parameter given dLoss/dlogits.

        ``grad_logits`` must have the shape returned by the preceding
        ``forward`` call; batch reduction is the caller's responsibility.
        """
        if self._cache is None:
            raise StateError("backward() called without a cached forward pass")
        g = np.asarray(grad_logits, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != self._cache[-1][2].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match logits {self._cache[-1][2].shape}")
        grads: Dict[str, np.ndarray] = {}
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            a_in, pre, out, W = self._cache[idx]
            g_pre = g * _activation_grad(layer.activation, pre, out)
            ad = self.adapters.get(idx)
            if layer.train_W or ad is not None:
                gW = g_pre.T @ a_in
                if layer.train_W:
                    grads[f"layers.{idx}.W"] = gW
                if ad is not None:
                    grads[f"adapters.{idx}.A"] = ad.scale * (ad.B.T @ gW)
                    grads[f"adapters.{idx}.B"] = ad.scale * (gW @ ad.A.T)
            if layer.train_b:
                grads[f"layers.{idx}.b"] = g_pre.sum(axis=0)
            if idx > 0:
                g = g_pre @ W
        return {k: grads[k] for k in self.parameters()}

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays (live references) in a fixed order."""
        params: Dict[str, np.ndarray] = {}
        for idx, layer in enumerate(self.layers):
            if layer.train_W:
                params[f"layers.{idx}.W"] = layer.W
            if layer.train_b:
                params[f"layers.{idx}.b"] = layer.b
        for idx in sorted(self.adapters):
            params[f"adapters.{idx}.A"] = self.adapters[idx].A
            params[f"adapters.{idx}.B"] = self.adapters[idx].B
        return params

    def n_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def get_flat(self) -> np.ndarray:
        params = self.parameters()
        if not params:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in params.values()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_trainable(),):
            raise ShapeError(f"expected {self.n_trainable()} parameters, got {flat.shape}")
        pos = 0
        for p in self.parameters().values():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def architecture(self) -> dict:
        return {
            "layers": [
                {
                    "in": layer.in_dim,
                    "out": layer.out_dim,
                    "activation": layer.activation,
                    "train_W": layer.train_W,
                    "train_b": layer.train_b,
                }
                for layer in self.layers
            ],
            "adapters": {str(i): self.adapters[i].rank for i in sorted(self.adapters)},
        }

    def clone(self) -> "Network":
        net = copy.deepcopy(self)
        net._cache = None
        return net

    def to_dict(self) -> dict:
        return {
            "format": NETWORK_FORMAT,
            "version": FORMAT_VERSION,
            "layers": [
                {
                    "W": layer.W.tolist(),
                    "b": layer.b.tolist(),
                    "activation": layer.activation,
                    "train_W": layer.train_W,
                    "train_b": layer.train_b,
                }
                for layer in self.layers
            ],
            "adapters": {
                str(i): {"A": ad.A.tolist(), "B": ad.B.tolist(), "scale": ad.scale}
                for i, ad in sorted(self.adapters.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("format") != NETWORK_FORMAT or d.get("version") != FORMAT_VERSION:
            raise ShapeError(f"unsupported network file (format={d.get('format')}, version={d.get('version')})")
        layers = [DenseLayer(l["W"], l["b"], l["activation"], l["train_W"], l["train_b"]) for l in d["layers"]]
        adapters = {int(i): LoraAdapter(a["A"], a["B"], a["scale"]) for i, a in d["adapters"].items()}
        return cls(layers, adapters)


class GradientDescent:
    """Plain ``p -= lr * g``."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, net: Network, grads: Dict[str, np.ndarray]) -> Network:
        params = net.parameters()
        _check_finite(grads)
        for name, g in grads.items():
            params[name] -= self.lr * g
        return net


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, net: Network, grads: Dict[str, np.ndarray]) -> Network:
        params = net.parameters()
        _check_finite(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return net


def sgd_step(net: Network, grads: Dict[str, np.ndarray], optimizer) -> Network:
    return optimizer.step(net, grads)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient component in {name}")


@dataclass
class Checkpoint:
    epoch: int
    params: np.ndarray
    monitor: float
    architecture: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": FORMAT_VERSION,
            "epoch": self.epoch,
            "monitor": self.monitor,
            "architecture": self.architecture,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != FORMAT_VERSION:
            raise ShapeError(f"unsupported checkpoint (format={d.get('format')}, version={d.get('version')})")
        return cls(int(d["epoch"]), np.asarray(d["params"], dtype=np.float64), float(d["monitor"]), d["architecture"])


def save_checkpoint(net: Network, epoch: int = 0, monitor: float = float("nan")) -> Checkpoint:
    return Checkpoint(epoch, net.get_flat().copy(), float(monitor), net.architecture())


def restore_checkpoint(net: Network, ckpt: Checkpoint) -> Network:
    if ckpt.architecture != net.architecture():
        raise ShapeError("checkpoint architecture does not match the network")
    net.set_flat(ckpt.params)
    net._cache = None
    return net


def atomic_write_text(path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    return write_json(path, ckpt.to_dict())


def read_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_dict(read_json(path))


def save_network(path, net: Network) -> Path:
    return write_json(path, net.to_dict())


def load_network(path) -> Network:
    return Network.from_dict(read_json(path))
