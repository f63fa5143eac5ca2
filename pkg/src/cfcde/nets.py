"""Feed-forward networks, SGD, and checkpoint serialization.

Networks are rectifier MLPs in double precision with optional inverted
dropout on hidden layers; gradients come from the autodiff tape. The
optimizer is plain SGD with early-stopping bookkeeping kept by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import jsonlines

CHECKPOINT_SCHEMA = "cfcde-checkpoint-1"


class TrainingError(RuntimeError):
    """Non-finite loss or gradients; surfaced with context by the caller."""


@dataclass
class OptState:
    """SGD settings plus early-stopping bookkeeping for one training phase."""

    lr: float = 1e-4
    epoch: int = 0
    best_val: float = np.inf
    epochs_since_best: int = 0
    patience: int = 5

    def update(self, val_loss: float) -> bool:
        """Record a validation result; True if it is a new best."""
        self.epoch += 1
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.epochs_since_best = 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.patience


class Mlp:
    """Affine-rectifier stack; output activation 'identity', 'tanh' or 'softmax'."""

    def __init__(self, sizes, out_activation="identity", dropout_rate=0.0,
                 rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        if out_activation not in ("identity", "tanh", "softmax"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.out_activation = out_activation
        self.dropout_rate = dropout_rate
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(ad.Var(rng.uniform(-bound, bound, (fan_in, fan_out))))
            self.biases.append(ad.Var(np.zeros(fan_out)))

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def parameters(self):
        return self.weights + self.biases

    def named_parameters(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def sample_masks(self, rng: np.random.Generator):
        """Inverted-dropout masks, one per hidden layer; None when disabled."""
        if self.dropout_rate == 0.0 or self.n_hidden == 0:
            return None
        keep = 1.0 - self.dropout_rate
        return [(rng.random(self.sizes[i + 1]) < keep) / keep
                for i in range(self.n_hidden)]

    def __call__(self, x, masks=None, frozen=False):
        """Forward pass; x is (batch, d_in), Var or ndarray.

        With frozen=True the weights enter as plain arrays, so no tape is
        recorded and the result is a plain ndarray whenever x is one.
        """
        if ad.value(x).ndim != 2:
            raise ValueError("Mlp input must be 2-d (batch, d_in)")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = w.data, b.data
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
                if masks is not None:
                    h = ad.mul(h, masks[i])
        if self.out_activation == "tanh":
            h = ad.tanh(h)
        elif self.out_activation == "softmax":
            h = ad.softmax(h)
        return h


def sgd_step(params, lr: float):
    """In-place p <- p - lr * grad for every parameter with a gradient."""
    for p in params:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise TrainingError("non-finite gradient encountered")
        p.data = p.data - lr * p.grad


def zero_grads(params):
    for p in params:
        p.grad = None


def save_checkpoint(path, named_arrays, meta=None):
    """Versioned text serialization of named tensors with shapes."""
    lines = [jsonlines.dumps({"schema": CHECKPOINT_SCHEMA, "meta": meta or {}})]
    for name in named_arrays:
        arr = np.asarray(ad.value(named_arrays[name]), dtype=np.float64)
        lines.append(jsonlines.dumps(
            {"name": name, "shape": list(arr.shape), "data": arr.ravel()}))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns (meta, {name: ndarray}); rejects unknown schema versions."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise jsonlines.FormatError("empty checkpoint file", 1)
    header = jsonlines.loads(lines[0], 1)
    if not isinstance(header, dict) or header.get("schema") != CHECKPOINT_SCHEMA:
        raise jsonlines.FormatError(
            f"expected checkpoint schema {CHECKPOINT_SCHEMA!r}, got {header.get('schema') if isinstance(header, dict) else header!r}", 1)
    tensors = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        obj = jsonlines.loads(line, i)
        try:
            tensors[obj["name"]] = np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise jsonlines.FormatError(f"bad tensor record ({exc})", i) from exc
    return header.get("meta", {}), tensors
