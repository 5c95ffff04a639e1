"""Dense feedforward networks with exact input and parameter gradients.

Only the fixed dense-chain case is supported: each layer is ``act(W @ a + b)``.
Everything runs in float64. Inputs may be a single vector ``(in,)`` or a batch
``(n, in)``; outputs follow the same rank.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
LOSS_KINDS = ("cross_entropy", "mse", "mae", "huber", "dl", "gdl")
DIRECTIONS = ("away", "toward")

FORMAT_VERSION = 1


class StructureError(ValueError):
    """Raised on dimension mismatches and malformed network/loss definitions."""


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, kind):
    if kind == "relu":
        # subgradient 0 at the kink
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if self.activation not in ACTIVATIONS:
            raise StructureError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[0],):
            raise StructureError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise StructureError("non-finite layer parameters")


class DenseNetwork:
    """A chain of dense layers.

    The network is treated as a value: evaluation never mutates it, and
    training code works on a :meth:`copy`.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise StructureError("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].weight.shape[0] != layers[k + 1].weight.shape[1]:
                raise StructureError(
                    f"layer {k} outputs {layers[k].weight.shape[0]} but layer {k + 1} "
                    f"expects {layers[k + 1].weight.shape[1]}"
                )
        self.layers = list(layers)

    @classmethod
    def initialize(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "DenseNetwork":
        """Glorot-uniform weights and zero biases for the given layer widths."""
        if len(widths) < 2:
            raise StructureError("need at least input and output widths")
        layers = []
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            act = output_activation if k == len(widths) - 2 else hidden_activation
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.input_width] + [layer.weight.shape[0] for layer in self.layers]

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_width:
            raise StructureError(
                f"input of shape {x.shape} does not match input width {self.input_width}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        a = x
        for layer in self.layers:
            a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
        return a

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass keeping (layer input, pre-activation, activation) per layer."""
        x = self._check_input(x)
        a = np.atleast_2d(x)
        cache = []
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            out = _activate(z, layer.activation)
            cache.append((a, z, out))
            a = out
        return (a if x.ndim == 2 else a[0]), cache

    def backward(self, cache, grad_out):
        """Reverse-mode pass.

        ``grad_out`` is dL/d(output) with the same leading shape as the forward
        input. Returns ``(grad_x, [(dW, db), ...])`` where parameter gradients
        are summed over the batch.
        """
        squeeze = np.ndim(grad_out) == 1
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            a_in, z, out = cache[k]
            g = g * _activation_grad(z, out, layer.activation)
            grads[k] = (g.T @ a_in, g.sum(axis=0))
            g = g @ layer.weight
        return (g[0] if squeeze else g), grads

    def vjp(self, x, grad_out) -> np.ndarray:
        """dL/dx given dL/d(output) at ``x``."""
        _, cache = self.forward_cache(x)
        gx, _ = self.backward(cache, grad_out)
        return gx

    # -- parameter handling -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def head(self, rows: Sequence[int]) -> "DenseNetwork":
        """Copy of the network whose output keeps only the given output rows."""
        rows = list(rows)
        net = self.copy()
        last = net.layers[-1]
        net.layers[-1] = Layer(last.weight[rows], last.bias[rows], last.activation)
        return net

    def to_dict(self) -> dict:
        return {
            "format": "dense-network",
            "version": FORMAT_VERSION,
            "widths": self.widths,
            "layers": [
                {
                    "in": int(l.weight.shape[1]),
                    "out": int(l.weight.shape[0]),
                    "activation": l.activation,
                    # row-major; repr of float64 round-trips exactly
                    "weight": [float(v) for v in l.weight.ravel()],
                    "bias": [float(v) for v in l.bias],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNetwork":
        if data.get("format") != "dense-network":
            raise StructureError("not a dense-network document")
        layers = []
        for spec in data["layers"]:
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["out"], spec["in"])
            layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), spec["activation"]))
        return cls(layers)

    def __eq__(self, other):
        if not isinstance(other, DenseNetwork) or len(self.layers) != len(other.layers):
            return NotImplemented if not isinstance(other, DenseNetwork) else False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        acts = ",".join(l.activation for l in self.layers)
        return f"DenseNetwork(widths={self.widths}, activations=[{acts}])"


def save_network(net: DenseNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1))


def load_network(path) -> DenseNetwork:
    return DenseNetwork.from_dict(json.loads(Path(path).read_text()))


# -- losses -------------------------------------------------------------------


@dataclass(frozen=True)
class TargetGroup:
    """Label indices whose best logit competes against the original label."""

    members: tuple[int, ...]

    def __init__(self, members):
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in members)))
        if not self.members:
            raise StructureError("target group must not be empty")

    def validate(self, output_width: int, original: int) -> None:
        if any(m < 0 or m >= output_width for m in self.members):
            raise StructureError(f"target group {self.members} outside 0..{output_width - 1}")
        if original in self.members:
            raise StructureError(f"target group contains the original label {original}")


@dataclass(frozen=True)
class LossSpec:
    """Which loss to evaluate and which way an attacker pushes it.

    ``label`` is the original label (away) or the target label (toward) for
    the classification losses. ``reference`` is the stored output the
    regression losses compare against. ``tie_sign`` is the MAE subgradient
    used at a zero residual when pushing away, so an ascent step can leave
    the reference in a chosen direction.
    """

    kind: str
    direction: str = "away"
    label: int | None = None
    group: TargetGroup | None = None
    reference: np.ndarray | None = field(default=None, compare=False)
    delta: float = 1.0
    tie_sign: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise StructureError(f"unknown loss kind {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise StructureError(f"unknown direction {self.direction!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise StructureError("huber delta must be positive")
        if self.kind == "gdl" and self.group is None:
            raise StructureError("gdl needs a target group")

    def validate(self, output_width: int) -> None:
        if self.kind in ("dl", "gdl") and output_width < 2:
            raise StructureError(f"{self.kind} needs at least two outputs")
        if self.kind in ("dl", "gdl", "cross_entropy"):
            if self.label is None or not 0 <= self.label < output_width:
                raise StructureError(f"label {self.label} out of range for {output_width} outputs")
        if self.kind == "gdl":
            self.group.validate(output_width, self.label)
        if self.kind in ("mse", "mae", "huber"):
            if self.reference is None or np.size(self.reference) != output_width:
                raise StructureError("regression loss needs a reference of the output width")

    @property
    def ascent_sign(self) -> float:
        """+1 if an attacker should increase this loss, -1 if decrease it."""
        margin = self.kind in ("dl", "gdl")
        away = self.direction == "away"
        return -1.0 if margin == away else 1.0


def _first_argmax(values, mask):
    v = np.where(mask, values, -np.inf)
    return np.argmax(v, axis=-1)  # argmax breaks ties at the lowest index


def loss_and_grad(z, spec: LossSpec, targets=None):
    """Per-sample loss values and dL/dz for a batch of outputs ``z`` (n, k).

    ``targets`` overrides ``spec.label`` (int array) or ``spec.reference``
    ((n, k) array) per sample.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, k = z.shape
    rows = np.arange(n)
    kind = spec.kind
    if kind in ("cross_entropy", "dl", "gdl"):
        labels = np.full(n, spec.label) if targets is None else np.asarray(targets, dtype=int)
        if np.any((labels < 0) | (labels >= k)):
            raise StructureError(f"label out of range for {k} outputs")
        if kind == "cross_entropy":
            shifted = z - z.max(axis=1, keepdims=True)
            logsum = np.log(np.exp(shifted).sum(axis=1))
            loss = logsum - shifted[rows, labels]
            grad = np.exp(shifted - logsum[:, None])
            grad[rows, labels] -= 1.0
            return loss, grad
        if kind == "dl":
            mask = np.ones((n, k), dtype=bool)
            mask[rows, labels] = False
        else:
            mask = np.zeros((n, k), dtype=bool)
            mask[:, list(spec.group.members)] = True
            mask[rows, labels] = False
        best = _first_argmax(z, mask)
        loss = z[rows, labels] - z[rows, best]
        grad = np.zeros_like(z)
        grad[rows, labels] += 1.0
        grad[rows, best] -= 1.0
        return loss, grad

    ref = np.asarray(spec.reference if targets is None else targets, dtype=np.float64)
    ref = np.broadcast_to(ref.reshape(-1, k), z.shape)
    r = z - ref
    if kind == "mse":
        return (r * r).mean(axis=1), 2.0 * r / k
    if kind == "mae":
        if spec.direction == "away":
            s = np.where(r > 0.0, 1.0, np.where(r < 0.0, -1.0, spec.tie_sign))
        else:
            s = np.sign(r)
        return np.abs(r).mean(axis=1), s / k
    # huber
    d = spec.delta
    quad = np.abs(r) <= d
    loss = np.where(quad, 0.5 * r * r, d * (np.abs(r) - 0.5 * d)).mean(axis=1)
    grad = np.where(quad, r, d * np.sign(r)) / k
    return loss, grad


def loss_value(net, x, spec: LossSpec) -> float:
    """Loss of a single input under ``spec``."""
    spec.validate(net.output_width)
    loss, _ = loss_and_grad(net.forward(x), spec)
    return float(loss[0])


def input_gradient(net, x, spec: LossSpec) -> np.ndarray:
    """dL/dx for a single input, by reverse-mode accumulation."""
    spec.validate(net.output_width)
    x = np.asarray(x, dtype=np.float64)
    _, g = loss_and_grad(net.forward(x), spec)
    return net.vjp(x, g[0])


def parameter_gradient(net: DenseNetwork, xs, spec: LossSpec, targets=None):
    """Mean loss and batch-mean gradient for every (weight, bias) pair."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise StructureError("empty batch")
    if targets is not None and len(targets) != xs.shape[0]:
        raise StructureError("targets do not match batch size")
    out, cache = net.forward_cache(xs)
    loss, g = loss_and_grad(out, spec, targets)
    n = xs.shape[0]
    _, grads = net.backward(cache, g / n)
    return float(loss.mean()), grads


class Adam:
    """Adam over a network's parameter list, updating in place."""

    def __init__(self, net: DenseNetwork, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.net = net
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.parameters()]
        self.v = [np.zeros_like(p) for p in net.parameters()]

    def step(self, layer_grads) -> None:
        flat = [g for pair in layer_grads for g in pair]
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in flat))
            if norm > self.max_grad_norm:
                flat = [g * (self.max_grad_norm / norm) for g in flat]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.net.parameters(), flat, self.m, self.v):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
