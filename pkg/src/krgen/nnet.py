"""Small fully connected ReLU network with hand-written backpropagation.

Parameters live in one flat float64 vector. Each layer contributes its
weight matrix (``out x in``, row-major) followed by its bias, in layer order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, TooLarge

LOSS_KINDS = ("mse", "softmax_cross_entropy")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidInput(f"unknown loss {self.kind!r}")


MSE = LossSpec("mse")
CROSS_ENTROPY = LossSpec("softmax_cross_entropy")


@dataclass
class MlpModel:
    layer_sizes: tuple
    params: np.ndarray = field(repr=False, default=None)
    bias: bool = True

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise InvalidInput("need at least input and output sizes, all positive")
        if self.params is None:
            self.params = np.zeros(self.param_count)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.param_count,):
            raise InvalidInput(f"expected {self.param_count} parameters, got {self.params.shape}")

    @property
    def shapes(self):
        out = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append((fan_out, fan_in))
            if self.bias:
                out.append((fan_out,))
        return out

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def unflatten(self, flat=None):
        """Split a flat vector into per-layer ``(W, b)`` views (``b`` may be None)."""
        flat = self.params if flat is None else np.asarray(flat, dtype=np.float64)
        if flat.shape[-1] != self.param_count:
            raise InvalidInput("flat vector has the wrong length")
        layers = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = flat[..., pos : pos + fan_in * fan_out].reshape(flat.shape[:-1] + (fan_out, fan_in))
            pos += fan_in * fan_out
            b = None
            if self.bias:
                b = flat[..., pos : pos + fan_out]
                pos += fan_out
            layers.append((w, b))
        return layers

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for w, b in layers:
            parts.append(np.asarray(w, dtype=np.float64).reshape(-1))
            if self.bias:
                parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
        return np.concatenate(parts)

    def with_params(self, flat) -> "MlpModel":
        return MlpModel(self.layer_sizes, np.array(flat, dtype=np.float64), self.bias)


def init_mlp(layer_sizes, rng: np.random.Generator, bias: bool = True) -> MlpModel:
    """Scaled-uniform initialization, every entry in ``±1/sqrt(fan_in)``."""
    model = MlpModel(layer_sizes, bias=bias)
    layers = []
    for fan_in, fan_out in zip(model.layer_sizes[:-1], model.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out) if bias else None
        layers.append((w, b))
    model.params = model.flatten(layers)
    return model


def layer_groups(model: MlpModel) -> list[np.ndarray]:
    """Contiguous index ranges, one per weight tensor and one per bias tensor."""
    groups = []
    pos = 0
    for shape in model.shapes:
        size = int(np.prod(shape))
        groups.append(np.arange(pos, pos + size))
        pos += size
    return groups


def _check_batch(model, inputs, targets, loss):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise InvalidInput(f"inputs must have shape (b, {model.layer_sizes[0]})")
    if x.shape[0] == 0:
        raise InvalidInput("empty batch")
    k = model.layer_sizes[-1]
    if loss.kind == "mse":
        y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
        if y.shape[1] != k:
            raise InvalidInput(f"targets must have {k} columns")
    else:
        y = np.asarray(targets).reshape(-1)
        if y.shape[0] != x.shape[0] or not np.issubdtype(y.dtype, np.integer):
            raise InvalidInput("classification targets must be one integer label per sample")
        if y.size and (y.min() < 0 or y.max() >= k):
            raise InvalidInput("label outside the output range")
    return x, y


def _forward(model, x, flat=None):
    acts = [x]
    pre = []
    a = x
    layers = model.unflatten(flat)
    for i, (w, b) in enumerate(layers):
        z = a @ w.T
        if b is not None:
            z = z + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(a)
    return acts, pre


def _loss_and_delta(out, y, loss):
    """Per-sample losses and d(loss_i)/d(output_i)."""
    if loss.kind == "mse":
        r = out - y
        return np.sum(r * r, axis=1), 2.0 * r
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(out.shape[0])
    losses = logz - shifted[rows, y]
    probs = np.exp(shifted - logz[:, None])
    probs[rows, y] -= 1.0
    return losses, probs


def forward(model, inputs, targets, loss: LossSpec = MSE, flat=None):
    """Per-sample losses and their mean."""
    x, y = _check_batch(model, inputs, targets, loss)
    acts, _ = _forward(model, x, flat)
    losses, _ = _loss_and_delta(acts[-1], y, loss)
    return losses, float(np.mean(losses))


def predict(model, inputs, flat=None):
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    return _forward(model, x, flat)[0][-1]


def _backward(model, acts, pre, delta, flat, per_sample):
    layers = model.unflatten(flat)
    b = delta.shape[0]
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_prev = acts[i]
        if per_sample:
            gw = (delta[:, :, None] * a_prev[:, None, :]).reshape(b, -1)
            gb = delta
        else:
            gw = (delta.T @ a_prev).reshape(-1) / b
            gb = delta.mean(axis=0)
        grads.append((gw, gb if model.bias else None))
        if i > 0:
            # relu'(0) := 0
            delta = (delta @ w) * (pre[i - 1] > 0.0)
    grads.reverse()
    parts = []
    for gw, gb in grads:
        parts.append(gw)
        if gb is not None:
            parts.append(gb)
    return np.concatenate(parts, axis=-1)


def per_sample_gradients(model, inputs, targets, loss: LossSpec = MSE, flat=None, return_losses=False):
    """Gradient of each sample's loss, one flat row per sample (flatten order)."""
    x, y = _check_batch(model, inputs, targets, loss)
    acts, pre = _forward(model, x, flat)
    losses, delta = _loss_and_delta(acts[-1], y, loss)
    g = _backward(model, acts, pre, delta, flat, per_sample=True)
    return (g, losses) if return_losses else g


def mean_gradient(model, inputs, targets, loss: LossSpec = MSE, flat=None):
    """Gradient of the mean loss, without materializing per-sample rows."""
    x, y = _check_batch(model, inputs, targets, loss)
    acts, pre = _forward(model, x, flat)
    _, delta = _loss_and_delta(acts[-1], y, loss)
    return _backward(model, acts, pre, delta, flat, per_sample=False)


def hutchinson_trace(grad_fn, w, probes: int, rng: np.random.Generator) -> float:
    """Hutchinson estimate of tr(H) with Rademacher probes.

    Hessian-vector products come from central differences of ``grad_fn``
    along the unit probe direction, displaced by ``1e-4 * (1 + ||w||)``, and
    rescaled by ``||v||``.
    """
    if probes < 1:
        raise InvalidInput("probes must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    eps = 1e-4 * (1.0 + np.linalg.norm(w))
    total = 0.0
    for _ in range(probes):
        v = rng.integers(0, 2, size=w.shape).astype(np.float64) * 2.0 - 1.0
        norm = np.sqrt(v.size)
        u = v / norm
        hu = (grad_fn(w + eps * u) - grad_fn(w - eps * u)) / (2.0 * eps)
        total += float(v @ hu) * norm
    return total / probes


def fd_trace(loss_fn, w, max_dim: int = 2000) -> float:
    """Sum of second central differences of ``loss_fn`` along each coordinate."""
    w = np.asarray(w, dtype=np.float64)
    if w.size > max_dim:
        raise TooLarge(f"{w.size} parameters exceeds the limit of {max_dim}")
    f0 = loss_fn(w)
    total = 0.0
    for i in range(w.size):
        h = 1e-4 * (1.0 + abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        total += (loss_fn(w + e) - 2.0 * f0 + loss_fn(w - e)) / (h * h)
    return total


def hessian_trace_hutchinson(model, data, loss: LossSpec, probes: int, seed) -> float:
    """Stochastic estimate of the trace of the Hessian of the mean loss over ``data``."""
    x, y = data
    rng = np.random.default_rng(seed)
    return hutchinson_trace(lambda w: mean_gradient(model, x, y, loss, flat=w), model.params, probes, rng)


def hessian_trace_exact_fd(model, data, loss: LossSpec) -> float:
    x, y = data
    return fd_trace(lambda w: forward(model, x, y, loss, flat=w)[1], model.params)
