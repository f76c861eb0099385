"""A small numpy network core: 1-D conv, max-pool, ReLU, linear, softmax.

Parameters live outside the layers in a ``{"layer.weight": array, ...}``
dict so that they can be copied, averaged and serialised as plain values.
Every layer takes a leading batch dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeMismatch

Params = dict  # ordered name -> np.ndarray


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")
    return arr


class Layer:
    name: str

    def param_shapes(self) -> dict:
        return {}

    def fan(self) -> tuple[int, int]:
        return (1, 1)

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, params: Params, x):
        raise NotImplementedError

    def backward(self, params: Params, cache, dy):
        """Return (grad wrt input, {param name: grad})."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv1d(Layer):
    """Valid-padding, stride-1 convolution over (batch, channels, length)."""

    def __init__(self, name, in_ch, out_ch, kernel):
        self.name, self.in_ch, self.out_ch, self.kernel = name, in_ch, out_ch, kernel

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_ch, self.in_ch, self.kernel),
                f"{self.name}.bias": (self.out_ch,)}

    def fan(self):
        return self.in_ch * self.kernel, self.out_ch * self.kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != self.in_ch or in_shape[1] < self.kernel:
            raise ShapeMismatch(f"{self.name}: expected ({self.in_ch}, >= {self.kernel}), got {in_shape}")
        return (self.out_ch, in_shape[1] - self.kernel + 1)

    def forward(self, params, x):
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        batch, ch, length = x.shape
        l_out = length - self.kernel + 1
        # (B, C, Lout, k) -> (B*Lout, C*k)
        cols = sliding_window_view(x, self.kernel, axis=2).transpose(0, 2, 1, 3).reshape(batch * l_out, ch * self.kernel)
        y = cols @ w.reshape(self.out_ch, -1).T + b
        return y.reshape(batch, l_out, self.out_ch).transpose(0, 2, 1), (cols, x.shape)

    def backward(self, params, cache, dy):
        cols, (batch, ch, length) = cache
        w = params[f"{self.name}.weight"]
        l_out = length - self.kernel + 1
        dy2 = dy.transpose(0, 2, 1).reshape(batch * l_out, self.out_ch)
        grads = {f"{self.name}.weight": (dy2.T @ cols).reshape(w.shape),
                 f"{self.name}.bias": dy2.sum(axis=0)}
        dcols = (dy2 @ w.reshape(self.out_ch, -1)).reshape(batch, l_out, ch, self.kernel)
        dx = np.zeros((batch, ch, length), dtype=dy.dtype)
        for j in range(self.kernel):
            dx[:, :, j:j + l_out] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx, grads


class MaxPool1d(Layer):
    """Non-overlapping max pooling; a trailing partial window is dropped."""

    def __init__(self, name, window=2):
        self.name, self.window = name, window

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] < self.window:
            raise ShapeMismatch(f"{self.name}: cannot pool shape {in_shape} with window {self.window}")
        return (in_shape[0], in_shape[1] // self.window)

    def forward(self, params, x):
        batch, ch, length = x.shape
        l_out = length // self.window
        xr = x[:, :, :l_out * self.window].reshape(batch, ch, l_out, self.window)
        idx = xr.argmax(axis=3)  # first maximum wins ties
        y = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
        return y, (idx, x.shape)

    def backward(self, params, cache, dy):
        idx, (batch, ch, length) = cache
        l_out = idx.shape[2]
        dxr = np.zeros((batch, ch, l_out, self.window), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=3)
        dx = np.zeros((batch, ch, length), dtype=dy.dtype)
        dx[:, :, :l_out * self.window] = dxr.reshape(batch, ch, -1)
        return dx, {}


class ReLU(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy):
        return dy * cache, {}


class Flatten(Layer):
    def __init__(self, name):
        self.name = name

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, params, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, params, cache, dy):
        return dy.reshape(cache), {}


class Linear(Layer):
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def param_shapes(self):
        return {f"{self.name}.weight": (self.n_out, self.n_in), f"{self.name}.bias": (self.n_out,)}

    def fan(self):
        return self.n_in, self.n_out

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeMismatch(f"{self.name}: expected ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, params, x):
        return x @ params[f"{self.name}.weight"].T + params[f"{self.name}.bias"], x

    def backward(self, params, cache, dy):
        grads = {f"{self.name}.weight": dy.T @ cache, f"{self.name}.bias": dy.sum(axis=0)}
        return dy @ params[f"{self.name}.weight"], grads


class Softmax(Layer):
    def __init__(self, name):
        self.name = name

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"{self.name}: softmax expects a vector, got {in_shape}")
        return in_shape

    def forward(self, params, x):
        y = softmax(x)
        return y, y

    def backward(self, params, cache, dy):
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Network:
    """An ordered stack of layers with a fixed per-example input shape."""

    def __init__(self, layers, input_shape):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_shapes(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        """Glorot-uniform weights, zero biases."""
        params = {}
        for layer in self.layers:
            fan_in, fan_out = layer.fan()
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            for name, shape in layer.param_shapes().items():
                if name.endswith(".bias"):
                    params[name] = np.zeros(shape, dtype)
                else:
                    params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        return params

    def _stop(self, logits: bool) -> int:
        if logits and self.layers and isinstance(self.layers[-1], Softmax):
            return len(self.layers) - 1
        return len(self.layers)

    def forward(self, params: Params, x, logits: bool = False, start: int = 0):
        """Run layers ``start`` onwards; returns (output, caches).

        ``logits=True`` stops before a trailing softmax. An unbatched input
        of exactly ``input_shape`` gets a batch axis added and removed.
        """
        x = np.asarray(x)
        in_shape = self.shapes[start]
        unbatched = x.shape == in_shape
        if unbatched:
            x = x[None]
        if x.shape[1:] != in_shape:
            raise ShapeMismatch(f"input shape {x.shape[1:]} does not match {in_shape}")
        dtype = next(iter(params.values())).dtype if params else np.result_type(x.dtype, np.float32)
        x = x.astype(dtype, copy=False)
        _check_finite(x, "network input")
        caches = []
        for layer in self.layers[start:self._stop(logits)]:
            x, cache = layer.forward(params, x)
            _check_finite(x, f"output of {layer.name}")
            caches.append(cache)
        return (x[0] if unbatched else x), caches

    def predict(self, params: Params, x, logits: bool = False):
        return self.forward(params, x, logits)[0]

    def backward(self, params: Params, caches, dout, start: int = 0) -> dict:
        dout = np.asarray(dout)
        if dout.ndim == len(self.shapes[start + len(caches)]):
            dout = dout[None]
        grads = {}
        for layer, cache in zip(reversed(self.layers[start:start + len(caches)]), reversed(caches)):
            dout, g = layer.backward(params, cache, dout)
            grads.update(g)
        for name, g in grads.items():
            _check_finite(g, f"gradient of {name}")
        return {name: grads[name] for name in self.param_shapes()}


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def mse_with_grad(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff)) if diff.size else 0.0
    return loss, (2.0 * diff / max(diff.size, 1)).astype(pred.dtype)


def loss_mse(pred, target) -> float:
    """Mean squared error over every element."""
    return mse_with_grad(pred, target)[0]


def cross_entropy_with_grad(logits, labels):
    """Batch-mean cross-entropy of integer labels under softmax(logits)."""
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(z):
        raise ShapeMismatch(f"{len(labels)} labels for {len(z)} rows")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise IndexError(f"label out of range for {z.shape[1]} classes")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(z))
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad = (grad / len(z)).astype(logits.dtype)
    return loss, (grad[0] if single else grad)


def loss_cross_entropy(logits, label) -> float:
    return cross_entropy_with_grad(logits, label)[0]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: Params, grads: dict):
    """One bias-corrected Adam update; returns (new params, state)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = (p - step).astype(p.dtype)
    return new, state


# --------------------------------------------------------------------------
# finite-difference gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str
    worst_index: tuple
    checked: int
    tolerance: float
    refined: int = 0  # coordinates whose step was shrunk to stay off a kink

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max rel error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)} "
                f"over {self.checked} parameters, {self.refined} refined (tolerance {self.tolerance:g})")


def _loss_fn(kind: str, target) -> Callable:
    if kind == "mse":
        return lambda out: mse_with_grad(out, target)
    if kind == "cross_entropy":
        return lambda out: cross_entropy_with_grad(out, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def _switches(layers, caches) -> list:
    """ReLU masks and max-pool choices: the piecewise region of a forward pass."""
    out = []
    for layer, cache in zip(layers, caches):
        if isinstance(layer, ReLU):
            out.append(cache)
        elif isinstance(layer, MaxPool1d):
            out.append(cache[0])
    return out


def _same_region(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(network: Network, params: Params, x, loss: str, target, tolerance: float = 1e-3,
                    step: float = 1e-3, analytic: Optional[dict] = None, max_halvings: int = 30) -> GradCheckReport:
    """Compare backprop gradients with central differences on float64 copies.

    ``loss`` is "mse" (``target`` a regression array) or "cross_entropy"
    (``target`` integer labels, applied to the pre-softmax logits).
    Perturbing a layer's parameter only reruns the network from that layer.
    Central differences are meaningless across a ReLU or max-pool switch, so
    when a perturbation of size ``step`` flips one, the step is halved until
    neither side does.
    ``analytic`` substitutes precomputed gradients for the backprop ones.
    """
    logits = loss == "cross_entropy"
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    x64 = np.asarray(x, dtype=np.float64)
    if x64.shape == network.input_shape:
        x64 = x64[None]
        if loss == "mse":
            target = np.asarray(target)[None]
    loss_fn = _loss_fn(loss, target)

    stop = network._stop(logits)
    layers = network.layers[:stop]
    layer_inputs = [x64]
    base_caches = []
    h = x64
    for layer in layers:
        h, cache = layer.forward(p64, h)
        layer_inputs.append(h)
        base_caches.append(cache)
    regions = [_switches(layers[i:], base_caches[i:]) for i in range(len(layers))]

    if analytic is None:
        out, caches = network.forward(p64, x64, logits=logits)
        _, dout = loss_fn(out)
        analytic = network.backward(p64, caches, dout)

    def evaluate(li):
        out, caches = network.forward(p64, layer_inputs[li], logits=logits, start=li)
        return loss_fn(out)[0], _same_region(_switches(layers[li:], caches), regions[li])

    worst = (0.0, "", ())
    checked = refined = 0
    for li, layer in enumerate(layers):
        for name in layer.param_shapes():
            p = p64[name]
            a_grad = np.asarray(analytic[name], dtype=np.float64)
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                eps = step
                for attempt in range(max_halvings + 1):
                    p[idx] = orig + eps
                    up, ok_up = evaluate(li)
                    p[idx] = orig - eps
                    down, ok_down = evaluate(li)
                    p[idx] = orig
                    if ok_up and ok_down:
                        break
                    eps /= 2.0
                refined += attempt > 0
                num = (up - down) / (2.0 * eps)
                a = a_grad[idx]
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                checked += 1
                if rel > worst[0]:
                    worst = (rel, name, idx)
    return GradCheckReport(worst[0], worst[0] < tolerance, worst[1], worst[2], checked, tolerance, refined)
