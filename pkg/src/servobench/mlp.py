"""Minimal dense-network substrate: flat parameter storage, forward pass,
hand-written reverse-mode gradients (w.r.t. parameters and inputs), Adam, and
a last-layer overlay path for externally generated weights.

All math is float64; parameter layout is, per layer in order: the weight
matrix (out x in) row-major, then the bias vector.  Forward/backward accept a
single input (d,) or a batch (B, d); batched parameter gradients are summed
over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str

    def __post_init__(self) -> None:
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


def _init_scale(spec: LayerSpec) -> float:
    # He-uniform for relu layers, Xavier-uniform for tanh/linear.
    if spec.activation == "relu":
        return np.sqrt(6.0 / spec.in_dim)
    return np.sqrt(6.0 / (spec.in_dim + spec.out_dim))


class DenseNet:
    """Fully connected network over a single flat float64 parameter vector."""

    def __init__(self, layers: list[LayerSpec], params: np.ndarray | None = None, rng: np.random.Generator | None = None):
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatch(f"layer chain broken: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = list(layers)
        self.n_params = sum(s.n_params for s in layers)
        if params is not None:
            params = np.asarray(params, dtype=float).reshape(-1)
            if params.size != self.n_params:
                raise DimensionMismatch(f"expected {self.n_params} params, got {params.size}")
            self.params = params.copy()
        else:
            rng = rng if rng is not None else np.random.default_rng()
            self.params = np.empty(self.n_params)
            for spec, (w, b) in zip(self.layers, self.split_params(self.params)):
                w[:] = rng.uniform(-_init_scale(spec), _init_scale(spec), w.shape)
                b[:] = 0.0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def split_params(self, flat: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (weight, bias) views into a flat vector (default: own params)."""
        flat = self.params if flat is None else flat
        if flat.size != self.n_params:
            raise DimensionMismatch(f"expected {self.n_params} entries, got {flat.size}")
        views = []
        off = 0
        for spec in self.layers:
            w = flat[off : off + spec.in_dim * spec.out_dim].reshape(spec.out_dim, spec.in_dim)
            off += spec.in_dim * spec.out_dim
            b = flat[off : off + spec.out_dim]
            off += spec.out_dim
            views.append((w, b))
        return views


@dataclass
class Tape:
    """Activation cache from a forward pass, consumed by backward()."""

    inputs: list[np.ndarray]  # input to each layer (post-activation of previous)
    outputs: list[np.ndarray]  # post-activation output of each layer
    batched: bool


@dataclass
class GradientBundle:
    d_params: np.ndarray  # same layout as DenseNet.params; summed over a batch
    d_input: np.ndarray  # same shape as the forward input


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(out: np.ndarray, kind: str) -> np.ndarray:
    # Derivative expressed through the activation output (cheap for relu/tanh).
    if kind == "relu":
        return (out > 0.0).astype(float)
    if kind == "tanh":
        return 1.0 - out * out
    return np.ones_like(out)


def _check_input(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if (batched and x.shape[1] != net.in_dim) or (not batched and x.shape != (net.in_dim,)):
        raise DimensionMismatch(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    return x, batched


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Affine + activation chain; the tape retains activations for backward()."""
    x, batched = _check_input(net, x)
    inputs, outputs = [], []
    a = x
    for spec, (w, b) in zip(net.layers, net.split_params()):
        inputs.append(a)
        a = _activate(a @ w.T + b, spec.activation)
        outputs.append(a)
    return a, Tape(inputs, outputs, batched)


def backward(net: DenseNet, tape: Tape, d_output: np.ndarray) -> GradientBundle:
    """Exact reverse-mode gradients of <d_output, output> w.r.t. params and input."""
    d_output = np.asarray(d_output, dtype=float)
    if d_output.shape != tape.outputs[-1].shape:
        raise DimensionMismatch(f"d_output shape {d_output.shape} != output shape {tape.outputs[-1].shape}")
    d_params = np.zeros(net.n_params)
    grad_views = net.split_params(d_params)
    param_views = net.split_params()
    g = d_output
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        w, _ = param_views[i]
        gz = g * _activation_grad(tape.outputs[i], spec.activation)
        dw, db = grad_views[i]
        if tape.batched:
            dw += gz.T @ tape.inputs[i]
            db += gz.sum(axis=0)
        else:
            dw += np.outer(gz, tape.inputs[i])
            db += gz
        g = gz @ w
    return GradientBundle(d_params, g)


def overlay_forward(net: DenseNet, w: np.ndarray, b: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Forward pass with the last layer's parameters replaced by (w, b).

    w may be (out, in) shared across the batch or (B, out, in) per-sample.
    Earlier layers come from `net`; the last layer's activation is kept.
    """
    x, batched = _check_input(net, x)
    last = net.layers[-1]
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    per_sample = w.ndim == 3
    if per_sample and not batched:
        raise DimensionMismatch("per-sample overlay weights need a batched input")
    expect = (last.out_dim, last.in_dim)
    if (per_sample and w.shape[1:] != expect) or (not per_sample and w.shape != expect):
        raise DimensionMismatch(f"overlay weights {w.shape} do not fit last layer {expect}")

    inputs, outputs = [], []
    a = x
    for spec, (wv, bv) in zip(net.layers[:-1], net.split_params()[:-1]):
        inputs.append(a)
        a = _activate(a @ wv.T + bv, spec.activation)
        outputs.append(a)
    inputs.append(a)
    if per_sample:
        z = np.einsum("boi,bi->bo", w, a) + b
    else:
        z = a @ w.T + b
    a = _activate(z, last.activation)
    outputs.append(a)
    return a, Tape(inputs, outputs, batched)


def overlay_backward(
    net: DenseNet, w: np.ndarray, tape: Tape, d_output: np.ndarray
) -> tuple[GradientBundle, np.ndarray, np.ndarray]:
    """Backward through an overlay_forward pass.

    Returns (trunk bundle, d_w, d_b).  The trunk bundle's own last-layer slots
    are exactly zero: those parameters did not participate.  d_w/d_b match the
    overlay's shape (per-sample when the overlay was per-sample).
    """
    d_output = np.asarray(d_output, dtype=float)
    last = net.layers[-1]
    w = np.asarray(w, dtype=float)
    per_sample = w.ndim == 3
    d_params = np.zeros(net.n_params)
    grad_views = net.split_params(d_params)

    gz = d_output * _activation_grad(tape.outputs[-1], last.activation)
    h = tape.inputs[-1]
    if per_sample:
        d_w = np.einsum("bo,bi->boi", gz, h)
        d_b = gz
        g = np.einsum("boi,bo->bi", w, gz)
    elif tape.batched:
        d_w = gz.T @ h
        d_b = gz.sum(axis=0)
        g = gz @ w
    else:
        d_w = np.outer(gz, h)
        d_b = gz
        g = gz @ w

    param_views = net.split_params()
    for i in range(len(net.layers) - 2, -1, -1):
        spec = net.layers[i]
        wv, _ = param_views[i]
        gz = g * _activation_grad(tape.outputs[i], spec.activation)
        dw, db = grad_views[i]
        if tape.batched:
            dw += gz.T @ tape.inputs[i]
            db += gz.sum(axis=0)
        else:
            dw += np.outer(gz, tape.inputs[i])
            db += gz
        g = gz @ wv
    return GradientBundle(d_params, g), d_w, d_b


class AdamState:
    """Adam with bias correction: lr 1e-3, betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """One in-place update of `params`."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise DimensionMismatch("params/grads do not match the optimizer state")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Functional wrapper: returns the updated parameter vector."""
    out = np.array(params, dtype=float)
    state.step(out, np.asarray(grads, dtype=float))
    return out


def save_net(net: DenseNet, path: str | Path, seed: int | None = None, counters: dict | None = None) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net, seed, counters)))


def load_net(path: str | Path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))


def net_to_dict(net: DenseNet, seed: int | None = None, counters: dict | None = None) -> dict:
    # json round-trips Python floats exactly (repr-based), so this is bit-exact.
    return {
        "layers": [[s.in_dim, s.out_dim, s.activation] for s in net.layers],
        "seed": seed,
        "counters": counters or {},
        "params": net.params.tolist(),
    }


def net_from_dict(data: dict) -> DenseNet:
    layers = [LayerSpec(i, o, a) for i, o, a in data["layers"]]
    return DenseNet(layers, params=np.array(data["params"], dtype=float))
