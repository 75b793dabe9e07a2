"""Small numpy network engine: dense and 1-D conv layers, losses, Adam.

Everything is float64. A network maps a batch of flat feature vectors
``(batch, features)`` to ``(batch, outputs)``. Conv layers see their input
as ``(batch, channels, length)``; the reshape between a dense layer and a
conv layer (and the flatten after the conv stack) is implicit. Internally
conv activations are kept channel-last, so the flatten is position-major.

``Network.forward`` returns a tape that ``Network.backward`` consumes to
produce exact parameter gradients and the gradient with respect to the
network input, so a frozen network can sit inside another model's loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
PROB_EPS = 1e-12

ACTIVATIONS = ("none", "relu", "leaky_relu", "tanh", "elu", "sigmoid", "softmax")


class ConfigError(ValueError):
    """Incompatible layer shapes or an invalid layer description."""


class UsageError(RuntimeError):
    """An operation was called in a state that forbids it."""


class PersistenceError(IOError):
    """A weight file is corrupt, truncated, or does not match the network."""


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv1d"
    out: int  # units (dense) or filters (conv1d)
    activation: str = "none"
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "conv1d"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.out < 1:
            raise ConfigError("layer width must be positive")
        if self.kind == "conv1d" and (self.kernel < 1 or self.stride < 1):
            raise ConfigError("conv1d needs kernel >= 1 and stride >= 1")


def dense(out, activation="none"):
    return LayerSpec("dense", out, activation)


def conv1d(filters, kernel, stride=1, activation="none"):
    return LayerSpec("conv1d", filters, activation, kernel, stride)


# -- activations ---------------------------------------------------------------


def _activate(name, a):
    if name == "none":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "leaky_relu":
        return np.where(a > 0, a, LEAKY_SLOPE * a)
    if name == "tanh":
        return np.tanh(a)
    if name == "elu":
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
    if name == "sigmoid":
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    if name == "softmax":
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ConfigError(name)


def _activation_backward(name, a, out, g):
    """Gradient w.r.t. the pre-activation ``a`` given output gradient ``g``."""
    if name == "none":
        return g
    if name == "relu":
        return g * (a > 0)
    if name == "leaky_relu":
        return g * np.where(a > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return g * (1.0 - out * out)
    if name == "elu":
        return g * np.where(a > 0, 1.0, out + 1.0)
    if name == "sigmoid":
        return g * out * (1.0 - out)
    if name == "softmax":
        return out * (g - np.sum(g * out, axis=-1, keepdims=True))
    raise ConfigError(name)


# -- network -------------------------------------------------------------------


@dataclass
class _Layer:
    spec: LayerSpec
    in_shape: tuple  # per-sample input shape: (features,) or (channels, length)
    out_shape: tuple
    w_slice: slice
    b_slice: slice
    w_shape: tuple


@dataclass
class Tape:
    network_id: int
    version: int
    records: list = field(default_factory=list)
    input_shape: tuple = ()


class Network:
    """Sequential stack of dense / conv1d layers over a flat parameter store.

    ``in_channels`` applies when the first layer is a conv layer; a conv that
    follows a dense layer always reads its input as a single channel.
    """

    def __init__(self, input_size, layers, rng=None, in_channels=1, name="net"):
        self.name = name
        self.input_size = int(input_size)
        self.specs = list(layers)
        self.frozen = False
        self._version = 0
        self._layers = []
        offset = 0
        shape = (self.input_size,)
        for i, spec in enumerate(self.specs):
            if spec.activation == "softmax" and i != len(self.specs) - 1:
                raise ConfigError("softmax is only allowed on the terminal layer")
            if spec.kind == "dense":
                fan_in = int(np.prod(shape))
                w_shape = (fan_in, spec.out)
                out_shape = (spec.out,)
            else:
                if len(shape) == 1:
                    ch = in_channels if i == 0 else 1
                    if shape[0] % ch:
                        raise ConfigError(f"cannot view {shape[0]} features as {ch} channels")
                    shape = (ch, shape[0] // ch)
                ch, length = shape
                out_len = (length - spec.kernel) // spec.stride + 1
                if length < spec.kernel or out_len < 1:
                    raise ConfigError(
                        f"layer {i}: conv kernel {spec.kernel} does not fit length {length}"
                    )
                w_shape = (spec.out, ch, spec.kernel)
                out_shape = (spec.out, out_len)
            n_w = int(np.prod(w_shape))
            w_slice = slice(offset, offset + n_w)
            b_slice = slice(offset + n_w, offset + n_w + spec.out)
            offset += n_w + spec.out
            self._layers.append(_Layer(spec, shape, out_shape, w_slice, b_slice, w_shape))
            shape = out_shape
        self.output_size = int(np.prod(shape))
        self.params = np.zeros(offset)
        self.init_params(rng if rng is not None else np.random.default_rng(0))

    # parameters

    @property
    def size(self):
        return self.params.size

    def init_params(self, rng):
        """Glorot-uniform kernels, zero biases."""
        self._check_mutable()
        for layer in self._layers:
            if layer.spec.kind == "dense":
                fan_in, fan_out = layer.w_shape
            else:
                f, c, k = layer.w_shape
                fan_in, fan_out = c * k, f * k
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            n = layer.w_slice.stop - layer.w_slice.start
            self.params[layer.w_slice] = rng.uniform(-limit, limit, size=n)
            self.params[layer.b_slice] = 0.0
        self._version += 1

    def weights(self, i):
        layer = self._layers[i]
        return self.params[layer.w_slice].reshape(layer.w_shape)

    def bias(self, i):
        return self.params[self._layers[i].b_slice]

    def set_params(self, values):
        self._check_mutable()
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ConfigError(f"expected {self.params.shape} parameters, got {values.shape}")
        self.params[:] = values
        self._version += 1

    def freeze(self):
        self.frozen = True
        self.params.flags.writeable = False
        return self

    def _check_mutable(self):
        if self.frozen:
            raise UsageError(f"network {self.name!r} is frozen")

    def layout(self):
        """Per-layer ``(kind, activation, in_features_or_channels, out, kernel, stride)``."""
        rows = []
        for layer in self._layers:
            s = layer.spec
            if s.kind == "dense":
                rows.append((s.kind, s.activation, layer.w_shape[0], s.out, 0, 0))
            else:
                rows.append((s.kind, s.activation, layer.in_shape[0], s.out, s.kernel, s.stride))
        return rows

    # forward / backward

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ConfigError(
                f"{self.name}: expected input (batch, {self.input_size}), got {x.shape}"
            )
        tape = Tape(id(self), self._version, input_shape=x.shape)
        batch = x.shape[0]
        h = x
        for i, layer in enumerate(self._layers):
            spec = layer.spec
            W = self.weights(i)
            b = self.bias(i)
            if spec.kind == "dense":
                h_in = h.reshape(batch, -1)
                a = h_in @ W + b
                win = None
            else:
                h_in = self._conv_input(h, i, layer, batch)
                win = _im2col(h_in, spec.kernel, spec.stride, layer.out_shape[1])
                a = win @ _kernel_matrix(W) + b
            out = _activate(spec.activation, a)
            tape.records.append((h_in, win, a, out))
            h = out
        return h.reshape(batch, -1), tape

    def _conv_input(self, h, i, layer, batch):
        # internal conv layout is channel-last: (batch, length, channels)
        if h.ndim == 3:
            return h
        ch, length = layer.in_shape
        if i == 0:
            return h.reshape(batch, ch, length).transpose(0, 2, 1)
        return h.reshape(batch, length, 1)

    def backward(self, tape, output_grad, terminal_preactivation=False):
        """Backpropagate ``output_grad`` through a recorded forward pass.

        With ``terminal_preactivation`` the gradient is taken to be with
        respect to the terminal layer's pre-activation (the fused
        softmax/sigmoid + cross-entropy case).

        Returns ``(param_grads, input_grad)``.
        """
        if tape.network_id != id(self) or tape.version != self._version:
            raise UsageError(f"{self.name}: tape does not belong to the current parameters")
        g = np.asarray(output_grad, dtype=np.float64)
        batch = tape.input_shape[0]
        grads = np.zeros_like(self.params)
        for i in range(len(self._layers) - 1, -1, -1):
            layer = self._layers[i]
            spec = layer.spec
            h_in, win, a, out = tape.records[i]
            g = g.reshape(a.shape)
            if i == len(self._layers) - 1 and terminal_preactivation:
                ga = g
            else:
                ga = _activation_backward(spec.activation, a, out, g)
            W = self.weights(i)
            if spec.kind == "dense":
                grads[layer.w_slice] = (h_in.T @ ga).ravel()
                grads[layer.b_slice] = ga.sum(axis=0)
                g = ga @ W.T
            else:
                f, c, k = layer.w_shape
                gw = win.reshape(-1, k * c).T @ ga.reshape(-1, f)
                grads[layer.w_slice] = gw.reshape(k, c, f).transpose(2, 1, 0).ravel()
                grads[layer.b_slice] = ga.sum(axis=(0, 1))
                gcols = ga @ _kernel_matrix(W).T
                gx = np.zeros(h_in.shape)
                out_len = layer.out_shape[1]
                stop = spec.stride * (out_len - 1) + 1
                for j in range(k):
                    gx[:, j : j + stop : spec.stride, :] += gcols[:, :, j * c : (j + 1) * c]
                g = gx.transpose(0, 2, 1) if i == 0 else gx
        return grads, g.reshape(batch, -1)


def _im2col(x, kernel, stride, out_len):
    stop = stride * (out_len - 1) + 1
    return np.concatenate([x[:, j : j + stop : stride, :] for j in range(kernel)], axis=2)


def _kernel_matrix(W):
    f, c, k = W.shape
    return W.transpose(2, 1, 0).reshape(k * c, f)


# -- losses --------------------------------------------------------------------


def cross_entropy(probs, target):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    ``probs`` are softmax outputs ``(batch, classes)``; ``target`` holds class
    indices. Probabilities are clamped at ``PROB_EPS`` before the log.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target))
    batch, classes = probs.shape
    if np.any(target < 0) or np.any(target >= classes):
        raise UsageError("target class out of range")
    rows = np.arange(batch)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, target], PROB_EPS))))
    grad = probs.copy()
    grad[rows, target] -= 1.0
    return loss, grad / batch


def binary_cross_entropy(p, label):
    """Mean binary cross-entropy and its gradient w.r.t. the sigmoid logit."""
    p = np.asarray(p, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(label * np.log(pc) + (1.0 - label) * np.log(1.0 - pc))
    n = max(losses.size, 1)
    return float(np.mean(losses)), (p - label) / n


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net, **kw):
        return cls(np.zeros(net.size), np.zeros(net.size), **kw)


def adam_step(net, grads, state, lr):
    """One bias-corrected Adam update of ``net.params`` in place."""
    if net.frozen:
        raise UsageError(f"cannot update frozen network {net.name!r}")
    if state.m.shape != net.params.shape:
        raise UsageError("optimizer state does not match the parameter store")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    net.params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    net._version += 1
    return net.params


# -- gradient checking ---------------------------------------------------------


def gradient_check(net, loss_fn, x, rng, n_params=40, n_inputs=20, h=1e-5, stencil=2):
    """Max relative error between backprop and central differences.

    ``loss_fn(output)`` returns ``(loss, grad_wrt_output)``. A random subset
    of parameters and input entries is probed. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``. ``stencil=4`` uses the fourth-order
    central difference, which keeps roundoff below 1e-4 relative for
    gradients near the 1e-6 floor.
    """
    if stencil not in (2, 4):
        raise UsageError("stencil must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    out, tape = net.forward(x)
    _, g_out = loss_fn(out)
    p_grad, x_grad = net.backward(tape, g_out)

    def loss_at(xx):
        return loss_fn(net.forward(xx)[0])[0]

    def diff(f):
        if stencil == 2:
            return (f(h) - f(-h)) / (2 * h)
        return (f(-2 * h) - 8 * f(-h) + 8 * f(h) - f(2 * h)) / (12 * h)

    def at_param(j):
        def f(d):
            p = base.copy()
            p[j] += d
            net.set_params(p)
            return loss_at(x)
        return f

    def at_input(j):
        def f(d):
            xp = flat.copy()
            xp[j] += d
            return loss_at(xp.reshape(x.shape))
        return f

    worst = 0.0
    base = net.params.copy()
    idx = rng.choice(net.size, size=min(n_params, net.size), replace=False)
    for j in idx:
        worst = max(worst, _rel(p_grad[j], diff(at_param(j))))
    net.set_params(base)

    flat = x.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_inputs, flat.size), replace=False)
    for j in idx:
        worst = max(worst, _rel(x_grad.reshape(-1)[j], diff(at_input(j))))
    return worst


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


# -- persistence ---------------------------------------------------------------

MAGIC = b"CWNET"
FORMAT_VERSION = 1
_KINDS = {"dense": 0, "conv1d": 1}
_HEADER = struct.Struct("<5sHI")
_LAYER = struct.Struct("<BBIIII")


def save_params(net, path):
    """Write ``net`` to the CWNET container (see docs/weight_format.md)."""
    rows = net.layout()
    buf = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, len(rows)))
    for kind, act, n_in, n_out, kernel, stride in rows:
        buf += _LAYER.pack(_KINDS[kind], ACTIVATIONS.index(act), n_in, n_out, kernel, stride)
    buf += struct.pack("<Q", net.size)
    buf += net.params.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(net, path):
    data = Path(path).read_bytes()
    try:
        magic, version, n_layers = _HEADER.unpack_from(data, 0)
    except struct.error as exc:
        raise PersistenceError(f"{path}: truncated header") from exc
    if magic != MAGIC:
        raise PersistenceError(f"{path}: not a CWNET file")
    if version != FORMAT_VERSION:
        raise PersistenceError(f"{path}: unsupported format version {version}")
    pos = _HEADER.size
    rows = []
    try:
        for _ in range(n_layers):
            kind, act, n_in, n_out, kernel, stride = _LAYER.unpack_from(data, pos)
            pos += _LAYER.size
            rows.append((kind, act, n_in, n_out, kernel, stride))
        (count,) = struct.unpack_from("<Q", data, pos)
    except struct.error as exc:
        raise PersistenceError(f"{path}: truncated layer table") from exc
    pos += 8
    expected = [
        (_KINDS[k], ACTIVATIONS.index(a), i, o, ke, s) for k, a, i, o, ke, s in net.layout()
    ]
    if rows != expected or count != net.size:
        raise PersistenceError(f"{path}: stored layout does not match network {net.name!r}")
    body = data[pos:]
    if len(body) != 8 * count:
        raise PersistenceError(f"{path}: expected {8 * count} parameter bytes, got {len(body)}")
    was_frozen = net.frozen
    if was_frozen:
        net.params.flags.writeable = True
        net.frozen = False
    net.set_params(np.frombuffer(body, dtype="<f8"))
    if was_frozen:
        net.freeze()
    return net
