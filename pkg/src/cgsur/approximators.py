"""Differentiable parametric maps with hand-rolled reverse-mode gradients.

Networks are sequential stacks of layers acting on float64 vectors. All
parameters live in one flat vector so optimizers and checkpoints can treat a
network as a single array. forward() records a tape; backward() consumes it
once and returns exact gradients of cotangent^T output with respect to the
parameters and the input.

Supported layers (descriptor dicts):
    {"kind": "dense", "units": n}
    {"kind": "tanh"} | {"kind": "relu"}
    {"kind": "reshape", "shape": [c, h, w]} | {"kind": "flatten"}
    {"kind": "conv2d", "channels": c, "kernel": k}   # stride 1, same padding
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NonPositiveInput, TapeConsumed

CHECKPOINT_VERSION = 1


def positivity_transform(raw: np.ndarray) -> np.ndarray:
    """Map unconstrained values to positive ones (elementwise exp)."""
    return np.exp(np.asarray(raw, dtype=np.float64))


def positivity_inverse(positive: np.ndarray) -> np.ndarray:
    positive = np.asarray(positive, dtype=np.float64)
    if np.any(positive <= 0.0):
        raise NonPositiveInput("inverse transform requires positive inputs")
    return np.log(positive)


class Tape:
    """Per-layer caches from one forward pass; usable for one reverse pass."""

    def __init__(self, caches, shapes):
        self.caches = caches
        self.shapes = shapes
        self.consumed = False


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _Dense:
    def __init__(self, in_dim, units):
        self.in_dim, self.units = in_dim, units
        self.n_params = units * in_dim + units

    def init(self, rng):
        w = _glorot(rng, self.in_dim, self.units, (self.units, self.in_dim))
        return np.concatenate([w.ravel(), np.zeros(self.units)])

    def split(self, p):
        nw = self.units * self.in_dim
        return p[:nw].reshape(self.units, self.in_dim), p[nw:]

    def forward(self, p, x):
        w, b = self.split(p)
        return w @ x + b, x

    def backward(self, p, cache, cot):
        w, _ = self.split(p)
        x = cache
        gp = np.concatenate([np.outer(cot, x).ravel(), cot])
        return gp, w.T @ cot


class _Tanh:
    n_params = 0

    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def backward(self, p, cache, cot):
        return np.empty(0), cot * (1.0 - cache**2)


class _Relu:
    n_params = 0

    def forward(self, p, x):
        mask = x > 0.0
        return x * mask, mask

    def backward(self, p, cache, cot):
        return np.empty(0), cot * cache


class _Conv2d:
    """Stride-1 same-padding convolution on (channels, h, w) inputs."""

    def __init__(self, in_shape, channels, kernel):
        if kernel % 2 != 1:
            raise ValueError(f"conv kernel must be odd, got {kernel}")
        self.in_shape = in_shape  # (c_in, h, w)
        self.channels = channels
        self.kernel = kernel
        c_in = in_shape[0]
        self.n_params = channels * c_in * kernel * kernel + channels

    def init(self, rng):
        c_in, k = self.in_shape[0], self.kernel
        fan_in = c_in * k * k
        fan_out = self.channels * k * k
        w = _glorot(rng, fan_in, fan_out, (self.channels, c_in * k * k))
        return np.concatenate([w.ravel(), np.zeros(self.channels)])

    def split(self, p):
        c_in, k = self.in_shape[0], self.kernel
        nw = self.channels * c_in * k * k
        return p[:nw].reshape(self.channels, c_in * k * k), p[nw:]

    def _im2col(self, img):
        c, h, w = self.in_shape
        k = self.kernel
        pad = k // 2
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
        padded[:, pad : pad + h, pad : pad + w] = img
        cols = np.empty((c * k * k, h * w))
        idx = 0
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    cols[idx] = padded[ci, di : di + h, dj : dj + w].ravel()
                    idx += 1
        return cols

    def _col2im(self, cols):
        c, h, w = self.in_shape
        k = self.kernel
        pad = k // 2
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
        idx = 0
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    padded[ci, di : di + h, dj : dj + w] += cols[idx].reshape(h, w)
                    idx += 1
        return padded[:, pad : pad + h, pad : pad + w]

    def forward(self, p, x):
        c, h, w = self.in_shape
        wmat, b = self.split(p)
        cols = self._im2col(x.reshape(c, h, w))
        out = wmat @ cols + b[:, None]
        return out.ravel(), cols

    def backward(self, p, cache, cot):
        c, h, w = self.in_shape
        wmat, _ = self.split(p)
        cols = cache
        cot_mat = cot.reshape(self.channels, h * w)
        gw = cot_mat @ cols.T
        gb = cot_mat.sum(axis=1)
        gx = self._col2im(wmat.T @ cot_mat)
        return np.concatenate([gw.ravel(), gb]), gx.ravel()


class _Shape:
    """Reshape/flatten bookkeeping; vectors stay flat, only shape metadata moves."""

    n_params = 0

    def forward(self, p, x):
        return x, None

    def backward(self, p, cache, cot):
        return np.empty(0), cot


class Approximator:
    """A sequential differentiable map with one flat float64 parameter vector."""

    def __init__(self, input_dim: int, layers: list[dict], seed: int = 0):
        self.input_dim = int(input_dim)
        self.layer_specs = [dict(spec) for spec in layers]
        self._layers = []
        shape = (self.input_dim,)  # flat, or (c, h, w) after a reshape
        for spec in self.layer_specs:
            kind = spec["kind"]
            if kind == "dense":
                if len(shape) != 1:
                    raise ValueError("dense layer requires a flat input")
                layer = _Dense(shape[0], int(spec["units"]))
                shape = (layer.units,)
            elif kind == "tanh":
                layer = _Tanh()
            elif kind == "relu":
                layer = _Relu()
            elif kind == "reshape":
                new = tuple(int(v) for v in spec["shape"])
                if int(np.prod(new)) != int(np.prod(shape)):
                    raise ValueError(f"cannot reshape {shape} to {new}")
                layer = _Shape()
                shape = new
            elif kind == "flatten":
                layer = _Shape()
                shape = (int(np.prod(shape)),)
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ValueError("conv2d requires a (c, h, w) input; add a reshape")
                layer = _Conv2d(shape, int(spec["channels"]), int(spec["kernel"]))
                shape = (layer.channels, shape[1], shape[2])
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            self._layers.append(layer)
        self.output_dim = int(np.prod(shape))

        rng = np.random.default_rng(seed)
        chunks = []
        for layer in self._layers:
            chunks.append(layer.init(rng) if layer.n_params else np.empty(0))
        self.params = (
            np.concatenate(chunks) if chunks else np.empty(0, dtype=np.float64)
        )
        offsets = np.cumsum([0] + [layer.n_params for layer in self._layers])
        self._slices = [
            slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])
        ]

    @property
    def n_params(self) -> int:
        return self.params.size

    def forward(self, x: np.ndarray):
        """Evaluate the network; returns (output, tape)."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.input_dim:
            raise DimensionMismatch(
                f"input has size {x.size}, expected {self.input_dim}"
            )
        caches = []
        for layer, sl in zip(self._layers, self._slices):
            x, cache = layer.forward(self.params[sl], x)
            caches.append(cache)
        return x, Tape(caches, None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, output_cotangent: np.ndarray):
        """Reverse pass; returns (param_gradient, input_gradient)."""
        if tape.consumed:
            raise TapeConsumed("tape was already used for a reverse pass")
        tape.consumed = True
        cot = np.asarray(output_cotangent, dtype=np.float64).ravel()
        if cot.size != self.output_dim:
            raise DimensionMismatch(
                f"cotangent has size {cot.size}, expected {self.output_dim}"
            )
        gparams = np.zeros_like(self.params)
        for layer, sl, cache in zip(
            reversed(self._layers), reversed(self._slices), reversed(tape.caches)
        ):
            gp, cot = layer.backward(self.params[sl], cache, cot)
            if layer.n_params:
                gparams[sl] = gp
        return gparams, cot

    def descriptor(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": self.layer_specs,
            "n_params": self.n_params,
        }

    @classmethod
    def from_descriptor(cls, desc: dict, params: np.ndarray | None = None):
        net = cls(desc["input_dim"], desc["layers"])
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.size != net.n_params:
                raise DimensionMismatch(
                    f"parameter blob has {params.size} values, expected {net.n_params}"
                )
            net.params = params.copy()
        return net


def mlp(
    input_dim: int,
    hidden: tuple = (128, 256),
    output_dim: int = 1,
    activation: str = "tanh",
    seed: int = 0,
) -> Approximator:
    layers = []
    for width in hidden:
        layers.append({"kind": "dense", "units": int(width)})
        layers.append({"kind": activation})
    layers.append({"kind": "dense", "units": int(output_dim)})
    return Approximator(input_dim, layers, seed=seed)


def save_checkpoint(net: Approximator, stem) -> None:
    """Write <stem>.json (versioned descriptor) and <stem>.bin (raw float64)."""
    stem = Path(stem)
    header = {"version": CHECKPOINT_VERSION, "descriptor": net.descriptor()}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2))
    stem.with_suffix(".bin").write_bytes(net.params.astype("<f8").tobytes())


def load_checkpoint(stem) -> Approximator:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    params = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    return Approximator.from_descriptor(header["descriptor"], params)
