"""Minimal feed-forward network substrate.

Networks are described by an immutable :class:`MlpSpec` and a flat
:class:`ParamVector`; forward, backward and optimizer steps are plain
functions over float64 NumPy arrays.  Keeping the parameter store flat makes
target-network copies, checkpointing and finite-difference checks trivial.

All functions are pure with respect to their inputs except
:func:`optimizer_step`, which updates the parameter and optimizer buffers in
place.  Distinct parameter stores can be used concurrently.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "bounded")

_MAGIC = b"FWNN"
_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not match the width the spec demands."""


class NonFiniteError(ArithmeticError):
    """Raised when a gradient or update contains NaN or infinity."""


class CheckpointError(ValueError):
    """Raised when a serialized network cannot be decoded."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer widths plus activation choices.

    ``layer_widths`` lists every layer including input and output, so a
    9-input, two-hidden-layer, scalar-output network is ``(9, 64, 64, 1)``.
    A ``bounded`` output squashes through tanh into ``output_range``.
    """

    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    output_range: tuple[float, float] | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.output_activation == "bounded":
            if self.output_range is None:
                raise ValueError("bounded output requires output_range")
            lo, hi = (float(self.output_range[0]), float(self.output_range[1]))
            if not lo < hi:
                raise ValueError(f"output_range must satisfy lo < hi, got {lo}, {hi}")
            object.__setattr__(self, "output_range", (lo, hi))
        elif self.output_range is not None:
            raise ValueError("output_range only applies to bounded output")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        """Number of weight layers, not counting the input."""
        return len(self.layer_widths) - 1

    def param_count(self) -> int:
        return sum(
            o * i + o for i, o in zip(self.layer_widths[:-1], self.layer_widths[1:])
        )

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "output_range": list(self.output_range) if self.output_range else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        rng = d.get("output_range")
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            hidden_activation=d["hidden_activation"],
            output_activation=d["output_activation"],
            output_range=tuple(rng) if rng else None,
        )


@dataclass(frozen=True)
class _LayerSlot:
    """Index ranges of one layer inside the flat parameter array."""

    w_start: int
    b_start: int
    out_width: int
    in_width: int

    @property
    def w_stop(self) -> int:
        return self.w_start + self.out_width * self.in_width

    @property
    def b_stop(self) -> int:
        return self.b_start + self.out_width


def _layout_for(spec: MlpSpec) -> tuple[_LayerSlot, ...]:
    slots = []
    offset = 0
    for in_w, out_w in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        w_start = offset
        b_start = w_start + out_w * in_w
        slots.append(_LayerSlot(w_start, b_start, out_w, in_w))
        offset = b_start + out_w
    return tuple(slots)


@dataclass
class ParamVector:
    """Flat float64 parameter store with a per-layer weight/bias layout.

    ``weight(l)`` and ``bias(l)`` return views into the flat array, so
    in-place edits through the views are visible in ``values`` and vice
    versa.
    """

    values: np.ndarray
    layout: tuple[_LayerSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be one-dimensional")
        expected = 0
        for slot in self.layout:
            if slot.w_start != expected:
                raise ValueError("layout ranges must be contiguous and ordered")
            expected = slot.b_stop
        if expected != self.values.size:
            raise ValueError(
                f"layout covers {expected} entries, values has {self.values.size}"
            )

    @classmethod
    def zeros_for(cls, spec: MlpSpec) -> "ParamVector":
        layout = _layout_for(spec)
        return cls(np.zeros(spec.param_count()), layout)

    @property
    def size(self) -> int:
        return self.values.size

    def weight(self, layer: int) -> np.ndarray:
        slot = self.layout[layer]
        return self.values[slot.w_start : slot.w_stop].reshape(
            slot.out_width, slot.in_width
        )

    def bias(self, layer: int) -> np.ndarray:
        slot = self.layout[layer]
        return self.values[slot.b_start : slot.b_stop]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform init in +/- 1/sqrt(fan_in), weights and biases alike."""
    params = ParamVector.zeros_for(spec)
    for layer in range(spec.n_layers):
        bound = 1.0 / np.sqrt(params.layout[layer].in_width)
        w = params.weight(layer)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b = params.bias(layer)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return params


def _check_input(spec: MlpSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != spec.input_width:
            raise ShapeError(
                f"layer 0 expects input width {spec.input_width}, got {arr.shape[0]}"
            )
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != spec.input_width:
            raise ShapeError(
                f"layer 0 expects input width {spec.input_width}, got {arr.shape[1]}"
            )
        return arr, False
    raise ShapeError(f"input must be 1-D or 2-D, got ndim={arr.ndim}")


def _forward_cached(spec, params, x2d):
    """Forward pass keeping whatever each activation needs for its gradient."""
    activations = [x2d]
    grads_z = []  # d(activation)/d(pre-activation), elementwise, per layer
    a = x2d
    for layer in range(spec.n_layers):
        z = a @ params.weight(layer).T + params.bias(layer)
        last = layer == spec.n_layers - 1
        if not last:
            if spec.hidden_activation == "tanh":
                a = np.tanh(z)
                grads_z.append(1.0 - a * a)
            else:  # relu
                a = np.maximum(z, 0.0)
                grads_z.append((z > 0.0).astype(np.float64))
        elif spec.output_activation == "identity":
            a = z
            grads_z.append(np.ones_like(z))
        else:  # bounded
            lo, hi = spec.output_range
            t = np.tanh(z)
            a = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t
            grads_z.append(0.5 * (hi - lo) * (1.0 - t * t))
        activations.append(a)
    return activations, grads_z


def forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows.

    Returns an array shaped ``(output_width,)`` for 1-D input and
    ``(batch, output_width)`` for 2-D input.
    """
    x2d, single = _check_input(spec, x)
    activations, _ = _forward_cached(spec, params, x2d)
    y = activations[-1]
    return y[0] if single else y


def backward(
    spec: MlpSpec, params: ParamVector, x: np.ndarray, output_grad: np.ndarray
) -> tuple[ParamVector, np.ndarray]:
    """Gradients of ``sum(output_grad * forward(x))`` via backpropagation.

    ``output_grad`` must match the forward output shape for ``x``.  Returns
    the parameter gradient (summed over the batch for 2-D input) and the
    gradient with respect to ``x``, shaped like ``x``.
    """
    x2d, single = _check_input(spec, x)
    og = np.asarray(output_grad, dtype=np.float64)
    if single:
        if og.shape != (spec.output_width,):
            raise ShapeError(
                f"output_grad shape {og.shape} does not match ({spec.output_width},)"
            )
        og = og[None, :]
    elif og.shape != (x2d.shape[0], spec.output_width):
        raise ShapeError(
            f"output_grad shape {og.shape} does not match "
            f"({x2d.shape[0]}, {spec.output_width})"
        )

    activations, grads_z = _forward_cached(spec, params, x2d)
    grad = ParamVector.zeros_for(spec)
    dz = og * grads_z[-1]
    for layer in range(spec.n_layers - 1, -1, -1):
        grad.weight(layer)[...] = dz.T @ activations[layer]
        grad.bias(layer)[...] = dz.sum(axis=0)
        da = dz @ params.weight(layer)
        if layer > 0:
            dz = da * grads_z[layer - 1]
    input_grad = da
    return grad, input_grad[0] if single else input_grad


@dataclass
class OptimState:
    """Optimizer buffers for one parameter store.

    ``mode`` is ``"adam"`` or ``"plain"`` (vanilla gradient descent).  The
    moment buffers always have the same length as the parameters they serve.
    """

    learning_rate: float
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.mode not in ("adam", "plain"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def for_params(
        cls, params: ParamVector, learning_rate: float = 0.001, mode: str = "adam"
    ) -> "OptimState":
        return cls(
            learning_rate=learning_rate,
            mode=mode,
            m=np.zeros(params.size),
            v=np.zeros(params.size),
        )


def optimizer_step(params: ParamVector, grads: ParamVector, state: OptimState) -> None:
    """Apply one descent step in place and advance ``state.step_count``."""
    if grads.size != params.size:
        raise ShapeError(
            f"gradient size {grads.size} does not match parameter size {params.size}"
        )
    g = grads.values
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient contains non-finite entries")
    if state.m.size != params.size or state.v.size != params.size:
        raise ShapeError("optimizer buffers do not match parameter size")
    state.step_count += 1
    if state.mode == "plain":
        params.values -= state.learning_rate * g
        return
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step_count)
    v_hat = state.v / (1.0 - state.beta2**state.step_count)
    params.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros_like(x).reshape(-1)
        step[i] = h
        step = step.reshape(x.shape)
        flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def directional_derivative_fd(
    f: Callable[[np.ndarray], float], x: np.ndarray, u: np.ndarray, h: float = 1e-5
) -> float:
    """Central-difference derivative of ``f`` along the unit direction ``u``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return float((f(x + h * u) - f(x - h * u)) / (2.0 * h))


def dumps_params(spec: MlpSpec, params: ParamVector) -> bytes:
    """Serialize one network to the versioned binary container.

    Layout: magic ``FWNN``, u16 little-endian format version, u32
    little-endian header length, UTF-8 JSON header (architecture, dtype,
    parameter count), then the raw float64 little-endian parameter values.
    """
    header = dict(spec.to_dict(), dtype="<f8", param_count=params.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<HI", _FORMAT_VERSION, len(blob)))
    out.write(blob)
    out.write(params.values.astype("<f8").tobytes())
    return out.getvalue()


def save_params(path, spec: MlpSpec, params: ParamVector) -> None:
    """Write one network to the container produced by :func:`dumps_params`."""
    with open(path, "wb") as fh:
        fh.write(dumps_params(spec, params))


def load_params(path) -> tuple[MlpSpec, ParamVector]:
    """Read a network written by :func:`save_params`, validating the container."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads_params(raw)


def loads_params(raw: bytes) -> tuple[MlpSpec, ParamVector]:
    buf = io.BytesIO(raw)
    if buf.read(4) != _MAGIC:
        raise CheckpointError("bad magic; not a network checkpoint")
    version, header_len = struct.unpack("<HI", buf.read(6))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    try:
        header = json.loads(buf.read(header_len).decode("utf-8"))
        spec = MlpSpec.from_dict(header)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    count = int(header["param_count"])
    if count != spec.param_count():
        raise CheckpointError(
            f"header claims {count} parameters, spec implies {spec.param_count()}"
        )
    payload = buf.read()
    if len(payload) != 8 * count:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, expected {8 * count}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return spec, ParamVector(values, _layout_for(spec))
