"""Small dense-network engine with exact first and second derivatives.

Parameters live in one flat float64 array. For every layer the weight
matrix (fan_out x fan_in, row-major) is stored first, followed by the bias
vector, so the incoming weights of one unit form a contiguous row.

Hidden units can be masked with inverted-dropout multipliers: a value of
0 removes the unit, a value of 1/(1-d) keeps it and rescales the
activation. Masks are flat arrays over all hidden units, in layer order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CapacityError, DomainError, NumericalError, StructuralError

# 1 MAC = 2 FLOPs, 1 FLOP per bias add, 1 FLOP per hidden activation,
# backward pass costs twice the forward pass.
MAC_FLOPS = 2
BACKWARD_FACTOR = 2
BYTES_PER_PARAM = 4


class LayerSlot(NamedTuple):
    w_offset: int
    b_offset: int
    fan_in: int
    fan_out: int

    @property
    def stop(self) -> int:
        return self.b_offset + self.fan_out


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a rectifier MLP with a softmax cross-entropy head."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    layers: tuple[LayerSlot, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise StructuralError("a model needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise StructuralError(f"layer sizes must be positive, got {sizes}")
        if self.activation != "relu":
            raise StructuralError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        slots = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            b_offset = offset + fan_in * fan_out
            slots.append(LayerSlot(offset, b_offset, fan_in, fan_out))
            offset = b_offset + fan_out
        object.__setattr__(self, "layers", tuple(slots))

    @property
    def n_params(self) -> int:
        return self.layers[-1].stop

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def n_hidden_units(self) -> int:
        return sum(self.hidden_sizes)

    def hidden_slices(self) -> list[slice]:
        """Slices of the flat unit-mask array belonging to each hidden layer."""
        out, start = [], 0
        for size in self.hidden_sizes:
            out.append(slice(start, start + size))
            start += size
        return out

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer into a flat parameter (or gradient) array."""
        values = np.asarray(values)
        if values.shape != (self.n_params,):
            raise StructuralError(
                f"parameter vector has shape {values.shape}, expected ({self.n_params},)"
            )
        return [
            (
                values[s.w_offset : s.b_offset].reshape(s.fan_out, s.fan_in),
                values[s.b_offset : s.stop],
            )
            for s in self.layers
        ]

    def index_map(self) -> list[list[tuple[slice, int]]]:
        """For each layer, each unit's (incoming-weight slice, bias index)."""
        return [
            [
                (slice(s.w_offset + j * s.fan_in, s.w_offset + (j + 1) * s.fan_in), s.b_offset + j)
                for j in range(s.fan_out)
            ]
            for s in self.layers
        ]

    def block_slice(self, block_id: int) -> slice:
        """Contiguous parameter range of one layer; negative ids count from the end."""
        n = len(self.layers)
        if not -n <= block_id < n:
            raise StructuralError(f"block {block_id} out of range for {n} layers")
        s = self.layers[block_id]
        return slice(s.w_offset, s.stop)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """He-normal weights for hidden layers, LeCun-normal for the head, zero biases."""
        values = np.zeros(self.n_params)
        for i, (W, _) in enumerate(self.unpack(values)):
            gain = 1.0 if i == len(self.layers) - 1 else 2.0
            W[...] = rng.normal(0.0, np.sqrt(gain / W.shape[1]), size=W.shape)
        return values

    def coordinate_keep(self, unit_keep: np.ndarray) -> np.ndarray:
        """Boolean mask over parameters that survive in the sub-model.

        A coordinate is removed when the unit it feeds (incoming weights,
        bias) or the unit it reads from (outgoing weights) is dropped.
        """
        unit_keep = np.asarray(unit_keep, dtype=bool)
        if unit_keep.shape != (self.n_hidden_units,):
            raise StructuralError(
                f"unit mask has shape {unit_keep.shape}, expected ({self.n_hidden_units},)"
            )
        keep = np.ones(self.n_params, dtype=bool)
        per_layer = [unit_keep[s] for s in self.hidden_slices()]
        for i, (W, b) in enumerate(self.unpack(keep)):
            if i < len(per_layer):
                W[~per_layer[i], :] = False
                b[~per_layer[i]] = False
            if i > 0:
                W[:, ~per_layer[i - 1]] = False
        return keep

    def flops_per_sample(self, unit_keep: np.ndarray | None = None) -> float:
        """Forward FLOPs for one sample; fractional keeps give expected counts."""
        counts = self._kept_per_layer(unit_keep)
        total = 0.0
        last = len(self.layers) - 1
        for i in range(len(self.layers)):
            k_in, k_out = counts[i], counts[i + 1]
            total += MAC_FLOPS * k_in * k_out + k_out
            if i < last:
                total += k_out
        return total

    def kept_params(self, unit_keep: np.ndarray | None = None) -> float:
        """Parameter count of the sub-model; fractional keeps give expected counts."""
        counts = self._kept_per_layer(unit_keep)
        return float(sum(counts[i + 1] * (counts[i] + 1) for i in range(len(self.layers))))

    def _kept_per_layer(self, unit_keep: np.ndarray | None) -> list[float]:
        if unit_keep is None:
            return [float(s) for s in self.layer_sizes]
        unit_keep = np.asarray(unit_keep, dtype=float)
        if unit_keep.shape != (self.n_hidden_units,):
            raise StructuralError(
                f"unit mask has shape {unit_keep.shape}, expected ({self.n_hidden_units},)"
            )
        inner = [float(unit_keep[s].sum()) for s in self.hidden_slices()]
        return [float(self.input_dim), *inner, float(self.class_count)]


@dataclass
class FlopMeter:
    forward_flops: int = 0
    backward_flops: int = 0

    def add(self, forward: int, backward: int = 0) -> None:
        if forward < 0 or backward < 0:
            raise DomainError("FLOP increments must be non-negative")
        self.forward_flops += int(forward)
        self.backward_flops += int(backward)

    @property
    def total_flops(self) -> int:
        return self.forward_flops + self.backward_flops

    @property
    def cumulative_mflops(self) -> float:
        return self.total_flops / 1e6


@dataclass(frozen=True)
class HessianBlock:
    """Hessian restricted to one layer's parameters, with its spectrum.

    ``eigenvalues`` holds only the numerically non-zero part of the
    spectrum (ascending), so ``rank_estimate == len(eigenvalues)``.
    """

    block: np.ndarray
    block_id: int
    eigenvalues: np.ndarray
    rank_estimate: int
    full_spectrum: np.ndarray

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, block_id: int = -1, rank_tol: float = 1e-6) -> "HessianBlock":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise StructuralError(f"Hessian block must be square, got {matrix.shape}")
        scale = np.abs(matrix).max() if matrix.size else 0.0
        if np.abs(matrix - matrix.T).max(initial=0.0) > 1e-8 * max(scale, 1e-300):
            raise NumericalError("Hessian block is not symmetric")
        sym = 0.5 * (matrix + matrix.T)
        try:
            spectrum = np.linalg.eigvalsh(sym)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed: {exc}") from exc
        top = np.abs(spectrum).max(initial=0.0)
        retained = spectrum[np.abs(spectrum) > rank_tol * top] if top > 0 else spectrum[:0]
        return cls(sym, block_id, retained, int(retained.size), spectrum)


def _check_batch(spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(f"features have shape {x.shape}, expected (B, {spec.input_dim})")
    if x.shape[0] == 0:
        raise StructuralError("batch is empty")
    if y.shape != (x.shape[0],):
        raise StructuralError(f"labels have shape {y.shape}, expected ({x.shape[0]},)")
    if y.min() < 0 or y.max() >= spec.class_count:
        raise StructuralError(f"labels must lie in [0, {spec.class_count})")
    return x, y.astype(np.intp)


def _check_mask(spec: ModelSpec, mask: np.ndarray | None) -> list[np.ndarray] | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (spec.n_hidden_units,):
        raise StructuralError(f"mask has shape {mask.shape}, expected ({spec.n_hidden_units},)")
    return [mask[s] for s in spec.hidden_slices()]


def _pass_flops(spec: ModelSpec, batch: int, masks: list[np.ndarray] | None) -> int:
    keep = None
    if masks:
        keep = np.concatenate([m != 0 for m in masks])
    return int(round(batch * spec.flops_per_sample(keep)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class _Trace(NamedTuple):
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    logp: np.ndarray


def _run(spec: ModelSpec, params: np.ndarray, x: np.ndarray, masks: list[np.ndarray] | None) -> _Trace:
    layers = spec.unpack(params)
    inputs, pre = [], []
    a = x
    for i, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W.T + b
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite pre-activation in layer {i} (max |z| = {np.nanmax(np.abs(z)):.3g})")
        pre.append(z)
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0)
            if masks is not None:
                a = a * masks[i]
    return _Trace(inputs, pre, _log_softmax(pre[-1]))


def forward(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray | None = None,
    meter: FlopMeter | None = None,
) -> tuple[np.ndarray, float, FlopMeter]:
    """Logits and mean cross-entropy; FLOPs counted for kept units only."""
    x, y = _check_batch(spec, x, y)
    masks = _check_mask(spec, mask)
    trace = _run(spec, params, x, masks)
    loss = float(-trace.logp[np.arange(len(y)), y].mean())
    meter = meter if meter is not None else FlopMeter()
    meter.add(_pass_flops(spec, len(y), masks))
    return trace.pre[-1], loss, meter


def value_and_grad(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray | None = None,
    meter: FlopMeter | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient w.r.t. every parameter."""
    x, y = _check_batch(spec, x, y)
    masks = _check_mask(spec, mask)
    trace = _run(spec, params, x, masks)
    B = len(y)
    loss = float(-trace.logp[np.arange(B), y].mean())

    grad = np.zeros(spec.n_params)
    layers = spec.unpack(params)
    grads = spec.unpack(grad)
    g = np.exp(trace.logp)
    g[np.arange(B), y] -= 1.0
    g /= B
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = grads[i]
        gW[...] = g.T @ trace.inputs[i]
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[i][0]
            g = g * (trace.pre[i - 1] > 0)
            if masks is not None:
                g = g * masks[i - 1]
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    if meter is not None:
        f = _pass_flops(spec, B, masks)
        meter.add(f, BACKWARD_FACTOR * f)
    return loss, grad


def backward(spec, params, x, y, mask=None, meter=None) -> np.ndarray:
    return value_and_grad(spec, params, x, y, mask, meter)[1]


def hvp(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    directions: np.ndarray,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Exact Hessian-vector products H @ v for each row v of ``directions``.

    Uses the R-operator (forward-over-reverse) on the rectifier network;
    rectifier second derivatives vanish almost everywhere.
    """
    x, y = _check_batch(spec, x, y)
    masks = _check_mask(spec, mask)
    V = np.atleast_2d(np.asarray(directions, dtype=float))
    if V.shape[1] != spec.n_params:
        raise StructuralError(f"directions have width {V.shape[1]}, expected {spec.n_params}")
    K, B = V.shape[0], len(y)
    layers = spec.unpack(params)
    dirs = [
        (V[:, s.w_offset : s.b_offset].reshape(K, s.fan_out, s.fan_in), V[:, s.b_offset : s.stop])
        for s in spec.layers
    ]
    trace = _run(spec, params, x, masks)
    gates = [(z > 0).astype(float) * (1.0 if masks is None else masks[i]) for i, z in enumerate(trace.pre[:-1])]

    # forward R-pass: directional derivatives of layer inputs and pre-activations
    r_in: list[np.ndarray | None] = [None]
    r_pre = []
    for i, (W, _) in enumerate(layers):
        dW, db = dirs[i]
        rz = np.einsum("bi,koi->kbo", trace.inputs[i], dW) + db[:, None, :]
        if r_in[i] is not None:
            rz += r_in[i] @ W.T
        r_pre.append(rz)
        if i < len(layers) - 1:
            r_in.append(rz * gates[i])

    p = np.exp(trace.logp)
    g = p.copy()
    g[np.arange(B), y] -= 1.0
    g /= B
    rz = r_pre[-1]
    rg = (p * rz - p * (p * rz).sum(axis=-1, keepdims=True)) / B

    out = np.zeros((K, spec.n_params))
    for i in range(len(layers) - 1, -1, -1):
        s = spec.layers[i]
        rgW = np.einsum("kbo,bi->koi", rg, trace.inputs[i])
        if r_in[i] is not None:
            rgW += np.einsum("bo,kbi->koi", g, r_in[i])
        out[:, s.w_offset : s.b_offset] = rgW.reshape(K, -1)
        out[:, s.b_offset : s.stop] = rg.sum(axis=1)
        if i > 0:
            W = layers[i][0]
            rga = rg @ W + np.einsum("bo,koi->kbi", g, dirs[i][0])
            g = (g @ W) * gates[i - 1]
            rg = rga * gates[i - 1]
    return out


def hessian_block(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    block_id: int = -1,
    cap: int = 512,
    rank_tol: float = 1e-6,
    chunk: int = 64,
) -> HessianBlock:
    """Exact Hessian of the mean loss over (x, y) restricted to one layer block."""
    sl = spec.block_slice(block_id)
    dim = sl.stop - sl.start
    if dim > cap:
        raise CapacityError(f"Hessian block of dimension {dim} exceeds cap {cap}")
    H = np.empty((dim, dim))
    for start in range(0, dim, chunk):
        stop = min(start + chunk, dim)
        V = np.zeros((stop - start, spec.n_params))
        V[np.arange(stop - start), sl.start + np.arange(start, stop)] = 1.0
        H[start:stop] = hvp(spec, params, x, y, V)[:, sl]
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite Hessian entries")
    return HessianBlock.from_matrix(H, block_id, rank_tol)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in SGD step")
    return np.asarray(params, dtype=float) - lr * grad


def decayed_lr(lr0: float, decay: float, step: int) -> float:
    """Exponentially decayed rate ``lr0 * decay**step``."""
    return lr0 * decay**step


def local_sgd(
    spec: ModelSpec,
    params: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    meter: FlopMeter | None = None,
) -> np.ndarray:
    """Mini-batch SGD over ``epochs`` reshuffled passes of the local data."""
    w = np.array(params, dtype=float)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, g = value_and_grad(spec, w, x[idx], y[idx], mask, meter)
            w = sgd_step(w, g, lr)
    return w


def predict(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(f"features have shape {x.shape}, expected (B, {spec.input_dim})")
    if len(x) == 0:
        return np.zeros(0, dtype=np.intp)
    return _run(spec, params, x, None).pre[-1].argmax(axis=1)


def numerical_gradient(fn, w: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function; the test-side oracle."""
    w = np.array(w, dtype=float)
    out = np.empty_like(w)
    for i in range(w.size):
        old = w[i]
        w[i] = old + eps
        hi = fn(w)
        w[i] = old - eps
        lo = fn(w)
        w[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out


def as_direction_block(spec: ModelSpec, block_id: int, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Embed block-local vectors into full-length parameter directions."""
    sl = spec.block_slice(block_id)
    out = np.zeros((len(vectors), spec.n_params))
    for k, v in enumerate(vectors):
        out[k, sl] = v
    return out
