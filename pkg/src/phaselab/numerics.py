"""Dense float64 tensors with a reverse-mode tape for the Q-network graphs.

The operator set is exactly what the phase-competition network needs: affine
maps, 1x1 convolutions over (phase, opponent) cells, ReLU, concatenation,
gathers, element-wise product with broadcasting, axis sums, and a masked
Huber loss. Every op records onto an explicit :class:`Tape`; ``backward``
walks the tape once in reverse and returns gradients keyed by name.

Tensors are immutable values: ops never mutate their inputs and always
allocate fresh output arrays. A tape is confined to a single forward/backward
pass on one thread.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

# When True, ops reject non-finite inputs (slow; meant for tests/debugging).
debug_checks = False


class Tensor:
    """Immutable float64 array value."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


@dataclass(frozen=True, eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._nodes.append(_Node(out=out, inputs=inputs, vjp=vjp))


def _check_finite(name: str, *tensors: Tensor) -> None:
    if debug_checks:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"{name}: non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _matmul_bias(opname: str, x: Tensor, w: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"{opname}: incompatible shapes x{x.shape} w{w.shape} b{b.shape}"
        )
    _check_finite(opname, x, w, b)
    cin, cout = w.data.shape
    x2 = x.data.reshape(-1, cin)  # one flat gemm beats many small batched ones
    out = Tensor._wrap((x2 @ w.data + b.data).reshape(x.data.shape[:-1] + (cout,)))
    if tape is not None:
        def vjp(g: np.ndarray):
            g2 = g.reshape(-1, cout)
            gx = (g2 @ w.data.T).reshape(x.data.shape)
            gw = x2.T @ g2
            gb = g2.sum(axis=0)
            return gx, gw, gb

        tape._record(out, (x, w, b), vjp)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x @ w + b over the last axis."""
    return _matmul_bias("affine", x, w, b, tape)


def conv1x1(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-cell affine map over the channel axis of a (.., phase, opponent, C) volume."""
    if x.data.ndim < 2:
        raise ValueError(f"conv1x1: volume must have at least 2 dims, got {x.shape}")
    return _matmul_bias("conv1x1", x, w, b, tape)


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    _check_finite("relu", x)
    out = Tensor._wrap(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0
        tape._record(out, (x,), lambda g: (g * mask,))
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_finite("add", a, b)
    out = Tensor._wrap(a.data + b.data)
    if tape is not None:
        tape._record(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )
    return out


def mul_elem(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_finite("mul_elem", a, b)
    out = Tensor._wrap(a.data * b.data)
    if tape is not None:
        tape._record(
            out, (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )
    return out


def concat(xs: Sequence[Tensor], axis: int, tape: Tape | None = None) -> Tensor:
    xs = tuple(xs)
    _check_finite("concat", *xs)
    out = Tensor._wrap(np.concatenate([x.data for x in xs], axis=axis))
    if tape is not None:
        sizes = [x.data.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        tape._record(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def take(x: Tensor, indices: np.ndarray, axis: int, tape: Tape | None = None) -> Tensor:
    """Gather slices of ``x`` along ``axis`` by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= x.data.shape[axis]):
        raise ValueError(f"take: indices out of range for axis {axis} of {x.shape}")
    out = Tensor._wrap(np.take(x.data, idx, axis=axis))
    if tape is not None:
        # Scatter-add as a matmul with a one-hot selection matrix; much faster
        # than np.add.at and handles duplicate indices correctly.
        src = x.data.shape[axis]
        flat = idx.ravel()
        select = np.zeros((src, flat.size))
        select[flat, np.arange(flat.size)] = 1.0
        pre = int(np.prod(x.data.shape[:axis], dtype=np.int64))
        post = int(np.prod(x.data.shape[axis + 1 :], dtype=np.int64))

        def vjp(g: np.ndarray):
            g3 = g.reshape(pre, flat.size, post)
            return (np.matmul(select, g3).reshape(x.data.shape),)

        tape._record(out, (x,), vjp)
    return out


def embed(table: Tensor, indices: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Row lookup: ``out[...] = table[indices[...]]``."""
    return take(table, indices, axis=0, tape=tape)


def sum_axis(x: Tensor, axis: int, tape: Tape | None = None) -> Tensor:
    _check_finite("sum_axis", x)
    out = Tensor._wrap(x.data.sum(axis=axis))
    if tape is not None:
        tape._record(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),))
    return out


def sum_axis_canonical(x: Tensor, axis: int, tape: Tape | None = None) -> Tensor:
    """Axis sum accumulated in value-sorted order.

    Permuting slices along the axis leaves the result bitwise unchanged
    (the sorted sequence is the same), which keeps exact Q-value ties stable
    under symmetry relabelling of the opponent enumeration.
    """
    _check_finite("sum_axis_canonical", x)
    out = Tensor._wrap(np.sort(x.data, axis=axis).sum(axis=axis))
    if tape is not None:
        tape._record(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),))
    return out


def reshape(x: Tensor, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))
    if tape is not None:
        tape._record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def huber_loss(
    pred: Tensor,
    target: Tensor,
    mask: Tensor,
    delta: float = 1.0,
    tape: Tape | None = None,
) -> Tensor:
    """Masked Huber loss, averaged over the leading (batch) axis.

    ``loss = sum(mask * H_delta(pred - target)) / pred.shape[0]`` where the
    mask both selects entries and carries any per-item weights.
    """
    _check_finite("huber_loss", pred, target, mask)
    if delta <= 0:
        raise ValueError("huber_loss: delta must be positive")
    r = pred.data - target.data
    absr = np.abs(r)
    h = np.where(absr <= delta, 0.5 * r * r, delta * (absr - 0.5 * delta))
    batch = pred.data.shape[0]
    out = Tensor._wrap(np.asarray((mask.data * h).sum() / batch))
    if tape is not None:
        def vjp(g: np.ndarray):
            dr = np.clip(r, -delta, delta) * mask.data * (float(g) / batch)
            return (
                _unbroadcast(dr, pred.data.shape),
                _unbroadcast(-dr, target.data.shape),
                _unbroadcast(h * (float(g) / batch), mask.data.shape),
            )

        tape._record(out, (pred, target, mask), vjp)
    return out


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape`` for each named tensor.

    Tensors not reachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.out is loss for node in tape._nodes):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for tensor, g_in in zip(node.inputs, node.vjp(g_out)):
            if g_in is None:
                continue
            acc = grads.get(id(tensor))
            grads[id(tensor)] = g_in if acc is None else acc + g_in
    return {
        name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.data.shape)
        for name, t in wrt.items()
    }


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Mapping[str, Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One Adam step with bias correction; returns fresh parameter tensors."""
    if set(params) != set(grads):
        raise ValueError("params and grads must have identical key sets")
    state.step += 1
    t = state.step
    out: dict[str, Tensor] = {}
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        out[name] = Tensor._wrap(params[name].data - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


# --- checkpoints --------------------------------------------------------------

def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write named arrays to ``path`` (raw little-endian) plus a JSON manifest.

    The manifest sits next to the binary with a ``.json`` suffix and lists
    (name, shape, dtype, byte offset) per array in name order.
    """
    path = Path(path)
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    path.write_bytes(b"".join(blobs))
    path.with_suffix(".json").write_text(
        json.dumps({"byte_order": "little", "arrays": manifest}, indent=2, sort_keys=True)
    )
    return path


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out
