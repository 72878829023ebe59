"""Minimal reverse-mode autodiff core: tensors, a gradient tape, LSTM cells, Adam.

Values are numpy arrays wrapped in :class:`Tensor`.  While a :class:`Tape` is
active, every primitive that touches a tracked tensor appends the result to
the tape together with a closure that propagates gradients to its parents.
`backward()` walks the tape once in reverse creation order (creation order is
topological by construction) and accumulates gradients onto watched leaves.

Storage dtype follows the inputs (training uses float32, derivative probes
build float64 graphs); full reductions always accumulate in float64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of tracked primitive results, usable as a context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()
        return False

    def clear(self):
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
            node.grad = None
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus optional autodiff bookkeeping.

    `watched` marks a leaf whose gradient should be kept after backward
    (parameters).  Non-leaf tensors get `parents`/`vjp` filled by the op that
    created them when a tape is active.
    """

    __slots__ = ("data", "grad", "parents", "vjp", "watched")

    def __init__(self, data, dtype=None, watched: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.watched = watched

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _tracked(t: Tensor) -> bool:
    return t.watched or t.vjp is not None


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = active_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        out.parents = parents
        out.vjp = vjp
        tape.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def vjp(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def vjp(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def vjp(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)

    def vjp(g):
        _accumulate(a, g * y)

    return _record(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = Tensor(np.log(a.data))

    def vjp(g):
        _accumulate(a, g / a.data)

    return _record(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def vjp(g):
        _accumulate(a, g * (1.0 - y * y))

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def vjp(g):
        _accumulate(a, g * y * (1.0 - y))

    return _record(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))

    def vjp(g):
        _accumulate(a, g * mask)

    return _record(out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    mask = (a.data > lo) & (a.data < hi)
    out = Tensor(np.clip(a.data, lo, hi))

    def vjp(g):
        _accumulate(a, g * mask)

    return _record(out, (a,), vjp)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - deliberate, module-local reduction
    out = Tensor(np.array(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype))

    def vjp(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _record(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.array(np.sum(a.data, dtype=np.float64) / n, dtype=a.data.dtype))

    def vjp(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False))

    return _record(out, (a,), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [np.s_[:]] * a.data.ndim
    idx[axis] = np.s_[start:stop]
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _record(out, (a,), vjp)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def vjp(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            idx = [np.s_[:]] * g.ndim
            idx[axis] = np.s_[s:e]
            _accumulate(p, g[tuple(idx)])

    return _record(out, tuple(parts), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())

    def vjp(g):
        _accumulate(a, g.T)

    return _record(out, (a,), vjp)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) onto every watched leaf; clears the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None or loss.vjp is None:
        raise RuntimeError("backward called outside an active tape or on an untracked loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        node.vjp(node.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


class LstmParams:
    """Fused-gate LSTM weights: W of shape (in+hidden, 4*hidden), b of (4*hidden,).

    Gate column order is input, forget, candidate, output.
    """

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias
        self.hidden = weight.data.shape[1] // 4

    @property
    def input_dim(self) -> int:
        return self.weight.data.shape[0] - self.hidden


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams):
    """One LSTM cell update on a (batch, dim) slice; returns (h_t, c_t)."""
    hd = params.hidden
    z = add(matmul(concat([x_t, h_prev], axis=1), params.weight), params.bias)
    gate_i = sigmoid(slice_axis(z, 1, 0, hd))
    gate_f = sigmoid(slice_axis(z, 1, hd, 2 * hd))
    cand = tanh(slice_axis(z, 1, 2 * hd, 3 * hd))
    gate_o = sigmoid(slice_axis(z, 1, 3 * hd, 4 * hd))
    c_t = add(mul(gate_f, c_prev), mul(gate_i, cand))
    h_t = mul(gate_o, tanh(c_t))
    return h_t, c_t


# ---------------------------------------------------------------------------
# parameters and Adam
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape: tuple, dtype=np.float32) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1] if len(shape) > 1 else shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named parameter tensors in fixed registration order, with Adam state."""

    def __init__(self):
        self._order: list[str] = []
        self._tensors: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(values, watched=True)
        self._order.append(name)
        self._tensors[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._order)

    def items(self):
        for name in self._order:
            yield name, self._tensors[name]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for n, t in self._tensors.items():
            if t.data.shape != values[n].shape:
                raise ValueError(f"shape mismatch loading {n!r}")
            t.data = values[n].astype(t.data.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, t in self.items():
            out.add(n, t.data.astype(dtype))
        return out

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self._tensors.values()]))


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update in place; zeroes gradients afterwards."""
    for name, t in store.items():
        if t.grad is None:
            raise RuntimeError(f"adam_step: parameter {name!r} has no gradient")
        g = t.grad.astype(t.data.dtype, copy=False)
        store._steps[name] += 1
        step = store._steps[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        t.grad = None


# ---------------------------------------------------------------------------
# checkpoint serialization: model.json + params.bin
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(directory, store: ParamStore, config: dict):
    """Write `model.json` (config + ordered param names/shapes) and `params.bin`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in store.items()],
    }
    (directory / "model.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(directory / "params.bin", "wb") as fh:
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(directory):
    """Read a checkpoint directory; returns (config dict, ParamStore)."""
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
    raw = (directory / "params.bin").read_bytes()
    store = ParamStore()
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        store.add(entry["name"], vals.copy())
        offset += 4 * n
    if offset != len(raw):
        raise ValueError("params.bin length does not match the declared shapes")
    return manifest["config"], store
