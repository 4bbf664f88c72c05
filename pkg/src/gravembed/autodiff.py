"""Minimal dense reverse-mode tensor engine with Adam and finite-difference checks.

Everything is float64 and row-major. Every op validates that its result is
finite; overflow raises :class:`NonFiniteError` instead of propagating NaN.
Scalar reductions that feed training objectives use :func:`fsum_all`, whose
compensated summation is independent of operand order, so relabeling rows of
the inputs cannot perturb a loss value.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


class StoreFormatError(ValueError):
    """Parameter-store file is malformed, corrupted, or of an unknown version."""


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return data


class Tensor:
    """A dense array node in a reverse-mode graph.

    Custom ops may construct Tensors directly: pass the parent tensors and a
    closure ``backward(grad)`` that accumulates into each parent's ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Reverse-accumulate d(self)/d(leaf) for every reachable leaf; self must be scalar."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to a parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _node(data, op, parents, backward):
    req = any(p.requires_grad for p in parents)
    t = Tensor(_finite(np.asarray(data, dtype=np.float64), op), requires_grad=req)
    if req:
        t._parents = tuple(p for p in parents if p.requires_grad)
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# Op set
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _node(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _node(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _node(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _node(out_data, "div", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} x {b.data.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _node(out_data, "matmul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.grad += g * c

    return _node(a.data * c, "scale", (a,), backward)


def add_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.grad += g

    return _node(a.data + c, "add_const", (a,), backward)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    return _node(out_data, "relu", (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * (1.0 - out_data * out_data)

    return _node(out_data, "tanh", (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a.grad += g * out_data * (1.0 - out_data)

    return _node(out_data, "sigmoid", (a,), backward)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor; shift-invariant and numerically stable."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=1, keepdims=True)
            a.grad += out_data * (g - inner)

    return _node(out_data, "softmax_rows", (a,), backward)


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("row_sum expects a 2-D tensor")
    out_data = a.data.sum(axis=1)

    def backward(g):
        if a.requires_grad:
            a.grad += np.repeat(g[:, None], a.data.shape[1], axis=1)

    return _node(out_data, "row_sum", (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.grad += np.full(a.data.shape, float(g))

    return _node(a.data.sum(), "sum_all", (a,), backward)


def fsum_all(a) -> Tensor:
    """Order-insensitive total via compensated summation.

    Use for reductions over vertices so that relabeling cannot change the
    result; for large buffers where operand order is fixed, prefer sum_all.
    """
    a = as_tensor(a)
    total = math.fsum(a.data.ravel().tolist())

    def backward(g):
        if a.requires_grad:
            a.grad += np.full(a.data.shape, float(g))

    return _node(total, "fsum_all", (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _node(out_data, "gather_rows", (a,), backward)


# ---------------------------------------------------------------------------
# Parameter store, Adam, gradient checking
# ---------------------------------------------------------------------------

_STORE_MAGIC = b"GEPSTORE"
_STORE_VERSION = 1


class ParamStore:
    """Named parameter tensors with gradients and Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict):
        for k, t in self._params.items():
            arr = np.asarray(values[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for parameter {k!r}")
            t.data[...] = arr

    # -- persistence: header JSON + raw little-endian float64 payload --

    def to_bytes(self) -> bytes:
        records = []
        payload = bytearray()
        for name in sorted(self._params):
            for suffix, arr in (
                ("", self._params[name].data),
                ("#m", self._m[name]),
                ("#v", self._v[name]),
            ):
                raw = arr.astype("<f8").tobytes()
                records.append(
                    {"name": name + suffix, "shape": list(arr.shape),
                     "offset": len(payload), "nbytes": len(raw)}
                )
                payload.extend(raw)
        header = {
            "version": _STORE_VERSION,
            "step": self.step_count,
            "tensors": records,
            "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        }
        head = json.dumps(header).encode("utf-8")
        return _STORE_MAGIC + struct.pack("<Q", len(head)) + head + bytes(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if blob[: len(_STORE_MAGIC)] != _STORE_MAGIC:
            raise StoreFormatError("not a parameter store file")
        off = len(_STORE_MAGIC)
        (hlen,) = struct.unpack("<Q", blob[off:off + 8])
        off += 8
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        if header.get("version") != _STORE_VERSION:
            raise StoreFormatError(
                f"unsupported parameter store version {header.get('version')!r}"
            )
        payload = blob[off:]
        digest = hashlib.sha256(payload).hexdigest()
        if digest != header["payload_sha256"]:
            raise StoreFormatError("parameter store checksum mismatch")
        arrays = {}
        for rec in header["tensors"]:
            raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
            arrays[rec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).copy()
        store = cls()
        for name in sorted(n for n in arrays if "#" not in n):
            store.add(name, arrays[name])
            store._m[name] = arrays[name + "#m"]
            store._v[name] = arrays[name + "#v"]
        store.step_count = int(header["step"])
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def adam_step(
    params: ParamStore,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay is applied as a plain ``lr * wd * theta`` shrinkage before
    the Adam delta (it never enters the moment estimates). Gradients are
    zeroed after the step.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params.step_count += 1
    t = params.step_count
    for name, p in params.items():
        g = p.grad
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        with np.errstate(over="ignore", invalid="ignore"):
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        _finite(p.data, "adam_step")
    params.zero_grads()


class GradCheckError(AssertionError):
    """Analytic gradients disagree with finite differences beyond tolerance."""


def grad_check(loss_fn, params: ParamStore, step: float = 1e-5, tolerance=None) -> float:
    """Compare analytic gradients of ``loss_fn(params)`` against central differences.

    Returns the worst relative error over every entry of every parameter,
    with denominator ``max(|analytic|, |numeric|, 1e-8)``. ``loss_fn`` must be
    deterministic (verified by evaluating it twice); when ``tolerance`` is
    given, a worst error above it raises :class:`GradCheckError`.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    v1 = loss_fn(params).item()
    v2 = loss_fn(params).item()
    if v1 != v2:
        raise ValueError("loss_fn is not deterministic: repeated evaluations differ")

    params.zero_grads()
    loss = loss_fn(params)
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grads()

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = loss_fn(params).item()
            flat[k] = orig - step
            f_minus = loss_fn(params).item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[k])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    if tolerance is not None and worst > tolerance:
        raise GradCheckError(f"gradient check failed: max rel err {worst:.3e} > {tolerance:.3e}")
    return worst
