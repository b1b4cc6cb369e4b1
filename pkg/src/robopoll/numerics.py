"""Small reverse-mode autodiff over numpy arrays, plus Adam and checkpoints.

Operations always compute their primal values. They are recorded only while
a ``Tape`` is active and at least one input requires a gradient, so rollout
code runs tape-free on the same functions. A tape can be swept once::

    with Tape() as tape:
        loss = mean(square(sub(matmul(x, w), y)))
    grads = tape.backward(loss, {"w": w})
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import ContractViolation


class NumericError(ArithmeticError):
    """A non-finite value reached a node boundary."""


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite entries in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_active: list["Tape"] = []


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.swept = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def backward(self, loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Reverse sweep from scalar ``loss``; returns gradients for ``leaves``."""
        if self.swept:
            raise RuntimeError("tape already swept; record the computation again")
        if loss.data.size != 1:
            raise ContractViolation("backward needs a scalar loss")
        self.swept = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        self.nodes.clear()
        return {
            name: grads.get(id(t), np.zeros_like(t.data)).astype(t.data.dtype, copy=False)
            for name, t in leaves.items()
        }


def _make(data, parents: Sequence[Tensor], backward_fn, check: bool = True) -> Tensor:
    out = Tensor(data, _check=check)
    if _active and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _active[-1].nodes.append(out)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    flat = b.data.ndim == 2 and a.data.ndim > 2

    def back(g):
        if flat:
            # weight matrix shared over all leading axes: flat GEMMs
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data
    return _make(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


add_bias = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def mean_pool_rows(a: Tensor) -> Tensor:
    """Mean over the token axis (second to last)."""
    return mean(a, axis=-2)


def embedding_lookup(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[idx], (table,), back)


def dot_product_rows(a: Tensor, b: Tensor) -> Tensor:
    """``out[..., m, n] = <a[..., m, :], b[..., n, :]>``."""
    return matmul(a, swapaxes(b))


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[...] = a[..., idx[...]]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# masked categorical distributions


def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Log-probabilities over the last axis restricted to ``mask``.

    Masked entries hold ``-inf`` and receive exactly zero gradient.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("every distribution needs at least one feasible entry")
    z = np.where(mask, logits.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        g = np.where(mask, g, 0.0)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), back, check=False)


def categorical_entropy(logp: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    lp = np.where(mask, logp.data, 0.0)
    p = np.where(mask, np.exp(lp), 0.0)
    return _make(-(p * lp).sum(axis=-1), (logp,), lambda g: (np.where(mask, -g[..., None] * p * (lp + 1.0), 0.0),))


def categorical_log_prob(logp: Tensor, idx: np.ndarray) -> Tensor:
    picked = np.take_along_axis(logp.data, np.asarray(idx, dtype=np.int64)[..., None], axis=-1)
    if not np.all(np.isfinite(picked)):
        raise ContractViolation("log_prob requested for an infeasible index")
    return take_along_last(logp, idx)


def categorical_sample(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of ``logp`` (masked entries never selected)."""
    p = np.exp(logp)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cdf[..., -1:]
    pick = (cdf <= u).sum(axis=-1)
    # guard the right edge against round-off landing on a masked tail
    last_feasible = p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)
    return np.minimum(pick, last_feasible)


def masked_argmax(logp: np.ndarray) -> np.ndarray:
    """Highest-probability entry, smallest index on ties."""
    return np.argmax(logp, axis=-1)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Named parameter arrays with Adam moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self, prefix: str = "") -> dict[str, Tensor]:
        return {n: Tensor(v, requires_grad=True, _check=False) for n, v in self.params.items() if n.startswith(prefix)}

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for n, v in self.params.items():
            out.params[n] = v.copy()
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
        out.step = self.step
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for n, v in self.params.items():
            out.add(n, v)
        return out

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


def adam_step(
    store: ParameterStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """Bias-corrected Adam, in place; returns ``store`` for chaining."""
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise ContractViolation(f"gradient keys do not match parameters: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ContractViolation(f"gradient shape mismatch for {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return store


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        f = max_norm / norm
        return {k: g * f for k, g in grads.items()}, norm
    return dict(grads), norm


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"RPCKPT\0\0"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sII64sQ")


class CheckpointError(ContractViolation):
    pass


def dumps_store(store: ParameterStore, scenario_hash: str, iteration: int = 0) -> bytes:
    chunks = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(store.params), scenario_hash.encode("ascii"), iteration)]
    for name, value in store.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.astype("<f4").tobytes())
    return b"".join(chunks)


def loads_store(blob: bytes, dtype=np.float32) -> tuple[ParameterStore, str, int]:
    """Inverse of ``dumps_store``; returns ``(store, scenario_hash, iteration)``."""
    try:
        magic, ver, count, h, iteration = _CKPT_HEAD.unpack_from(blob)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if ver != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ver}")
    store = ParameterStore(dtype)
    off = _CKPT_HEAD.size
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(blob):
                raise CheckpointError(f"parameter {name!r} truncated")
            store.add(name, np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape))
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("corrupted checkpoint record") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after the last parameter")
    return store, h.decode("ascii"), iteration


def save_store(store: ParameterStore, path: str | Path, scenario_hash: str, iteration: int = 0) -> None:
    Path(path).write_bytes(dumps_store(store, scenario_hash, iteration))


def load_store(path: str | Path, expected_hash: str | None = None, dtype=np.float32):
    store, h, iteration = loads_store(Path(path).read_bytes(), dtype)
    if expected_hash is not None and h != expected_hash:
        raise CheckpointError("checkpoint was trained on a different scenario")
    return store, h, iteration
