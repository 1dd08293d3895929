"""Minimal float64 layer kit with hand-written backpropagation.

Provides the parameter store (with cross-network weight sharing), the layer
kinds the two networks are assembled from, plain SGD with momentum and weight
decay, a central-difference gradient checker, and exact checkpoint IO.

Everything computes in 64-bit floats and batch-first shapes: dense layers see
``(n, features)``, convolutional layers ``(n, channels, height, width)``.
Shape mismatches raise instead of broadcasting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or parameter shape does not match what a layer expects."""


class GradientError(ValueError):
    """A gradient is non-finite or structurally inconsistent."""


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameter arrays with an aliasing table for weight sharing.

    Logical names resolve through the sharing table to a single physical
    array, so two network blocks registered as shared read and write the
    identical storage, and their gradients accumulate into one slot.
    """

    def __init__(self) -> None:
        self._arrays: dict[str, np.ndarray] = {}
        self._alias: dict[str, str] = {}

    def resolve(self, name: str) -> str:
        return self._alias.get(name, name)

    def share(self, alias: str, target: str) -> None:
        """Make ``alias`` resolve to the physical storage behind ``target``."""
        physical = self.resolve(target)
        if physical not in self._arrays:
            raise KeyError(f"share target {target!r} does not exist")
        if alias in self._arrays:
            raise ValueError(f"{alias!r} already owns storage; share before adding")
        self._alias[alias] = physical

    def add(self, name: str, array: np.ndarray) -> None:
        physical = self.resolve(name)
        array = np.asarray(array, dtype=np.float64)
        if physical != name:
            # the name is shared onto existing storage; keep the owner's values
            if self._arrays[physical].shape != array.shape:
                raise ShapeError(
                    f"shared parameter {name!r} has shape {array.shape}, "
                    f"but {physical!r} has {self._arrays[physical].shape}"
                )
            return
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already exists")
        self._arrays[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[self.resolve(name)]

    def __contains__(self, name: str) -> bool:
        return self.resolve(name) in self._arrays

    def set(self, name: str, array: np.ndarray) -> None:
        physical = self.resolve(name)
        current = self._arrays[physical]
        array = np.asarray(array, dtype=np.float64)
        if current.shape != array.shape:
            raise ShapeError(
                f"cannot assign shape {array.shape} to {name!r} of shape {current.shape}"
            )
        self._arrays[physical] = array

    def physical_items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self._arrays[name]) for name in sorted(self._arrays)]

    def alias_table(self) -> dict[str, str]:
        return dict(self._alias)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out._arrays = {k: v.copy() for k, v in self._arrays.items()}
        out._alias = dict(self._alias)
        return out


class Gradients:
    """Gradient accumulator keyed like its ParamStore.

    Contributions for a shared parameter land in the single physical slot, so
    the stored gradient is the sum over every sharing path.
    """

    def __init__(self, store: ParamStore) -> None:
        self._store = store
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray) -> None:
        key = self._store.resolve(name)
        grad = np.asarray(grad, dtype=np.float64)
        expected = self._store[name].shape
        if grad.shape != expected:
            raise GradientError(
                f"gradient for {name!r} has shape {grad.shape}, expected {expected}"
            )
        if key in self._arrays:
            self._arrays[key] += grad
        else:
            self._arrays[key] = grad.copy()

    def get(self, name: str) -> np.ndarray | None:
        return self._arrays.get(self._store.resolve(name))

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self._arrays[name]) for name in sorted(self._arrays)]

    def scaled(self, factor: float) -> "Gradients":
        out = Gradients(self._store)
        out._arrays = {k: v * factor for k, v in self._arrays.items()}
        return out


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: stateless by default, parameters registered under a scope."""

    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name

    def param_names(self, scope: str) -> list[str]:
        return []

    def build(self, store: ParamStore, scope: str, rng: np.random.Generator) -> None:
        pass

    def forward(self, store: ParamStore, scope: str, x):
        raise NotImplementedError

    def backward(self, store: ParamStore, scope: str, cache, dy, grads: Gradients):
        raise NotImplementedError


def _check_matrix(x: np.ndarray, n_in: int, kind: str) -> None:
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"{kind} expects (n, {n_in}), got {x.shape}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, name: str | None = None):
        super().__init__(name)
        self.n_in = n_in
        self.n_out = n_out

    def param_names(self, scope: str) -> list[str]:
        return [f"{scope}/w", f"{scope}/b"]

    def build(self, store: ParamStore, scope: str, rng: np.random.Generator) -> None:
        store.add(f"{scope}/w", glorot_uniform(rng, (self.n_in, self.n_out), self.n_in, self.n_out))
        store.add(f"{scope}/b", np.zeros(self.n_out))

    def forward(self, store: ParamStore, scope: str, x):
        _check_matrix(x, self.n_in, "dense")
        y = x @ store[f"{scope}/w"] + store[f"{scope}/b"]
        return y, x

    def backward(self, store: ParamStore, scope: str, cache, dy, grads: Gradients):
        x = cache
        grads.add(f"{scope}/w", x.T @ dy)
        grads.add(f"{scope}/b", dy.sum(axis=0))
        return dy @ store[f"{scope}/w"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, store, scope, x):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, store, scope, cache, dy, grads):
        return dy * cache


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, store, scope, x):
        y = sigmoid(np.asarray(x, dtype=np.float64))
        return y, y

    def backward(self, store, scope, cache, dy, grads):
        return dy * cache * (1.0 - cache)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, store, scope, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, store, scope, cache, dy, grads):
        return dy.reshape(cache)


class GlobalAvgPool(Layer):
    kind = "global-average-pool"

    def forward(self, store, scope, x):
        if x.ndim != 4:
            raise ShapeError(f"global-average-pool expects (n, c, h, w), got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, store, scope, cache, dy, grads):
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None], cache) / (h * w)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; gradients route to the first maximum."""

    kind = "maxpool"

    def forward(self, store, scope, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"maxpool expects (n, c, even, even), got {x.shape}")
        n, c, h, w = x.shape
        windows = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, store, scope, cache, dy, grads):
        idx, (n, c, h, w) = cache
        flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        return (
            flat.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * k * k, h * w)


def _col2im(dcols: np.ndarray, n: int, c: int, k: int, hp: int, wp: int, h: int, w: int) -> np.ndarray:
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    dc = dcols.reshape(n, c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += dc[:, :, i, j]
    return dxp


class Conv2D(Layer):
    """Stride-1 convolution with symmetric zero padding (same-size by default)."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int = 5, pad: int | None = None, name: str | None = None):
        super().__init__(name)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.pad = kernel // 2 if pad is None else pad

    def param_names(self, scope: str) -> list[str]:
        return [f"{scope}/w", f"{scope}/b"]

    def build(self, store, scope, rng):
        k = self.kernel
        fan_in = self.c_in * k * k
        fan_out = self.c_out * k * k
        store.add(f"{scope}/w", glorot_uniform(rng, (self.c_out, self.c_in, k, k), fan_in, fan_out))
        store.add(f"{scope}/b", np.zeros(self.c_out))

    def forward(self, store, scope, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv expects (n, {self.c_in}, h, w), got {x.shape}")
        n, _, h, w = x.shape
        k, p = self.kernel, self.pad
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, ho, wo)
        wmat = store[f"{scope}/w"].reshape(self.c_out, -1)
        y = np.matmul(wmat[None], cols).reshape(n, self.c_out, ho, wo)
        y += store[f"{scope}/b"][None, :, None, None]
        return y, (cols, x.shape)

    def backward(self, store, scope, cache, dy, grads):
        cols, (n, c, h, w) = cache
        k, p = self.kernel, self.pad
        ho, wo = dy.shape[2:]
        dyf = dy.reshape(n, self.c_out, ho * wo)
        grads.add(f"{scope}/w", np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(store[f"{scope}/w"].shape))
        grads.add(f"{scope}/b", dy.sum(axis=(0, 2, 3)))
        wmat = store[f"{scope}/w"].reshape(self.c_out, -1)
        dcols = np.matmul(wmat.T[None], dyf)
        dxp = _col2im(dcols, n, c, k, h + 2 * p, w + 2 * p, ho, wo)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class ResidualBlock(Layer):
    """Two same-width dense layers with a skip connection: relu(x + f(x))."""

    kind = "residual-block"

    def __init__(self, dim: int, name: str | None = None):
        super().__init__(name)
        self.dim = dim

    def param_names(self, scope: str) -> list[str]:
        return [f"{scope}/fc1/w", f"{scope}/fc1/b", f"{scope}/fc2/w", f"{scope}/fc2/b"]

    def build(self, store, scope, rng):
        d = self.dim
        store.add(f"{scope}/fc1/w", glorot_uniform(rng, (d, d), d, d))
        store.add(f"{scope}/fc1/b", np.zeros(d))
        store.add(f"{scope}/fc2/w", glorot_uniform(rng, (d, d), d, d))
        store.add(f"{scope}/fc2/b", np.zeros(d))

    def forward(self, store, scope, x):
        _check_matrix(x, self.dim, "residual-block")
        a = x @ store[f"{scope}/fc1/w"] + store[f"{scope}/fc1/b"]
        h = np.maximum(a, 0.0)
        z = x + h @ store[f"{scope}/fc2/w"] + store[f"{scope}/fc2/b"]
        y = np.maximum(z, 0.0)
        return y, (x, a > 0.0, h, z > 0.0)

    def backward(self, store, scope, cache, dy, grads):
        x, mask_a, h, mask_z = cache
        dz = dy * mask_z
        grads.add(f"{scope}/fc2/w", h.T @ dz)
        grads.add(f"{scope}/fc2/b", dz.sum(axis=0))
        da = (dz @ store[f"{scope}/fc2/w"].T) * mask_a
        grads.add(f"{scope}/fc1/w", x.T @ da)
        grads.add(f"{scope}/fc1/b", da.sum(axis=0))
        return dz + da @ store[f"{scope}/fc1/w"].T


class Concat(Layer):
    """Concatenate a sequence of (n, d_i) inputs along the feature axis."""

    kind = "concat"

    def forward(self, store, scope, xs):
        if not isinstance(xs, (list, tuple)) or not xs:
            raise ShapeError("concat expects a non-empty sequence of arrays")
        n = xs[0].shape[0]
        for x in xs:
            if x.ndim != 2 or x.shape[0] != n:
                raise ShapeError(f"concat expects matching (n, d_i) inputs, got {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, store, scope, cache, dy, grads):
        out = []
        start = 0
        for width in cache:
            out.append(dy[:, start : start + width])
            start += width
        return tuple(out)


class Sequential:
    """A named chain of layers whose parameters live under ``scope/<layer>/``."""

    def __init__(self, scope: str, layers: Sequence[Layer]):
        self.scope = scope
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            if layer.name is None:
                layer.name = f"{i:02d}_{layer.kind}"

    def _scope(self, layer: Layer) -> str:
        return f"{self.scope}/{layer.name}"

    def param_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names += layer.param_names(self._scope(layer))
        return names

    def build(self, store: ParamStore, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.build(store, self._scope(layer), rng)

    def forward(self, store: ParamStore, x):
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(store, self._scope(layer), x)
            except ShapeError as exc:
                raise ShapeError(f"{self.scope} layer {i} ({layer.kind}): {exc}") from None
            caches.append(cache)
        return x, caches

    def backward(self, store: ParamStore, caches, dy, grads: Gradients):
        if len(caches) != len(self.layers):
            raise GradientError(
                f"{self.scope}: cache holds {len(caches)} entries for {len(self.layers)} layers"
            )
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy = layer.backward(store, self._scope(layer), caches[i], dy, grads)
        return dy


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def _is_weight(name: str) -> bool:
    return name.rsplit("/", 1)[-1].startswith("w")


def sgd_step(
    store: ParamStore,
    grads: Gradients,
    state: SgdState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> SgdState:
    """One SGD update: v <- momentum*v + g + wd*param; param <- param - lr*v.

    Weight decay applies to weight matrices only, never biases. Parameters
    without a gradient this step are left untouched (their velocity is not
    decayed either), and shared parameters are updated exactly once.
    """
    for name, array in store.physical_items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for {name!r}")
        if weight_decay and _is_weight(name):
            g = g + weight_decay * array
        v = state.velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        state.velocity[name] = v
        array -= lr * v
    return state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple[GradCheckEntry, ...]
    tol: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a) + abs(n), 1e-6)


def check_gradients(
    fn: Callable[[ParamStore], tuple[float, Gradients]],
    store: ParamStore,
    names: Iterable[str] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 12,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients against central finite differences.

    ``fn`` maps the store to ``(loss, gradients)``. For every physical
    parameter (or the named subset) up to ``max_entries`` coordinates are
    probed with a two-sided ``eps`` step; the reported relative error uses
    ``|a - n| / max(|a| + |n|, 1e-6)``.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = fn(store)
    checked = sorted(names) if names is not None else [n for n, _ in store.physical_items()]
    entries = []
    for name in checked:
        array = store[name]
        grad = analytic.get(name)
        if grad is None:
            grad = np.zeros_like(array)
        flat = array.reshape(-1)
        if flat.size <= max_entries:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            up, _ = fn(store)
            flat[c] = original - eps
            down, _ = fn(store)
            flat[c] = original
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, _rel_err(float(grad.reshape(-1)[c]), numeric))
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, n_checked=len(coords)))
    return GradCheckReport(entries=tuple(entries), tol=tol, eps=eps)


def grad_check(
    net: Sequential,
    store: ParamStore,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 12,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Gradient check for a Sequential net under ``loss_fn(output) -> (loss, dloss)``."""

    def fn(s: ParamStore) -> tuple[float, Gradients]:
        y, caches = net.forward(s, x)
        loss, dy = loss_fn(y)
        grads = Gradients(s)
        net.backward(s, caches, dy, grads)
        return float(loss), grads

    return check_gradients(fn, store, names=net.param_names(), eps=eps, tol=tol, max_entries=max_entries, rng=rng)


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    """Write a versioned checkpoint: named arrays, sharing table, metadata.

    Arrays round-trip exactly (raw float64 storage).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {f"param:{name}": array for name, array in store.physical_items()}
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "alias": store.alias_table(),
        "meta": meta or {},
    }
    payload["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with path.open("wb") as fh:  # keep the exact path (np.savez would append .npz)
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        store = ParamStore()
        for key in data.files:
            if key.startswith("param:"):
                store.add(key[len("param:"):], data[key])
        for alias, target in sorted(header["alias"].items()):
            store.share(alias, target)
    return store, header["meta"]
