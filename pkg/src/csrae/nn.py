"""Parameters, dense layers, Adam and gradient checking on top of :mod:`csrae.autodiff`."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value

ACTIVATIONS = {
    "relu": ad.relu,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    None: None,
    "linear": None,
}

CHECKPOINT_MAGIC = b"CSRAEPK1"


class ParamStore:
    """Named trainable parameters in insertion order."""

    def __init__(self):
        self._params: dict[str, Value] = {}

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = ad.parameter(data, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}")
            p.data = arr.copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> None:
        self.load_state_dict(load_checkpoint(path), strict=strict)


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write parameters as: magic, count, per-array (name, shape), total length, raw ``<f8``."""
    header = [CHECKPOINT_MAGIC, struct.pack("<I", len(state))]
    total = 0
    for name, arr in state.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        total += arr.size
    header.append(struct.pack("<Q", total))
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.values())
    Path(path).write_bytes(b"".join(header) + payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            entries.append((name, shape))
        (total,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as exc:
        raise ValueError(f"{path}: truncated header at byte {pos}") from exc
    if len(buf) - pos != 8 * total:
        raise ValueError(f"{path}: expected {8 * total} payload bytes, found {len(buf) - pos}")
    flat = np.frombuffer(buf, dtype="<f8", offset=pos, count=total).astype(np.float64)
    out, start = {}, 0
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        out[name] = flat[start:start + n].reshape(shape).copy()
        start += n
    return out


def glorot_init(shape, rng_seed=None) -> np.ndarray:
    """Uniform Glorot initialisation on ``±sqrt(6 / (fan_in + fan_out))``."""
    if len(shape) != 2:
        raise ValueError("glorot_init expects a 2-D shape")
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return np.random.default_rng(rng_seed).uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng):
        self.W = store.add(f"{name}.W", glorot_init((n_in, n_out), rng))
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Value:
        return ad.matmul(x, self.W) + self.b


class Mlp:
    """Stack of dense layers; ``hidden`` is a list of ``(units, activation)``.

    An activation of ``None`` leaves the layer linear. If ``n_out`` is given
    a final linear layer of that width is appended.
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: Sequence, n_out: int | None, rng):
        self.layers = []
        width = n_in
        for i, (units, act) in enumerate(hidden):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            self.layers.append((Dense(store, f"{name}.{i}", width, int(units), rng), ACTIVATIONS[act]))
            width = int(units)
        if n_out is not None:
            self.layers.append((Dense(store, f"{name}.out", width, n_out, rng), None))
            width = n_out
        self.n_in, self.n_out = n_in, width

    def __call__(self, x) -> Value:
        h = ad.as_value(x)
        for layer, act in self.layers:
            h = layer(h)
            if act is not None:
                h = act(h)
        return h


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, strict: bool = True) -> None:
    """One bias-corrected Adam update of every parameter in ``store``.

    With ``strict`` a parameter without a gradient is an error; otherwise
    it is treated as having a zero gradient.
    """
    if strict:
        missing = [n for n, p in store.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient for parameters {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(loss_fn: Callable[[], Value], store: ParamStore, eps: float = 1e-5,
               max_coords: int = 200, rng_seed=0, floor: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` must be deterministic (freeze any noise). Coordinates are a
    random subsample of at most ``max_coords`` entries over all parameters.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    store.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in store.items()}
    coords = [(name, i) for name, p in store.items() for i in range(p.size)]
    rng = np.random.default_rng(rng_seed)
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    worst = 0.0
    for name, i in coords:
        p = store[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(loss_fn().data)
        flat[i] = orig - eps
        f_minus = float(loss_fn().data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    store.zero_grad()
    return worst
