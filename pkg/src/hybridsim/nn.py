"""Layers, initialization, Adam, and checkpoints.

Layers do not own arrays. Each layer knows the names and shapes of its
parameters (``specs()``) and is called with a mapping from those names to
tape nodes, so one parameter dict can be bound to a fresh tape per
iteration::

    params = init_params([layer], seed=0)
    tape = Tape()
    bound = bind(tape, params)
    y = layer(bound, x)
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import diffengine as D
from .core import ShapeError

STD_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    fan_in: int | None  # None -> initialized to zero (biases)


class LinearLayer:
    def __init__(self, name: str, in_size: int, out_size: int):
        self.name, self.in_size, self.out_size = name, in_size, out_size

    def specs(self):
        return [
            ParamSpec(f"{self.name}.weight", (self.out_size, self.in_size), self.in_size),
            ParamSpec(f"{self.name}.bias", (self.out_size,), None),
        ]

    def __call__(self, P, x):
        return D.linear(P[f"{self.name}.weight"], P[f"{self.name}.bias"], x)


class BilinearLayer:
    """out_k = sum_ij W_kij a_i b_j + bias_k.

    Called with one argument, the layer evaluates a quadratic form of the
    input augmented with a constant 1, i.e. ``a = b = [x, 1]``. The constant
    keeps linear terms available; a pure quadratic form would map ``x`` and
    ``-x`` to the same features.
    """

    def __init__(self, name: str, in1: int, in2: int | None, out_size: int):
        self.name, self.out_size = name, out_size
        self.single = in2 is None
        self.in1 = in1 + 1 if self.single else in1
        self.in2 = self.in1 if self.single else in2

    def specs(self):
        # fan-in follows the first argument, as in common deep-learning libraries
        return [
            ParamSpec(f"{self.name}.weight", (self.out_size, self.in1, self.in2), self.in1),
            ParamSpec(f"{self.name}.bias", (self.out_size,), None),
        ]

    def __call__(self, P, a, b=None):
        if self.single:
            if b is not None:
                raise TypeError(f"{self.name} was built for a single input")
            ones = np.ones(a.shape[:-1] + (1,))
            if isinstance(a, D.Node):
                a = D.concat([a, ones])
            else:
                a = np.concatenate([a, ones], axis=-1)
            b = a
        out = D.bilinear(P[f"{self.name}.weight"], a, b)
        return D.add(out, P[f"{self.name}.bias"])


class GRUStack:
    """Stacked GRU cells; hidden state is a list with one (..., H) array per layer."""

    def __init__(self, name: str, input_size: int, hidden_size: int, num_layers: int):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers

    def _layer_in(self, k):
        return self.input_size if k == 0 else self.hidden_size

    def specs(self):
        out = []
        h = self.hidden_size
        for k in range(self.num_layers):
            n = self._layer_in(k)
            for gate in ("z", "r", "n"):
                out.append(ParamSpec(f"{self.name}.l{k}.W{gate}", (h, n + h), n + h))
            for gate in ("z", "r", "n"):
                out.append(ParamSpec(f"{self.name}.l{k}.b{gate}", (h,), None))
        return out

    def initial_hidden(self, batch_shape=()):
        return [np.zeros(tuple(batch_shape) + (self.hidden_size,)) for _ in range(self.num_layers)]

    def layer_params(self, P, k):
        p = f"{self.name}.l{k}."
        return [P[p + s] for s in ("Wz", "Wr", "Wn", "bz", "br", "bn")]


def gru_step(stack: GRUStack, P, x, hidden):
    """Advance every layer one step; returns (top-layer output, new hidden list)."""
    if len(hidden) != stack.num_layers:
        raise ShapeError(f"{stack.name}: expected {stack.num_layers} hidden layers, got {len(hidden)}")
    xs = x.shape[-1] if hasattr(x, "shape") else np.shape(x)[-1]
    if xs != stack.input_size:
        raise ShapeError(f"{stack.name}: input size {xs} != {stack.input_size}")
    new = []
    inp = x
    for k, h in enumerate(hidden):
        inp = D.gru_cell(inp, h, *stack.layer_params(P, k))
        new.append(inp)
    return inp, new


def gru_sequence(stack: GRUStack, P, xs, hidden=None):
    """Run the stack over a time-major sequence ``(T, ..., n)``; returns top-layer outputs (T, ..., H).

    Same result as calling gru_step once per step, one tape node per layer.
    """
    xs_n = xs.shape[-1]
    if xs_n != stack.input_size:
        raise ShapeError(f"{stack.name}: input size {xs_n} != {stack.input_size}")
    if hidden is None:
        hidden = stack.initial_hidden(xs.shape[1:-1])
    out = xs
    for k, h in enumerate(hidden):
        out = D.gru_layer(out, h, *stack.layer_params(P, k))
    return out


class GaussianHead:
    """Parallel mean and std layers; std = softplus(.) + 1e-6.

    With ``fixed_std`` set, only the mean layer exists and the std is that
    constant.
    """

    def __init__(self, name: str, in_size: int, out_size: int, fixed_std: float | None = None):
        self.name = name
        self.mean_layer = LinearLayer(f"{name}.mean", in_size, out_size)
        self.fixed_std = fixed_std
        self.std_layer = None if fixed_std is not None else LinearLayer(f"{name}.std", in_size, out_size)

    def specs(self):
        out = self.mean_layer.specs()
        if self.std_layer is not None:
            out += self.std_layer.specs()
        return out

    def __call__(self, P, h):
        mu = self.mean_layer(P, h)
        if self.std_layer is None:
            return mu, np.full(mu.shape, float(self.fixed_std))
        return mu, D.add(D.softplus(self.std_layer(P, h)), STD_FLOOR)


def collect_specs(modules: Iterable) -> list[ParamSpec]:
    specs, seen = [], set()
    for m in modules:
        for s in m.specs():
            if s.name in seen:
                raise ValueError(f"duplicate parameter name {s.name!r}")
            seen.add(s.name)
            specs.append(s)
    return specs


def init_params(modules_or_specs, seed: int) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    items = list(modules_or_specs)
    specs = items if items and isinstance(items[0], ParamSpec) else collect_specs(items)
    rng = np.random.default_rng(seed)
    params = {}
    for s in specs:
        if s.fan_in is None:
            params[s.name] = np.zeros(s.shape)
        else:
            bound = 1.0 / math.sqrt(s.fan_in)
            params[s.name] = rng.uniform(-bound, bound, size=s.shape)
    return params


def bind(tape: D.Tape, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, D.Node]:
    if trainable:
        return {k: tape.leaf(v, name=k) for k, v in params.items()}
    return {k: tape.const(v, name=k) for k, v in params.items()}


def l2_penalty(bound: Mapping[str, D.Node]):
    total = None
    for node in bound.values():
        term = D.sum_(D.square(node))
        total = term if total is None else D.add(total, term)
    return total


def lr_schedule(base_lr: float, iteration: int, decay_every: int, factor: float) -> float:
    """Step decay: base_lr * factor ** (iteration // decay_every)."""
    if decay_every <= 0 or not 0 < factor <= 1:
        raise ValueError("decay_every must be positive and factor in (0, 1]")
    return base_lr * factor ** (iteration // decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update. Returns new params; updates ``state``.

    A non-finite gradient aborts the whole step before anything changes.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# checkpoints: a zip holding raw .npy tensors plus a JSON manifest


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: dict | None = None) -> None:
    manifest = {
        "format": "hybridsim-checkpoint",
        "version": CHECKPOINT_VERSION,
        "tensors": {k: list(v.shape) for k, v in params.items()},
        "order": list(params),
        "config": config or {},
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for k, v in params.items():
            buf = io.BytesIO()
            np.save(buf, np.asarray(v, dtype=np.float64), allow_pickle=False)
            zf.writestr(f"tensors/{k}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(Path(path)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "hybridsim-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if manifest["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {manifest['version']} is newer than supported")
        params = {}
        for k in manifest["order"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{k}.npy")), allow_pickle=False)
            if list(arr.shape) != manifest["tensors"][k]:
                raise ShapeError(f"{path}: tensor {k!r} has shape {arr.shape}, manifest says {manifest['tensors'][k]}")
            params[k] = arr
    return params, manifest["config"]
