"""Small dense-tensor neural network engine (float64, numpy only).

Two fixed architectures are supported: a stacked LSTM with a linear head
applied at every time step, and a ReLU multilayer perceptron. Each exposes
``forward(x) -> (y, cache)`` and ``backward(cache, dy) -> (grads, dx)`` with
exact gradients, so the same code path serves training and white-box input
gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def sigmoid(x):
    # tanh form is stable for large |x| and cheaper than a masked exp
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LstmStack:
    """Stacked LSTM, sequence to sequence, batch-major ``(B, T, features)``.

    Gate layout inside each ``W{k}`` / ``b{k}`` is ``[input, forget, cell, output]``.
    Hidden and cell state start at zero for every sequence unless an initial
    state is supplied.
    """

    kind = "lstm"

    def __init__(self, n_in, n_out, hidden=(128, 128), seed=0, forget_bias=1.0):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        self.params = {}
        width = self.n_in
        for k, H in enumerate(self.hidden):
            self.params[f"W{k}"] = _uniform(rng, width + H, (width + H, 4 * H))
            b = _uniform(rng, width + H, (4 * H,))
            b[H:2 * H] = forget_bias
            self.params[f"b{k}"] = b
            width = H
        self.params["Wout"] = _uniform(rng, width, (width, self.n_out))
        self.params["bout"] = _uniform(rng, width, (self.n_out,))

    def config(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "hidden": list(self.hidden)}

    def zero_state(self, batch):
        return [(np.zeros((batch, H)), np.zeros((batch, H))) for H in self.hidden]

    def forward(self, x, state=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ValueError(f"expected input (B, T, {self.n_in}), got {x.shape}")
        B, T, _ = x.shape
        state = state or self.zero_state(B)
        # time-major internally so every per-step slice is contiguous
        layer_in = np.ascontiguousarray(x.transpose(1, 0, 2))
        caches = []
        final = []
        for k, H in enumerate(self.hidden):
            W, b = self.params[f"W{k}"], self.params[f"b{k}"]
            n_in = layer_in.shape[-1]
            Wh = W[n_in:]
            ax = layer_in @ W[:n_in] + b  # input contribution for every step at once
            h, c = state[k]
            hs = np.empty((T + 1, B, H))  # hs[t] is the state entering step t
            cs = np.empty((T + 1, B, H))
            hs[0], cs[0] = h, c
            gates = np.empty((T, B, 4 * H))
            for t in range(T):
                a = ax[t] + hs[t] @ Wh
                g = gates[t]
                g[:, : 2 * H] = sigmoid(a[:, : 2 * H])
                g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
                g[:, 3 * H:] = sigmoid(a[:, 3 * H:])
                cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * g[:, 2 * H:3 * H]
                hs[t + 1] = g[:, 3 * H:] * np.tanh(cs[t + 1])
            caches.append((layer_in, gates, cs, hs))
            final.append((hs[T].copy(), cs[T].copy()))
            layer_in = hs[1:]
        top = layer_in.transpose(1, 0, 2)
        y = top @ self.params["Wout"] + self.params["bout"]
        return y, {"layers": caches, "top": top, "final_state": final, "params_id": id(self.params)}

    def backward(self, cache, dy):
        if cache.get("params_id") != id(self.params):
            raise ValueError("stale cache: it was produced by a different parameter set")
        dy = np.asarray(dy, dtype=float)
        top = cache["top"]
        grads = {
            "Wout": np.einsum("bth,bto->ho", top, dy),
            "bout": dy.sum(axis=(0, 1)),
        }
        d_layer = np.ascontiguousarray((dy @ self.params["Wout"].T).transpose(1, 0, 2))
        for k in reversed(range(len(self.hidden))):
            H = self.hidden[k]
            W = self.params[f"W{k}"]
            layer_in, gates, cs, hs = cache["layers"][k]
            T, B, n_in = layer_in.shape
            Wh_T = np.ascontiguousarray(W[n_in:].T)
            da_all = np.empty((T, B, 4 * H))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            tanh_c = np.tanh(cs[1:])
            for t in reversed(range(T)):
                g = gates[t]
                i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
                tc = tanh_c[t]
                dh = d_layer[t] + dh_next
                dc = dh * o * (1 - tc * tc) + dc_next
                da = da_all[t]
                da[:, :H] = dc * gg * i * (1 - i)
                da[:, H:2 * H] = dc * cs[t] * f * (1 - f)
                da[:, 2 * H:3 * H] = dc * i * (1 - gg * gg)
                da[:, 3 * H:] = dh * tc * o * (1 - o)
                dc_next = dc * f
                dh_next = da @ Wh_T
            flat_da = da_all.reshape(T * B, 4 * H)
            grads[f"W{k}"] = np.concatenate(
                [layer_in.reshape(T * B, n_in).T @ flat_da, hs[:T].reshape(T * B, H).T @ flat_da]
            )
            grads[f"b{k}"] = flat_da.sum(axis=0)
            d_layer = da_all @ W[:n_in].T
        return grads, np.ascontiguousarray(d_layer.transpose(1, 0, 2))


class MlpNet:
    """ReLU hidden layers, linear output, applied over the last axis."""

    kind = "mlp"

    def __init__(self, n_in, n_out, hidden=(128, 128, 64), seed=0):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        self.params = {}
        dims = (self.n_in,) + self.hidden + (self.n_out,)
        for k in range(len(dims) - 1):
            self.params[f"W{k}"] = _uniform(rng, dims[k], (dims[k], dims[k + 1]))
            self.params[f"b{k}"] = _uniform(rng, dims[k], (dims[k + 1],))

    def config(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "hidden": list(self.hidden)}

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected last dimension {self.n_in}, got {x.shape}")
        acts = [x]
        pre = []
        h = x
        for k in range(self.n_layers):
            a = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            pre.append(a)
            h = np.maximum(a, 0.0) if k < self.n_layers - 1 else a
            acts.append(h)
        return h, {"acts": acts, "pre": pre, "params_id": id(self.params)}

    def backward(self, cache, dy):
        if cache.get("params_id") != id(self.params):
            raise ValueError("stale cache: it was produced by a different parameter set")
        grads = {}
        d = np.asarray(dy, dtype=float)
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                d = d * (cache["pre"][k] > 0)
            h = cache["acts"][k]
            grads[f"W{k}"] = h.reshape(-1, h.shape[-1]).T @ d.reshape(-1, d.shape[-1])
            grads[f"b{k}"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            d = d @ self.params[f"W{k}"].T
        return grads, d


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class TriangularLrSchedule:
    lr_min: float = 1e-7
    lr_max: float = 1e-4
    cycle_length: int = 100

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be at least 2")


def lr_at(schedule: TriangularLrSchedule, iteration: int) -> float:
    """Linear ramp lr_min -> lr_max over the first half cycle, back down over the second."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    phase = (iteration % schedule.cycle_length) / schedule.cycle_length
    frac = 1.0 - abs(2.0 * phase - 1.0)
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * frac


def build_net(config: dict, seed: int = 0):
    kinds = {"lstm": LstmStack, "mlp": MlpNet}
    cls = kinds[config["kind"]]
    return cls(config["n_in"], config["n_out"], hidden=config["hidden"], seed=seed)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, net, *, extra=None, train_config=None):
    """Write a JSON checkpoint. Floats are written with ``repr`` so they round-trip exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "net": net.config(),
        "config_hash": config_hash(train_config or {}),
        "train_config": train_config or {},
        "params": {
            name: {"shape": list(p.shape), "data": p.ravel().tolist()}
            for name, p in sorted(net.params.items())
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    net = build_net(doc["net"])
    for name, blob in doc["params"].items():
        arr = np.array(blob["data"], dtype=float).reshape(blob["shape"])
        if arr.shape != net.params[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        net.params[name] = arr
    return net, doc
