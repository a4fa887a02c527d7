"""Policy and value networks with hand-written backprop, plus Adam.

Both networks share one architecture (never one set of weights):

    f_src  = enc([x_t; src_cond])           shared two-layer ReLU encoder
    f_edit = enc([x_t; edit_cond])
    f_cat  = fuse([f_src; f_edit])          linear
    f_t    = proj(time_embed(t))            linear
    h      = relu(W2 relu(W1 [f_cat; f_t]))
    out_k  = head_k(h)                      K categorical heads, or one scalar

All arrays are batch-first; a single state is a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class StaleCacheError(RuntimeError):
    """Backward was called with activations from before a parameter update."""


def time_embed(t, E: int) -> np.ndarray:
    """Sinusoidal embedding: E/2 sines followed by E/2 cosines."""
    if E % 2:
        raise ValueError(f"embedding width must be even, got {E}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(E // 2) / E)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class NetDims:
    D: int
    out_sizes: tuple  # per-head cardinalities; (1,) for the value net
    F: int = 32
    Fc: int = 32
    E: int = 32
    Ft: int = 32
    H: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "out_sizes", tuple(int(n) for n in self.out_sizes))
        if self.E % 2:
            raise ValueError("time embedding width E must be even")

    def shapes(self) -> dict:
        s = {
            "enc1.W": (self.F, 2 * self.D), "enc1.b": (self.F,),
            "enc2.W": (self.F, self.F), "enc2.b": (self.F,),
            "fuse.W": (self.Fc, 2 * self.F), "fuse.b": (self.Fc,),
            "time.W": (self.Ft, self.E), "time.b": (self.Ft,),
            "fc1.W": (self.H, self.Fc + self.Ft), "fc1.b": (self.H,),
            "fc2.W": (self.H, self.H), "fc2.b": (self.H,),
        }
        for k, n in enumerate(self.out_sizes):
            s[f"head{k}.W"] = (n, self.H)
            s[f"head{k}.b"] = (n,)
        return s


@dataclass
class _Cache:
    version: int
    acts: dict


class Net:
    """Backbone plus K linear heads; ``params`` maps names to float64 arrays."""

    def __init__(self, dims: NetDims, params: dict | None = None, seed: int | None = None,
                 head_gain: float = 0.01):
        self.dims = dims
        self.version = 0
        if params is None:
            params = self._init(np.random.default_rng(seed), head_gain)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        shapes = dims.shapes()
        if set(self.params) != set(shapes):
            raise ValueError("parameter names do not match the declared dims")
        for k, v in self.params.items():
            if v.shape != shapes[k]:
                raise ValueError(f"{k}: shape {v.shape} != {shapes[k]}")
        self._cache: _Cache | None = None

    def _init(self, rng, head_gain):
        p = {}
        for name, shape in self.dims.shapes().items():
            if name.endswith(".b"):
                p[name] = np.zeros(shape)
                continue
            fan_in = shape[1]
            gain = head_gain if name.startswith("head") else np.sqrt(2.0)
            p[name] = rng.standard_normal(shape) * gain / np.sqrt(fan_in)
        return p

    @property
    def K(self) -> int:
        return len(self.dims.out_sizes)

    def copy(self) -> "Net":
        return Net(self.dims, {k: v.copy() for k, v in self.params.items()})

    def touch(self) -> None:
        """Mark parameters as modified; invalidates any cached forward pass."""
        self.version += 1

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, t, src_cond, edit_cond) -> list:
        """Return a list of (B, N_k) head outputs and cache activations."""
        p = self.params
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        src_cond = np.atleast_2d(np.asarray(src_cond, dtype=np.float64))
        edit_cond = np.atleast_2d(np.asarray(edit_cond, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t))
        B, D = x.shape
        if D != self.dims.D or src_cond.shape != x.shape or edit_cond.shape != x.shape or t.shape != (B,):
            raise ValueError(f"input shapes inconsistent with D={self.dims.D}: "
                             f"{x.shape}, {src_cond.shape}, {edit_cond.shape}, {t.shape}")
        # both branches go through the encoder as one stacked batch
        u = np.concatenate([np.concatenate([x, src_cond], 1), np.concatenate([x, edit_cond], 1)], 0)
        a1 = u @ p["enc1.W"].T + p["enc1.b"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["enc2.W"].T + p["enc2.b"]
        f = np.maximum(a2, 0.0)
        f_pair = np.concatenate([f[:B], f[B:]], 1)
        f_cat = f_pair @ p["fuse.W"].T + p["fuse.b"]
        emb = time_embed(t, self.dims.E)
        f_t = emb @ p["time.W"].T + p["time.b"]
        z = np.concatenate([f_cat, f_t], 1)
        a3 = z @ p["fc1.W"].T + p["fc1.b"]
        g1 = np.maximum(a3, 0.0)
        a4 = g1 @ p["fc2.W"].T + p["fc2.b"]
        g2 = np.maximum(a4, 0.0)
        outs = [g2 @ p[f"head{k}.W"].T + p[f"head{k}.b"] for k in range(self.K)]
        self._cache = _Cache(self.version, dict(
            B=B, u=u, a1=a1, h1=h1, a2=a2, f_pair=f_pair, emb=emb, z=z, a3=a3, g1=g1, a4=a4, g2=g2))
        return outs

    def backward(self, douts: list) -> dict:
        """Gradients of ``sum_k <douts[k], outs[k]>`` w.r.t. every parameter."""
        c = self._cache
        if c is None:
            raise StaleCacheError("backward called before forward")
        if c.version != self.version:
            raise StaleCacheError("parameters changed since the cached forward pass")
        if len(douts) != self.K:
            raise ValueError(f"expected {self.K} upstream gradients, got {len(douts)}")
        p, a = self.params, c.acts
        B = a["B"]
        g = {}
        dg2 = np.zeros_like(a["g2"])
        for k, d in enumerate(douts):
            d = np.asarray(d, dtype=np.float64).reshape(B, self.dims.out_sizes[k])
            g[f"head{k}.W"] = d.T @ a["g2"]
            g[f"head{k}.b"] = d.sum(0)
            dg2 += d @ p[f"head{k}.W"]
        da4 = dg2 * (a["a4"] > 0)
        g["fc2.W"] = da4.T @ a["g1"]
        g["fc2.b"] = da4.sum(0)
        da3 = (da4 @ p["fc2.W"]) * (a["a3"] > 0)
        g["fc1.W"] = da3.T @ a["z"]
        g["fc1.b"] = da3.sum(0)
        dz = da3 @ p["fc1.W"]
        Fc = self.dims.Fc
        df_cat, df_t = dz[:, :Fc], dz[:, Fc:]
        g["time.W"] = df_t.T @ a["emb"]
        g["time.b"] = df_t.sum(0)
        g["fuse.W"] = df_cat.T @ a["f_pair"]
        g["fuse.b"] = df_cat.sum(0)
        df_pair = df_cat @ p["fuse.W"]
        F = self.dims.F
        df = np.concatenate([df_pair[:, :F], df_pair[:, F:]], 0)
        da2 = df * (a["a2"] > 0)
        g["enc2.W"] = da2.T @ a["h1"]
        g["enc2.b"] = da2.sum(0)
        da1 = (da2 @ p["enc2.W"]) * (a["a1"] > 0)
        g["enc1.W"] = da1.T @ a["u"]
        g["enc1.b"] = da1.sum(0)
        return g


@dataclass
class PolicyOutput:
    probs: list
    logp: list


def policy_net(D: int, sizes, seed=None, **dims) -> Net:
    return Net(NetDims(D, tuple(sizes), **dims), seed=seed)


def value_net(D: int, seed=None, **dims) -> Net:
    return Net(NetDims(D, (1,), **dims), seed=seed, head_gain=1.0)


def _conds(task_or_batch):
    return task_or_batch.i_src, task_or_batch.edit_condition()


def policy_forward(net: Net, x_t, t, task) -> PolicyOutput:
    """Per-head categorical distributions for states ``(x_t, t)`` of ``task``.

    ``task`` is an EditTask (single state) or a TaskBatch aligned with ``x_t``.
    """
    src, edit = _conds(task)
    logits = net.forward(x_t, t, src, edit)
    return PolicyOutput([softmax(l) for l in logits], [log_softmax(l) for l in logits])


def value_forward(net: Net, x_t, t, task) -> np.ndarray:
    src, edit = _conds(task)
    return net.forward(x_t, t, src, edit)[0][:, 0]


# -- optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(net: Net, grads: dict, state: AdamState, lr: float = 5e-5) -> None:
    """In-place Adam update with bias correction; zero moments on first use."""
    if set(grads) != set(net.params):
        raise ValueError("gradient names do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for k, p in net.params.items():
        gk = grads[k]
        if gk.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {gk.shape} != {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * gk
        v *= b2
        v += (1 - b2) * gk * gk
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.touch()
