"""Functional neural-network building blocks over named parameter trees.

Tensors are float64 throughout.  Reverse-mode gradients come from
torch.autograd; every layer here is a plain function of a parameter mapping
and its inputs, so the same code serves single models and stacked ensembles
(parameters with a leading model axis broadcast through ``matmul``).
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAIN = "training"
INFER = "inference"


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_mode(mode: str) -> bool:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")
    return mode == TRAIN


class ParamTree:
    """Named float64 arrays with Adam moments.

    ``params`` are optimized leaves; ``buffers`` hold non-trained state such as
    batch-norm running statistics and data normalizers.  Names are dotted
    paths; iteration order is always sorted by name.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | None = None,
                 buffers: Mapping[str, torch.Tensor] | None = None):
        self.params: dict[str, torch.Tensor] = {}
        self.buffers: dict[str, torch.Tensor] = {}
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0
        self._scopes: dict[str, dict[str, torch.Tensor]] = {}
        for k, t in (params or {}).items():
            self.add(k, t)
        for k, t in (buffers or {}).items():
            self.add_buffer(k, t)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate name {name!r}")
        t = as_tensor(value).clone().detach().requires_grad_(True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        self._scopes.clear()
        return t

    def add_buffer(self, name: str, value) -> torch.Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate name {name!r}")
        t = as_tensor(value).clone().detach()
        self.buffers[name] = t
        self._scopes.clear()
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def names(self) -> list[str]:
        return sorted(self.params)

    def scope(self, prefix: str) -> dict[str, torch.Tensor]:
        """Sub-mapping of everything under ``prefix.`` with the prefix stripped."""
        sub = self._scopes.get(prefix)
        if sub is None:
            p = prefix + "."
            sub = {k[len(p):]: t for d in (self.params, self.buffers) for k, t in d.items() if k.startswith(p)}
            self._scopes[prefix] = sub
        return sub

    def num_params(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def flatten(self) -> torch.Tensor:
        return torch.cat([self.params[k].detach().reshape(-1) for k in self.names()])

    def unflatten(self, vec) -> dict[str, torch.Tensor]:
        vec = as_tensor(vec)
        if vec.numel() != self.num_params():
            raise ShapeError(f"flat vector has {vec.numel()} entries, tree needs {self.num_params()}")
        out, i = {}, 0
        for k in self.names():
            t = self.params[k]
            out[k] = vec[i:i + t.numel()].reshape(t.shape).clone()
            i += t.numel()
        return out

    def load_flat(self, vec) -> None:
        with torch.no_grad():
            for k, t in self.unflatten(vec).items():
                self.params[k].copy_(t)

    def copy(self) -> "ParamTree":
        new = ParamTree(self.params, self.buffers)
        for k in self.params:
            new.m[k] = self.m[k].clone()
            new.v[k] = self.v[k].clone()
        new.step = self.step
        return new

    def assign(self, other: "ParamTree") -> None:
        """Copy values (parameters, buffers, optimizer state) from a same-structured tree."""
        check_structure(self.params, other.params)
        with torch.no_grad():
            for k in self.params:
                self.params[k].copy_(other.params[k])
                self.m[k].copy_(other.m[k])
                self.v[k].copy_(other.v[k])
            for k in self.buffers:
                self.buffers[k].copy_(other.buffers[k])
        self.step = other.step

    def select(self, index: int) -> "ParamTree":
        """Member ``index`` of a stacked ensemble as a standalone tree."""
        new = ParamTree({k: t.detach()[index] for k, t in self.params.items()},
                        {k: t[index] for k, t in self.buffers.items()})
        for k in self.params:
            new.m[k] = self.m[k][index].clone()
            new.v[k] = self.v[k][index].clone()
        new.step = self.step
        return new

    @classmethod
    def stack(cls, trees: list["ParamTree"]) -> "ParamTree":
        first = trees[0]
        for t in trees[1:]:
            check_structure(first.params, t.params)
        return cls({k: torch.stack([t.params[k].detach() for t in trees]) for k in first.params},
                   {k: torch.stack([t.buffers[k] for t in trees]) for k in first.buffers})

    def to_dict(self) -> dict:
        def enc(d):
            return {k: {"shape": list(d[k].shape), "values": [float(x) for x in d[k].detach().reshape(-1).tolist()]}
                    for k in sorted(d)}
        return {"params": enc(self.params), "buffers": enc(self.buffers)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=None, separators=(",", ":")) + "\n")

    def load_values(self, data: Mapping) -> None:
        """Load values for exactly this tree's names; unknown or missing names are rejected."""
        for section, target in (("params", self.params), ("buffers", self.buffers)):
            given = data.get(section, {})
            missing = sorted(set(target) - set(given))
            unknown = sorted(set(given) - set(target))
            if missing or unknown:
                raise KeyError(f"{section}: missing names {missing}, unknown names {unknown}")
            with torch.no_grad():
                for k, rec in given.items():
                    shape = tuple(rec["shape"])
                    if shape != tuple(target[k].shape):
                        raise ShapeError(f"{k}: stored shape {shape} != expected {tuple(target[k].shape)}")
                    target[k].copy_(torch.tensor(rec["values"], dtype=DTYPE).reshape(shape))

    def load(self, path: str | Path) -> "ParamTree":
        self.load_values(json.loads(Path(path).read_text()))
        return self

    @classmethod
    def from_dict(cls, data: Mapping) -> "ParamTree":
        def dec(d):
            return {k: torch.tensor(r["values"], dtype=DTYPE).reshape(tuple(r["shape"])) for k, r in d.items()}
        return cls(dec(data.get("params", {})), dec(data.get("buffers", {})))


def check_structure(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> None:
    if set(a) != set(b):
        raise ShapeError(f"tree structure mismatch: only-left {sorted(set(a) - set(b))}, "
                         f"only-right {sorted(set(b) - set(a))}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{k}: shape {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


# -- initialization ---------------------------------------------------------

def uniform_fan_in(gen: torch.Generator, out_dim: int, in_dim: int, lead: tuple = ()) -> torch.Tensor:
    a = math.sqrt(1.0 / in_dim)
    return (torch.rand(*lead, out_dim, in_dim, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * a


def init_linear(tree: ParamTree, name: str, in_dim: int, out_dim: int, gen: torch.Generator,
                zero: bool = False, lead: tuple = ()) -> None:
    w = torch.zeros(*lead, out_dim, in_dim, dtype=DTYPE) if zero else uniform_fan_in(gen, out_dim, in_dim, lead)
    tree.add(f"{name}.weight", w)
    tree.add(f"{name}.bias", torch.zeros(*lead, out_dim, dtype=DTYPE))


def init_norm(tree: ParamTree, name: str, dim: int, lead: tuple = (), running: bool = False) -> None:
    tree.add(f"{name}.weight", torch.ones(*lead, dim, dtype=DTYPE))
    tree.add(f"{name}.bias", torch.zeros(*lead, dim, dtype=DTYPE))
    if running:
        tree.add_buffer(f"{name}.running_mean", torch.zeros(*lead, dim, dtype=DTYPE))
        tree.add_buffer(f"{name}.running_var", torch.ones(*lead, dim, dtype=DTYPE))


# -- layers -----------------------------------------------------------------

def linear(p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    w, b = p["weight"], p["bias"]
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {w.shape[-1]} (weight {tuple(w.shape)})")
    if x.dim() == 1 and w.dim() == 2:
        return torch.matmul(w, x) + b
    return torch.matmul(x, w.transpose(-1, -2)) + b.unsqueeze(-2)


def _affine(p, y):
    return y * p["weight"].unsqueeze(-2) + p["bias"].unsqueeze(-2)


def layer_norm(p: Mapping[str, torch.Tensor], x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    if x.shape[-1] != p["weight"].shape[-1]:
        raise ShapeError(f"layer_norm: width {x.shape[-1]} != affine width {p['weight'].shape[-1]}")
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    w, b = p["weight"], p["bias"]
    # stacked affines (M, F) broadcast over (M, ..., F): insert singleton axes
    while w.dim() < y.dim():
        w, b = w.unsqueeze(-2), b.unsqueeze(-2)
    return y * w + b


def batch_norm(p: Mapping[str, torch.Tensor], x: torch.Tensor, mode: str,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS, update_running: bool = True) -> torch.Tensor:
    """Normalize over the batch axis (-2); running statistics live in ``p``.

    ``update_running=False`` uses batch statistics without touching the
    running estimates (for auxiliary forward passes such as constraint
    gradients).
    """
    if x.shape[-1] != p["weight"].shape[-1]:
        raise ShapeError(f"batch_norm: width {x.shape[-1]} != affine width {p['weight'].shape[-1]}")
    if _check_mode(mode):
        mu = x.mean(-2)
        var = ((x - mu.unsqueeze(-2)) ** 2).mean(-2)
        n = x.shape[-2]
        if update_running:
            with torch.no_grad():
                unbiased = var.detach() * (n / max(n - 1, 1))
                p["running_mean"].mul_(1 - momentum).add_(momentum * mu.detach())
                p["running_var"].mul_(1 - momentum).add_(momentum * unbiased)
    else:
        mu, var = p["running_mean"], p["running_var"]
    y = (x - mu.unsqueeze(-2)) / torch.sqrt(var.unsqueeze(-2) + eps)
    return _affine(p, y)


def dropout(x: torch.Tensor, prob: float, mode: str, generator: torch.Generator | None = None,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    """Inverted dropout; identity in inference mode or when prob == 0.

    ``mask`` may supply pre-drawn uniforms of x's shape.
    """
    if not _check_mode(mode) or prob <= 0.0:
        return x
    u = mask if mask is not None else torch.rand(x.shape, generator=generator, dtype=DTYPE)
    return x * (u >= prob).to(DTYPE) / (1.0 - prob)


def ffn(p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Position-wise feed-forward: linear, ReLU, linear."""
    h = torch.relu(linear({"weight": p["0.weight"], "bias": p["0.bias"]}, x))
    return linear({"weight": p["1.weight"], "bias": p["1.bias"]}, h)


def _sub(p, name):
    return {"weight": p[f"{name}.weight"], "bias": p[f"{name}.bias"]}


def attention(p: Mapping[str, torch.Tensor], X: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Multi-head self-attention over the token axis of X (..., T, d)."""
    d = X.shape[-1]
    if d % n_heads:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead, T = X.shape[:-2], X.shape[-2]

    def heads(t):
        return t.reshape(*lead, T, n_heads, dh).transpose(-2, -3)

    q = heads(linear(_sub(p, "q"), X))
    k = heads(linear(_sub(p, "k"), X))
    v = heads(linear(_sub(p, "v"), X))
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
    out = torch.matmul(torch.softmax(scores, dim=-1), v)
    out = out.transpose(-2, -3).reshape(*lead, T, d)
    return linear(_sub(p, "o"), out)


def positional_embedding(L: int, d: int) -> torch.Tensor:
    """Sinusoidal table (L, d): sin on even channels, cos on odd channels."""
    pos = torch.arange(L, dtype=DTYPE).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=DTYPE)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(L, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe


# -- gradients and optimization ---------------------------------------------

def backward(loss: torch.Tensor, tree: ParamTree, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss with the same names and shapes as tree.params."""
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()}")
    names = tree.names()
    if not loss.requires_grad:
        return {k: torch.zeros_like(tree.params[k]) for k in names}
    grads = torch.autograd.grad(loss, [tree.params[k] for k in names],
                                allow_unused=True, retain_graph=retain_graph)
    return {k: (g if g is not None else torch.zeros_like(tree.params[k])).detach()
            for k, g in zip(names, grads)}


def adam_step(tree: ParamTree, grads: Mapping[str, torch.Tensor], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamTree:
    check_structure(tree.params, grads)
    for k, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for {k}")
    tree.step += 1
    bc1 = 1.0 - beta1 ** tree.step
    bc2 = 1.0 - beta2 ** tree.step
    with torch.no_grad():
        for k in tree.names():
            g = grads[k]
            m, v = tree.m[k], tree.v[k]
            m.mul_(beta1).add_((1.0 - beta1) * g)
            v.mul_(beta2).add_((1.0 - beta2) * g * g)
            tree.params[k].sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return tree


def flatten_grads(grads: Mapping[str, torch.Tensor], names: Iterable[str] | None = None) -> torch.Tensor:
    names = sorted(grads) if names is None else list(names)
    return torch.cat([grads[k].reshape(-1) for k in names])


def sidecar(stem: str | Path, suffix: str) -> Path:
    """``stem`` plus a multi-part suffix; dots already in the stem are kept."""
    stem = Path(stem)
    return stem.with_name(stem.name + suffix)


def global_seed_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2 ** 63))
    return g


def eval_no_grad(fn: Callable, *args, **kw):
    with torch.no_grad():
        return fn(*args, **kw)
