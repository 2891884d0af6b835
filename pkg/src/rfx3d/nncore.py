"""Differentiable building blocks, optimizer, EMA and checkpoint I/O.

Forward math is written out here on plain tensors; torch autograd records the
graph and supplies the backward pass. :func:`grad_check` compares those
gradients against central finite differences.
"""

from __future__ import annotations

import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"RFX3D1"
LN_EPS = 1e-5
TOKEN_INIT_STD = 0.02
DEFAULT_ROPE_BASE = 10000.0


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ W^T + b`` with ``W`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    y = x @ weight.transpose(-1, -2)
    if bias is not None:
        y = y + bias
    return y


def layernorm(x, gamma=None, beta=None, eps: float = LN_EPS):
    if gamma is not None and gamma.shape[-1] != x.shape[-1]:
        raise ValueError("layernorm: gamma does not match feature dim")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def gelu_mlp(x, w1, b1, w2, b2):
    return linear(gelu(linear(x, w1, b1)), w2, b2)


class AttentionResult(NamedTuple):
    out: torch.Tensor
    weights: torch.Tensor
    empty_rows: torch.Tensor


def attention(q, k, v, mask=None, return_info: bool = False):
    """Scaled dot-product attention over the last two dims.

    ``mask`` is additive (0 or -inf) and broadcasts against ``(..., Lq, Lk)``.
    Rows with every key masked produce zeros; with ``return_info`` their
    positions are reported in ``empty_rows``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("attention: q/k head dims or k/v lengths disagree")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
        allowed = torch.isfinite(mask).expand_as(scores).any(dim=-1, keepdim=True)
        scores = torch.where(allowed, scores, torch.zeros_like(scores))
        w = torch.softmax(scores, dim=-1) * allowed
    else:
        allowed = None
        w = torch.softmax(scores, dim=-1)
    out = w @ v
    if not return_info:
        return out
    empty = torch.zeros(out.shape[:-1], dtype=torch.bool) if allowed is None else ~allowed[..., 0]
    return AttentionResult(out, w, empty)


def rotary_xyz(x, coords, base: float = DEFAULT_ROPE_BASE):
    """Rotate feature pairs by angles proportional to continuous coordinates.

    The last dim of ``x`` is split into three equal sections (x, y, z); within
    a section, pair ``k`` (dims ``2k, 2k+1``) turns by ``coord * base^(-2k/s)``
    where ``s`` is the section width. ``coords`` is ``(L, 3)`` aligned with
    ``x``'s second-to-last dim.
    """
    d = x.shape[-1]
    if d % 6:
        raise ValueError(f"rotary_xyz needs a feature dim divisible by 6, got {d}")
    sec = d // 3
    k = torch.arange(sec // 2, dtype=x.dtype)
    theta = base ** (-2.0 * k / sec)
    ang = coords.to(x.dtype)[..., :, None] * theta  # (L, 3, sec/2)
    cos = torch.cos(ang).reshape(*ang.shape[:-2], -1)
    sin = torch.sin(ang).reshape(*ang.shape[:-2], -1)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack([r1, r2], dim=-1).reshape(x.shape)


def block_sparse_mask(n_ctx: int, n_mask: int, n_reg: int, dtype=torch.float64) -> torch.Tensor:
    """Additive mask over ``[context; mask tokens; registers]``.

    Context rows see only themselves; mask-token and register rows see every
    context token, every register and themselves.
    """
    n = n_ctx + n_mask + n_reg
    allow = torch.eye(n, dtype=torch.bool)
    rows = slice(n_ctx, n)
    allow[rows, :n_ctx] = True
    allow[rows, n_ctx + n_mask:] = True
    out = torch.zeros((n, n), dtype=dtype)
    out[~allow] = float("-inf")
    return out


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layernorm(x, self.gamma, self.beta)


class Mlp(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int | None = None):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden)
        self.fc2 = Linear(d_hidden, d_out or d_in)

    def forward(self, x):
        return gelu_mlp(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


def token_param(*shape) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape) * TOKEN_INIT_STD)


def split_heads(x, heads: int):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-2, -3)


def merge_heads(x):
    *lead, h, n, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, h * dh)


class MultiHeadAttention(nn.Module):
    """Projections around :func:`attention`, optional rotary on q and k."""

    def __init__(self, d_model: int, heads: int, d_kv: int | None = None, rope_base: float | None = None):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.rope_base = rope_base
        d_kv = d_kv or d_model
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_kv, d_model)
        self.v = Linear(d_kv, d_model)
        self.o = Linear(d_model, d_model)

    def forward(self, x, ctx=None, mask=None, q_coords=None, k_coords=None):
        ctx = x if ctx is None else ctx
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(ctx), self.heads)
        v = split_heads(self.v(ctx), self.heads)
        if self.rope_base is not None and q_coords is not None:
            q = rotary_xyz(q, q_coords.unsqueeze(-3), self.rope_base)
            k = rotary_xyz(k, (q_coords if k_coords is None else k_coords).unsqueeze(-3), self.rope_base)
        return self.o(merge_heads(attention(q, k, v, mask)))


# ---------------------------------------------------------------------------
# optimizer and EMA
# ---------------------------------------------------------------------------

@dataclass
class ParamStore:
    """Named parameters with AdamW moments and an optional group label per name."""

    params: "OrderedDict[str, torch.Tensor]"
    groups: dict[str, str] = field(default_factory=dict)
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        params, groups = OrderedDict(), {}
        for gname, mod in modules.items():
            for name, p in mod.named_parameters():
                key = f"{gname}.{name}"
                params[key] = p
                groups[key] = gname
        return cls(params, groups)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.v.setdefault(name, torch.zeros_like(p, requires_grad=False))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self, group: str | None = None) -> float:
        tot = 0.0
        for n, p in self.params.items():
            if group is None or self.groups.get(n) == group:
                tot += float(p.detach().double().abs().sum()) + float(p.detach().double().sum())
        return tot


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@torch.no_grad()
def adamw_step(store: ParamStore, grads: Mapping[str, torch.Tensor] | None = None, lr=1e-3,
               beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.01,
               eps: float = 1e-8) -> bool:
    """One decoupled-weight-decay Adam update in place.

    ``lr`` is a float or a mapping from group label to rate. Returns False and
    leaves everything untouched if any gradient is non-finite.
    """
    grads = store.grads() if grads is None else grads
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            return False
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            continue
        rate = lr[store.groups.get(name)] if isinstance(lr, Mapping) else lr
        m, v = store.m[name], store.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        if rate == 0:
            continue
        p.mul_(1.0 - rate * weight_decay)
        p.sub_(rate * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return True


@dataclass
class EmaState:
    shadow: "OrderedDict[str, torch.Tensor]"
    momentum: float = 0.999

    @classmethod
    def of(cls, module: nn.Module, momentum: float = 0.999) -> "EmaState":
        return cls(OrderedDict((n, p.detach().clone()) for n, p in module.named_parameters()), momentum)

    def copy_to(self, module: nn.Module) -> None:
        with torch.no_grad():
            for n, p in module.named_parameters():
                p.copy_(self.shadow[n])


@torch.no_grad()
def ema_update(ema: EmaState, params, m: float | None = None) -> EmaState:
    """``shadow <- m * shadow + (1 - m) * params`` in place."""
    m = ema.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    items = params.named_parameters() if isinstance(params, nn.Module) else params.items()
    for name, p in items:
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"EMA shape mismatch for {name}")
        if m == 1.0:
            continue
        s.mul_(m).add_(p.detach(), alpha=1.0 - m)
    return ema


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

def _rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-5,
               n_dirs: int = 3, seed: int = 0, wrt: Iterable[int] | None = None) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` maps the inputs to a tensor; it is reduced to a scalar with a fixed
    random cotangent. Each checked input is probed along ``n_dirs`` random
    directions.
    """
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().clone().to(torch.float64) for x in inputs]
    wrt = list(range(len(xs))) if wrt is None else list(wrt)
    with torch.no_grad():
        y0 = fn(*xs)
    cot = torch.randn(y0.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (fn(*args) * cot).sum()

    leaves = [x.clone().requires_grad_(i in wrt) for i, x in enumerate(xs)]
    s = scalar(*leaves)
    grads = torch.autograd.grad(s, [leaves[i] for i in wrt], allow_unused=True)
    worst = 0.0
    for gi, i in enumerate(wrt):
        g = grads[gi] if grads[gi] is not None else torch.zeros_like(xs[i])
        for _ in range(n_dirs):
            d = torch.randn(xs[i].shape, generator=gen, dtype=torch.float64)
            plus = list(xs)
            minus = list(xs)
            plus[i] = xs[i] + eps * d
            minus[i] = xs[i] - eps * d
            with torch.no_grad():
                num = (float(scalar(*plus)) - float(scalar(*minus))) / (2 * eps)
            ana = float((g * d).sum())
            worst = max(worst, _rel_err(ana, num))
    return worst


def grad_check_module(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], eps: float = 1e-5,
                      n_dirs: int = 3, seed: int = 0, names: Sequence[str] | None = None) -> float:
    """Directional finite-difference check of a scalar loss against module parameters."""
    gen = torch.Generator().manual_seed(seed)
    names = list(params) if names is None else list(names)
    plist = [params[n] for n in names]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, plist)]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in plist]
        ana = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for p, d in zip(plist, dirs):
                p.add_(eps * d)
            lp = float(loss_fn())
            for p, d in zip(plist, dirs):
                p.sub_(2 * eps * d)
            lm = float(loss_fn())
            for p, d in zip(plist, dirs):
                p.add_(eps * d)
        worst = max(worst, _rel_err(ana, (lp - lm) / (2 * eps)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_DTYPES = {"f32": ("<f4", torch.float32), "f64": ("<f8", torch.float64), "i64": ("<i8", torch.int64)}
_DTYPE_NAMES = {torch.float32: "f32", torch.float64: "f64", torch.int64: "i64"}


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write named tensors: magic line, JSON meta line, count line, then per
    tensor a ``name dtype shape`` line followed by raw little-endian values."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(b"meta " + json.dumps(meta or {}, sort_keys=True).encode() + b"\n")
    buf.write(f"tensors {len(tensors)}\n".encode())
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        t = t.detach().cpu()
        tag = _DTYPE_NAMES.get(t.dtype)
        if tag is None:
            raise ValueError(f"unsupported dtype {t.dtype} for {name}")
        shape = ",".join(str(s) for s in t.shape) or "-"
        buf.write(f"{name} {tag} {shape}\n".encode())
        buf.write(t.numpy().astype(_DTYPES[tag][0], copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    data = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{path}: truncated header at byte {pos}")
        s = data[pos:end].decode()
        pos = end + 1
        return s

    magic = line()
    if not magic.startswith("RFX3D"):
        raise ValueError(f"{path}: not a checkpoint file")
    if magic.encode() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: unsupported checkpoint version {magic!r}")
    meta_line = line()
    if not meta_line.startswith("meta "):
        raise ValueError(f"{path}: missing meta line")
    meta = json.loads(meta_line[5:])
    count_line = line().split()
    if len(count_line) != 2 or count_line[0] != "tensors":
        raise ValueError(f"{path}: malformed tensor count line")
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(int(count_line[1])):
        name, tag, shape_s = line().split()
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        np_dtype, _ = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated data for {name} at byte {pos}")
        arr = np.frombuffer(data, dtype=np_dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos)
        pos += nbytes
        out[name] = torch.from_numpy(arr.reshape(shape).copy())
    return out, meta
