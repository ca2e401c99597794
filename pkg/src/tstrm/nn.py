"""Layers and fused operators built on :mod:`tstrm.tensor`.

Convolution, batch norm and layer norm carry hand-written backward rules
instead of being composed from elementwise ops; the composed versions are
too slow for the training loop on a CPU.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ContractError, DimensionError, Tensor, _as_tensor, unbroadcast


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` registers for optimisation."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Container with named parameters, buffers and child modules.

    Attribute assignment order defines the canonical parameter order, which
    the optimiser and the checkpoint format both rely on.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value, dtype=DTYPE))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if head not in self._buffers:
                raise KeyError(dotted)
            object.__setattr__(self, head, np.array(value, dtype=DTYPE))

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
        for name in buffers:
            self.set_buffer(name, state[name])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- initialisation ------------------------------------------------------------------


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return uniform(rng, shape, math.sqrt(6.0 / fan_in))


# -- dense layers -------------------------------------------------------------------------


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        super().__init__()
        bound = init_scale / math.sqrt(in_features)
        self.weight = Parameter(uniform(rng, (in_features, out_features), bound))
        self.bias = Parameter(uniform(rng, (out_features,), bound)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last axis {self.in_features}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (
            dx,
            unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None,
            unbroadcast(g, beta.shape) if beta.requires_grad else None,
        )

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, dim**-0.5, size=(num, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)]


# -- convolution ---------------------------------------------------------------------


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) input.

    ``groups`` must be 1 (dense) or equal to the channel count (depthwise,
    weight shape (C, 1, kh, kw)).
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out_ch, w_in, kh, kw = weight.shape
    if groups == 1:
        if w_in != c:
            raise DimensionError(f"conv2d: input has {c} channels, weight expects {w_in} (weight {weight.shape})")
    elif groups == c:
        if w_in != 1 or out_ch != c:
            raise DimensionError(f"depthwise conv2d: weight {weight.shape} incompatible with {c} channels")
    else:
        raise ContractError(f"conv2d supports groups=1 or groups=channels, got {groups}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    wd = weight.data
    if groups == 1:
        if kh == 1 and kw == 1:
            cols = win[..., 0, 0]
            out = np.einsum("nchw,oc->nohw", cols, wd[:, :, 0, 0], optimize=True)
        else:
            out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("nchwij,cij->nchw", win, wd[:, 0], optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        gw = gx = gb = None
        if weight.requires_grad:
            if groups == 1:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            else:
                gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if groups == 1:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # (n, ho, wo, c, kh, kw)
                gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            else:
                gcols = g[..., None, None] * wd[None, :, 0, None, None, :, :]
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng: np.random.Generator, groups: int = 1, bias: bool = False):
        super().__init__()
        per_group = in_ch // groups
        fan_in = per_group * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, per_group, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise DimensionError(f"Conv2d expects {self.in_ch} input channels, got {x.shape[1]} (shape {x.shape})")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Per-channel batch normalisation of (N, C, H, W) input.

    ``mask`` (broadcastable to (N, 1, H, W), 1 = valid) restricts the batch
    statistics to valid positions and zeroes the output elsewhere. In
    training mode the running statistics are updated in place.
    """
    xd = x.data
    n, c = xd.shape[:2]
    m = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=DTYPE), (n, 1) + xd.shape[2:])
    axes = (0, 2, 3)
    if training:
        if n < 2:
            raise ContractError("batchnorm2d in training mode needs a batch of at least 2")
        if m is None:
            count = float(n * xd.shape[2] * xd.shape[3])
            mu = xd.mean(axis=axes, keepdims=True)
            xc = xd - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
        else:
            count = float(m.sum())
            mu = (xd * m).sum(axis=axes, keepdims=True) / count
            xc = xd - mu
            var = (xc * xc * m).sum(axis=axes, keepdims=True) / count
        if count < 2:
            raise ContractError("batchnorm2d in training mode needs at least 2 valid positions")
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * count / (count - 1.0)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        xc = xd - mu
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    if m is not None:
        out = out * m

    def backward(g):
        if m is not None:
            g = g * m
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                if m is None:
                    mean_d = dxhat.mean(axis=axes, keepdims=True)
                    mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
                    dx = inv * (dxhat - mean_d - xhat * mean_dx)
                else:
                    mean_d = dxhat.sum(axis=axes, keepdims=True) / count
                    mean_dx = (dxhat * xhat).sum(axis=axes, keepdims=True) / count
                    dx = inv * (dxhat - mean_d - xhat * mean_dx) * m
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps, mask,
        )
