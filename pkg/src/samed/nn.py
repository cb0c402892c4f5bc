"""Parameter registry and transformer building blocks."""

from __future__ import annotations

import copy
import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Attribute-ordered container of parameters and submodules.

    ``named_parameters`` walks attributes in assignment order, so names and
    ordering are stable for a given construction sequence.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self, trainable: bool | None = None) -> list[Parameter]:
        return [p for _, p in self.named_parameters()
                if trainable is None or p.requires_grad == trainable]

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        """Make every parameter trainable, replacing each with a private copy.

        Copying keeps any other module that shares the old object frozen.
        """
        for _, mod in self.named_modules():
            for name, value in list(vars(mod).items()):
                if isinstance(value, Parameter) and not value.requires_grad:
                    setattr(mod, name, Parameter(value.data.copy()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def share_copy(self):
        """Copy the module tree while sharing every Parameter object."""
        memo = {id(p): p for p in self.parameters()}
        return copy.deepcopy(self, memo)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, modules=()):
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __len__(self):
        return sum(1 for _ in self._children())

    def __iter__(self):
        return (m for _, m in self._children())

    def _index(self, i: int) -> str:
        n = len(self)
        if not -n <= i < n:
            raise IndexError(f"index {i} out of range for {n} modules")
        return str(i % n)

    def __getitem__(self, i: int):
        return getattr(self, self._index(i))

    def __setitem__(self, i: int, m: Module):
        setattr(self, self._index(i), m)


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64):
        self.weight = Parameter(_normal(rng, (c_out, c_in), 1.0 / math.sqrt(c_in), dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Linear layers with GELU between them."""

    def __init__(self, dims: list[int], rng, dtype=np.float64):
        self.layers = ModuleList([Linear(a, b, rng, dtype=dtype) for a, b in zip(dims, dims[1:])])

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = T.gelu(x)
        return x


PROJECTIONS = ("q", "k", "v", "o")


class AttentionBlock(Module):
    """Multi-head scaled dot-product attention with separate q/k/v/o projections.

    Each projection is any callable module mapping (..., C) to (..., C), so a
    LoRA wrapper can replace it in place. ``attn_bias``, when set, is added to
    the scaled scores before the softmax; it must have shape (N_q, N_k) or
    (heads, N_q, N_k).
    """

    def __init__(self, dim: int, num_heads: int, rng, dtype=np.float64):
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)
        self.attn_bias: Tensor | None = None

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return T.transpose(T.reshape(t, (b, n, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def attend(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
            if t.ndim != 3 or t.shape[-1] != self.embed_dim:
                raise ShapeError(f"attention {name} tokens {t.shape} do not have "
                                 f"{self.embed_dim} channels")
        b, n, c = q_in.shape
        q = T.scale(self._split(self.q(q_in)), 1.0 / math.sqrt(self.head_dim))
        k = self._split(self.k(k_in))
        v = self._split(self.v(v_in))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        if self.attn_bias is not None:
            scores = T.add_bias(scores, self.attn_bias)
        out = T.matmul(T.softmax(scores, axis=-1), v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, c))
        return self.o(out)

    def forward(self, tokens: Tensor) -> Tensor:
        return self.attend(tokens, tokens, tokens)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, num_heads: int, rng, mlp_ratio: int = 4, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = AttentionBlock(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP([dim, dim * mlp_ratio, dim], rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, N, patch*patch*C) in row-major patch order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(images, (b, gh, patch, gw, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * gw, patch * patch * c))


def unpatchify(tokens: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    """Inverse of ``patchify``: (B, gh*gw, patch*patch*C) -> (B, gh*patch, gw*patch, C)."""
    b, n, d = tokens.shape
    gh, gw = grid
    if n != gh * gw or d % (patch * patch):
        raise ShapeError(f"tokens {tokens.shape} do not fit grid {grid} with patch {patch}")
    c = d // (patch * patch)
    x = T.reshape(tokens, (b, gh, gw, patch, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * patch, gw * patch, c))


class PatchEmbed(Module):
    """Linear projection of flattened non-overlapping patches."""

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int, rng, dtype=np.float64):
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.proj = Linear(patch_size * patch_size * in_channels, embed_dim, rng, dtype=dtype)

    def forward(self, images: Tensor) -> Tensor:
        if images.shape[-1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {images.shape}")
        return self.proj(patchify(images, self.patch_size))
