"""Low-rank bypasses around frozen projections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import PROJECTIONS, AttentionBlock, Linear, Module, Parameter
from .tensor import ShapeError, Tensor

SCOPES = ("encoder_only", "encoder_and_decoder_transformer")


@dataclass
class LoraSpec:
    rank: int = 4
    targets: list[str] = field(default_factory=lambda: ["q", "v"])
    scope: str = "encoder_only"

    def __post_init__(self):
        self.targets = sorted({t.lower() for t in self.targets}, key=PROJECTIONS.index)
        bad = [t for t in self.targets if t not in PROJECTIONS]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}; choose from {list(PROJECTIONS)}")
        if not self.targets:
            raise ValueError("LoRA targets must be nonempty")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown LoRA scope {self.scope!r}; choose from {list(SCOPES)}")
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be positive, got {self.rank}")

    def to_dict(self) -> dict:
        return asdict(self)


class LoraLinear(Module):
    """Frozen ``weight``/``bias`` plus a trainable rank-r update ``lora_B @ lora_A``.

    The frozen tensors are the very objects of the wrapped Linear, so the plain
    and adapted models share storage. No scaling factor is applied to the
    update.
    """

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator):
        c_out, c_in = base.weight.shape
        if rank > min(c_in, c_out) / 2:
            raise ValueError(f"rank {rank} too large for a {c_out}x{c_in} projection "
                             f"(limit {min(c_in, c_out) // 2})")
        dtype = base.weight.dtype
        self.weight = base.weight
        self.bias = base.bias
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        self.lora_A = Parameter((rng.standard_normal((rank, c_in)) / math.sqrt(rank)).astype(dtype))
        self.lora_B = Parameter(np.zeros((c_out, rank), dtype=dtype))

    @property
    def rank(self) -> int:
        return self.lora_A.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"LoRA input {x.shape} does not end in {self.weight.shape[1]}")
        base = T.linear(x, self.weight, self.bias)
        return T.add(base, T.linear(T.linear(x, self.lora_A), self.lora_B))

    def merge(self) -> np.ndarray:
        """Materialised ``W + B A``; the layer is left untouched."""
        return self.weight.data + self.lora_B.data @ self.lora_A.data

    def merged_linear(self) -> Linear:
        lin = Linear.__new__(Linear)
        lin.weight = Parameter(self.merge(), requires_grad=False)
        lin.bias = None if self.bias is None else Parameter(self.bias.data.copy(), requires_grad=False)
        return lin


def lora_forward(layer: LoraLinear, x: Tensor) -> Tensor:
    return layer(x)


def merge(layer: LoraLinear) -> np.ndarray:
    return layer.merge()


def wrap_attention(block: AttentionBlock, targets, rank: int, rng) -> int:
    """Replace the named projections of one attention block; return values added."""
    added = 0
    for name in targets:
        proj = getattr(block, name)
        if isinstance(proj, LoraLinear):
            raise RuntimeError(f"projection {name!r} already carries a LoRA bypass")
        wrapped = LoraLinear(proj, rank, rng)
        setattr(block, name, wrapped)
        added += wrapped.lora_A.size + wrapped.lora_B.size
    return added


def lora_layers(module: Module) -> dict[str, LoraLinear]:
    return {n: m for n, m in module.named_modules() if isinstance(m, LoraLinear)}
