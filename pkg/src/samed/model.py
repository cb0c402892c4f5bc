"""Promptless SAM-style segmenter with k per-class masks.

The encoder is a frozen ViT over linearly embedded patches. A trainable
default prompt embedding (one dense vector added to every image token, one
sparse token) replaces user prompts. A two-way transformer decoder and a
hypernetwork head turn image tokens into one logit map per class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .lora import LoraSpec, lora_layers, wrap_attention
from .nn import (
    MLP,
    AttentionBlock,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    PatchEmbed,
    TransformerBlock,
    unpatchify,
)
from .tensor import ShapeError, Tensor

FINETUNE_MODES = ("decoder_only", "encoder_and_decoder")


@dataclass
class ModelConfig:
    input_size: list[int] = field(default_factory=lambda: [64, 64])
    model_input_size: list[int] = field(default_factory=lambda: [128, 128])
    in_channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    decoder_depth: int = 2
    decoder_dim: int = 64
    num_classes: int = 4
    logit_size: list[int] = field(default_factory=lambda: [32, 32])
    finetune_mode: str = "encoder_and_decoder"
    decoder_lora: bool = False

    def __post_init__(self):
        self.input_size = _pair(self.input_size)
        self.model_input_size = _pair(self.model_input_size)
        self.logit_size = _pair(self.logit_size)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (background plus one class)")
        if any(m % self.patch_size for m in self.model_input_size):
            raise ValueError(f"model_input_size {self.model_input_size} not divisible by "
                             f"patch_size {self.patch_size}")
        if any(l > m for l, m in zip(self.logit_size, self.model_input_size)):
            raise ValueError("logit_size exceeds model_input_size")
        gh, gw = self.grid
        lh, lw = self.logit_size
        if lh % gh or lw % gw or lh // gh != lw // gw:
            raise ValueError(f"logit_size {self.logit_size} must be one integer multiple "
                             f"of the token grid {self.grid}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")
        if self.decoder_lora and self.finetune_mode == "decoder_only":
            raise ValueError("decoder_lora requires finetune_mode 'encoder_and_decoder'")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.model_input_size[0] // self.patch_size,
                self.model_input_size[1] // self.patch_size)

    @property
    def upscale(self) -> int:
        return self.logit_size[0] // self.grid[0]

    @property
    def upscale_dim(self) -> int:
        return max(self.decoder_dim // 2, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _pair(v) -> list[int]:
    if isinstance(v, int):
        return [v, v]
    v = [int(x) for x in v]
    if len(v) != 2:
        raise ValueError(f"expected two extents, got {v}")
    return v


class ImageEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        n = cfg.grid[0] * cfg.grid[1]
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim, rng, dtype)
        self.pos_embed = Parameter((rng.standard_normal((n, cfg.embed_dim)) * 0.02).astype(dtype))
        self.blocks = ModuleList([TransformerBlock(cfg.embed_dim, cfg.num_heads, rng, dtype=dtype)
                                  for _ in range(cfg.depth)])
        self.neck_norm = LayerNorm(cfg.embed_dim, dtype)
        self.neck = Linear(cfg.embed_dim, cfg.decoder_dim, rng, dtype=dtype)
        self.neck_norm2 = LayerNorm(cfg.decoder_dim, dtype)
        self.model_input_size = tuple(cfg.model_input_size)

    def forward(self, images: Tensor) -> Tensor:
        x = images
        if tuple(x.shape[1:3]) != self.model_input_size:
            x = T.bilinear_upsample(x, self.model_input_size)
        x = T.add_bias(self.patch_embed(x), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return self.neck_norm2(self.neck(self.neck_norm(x)))


class PromptDefault(Module):
    """Embedding used in place of any prompt: a dense vector and one sparse token."""

    def __init__(self, dim: int, rng, dtype):
        self.dense = Parameter((rng.standard_normal(dim) * 0.02).astype(dtype))
        self.sparse = Parameter((rng.standard_normal((1, dim)) * 0.02).astype(dtype))


class TwoWayBlock(Module):
    """Token self-attention, token->image, MLP, image->token; post-norm."""

    def __init__(self, dim: int, num_heads: int, rng, dtype, skip_first_pe: bool):
        self.self_attn = AttentionBlock(dim, num_heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_token_to_image = AttentionBlock(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP([dim, 2 * dim, dim], rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.cross_image_to_token = AttentionBlock(dim, num_heads, rng, dtype)
        self.norm4 = LayerNorm(dim, dtype)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries)
        else:
            q = T.add(queries, query_pe)
            queries = T.add(queries, self.self_attn.attend(q, q, queries))
        queries = self.norm1(queries)

        q = T.add(queries, query_pe)
        k = T.add_bias(keys, key_pe)
        queries = self.norm2(T.add(queries, self.cross_token_to_image.attend(q, k, keys)))
        queries = self.norm3(T.add(queries, self.mlp(queries)))

        q = T.add(queries, query_pe)
        k = T.add_bias(keys, key_pe)
        keys = self.norm4(T.add(keys, self.cross_image_to_token.attend(k, q, queries)))
        return queries, keys


class TwoWayTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        dim = cfg.decoder_dim
        n = cfg.grid[0] * cfg.grid[1]
        self.image_pe = Parameter((rng.standard_normal((n, dim)) * 0.02).astype(dtype))
        self.layers = ModuleList([TwoWayBlock(dim, cfg.num_heads, rng, dtype, i == 0)
                                  for i in range(cfg.decoder_depth)])
        self.final_attn = AttentionBlock(dim, cfg.num_heads, rng, dtype)
        self.norm_final = LayerNorm(dim, dtype)

    def attention_blocks(self) -> list[AttentionBlock]:
        out = []
        for layer in self.layers:
            out += [layer.self_attn, layer.cross_token_to_image, layer.cross_image_to_token]
        return out + [self.final_attn]

    def forward(self, image_tokens: Tensor, tokens: Tensor):
        queries, keys = tokens, image_tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, self.image_pe)
        q = T.add(queries, tokens)
        k = T.add_bias(keys, self.image_pe)
        queries = self.norm_final(T.add(queries, self.final_attn.attend(q, k, keys)))
        return queries, keys


class SegHead(Module):
    """Output tokens, sub-pixel upscaling, and per-class hypernetwork MLPs."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        dim, k, du, f = cfg.decoder_dim, cfg.num_classes, cfg.upscale_dim, cfg.upscale
        self.iou_token = Parameter((rng.standard_normal((1, dim)) * 0.02).astype(dtype))
        self.mask_tokens = Parameter((rng.standard_normal((k, dim)) * 0.02).astype(dtype))
        self.upscale = Linear(dim, f * f * du, rng, dtype=dtype)
        self.upscale_norm = LayerNorm(du, dtype)
        self.hypernets = ModuleList([MLP([dim, dim, dim, du], rng, dtype) for _ in range(k)])
        # auxiliary per-class quality score; never part of the loss
        self.iou_mlp = MLP([dim, dim, k], rng, dtype)


class MaskDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.transformer = TwoWayTransformer(cfg, rng, dtype)
        self.head = SegHead(cfg, rng, dtype)
        self.cfg = cfg

    def forward(self, image_tokens: Tensor, prompt: PromptDefault):
        cfg, head = self.cfg, self.head
        b = image_tokens.shape[0]
        k = cfg.num_classes
        tokens = T.concat([head.iou_token, head.mask_tokens, prompt.sparse], axis=0)
        tokens = T.expand(tokens, b)
        image_tokens = T.add_bias(image_tokens, prompt.dense)
        queries, keys = self.transformer(image_tokens, tokens)

        iou = head.iou_mlp(T.reshape(T.take(queries, 0, 1, axis=1), (b, cfg.decoder_dim)))
        mask_out = T.take(queries, 1, 1 + k, axis=1)

        up = unpatchify(head.upscale(keys), cfg.grid, cfg.upscale)
        up = T.gelu(head.upscale_norm(up))
        h, w = cfg.logit_size
        up = T.reshape(up, (b, h * w, cfg.upscale_dim))

        hyper = [head.hypernets[c](T.take(mask_out, c, c + 1, axis=1)) for c in range(k)]
        hyper = T.concat(hyper, axis=1)  # (b, k, du)
        logits = T.matmul(up, T.transpose(hyper, (0, 2, 1)))
        return T.reshape(logits, (b, h, w, k)), iou


class SamedModel(Module):
    """Encoder, default prompt and mask decoder built from one seed.

    A freshly built model is the frozen base: every parameter has
    ``requires_grad=False``. ``customize`` derives the trainable view.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(cfg, rng, dtype)
        self.prompt = PromptDefault(cfg.decoder_dim, rng, dtype)
        self.decoder = MaskDecoder(cfg, rng, dtype)
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.lora: LoraSpec | None = None
        self.freeze()

    def _prepare(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        exp = tuple(self.cfg.input_size) + (self.cfg.in_channels,)
        if x.ndim != 4 or tuple(x.shape[1:]) != exp:
            raise ShapeError(f"expected input of shape (B, {exp[0]}, {exp[1]}, {exp[2]}), "
                             f"got {x.shape}")
        return x

    def forward_with_iou(self, x) -> tuple[Tensor, Tensor]:
        x = self._prepare(x)
        tokens = self.encoder(x)
        return self.decoder(tokens, self.prompt)

    def forward(self, x) -> Tensor:
        """Per-class logits of shape (B, h, w, k) for images (B, H, W, C)."""
        return self.forward_with_iou(x)[0]

    def predict(self, x, output_size=None) -> np.ndarray:
        with T.no_tape():
            logits = self.forward(x)
        return predict_map(logits, output_size or tuple(self.cfg.input_size))


def predict_map(logits: Tensor | np.ndarray, output_size=None) -> np.ndarray:
    """Label map from per-class logits (..., h, w, k).

    Logits are bilinearly upsampled to ``output_size`` first, then reduced
    by softmax and argmax over the class axis. Ties go to the lowest index.
    """
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    if t.shape[-1] < 2:
        raise ShapeError("need at least two classes")
    with T.no_tape():
        if output_size is not None and tuple(output_size) != tuple(t.shape[-3:-1]):
            t = T.bilinear_upsample(t, tuple(output_size))
        probs = T.softmax(t, axis=-1).data
    return np.argmax(probs, axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# customisation
# ---------------------------------------------------------------------------


def inject(model: SamedModel, spec: LoraSpec, seed: int = 0) -> SamedModel:
    """Attach LoRA bypasses in place and set the trainable set for ``model.cfg``.

    Targeted encoder projections (and, for the decoder-transformer scope, the
    decoder's attention projections) become ``LoraLinear`` sharing the frozen
    base weights. Trainable afterwards: every LoRA pair, the default prompt,
    and either the whole decoder (SAMed) or only its head (decoder-LoRA
    variant). The auxiliary IoU MLP stays frozen.
    """
    if model.lora is not None or lora_layers(model):
        raise RuntimeError("model already carries LoRA bypasses")
    cfg = model.cfg
    if cfg.finetune_mode != "encoder_and_decoder":
        raise ValueError("LoRA injection needs finetune_mode 'encoder_and_decoder'")
    want_scope = "encoder_and_decoder_transformer" if cfg.decoder_lora else "encoder_only"
    if spec.scope != want_scope:
        raise ValueError(f"LoRA scope {spec.scope!r} disagrees with decoder_lora={cfg.decoder_lora}")
    rng = np.random.default_rng(seed)
    for blk in model.encoder.blocks:
        wrap_attention(blk.attn, spec.targets, spec.rank, rng)
    if spec.scope == "encoder_and_decoder_transformer":
        for attn in model.decoder.transformer.attention_blocks():
            wrap_attention(attn, spec.targets, spec.rank, rng)
    model.lora = spec
    _unfreeze_decoder(model)
    return model


def _unfreeze_decoder(model: SamedModel) -> None:
    model.prompt.unfreeze()
    if model.cfg.decoder_lora:
        model.decoder.head.unfreeze()
    else:
        model.decoder.unfreeze()
    model.decoder.head.iou_mlp.freeze()


def customize(base: SamedModel, spec: LoraSpec | None = None, seed: int = 0,
              cfg: ModelConfig | None = None) -> SamedModel:
    """Trainable view of ``base`` sharing all frozen tensors with it.

    ``cfg`` may override the finetune fields of ``base.cfg``; architecture
    fields must match. ``decoder_only`` mode ignores ``spec``.
    """
    if cfg is not None and replace(cfg, finetune_mode=base.cfg.finetune_mode,
                                   decoder_lora=base.cfg.decoder_lora) != base.cfg:
        raise ValueError("customize may only change finetune_mode and decoder_lora")
    view = base.share_copy()
    view.lora = None
    if cfg is not None:
        view.cfg = cfg
    if view.cfg.finetune_mode == "decoder_only":
        _unfreeze_decoder(view)
        return view
    scope = "encoder_and_decoder_transformer" if view.cfg.decoder_lora else "encoder_only"
    return inject(view, spec or LoraSpec(scope=scope), seed)


def count_parameters(model: Module) -> dict:
    total = trainable = 0
    for _, p in model.named_parameters():
        total += p.size
        if p.requires_grad:
            trainable += p.size
    return {"total": total, "trainable": trainable,
            "fraction": trainable / total if total else 0.0}
