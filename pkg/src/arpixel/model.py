"""Full model assembly: causal stem, interleaved gated-residual and
attention blocks, and the head that emits mixture parameters.

The head output is split along channels as [mixture logits | means |
log scales | rgb coupling coefficients], with the per-channel groups laid
out mixture-major (k * C + c)."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .layers import (AttentionParams, CausalConvParams, attention_block,
                     causal_stem, gated_residual_block)
from .mixture import LOG_SCALE_FLOOR, MixtureGrid, PixelAlphabet
from .tensor import DomainError, Tensor

STEM_KERNEL = (3, 3)        # both stem streams
BLOCK_DOWN_KERNEL = (2, 3)  # rows-above stream inside blocks
BLOCK_RIGHT_KERNEL = (2, 2)  # strictly-left stream inside blocks


@dataclass
class ModelConfig:
    """Architecture and data-space hyperparameters."""

    blocks: int = 2
    repeats: int = 2
    filters: int = 32
    key_dim: int = 4
    value_dim: int = 16
    mixtures: int = 2
    dropout_rate: float = 0.0
    channels: int = 1
    height: int = 8
    width: int = 8
    depth: int = 16
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "repeats", "filters", "mixtures", "key_dim", "value_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.filters % 2 != 0:
            raise ValueError("filters must be even (channels are split for gating)")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (rgb)")
        if self.depth < 2:
            raise ValueError("alphabet depth must be >= 2")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")
        if self.height < 1 or self.width < 1:
            raise ValueError("image extents must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def alphabet(self) -> PixelAlphabet:
        return PixelAlphabet(self.depth)

    @property
    def head_channels(self) -> int:
        """Mixture logits + per-channel means and log scales + rgb coefficients."""
        k, c = self.mixtures, self.channels
        return k * (1 + 3 * c) if c == 3 else k * (1 + 2 * c)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BlockParams:
    convs: List[CausalConvParams]
    attn: AttentionParams


@dataclass
class ModelParams:
    """All learnable tensors, enumerable in a fixed documented order.

    The enumeration order is: stem (down then downright, weight then bias),
    then per block the repeat convolutions followed by the attention
    projections (key, value, query, out), then the head weight and bias.
    Optimizer state, EMA shadows, and checkpoints all rely on this order.
    """

    stem: CausalConvParams
    blocks: List[BlockParams] = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = [("stem.down.w", self.stem.down_w), ("stem.down.b", self.stem.down_b),
               ("stem.downright.w", self.stem.downright_w),
               ("stem.downright.b", self.stem.downright_b)]
        for bi, block in enumerate(self.blocks):
            for ri, conv in enumerate(block.convs):
                base = f"block{bi}.conv{ri}"
                out += [(f"{base}.down.w", conv.down_w), (f"{base}.down.b", conv.down_b),
                        (f"{base}.downright.w", conv.downright_w),
                        (f"{base}.downright.b", conv.downright_b)]
            base = f"block{bi}.attn"
            out += [(f"{base}.key.w", block.attn.key_w),
                    (f"{base}.value.w", block.attn.value_w),
                    (f"{base}.query.w", block.attn.query_w),
                    (f"{base}.out.w", block.attn.out_w)]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None


def _attention_in_channels(config: ModelConfig) -> Tuple[int, int]:
    """(key/value input channels, query input channels)."""
    return config.filters + config.channels + 2, config.filters + 2


def init_params(config: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Deterministic initialization from per-tensor-name random streams.

    Weights are uniform in +-1/sqrt(fan_in); biases are zero.  The
    gate-producing convolution of every repeat and every attention output
    projection start at zero, so every block begins as the identity and the
    initial model is exactly stem + head.  Keying streams by tensor name
    keeps the stem and head draws independent of the block count.
    """
    seed = config.seed if seed is None else seed
    dtype = config.dtype

    def uniform(name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = rngmod.named_stream(seed, name).uniform(-bound, bound, size=shape)
        return Tensor(data.astype(dtype), requires_grad=True)

    def zeros(shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    f, c = config.filters, config.channels
    kh, kw = STEM_KERNEL
    stem = CausalConvParams(
        down_w=uniform("stem.down.w", (f, c, kh, kw), c * kh * kw),
        down_b=zeros(f),
        downright_w=uniform("stem.downright.w", (f, c, kh, kw), c * kh * kw),
        downright_b=zeros(f),
    )

    c_kv, c_q = _attention_in_channels(config)
    blocks = []
    for bi in range(config.blocks):
        convs = [CausalConvParams(down_w=zeros((2 * f, f) + BLOCK_DOWN_KERNEL),
                                  down_b=zeros(2 * f),
                                  downright_w=zeros((2 * f, f) + BLOCK_RIGHT_KERNEL),
                                  downright_b=zeros(2 * f))
                 for _ in range(config.repeats)]
        attn = AttentionParams(
            key_w=uniform(f"block{bi}.attn.key.w", (config.key_dim, c_kv), c_kv),
            value_w=uniform(f"block{bi}.attn.value.w", (config.value_dim, c_kv), c_kv),
            query_w=uniform(f"block{bi}.attn.query.w", (config.key_dim, c_q), c_q),
            out_w=zeros((f, config.value_dim)),
        )
        blocks.append(BlockParams(convs=convs, attn=attn))

    head_w = uniform("head.w", (config.head_channels, f), f)
    head_b = zeros(config.head_channels)
    return ModelParams(stem=stem, blocks=blocks, head_w=head_w, head_b=head_b)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    f, c = config.filters, config.channels
    stem = 2 * (f * c * STEM_KERNEL[0] * STEM_KERNEL[1] + f)
    per_repeat = (2 * f * f * BLOCK_DOWN_KERNEL[0] * BLOCK_DOWN_KERNEL[1] + 2 * f
                  + 2 * f * f * BLOCK_RIGHT_KERNEL[0] * BLOCK_RIGHT_KERNEL[1] + 2 * f)
    c_kv, c_q = _attention_in_channels(config)
    attn = (config.key_dim * c_kv + config.value_dim * c_kv
            + config.key_dim * c_q + f * config.value_dim)
    head = config.head_channels * f + config.head_channels
    return stem + config.blocks * (config.repeats * per_repeat + attn) + head


def split_head(head_out: Tensor, config: ModelConfig) -> MixtureGrid:
    """Slice head channels into the mixture parameter grid."""
    n, _, h, w = head_out.shape
    k, c = config.mixtures, config.channels
    logits = T.narrow(head_out, 1, 0, k)
    means = T.reshape(T.narrow(head_out, 1, k, k * c), (n, k, c, h, w))
    log_scales = T.maximum(
        T.reshape(T.narrow(head_out, 1, k + k * c, k * c), (n, k, c, h, w)),
        LOG_SCALE_FLOOR)
    coeffs = None
    if c == 3:
        coeffs = T.reshape(T.narrow(head_out, 1, k + 2 * k * c, 3 * k), (n, k, 3, h, w))
    return MixtureGrid(logits=logits, means=means, log_scales=log_scales,
                       coeffs=coeffs, alphabet=config.alphabet)


def normalize_images(images: np.ndarray, config: ModelConfig) -> Tensor:
    """Validate integer pixels against the alphabet and map them to [-1, 1]."""
    images = np.asarray(images)
    if not np.issubdtype(images.dtype, np.integer):
        raise DomainError(f"images must hold integers, got dtype {images.dtype}")
    if images.ndim != 4:
        raise T.ShapeError(f"images must be [N,C,H,W], got {images.ndim}-D")
    if images.min() < 0 or images.max() >= config.depth:
        raise DomainError(f"pixel values outside alphabet [0, {config.depth})")
    return Tensor(config.alphabet.normalize(images).astype(config.dtype))


def forward_normalized(x_norm: Tensor, params: ModelParams, config: ModelConfig,
                       training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> MixtureGrid:
    """Forward pass from an already-normalized image tensor (may require grad)."""
    features = causal_stem(x_norm, params.stem)
    for block in params.blocks:
        features = gated_residual_block(features, block.convs, config.dropout_rate,
                                        training, rng)
        features = attention_block(features, x_norm, block.attn)
    head_out = T.pointwise_linear(T.elu(features), params.head_w, params.head_b)
    return split_head(head_out, config)


def forward(images: np.ndarray, params: ModelParams, config: ModelConfig,
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> MixtureGrid:
    """Forward pass from integer images to the mixture parameter grid."""
    return forward_normalized(normalize_images(images, config), params, config,
                              training, rng)
