"""Causal building blocks: shifted convolutions, gated residual blocks,
and the masked self-attention block.

Causality is enforced structurally, never approximately.  A causal
convolution is the sum of two streams: a kernel applied to the input
shifted down one row (context: rows strictly above, any column) and a
kernel applied to the input shifted right one column with left-heavy
padding (context: columns strictly left, same row and above).  Their union
covers exactly the raster-preceding positions, and composing layers grows
the receptive field without a blind spot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CausalConvParams:
    """One causal convolution, realized as a down stream plus a down-right stream.

    ``down_w`` sees rows i-kH..i-1 (any column within the footprint);
    ``downright_w`` sees columns j-kW..j-1 (same row and above).  The down
    kernel's width must be odd so its padding is symmetric.
    """

    down_w: Tensor       # [C_out, C_in, kH, kW], kW odd
    down_b: Tensor       # [C_out]
    downright_w: Tensor  # [C_out, C_in, kH, kW]
    downright_b: Tensor  # [C_out]


@dataclass
class AttentionParams:
    """Single-lookup causal attention projections (no biases)."""

    key_w: Tensor    # [d_k, C_kv]
    value_w: Tensor  # [d_v, C_kv]
    query_w: Tensor  # [d_k, C_q]
    out_w: Tensor    # [F, d_v]


def causal_conv(x: Tensor, params: CausalConvParams) -> Tensor:
    """Shape-preserving convolution whose receptive field is strictly raster-preceding."""
    kh, kw = params.down_w.shape[2], params.down_w.shape[3]
    if kw % 2 != 1:
        raise ValueError(f"down-stream kernel width must be odd, got {kw}")
    down = T.conv2d(T.shift2d(x, down=1), params.down_w, params.down_b,
                    pad=(kh - 1, 0, (kw - 1) // 2, (kw - 1) // 2))
    kh, kw = params.downright_w.shape[2], params.downright_w.shape[3]
    right = T.conv2d(T.shift2d(x, right=1), params.downright_w, params.downright_b,
                     pad=(kh - 1, 0, kw - 1, 0))
    return T.add(down, right)


def causal_stem(image_norm: Tensor, params: CausalConvParams) -> Tensor:
    """First layer: map the normalized image to features using only past pixels.

    The output at pixel (0, 0) is the (summed) bias vector, since that pixel
    has no predecessors.
    """
    return causal_conv(image_norm, params)


def gated_residual_block(x: Tensor, repeats: List[CausalConvParams],
                         dropout_rate: float, training: bool,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stack of gated causal convolutions with a residual connection per repeat.

    Each repeat computes elu(x), a causal convolution to 2F channels
    (dropout after the first repeat's convolution only), splits the result
    into (a, b) along channels, and adds a * sigmoid(b) back onto x.
    """
    f = x.shape[1]
    for i, conv in enumerate(repeats):
        h = causal_conv(T.elu(x), conv)
        if h.shape[1] != 2 * f:
            raise T.ShapeError(f"gated conv must produce {2 * f} channels on axis 1, "
                               f"got {h.shape[1]}")
        if i == 0 and dropout_rate > 0.0:
            h = T.dropout(h, dropout_rate, training, rng)
        a = T.narrow(h, 1, 0, f)
        b = T.narrow(h, 1, f, f)
        x = T.add(x, T.mul(a, T.sigmoid(b)))
    return x


def positional_channels(h: int, w: int, dtype=np.float64) -> Tensor:
    """Two constant channels holding row/column indices normalized to [-1, 1]."""
    rows = (2.0 * np.arange(h) / (h - 1) - 1.0) if h > 1 else np.zeros(h)
    cols = (2.0 * np.arange(w) / (w - 1) - 1.0) if w > 1 else np.zeros(w)
    grid = np.stack([np.repeat(rows[:, None], w, axis=1),
                     np.repeat(cols[None, :], h, axis=0)])
    return Tensor(grid[None].astype(dtype))


def raster_shift1(x: Tensor) -> Tensor:
    """Shift a [N,C,H,W] tensor by one position in raster order; position 0 becomes zero."""
    n, c, h, w = x.shape
    flat = T.reshape(x, (n, c, 1, h * w))
    return T.reshape(T.shift2d(flat, right=1), (n, c, h, w))


def causal_mask(length: int) -> np.ndarray:
    """Boolean [L, L] mask letting position t attend to positions strictly below t."""
    return np.tril(np.ones((length, length), dtype=bool), k=-1)


def attention_block(features: Tensor, image_norm: Tensor,
                    params: AttentionParams) -> Tensor:
    """Single causal key-value lookup over all raster-preceding positions.

    Keys and values see the features, the one-step-raster-shifted image, and
    the positional channels; queries see the features and the positional
    channels.  Position 0 has an empty context and passes its features
    through unchanged.
    """
    n, f, h, w = features.shape
    d_k = params.key_w.shape[0]
    d_v = params.value_w.shape[0]
    length = h * w

    pos = positional_channels(h, w, dtype=features.dtype)
    pos_n = Tensor(np.broadcast_to(pos.data, (n, 2, h, w)).copy())
    kv_in = T.concat([features, raster_shift1(image_norm), pos_n], axis=1)
    q_in = T.concat([features, pos_n], axis=1)

    def to_rows(t: Tensor, d: int) -> Tensor:
        return T.transpose(T.reshape(t, (n, d, length)), (0, 2, 1))

    keys = to_rows(T.pointwise_linear(kv_in, params.key_w), d_k)
    values = to_rows(T.pointwise_linear(kv_in, params.value_w), d_v)
    queries = to_rows(T.pointwise_linear(q_in, params.query_w), d_k)

    logits = T.mul(T.matmul(queries, T.transpose(keys, (0, 2, 1))), 1.0 / np.sqrt(d_k))
    weights = T.masked_softmax(logits, causal_mask(length))
    context = T.matmul(weights, values)
    context = T.reshape(T.transpose(context, (0, 2, 1)), (n, d_v, h, w))
    return T.add(features, T.pointwise_linear(context, params.out_w))
