"""Discretized mixture-of-logistics output distribution.

Each discrete pixel level owns the logistic-mixture CDF mass of its bin in
the normalized [-1, 1] pixel space; the lowest and highest levels absorb
the open tails, so the D bin masses always sum to exactly one.  For RGB
pixels the green and blue means shift linearly with the already-known red
(and green) values; coefficients are stored raw and squashed by tanh at
use time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor

LOG_SCALE_FLOOR = -7.0
# Below this CDF mass the bin probability is replaced by midpoint density x bin width.
CDF_UNDERFLOW = 1e-12


@dataclass(frozen=True)
class PixelAlphabet:
    """The discrete pixel value space: levels 0..depth-1 mapped onto [-1, 1]."""

    depth: int

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"alphabet depth must be >= 2, got {self.depth}")

    @property
    def half_width(self) -> float:
        """Half the distance between adjacent level centers in normalized space."""
        return 1.0 / (self.depth - 1)

    def normalize(self, v):
        """Map integer levels to their bin centers in [-1, 1]."""
        return 2.0 * np.asarray(v, dtype=np.float64) / (self.depth - 1) - 1.0

    def quantize(self, x):
        """Nearest level for normalized values (assumed already clamped to [-1, 1])."""
        v = np.rint((np.asarray(x) + 1.0) * (self.depth - 1) / 2.0)
        return np.clip(v, 0, self.depth - 1).astype(np.int64)


@dataclass
class MixtureParams:
    """Mixture parameters at a single spatial location (plain arrays).

    ``log_scales`` are already clamped at LOG_SCALE_FLOOR; ``coeffs`` are raw
    (tanh is applied at use time) and present only for 3-channel pixels.
    """

    logits: np.ndarray             # [K]
    means: np.ndarray              # [K, C]
    log_scales: np.ndarray         # [K, C]
    coeffs: Optional[np.ndarray]   # [K, 3] or None


@dataclass
class MixtureGrid:
    """Mixture parameters for every location of a batch, as graph tensors."""

    logits: Tensor                # [N, K, H, W]
    means: Tensor                 # [N, K, C, H, W]
    log_scales: Tensor            # [N, K, C, H, W], clamped
    coeffs: Optional[Tensor]      # [N, K, 3, H, W] or None
    alphabet: PixelAlphabet

    @property
    def mixtures(self) -> int:
        return self.logits.shape[1]

    @property
    def channels(self) -> int:
        return self.means.shape[2]

    def at(self, n: int, i: int, j: int) -> MixtureParams:
        """Detached per-location view, e.g. for the sampler."""
        return MixtureParams(
            logits=self.logits.data[n, :, i, j].copy(),
            means=self.means.data[n, :, :, i, j].copy(),
            log_scales=self.log_scales.data[n, :, :, i, j].copy(),
            coeffs=None if self.coeffs is None else self.coeffs.data[n, :, :, i, j].copy(),
        )


def channel_means(params: MixtureParams, observed_norm) -> np.ndarray:
    """Effective per-mixture means given the already-known normalized channels.

    For RGB: mu_r = m_r, mu_g = m_g + tanh(c0)*x_r,
    mu_b = m_b + tanh(c1)*x_r + tanh(c2)*x_g.  Grayscale means pass through.
    """
    mu = params.means.copy()
    channels = mu.shape[1]
    if channels == 1 or params.coeffs is None:
        return mu
    obs = np.asarray(observed_norm, dtype=np.float64)
    c = np.tanh(params.coeffs)
    mu[:, 1] += c[:, 0] * obs[0]
    mu[:, 2] += c[:, 1] * obs[0] + c[:, 2] * obs[1]
    return mu


def _coupled_means_grid(grid: MixtureGrid, x_norm: np.ndarray) -> Tensor:
    """Tensor-op version of channel_means over the whole batch.

    ``x_norm`` holds the observed normalized pixels [N, C, H, W]; only the
    strictly-preceding channels of each location enter its means.
    """
    if grid.channels == 1 or grid.coeffs is None:
        return grid.means
    xr = x_norm[:, None, 0:1]  # [N, 1, 1, H, W], constant
    xg = x_norm[:, None, 1:2]
    c0 = T.tanh(T.narrow(grid.coeffs, 2, 0, 1))
    c1 = T.tanh(T.narrow(grid.coeffs, 2, 1, 1))
    c2 = T.tanh(T.narrow(grid.coeffs, 2, 2, 1))
    mu_r = T.narrow(grid.means, 2, 0, 1)
    mu_g = T.add(T.narrow(grid.means, 2, 1, 1), T.mul(c0, Tensor(xr)))
    mu_b = T.add(T.narrow(grid.means, 2, 2, 1),
                 T.add(T.mul(c1, Tensor(xr)), T.mul(c2, Tensor(xg))))
    return T.concat([mu_r, mu_g, mu_b], axis=2)


def dlm_log_prob(x: np.ndarray, grid: MixtureGrid, alphabet: Optional[PixelAlphabet] = None) -> Tensor:
    """Per-subpixel log-probability of integer pixel values under the mixture.

    Returns a [N, C, H, W] tensor, differentiable with respect to the grid
    parameters.  Each channel is a K-component discretized logistic mixture
    whose means are conditioned on the observed preceding channels, so the
    per-location log-probability is the sum over channels.
    """
    alphabet = alphabet or grid.alphabet
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        raise DomainError(f"pixel values must be integers, got dtype {x.dtype}")
    if x.min() < 0 or x.max() >= alphabet.depth:
        raise DomainError(f"pixel values outside alphabet [0, {alphabet.depth})")

    w = alphabet.half_width
    x_norm = alphabet.normalize(x)                      # [N, C, H, W]
    xb = Tensor(x_norm[:, None])                        # [N, 1, C, H, W], constant

    mu = _coupled_means_grid(grid, x_norm)              # [N, K, C, H, W]
    centered = T.sub(xb, mu)
    inv_s = T.exp(T.negate(grid.log_scales))
    plus_in = T.mul(inv_s, T.add(centered, w))
    min_in = T.mul(inv_s, T.sub(centered, w))

    log_cdf_plus = T.sub(plus_in, T.softplus(plus_in))        # log CDF(upper edge)
    log_one_minus_cdf_min = T.negate(T.softplus(min_in))      # log (1 - CDF(lower edge))
    cdf_delta = T.sub(T.sigmoid(plus_in), T.sigmoid(min_in))
    mid_in = T.mul(inv_s, centered)
    log_pdf_mid = T.sub(T.sub(mid_in, grid.log_scales), T.mul(2.0, T.softplus(mid_in)))

    # Interior bins use log(CDF difference); when that mass underflows, fall
    # back to midpoint density times bin width.  The clamp inside log keeps
    # the untaken branch finite so no NaN leaks through the select gradient.
    interior = T.where(cdf_delta.data >= CDF_UNDERFLOW,
                       T.log(T.maximum(cdf_delta, CDF_UNDERFLOW)),
                       T.add(log_pdf_mid, math.log(2.0 * w)))
    is_low = (x == 0)[:, None]
    is_high = (x == alphabet.depth - 1)[:, None]
    per_k = T.where(is_low, log_cdf_plus,
                    T.where(is_high, log_one_minus_cdf_min, interior))

    mix_logp = T.log_softmax(grid.logits, axis=1)             # [N, K, H, W]
    k, = mix_logp.shape[1:2]
    mix_logp = T.reshape(mix_logp, (mix_logp.shape[0], k, 1) + mix_logp.shape[2:])
    return T.logsumexp(T.add(per_k, mix_logp), axis=1)        # [N, C, H, W]


def dlm_sample(params: MixtureParams, alphabet: PixelAlphabet,
               rng: np.random.Generator) -> np.ndarray:
    """Draw one pixel (all channels) from a per-location mixture.

    One mixture component is drawn for the pixel; each channel then draws a
    logistic sample around its coupled mean, clamps to [-1, 1], and
    quantizes to the nearest level.  Channel coupling uses the levels
    already emitted at this location, matching the likelihood's
    conditioning on observed values.
    """
    probs = np.exp(params.logits - params.logits.max())
    probs /= probs.sum()
    k = int(np.searchsorted(np.cumsum(probs), rng.random()))
    k = min(k, len(probs) - 1)

    channels = params.means.shape[1]
    out = np.zeros(channels, dtype=np.int64)
    sampled_norm = np.zeros(channels)
    for c in range(channels):
        mu = channel_means(params, sampled_norm)[k, c]
        s = math.exp(params.log_scales[k, c])
        u = min(max(rng.random(), 1e-12), 1.0 - 1e-12)
        ell = mu + s * (math.log(u) - math.log(1.0 - u))
        ell = min(max(ell, -1.0), 1.0)
        out[c] = alphabet.quantize(ell)
        sampled_norm[c] = alphabet.normalize(out[c])
    return out


def bits_per_dim(total_nll_nats: float, n_images: int, channels: int,
                 height: int, width: int) -> float:
    """Convert a summed negative log-likelihood in nats to bits per dimension."""
    dims = n_images * channels * height * width
    if dims <= 0:
        raise ValueError("bits_per_dim needs a positive number of dimensions")
    return total_nll_nats / (dims * math.log(2.0))
