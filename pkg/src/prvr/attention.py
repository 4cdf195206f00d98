"""Locality masks and the Gaussian-constrained Transformer block.

A Gaussian block is a pre-norm encoder layer whose attention logits are
multiplied elementwise by a fixed Toeplitz locality mask before the softmax:

    GA(X)   = softmax(mask * (X Wq)(X Wk)^T / sqrt(d_k)) X Wv
    X'      = GA(LN(X)) Wo + X
    X_sigma = FFN(LN(X')) + X'

The mask multiplies *signed* logits. Damping a negative logit toward zero
raises its softmax share; this follows the formula as written.

All functions accept arbitrary leading batch dimensions, which is how the K
blocks of a multi-scale stack run as one batched computation.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import CONSTRAINT_KINDS
from .numerics import layer_norm, softmax_rows

MASK_FLOOR = 1e-6


class EmptyMaskError(ValueError):
    pass


class InvalidVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class LocalityMask:
    size: int
    sigma: float
    kind: str
    values: np.ndarray


def build_locality_mask(size: int, sigma: float, kind: str = "gaussian",
                        floor: float = MASK_FLOOR) -> LocalityMask:
    """Symmetric Toeplitz mask whose entries depend only on |i - j|.

    gaussian: exp(-(j-i)^2 / sigma^2) / (2 pi)
    boxcar:   1 for |i-j| <= ceil(sigma), else ``floor``
    bartlett: max(0, 1 - |i-j| / ceil(sigma)) + ``floor``
    sigma = inf gives the all-ones mask for every kind (vanilla attention).
    """
    if size < 1:
        raise EmptyMaskError("locality mask needs at least one position")
    if not sigma > 0:  # also rejects NaN
        raise InvalidVarianceError(f"sigma must be positive, got {sigma}")
    if kind not in CONSTRAINT_KINDS:
        raise ValueError(f"unknown constraint kind {kind!r}")
    idx = np.arange(size)
    offset = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    if math.isinf(sigma):
        values = np.ones((size, size))
    elif kind == "gaussian":
        values = np.exp(-(offset**2) / sigma**2) / (2.0 * math.pi)
    elif kind == "boxcar":
        values = np.where(offset <= math.ceil(sigma), 1.0, floor)
    else:
        width = math.ceil(sigma)
        values = np.maximum(0.0, 1.0 - offset / width) + floor
    return LocalityMask(size, float(sigma), kind, values)


@dataclass
class BlockParams:
    """Parameters of one Gaussian block (or K stacked blocks).

    Projection matrices are ``(..., d, d_h)``; gains, biases and FFN weights
    likewise may carry leading stack dimensions that broadcast against the
    input's batch dimensions.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    ln1_gain: torch.Tensor
    ln1_bias: torch.Tensor
    ln2_gain: torch.Tensor
    ln2_bias: torch.Tensor
    ffn_w1: torch.Tensor
    ffn_b1: torch.Tensor
    ffn_w2: torch.Tensor
    ffn_b2: torch.Tensor
    heads: int
    ln_eps: float = 1e-5

    def tensors(self) -> dict:
        return {k: v for k, v in vars(self).items() if isinstance(v, torch.Tensor)}


def _split_heads(t: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, m, width = t.shape
    return t.reshape(*lead, m, heads, width // heads).transpose(-2, -3)


def gaussian_attention(x: torch.Tensor, mask, params: BlockParams, valid: torch.Tensor,
                       return_weights: bool = False):
    """Mask-rescaled multi-head attention, before the output projection.

    x: (..., M, d); mask: (..., M, M) values or None for plain attention;
    valid: (..., M) bool. Rows at padded positions are zeroed.
    """
    m, d = x.shape[-2:]
    if params.w_q.shape[-2] != d:
        raise ValueError(f"input width {d} does not match projection {tuple(params.w_q.shape)}")
    if valid.shape[-1] != m:
        raise ValueError(f"validity length {valid.shape[-1]} does not match sequence length {m}")
    d_h = params.w_q.shape[-1]
    if d_h % params.heads:
        raise ValueError(f"heads={params.heads} does not divide d_h={d_h}")
    q = _split_heads(x @ params.w_q, params.heads)
    k = _split_heads(x @ params.w_k, params.heads)
    v = _split_heads(x @ params.w_v, params.heads)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_h // params.heads)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=logits.dtype)
        if mask.shape[-1] != m or mask.shape[-2] != m:
            raise ValueError(f"mask of size {tuple(mask.shape[-2:])} for sequence length {m}")
        logits = logits * mask.unsqueeze(-3)
    weights = softmax_rows(logits, valid.unsqueeze(-2).unsqueeze(-2))
    out = (weights @ v).transpose(-2, -3)
    out = out.reshape(*out.shape[:-2], d_h) * valid.unsqueeze(-1)
    return (out, weights) if return_weights else out


def _block(x, mask, params: BlockParams, valid):
    keep = valid.unsqueeze(-1).to(x.dtype)
    x = x * keep
    h = layer_norm(x, params.ln1_gain, params.ln1_bias, params.ln_eps)
    x1 = gaussian_attention(h, mask, params, valid) @ params.w_o + x
    h = layer_norm(x1, params.ln2_gain, params.ln2_bias, params.ln_eps)
    ffn = torch.relu(h @ params.ffn_w1 + params.ffn_b1) @ params.ffn_w2 + params.ffn_b2
    return (ffn + x1) * keep


def gaussian_block(x: torch.Tensor, mask, params: BlockParams, valid: torch.Tensor) -> torch.Tensor:
    """One Gaussian-constrained pre-norm residual block.

    ``mask`` is a LocalityMask, an (..., M, M) array of mask values, or None.
    """
    if isinstance(mask, LocalityMask):
        mask = torch.from_numpy(mask.values).to(x.dtype)
    return _block(x, mask, params, valid)


def encoder_layer(x: torch.Tensor, params: BlockParams, valid: torch.Tensor) -> torch.Tensor:
    """Vanilla pre-norm Transformer encoder layer (no locality mask)."""
    return _block(x, None, params, valid)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, lead=()) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.from_numpy(rng.uniform(-bound, bound, size=(*lead, fan_in, fan_out)))


class BlockStack(nn.Module):
    """Parameters for ``count`` independent blocks, stored stacked on dim 0."""

    def __init__(self, count: int, d: int, heads: int, ffn_mult: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5):
        super().__init__()
        self.count, self.heads, self.ln_eps = count, heads, ln_eps
        hidden = ffn_mult * d
        lead = (count,)
        p = nn.Parameter
        self.w_q = p(xavier(rng, d, d, lead))
        self.w_k = p(xavier(rng, d, d, lead))
        self.w_v = p(xavier(rng, d, d, lead))
        self.w_o = p(xavier(rng, d, d, lead))
        self.ln1_gain = p(torch.ones(count, d, dtype=torch.float64))
        self.ln1_bias = p(torch.zeros(count, d, dtype=torch.float64))
        self.ln2_gain = p(torch.ones(count, d, dtype=torch.float64))
        self.ln2_bias = p(torch.zeros(count, d, dtype=torch.float64))
        self.ffn_w1 = p(xavier(rng, d, hidden, lead))
        self.ffn_b1 = p(torch.zeros(count, hidden, dtype=torch.float64))
        self.ffn_w2 = p(xavier(rng, hidden, d, lead))
        self.ffn_b2 = p(torch.zeros(count, d, dtype=torch.float64))

    def params(self, extra_dims: int = 0) -> BlockParams:
        """Stacked params reshaped to broadcast against (count, *batch, M, d)."""

        def mat(t):
            return t.reshape(t.shape[0], *([1] * extra_dims), *t.shape[1:])

        def vec(t):
            return t.reshape(t.shape[0], *([1] * (extra_dims + 1)), t.shape[-1])

        return BlockParams(
            mat(self.w_q), mat(self.w_k), mat(self.w_v), mat(self.w_o),
            vec(self.ln1_gain), vec(self.ln1_bias), vec(self.ln2_gain), vec(self.ln2_bias),
            mat(self.ffn_w1), vec(self.ffn_b1), mat(self.ffn_w2), vec(self.ffn_b2),
            self.heads, self.ln_eps,
        )

    def single(self, k: int = 0) -> BlockParams:
        """Unstacked params of block ``k``."""
        t = {name: getattr(self, name)[k] for name in BlockParams.__dataclass_fields__
             if name not in ("heads", "ln_eps")}
        return BlockParams(**t, heads=self.heads, ln_eps=self.ln_eps)
