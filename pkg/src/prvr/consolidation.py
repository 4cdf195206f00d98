"""Multi-scale Gaussian blocks and their aggregation.

``TCGMMBlock`` runs K Gaussian blocks with different sigmas in parallel and
merges their outputs with one of four aggregators:

* ``tcm``: per-time-point softmax weights from a learned query that
  cross-attends to each block output, then an FC layer to one weight per
  time point (temporal consolidation).
* ``avg``: plain mean over blocks.
* ``weighted``: one learned scalar per block, shared by all videos.
* ``dynamic``: one weight vector over blocks per video, generated from the
  block input.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import BlockStack, build_locality_mask, gaussian_block, xavier
from .numerics import softmax_rows


class InvalidTemperatureError(ValueError):
    pass


@dataclass
class TcmParams:
    phi: torch.Tensor  # (d,)
    ca_wq: torch.Tensor  # (d, d)
    ca_wk: torch.Tensor
    ca_wv: torch.Tensor
    fc_w: torch.Tensor  # (d, M) for tcm, (d, K) for dynamic
    fc_b: torch.Tensor
    tau: float


def cross_attend(query: torch.Tensor, x: torch.Tensor, valid: torch.Tensor,
                 wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor) -> torch.Tensor:
    """Single-head attention of one query vector over the rows of x (..., M, d)."""
    qv = query @ wq
    logits = (x @ wk) @ qv / math.sqrt(qv.shape[-1])
    attn = softmax_rows(logits, valid)
    return (attn.unsqueeze(-1) * (x @ wv)).sum(-2)


def _check_tau(tau):
    if not tau > 0:
        raise InvalidTemperatureError(f"temperature must be positive, got {tau}")


def tcm_weights(params: TcmParams, stack: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Raw aggregation weights w_k = FC(CA(phi, X_k, X_k)), shape (K, ..., M)."""
    if stack.ndim < 3 or stack.shape[0] < 1:
        raise ValueError("stack must be (K, ..., M, d) with K >= 1")
    m = stack.shape[-2]
    if params.fc_w.shape[-1] != m or valid.shape[-1] != m:
        raise ValueError(
            f"weight generator emits {params.fc_w.shape[-1]} points, stack has {m}, validity {valid.shape[-1]}"
        )
    ctx = cross_attend(params.phi, stack, valid, params.ca_wq, params.ca_wk, params.ca_wv)
    return ctx @ params.fc_w + params.fc_b


def tcm_aggregate(stack: torch.Tensor, raw_weights: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-time-point softmax over blocks (dim 0) of raw/tau, then the weighted sum."""
    _check_tau(tau)
    w = torch.softmax(raw_weights / tau, dim=0)
    return (w.unsqueeze(-1) * stack).sum(0)


def aggregate_avg(stack: torch.Tensor) -> torch.Tensor:
    if stack.shape[0] < 1:
        raise ValueError("empty stack")
    return stack.mean(0)


def aggregate_weighted(stack: torch.Tensor, scalars: torch.Tensor, tau: float) -> torch.Tensor:
    _check_tau(tau)
    if scalars.shape != (stack.shape[0],):
        raise ValueError(f"need {stack.shape[0]} block scalars, got {tuple(scalars.shape)}")
    w = torch.softmax(scalars / tau, dim=0)
    return (w.reshape(-1, *([1] * (stack.ndim - 1))) * stack).sum(0)


def dynamic_weights(params: TcmParams, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Per-video raw block weights FC(CA(phi, X, X)), shape (..., K)."""
    ctx = cross_attend(params.phi, x, valid, params.ca_wq, params.ca_wk, params.ca_wv)
    return ctx @ params.fc_w + params.fc_b


def aggregate_dynamic(stack: torch.Tensor, x: torch.Tensor, params: TcmParams,
                      valid: torch.Tensor) -> torch.Tensor:
    _check_tau(params.tau)
    raw = dynamic_weights(params, x, valid)
    if raw.shape[-1] != stack.shape[0]:
        raise ValueError(f"weight generator emits {raw.shape[-1]} weights for {stack.shape[0]} blocks")
    w = torch.softmax(raw / params.tau, dim=-1)  # (..., K)
    w = w.movedim(-1, 0).unsqueeze(-1).unsqueeze(-1)
    return (w * stack).sum(0)


class TCGMMBlock(nn.Module):
    """K Gaussian blocks over sequences of fixed padded length ``length``."""

    def __init__(self, d: int, length: int, sigmas, kind: str, heads: int, ffn_mult: int,
                 aggregation: str, tau: float, rng: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        _check_tau(tau)
        if not sigmas:
            raise ValueError("sigma list must be nonempty")
        self.sigmas = tuple(float(s) for s in sigmas)
        self.kind, self.aggregation, self.tau, self.length = kind, aggregation, tau, length
        k = len(self.sigmas)
        masks = np.stack([build_locality_mask(length, s, kind).values for s in self.sigmas])
        self.register_buffer("masks", torch.from_numpy(masks), persistent=False)
        self.blocks = BlockStack(k, d, heads, ffn_mult, rng, ln_eps)
        p = nn.Parameter
        if aggregation in ("tcm", "dynamic"):
            out = length if aggregation == "tcm" else k
            self.phi = p(torch.from_numpy(rng.normal(0.0, 0.02, size=d)))
            self.ca_wq = p(xavier(rng, d, d))
            self.ca_wk = p(xavier(rng, d, d))
            self.ca_wv = p(xavier(rng, d, d))
            # zero FC: uniform block weights at init, so training starts from the plain mean
            xavier(rng, d, out)  # keep the rng stream independent of this choice
            self.fc_w = p(torch.zeros(d, out, dtype=torch.float64))
            self.fc_b = p(torch.zeros(out, dtype=torch.float64))
        elif aggregation == "weighted":
            self.block_logits = p(torch.zeros(k, dtype=torch.float64))

    def tcm_params(self) -> TcmParams:
        return TcmParams(self.phi, self.ca_wq, self.ca_wk, self.ca_wv, self.fc_w, self.fc_b, self.tau)

    def stack(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Outputs of all K blocks, shape (K, *batch, M, d)."""
        extra = x.ndim - 2
        k, m, _ = self.masks.shape
        if k == 1:  # unbatched path keeps a single block bit-identical to a plain layer
            return gaussian_block(x, self.masks[0], self.blocks.single(0), valid).unsqueeze(0)
        masks = self.masks.reshape(k, *([1] * extra), m, m)
        return gaussian_block(x.unsqueeze(0), masks, self.blocks.params(extra), valid)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.length:
            raise ValueError(f"expected padded length {self.length}, got {x.shape[-2]}")
        stack = self.stack(x, valid)
        if self.aggregation == "tcm":
            raw = tcm_weights(self.tcm_params(), stack, valid)
            return tcm_aggregate(stack, raw, self.tau)
        if self.aggregation == "avg":
            return aggregate_avg(stack)
        if self.aggregation == "weighted":
            return aggregate_weighted(stack, self.block_logits, self.tau)
        return aggregate_dynamic(stack, x * valid.unsqueeze(-1), self.tcm_params(), valid)


def tc_gmmblock_forward(x: torch.Tensor, block: TCGMMBlock, valid: torch.Tensor) -> torch.Tensor:
    return block(x, valid)
