"""Training objective: basic retrieval losses plus text-clip matching terms.

Similarity matrices are (n_queries, n_videos) with ``positives[i]`` the
column of query i's video. A batch holds every query of every sampled video,
so one column can have several positive rows; texts that share a video are
never used as negatives of each other.

    total = trip_c + trip_f + lambda_c nce_c + lambda_f nce_f
            + lambda_d div + lambda_o om
"""
from dataclasses import dataclass, field

import torch

from .config import LossConfig
from .matching import solve_max_assignment
from .numerics import cosine_matrix


class NoNegativeError(ValueError):
    pass


def max_cosine(q: torch.Tensor, emb: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """(n_q, B) matrix of max_m cos(q_i, emb[b, m]) over valid rows."""
    cos = torch.einsum("qd,bmd->qbm", torch.nn.functional.normalize(q, dim=-1, eps=1e-12),
                       torch.nn.functional.normalize(emb, dim=-1, eps=1e-12))
    if valid is not None:
        cos = cos.masked_fill(~valid.unsqueeze(0), float("-inf"))
    return cos.max(-1).values


def _check(sim: torch.Tensor, positives: torch.Tensor):
    if sim.ndim != 2 or sim.shape[1] < 2:
        raise NoNegativeError("need at least two videos for in-batch negatives")
    positives = torch.as_tensor(positives, dtype=torch.long)
    same = positives.unsqueeze(1) == positives.unsqueeze(0)
    return positives, same


def triplet_loss(sim: torch.Tensor, positives, margin: float) -> torch.Tensor:
    """Bidirectional hinge with the hardest in-batch negative text and video."""
    positives, same = _check(sim, positives)
    rows = torch.arange(sim.shape[0])
    s_pos = sim[rows, positives]
    pos_mask = torch.zeros_like(sim, dtype=torch.bool)
    pos_mask[rows, positives] = True
    neg_video = sim.masked_fill(pos_mask, float("-inf")).max(1).values
    # column j of by_video holds S(T_k, V_{pos[j]}) for all texts k
    by_video = sim[:, positives]
    neg_text = by_video.masked_fill(same, float("-inf")).max(0).values
    return (torch.relu(margin + neg_text - s_pos) + torch.relu(margin + neg_video - s_pos)).mean()


def infonce_loss(sim: torch.Tensor, positives, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over exp(S / temperature)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    positives, same = _check(sim, positives)
    rows = torch.arange(sim.shape[0])
    logits = sim / temperature
    s_pos = logits[rows, positives]
    text_to_video = torch.logsumexp(logits, dim=1) - s_pos
    allowed = ~same | torch.eye(len(rows), dtype=torch.bool)
    video_to_text = torch.logsumexp(logits[:, positives].masked_fill(~allowed, float("-inf")), dim=0) - s_pos
    return (text_to_video + video_to_text).mean()


def diverse_pair_term(cos: torch.Tensor, gamma: float, alpha: float, delta: float) -> torch.Tensor:
    """(1 + cos)^gamma * log(1 + exp(alpha (cos + delta)))."""
    return (1.0 + cos).clamp_min(0.0) ** gamma * torch.logaddexp(torch.zeros_like(cos), alpha * (cos + delta))


def query_diverse_loss(queries: torch.Tensor, gamma: float, alpha: float, delta: float) -> torch.Tensor:
    """Mean pair term over the unordered query pairs of one video; 0 below two queries."""
    m = queries.shape[0]
    if m < 2:
        return queries.sum() * 0.0
    cos = cosine_matrix(queries, queries)
    i, j = torch.triu_indices(m, m, offset=1)
    return diverse_pair_term(cos[i, j], gamma, alpha, delta).mean()


def optimal_matching_loss(queries: torch.Tensor, clips: torch.Tensor, solver=solve_max_assignment):
    """Mean (1 - cos) over the maximum-profit query-to-clip assignment.

    The assignment is computed on detached similarities and held constant;
    gradients flow through the chosen cosines only. Returns (loss, plan).
    """
    profits = cosine_matrix(queries, clips)
    plan = solver(profits.detach().cpu().numpy())
    chosen = profits[torch.arange(queries.shape[0]), torch.tensor(plan.columns)]
    return (1.0 - chosen).mean(), plan


@dataclass
class BatchOutputs:
    queries: torch.Tensor  # (n_q, d)
    positives: torch.Tensor  # (n_q,) video column per query
    frame: torch.Tensor | None  # (B, M_f, d)
    frame_valid: torch.Tensor | None  # (B, M_f)
    clip: torch.Tensor | None  # (B, M_c, d)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)


def total_loss(out: BatchOutputs, cfg: LossConfig, solver=solve_max_assignment) -> LossBreakdown:
    zero = out.queries.sum() * 0.0
    terms = {}
    total = zero
    positives = out.positives
    if out.clip is not None:
        s_c = max_cosine(out.queries, out.clip)
        terms["trip_c"] = triplet_loss(s_c, positives, cfg.margin)
        terms["nce_c"] = infonce_loss(s_c, positives, cfg.nce_temperature)
        total = total + terms["trip_c"] + cfg.lambda_clip_nce * terms["nce_c"]
    if out.frame is not None:
        s_f = max_cosine(out.queries, out.frame, out.frame_valid)
        terms["trip_f"] = triplet_loss(s_f, positives, cfg.margin)
        terms["nce_f"] = infonce_loss(s_f, positives, cfg.nce_temperature)
        total = total + terms["trip_f"] + cfg.lambda_frame_nce * terms["nce_f"]

    groups = [torch.nonzero(positives == b).flatten() for b in range(int(positives.max()) + 1)]
    if cfg.lambda_div > 0:
        per_video = [query_diverse_loss(out.queries[g], cfg.gamma, cfg.alpha, cfg.delta)
                     for g in groups if len(g) >= 2]
        terms["div"] = torch.stack(per_video).mean() if per_video else zero
        total = total + cfg.lambda_div * terms["div"]
    if cfg.lambda_om > 0 and out.clip is not None:
        per_video = [optimal_matching_loss(out.queries[g], out.clip[b], solver)[0]
                     for b, g in enumerate(groups) if len(g) >= 1]
        terms["om"] = torch.stack(per_video).mean()
        total = total + cfg.lambda_om * terms["om"]
    return LossBreakdown(total, terms)
