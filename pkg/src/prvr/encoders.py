"""Text and video encoders.

Text: FC -> learned positional embeddings -> pre-norm encoder layer ->
simple attention pooling. Video: a frame branch (FC -> multi-scale block)
and a clip branch (mean-pool downsampling to a fixed clip count -> FC ->
multi-scale block). Video branches carry no positional embeddings; the
locality masks supply the temporal prior.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .attention import BlockStack, encoder_layer, xavier
from .config import ModelConfig
from .consolidation import TCGMMBlock
from .datagen import FeatureSequence
from .numerics import softmax_rows


class EmptySequenceError(ValueError):
    pass


@dataclass
class TextEmbedding:
    words: torch.Tensor  # (N, d)
    sentence: torch.Tensor  # (d,)


@dataclass
class BranchEmbeddings:
    frame: torch.Tensor | None  # (M_f, d) or (B, M_f, d), padding rows zero
    clip: torch.Tensor | None  # (M_c, d) or (B, M_c, d)
    valid_frames: torch.Tensor  # () or (B,) counts

    @property
    def frame_valid(self) -> torch.Tensor:
        m = self.frame.shape[-2] if self.frame is not None else int(self.valid_frames.max())
        return torch.arange(m) < self.valid_frames.unsqueeze(-1)


def attention_pool(q: torch.Tensor, b: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """q = sum_i l_i Q_i with l = softmax(b Q^T) over valid rows."""
    if not torch.as_tensor(valid).any(dim=-1).all():
        raise EmptySequenceError("attention pooling over zero valid words")
    weights = softmax_rows(q @ b, valid)
    return (weights.unsqueeze(-1) * q).sum(-2)


def segment_bounds(length: int, n_clips: int) -> list[tuple[int, int]]:
    """Frame range [start, end) of each clip segment.

    Segment j spans [floor(j L / M_c), floor((j+1) L / M_c)); when L < M_c
    an empty segment falls back to the single frame floor(j L / M_c).
    """
    if n_clips < 1:
        raise ValueError("clip count must be >= 1")
    if length < 1:
        raise EmptySequenceError("cannot downsample an empty video")
    bounds = []
    for j in range(n_clips):
        start = (j * length) // n_clips
        end = ((j + 1) * length) // n_clips
        bounds.append((start, max(end, start + 1)))
    return bounds


@lru_cache(maxsize=4096)
def _pool_matrix(length: int, n_clips: int, padded: int) -> np.ndarray:
    p = np.zeros((n_clips, padded))
    for j, (s, e) in enumerate(segment_bounds(length, n_clips)):
        p[j, s:e] = 1.0 / (e - s)
    p.setflags(write=False)
    return p


def pooling_matrices(lengths, n_clips: int, padded: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([_pool_matrix(int(n), n_clips, padded) for n in lengths]))


def downsample_mean(features, n_clips: int, valid_length: int | None = None) -> np.ndarray:
    """Mean-pool the valid frames into ``n_clips`` contiguous segments."""
    if isinstance(features, FeatureSequence):
        valid_length = features.valid_length
        features = features.features
    features = np.asarray(features, dtype=np.float64)
    if valid_length is None:
        valid_length = features.shape[0]
    return np.stack([features[s:e].mean(0) for s, e in segment_bounds(valid_length, n_clips)])


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d
        self.fc_w = nn.Parameter(xavier(rng, cfg.d_in_text, d))
        self.fc_b = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.pos = nn.Parameter(torch.from_numpy(rng.normal(0.0, 0.02, size=(cfg.max_words, d))))
        self.layer = BlockStack(1, d, cfg.heads, cfg.ffn_mult, rng, cfg.ln_eps)
        self.pool = nn.Parameter(torch.from_numpy(rng.normal(0.0, 0.02, size=d)))

    def forward(self, words: torch.Tensor, valid: torch.Tensor):
        n = words.shape[-2]
        if n > self.pos.shape[0]:
            raise ValueError(f"query length {n} exceeds the maximum of {self.pos.shape[0]}")
        if not valid.any(dim=-1).all():
            raise EmptySequenceError("empty query")
        x = (words @ self.fc_w + self.fc_b + self.pos[:n]) * valid.unsqueeze(-1)
        x = encoder_layer(x, self.layer.single(0), valid)
        return x, attention_pool(x, self.pool, valid)


class VideoEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        common = dict(sigmas=cfg.sigmas, kind=cfg.kind, heads=cfg.heads, ffn_mult=cfg.ffn_mult,
                      aggregation=cfg.aggregation, tau=cfg.tau, ln_eps=cfg.ln_eps)
        if cfg.frame_branch:
            self.frame_fc_w = nn.Parameter(xavier(rng, cfg.d_in_video, d))
            self.frame_fc_b = nn.Parameter(torch.zeros(d, dtype=torch.float64))
            self.frame_block = TCGMMBlock(d, cfg.max_frames, rng=rng, **common)
        if cfg.clip_branch:
            self.clip_fc_w = nn.Parameter(xavier(rng, cfg.d_in_video, d))
            self.clip_fc_b = nn.Parameter(torch.zeros(d, dtype=torch.float64))
            self.clip_block = TCGMMBlock(d, cfg.n_clips, rng=rng, **common)

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor) -> BranchEmbeddings:
        """frames: (B, M_f, d_o) padded; lengths: (B,) valid frame counts."""
        cfg = self.cfg
        if frames.shape[-2] != cfg.max_frames:
            raise ValueError(f"expected {cfg.max_frames} padded frames, got {frames.shape[-2]}")
        if (lengths < 1).any() or (lengths > cfg.max_frames).any():
            raise EmptySequenceError(f"valid lengths must lie in [1, {cfg.max_frames}]")
        valid = torch.arange(cfg.max_frames) < lengths.unsqueeze(-1)
        frames = frames * valid.unsqueeze(-1)
        frame_emb = clip_emb = None
        if cfg.frame_branch:
            x = (frames @ self.frame_fc_w + self.frame_fc_b) * valid.unsqueeze(-1)
            frame_emb = self.frame_block(x, valid)
        if cfg.clip_branch:
            pool = pooling_matrices(lengths.tolist(), cfg.n_clips, cfg.max_frames).to(frames.dtype)
            clips = pool @ frames
            clip_valid = torch.ones(clips.shape[:-1], dtype=torch.bool)
            clip_emb = self.clip_block(clips @ self.clip_fc_w + self.clip_fc_b, clip_valid)
        return BranchEmbeddings(frame_emb, clip_emb, lengths)


class PRVRModel(nn.Module):
    """Text encoder plus dual-branch video encoder, float64 throughout."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.text = TextEncoder(cfg, rng)
        self.video = VideoEncoder(cfg, rng)

    def encode_queries(self, words: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.text(words, valid)[1]

    def encode_videos(self, frames: torch.Tensor, lengths: torch.Tensor) -> BranchEmbeddings:
        return self.video(frames, lengths)


def pad_sequences(seqs, max_len: int, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack FeatureSequences into (B, max_len, dim) float64 plus (B,) lengths."""
    out = np.zeros((len(seqs), max_len, dim))
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        n = s.valid_length
        if n > max_len:
            raise ValueError(f"sequence {s.source_id!r} has {n} steps, maximum is {max_len}")
        out[i, :n] = s.features[:n]
        lengths[i] = n
    return torch.from_numpy(out), torch.from_numpy(lengths)


def encode_text(word_feats: FeatureSequence, model: PRVRModel) -> TextEmbedding:
    if word_feats.valid_length < 1:
        raise EmptySequenceError("empty query")
    words, lengths = pad_sequences([word_feats], model.cfg.max_words, model.cfg.d_in_text)
    valid = torch.arange(model.cfg.max_words) < lengths.unsqueeze(-1)
    q_words, q = model.text(words, valid)
    n = word_feats.valid_length
    return TextEmbedding(q_words[0, :n], q[0])


def encode_video(video: FeatureSequence, model: PRVRModel) -> BranchEmbeddings:
    if video.valid_length < 1:
        raise EmptySequenceError("empty video")
    frames, lengths = pad_sequences([video], model.cfg.max_frames, model.cfg.d_in_video)
    emb = model.video(frames, lengths)
    return BranchEmbeddings(
        None if emb.frame is None else emb.frame[0],
        None if emb.clip is None else emb.clip[0],
        emb.valid_frames[0],
    )
