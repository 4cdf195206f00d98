"""Collapse instrumentation: where do a video's queries land among its clips?

Positions are clip indices in [0, M_c). A video whose queries all pick the
same clip has positioning variance 0.
"""
from dataclasses import dataclass

import numpy as np

from .retrieval import RetrievalIndex, encode_query_batch


class NoMultiQueryVideosError(ValueError):
    pass


@dataclass(frozen=True)
class PositioningRecord:
    video_id: str
    indices: tuple
    variance: float

    def as_dict(self) -> dict:
        return {"video_id": self.video_id, "clip_indices": list(self.indices), "variance": self.variance}


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def similarity_heatmap(q, clip_embeddings) -> np.ndarray:
    """Cosine of q against every clip row."""
    clips = np.atleast_2d(np.asarray(clip_embeddings, dtype=np.float64))
    return np.clip(_unit(clips) @ _unit(np.asarray(q, dtype=np.float64)), -1.0, 1.0)


def positioning_variance(clip_embeddings, queries, video_id: str = "") -> PositioningRecord:
    clips = np.asarray(clip_embeddings, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if clips.ndim != 2 or clips.shape[0] == 0:
        raise ValueError("need at least one clip embedding")
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ValueError("need at least one query")
    cos = _unit(queries) @ _unit(clips).T
    idx = np.argmax(cos, axis=1)  # first index on ties
    # sorted so the float sum, and hence the variance, ignores query order
    return PositioningRecord(video_id, tuple(int(i) for i in idx), float(np.var(np.sort(idx))))


@dataclass
class CollapseReport:
    label: str
    records: list
    counts: list
    edges: list
    mean: float
    median: float

    @property
    def n_videos(self) -> int:
        return len(self.records)

    def summary(self) -> dict:
        return {"label": self.label, "n_videos": self.n_videos, "mean_variance": self.mean,
                "median_variance": self.median, "histogram": {"counts": self.counts, "edges": self.edges}}


def summarize(records, n_clips: int, label: str = "", bins: int = 10) -> CollapseReport:
    if not records:
        raise NoMultiQueryVideosError("no multi-query videos to report on")
    var = np.array([r.variance for r in records])
    top = ((n_clips - 1) / 2.0) ** 2  # largest possible population variance of indices
    counts, edges = np.histogram(var, bins=bins, range=(0.0, max(top, 1e-9)))
    return CollapseReport(label, list(records), counts.tolist(), edges.tolist(),
                          float(var.mean()), float(np.median(var)))


def collapse_report(index: RetrievalIndex, corpus, model, label: str = "", bins: int = 10) -> CollapseReport:
    """Positioning variance over every indexed video that has two or more queries."""
    if index.clip is None:
        raise ValueError("collapse report needs clip embeddings")
    by_video = corpus.queries_by_video()
    records = []
    for i, vid in enumerate(index.ids):
        qs = by_video.get(vid, [])
        if len(qs) < 2:
            continue
        q = encode_query_batch(model, qs)
        records.append(positioning_variance(index.clip[i], q, vid))
    return summarize(records, index.clip.shape[1], label, bins)
