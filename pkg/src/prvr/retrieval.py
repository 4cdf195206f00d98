"""Video ranking by max-cosine similarity, recall metrics, and the index file.

The index stores frame and clip embeddings as little-endian float32; scoring
upcasts to float64. Ties in ranking go to the lexicographically smaller
video id.
"""
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import fileio
from .encoders import pad_sequences

INDEX_MAGIC = b"PRVRINDX"
INDEX_VERSION = 1
RECALL_KS = (1, 5, 10, 100)


class EmptyIndexError(ValueError):
    pass


class FingerprintMismatchError(ValueError):
    pass


class MissingGroundTruthError(KeyError):
    pass


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def branch_similarity(q, embeddings, valid: int | None = None) -> tuple[float, int]:
    """Max cosine between q and the first ``valid`` rows; returns (value, first argmax)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    valid = embeddings.shape[0] if valid is None else int(valid)
    if valid < 1:
        raise EmptyIndexError("no valid embedding rows")
    cos = _unit_rows(embeddings[:valid]) @ _unit_rows(np.asarray(q, dtype=np.float64))
    idx = int(np.argmax(cos))
    return float(cos[idx]), idx


def check_weights(alpha_f: float, alpha_c: float) -> None:
    if not (0 <= alpha_f <= 1 and 0 <= alpha_c <= 1) or not math.isclose(alpha_f + alpha_c, 1.0, abs_tol=1e-12):
        raise ValueError(f"interpolation weights ({alpha_f}, {alpha_c}) must lie on the simplex")


def overall_similarity(s_f: float, s_c: float, alpha_f: float = 0.3, alpha_c: float = 0.7) -> float:
    check_weights(alpha_f, alpha_c)
    return alpha_f * s_f + alpha_c * s_c


@dataclass
class RetrievalIndex:
    ids: list
    frame: np.ndarray | None  # (V, M_f, d) float32, padding rows zero
    clip: np.ndarray | None  # (V, M_c, d) float32
    valid_frames: np.ndarray  # (V,) int
    fingerprint: str = ""

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate video ids in index")
        self.valid_frames = np.asarray(self.valid_frames, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return (self.clip if self.clip is not None else self.frame).shape[-1]

    @property
    def nbytes(self) -> int:
        """Resident bytes of the embedding arrays."""
        return sum(a.nbytes for a in (self.frame, self.clip) if a is not None)

    def weights(self, alpha_f: float, alpha_c: float) -> tuple[float, float]:
        """Interpolation weights, collapsed onto whichever branch is present."""
        check_weights(alpha_f, alpha_c)
        if self.frame is None:
            return 0.0, 1.0
        if self.clip is None:
            return 1.0, 0.0
        return alpha_f, alpha_c


def _branch_scores(qn: np.ndarray, emb: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    cos = np.einsum("qd,vmd->qvm", qn, _unit_rows(emb.astype(np.float64)))
    if valid is not None:
        cos = np.where(valid[None], cos, -np.inf)
    return cos.max(-1)


def score_matrix(queries, index: RetrievalIndex, alpha_f: float = 0.3, alpha_c: float = 0.7,
                 chunk: int = 512) -> np.ndarray:
    """(n_q, V) overall similarity of every query against every indexed video."""
    if len(index) == 0:
        raise EmptyIndexError("empty index")
    a_f, a_c = index.weights(alpha_f, alpha_c)
    qn = _unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    out = np.zeros((qn.shape[0], len(index)))
    valid = None
    if index.frame is not None:
        valid = np.arange(index.frame.shape[1])[None, :] < index.valid_frames[:, None]
    for s in range(0, len(index), chunk):
        sl = slice(s, s + chunk)
        if index.frame is not None:
            out[:, sl] += a_f * _branch_scores(qn, index.frame[sl], valid[sl])
        if index.clip is not None:
            out[:, sl] += a_c * _branch_scores(qn, index.clip[sl], None)
    return out


def rank_videos(q, index: RetrievalIndex, alpha_f: float = 0.3, alpha_c: float = 0.7) -> list:
    """[(video id, score)] by descending score, ties by ascending id."""
    scores = score_matrix(q, index, alpha_f, alpha_c)[0]
    return sorted(zip(index.ids, scores.tolist()), key=lambda t: (-t[1], t[0]))


def truth_ranks(scores: np.ndarray, ids, truth_ids) -> np.ndarray:
    """1-based rank of each query's true video under the (score desc, id asc) order."""
    pos = {vid: i for i, vid in enumerate(ids)}
    try:
        cols = np.array([pos[t] for t in truth_ids])
    except KeyError as exc:
        raise MissingGroundTruthError(f"true video {exc.args[0]!r} not in index") from None
    id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
    true_scores = scores[np.arange(len(cols)), cols][:, None]
    better = (scores > true_scores).sum(1)
    tied_before = ((scores == true_scores) & (id_rank[None, :] < id_rank[cols][:, None])).sum(1)
    return 1 + better + tied_before


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise MissingGroundTruthError("no queries to evaluate")
    return float(100.0 * np.mean(ranks <= k))


@dataclass(frozen=True)
class MetricsReport:
    r1: float
    r5: float
    r10: float
    r100: float
    n_queries: int

    @property
    def sumr(self) -> float:
        return sum_recall(self)

    def as_dict(self) -> dict:
        return {"R1": self.r1, "R5": self.r5, "R10": self.r10, "R100": self.r100,
                "SumR": self.sumr, "n_queries": self.n_queries}


def sum_recall(report: MetricsReport) -> float:
    return report.r1 + report.r5 + report.r10 + report.r100


def metrics_from_ranks(ranks) -> MetricsReport:
    return MetricsReport(*(recall_at_k(ranks, k) for k in RECALL_KS), n_queries=len(ranks))


def random_ranking_sumr(n_videos: int) -> float:
    """Expected SumR when the true video's rank is uniform over the index."""
    return sum(100.0 * min(k, n_videos) / n_videos for k in RECALL_KS)


# --- building indexes from a model ---------------------------------------

def model_fingerprint(model) -> str:
    from .config import canonical_json

    h = hashlib.sha256(canonical_json(model.cfg).encode())
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


@torch.no_grad()
def build_index(model, videos, batch_size: int = 256, fingerprint: str | None = None) -> RetrievalIndex:
    cfg = model.cfg
    frames, clips, valid = [], [], []
    for s in range(0, len(videos), batch_size):
        x, lengths = pad_sequences(videos[s:s + batch_size], cfg.max_frames, cfg.d_in_video)
        emb = model.encode_videos(x, lengths)
        if emb.frame is not None:
            frames.append(emb.frame.numpy().astype(np.float32))
        if emb.clip is not None:
            clips.append(emb.clip.numpy().astype(np.float32))
        valid.append(lengths.numpy())
    return RetrievalIndex(
        [v.source_id for v in videos],
        np.concatenate(frames) if frames else None,
        np.concatenate(clips) if clips else None,
        np.concatenate(valid),
        fingerprint if fingerprint is not None else model_fingerprint(model),
    )


@torch.no_grad()
def encode_query_batch(model, queries, batch_size: int = 512) -> np.ndarray:
    cfg = model.cfg
    out = []
    for s in range(0, len(queries), batch_size):
        x, lengths = pad_sequences(queries[s:s + batch_size], cfg.max_words, cfg.d_in_text)
        valid = torch.arange(cfg.max_words) < lengths.unsqueeze(-1)
        out.append(model.encode_queries(x, valid).numpy())
    return np.concatenate(out) if out else np.zeros((0, cfg.d))


def evaluate(model, corpus, split: str = "test", video_ids=None) -> MetricsReport:
    """Index the split's videos, rank every one of its queries, report recalls."""
    ids = set(video_ids) if video_ids is not None else set(corpus.video_ids(split))
    videos = [v for v in corpus.videos if v.source_id in ids]
    queries = [q for q in corpus.queries if corpus.truth[q.source_id][0] in ids]
    index = build_index(model, videos, fingerprint="")
    q = encode_query_batch(model, queries)
    scores = score_matrix(q, index, model.cfg.alpha_frame, model.cfg.alpha_clip)
    ranks = truth_ranks(scores, index.ids, [corpus.truth[x.source_id][0] for x in queries])
    return metrics_from_ranks(ranks)


# --- persistence ---------------------------------------------------------

def save_index(index: RetrievalIndex, path) -> int:
    n_frames = 0 if index.frame is None else index.frame.shape[1]
    n_clips = 0 if index.clip is None else index.clip.shape[1]
    header = {
        "d": index.d,
        "n_videos": len(index),
        "max_frames": n_frames,
        "n_clips": n_clips,
        "fingerprint": index.fingerprint,
        "ids": list(index.ids),
        "valid_frames": index.valid_frames.tolist(),
    }
    records = []
    for i in range(len(index)):
        if index.frame is not None:
            records.append(np.ascontiguousarray(index.frame[i], dtype="<f4").tobytes())
        if index.clip is not None:
            records.append(np.ascontiguousarray(index.clip[i], dtype="<f4").tobytes())
    return fileio.write(path, INDEX_MAGIC, INDEX_VERSION, header, b"".join(records))


def load_index(path, expected_fingerprint: str | None = None) -> RetrievalIndex:
    header, payload = fileio.read(path, INDEX_MAGIC, INDEX_VERSION)
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatchError(
            f"index built by {header['fingerprint'][:12]}, checkpoint is {expected_fingerprint[:12]}"
        )
    n, d, mf, mc = header["n_videos"], header["d"], header["max_frames"], header["n_clips"]
    per_video = (mf + mc) * d
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != n * per_video:
        raise fileio.CorruptFileError("index payload size does not match its header")
    records = flat.reshape(n, mf + mc, d).astype(np.float32)
    return RetrievalIndex(
        header["ids"],
        records[:, :mf].copy() if mf else None,
        records[:, mf:].copy() if mc else None,
        np.array(header["valid_frames"], dtype=np.int64),
        header["fingerprint"],
    )
