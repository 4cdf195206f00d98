"""Synthetic corpora with planted moments of varying length.

Each video draws a scene from a small shared pool. Background frames sit
near the scene vector; every moment is a contiguous span whose frames sit
near a fresh concept vector (plus a configurable amount of scene). Each
moment gets one text query: a short word sequence near the same concept,
with optional per-video context (the scene again) so that queries of one
video resemble each other. Everything is drawn from one seeded generator
and stored as float32, so a seed fixes the corpus bit for bit.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fileio

CORPUS_MAGIC = b"PRVRCORP"
CORPUS_VERSION = 1


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class FeatureSequence:
    features: np.ndarray  # (length, dim) float32
    valid_length: int
    source_id: str

    def __post_init__(self):
        if self.valid_length > self.features.shape[0]:
            raise ValueError(f"{self.source_id}: valid_length exceeds stored length")


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 200
    n_test: int = 50
    frames: tuple = (16, 32)
    moments: tuple = (2, 5)
    mv_ratio: tuple = (0.05, 0.6)
    dim: int = 32
    query_words: tuple = (4, 8)
    query_noise: float = 0.5
    background_noise: float = 0.5
    n_scenes: int = 8
    scene_weight: float = 0.5
    query_context: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("frames", "moments", "mv_ratio", "query_words"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InfeasibleSpecError(f"empty range for {name}: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        lo, hi = self.mv_ratio
        if not (0 < lo and hi <= 1):
            raise InfeasibleSpecError("moment-to-video ratio range must lie in (0, 1]")
        if self.frames[0] < 1 or self.moments[0] < 1 or self.query_words[0] < 1:
            raise InfeasibleSpecError("frame, moment and word counts must be positive")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test < 1:
            raise InfeasibleSpecError("corpus needs at least one video")
        if self.n_scenes < 1 or self.dim < 1:
            raise InfeasibleSpecError("n_scenes and dim must be positive")
        shortest = self.frames[0]
        if self.moments[1] * _min_moment_len(shortest, lo) > shortest:
            raise InfeasibleSpecError(
                f"{self.moments[1]} moments of ratio >= {lo} cannot fit in {shortest} frames"
            )


def _min_moment_len(length: int, ratio: float) -> int:
    return max(1, math.ceil(ratio * length - 1e-9))


@dataclass
class Corpus:
    videos: list
    queries: list
    truth: dict  # query id -> (video id, (start, end))
    split: dict  # video id -> "train" | "test"
    spec: dict = field(default_factory=dict)

    def video_ids(self, split: str | None = None) -> list[str]:
        return [v.source_id for v in self.videos if split is None or self.split[v.source_id] == split]

    def queries_by_video(self) -> dict:
        out = {v.source_id: [] for v in self.videos}
        for q in self.queries:
            out[self.truth[q.source_id][0]].append(q)
        return out

    @property
    def d_video(self) -> int:
        return self.videos[0].features.shape[1]

    @property
    def d_text(self) -> int:
        return self.queries[0].features.shape[1]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _moment_lengths(rng, length: int, count: int, spec: CorpusSpec) -> list[int]:
    lo, hi = spec.mv_ratio
    min_len = _min_moment_len(length, lo)
    out, used = [], 0
    for i in range(count):
        avail = length - used - (count - i - 1) * min_len
        n = int(round(rng.uniform(lo, hi) * length))
        n = min(max(n, min_len), avail)
        out.append(n)
        used += n
    rng.shuffle(out)
    return out


def _place(rng, length: int, lengths: list[int]) -> list[tuple[int, int]]:
    gap_total = length - sum(lengths)
    # random composition of the leftover frames into len+1 gaps
    cuts = np.sort(rng.integers(0, gap_total + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, pos = [], 0
    for g, n in zip(gaps, lengths):
        pos += int(g)
        spans.append((pos, pos + n))
        pos += n
    return spans


def generate(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    scenes = _unit(rng.normal(size=(spec.n_scenes, d)))
    videos, queries, truth, split = [], [], {}, {}
    n_videos = spec.n_train + spec.n_test
    qn = 0
    for v in range(n_videos):
        vid = f"v{v:05d}"
        length = int(rng.integers(spec.frames[0], spec.frames[1] + 1))
        count = int(rng.integers(spec.moments[0], spec.moments[1] + 1))
        spans = _place(rng, length, _moment_lengths(rng, length, count, spec))
        scene = scenes[rng.integers(spec.n_scenes)]
        frames = scene + spec.background_noise * rng.normal(size=(length, d)) / math.sqrt(d)
        for start, end in spans:
            concept = _unit(rng.normal(size=d))
            noise = spec.background_noise * rng.normal(size=(end - start, d)) / math.sqrt(d)
            frames[start:end] = concept + spec.scene_weight * scene + noise
            n_words = int(rng.integers(spec.query_words[0], spec.query_words[1] + 1))
            words = (concept + spec.query_context * scene
                     + spec.query_noise * rng.normal(size=(n_words, d)) / math.sqrt(d))
            qid = f"q{qn:06d}"
            qn += 1
            queries.append(FeatureSequence(words.astype(np.float32), n_words, qid))
            truth[qid] = (vid, (start, end))
        videos.append(FeatureSequence(frames.astype(np.float32), length, vid))
        split[vid] = "train" if v < spec.n_train else "test"
    return Corpus(videos, queries, truth, split, spec=spec_dict(spec))


def spec_dict(spec: CorpusSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def spec_from_dict(data: dict) -> CorpusSpec:
    known = set(CorpusSpec.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise InfeasibleSpecError(f"unknown corpus spec keys: {sorted(unknown)}")
    return CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def save_corpus(corpus: Corpus, path) -> int:
    header = {
        "spec": corpus.spec,
        "d_video": corpus.d_video,
        "d_text": corpus.d_text,
        "videos": [[v.source_id, v.valid_length, v.features.shape[0], corpus.split[v.source_id]]
                   for v in corpus.videos],
        "queries": [[q.source_id, q.valid_length, q.features.shape[0], *_truth_row(corpus, q)]
                    for q in corpus.queries],
    }
    chunks = [np.ascontiguousarray(s.features, dtype="<f4").tobytes()
              for s in (*corpus.videos, *corpus.queries)]
    return fileio.write(path, CORPUS_MAGIC, CORPUS_VERSION, header, b"".join(chunks))


def _truth_row(corpus, q):
    vid, (start, end) = corpus.truth[q.source_id]
    return [vid, int(start), int(end)]


def load_corpus(path) -> Corpus:
    header, payload = fileio.read(path, CORPUS_MAGIC, CORPUS_VERSION)
    flat = np.frombuffer(payload, dtype="<f4")
    offset = 0

    def take(rows, dim):
        nonlocal offset
        n = rows * dim
        if offset + n > flat.size:
            raise fileio.CorruptFileError("payload shorter than the manifest describes")
        out = flat[offset:offset + n].reshape(rows, dim).astype(np.float32)
        offset += n
        return out

    videos, queries, truth, split = [], [], {}, {}
    for vid, valid, stored, part in header["videos"]:
        videos.append(FeatureSequence(take(stored, header["d_video"]), valid, vid))
        split[vid] = part
    for qid, valid, stored, vid, start, end in header["queries"]:
        queries.append(FeatureSequence(take(stored, header["d_text"]), valid, qid))
        truth[qid] = (vid, (start, end))
    if offset != flat.size:
        raise fileio.CorruptFileError("payload longer than the manifest describes")
    return Corpus(videos, queries, truth, split, spec=header["spec"])
