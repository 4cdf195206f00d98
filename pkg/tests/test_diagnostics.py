import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prvr.config import ModelConfig
from prvr.datagen import CorpusSpec, generate
from prvr.diagnostics import (
    NoMultiQueryVideosError,
    collapse_report,
    positioning_variance,
    similarity_heatmap,
    summarize,
)
from prvr.encoders import PRVRModel
from prvr.numerics import cosine
from prvr.retrieval import build_index


def onehot_clips(n=6, d=6):
    return np.eye(n, d)


def test_all_queries_on_one_clip():
    clips = onehot_clips()
    queries = np.tile(clips[3], (4, 1)) + 0.01 * np.random.default_rng(0).normal(size=(4, 6))
    rec = positioning_variance(clips, queries, "v")
    assert rec.indices == (3, 3, 3, 3) and rec.variance == 0.0


def test_two_queries_at_zero_and_two():
    clips = onehot_clips()
    rec = positioning_variance(clips, clips[[0, 2]])
    assert rec.indices == (0, 2) and rec.variance == 1.0


def test_single_query_variance_zero():
    assert positioning_variance(onehot_clips(), onehot_clips()[[4]]).variance == 0.0


def test_ties_take_first_clip():
    clips = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert positioning_variance(clips, [[1.0, 0.0]]).indices == (0,)


def test_bad_inputs():
    with pytest.raises(ValueError):
        positioning_variance(np.zeros((0, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        positioning_variance(np.ones((2, 3)), np.zeros((0, 3)))


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10**6), st.data())
def test_variance_permutation_invariant(mq, mc, seed, data):
    rng = np.random.default_rng(seed)
    clips, q = rng.normal(size=(mc, 4)), rng.normal(size=(mq, 4))
    perm = list(data.draw(st.permutations(range(mq))))
    a = positioning_variance(clips, q).variance
    assert a == positioning_variance(clips, q[perm]).variance
    assert 0.0 <= a <= ((mc - 1) / 2) ** 2


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6))
def test_heatmap_bounded_and_matches_cosine(mc, seed):
    rng = np.random.default_rng(seed)
    clips, q = rng.normal(size=(mc, 5)), rng.normal(size=5)
    h = similarity_heatmap(q, clips)
    assert h.shape == (mc,) and (np.abs(h) <= 1).all()
    np.testing.assert_allclose(h, [cosine(q, c) for c in clips], atol=1e-12)


def test_summarize_histogram():
    clips = onehot_clips(4, 4)
    recs = [positioning_variance(clips, clips[[0, 3]], "a"), positioning_variance(clips, clips[[1, 1]], "b")]
    rep = summarize(recs, 4, "x", bins=4)
    assert rep.n_videos == 2 and sum(rep.counts) == 2
    assert rep.edges[0] == 0.0 and rep.edges[-1] == 2.25
    assert rep.mean == pytest.approx(2.25 / 2)
    with pytest.raises(NoMultiQueryVideosError):
        summarize([], 4)


@pytest.fixture(scope="module")
def small_setup():
    cfg = ModelConfig(d=8, heads=2, sigmas=(1.0, math.inf))
    model = PRVRModel(cfg, seed=0)
    corpus = generate(CorpusSpec(n_train=2, n_test=8, moments=(1, 3), seed=4))
    index = build_index(model, [v for v in corpus.videos if v.source_id in set(corpus.video_ids("test"))])
    return model, corpus, index


def test_report_covers_multi_query_videos(small_setup):
    model, corpus, index = small_setup
    rep = collapse_report(index, corpus, model, "full")
    multi = [v for v in index.ids if len(corpus.queries_by_video().get(v, [])) >= 2]
    assert rep.n_videos == len(multi) == sum(rep.counts)
    assert rep.summary() == collapse_report(index, corpus, model, "full").summary()


def test_report_without_multi_query_videos():
    cfg = ModelConfig(d=8, heads=2, sigmas=(1.0,))
    model = PRVRModel(cfg, seed=0)
    corpus = generate(CorpusSpec(n_train=0, n_test=3, moments=(1, 1), seed=1))
    with pytest.raises(NoMultiQueryVideosError):
        collapse_report(build_index(model, corpus.videos), corpus, model)
