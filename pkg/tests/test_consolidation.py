import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prvr.attention import build_locality_mask, encoder_layer, gaussian_block
from prvr.config import DEFAULT_SIGMAS, ModelConfig
from prvr.consolidation import (
    InvalidTemperatureError,
    TCGMMBlock,
    TcmParams,
    aggregate_avg,
    aggregate_dynamic,
    aggregate_weighted,
    dynamic_weights,
    tc_gmmblock_forward,
    tcm_aggregate,
    tcm_weights,
)
from prvr.numerics import grad_check


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def tcm_params(d=8, m=4, seed=0, tau=0.6):
    rng = np.random.default_rng(seed)

    def r(*s):
        return torch.from_numpy(rng.normal(0, 0.7, size=s))

    return TcmParams(r(d), r(d, d), r(d, d), r(d, d), r(d, m), r(m), tau)


def straight_line_weights(p: TcmParams, x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """w = FC(CA(phi, X, X)) evaluated row by row in numpy."""
    phi, wq, wk, wv = (t.numpy() for t in (p.phi, p.ca_wq, p.ca_wk, p.ca_wv))
    q = phi @ wq
    scores = []
    for j in range(x.shape[0]):
        scores.append((x[j] @ wk) @ q / math.sqrt(q.shape[0]) if valid[j] else -np.inf)
    scores = np.array(scores)
    a = np.exp(scores - scores.max())
    a /= a.sum()
    ctx = sum(a[j] * (x[j] @ wv) for j in range(x.shape[0]))
    return ctx @ p.fc_w.numpy() + p.fc_b.numpy()


def test_identical_blocks_identical_weights():
    p = tcm_params()
    block = rand(4, 8)
    w = tcm_weights(p, torch.stack([block, block, block]), torch.ones(4, dtype=torch.bool))
    assert torch.equal(w[0], w[1]) and torch.equal(w[1], w[2])


def test_zero_fc_gives_zero_weights():
    p = tcm_params()
    p.fc_w = torch.zeros_like(p.fc_w)
    p.fc_b = torch.zeros_like(p.fc_b)
    w = tcm_weights(p, rand(3, 4, 8), torch.ones(4, dtype=torch.bool))
    assert (w == 0).all()


def test_tcm_weights_straight_line_oracle():
    p = tcm_params(seed=3)
    stack = rand(2, 4, 8, seed=1)
    valid = np.array([True, True, True, False])
    w = tcm_weights(p, stack, torch.from_numpy(valid))
    for k in range(2):
        np.testing.assert_allclose(w[k].numpy(), straight_line_weights(p, stack[k].numpy(), valid), atol=1e-12)


def test_equal_raw_weights_average():
    stack = rand(3, 5, 4)
    out = tcm_aggregate(stack, torch.full((3, 5), 0.7, dtype=torch.float64), 0.6)
    torch.testing.assert_close(out, aggregate_avg(stack), rtol=0, atol=1e-12)


def test_saturated_weight_selects_block():
    stack = rand(3, 5, 4)
    raw = torch.zeros(3, 5, dtype=torch.float64)
    raw[1, 2] = 1e4
    out = tcm_aggregate(stack, raw, 1.0)
    torch.testing.assert_close(out[2], stack[1, 2], rtol=0, atol=1e-12)


def test_two_block_mixture():
    stack = rand(2, 3, 4)
    raw = torch.tensor([[math.log(2)] * 3, [0.0] * 3], dtype=torch.float64)
    out = tcm_aggregate(stack, raw, 1.0)
    torch.testing.assert_close(out, 2 / 3 * stack[0] + 1 / 3 * stack[1], rtol=0, atol=1e-9)


def test_bad_temperature():
    with pytest.raises(InvalidTemperatureError):
        tcm_aggregate(rand(2, 3, 4), torch.zeros(2, 3, dtype=torch.float64), 0.0)
    with pytest.raises(InvalidTemperatureError):
        aggregate_weighted(rand(2, 3, 4), torch.zeros(2, dtype=torch.float64), -1.0)


def test_avg_examples():
    x = rand(1, 3, 4)
    assert torch.equal(aggregate_avg(x), x[0])
    assert (aggregate_avg(torch.stack([x[0], -x[0]])) == 0).all()
    three = rand(3, 4, 2)
    np.testing.assert_allclose(aggregate_avg(three).numpy(), three.numpy().mean(0), atol=1e-15)


def test_weighted_examples():
    stack = rand(2, 3, 4)
    torch.testing.assert_close(aggregate_weighted(stack, torch.zeros(2, dtype=torch.float64), 0.6),
                               aggregate_avg(stack), rtol=0, atol=1e-12)
    out = aggregate_weighted(stack, torch.tensor([1.0, 0.0], dtype=torch.float64), 1.0)
    torch.testing.assert_close(out, 0.73106 * stack[0] + 0.26894 * stack[1], rtol=0, atol=1e-4)
    e = math.e
    torch.testing.assert_close(out, e / (1 + e) * stack[0] + 1 / (1 + e) * stack[1], rtol=0, atol=1e-12)
    out = aggregate_weighted(stack, torch.tensor([0.0, 1e4], dtype=torch.float64), 1.0)
    torch.testing.assert_close(out, stack[1], rtol=0, atol=1e-12)


def test_dynamic_examples():
    p = tcm_params(m=3, seed=2)
    valid = torch.ones(2, 4, dtype=torch.bool)
    x = rand(2, 4, 8, seed=5)
    x[1] = x[0]
    w = dynamic_weights(p, x, valid)
    assert torch.equal(w[0], w[1])
    other = rand(4, 8, seed=9)
    assert not torch.allclose(dynamic_weights(p, other, valid[0]), w[0])
    np.testing.assert_allclose(w[0].numpy(), straight_line_weights(p, x[0].numpy(), np.ones(4, bool)), atol=1e-12)
    p.fc_w = torch.zeros_like(p.fc_w)
    p.fc_b = torch.zeros_like(p.fc_b)
    stack = rand(3, 2, 4, 8)
    torch.testing.assert_close(aggregate_dynamic(stack, x, p, valid), aggregate_avg(stack), rtol=0, atol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 100), st.integers(0, 10**6))
def test_tcm_convexity(k, m, tau, seed):
    stack = rand(k, m, 3, seed=seed)
    raw = rand(k, m, seed=seed + 1) * 5
    w = torch.softmax(raw / tau, dim=0)
    np.testing.assert_allclose(w.sum(0).numpy(), 1.0, atol=1e-9)
    assert ((w >= 0) & (w <= 1)).all()
    if k > 1 and tau > 0.1:
        assert ((w > 0) & (w < 1)).all()
    out = tcm_aggregate(stack, raw, tau)
    lo, hi = stack.min(0).values, stack.max(0).values
    assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-10, 10), st.integers(0, 10**6))
def test_tcm_equal_weights_is_avg(k, m, c, seed):
    stack = rand(k, m, 3, seed=seed)
    out = tcm_aggregate(stack, torch.full((k, m), c, dtype=torch.float64), 0.6)
    torch.testing.assert_close(out, aggregate_avg(stack), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_tcm_large_tau_limit(k, m, seed):
    stack = rand(k, m, 3, seed=seed)
    raw = rand(k, m, seed=seed + 7)
    torch.testing.assert_close(tcm_aggregate(stack, raw, 1e6), aggregate_avg(stack), rtol=0, atol=1e-4)


def make_block(sigmas=(0.5, 3.0), aggregation="tcm", length=5, d=6, heads=2, seed=0):
    return TCGMMBlock(d, length, sigmas, "gaussian", heads, 2, aggregation, 0.6, np.random.default_rng(seed))


def test_single_block_tcm_is_that_block():
    blk = make_block(sigmas=(1.0,))
    x = rand(5, 6)
    valid = torch.arange(5) < 4
    single = gaussian_block(x, build_locality_mask(5, 1.0), blk.blocks.single(0), valid)
    torch.testing.assert_close(tc_gmmblock_forward(x, blk, valid), single, rtol=0, atol=1e-14)


def test_infinite_sigma_k1_bit_identical_to_encoder_layer():
    blk = make_block(sigmas=(math.inf,), aggregation="avg")
    x = rand(5, 6)
    valid = torch.arange(5) < 3
    assert torch.equal(blk(x, valid), encoder_layer(x, blk.blocks.single(0), valid))


def test_default_sigma_list():
    assert len(DEFAULT_SIGMAS) == 8 and math.isinf(DEFAULT_SIGMAS[-1])
    assert ModelConfig().sigmas == DEFAULT_SIGMAS


@pytest.mark.parametrize("aggregation", ["tcm", "avg", "weighted", "dynamic"])
def test_batched_forward_matches_per_item(aggregation):
    blk = make_block(aggregation=aggregation)
    x = rand(3, 5, 6)
    valid = torch.arange(5) < torch.tensor([[5], [2], [4]])
    batched = blk(x, valid)
    for b in range(3):
        torch.testing.assert_close(batched[b], blk(x[b], valid[b]), rtol=0, atol=1e-12)


def test_tcm_gradient_phi_fc():
    blk = make_block(sigmas=(0.5, 1.0, math.inf), seed=4)
    with torch.no_grad():  # move off the uniform init so phi and CA get real gradients
        blk.fc_w.copy_(rand(*blk.fc_w.shape, seed=5))
    x = rand(5, 6, seed=2)
    valid = torch.arange(5) < 4
    named = {k: v for k, v in blk.named_parameters() if k in ("phi", "fc_w", "fc_b", "ca_wq", "ca_wk", "ca_wv")}
    rep = grad_check(lambda: (blk(x, valid) * rand(5, 6, seed=8)).sum(), named)
    assert rep.max_relative_error < 1e-4, rep


def test_fresh_tcm_block_is_average():
    tcm = make_block(aggregation="tcm", seed=6)
    avg = make_block(aggregation="avg", seed=6)
    avg.blocks.load_state_dict(tcm.blocks.state_dict())
    x = rand(2, 5, 6, seed=3)
    valid = torch.arange(5) < torch.tensor([[5], [3]])
    torch.testing.assert_close(tcm(x, valid), avg(x, valid), rtol=0, atol=1e-12)


def test_dimension_mismatch():
    p = tcm_params(m=4)
    with pytest.raises(ValueError):
        tcm_weights(p, rand(2, 5, 8), torch.ones(5, dtype=torch.bool))
    with pytest.raises(ValueError):
        make_block()(rand(4, 6), torch.ones(4, dtype=torch.bool))
