import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from forge15 import tokenizer as tok
from forge15.minilm import (
    ModelConfig, TokenBatch, forward, generate, grad, init_params, lm_loss, loss, nucleus_filter,
    param_count, param_shapes, per_layer_param_count, sample, sequence_logprobs,
)

from gradcheck import f64, fd_check

CFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=11)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_param_count_closed_form():
    cfg = ModelConfig(n_layers=3, d_model=8, n_heads=2, d_ff=20)
    D, F, V = 8, 20, 264
    assert per_layer_param_count(cfg) == 4 * D * D + 3 * D * F + 2 * D
    assert param_count(cfg) == 3 * per_layer_param_count(cfg) + 2 * V * D + D
    assert param_count(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_forward_shape_and_finite(params):
    x = torch.randint(0, 264, (3, 20), generator=torch.Generator().manual_seed(0))
    out = forward(CFG, params, x)
    assert out.shape == (3, 20, 264)
    assert torch.isfinite(out).all()
    assert forward(CFG, params, x[0]).shape == (20, 264)


def test_forward_rejects_bad_input(params):
    with pytest.raises(ValueError, match="out of range"):
        forward(CFG, params, [1, 2, 264])
    with pytest.raises(ValueError, match="exceeds"):
        forward(CFG, params, [1] * 65)


def test_packed_equals_unpacked(params):
    d1, d2 = [5, 9, 44, 100], [200, 3, 17, 17, 8, 250]
    packed = forward(CFG, params, d1 + d2, [0] * 4 + [1] * 6)
    a = forward(CFG, params, d1)
    b = forward(CFG, params, d2)
    assert (packed[:4] - a).abs().max() <= 1e-5
    assert (packed[4:] - b).abs().max() <= 1e-5


def test_permuting_first_doc_leaves_second(params):
    d2 = [200, 3, 17, 17, 8]
    one = forward(CFG, params, [5, 9, 44, 100] + d2, [0] * 4 + [1] * 5)
    two = forward(CFG, params, [100, 44, 5, 9] + d2, [0] * 4 + [1] * 5)
    assert (one[4:] - two[4:]).abs().max() <= 1e-5


def test_uniform_logits_loss_is_log_vocab():
    b = TokenBatch([1, 2, 3, 4])
    value = float(lm_loss(torch.zeros(4, 264), b))
    assert value == pytest.approx(math.log(264), abs=1e-12)
    assert value == pytest.approx(5.5759, abs=1e-4)


def test_all_ones_mask_matches_cross_entropy(params):
    toks = [7, 8, 9, 10, 11, 12]
    logits = forward(CFG, params, toks)
    ref = torch.nn.functional.cross_entropy(logits[:-1].double(), torch.tensor(toks[1:]))
    assert float(lm_loss(logits, TokenBatch(toks))) == pytest.approx(float(ref), abs=1e-10)


def test_masked_successor_perturbation_is_invisible(params):
    # token 3 is never a counted target and never influences a counted target
    base = TokenBatch([1, 2, 3, 4, 5], loss_mask=[0, 1, 1, 0, 0])
    alt = TokenBatch([1, 2, 99, 4, 5], loss_mask=[0, 1, 1, 0, 0])
    base2 = TokenBatch([1, 2, 3, 4, 77], loss_mask=[0, 1, 1, 0, 0])
    assert float(loss(CFG, params, base)) == float(loss(CFG, params, base2))
    assert float(loss(CFG, params, base)) != float(loss(CFG, params, alt))


def test_loss_shift_invariance(params):
    b = TokenBatch([3, 1, 4, 1, 5, 9])
    logits = forward(CFG, params, b)
    shift = torch.randn(logits.shape[0], 1)
    assert float(lm_loss(logits + shift, b)) == pytest.approx(float(lm_loss(logits, b)), abs=1e-5)


def test_empty_mask_rejected(params):
    with pytest.raises(ValueError, match="empty loss mask"):
        grad(CFG, params, TokenBatch([1, 2, 3], loss_mask=[1, 0, 0]))


def test_gradient_matches_finite_differences():
    p = f64(init_params(CFG, seed=5))
    batch = [TokenBatch([10, 20, 30, 40, 50, 60, 70], [0, 0, 0, 1, 1, 1, 1], [0, 1, 1, 1, 1, 0, 1]),
             TokenBatch([1, 2, 3, 4, 5, 6, 7])]
    g = grad(CFG, p, batch)
    with torch.no_grad():
        err, fd, _ = fd_check(lambda q: loss(CFG, q, batch), p, g, n=100, h=1e-3, seed=1)
    assert np.linalg.norm(fd) > 0
    assert err < 1e-3


def test_absent_token_embedding_gets_zero_grad(params):
    b = TokenBatch([1, 2, 3, 4])
    g = grad(CFG, params, b)
    assert torch.count_nonzero(g["embed"][200]) == 0
    assert torch.count_nonzero(g["embed"][2]) > 0


def test_nucleus_hand_example():
    out = nucleus_filter(torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64), 0.7)
    assert out.tolist() == pytest.approx([0.625, 0.375, 0.0], abs=1e-15)
    # exactly reaching top_p stops the prefix
    out = nucleus_filter(torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64), 0.75)
    assert out.tolist() == pytest.approx([2 / 3, 1 / 3, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12), st.floats(0.05, 1.0))
def test_nucleus_property(ws, top_p):
    p = torch.tensor(ws, dtype=torch.float64)
    p = p / p.sum()
    out = nucleus_filter(p, top_p)
    kept = out > 0
    assert float(out.sum()) == pytest.approx(1.0)
    # kept set has mass >= top_p and is a prefix by descending probability
    assert float(p[kept].sum()) >= top_p - 1e-12
    if kept.sum() < len(ws):
        assert float(p[kept].min()) >= float(p[~kept].max())


def test_sampling_frequencies_match_softmax(params):
    prompt = torch.tensor([tok.prompt_tokens("hi")] * 10000)
    g = torch.Generator().manual_seed(0)
    toks, lps, _ = generate(CFG, params, prompt, temperature=1.0, top_p=1.0, max_new=1, generator=g)
    probs = torch.softmax(forward(CFG, params, prompt[0]).double()[-1], -1)
    counts = torch.bincount(toks[:, 0], minlength=264).double()
    n = 10000
    sigma = torch.sqrt(n * probs * (1 - probs))
    assert bool(((counts - n * probs).abs() <= 3 * sigma + 1).all())


def test_sample_deterministic_and_consistent(params):
    prompt = tok.prompt_tokens("abc")
    a = sample(CFG, params, prompt, temperature=1.0, top_p=0.95, max_new=12, seed=4)
    b = sample(CFG, params, prompt, temperature=1.0, top_p=0.95, max_new=12, seed=4)
    assert a == b
    lp = sequence_logprobs(CFG, params, prompt + a.tokens, len(prompt))
    assert np.allclose(lp.numpy(), np.array(a.logprobs), atol=1e-5)


def test_sample_argument_errors(params):
    with pytest.raises(ValueError):
        sample(CFG, params, [], max_new=2)
    with pytest.raises(ValueError):
        sample(CFG, params, [1], temperature=0.0)
    with pytest.raises(ValueError):
        sample(CFG, params, [1], top_p=0.0)
    with pytest.raises(ValueError):
        sequence_logprobs(CFG, params, [1, 2, 3], 3)


def test_softmax_rows_normalize(params):
    logits = forward(CFG, params, [1, 2, 3, 4]).double()
    s = torch.logsumexp(torch.log_softmax(logits, -1), -1).exp()
    assert torch.allclose(s, torch.ones_like(s), atol=1e-5)
