import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from forge15 import tokenizer as tok
from forge15.grpo import (
    GRPOConfig, RolloutGroup, curate_from_rewards, curate_math_prompts, group_advantages, grpo_loss,
    grpo_step, keep_by_tally, kl_per_token, rollout, train_grpo,
)
from forge15.minilm import ModelConfig, completion_logprobs, init_params
from forge15.rewards import MathTask
from forge15.toydata import addition_tasks

from gradcheck import f64, fd_check

CFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=48)


def test_advantage_examples():
    assert group_advantages([1, 1, 1, 1, 0, 0, 0, 0]) == pytest.approx([1, 1, 1, 1, -1, -1, -1, -1], abs=1e-7)
    assert group_advantages([0.3] * 5) == [0.0] * 5
    # hand oracle: mean 1/4, population std sqrt(3)/4
    std = math.sqrt(3) / 4
    expected = [(1 - 0.25) / std, -0.25 / std, -0.25 / std, -0.25 / std]
    got = group_advantages([1, 0, 0, 0])
    assert got == pytest.approx(expected, abs=1e-7)
    assert got[0] == pytest.approx(1.7320508, abs=1e-6)
    assert got[1] == pytest.approx(-0.5773503, abs=1e-6)
    with pytest.raises(ValueError):
        group_advantages([1, 0], group_size=8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=2, max_size=16))
def test_advantage_normalisation(rewards):
    a = group_advantages(rewards)
    if len(set(rewards)) == 1:
        assert a == [0.0] * len(rewards)
        return
    assert abs(math.fsum(a)) < 1e-9
    var = math.fsum(x * x for x in a) / len(a)
    assert abs(var - 1) < 1e-6


def test_kl_examples():
    assert kl_per_token(-1.3, -1.3) == 0.0
    assert kl_per_token(0.0, math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert kl_per_token(0.0, math.log(2)) == pytest.approx(0.3069, abs=1e-4)
    with pytest.raises(ValueError):
        kl_per_token(float("nan"), 0.0)
    t = kl_per_token(torch.tensor([0.0, -1.0]), torch.tensor([0.0, 0.5]))
    assert t[0] == 0 and t[1] == pytest.approx(math.exp(1.5) - 1.5 - 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 0), st.floats(-50, 0))
def test_kl_nonnegative(a, b):
    v = kl_per_token(a, b)
    assert v >= 0
    assert (v == 0) == (a == b) or abs(a - b) < 1e-7


def _group(params, prompt, comps, rewards, ref_shift=0.0, task=None):
    seqs = [torch.tensor([prompt + c]) for c in comps]
    old = [completion_logprobs(CFG, params, s, len(prompt))[0].detach() for s in seqs]
    ref = [o + ref_shift for o in old]
    return RolloutGroup(task or MathTask("1+1", "2"), prompt, comps, rewards, old, ref)


def test_zero_advantage_zero_beta_is_noop():
    params = init_params(CFG, 0)
    prompt = tok.prompt_tokens("1+1")
    grp = _group(params, prompt, [[65, 66]], [1.0])
    new, _, stats = grpo_step(CFG, params, [grp], GRPOConfig(group_size=2, kl_beta=0.0))
    for k in params:
        assert torch.equal(new[k], params[k])
    assert stats["loss"] == 0.0


def test_one_token_loss_matches_hand_evaluation():
    params = init_params(CFG, 1, dtype=torch.float64)
    prompt = tok.prompt_tokens("2+2")
    rewards = [1.0, 0.0, 0.0, 0.0]
    beta = 0.5
    # reference logprob is ln2 above the current one for every token
    grp = _group(params, prompt, [[52], [53], [54], [55]], rewards, ref_shift=math.log(2))
    loss, stats = grpo_loss(CFG, params, [grp], GRPOConfig(group_size=4, kl_beta=beta))
    adv = group_advantages(rewards)
    expected = -sum(adv) / 4 + beta * (2 - math.log(2) - 1)
    assert float(loss) == pytest.approx(expected, abs=1e-12)
    assert stats["clip_frac"] == 0.0
    assert stats["mean_kl"] == pytest.approx(1 - math.log(2), abs=1e-12)


def test_grpo_loss_gradient_matches_finite_differences():
    params = f64(init_params(CFG, 2))
    ref = f64(init_params(CFG, 3))
    tasks = [MathTask("3+4", "7"), MathTask("10+5", "15")]
    cfg = GRPOConfig(group_size=4, max_new=6, kl_beta=0.1, seed=0)
    groups = rollout(CFG, params, ref, tasks, cfg)
    # plant non-degenerate rewards so the policy-gradient term is active
    for g in groups:
        g.rewards[:] = [1.0, 0.0, 0.5, 0.0]
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    loss, _ = grpo_loss(CFG, leaves, groups, cfg)
    names = list(leaves)
    gs = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    analytic = {k: torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(names, gs)}
    with torch.no_grad():
        err, fd, _ = fd_check(lambda p: grpo_loss(CFG, p, groups, cfg)[0], params, analytic, n=100, seed=2)
    assert np.linalg.norm(fd) > 0
    assert err < 1e-3


def test_rollout_contract_and_determinism():
    params = init_params(CFG, 4)
    tasks = addition_tasks(3, seed=0)
    cfg = GRPOConfig(group_size=8, max_new=8, seed=5)
    a = rollout(CFG, params, params, tasks, cfg)
    b = rollout(CFG, params, params, tasks, cfg)
    assert len(a) == 3
    for ga, gb, t in zip(a, b, tasks):
        assert ga.task == t
        assert len(ga.completions) == 8 and len(ga.rewards) == 8
        assert all(0.0 <= r <= 1.0 for r in ga.rewards)
        assert ga.completions == gb.completions
        for x, y in zip(ga.logp_old, gb.logp_old):
            assert torch.equal(x, y)


def test_step_zero_kl_is_exactly_zero():
    params = init_params(CFG, 6)
    ref = {k: v.clone() for k, v in params.items()}
    tasks = addition_tasks(4, seed=1)
    cfg = GRPOConfig(group_size=4, max_new=8, seed=0)
    groups = rollout(CFG, params, ref, tasks, cfg)
    _, stats = grpo_loss(CFG, params, groups, cfg)
    assert stats["mean_kl"] == 0.0
    assert stats["clip_frac"] == 0.0
    for g in groups:
        for lo, lr in zip(g.logp_old, g.logp_ref):
            assert torch.equal(lo, lr)


def test_group_field_validation():
    with pytest.raises(ValueError):
        RolloutGroup(MathTask("p", "1"), [1], [[1, 2]], [1.0], [torch.zeros(1)], [torch.zeros(2)])
    with pytest.raises(ValueError):
        grpo_loss(CFG, init_params(CFG, 0), [], GRPOConfig())


def test_config_invariants():
    with pytest.raises(ValueError):
        GRPOConfig(group_size=1)
    with pytest.raises(ValueError):
        GRPOConfig(clip_eps=1.0)
    with pytest.raises(ValueError):
        GRPOConfig(kl_beta=-0.1)
    d = GRPOConfig()
    assert (d.group_size, d.temperature, d.top_p, d.kl_beta, d.clip_eps) == (8, 1.0, 0.95, 0.001, 0.2)


@pytest.mark.parametrize("tally,kept", [((1, 7), True), ((0, 8), False), ((8, 0), False), ((5, 3), True),
                                        ((6, 2), False), ((1, 3), True), ((0, 3), False)])
def test_curation_rule(tally, kept):
    assert keep_by_tally(*tally) is kept


def test_curation_on_planted_rollouts():
    tasks = [MathTask(f"q{i}", "1") for i in range(7)]
    planted = [(1, 7), (0, 8), (8, 0), (5, 3), (6, 2), (2, 6), (4, 4)]
    rewards = [[1.0] * c + [0.0] * w for c, w in planted]
    rep = curate_from_rewards(tasks, rewards)
    assert rep.tallies == planted
    assert [t.prompt for t in rep.selected] == ["q0", "q3", "q5", "q6"]


def test_curate_math_prompts_runs_and_rejects_other_kinds():
    params = init_params(CFG, 0)
    rep = curate_math_prompts(CFG, params, addition_tasks(3), GRPOConfig(group_size=4, max_new=4))
    assert len(rep.tallies) == 3
    assert all(c + w <= 4 for c, w in rep.tallies)
    from forge15.rewards import FormatTask
    with pytest.raises(ValueError):
        curate_math_prompts(CFG, params, [FormatTask("x")], GRPOConfig())


def test_train_grpo_zero_steps_and_metrics_order():
    params = init_params(CFG, 0)
    res = train_grpo(CFG, params, addition_tasks(4), GRPOConfig(steps=0))
    assert res.metrics == [] and all(torch.equal(res.params[k], params[k]) for k in params)
    res = train_grpo(CFG, params, addition_tasks(4), GRPOConfig(group_size=2, max_new=4, batch_prompts=2,
                                                                 steps=3, checkpoint_every=2))
    steps = [m["step"] for m in res.metrics]
    assert steps == sorted(set(steps)) == [0, 1, 2]
    assert [s for s, _ in res.checkpoints] == [2]
    assert res.metrics[0]["mean_kl"] == 0.0
