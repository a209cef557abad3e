import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphgrpo import numerics as nx
from glyphgrpo.grpo import (
    GrpoConfig,
    PolicyTriple,
    best_of_n,
    collect_group,
    compute_advantages,
    group_code_logprobs,
    grpo_loss,
    kl_unbiased,
    policy_gradient_oracle,
    train_step,
)
from glyphgrpo.numerics import Adam, GradTape, NumericError
from glyphgrpo.policy import PolicyConfig, PolicyModel, SamplerConfig, sample_grid
from glyphgrpo.rewards import RewardSpec, make_specs, score_grid
from glyphgrpo.tasks import ToyTask, sample_tasks
from glyphgrpo.vq import GlyphAtlas

ATLAS = GlyphAtlas.default()
SPECS = make_specs()
CFG = PolicyConfig(embed_dim=16, n_heads=2, n_core_blocks=1, n_vision_blocks_pre=1, n_vision_blocks_post=1, max_seq_len=32, init_std=0.3)


def tiny_model(seed=0):
    return PolicyModel(replace(CFG, seed=seed))


def make_groups(model, tasks, G=6, seed=0):
    groups = []
    for j, task in enumerate(tasks):
        rngs = [nx.make_rng(seed, j, i) for i in range(G)]
        groups.append(collect_group(model, task, G, SamplerConfig(), rngs, SPECS, ATLAS))
    return groups


def attach_logprobs(groups, old, ref):
    for g, a, b in zip(groups, group_code_logprobs(old, groups), group_code_logprobs(ref, groups)):
        g.old_logprobs, g.ref_logprobs = a.data, b.data
    return groups


def test_advantages_hand_computed():
    a = compute_advantages([1.0, 2.0, 3.0])
    s = 1.0 / math.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(a, [-s, 0.0, s], atol=1e-12)
    assert a[2] == pytest.approx(1.2247, abs=1e-4)


def test_advantages_equal_rewards():
    assert np.array_equal(compute_advantages([0.4] * 5), np.zeros(5))


def test_advantages_random_groups_are_standardised():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = compute_advantages(rng.random(rng.integers(2, 20)))
        assert abs(a.mean()) <= 1e-9
        assert a.std() == pytest.approx(1.0, abs=1e-9)


def test_advantages_std_floor():
    a = compute_advantages([0.0, 1e-9], std_floor=1e-6)
    np.testing.assert_allclose(a, [-5e-4, 5e-4], rtol=1e-9)


def test_kl_identical_is_zero():
    assert np.array_equal(kl_unbiased([-1.0, -2.5], [-1.0, -2.5]), [0.0, 0.0])


def test_kl_ratio_two():
    assert kl_unbiased([0.0], [math.log(2.0)])[0] == pytest.approx(2 - 1 - math.log(2), abs=1e-15)
    assert 2 - 1 - math.log(2) == pytest.approx(0.3069, abs=1e-4)


def test_kl_non_finite():
    with pytest.raises(NumericError):
        kl_unbiased([np.nan], [0.0])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-50, 0), min_size=1, max_size=8), st.lists(st.floats(-50, 0), min_size=8, max_size=8))
def test_kl_pointwise_non_negative(lp, ref):
    assert np.all(kl_unbiased(lp, ref[: len(lp)]) >= 0.0)


def test_kl_estimator_matches_exact_kl():
    p = np.array([0.4, 0.25, 0.15, 0.12, 0.08])
    q = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
    exact = float(np.sum(p * np.log(p / q)))
    x = np.random.default_rng(0).choice(5, size=100_000, p=p)
    est = kl_unbiased(np.log(p[x]), np.log(q[x])).mean()
    assert abs(est - exact) / exact < 0.05


def test_on_policy_objective_is_zero_without_kl():
    model = tiny_model()
    groups = attach_logprobs(make_groups(model, sample_tasks(3, 0, lengths=(3, 4))), model, model)
    loss, stats = grpo_loss(groups, model, GrpoConfig(kl_beta=0.0))
    assert abs(loss.item()) < 1e-12
    assert stats.clip_fraction == 0.0 and stats.ratio_min == stats.ratio_max == 1.0


def test_clip_boundary():
    model = tiny_model()
    groups = make_groups(model, [ToyTask("ABC", "a")], G=2)
    g = groups[0]
    lp = group_code_logprobs(model, groups)[0].data
    eps = 0.2
    g.old_logprobs = lp - math.log(1 + 2 * eps) / lp.shape[1]
    g.ref_logprobs = lp
    g.advantages = np.array([1.0, -1.0])
    loss, stats = grpo_loss(groups, model, GrpoConfig(kl_beta=0.0, clip_eps=eps))
    # positive advantage is clipped to (1+eps)A, negative keeps the full ratio
    assert -loss.item() == pytest.approx(((1 + eps) * 1.0 + (1 + 2 * eps) * -1.0) / 2, abs=1e-12)
    assert stats.clip_fraction == 1.0


def _relative(a, b):
    num = math.sqrt(sum(float(np.sum((x - y) ** 2)) for x, y in zip(a, b)))
    den = math.sqrt(sum(float(np.sum(x**2)) for x in b))
    return num / den


@pytest.mark.parametrize("ratio_level", ["sequence", "token"])
@pytest.mark.parametrize("beta", [0.0, 0.01])
def test_gradient_matches_policy_gradient_oracle(ratio_level, beta):
    model = tiny_model(seed=4)
    groups = attach_logprobs(make_groups(model, sample_tasks(3, 1, lengths=(4,))), model, model)
    params = model.parameters()
    with GradTape() as tape:
        tape.watch(params)
        loss, _ = grpo_loss(groups, model, GrpoConfig(kl_beta=beta, ratio_level=ratio_level))
    grads = tape.gradient(loss, params)
    oracle = policy_gradient_oracle(model, groups)
    if ratio_level == "token":
        # per-token ratios average over positions, which rescales the sequence term by 1/n
        oracle = [o / groups[0].n_codes for o in oracle]
    assert _relative([-g for g in grads], oracle) < 1e-6


def test_zero_advantage_step_leaves_parameters_unchanged():
    model = tiny_model()
    triple = PolicyTriple(model, model.clone())
    before = {k: v.copy() for k, v in model.state_dict().items()}
    flat = [RewardSpec("const", 1.0, lambda ctx: 0.5)]
    cfg = GrpoConfig(group_size=4, prompts_per_step=2, kl_beta=0.0, lr=1e-2)
    rep, groups = train_step(triple, Adam(model.parameters()), sample_tasks(2, 0), flat, ATLAS, cfg, 0)
    assert all(np.all(g.advantages == 0) for g in groups)
    assert all(before[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())


def test_clip_fraction_zero_at_zero_lr():
    model = tiny_model()
    triple = PolicyTriple(model, model.clone())
    opt = Adam(model.parameters())
    cfg = GrpoConfig(group_size=4, prompts_per_step=2, lr=0.0)
    for step in range(2):
        rep, _ = train_step(triple, opt, sample_tasks(2, step), SPECS, ATLAS, cfg, step)
        assert rep.clip_fraction == 0.0
        assert rep.ratio_min == rep.ratio_max == 1.0
        assert 0.0 <= rep.mean_reward <= 1.0


def test_train_step_is_reproducible():
    outs = []
    for _ in range(2):
        model = tiny_model(seed=9)
        triple = PolicyTriple(model, model.clone())
        cfg = GrpoConfig(group_size=4, prompts_per_step=2, lr=1e-2)
        rep, _ = train_step(triple, Adam(model.parameters()), sample_tasks(2, 5), SPECS, ATLAS, cfg, 3)
        outs.append((rep.to_dict(), b"".join(v.tobytes() for v in model.state_dict().values())))
    assert outs[0] == outs[1]


def test_failed_reward_component_is_flagged_not_fatal():
    def broken(ctx):
        raise ValueError("nope")

    model = tiny_model()
    specs = SPECS + [RewardSpec("broken", 0.1, broken)]
    cfg = GrpoConfig(group_size=3, prompts_per_step=1)
    rep, _ = train_step(PolicyTriple(model, model.clone()), Adam(model.parameters()), sample_tasks(1, 0), specs, ATLAS, cfg, 0)
    assert rep.reward_failures == 3


def test_best_of_one_is_a_plain_sample():
    model = tiny_model()
    task = ToyTask("XYZ", "c")
    bon = best_of_n(model, task, 1, SPECS, ATLAS, [11])
    grid, _ = sample_grid(model, task.prompt_ids(model.cfg.layout), task.height, task.width, SamplerConfig(), np.random.default_rng(11))
    assert bon.best_grid == grid
    assert bon.best_reward == score_grid(SPECS, grid, task.meta(ATLAS), ATLAS).total


def test_best_of_n_deterministic():
    model = tiny_model()
    task = ToyTask("XYZ", "c")
    a = best_of_n(model, task, 4, SPECS, ATLAS, [1, 2, 3, 4])
    b = best_of_n(model, task, 4, SPECS, ATLAS, [1, 2, 3, 4])
    assert a.rewards == b.rewards and a.best_grid == b.best_grid


def test_best_of_n_grows_with_n():
    model = tiny_model(seed=2)
    tasks = sample_tasks(200, 7, lengths=(3,))
    means = {}
    for N in (1, 4, 16):
        vals = [best_of_n(model, t, N, SPECS, ATLAS, [10_000 * N + 100 * i + k for k in range(N)]).best_reward for i, t in enumerate(tasks)]
        means[N] = float(np.mean(vals))
    assert means[1] < means[4] < means[16]


def test_config_validation():
    with pytest.raises(ValueError):
        GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        GrpoConfig(ratio_level="episode")
