"""Group relative policy optimisation over sampled glyph grids.

One training step:

1. snapshot ``old <- policy``
2. for each prompt draw ``G`` grids from ``old``; render and score them
3. normalise rewards within each group into advantages
4. one Adam update on the clipped surrogate minus ``beta`` times the KL
   estimate against the frozen reference policy
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .codec import CodeGrid
from .numerics import Adam, GradTape, NumericError, Tensor, make_rng
from .policy import PolicyModel, SamplerConfig, sample_grids, token_logprobs
from .rewards import RewardReport, RewardSpec, aggregate
from .tasks import ToyTask
from .vq import GlyphAtlas, render


@dataclass
class GrpoConfig:
    group_size: int = 16
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 3e-4
    steps: int = 200
    prompts_per_step: int = 16
    std_floor: float = 1e-6
    seed: int = 0
    ratio_level: str = "sequence"  # or "token"
    kl_level: str = "token"  # or "sequence"
    temperature: float = 1.0
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")
        if self.ratio_level not in ("sequence", "token"):
            raise ValueError("ratio_level must be 'sequence' or 'token'")
        if self.kl_level not in ("sequence", "token"):
            raise ValueError("kl_level must be 'sequence' or 'token'")


def compute_advantages(rewards, std_floor: float = 1e-6) -> np.ndarray:
    """``(r - mean) / max(std, std_floor)`` with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centred = r - r.mean()
    return centred / max(float(r.std()), std_floor)


def kl_unbiased(logp, logp_ref) -> np.ndarray:
    """Per-token ``ratio - 1 - log(ratio)`` with ``ratio = p_ref / p`` at the sampled tokens."""
    logp = np.asarray(logp, dtype=np.float64)
    logp_ref = np.asarray(logp_ref, dtype=np.float64)
    if not (np.all(np.isfinite(logp)) and np.all(np.isfinite(logp_ref))):
        raise NumericError("non-finite log-probabilities")
    x = logp_ref - logp
    return np.maximum(np.expm1(x) - x, 0.0)


def _kl_tensor(logp: Tensor, logp_ref: np.ndarray) -> Tensor:
    x = nx.sub(logp_ref, logp)
    return nx.expm1(x) - x


@dataclass
class RolloutGroup:
    task: ToyTask
    ids: np.ndarray  # G x T
    grids: list[CodeGrid]
    pixels: list[np.ndarray]
    reports: list[RewardReport]
    advantages: np.ndarray
    old_logprobs: np.ndarray | None = None  # G x n_codes
    ref_logprobs: np.ndarray | None = None
    sample_logprobs: np.ndarray | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.total for r in self.reports])

    @property
    def n_codes(self) -> int:
        return self.grids[0].height * self.grids[0].width


@dataclass
class PolicyTriple:
    policy: PolicyModel
    ref: PolicyModel
    old: PolicyModel | None = None

    def refresh_old(self) -> PolicyModel:
        self.old = self.policy.clone()
        return self.old


def code_logprobs(model: PolicyModel, ids: np.ndarray, n_codes: int) -> Tensor:
    """Log-probs of the ``n_codes`` image codes preceding the final EOM, ``G x n_codes``."""
    lp = token_logprobs(model, ids)
    T1 = lp.shape[1]
    return nx.take(lp, np.arange(T1 - 1 - n_codes, T1 - 1), axis=1)


def _batched(groups: Sequence[RolloutGroup]) -> dict[int, list[int]]:
    by_len: dict[int, list[int]] = {}
    for k, g in enumerate(groups):
        by_len.setdefault(g.ids.shape[1], []).append(k)
    return dict(sorted(by_len.items()))


def group_code_logprobs(model: PolicyModel, groups: Sequence[RolloutGroup]) -> list[Tensor]:
    """Per-group code log-probs, computed with one forward per sequence length."""
    out: list[Tensor | None] = [None] * len(groups)
    for _, members in _batched(groups).items():
        ids = np.concatenate([groups[k].ids for k in members], axis=0)
        lp = code_logprobs(model, ids, groups[members[0]].n_codes)
        start = 0
        for k in members:
            G = groups[k].ids.shape[0]
            out[k] = nx.take(lp, np.arange(start, start + G), axis=0)
            start += G
    return out  # type: ignore[return-value]


@dataclass
class LossStats:
    clip_fraction: float
    ratio_min: float
    ratio_max: float
    ratio_mean: float
    kl: float
    surrogate: float


def grpo_loss(
    groups: Sequence[RolloutGroup],
    policy: PolicyModel,
    cfg: GrpoConfig,
) -> tuple[Tensor, LossStats]:
    """Negated objective, averaged over groups; needs old/ref log-probs on every group."""
    eps = cfg.clip_eps
    logps = group_code_logprobs(policy, groups)
    total: Tensor | None = None
    ratios, clipped, kls, surs = [], [], [], []
    for g, lp in zip(groups, logps):
        if g.old_logprobs is None or g.ref_logprobs is None:
            raise ValueError("rollout group lacks old or reference log-probs")
        A = g.advantages
        G, n = lp.shape
        if cfg.ratio_level == "sequence":
            log_ratio = nx.sum(nx.sub(lp, g.old_logprobs), axis=-1)  # G
            adv = A
        else:
            log_ratio = nx.sub(lp, g.old_logprobs)  # G x n
            adv = np.repeat(A[:, None], n, axis=1)
        ratio = nx.exp(log_ratio)
        sur = nx.minimum(ratio * adv, nx.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)
        if cfg.ratio_level == "token":
            sur = nx.mean(sur, axis=-1)
        if cfg.kl_level == "token":
            kl = nx.mean(_kl_tensor(lp, g.ref_logprobs), axis=-1)
        else:
            kl = _kl_tensor(nx.sum(lp, axis=-1), g.ref_logprobs.sum(-1))
        objective = nx.mean(sur - kl * cfg.kl_beta)
        total = objective if total is None else total + objective
        r = ratio.data
        ratios.append(r.reshape(-1))
        clipped.append(((r < 1.0 - eps) | (r > 1.0 + eps)).reshape(-1))
        kls.append(kl.data.reshape(-1))
        surs.append(sur.data.reshape(-1))
    loss = total * (-1.0 / len(groups))
    r = np.concatenate(ratios)
    stats = LossStats(
        clip_fraction=float(np.concatenate(clipped).mean()),
        ratio_min=float(r.min()),
        ratio_max=float(r.max()),
        ratio_mean=float(r.mean()),
        kl=float(np.concatenate(kls).mean()),
        surrogate=float(np.concatenate(surs).mean()),
    )
    return loss, stats


def policy_gradient_oracle(policy: PolicyModel, groups: Sequence[RolloutGroup]) -> list[np.ndarray]:
    """Gradient of ``mean_groups sum_i A_i log pi(o_i|p) / G`` w.r.t. every parameter.

    This is the on-policy policy-gradient estimator, computed straight from
    sequence log-probs without ratios, clipping or KL.
    """
    params = policy.parameters()
    with GradTape() as tape:
        tape.watch(params)
        total = None
        for g in groups:
            lp = code_logprobs(policy, g.ids, g.n_codes)
            seq = nx.sum(lp, axis=-1)
            term = nx.sum(seq * g.advantages) * (1.0 / len(g.advantages))
            total = term if total is None else total + term
        total = total * (1.0 / len(groups))
    return tape.gradient(total, params)


# ---------------------------------------------------------------------------
# rollouts and the training step


def collect_group(
    model: PolicyModel,
    task: ToyTask,
    G: int,
    sampler: SamplerConfig,
    rngs: Sequence[np.random.Generator],
    specs: Sequence[RewardSpec],
    atlas: GlyphAtlas,
    std_floor: float = 1e-6,
) -> RolloutGroup:
    layout = model.cfg.layout
    res = sample_grids(model, task.prompt_ids(layout), task.height, task.width, sampler, rngs)
    meta = task.meta(atlas)
    pixels = [render(gr, atlas) for gr in res.grids]
    reports = [aggregate(specs, gr, px, meta, atlas, i) for i, (gr, px) in enumerate(zip(res.grids, pixels))]
    adv = compute_advantages([r.total for r in reports], std_floor)
    return RolloutGroup(task, res.ids, res.grids, pixels, reports, adv, sample_logprobs=res.logprobs)


@dataclass
class StepReport:
    step: int
    mean_reward: float
    max_reward: float
    component_means: dict[str, float]
    kl: float
    clip_fraction: float
    ratio_min: float
    ratio_max: float
    loss: float
    reward_failures: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def train_step(
    triple: PolicyTriple,
    opt: Adam,
    tasks: Sequence[ToyTask],
    specs: Sequence[RewardSpec],
    atlas: GlyphAtlas,
    cfg: GrpoConfig,
    step: int,
) -> tuple[StepReport, list[RolloutGroup]]:
    if not tasks:
        raise ValueError("empty prompt batch")
    old = triple.refresh_old()
    sampler = SamplerConfig(temperature=cfg.temperature, cfg_scale=cfg.cfg_scale, seed=cfg.seed)
    groups = []
    for j, task in enumerate(tasks):
        rngs = [make_rng(cfg.seed, step, j, i) for i in range(cfg.group_size)]
        groups.append(collect_group(old, task, cfg.group_size, sampler, rngs, specs, atlas, cfg.std_floor))

    for g, lp_old, lp_ref in zip(groups, group_code_logprobs(old, groups), group_code_logprobs(triple.ref, groups)):
        g.old_logprobs = lp_old.data
        g.ref_logprobs = lp_ref.data

    params = triple.policy.parameters()
    try:
        with GradTape() as tape:
            tape.watch(params)
            loss, stats = grpo_loss(groups, triple.policy, cfg)
    except NumericError as e:
        raise NumericError(f"non-finite GRPO loss at step {step}: {e}") from e
    opt.step(tape.gradient(loss, params), cfg.lr)

    rewards = np.concatenate([g.rewards for g in groups])
    names = sorted(groups[0].reports[0].scores)
    comps = {n: float(np.mean([r.scores[n] for g in groups for r in g.reports])) for n in names}
    failures = sum(r.flagged for g in groups for r in g.reports)
    report = StepReport(
        step=step,
        mean_reward=float(rewards.mean()),
        max_reward=float(rewards.max()),
        component_means=comps,
        kl=stats.kl,
        clip_fraction=stats.clip_fraction,
        ratio_min=stats.ratio_min,
        ratio_max=stats.ratio_max,
        loss=loss.item(),
        reward_failures=int(failures),
    )
    return report, groups


@dataclass
class BestOfN:
    best_reward: float
    best_grid: CodeGrid
    rewards: list[float]


def best_of_n(
    model: PolicyModel,
    task: ToyTask,
    N: int,
    specs: Sequence[RewardSpec],
    atlas: GlyphAtlas,
    seeds: Sequence[int],
    sampler: SamplerConfig | None = None,
) -> BestOfN:
    """Draw ``N`` samples (one generator per seed) and keep the highest-reward grid."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if len(seeds) != N:
        raise ValueError("need exactly one seed per sample")
    sampler = sampler or SamplerConfig()
    rngs = [np.random.default_rng(s) for s in seeds]
    res = sample_grids(model, task.prompt_ids(model.cfg.layout), task.height, task.width, sampler, rngs)
    meta = task.meta(atlas)
    rewards = [aggregate(specs, g, render(g, atlas), meta, atlas).total for g in res.grids]
    k = int(np.argmax(rewards))
    return BestOfN(rewards[k], res.grids[k], rewards)
