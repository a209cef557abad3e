"""Experiment orchestration: configs, SFT and RL drivers, evaluation protocols."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .codec import VocabLayout
from .grpo import GrpoConfig, PolicyTriple, best_of_n, train_step
from .numerics import Adam, NumericError, make_rng
from .policy import PolicyConfig, PolicyModel, SamplerConfig, image_supervision, sample_grids, sft_step
from .rewards import DEFAULT_WEIGHTS, make_specs, ocr_accuracy, score_grid
from .tasks import (
    DEFAULT_LENGTHS,
    Example,
    ToyTask,
    dataset_bytes,
    gen_dataset,
    load_dataset,
    sample_tasks,
    training_sequence,
)
from .vq import GlyphAtlas, render, toy_ocr

log = logging.getLogger("glyphgrpo")

OUT_ROOT_ENV = "GLYPHGRPO_OUT"


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    n: int = 6000
    noise_rate: float = 0.3
    seed: int = 1
    lengths: tuple[int, ...] = DEFAULT_LENGTHS


@dataclass
class ModelConfig:
    embed_dim: int = 48
    n_heads: int = 4
    n_core_blocks: int = 4
    n_vision_blocks_pre: int = 1
    n_vision_blocks_post: int = 1
    ffn_mult: int = 4
    max_seq_len: int = 48
    predict_eom: bool = False
    seed: int = 0

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(**asdict(self), layout=VocabLayout())


@dataclass
class SftConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 50
    uncond_prob: float = 0.1
    seed: int = 2
    log_every: int = 50


@dataclass
class EvalConfig:
    n_prompts: int = 60
    samples_per_prompt: int = 4
    bon_n: int = 16
    cfg_scales: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    every: int = 25
    seed: int = 3


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    rewards: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for section, values in d.items():
            _apply_section(cfg, section, values)
        return cfg


def _coerce(value, current):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            items = list(value)
        else:
            items = [v for v in str(value).replace(",", " ").split() if v]
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in items)
    return str(value)


def _apply_section(cfg: ExperimentConfig, section: str, values: dict) -> None:
    if section == "rewards":
        weights = {k: float(v) for k, v in values.items()}
        make_specs(weights)  # rejects unknown names
        cfg.rewards = weights
        return
    if section not in ("data", "model", "sft", "grpo", "eval"):
        raise KeyError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    updates = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in values.items():
        if key not in names:
            raise KeyError(f"unknown key {section}.{key}")
        updates[key] = _coerce(raw, getattr(obj, key))
    setattr(cfg, section, dataclasses.replace(obj, **updates))


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read an INI-style config and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        with open(path) as f:
            cp.read_file(f)
        for section in cp.sections():
            _apply_section(cfg, section, dict(cp[section]))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ValueError(f"override {item!r} is not section.key=value")
        if section == "rewards":
            _apply_section(cfg, section, {**cfg.rewards, name: value})
        else:
            _apply_section(cfg, section, {name: value.strip()})
    return cfg


# ---------------------------------------------------------------------------
# run directories, manifests, metrics


def code_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".txt") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def output_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str
    inputs: dict[str, str]
    outputs: dict[str, str]

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        return cls(**json.loads(p.read_text()))


@contextmanager
def run_dir(path: str | Path) -> Iterator[Path]:
    """Create ``path`` and hold an exclusive lockfile in it for the duration."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out} is locked by another run") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


class JsonlWriter:
    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")


def _round(obj):
    """Normalise floats for stable JSON (repr of float64 is already exact)."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# data + SFT


def build_dataset(cfg: ExperimentConfig, atlas: GlyphAtlas) -> list[Example]:
    d = cfg.data
    return gen_dataset(d.n, d.noise_rate, d.seed, atlas, d.lengths)


def lr_schedule(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warmup then cosine decay reaching exactly 0 at ``step == total - 1``."""
    if total <= 1 or step >= total - 1:
        return 0.0
    warmup = min(warmup, total - 1)
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - 1 - warmup, 1)
    frac = min((step - warmup) / span, 1.0)
    if frac >= 1.0:
        return 0.0
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class SftResult:
    model: PolicyModel
    losses: list[float]


def train_sft(
    cfg: ExperimentConfig,
    examples: Sequence[Example],
    metrics: JsonlWriter | None = None,
    model: PolicyModel | None = None,
) -> SftResult:
    pcfg = cfg.model.policy_config()
    layout = pcfg.layout
    model = model or PolicyModel(pcfg)
    opt = Adam(model.parameters())
    s = cfg.sft
    rng = np.random.default_rng(s.seed)
    losses: list[float] = []
    initial = None
    over = 0
    for step in range(s.steps):
        idx = rng.integers(len(examples), size=s.batch_size)
        drop = rng.random(s.batch_size) < s.uncond_prob
        batch = []
        for i, u in zip(idx, drop):
            ids = training_sequence(layout, examples[i], unconditional=bool(u))
            batch.append((ids, image_supervision(layout, ids, pcfg.predict_eom)))
        lr = lr_schedule(step, s.steps, s.lr, s.warmup)
        loss = sft_step(model, opt, batch, lr, batch_id=step)
        losses.append(loss)
        if initial is None:
            initial = loss
        over = over + 1 if loss > 2 * initial else 0
        if over >= 100:
            raise TrainingDiverged(f"loss above twice its initial value for 100 steps (step {step})")
        if metrics is not None and (step % s.log_every == 0 or step == s.steps - 1):
            metrics.write({"step": step, "loss": loss, "lr": lr})
    return SftResult(model, losses)


# ---------------------------------------------------------------------------
# evaluation protocols


def _eval_rngs(seed: int, k: int, n: int) -> list[np.random.Generator]:
    return [make_rng(seed, 1_000_000 + k, i) for i in range(n)]


def eval_text_accuracy(
    model: PolicyModel,
    tasks: Sequence[ToyTask],
    atlas: GlyphAtlas,
    samples_per_prompt: int = 4,
    seed: int = 0,
    sampler: SamplerConfig | None = None,
) -> dict:
    """Per prompt: mean OCR accuracy of ``samples_per_prompt`` grids; then bucket and overall means."""
    sampler = sampler or SamplerConfig()
    per_prompt = []
    for k, task in enumerate(tasks):
        res = sample_grids(
            model, task.prompt_ids(model.cfg.layout), task.height, task.width, sampler, _eval_rngs(seed, k, samples_per_prompt)
        )
        accs = [ocr_accuracy(toy_ocr(render(g, atlas), atlas).text, task.target) for g in res.grids]
        per_prompt.append({"prompt": task.prompt, "bucket": task.bucket, "accuracy": float(np.mean(accs))})
    return summarize_text_accuracy(per_prompt)


def summarize_text_accuracy(per_prompt: list[dict]) -> dict:
    buckets: dict[str, list[float]] = {}
    for row in per_prompt:
        buckets.setdefault(row["bucket"], []).append(row["accuracy"])
    return {
        "per_prompt": per_prompt,
        "buckets": {b: float(np.mean(v)) for b, v in sorted(buckets.items())},
        "overall": float(np.mean([r["accuracy"] for r in per_prompt])),
    }


def eval_mean_reward(
    model: PolicyModel,
    tasks: Sequence[ToyTask],
    atlas: GlyphAtlas,
    weights: dict[str, float],
    samples_per_prompt: int = 4,
    seed: int = 0,
    cfg_scale: float = 1.0,
) -> float:
    specs = make_specs(weights)
    sampler = SamplerConfig(cfg_scale=cfg_scale)
    totals = []
    for k, task in enumerate(tasks):
        res = sample_grids(
            model, task.prompt_ids(model.cfg.layout), task.height, task.width, sampler, _eval_rngs(seed, k, samples_per_prompt)
        )
        meta = task.meta(atlas)
        totals.extend(score_grid(specs, g, meta, atlas).total for g in res.grids)
    return float(np.mean(totals))


def eval_cfg_sweep(
    model: PolicyModel,
    scales: Sequence[float],
    tasks: Sequence[ToyTask],
    atlas: GlyphAtlas,
    weights: dict[str, float],
    samples_per_prompt: int = 4,
    seed: int = 0,
) -> list[dict]:
    return [
        {"cfg_scale": float(s), "mean_reward": eval_mean_reward(model, tasks, atlas, weights, samples_per_prompt, seed, s)}
        for s in scales
    ]


def eval_best_of_n(
    model: PolicyModel,
    tasks: Sequence[ToyTask],
    atlas: GlyphAtlas,
    weights: dict[str, float],
    N: int,
    seed: int = 0,
) -> float:
    specs = make_specs(weights)
    best = []
    for k, task in enumerate(tasks):
        seeds = [int(s) for s in np.random.SeedSequence([seed, k]).generate_state(N, dtype=np.uint64)]
        best.append(best_of_n(model, task, N, specs, atlas, seeds).best_reward)
    return float(np.mean(best))


def heldout_tasks(cfg: ExperimentConfig) -> list[ToyTask]:
    return sample_tasks(cfg.eval.n_prompts, cfg.eval.seed, "eval", cfg.data.lengths)


def rl_tasks(cfg: ExperimentConfig, step: int) -> list[ToyTask]:
    seed = int(np.random.SeedSequence([cfg.grpo.seed, step]).generate_state(1)[0])
    return sample_tasks(cfg.grpo.prompts_per_step, seed, "train", cfg.data.lengths)


# ---------------------------------------------------------------------------
# RL driver


@dataclass
class RlResult:
    model: PolicyModel
    reports: list[dict]


def train_rl(
    cfg: ExperimentConfig,
    sft_model: PolicyModel,
    atlas: GlyphAtlas,
    metrics: JsonlWriter | None = None,
    evaluate: bool = True,
    on_step=None,
) -> RlResult:
    policy = sft_model.clone()
    triple = PolicyTriple(policy, sft_model.clone())
    opt = Adam(policy.parameters())
    specs = make_specs(cfg.rewards)
    held = heldout_tasks(cfg) if evaluate else []
    e = cfg.eval
    baseline = {}
    if evaluate and cfg.grpo.steps > 0:
        baseline = {
            "sft_mean_reward": eval_mean_reward(sft_model, held, atlas, cfg.rewards, e.samples_per_prompt, e.seed),
            f"sft_bon{e.bon_n}_reward": eval_best_of_n(sft_model, held, atlas, cfg.rewards, e.bon_n, e.seed),
        }
    reports = []
    for step in range(cfg.grpo.steps):
        rep, _ = train_step(triple, opt, rl_tasks(cfg, step), specs, atlas, cfg.grpo, step)
        record = rep.to_dict()
        last = step == cfg.grpo.steps - 1
        if evaluate and (last or (e.every and (step + 1) % e.every == 0)):
            record["eval"] = {
                "heldout_mean_reward": eval_mean_reward(policy, held, atlas, cfg.rewards, e.samples_per_prompt, e.seed),
                "heldout_text_accuracy": eval_text_accuracy(policy, held, atlas, e.samples_per_prompt, e.seed)["buckets"],
                **baseline,
            }
        record = _round(record)
        if metrics is not None:
            metrics.write(record)
        reports.append(record)
        if on_step is not None:
            on_step(record)
    return RlResult(policy, reports)


def load_examples_or_generate(cfg: ExperimentConfig, atlas: GlyphAtlas, path: str | Path | None) -> list[Example]:
    if path is not None:
        return load_dataset(path)
    return build_dataset(cfg, atlas)


def timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        log.info("%s finished in %.1fs", fn.__name__, time.perf_counter() - t0)
        return out

    return wrapper


def write_dataset(path: Path, examples: Sequence[Example]) -> None:
    path.write_bytes(dataset_bytes(examples))


__all__ = [
    "build_dataset",
    "heldout_tasks",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "ModelConfig",
    "NumericError",
    "RunManifest",
    "SftConfig",
    "eval_best_of_n",
    "eval_cfg_sweep",
    "eval_mean_reward",
    "eval_text_accuracy",
    "load_config",
    "train_rl",
    "train_sft",
]
