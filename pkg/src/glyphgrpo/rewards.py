"""Reward components and their weighted aggregation.

Every component maps a :class:`RewardContext` to a score in [0, 1]. The
aggregate is the weighted mean ``sum(w_i * s_i) / sum(w_i)``; a component
that raises or returns an out-of-range value scores 0 and is flagged.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .codec import CodeGrid
from .vq import GlyphAtlas, OcrResult, cell_texture_classes, render, toy_ocr


class RewardConfigError(ValueError):
    pass


class RewardError(RuntimeError):
    pass


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ocr_accuracy(pred: str, target: str) -> float:
    """``max(0, 1 - lev(pred, target) / len(target))``."""
    if not target:
        raise RewardConfigError("target string must be non-empty")
    return max(0.0, 1.0 - levenshtein(pred, target) / len(target))


@dataclass(frozen=True)
class PromptMeta:
    """What a prompt asks for; ``constraints`` names the checks alignment uses."""

    target: str
    height: int
    width: int
    border_code: int | None = None
    border_rows: tuple[int, ...] = ()
    constraints: tuple[str, ...] = ("dims", "border", "text")
    prompt_id: str = ""


def _check(name: str, grid: CodeGrid, meta: PromptMeta, ocr_text: str) -> bool:
    if name == "dims":
        return (grid.height, grid.width) == (meta.height, meta.width)
    if name == "border":
        if meta.border_code is None or not meta.border_rows:
            raise RewardConfigError("border constraint without a border code")
        rows = grid.rows()
        return all(r < grid.height and all(c == meta.border_code for c in rows[r]) for r in meta.border_rows)
    if name == "text":
        return meta.target in ocr_text
    raise RewardConfigError(f"unknown constraint {name!r}")


def alignment_reward(grid: CodeGrid, meta: PromptMeta, atlas: GlyphAtlas, ocr: OcrResult | None = None) -> float:
    """Fraction of the prompt's constraints the grid satisfies."""
    if not meta.constraints:
        return 1.0
    text = (ocr or toy_ocr(render(grid, atlas), atlas)).text
    hits = [_check(c, grid, meta, text) for c in meta.constraints]
    return sum(hits) / len(hits)


def clash_counts(classes: Sequence[Sequence[str | None]], atlas: GlyphAtlas) -> tuple[int, int]:
    """(clashing, total) over horizontally and vertically adjacent cell pairs."""
    h, w = len(classes), len(classes[0])
    clashes = total = 0
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                total += 1
                clashes += atlas.clash(classes[r][c], classes[r][c + 1])
            if r + 1 < h:
                total += 1
                clashes += atlas.clash(classes[r][c], classes[r + 1][c])
    return clashes, total


def aesthetic_reward(pixels, atlas: GlyphAtlas) -> float:
    """1 - fraction of adjacent cell pairs whose texture classes clash."""
    clashes, total = clash_counts(cell_texture_classes(pixels, atlas), atlas)
    return 1.0 if total == 0 else 1.0 - clashes / total


# ---------------------------------------------------------------------------
# registry and aggregation


@dataclass
class RewardContext:
    grid: CodeGrid
    pixels: np.ndarray
    meta: PromptMeta
    atlas: GlyphAtlas

    @cached_property
    def ocr(self) -> OcrResult:
        return toy_ocr(self.pixels, self.atlas)


RewardFn = Callable[[RewardContext], float]

COMPONENTS: dict[str, RewardFn] = {
    "ocr": lambda ctx: ocr_accuracy(ctx.ocr.text, ctx.meta.target),
    "alignment": lambda ctx: alignment_reward(ctx.grid, ctx.meta, ctx.atlas, ctx.ocr),
    "aesthetic": lambda ctx: aesthetic_reward(ctx.pixels, ctx.atlas),
}

DEFAULT_WEIGHTS = {"ocr": 0.4, "alignment": 0.3, "aesthetic": 0.3}


@dataclass(frozen=True)
class RewardSpec:
    name: str
    weight: float
    component: RewardFn | None = field(default=None, compare=False, repr=False)

    def fn(self) -> RewardFn:
        return self.component or COMPONENTS[self.name]


@dataclass
class RewardReport:
    scores: dict[str, float]
    total: float
    failed: dict[str, str] = field(default_factory=dict)
    prompt_id: str = ""
    trajectory_id: int = -1

    @property
    def flagged(self) -> bool:
        return bool(self.failed)


def make_specs(weights: Mapping[str, float] | None = None) -> list[RewardSpec]:
    weights = DEFAULT_WEIGHTS if weights is None else weights
    specs = []
    for name, w in weights.items():
        if name not in COMPONENTS:
            raise RewardConfigError(f"unknown reward component {name!r}")
        if not (w >= 0 and math.isfinite(w)):
            raise RewardConfigError(f"weight for {name!r} must be finite and >= 0")
        specs.append(RewardSpec(name, float(w)))
    validate_specs(specs)
    return specs


def validate_specs(specs: Sequence[RewardSpec]) -> None:
    if not any(s.weight > 0 for s in specs):
        raise RewardConfigError("at least one reward component needs a positive weight")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise RewardConfigError("duplicate reward component")


def parse_reward_config(text: str) -> list[RewardSpec]:
    """Parse a ``[rewards]`` section (or bare ``name = weight`` lines)."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text if "[" in text else "[rewards]\n" + text)
    except configparser.Error as e:
        raise RewardConfigError(str(e)) from e
    if "rewards" not in cp:
        raise RewardConfigError("missing [rewards] section")
    try:
        weights = {k: float(v) for k, v in cp["rewards"].items()}
    except ValueError as e:
        raise RewardConfigError(str(e)) from e
    return make_specs(weights)


def aggregate(
    specs: Sequence[RewardSpec],
    grid: CodeGrid,
    pixels,
    meta: PromptMeta,
    atlas: GlyphAtlas,
    trajectory_id: int = -1,
) -> RewardReport:
    validate_specs(specs)
    ctx = RewardContext(grid, np.asarray(pixels), meta, atlas)
    scores: dict[str, float] = {}
    failed: dict[str, str] = {}
    for spec in sorted(specs, key=lambda s: s.name):
        try:
            v = float(spec.fn()(ctx))
            if not (0.0 <= v <= 1.0):
                raise RewardError(f"score {v!r} outside [0, 1]")
        except Exception as e:  # a broken component must not abort training
            failed[spec.name] = f"{type(e).__name__}: {e}"
            v = 0.0
        scores[spec.name] = v
    wsum = math.fsum(s.weight for s in specs)
    total = math.fsum(s.weight * scores[s.name] for s in specs) / wsum
    if len(failed) == len(specs):
        total = 0.0
    return RewardReport(scores, total, failed, meta.prompt_id, trajectory_id)


def score_grid(specs, grid: CodeGrid, meta: PromptMeta, atlas: GlyphAtlas, trajectory_id: int = -1) -> RewardReport:
    return aggregate(specs, grid, render(grid, atlas), meta, atlas, trajectory_id)
