"""Synthetic glyph-grid tasks and the noisy supervised dataset.

A task asks for a 2-row grid: the top row spells the target string in glyph
codes, the bottom row is filled with one border texture code. The prompt is
``"<selector> <target padded with '.' to max_grid>"`` so every prompt has the
same length and each text cell sits a fixed distance after its character.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .codec import CodeGrid, VocabLayout, embed_grid, encode_text
from .rewards import PromptMeta
from .vq import GlyphAtlas

GLYPH_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
BORDER_SELECTORS = "abcdef"
GRID_HEIGHT = 2
TEXT_ROW = 0
BORDER_ROW = 1
SHORT_LENGTHS = (3, 4, 5)
LONG_LENGTHS = (6, 7, 8)
DEFAULT_LENGTHS = SHORT_LENGTHS + LONG_LENGTHS
HOLDOUT_PERCENT = 10


@dataclass(frozen=True)
class ToyTask:
    target: str
    selector: str
    seed: int = 0
    pad_to: int = 8

    def __post_init__(self):
        if not self.target or len(self.target) > self.pad_to:
            raise ValueError(f"target length must be 1..{self.pad_to}")
        if set(self.target) - set(GLYPH_ALPHABET):
            raise ValueError("target must use the glyph alphabet")
        if self.selector not in BORDER_SELECTORS:
            raise ValueError(f"unknown border selector {self.selector!r}")

    @property
    def prompt(self) -> str:
        return f"{self.selector} {self.target.ljust(self.pad_to, '.')}"

    @property
    def height(self) -> int:
        return GRID_HEIGHT

    @property
    def width(self) -> int:
        return len(self.target)

    @property
    def bucket(self) -> str:
        return "long" if len(self.target) >= min(LONG_LENGTHS) else "short"

    def border_code(self, atlas: GlyphAtlas) -> int:
        return atlas.texture_code(atlas.texture_names[BORDER_SELECTORS.index(self.selector)])

    def meta(self, atlas: GlyphAtlas) -> PromptMeta:
        return PromptMeta(
            target=self.target,
            height=self.height,
            width=self.width,
            border_code=self.border_code(atlas),
            border_rows=(BORDER_ROW,),
            prompt_id=self.prompt,
        )

    def clean_grid(self, atlas: GlyphAtlas) -> CodeGrid:
        text = atlas.encode_text(self.target)
        return CodeGrid(self.height, self.width, tuple(text) + (self.border_code(atlas),) * self.width)

    def prompt_ids(self, layout: VocabLayout) -> list[int]:
        return encode_text(layout, self.prompt)


def is_heldout(prompt: str) -> bool:
    """Hash split: roughly HOLDOUT_PERCENT of all prompts are reserved for evaluation."""
    h = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "big")
    return h % 100 < HOLDOUT_PERCENT


def sample_tasks(
    n: int,
    seed: int,
    split: str = "train",
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    pad_to: int = 8,
) -> list[ToyTask]:
    """``n`` tasks from one side of the hash split, lengths cycling through ``lengths``."""
    if split not in ("train", "eval"):
        raise ValueError("split must be 'train' or 'eval'")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    out = []
    for i in range(n):
        L = lengths[i % len(lengths)]
        while True:
            target = "".join(GLYPH_ALPHABET[k] for k in rng.integers(len(GLYPH_ALPHABET), size=L))
            task = ToyTask(target, BORDER_SELECTORS[rng.integers(len(BORDER_SELECTORS))], seed, pad_to)
            if is_heldout(task.prompt) == (split == "eval"):
                break
        out.append(task)
    return out


@dataclass(frozen=True)
class Example:
    task: ToyTask
    codes: tuple[int, ...]
    corrupted: tuple[bool, ...]

    def grid(self) -> CodeGrid:
        return CodeGrid(self.task.height, self.task.width, self.codes)

    def to_json(self) -> str:
        d = {
            "prompt": self.task.prompt,
            "target": self.task.target,
            "selector": self.task.selector,
            "seed": self.task.seed,
            "height": self.task.height,
            "width": self.task.width,
            "codes": list(self.codes),
            "corrupted": [int(c) for c in self.corrupted],
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str, pad_to: int = 8) -> "Example":
        d = json.loads(line)
        task = ToyTask(d["target"], d["selector"], d.get("seed", 0), pad_to)
        return cls(task, tuple(d["codes"]), tuple(bool(c) for c in d["corrupted"]))


def corrupt(codes: Sequence[int], rate: float, vocab: int, rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[bool, ...]]:
    """Replace each code, independently with probability ``rate``, by a different uniform code."""
    hit = rng.random(len(codes)) < rate
    shift = rng.integers(1, vocab, size=len(codes))
    out = [(c + s) % vocab if h else c for c, h, s in zip(codes, hit, shift)]
    return tuple(int(c) for c in out), tuple(bool(h) for h in hit)


def gen_dataset(
    n: int,
    noise_rate: float,
    seed: int,
    atlas: GlyphAtlas,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    pad_to: int = 8,
) -> list[Example]:
    """``n`` (prompt, grid) pairs from the training split, bucketed round-robin by target length."""
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError("noise_rate must be in [0, 1)")
    tasks = sample_tasks(n, seed, "train", lengths, pad_to)
    rng = np.random.default_rng([seed, 2])
    out = []
    for task in tasks:
        codes, hit = corrupt(task.clean_grid(atlas).codes, noise_rate, atlas.image_vocab, rng)
        out.append(Example(task, codes, hit))
    return out


def dataset_bytes(examples: Iterable[Example]) -> bytes:
    return "".join(e.to_json() + "\n" for e in examples).encode()


def load_dataset(path, pad_to: int = 8) -> list[Example]:
    with open(path) as f:
        return [Example.from_json(line, pad_to) for line in f if line.strip()]


def training_sequence(layout: VocabLayout, example: Example, unconditional: bool = False) -> list[int]:
    prompt = [layout.PAD] if unconditional else example.task.prompt_ids(layout)
    return list(embed_grid(layout, prompt, example.grid()).ids)
