"""Codebook quantizer, glyph atlas, deterministic renderer and toy OCR."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .codec import CodeGrid, ProtocolError
from .numerics import DimensionError

CODEBOOK_MAGIC = b"GGCB"
CODEBOOK_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# codebook


@dataclass
class Codebook:
    vectors: np.ndarray  # K x d

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionError("codebook vectors must be K x d")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook has non-finite entries")

    @property
    def K(self) -> int:  # noqa: N802
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        header = CODEBOOK_MAGIC + struct.pack("<III", CODEBOOK_VERSION, self.K, self.d)
        Path(path).write_bytes(header + self.vectors.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != CODEBOOK_MAGIC:
            raise ValueError("not a codebook file")
        version, K, d = struct.unpack("<III", raw[4:16])
        if version != CODEBOOK_VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        body = raw[16:]
        if len(body) != 8 * K * d:
            raise ValueError("truncated codebook file")
        return cls(np.frombuffer(body, dtype="<f8").reshape(K, d).copy())


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact (non-expanded) form so ties are detected reliably
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def quantize(v, cb: Codebook) -> int:
    """Index of the nearest codebook vector (squared Euclidean, ties to lowest index)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.d,):
        raise DimensionError(f"vector of shape {v.shape} for a d={cb.d} codebook")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite query")
    return int(np.argmin(((cb.vectors - v) ** 2).sum(-1)))


def quantize_many(x, cb: Codebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.d:
        raise DimensionError(f"queries of shape {x.shape} for a d={cb.d} codebook")
    return np.argmin(_sq_dists(x, cb.vectors), axis=1)


@dataclass
class KMeansResult:
    codebook: Codebook
    objective: list[float]
    assignment: np.ndarray


def fit_codebook(features, K: int, iters: int = 20, seed: int = 0) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding.

    ``objective[t]`` is the total squared error after the t-th assignment
    step. Empty clusters are moved onto the currently worst-fit points.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if K < 1 or n < K:
        raise ConfigError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(-1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = x[idx]
        d2 = np.minimum(d2, ((x - centers[k]) ** 2).sum(-1))

    history: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = _sq_dists(x, centers)
        assign = np.argmin(dist, axis=1)
        err = dist[np.arange(n), assign]
        history.append(float(err.sum()))
        counts = np.bincount(assign, minlength=K)
        for k in np.flatnonzero(counts):
            centers[k] = x[assign == k].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            worst = np.argsort(-err, kind="stable")[: len(empty)]
            centers[empty] = x[worst]
    dist = _sq_dists(x, centers)
    assign = np.argmin(dist, axis=1)
    return KMeansResult(Codebook(centers), history, assign)


# ---------------------------------------------------------------------------
# atlas


@dataclass
class GlyphAtlas:
    """Code -> binary patch mapping plus the texture clash table.

    Codes ``0..len(glyphs)-1`` are glyphs in declaration order; every later
    code is a texture, cycling through ``textures`` in declaration order.
    """

    patch: int
    image_vocab: int
    glyphs: dict[str, np.ndarray]
    textures: dict[str, np.ndarray]
    clashes: frozenset[frozenset[str]] = field(default_factory=frozenset)

    def __post_init__(self):
        self.glyph_chars = list(self.glyphs)
        self.texture_names = list(self.textures)
        self._char_code = {ch: i for i, ch in enumerate(self.glyph_chars)}
        n_glyph = len(self.glyph_chars)
        if n_glyph + len(self.texture_names) > self.image_vocab:
            raise ConfigError("atlas declares more patches than image codes")
        if not self.texture_names:
            raise ConfigError("atlas needs at least one texture")
        patches = [self.glyphs[c] for c in self.glyph_chars]
        patches += [self.textures[t] for t in self.texture_names]
        self.prototypes = np.stack(patches).astype(np.uint8)  # glyphs first
        flat = self.prototypes.reshape(len(patches), -1)
        if len({row.tobytes() for row in flat}) != len(patches):
            raise ConfigError("atlas patches must be pairwise distinct")
        self.code_proto = np.array(
            [c if c < n_glyph else n_glyph + (c - n_glyph) % len(self.texture_names) for c in range(self.image_vocab)]
        )

    @property
    def n_glyphs(self) -> int:
        return len(self.glyph_chars)

    def glyph_code(self, ch: str) -> int:
        try:
            return self._char_code[ch]
        except KeyError:
            raise KeyError(f"{ch!r} has no glyph") from None

    def is_glyph(self, code: int) -> bool:
        return 0 <= code < self.n_glyphs

    def char_of(self, code: int) -> str | None:
        return self.glyph_chars[code] if self.is_glyph(code) else None

    def texture_class(self, code: int) -> str | None:
        if self.is_glyph(code):
            return None
        return self.texture_names[(code - self.n_glyphs) % len(self.texture_names)]

    def texture_code(self, name: str, k: int = 0) -> int:
        """The k-th code rendering as texture ``name``."""
        return self.n_glyphs + self.texture_names.index(name) + k * len(self.texture_names)

    def codes_of_class(self, name: str) -> list[int]:
        return [c for c in range(self.n_glyphs, self.image_vocab) if self.texture_class(c) == name]

    def clash(self, a: str | None, b: str | None) -> bool:
        if a is None or b is None or a == b:
            return False
        return frozenset((a, b)) in self.clashes

    def encode_text(self, s: str) -> list[int]:
        return [self.glyph_code(ch) for ch in s]

    @classmethod
    def parse(cls, text: str) -> "GlyphAtlas":
        patch = 5
        vocab = 256
        glyphs: dict[str, np.ndarray] = {}
        textures: dict[str, np.ndarray] = {}
        clashes = set()
        lines = text.splitlines()
        i = 0
        while i < len(lines):
            line = lines[i].strip()
            i += 1
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "version":
                if rest.strip() != "1":
                    raise ConfigError(f"unsupported atlas version {rest!r}")
            elif key == "patch":
                patch = int(rest)
            elif key == "image_vocab":
                vocab = int(rest)
            elif key in ("glyph", "texture"):
                name = rest.strip()
                rows = [r.strip() for r in lines[i : i + patch]]
                i += patch
                if len(rows) != patch or any(len(r) != patch or set(r) - {"#", "."} for r in rows):
                    raise ConfigError(f"bad bitmap for {key} {name!r}")
                bitmap = np.array([[ch == "#" for ch in r] for r in rows], dtype=np.uint8)
                target = glyphs if key == "glyph" else textures
                if name in target:
                    raise ConfigError(f"duplicate {key} {name!r}")
                target[name] = bitmap
            elif key == "clash":
                a, b = rest.split()
                clashes.add(frozenset((a, b)))
            else:
                raise ConfigError(f"unknown atlas directive {key!r}")
        for pair in clashes:
            if not pair <= set(textures):
                raise ConfigError(f"clash names unknown texture: {sorted(pair)}")
        return cls(patch, vocab, glyphs, textures, frozenset(clashes))

    @classmethod
    def load(cls, path: str | Path) -> "GlyphAtlas":
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "GlyphAtlas":
        return cls.parse(resources.files("glyphgrpo").joinpath("data/atlas.txt").read_text())


# ---------------------------------------------------------------------------
# rendering and recognition


def render(grid: CodeGrid, atlas: GlyphAtlas) -> np.ndarray:
    """(h*p) x (w*p) uint8 image with every cell replaced by its code's patch."""
    codes = grid.as_array()
    p = atlas.patch
    cells = atlas.prototypes[atlas.code_proto[codes]]  # h, w, p, p
    return cells.transpose(0, 2, 1, 3).reshape(grid.height * p, grid.width * p).copy()


@dataclass
class OcrResult:
    text: str
    confidence: np.ndarray  # h x w, 1 - hamming / patch_area
    prototype: np.ndarray  # h x w, index into atlas.prototypes


def _cells(pixels: np.ndarray, patch: int) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[0] % patch or pixels.shape[1] % patch:
        raise ProtocolError(f"pixel grid {pixels.shape} not divisible by patch {patch}", 0)
    h, w = pixels.shape[0] // patch, pixels.shape[1] // patch
    return pixels.reshape(h, patch, w, patch).transpose(0, 2, 1, 3).astype(np.uint8)


def classify_cells(pixels, atlas: GlyphAtlas) -> tuple[np.ndarray, np.ndarray]:
    """Nearest prototype (Hamming, ties to lowest) and its distance for every cell."""
    cells = _cells(pixels, atlas.patch)
    h, w = cells.shape[:2]
    flat = cells.reshape(h * w, 1, -1)
    protos = atlas.prototypes.reshape(1, len(atlas.prototypes), -1)
    dist = (flat != protos).sum(-1)
    best = np.argmin(dist, axis=1)
    return best.reshape(h, w), dist[np.arange(h * w), best].reshape(h, w)


def toy_ocr(pixels, atlas: GlyphAtlas) -> OcrResult:
    """Read glyph cells in row-major order; texture cells emit nothing."""
    best, dist = classify_cells(pixels, atlas)
    chars = [atlas.glyph_chars[k] for k in best.reshape(-1) if k < atlas.n_glyphs]
    conf = 1.0 - dist / float(atlas.patch**2)
    return OcrResult("".join(chars), conf, best)


def cell_texture_classes(pixels, atlas: GlyphAtlas) -> list[list[str | None]]:
    best, _ = classify_cells(pixels, atlas)
    names = [None] * atlas.n_glyphs + atlas.texture_names
    return [[names[k] for k in row] for row in best]
