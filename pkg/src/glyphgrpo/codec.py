"""Token universe and the ``<SOM> h w <IMG> codes <EOM>`` sequence format.

Ids are laid out as three contiguous ranges::

    [0, n_text)                    text characters (digits included)
    [n_text, n_text + n_image)     image codes
    [n_text + n_image, total)      specials SOM EOM IMG BOS EOS PAD
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CHARSET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789abcdefghijklmnopqrstuvwxyz ."
SPECIALS = ("SOM", "EOM", "IMG", "BOS", "EOS", "PAD")


class ProtocolError(ValueError):
    """A sequence violates the multimodal format. ``position`` is the first bad index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EncodingError(ValueError):
    pass


class GridRangeError(ValueError):
    pass


class Modality(enum.IntEnum):
    TEXT = 0
    IMAGE = 1
    SPECIAL = 2


@dataclass(frozen=True)
class VocabLayout:
    charset: str = DEFAULT_CHARSET
    image_vocab_size: int = 256
    max_grid: int = 8

    def __post_init__(self):
        if len(set(self.charset)) != len(self.charset):
            raise ValueError("charset has duplicate characters")
        if not set("0123456789") <= set(self.charset):
            raise ValueError("charset must contain the decimal digits")
        if self.image_vocab_size < 1 or self.max_grid < 1:
            raise ValueError("image_vocab_size and max_grid must be positive")

    @property
    def text_vocab_size(self) -> int:
        return len(self.charset)

    @property
    def image_offset(self) -> int:
        return self.text_vocab_size

    @property
    def special_offset(self) -> int:
        return self.text_vocab_size + self.image_vocab_size

    @property
    def total(self) -> int:
        return self.special_offset + len(SPECIALS)

    def special(self, name: str) -> int:
        return self.special_offset + SPECIALS.index(name)

    @property
    def SOM(self) -> int:  # noqa: N802
        return self.special("SOM")

    @property
    def EOM(self) -> int:  # noqa: N802
        return self.special("EOM")

    @property
    def IMG(self) -> int:  # noqa: N802
        return self.special("IMG")

    @property
    def BOS(self) -> int:  # noqa: N802
        return self.special("BOS")

    @property
    def EOS(self) -> int:  # noqa: N802
        return self.special("EOS")

    @property
    def PAD(self) -> int:  # noqa: N802
        return self.special("PAD")

    def classify(self, token: int) -> Modality:
        if 0 <= token < self.image_offset:
            return Modality.TEXT
        if self.image_offset <= token < self.special_offset:
            return Modality.IMAGE
        if self.special_offset <= token < self.total:
            return Modality.SPECIAL
        raise ProtocolError(f"id {token} outside vocabulary", -1)

    def classify_array(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.full(ids.shape, Modality.SPECIAL, dtype=np.int8)
        out[ids < self.special_offset] = Modality.IMAGE
        out[ids < self.image_offset] = Modality.TEXT
        return out

    def image_token(self, code: int) -> int:
        return self.image_offset + int(code)

    def code_of(self, token: int) -> int:
        return int(token) - self.image_offset

    def digit_token(self, d: str) -> int:
        return self.charset.index(d)

    def is_digit_token(self, token: int) -> bool:
        return 0 <= token < self.text_vocab_size and self.charset[token].isdigit()


@dataclass(frozen=True)
class CodeGrid:
    height: int
    width: int
    codes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        if len(self.codes) != self.height * self.width:
            raise GridRangeError(f"{len(self.codes)} codes for a {self.height}x{self.width} grid")

    def validate(self, layout: VocabLayout) -> None:
        if not (1 <= self.height <= layout.max_grid and 1 <= self.width <= layout.max_grid):
            raise GridRangeError(
                f"grid {self.height}x{self.width} outside 1..{layout.max_grid}"
            )
        if any(not 0 <= c < layout.image_vocab_size for c in self.codes):
            raise GridRangeError("code outside image vocabulary")

    def rows(self) -> list[tuple[int, ...]]:
        w = self.width
        return [self.codes[r * w : (r + 1) * w] for r in range(self.height)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.codes, dtype=np.int64).reshape(self.height, self.width)


@dataclass(frozen=True)
class MultimodalSequence:
    ids: tuple[int, ...]
    layout: VocabLayout = field(repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def modalities(self) -> np.ndarray:
        return self.layout.classify_array(self.ids)


def encode_text(layout: VocabLayout, s: str) -> list[int]:
    out = []
    for i, ch in enumerate(s):
        k = layout.charset.find(ch)
        if k < 0:
            raise EncodingError(f"character {ch!r} at index {i} is not in the charset")
        out.append(k)
    return out


def decode_text(layout: VocabLayout, ids: Iterable[int]) -> str:
    chars = []
    for t in ids:
        if not 0 <= t < layout.text_vocab_size:
            raise EncodingError(f"id {t} is not a text token")
        chars.append(layout.charset[t])
    return "".join(chars)


def resolution_prefix(layout: VocabLayout, height: int, width: int) -> list[int]:
    """``[SOM] digits(h) digits(w) [IMG]``."""
    if not (1 <= height <= layout.max_grid and 1 <= width <= layout.max_grid):
        raise GridRangeError(f"grid {height}x{width} outside 1..{layout.max_grid}")
    digits = encode_text(layout, str(height)) + encode_text(layout, str(width))
    return [layout.SOM, *digits, layout.IMG]


def embed_grid(layout: VocabLayout, prompt: Sequence[int], grid: CodeGrid) -> MultimodalSequence:
    grid.validate(layout)
    if len(_splits(layout, str(grid.height) + str(grid.width), grid.height * grid.width)) > 1:
        raise GridRangeError(f"resolution {grid.height}x{grid.width} would be ambiguous")
    ids = [
        *prompt,
        *resolution_prefix(layout, grid.height, grid.width),
        *(layout.image_token(c) for c in grid.codes),
        layout.EOM,
    ]
    return MultimodalSequence(tuple(int(t) for t in ids), layout)


def _splits(layout: VocabLayout, digits: str, n_codes: int | None = None) -> list[tuple[int, int]]:
    out = []
    for cut in range(1, len(digits)):
        a, b = digits[:cut], digits[cut:]
        if (len(a) > 1 and a[0] == "0") or (len(b) > 1 and b[0] == "0"):
            continue
        h, w = int(a), int(b)
        if not (1 <= h <= layout.max_grid and 1 <= w <= layout.max_grid):
            continue
        if n_codes is not None and h * w != n_codes:
            continue
        out.append((h, w))
    return out


def _ids_of(seq) -> list[int]:
    return list(seq.ids) if isinstance(seq, MultimodalSequence) else [int(t) for t in seq]


def extract_grid(layout: VocabLayout, seq) -> CodeGrid:
    """Parse the single image span of ``seq``; raise :class:`ProtocolError` on any defect."""
    ids = _ids_of(seq)
    n = len(ids)
    for i, t in enumerate(ids):
        if not 0 <= t < layout.total:
            raise ProtocolError(f"id {t} outside vocabulary", i)
    soms = [i for i, t in enumerate(ids) if t == layout.SOM]
    if not soms:
        raise ProtocolError("no <SOM> marker", n)
    if len(soms) > 1:
        raise ProtocolError("more than one image span", soms[1])
    som = soms[0]

    pos = som + 1
    while pos < n and ids[pos] != layout.IMG:
        if not layout.is_digit_token(ids[pos]):
            raise ProtocolError("non-digit token in resolution prefix", pos)
        pos += 1
    if pos >= n:
        raise ProtocolError("missing <IMG> marker", n)
    img = pos
    digits = "".join(layout.charset[t] for t in ids[som + 1 : img])
    candidates = _splits(layout, digits)
    if not candidates:
        raise ProtocolError(f"resolution digits {digits!r} do not form height and width", img)

    best: ProtocolError | None = None
    for h, w in candidates:
        try:
            return _read_span(layout, ids, img, h, w)
        except ProtocolError as err:
            if best is None or err.position > best.position:
                best = err
    assert best is not None
    raise best


def _read_span(layout: VocabLayout, ids: list[int], img: int, h: int, w: int) -> CodeGrid:
    n = len(ids)
    end = img + 1 + h * w
    for i in range(img + 1, min(end, n)):
        if layout.classify(ids[i]) is not Modality.IMAGE:
            raise ProtocolError("non-image token inside image span", i)
    if end >= n:
        raise ProtocolError("missing <EOM> marker", n)
    if ids[end] != layout.EOM:
        raise ProtocolError("expected <EOM> after height*width codes", end)
    codes = [layout.code_of(t) for t in ids[img + 1 : end]]
    return CodeGrid(h, w, tuple(codes))


def image_span(layout: VocabLayout, seq) -> tuple[int, int]:
    """(first code index, EOM index) of the single image span."""
    ids = _ids_of(seq)
    grid = extract_grid(layout, ids)
    som = ids.index(layout.SOM)
    img = ids.index(layout.IMG, som)
    return img + 1, img + 1 + grid.height * grid.width


def modality_mask(layout: VocabLayout, seq, supervise: str, include_eom: bool = True) -> np.ndarray:
    """Boolean mask over positions whose token is a supervision target of class ``supervise``.

    For ``image`` the mask covers the codes of the image span and, when
    ``include_eom``, its closing ``<EOM>``. For ``text`` it covers text-range ids.
    """
    ids = np.asarray(_ids_of(seq), dtype=np.int64)
    kinds = layout.classify_array(ids)
    if supervise == "text":
        return kinds == Modality.TEXT
    if supervise != "image":
        raise ValueError(f"supervise must be 'text' or 'image', not {supervise!r}")
    mask = kinds == Modality.IMAGE
    if include_eom:
        mask = mask | (ids == layout.EOM)
    return mask


# ---------------------------------------------------------------------------
# human-readable form used by golden fixtures


def format_tokens(layout: VocabLayout, ids: Iterable[int]) -> str:
    parts = []
    for t in ids:
        kind = layout.classify(int(t))
        if kind is Modality.TEXT:
            parts.append(repr(layout.charset[t]).replace("'", '"'))
        elif kind is Modality.IMAGE:
            parts.append(f"#{layout.code_of(t)}")
        else:
            parts.append(f"<{SPECIALS[t - layout.special_offset]}>")
    return " ".join(parts)


def parse_tokens(layout: VocabLayout, text: str) -> list[int]:
    ids = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == " ":
            i += 1
        elif c == '"':
            ids.append(encode_text(layout, text[i + 1])[0])
            if text[i + 2] != '"':
                raise EncodingError(f"unterminated character literal at {i}")
            i += 3
        elif c == "#":
            j = i + 1
            while j < len(text) and text[j].isdigit():
                j += 1
            ids.append(layout.image_token(int(text[i + 1 : j])))
            i = j
        elif c == "<":
            j = text.index(">", i)
            ids.append(layout.special(text[i + 1 : j]))
            i = j + 1
        else:
            raise EncodingError(f"unexpected {c!r} at {i}")
    return ids
