from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphgrpo.codec import (
    CodeGrid,
    EncodingError,
    GridRangeError,
    Modality,
    ProtocolError,
    VocabLayout,
    decode_text,
    embed_grid,
    encode_text,
    extract_grid,
    format_tokens,
    image_span,
    modality_mask,
    parse_tokens,
)

L = VocabLayout()
GOLDEN = Path(__file__).parent / "fixtures" / "codec_golden.txt"


@st.composite
def grids(draw, max_grid=L.max_grid):
    h = draw(st.integers(1, max_grid))
    w = draw(st.integers(1, max_grid))
    codes = draw(st.lists(st.integers(0, L.image_vocab_size - 1), min_size=h * w, max_size=h * w))
    return CodeGrid(h, w, tuple(codes))


prompts = st.text(alphabet=L.charset, max_size=12).map(lambda s: encode_text(L, s))


def test_layout_ranges_partition_vocabulary():
    kinds = [L.classify(t) for t in range(L.total)]
    assert kinds.count(Modality.TEXT) == 64
    assert kinds.count(Modality.IMAGE) == 256
    assert kinds.count(Modality.SPECIAL) == 6
    assert len({L.SOM, L.EOM, L.IMG, L.BOS, L.EOS, L.PAD}) == 6
    with pytest.raises(ValueError):
        L.classify(L.total)


def test_encode_empty():
    assert encode_text(L, "") == []


def test_encode_round_trip():
    ids = encode_text(L, "AB")
    assert len(ids) == 2 and decode_text(L, ids) == "AB"


def test_every_charset_character_round_trips():
    for ch in L.charset:
        assert decode_text(L, encode_text(L, ch)) == ch


def test_out_of_charset_character():
    with pytest.raises(EncodingError):
        encode_text(L, "A!")


def test_embed_two_by_three():
    seq = embed_grid(L, [0], CodeGrid(2, 3, (0, 1, 2, 3, 4, 5)))
    two, three = encode_text(L, "23")
    assert list(seq.ids) == [0, L.SOM, two, three, L.IMG, *(L.image_token(c) for c in range(6)), L.EOM]


def test_embed_minimal_grid():
    ids = list(embed_grid(L, [], CodeGrid(1, 1, (9,))).ids)
    img, eom = ids.index(L.IMG), ids.index(L.EOM)
    assert eom - img - 1 == 1


def test_embed_oversized_grid():
    with pytest.raises(GridRangeError):
        embed_grid(L, [], CodeGrid(9, 1, tuple(range(9))))


def test_golden_fixture():
    rows = [r for r in GOLDEN.read_text().splitlines() if r and not r.startswith("#")]
    assert len(rows) >= 6
    for row in rows:
        text, ids = (p.strip() for p in row.split("|"))
        expected = [int(t) for t in ids.split()]
        assert parse_tokens(L, text) == expected
        assert format_tokens(L, expected) == text


@settings(max_examples=500, deadline=None)
@given(prompts, grids())
def test_round_trip(prompt, grid):
    seq = embed_grid(L, prompt, grid)
    assert extract_grid(L, seq) == grid
    assert all(k in (Modality.TEXT, Modality.IMAGE, Modality.SPECIAL) for k in seq.modalities)


@settings(max_examples=100, deadline=None)
@given(prompts, grids())
def test_one_code_short_fails_at_eom(prompt, grid):
    ids = list(embed_grid(L, prompt, grid).ids)
    eom = len(ids) - 1
    del ids[eom - 1]
    with pytest.raises(ProtocolError) as err:
        extract_grid(L, ids)
    assert err.value.position == eom - 1


def test_missing_eom():
    ids = list(embed_grid(L, [], CodeGrid(2, 2, (1, 2, 3, 4))).ids)[:-1]
    with pytest.raises(ProtocolError) as err:
        extract_grid(L, ids)
    assert err.value.position == len(ids)


def test_non_image_token_inside_span():
    ids = list(embed_grid(L, [], CodeGrid(2, 2, (1, 2, 3, 4))).ids)
    ids[6] = 5
    with pytest.raises(ProtocolError) as err:
        extract_grid(L, ids)
    assert err.value.position == 6


def test_image_span_indices():
    ids = list(embed_grid(L, [0, 1], CodeGrid(2, 3, tuple(range(6)))).ids)
    first, eom = image_span(L, ids)
    assert ids[eom] == L.EOM and eom - first == 6


def test_fuzzed_sequences_only_raise_protocol_errors():
    rng = np.random.default_rng(0)
    outcomes = {"valid": 0, "protocol": 0}
    for _ in range(10_000):
        h, w = rng.integers(1, 9, size=2)
        grid = CodeGrid(int(h), int(w), tuple(int(c) for c in rng.integers(0, 256, size=h * w)))
        ids = list(embed_grid(L, list(rng.integers(0, 64, size=rng.integers(0, 6))), grid).ids)
        for _ in range(rng.integers(1, 4)):
            op = rng.integers(4)
            i = int(rng.integers(len(ids) + 1))
            if op == 0 and ids:
                ids[min(i, len(ids) - 1)] = int(rng.integers(-3, L.total + 3))
            elif op == 1 and ids:
                del ids[min(i, len(ids) - 1)]
            elif op == 2:
                ids.insert(i, int(rng.integers(0, L.total)))
            else:
                ids = ids[: i]
        try:
            extract_grid(L, ids)
            outcomes["valid"] += 1
        except ProtocolError as e:
            assert 0 <= e.position <= len(ids)
            outcomes["protocol"] += 1
    assert outcomes["protocol"] > 0


def test_image_mask_covers_codes_and_optionally_eom():
    ids = list(embed_grid(L, [0, 1], CodeGrid(2, 3, tuple(range(6)))).ids)
    first, eom = image_span(L, ids)
    with_eom = modality_mask(L, ids, "image")
    without = modality_mask(L, ids, "image", include_eom=False)
    assert np.flatnonzero(without).tolist() == list(range(first, eom))
    assert np.flatnonzero(with_eom).tolist() == list(range(first, eom + 1))


def test_text_mask_on_pure_text():
    assert modality_mask(L, encode_text(L, "HELLO"), "text").all()


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, L.total - 1), max_size=40))
def test_text_and_image_masks_are_disjoint(ids):
    assert not np.any(modality_mask(L, ids, "text") & modality_mask(L, ids, "image"))
