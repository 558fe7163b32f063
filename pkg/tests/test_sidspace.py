import numpy as np
import pytest

from src.config.settings import QuantizerConfig
from src.exceptions.base import CapacityError, ContractViolation, CoverageError, ParseError
from src.services.quantizer_service import EncodeResult
from src.services.sid_service import (SPECIAL_TOKENS, Vocabulary, assign_sids, build_trie, collision_stats,
                                      format_sid, format_token, mint_tokens, parse_sid, parse_token)
from tests.conftest import make_catalog


def _encode(rows, order=None):
    codes = np.array(rows, dtype=np.int64)
    return EncodeResult(codes=codes, final_residuals=np.zeros((len(rows), 1)),
                        item_order=order or [f"i{n}" for n in range(len(rows))])


def test_token_format_and_parse():
    assert format_token(0, 236) == "<a_236>"
    assert format_sid((236, 34, 46)) == "<a_236><b_34><c_46>"
    assert parse_sid("<a_236><b_34><c_46>") == (236, 34, 46)
    assert parse_token("<c_9>") == (2, 9)


@pytest.mark.parametrize("text", [
    "", "<a_1> <b_2>", "<b_1><a_2>", "<a_01><b_2>", "<a_1><b_2>x", "<a_1><c_2>",
])
def test_parse_sid_rejects_malformed(text):
    with pytest.raises(ParseError):
        parse_sid(text)


def test_parse_sid_checks_ranges_and_depth():
    assert parse_sid("<a_3><b_0>", codes_per_level=[4, 2]) == (3, 0)
    with pytest.raises(ParseError):
        parse_sid("<a_4><b_0>", codes_per_level=[4, 2])
    with pytest.raises(ParseError):
        parse_sid("<a_1>", codes_per_level=[4, 2])
    with pytest.raises(ParseError):
        parse_sid("<a_1><b_0><c_0>", codes_per_level=[4, 2])


def test_mint_tokens_is_level_major():
    tokens = mint_tokens(QuantizerConfig(levels=2, codes_per_level=[2, 3]))
    assert tokens == ["<a_0>", "<a_1>", "<b_0>", "<b_1>", "<b_2>"]


def test_collisions_keep_first_and_reassign_others():
    catalog = make_catalog(4)
    encode = _encode([[0, 1, 2], [0, 1, 2], [0, 1, 2], [1, 0, 0]])
    sids = assign_sids(encode, catalog, seed=7, codes_per_level=[2, 2, 4])
    assert sids["i0"] == (0, 1, 2)
    assert sids["i3"] == (1, 0, 0)
    assert len(set(sids.values())) == 4
    for item_id in ("i1", "i2"):
        assert sids[item_id][:2] == (0, 1)
        assert sids[item_id][2] in (0, 1, 3)

    again = assign_sids(encode, catalog, seed=7, codes_per_level=[2, 2, 4])
    assert again == sids
    stats = collision_stats(encode, sids)
    assert stats["reassigned"] == 2
    assert stats["reassigned_items"] == ["i1", "i2"]


def test_collisions_avoid_codes_already_taken_under_the_prefix():
    catalog = make_catalog(3)
    encode = _encode([[0, 0], [0, 0], [0, 1]])
    sids = assign_sids(encode, catalog, seed=1, codes_per_level=[1, 3])
    assert sids == {"i0": (0, 0), "i1": (0, 2), "i2": (0, 1)}


def test_capacity_error_when_prefix_is_full():
    catalog = make_catalog(3)
    encode = _encode([[0, 0], [0, 0], [0, 1]])
    with pytest.raises(CapacityError):
        assign_sids(encode, catalog, seed=1, codes_per_level=[1, 2])


def test_assign_requires_codes_for_every_item():
    with pytest.raises(CoverageError):
        assign_sids(_encode([[0, 0]]), make_catalog(2), seed=1, codes_per_level=[1, 2])


def test_vocabulary_layout():
    vocab = Vocabulary.build(["zeta", "alpha", "<eos>", "alpha"], ["<a_0>", "<a_1>", "<b_0>"])
    assert vocab.tokens()[:5] == list(SPECIAL_TOKENS)
    assert vocab.tokens()[5:7] == ["alpha", "zeta"]
    assert vocab.sid_offset == 7
    assert vocab.sid_id(1, 0) == 9
    assert vocab.is_sid(7) and not vocab.is_sid(6)
    assert Vocabulary.from_tokens(vocab.tokens()).id_of == vocab.id_of
    with pytest.raises(ContractViolation):
        Vocabulary(pre_tokens=["<a_0>"], sid_tokens=["<a_0>"])


def test_trie_enumerates_exactly_the_assigned_tuples():
    sids = {"x": (0, 1, 2), "y": (0, 1, 3), "z": (1, 0, 0)}
    trie = build_trie(sids)
    assert len(trie) == 3
    assert trie.children() == [0, 1]
    assert trie.children((0,)) == [1]
    assert trie.children((0, 1)) == [2, 3]
    assert trie.children((2,)) == []
    assert trie.item_of((0, 1, 3)) == "y"
    assert not trie.contains((0, 1, 4))
    assert trie.tuples() == sorted(sids.values())


def test_trie_rejects_duplicates_and_mixed_depth():
    with pytest.raises(ContractViolation):
        build_trie({"x": (0, 1), "y": (0, 1)})
    with pytest.raises(ContractViolation):
        build_trie({"x": (0, 1), "y": (0, 1, 2)})
