import json

import numpy as np
import pytest

from src.exceptions.base import ConflictError, CoverageError, DataError, ParseError
from src.repositories.catalog_repository import (EmbeddingMatrix, InteractionLog, Interaction, load_catalog,
                                                 load_embeddings, load_filtered_catalog, load_interactions,
                                                 write_catalog, write_embeddings_binary, write_embeddings_text,
                                                 write_sequences)
from src.services.catalog_service import filter_and_sequence
from tests.conftest import make_catalog


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return str(path)


def _log(triples):
    return InteractionLog(events=[Interaction(u, i, t, n) for n, (u, i, t) in enumerate(triples)])


def test_load_catalog_reads_optional_fields(tmp_path):
    path = _write_lines(tmp_path / "catalog.jsonl", [
        {"item_id": "a", "title": " Boots ", "brand": "acme", "categories": [["Shoes", "Outdoor"]]},
        {"item_id": 7, "title": "Tent", "description": "Two person", "categories": "Camping, Outdoor"},
    ])
    catalog = load_catalog(path)
    assert catalog.item_ids() == ["7", "a"]
    assert catalog.items["a"].title == "Boots"
    assert catalog.items["a"].categories == ("Shoes", "Outdoor")
    assert catalog.items["7"].categories == ("Camping", "Outdoor")
    assert catalog.items["7"].text() == "Tent Two person"


def test_load_catalog_rejects_bad_records(tmp_path):
    with pytest.raises(ParseError) as info:
        load_catalog(_write_lines(tmp_path / "a.jsonl", [{"item_id": "a", "title": "x"}, {"item_id": "b"}]))
    assert info.value.line == 2

    with pytest.raises(ConflictError):
        load_catalog(_write_lines(tmp_path / "b.jsonl", [{"item_id": "a", "title": "x"},
                                                         {"item_id": "a", "title": "y"}]))

    bad = tmp_path / "c.jsonl"
    bad.write_text('{"item_id": "a", "title": "x"}\nnot json\n', encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_catalog(str(bad))
    assert info.value.line == 2


def test_load_interactions_checks_items_and_timestamps(tmp_path):
    catalog = make_catalog(2)
    with pytest.raises(CoverageError) as info:
        load_interactions(_write_lines(tmp_path / "a.jsonl", [{"user_id": "u", "item_id": "zz", "timestamp": 1}]),
                          catalog)
    assert info.value.missing == ["zz"]

    with pytest.raises(ParseError):
        load_interactions(_write_lines(tmp_path / "b.jsonl", [{"user_id": "u", "item_id": "i0", "timestamp": 1.5}]))


def test_filter_is_a_fixpoint():
    # Item i2 has one interaction; dropping it pushes user u2 under the threshold
    triples = [("u1", "i0", 1), ("u1", "i1", 2), ("u0", "i0", 1), ("u0", "i1", 2),
               ("u2", "i1", 1), ("u2", "i2", 2)]
    filtered = filter_and_sequence(_log(triples), make_catalog(3), min_count=2)
    assert filtered.user_ids() == ["u0", "u1"]
    assert filtered.item_ids() == ["i0", "i1"]
    for sequence in filtered.sequences.values():
        assert len(sequence) >= 2
    counts = {}
    for sequence in filtered.sequences.values():
        for item_id in sequence:
            counts[item_id] = counts.get(item_id, 0) + 1
    assert min(counts.values()) >= 2


def test_sequences_are_chronological_with_stable_ties():
    triples = [("u", "i2", 5), ("u", "i0", 1), ("u", "i1", 5), ("u", "i3", 3)]
    filtered = filter_and_sequence(_log(triples), make_catalog(4), min_count=1)
    assert filtered.sequences["u"] == ["i0", "i3", "i2", "i1"]


def test_embeddings_text_and_binary_agree(tmp_path):
    catalog = make_catalog(3)
    matrix = EmbeddingMatrix(rows=np.arange(6, dtype=np.float64).reshape(3, 2) / 4, item_order=["i2", "i0", "i1"])
    write_embeddings_text(str(tmp_path / "e.txt"), matrix)
    write_embeddings_binary(str(tmp_path / "e.bin"), matrix)
    text = load_embeddings(str(tmp_path / "e.txt"), catalog)
    binary = load_embeddings(str(tmp_path / "e.bin"), catalog)
    assert text.item_order == binary.item_order == ["i2", "i0", "i1"]
    np.testing.assert_allclose(text.rows, binary.rows)
    np.testing.assert_allclose(text.subset(["i0", "i1"]).rows, matrix.rows[1:])


def test_embeddings_coverage_and_finiteness(tmp_path):
    catalog = make_catalog(3)
    path = tmp_path / "e.txt"
    path.write_text("2 2\ni0 1 2\ni1 3 4\n", encoding="utf-8")
    with pytest.raises(CoverageError) as info:
        load_embeddings(str(path), catalog)
    assert info.value.missing == ["i2"]

    path.write_text("3 2\ni0 1 2\ni1 3 nan\ni2 0 0\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_embeddings(str(path), catalog)

    path.write_text("3 2\ni0 1 2\ni1 3\ni2 0 0\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_embeddings(str(path), catalog)


def test_filtered_catalog_round_trip(tmp_path):
    catalog = make_catalog(4, sequences={"u1": ["i1", "i0"], "u0": ["i3", "i2", "i1"]})
    write_catalog(str(tmp_path / "c.jsonl"), catalog)
    write_sequences(str(tmp_path / "s.jsonl"), catalog)
    loaded = load_filtered_catalog(str(tmp_path / "c.jsonl"), str(tmp_path / "s.jsonl"))
    assert loaded.items == catalog.items
    assert loaded.sequences == catalog.sequences
