import numpy as np
import pytest

from src.config.settings import InitPlan
from src.exceptions.base import ContractViolation, DataError, DegenerateInputError, ParseError
from src.services.extractor_service import TokenSemantics
from src.services.init_service import (EmbeddingTable, build_init_matrix, fit_gaussian, load_embedding_table,
                                       pre_token_matrix, sa_init_embedding, tokenize_keywords,
                                       write_embedding_table)
from src.services.sid_service import Vocabulary


def _table(seed=0, words=("red", "widget", "blue", "tent", "boot", "lamp"), dim=4):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(vocab_words={w: i for i, w in enumerate(words)}, matrix=rng.standard_normal((len(words), dim)))


def test_sa_init_is_the_mean_and_order_free():
    table = _table()
    value = sa_init_embedding([0, 1, 3], table)
    np.testing.assert_allclose(value, table.matrix[[0, 1, 3]].mean(axis=0), atol=1e-6)
    rng = np.random.default_rng(5)
    for _ in range(5):
        order = list(rng.permutation([0, 1, 3, 3, 2]))
        np.testing.assert_array_equal(sa_init_embedding(order, table), sa_init_embedding([0, 1, 3, 3, 2], table))
    with pytest.raises(ContractViolation):
        sa_init_embedding([], table)


def test_tokenize_keywords_drops_unknown_words():
    table = _table()
    assert tokenize_keywords(["Red Widget", "purple", "tent"], table) == [0, 1, 3]
    assert tokenize_keywords(["purple"], table) == []


def test_gaussian_fit_diagonal_and_full():
    table = _table(dim=3)
    diagonal = fit_gaussian(table)
    np.testing.assert_allclose(diagonal.mean, table.matrix.mean(axis=0))
    np.testing.assert_allclose(np.diag(diagonal.covariance), table.matrix.var(axis=0))
    full = fit_gaussian(table, full_covariance=True)
    np.testing.assert_allclose(full.covariance, np.cov(table.matrix, rowvar=False, bias=True))
    draws = full.sample(np.random.default_rng(1), 4)
    assert draws.shape == (4, 3)
    with pytest.raises(DegenerateInputError):
        fit_gaussian(EmbeddingTable(vocab_words={"a": 0}, matrix=np.ones((1, 3))))


def test_gaussian_samples_match_fitted_moments():
    table = _table(seed=2, words=tuple(f"w{n}" for n in range(50)), dim=3)
    params = fit_gaussian(table)
    draws = params.sample(np.random.default_rng(9), 20000)
    np.testing.assert_allclose(draws.mean(axis=0), params.mean, atol=0.05)
    np.testing.assert_allclose(draws.var(axis=0), np.diag(params.covariance), rtol=0.05)


def test_init_matrix_follows_the_plan():
    table = _table()
    vocab = Vocabulary.build(["red"], ["<a_0>", "<a_1>", "<b_0>", "<b_1>"])
    semantics = [
        TokenSemantics("<a_0>", "d", ["red", "widget"]),
        TokenSemantics("<a_1>", "d", ["purple"]),
        TokenSemantics("<b_0>", "d", ["tent"]),
    ]
    plan = InitPlan(strategies=["semantic", "gaussian"], seed=4)
    result = build_init_matrix(semantics, vocab, table, plan)
    assert result.matrix.shape == (4, 4)
    assert result.strategies == ["semantic", "gaussian", "gaussian", "gaussian"]
    np.testing.assert_allclose(result.matrix[0], table.matrix[[0, 1]].mean(axis=0), atol=1e-6)
    assert result.report["fallback_tokens"] == ["<a_1>"]
    assert result.report["per_level"]["a"] == {"semantic": 1, "gaussian": 1}

    again = build_init_matrix(semantics, vocab, table, plan)
    np.testing.assert_array_equal(result.matrix, again.matrix)


def test_init_plan_shorter_than_levels_is_rejected():
    vocab = Vocabulary.build([], ["<a_0>", "<b_0>"])
    with pytest.raises(ContractViolation):
        build_init_matrix([], vocab, _table(), InitPlan(strategies=["semantic"], seed=1))


def test_pre_token_rows_prefer_the_table():
    table = _table()
    vocab = Vocabulary.build(["red", "zzz"], ["<a_0>"])
    rows = pre_token_matrix(vocab, table, seed=3)
    assert rows.shape == (len(vocab.pre_tokens), 4)
    np.testing.assert_array_equal(rows[vocab.id_of["red"]], table.matrix[0])
    np.testing.assert_array_equal(rows, pre_token_matrix(vocab, table, seed=3))


def test_table_file_round_trip_and_errors(tmp_path):
    table = _table()
    path = tmp_path / "words.txt"
    write_embedding_table(str(path), table)
    loaded = load_embedding_table(str(path))
    assert loaded.vocab_words == table.vocab_words
    np.testing.assert_allclose(loaded.matrix, table.matrix)

    path.write_text("Red 1 2\nred 3 4\nblue 5 6\n", encoding="utf-8")
    loaded = load_embedding_table(str(path))
    assert loaded.vocab_words == {"red": 0, "blue": 1}
    np.testing.assert_array_equal(loaded.matrix[0], [1.0, 2.0])

    path.write_text("red 1 2\nblue 5\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_embedding_table(str(path))

    path.write_text("red 1 inf\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_embedding_table(str(path))
