import math

import pytest
import torch

from src.config.settings import TrainConfig
from src.exceptions.base import ContractViolation, TrainingDivergedError
from src.services.corpus_service import Corpus, InstructionExample
from src.services.sid_service import Vocabulary, build_trie, format_sid
from src.services.training_service import (EarlyStopping, TrainReport, prepare_pairs, read_train_report, train,
                                           write_train_report)
from tests.conftest import grid_sids, sid_tokens_for, tiny_model

NAMES = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel")


def _title_task():
    sids = grid_sids((2, 2, 2))
    vocab = Vocabulary.build(list(NAMES) + ["which", "item", "has", "the", "title", ":", "?", "user", "likes"],
                             sid_tokens_for((2, 2, 2)))
    item_ids = sorted(sids)
    train_examples = [InstructionExample(f"Which item has the title: {name}?", format_sid(sids[item_id]), "title2sid")
                      for name, item_id in zip(NAMES, item_ids)]
    valid = [InstructionExample(f"user likes {name}", format_sid(sids[item_id]), "seq_rec", user_id=f"u{n}")
             for n, (name, item_id) in enumerate(zip(NAMES, item_ids))]
    corpus = Corpus(train=train_examples + [InstructionExample(e.instruction, e.response, "seq_rec", e.user_id)
                                            for e in valid],
                    valid=valid, mix_weights={"seq_rec": 1.0, "title2sid": 1.0})
    return corpus, vocab, build_trie(sids)


def _cfg(**kwargs):
    values = dict(optimizer="adam", lr=1e-2, batch_size=8, steps=20, eval_interval=5, patience=3,
                  eval_examples=8, eval_users=4, hr_beam=4, seed=1)
    values.update(kwargs)
    return TrainConfig(**values)


def test_early_stopping_fires_after_patience_bad_evals():
    stopper = EarlyStopping(patience=3)
    assert [stopper.update(loss) for loss in (1.0, 0.9, 0.95, 0.91)] == [False, False, False, False]
    assert stopper.update(0.9) is True

    stopper = EarlyStopping(patience=3)
    assert [stopper.update(loss) for loss in (1.0, 1.1, 1.2, 0.5, 0.6, 0.7)] == [False] * 6
    assert stopper.update(0.55) is True


def test_prepare_pairs_drops_overlong_examples():
    corpus, vocab, _ = _title_task()
    long_example = InstructionExample(" ".join(["alpha"] * 40), "<a_0><b_0><c_0>", "title2sid")
    kept, pairs, dropped = prepare_pairs(corpus.train + [long_example], vocab, max_seq=20)
    assert len(kept) == len(corpus.train)
    assert dropped == {"title2sid": 1}
    assert all(len(p) + len(r) - 1 <= 20 for p, r in pairs)


def test_training_fits_a_small_corpus():
    corpus, vocab, trie = _title_task()
    model = tiny_model(len(vocab), max_seq=32, seed=4)
    report = train(model, corpus, _cfg(steps=200, eval_interval=20, patience=5), vocab, trie=trie, progress=False)
    first = report.evals()[0]
    assert first["step"] == 0 and first["train_loss"] is None
    assert report.best_eval_loss < 0.5 * first["eval_loss"]
    assert report.evals()[-1]["hr5"] is not None
    assert int(model.step.item()) == report.best_step


def test_training_is_deterministic():
    corpus, vocab, trie = _title_task()
    reports, weights = [], []
    for _ in range(2):
        model = tiny_model(len(vocab), max_seq=32, seed=4)
        reports.append(train(model, corpus, _cfg(), vocab, trie=trie, progress=False))
        weights.append(model.tok_emb.weight.detach().clone())
    assert reports[0].rows == reports[1].rows
    assert torch.equal(weights[0], weights[1])


def test_report_rows_cover_every_step():
    corpus, vocab, _ = _title_task()
    model = tiny_model(len(vocab), max_seq=32)
    report = train(model, corpus, _cfg(steps=12, eval_interval=5, patience=10), vocab, progress=False)
    assert [row["step"] for row in report.rows] == list(range(13))
    assert [row["step"] for row in report.evals()] == [0, 5, 10, 12]
    assert all(row["hr5"] is None for row in report.rows)
    assert not report.stopped_early


def test_divergence_is_reported(monkeypatch):
    corpus, vocab, _ = _title_task()
    model = tiny_model(len(vocab), max_seq=32)

    def nan_loss(model, batch):
        return (model.tok_emb.weight.sum() * math.nan)

    monkeypatch.setattr("src.services.training_service.sft_loss", nan_loss)
    with pytest.raises(TrainingDivergedError):
        train(model, corpus, _cfg(steps=3), vocab, progress=False)


def test_no_fitting_examples_is_a_contract_violation():
    corpus, vocab, _ = _title_task()
    model = tiny_model(len(vocab), max_seq=4)
    with pytest.raises(ContractViolation):
        train(model, corpus, _cfg(steps=1), vocab, progress=False)


def test_report_csv_round_trip(tmp_path):
    report = TrainReport(rows=[
        {"step": 0, "train_loss": None, "eval_loss": 2.5, "hr5": 0.0},
        {"step": 1, "train_loss": 2.25, "eval_loss": None, "hr5": None},
        {"step": 2, "train_loss": 1.0 / 3.0, "eval_loss": 1.75, "hr5": 0.25},
    ])
    path = tmp_path / "train_report.csv"
    write_train_report(path, report)
    assert path.read_text().splitlines()[0] == "step,train_loss,eval_loss,hr5"
    assert read_train_report(path) == report.rows
    assert report.early_eval_loss() == 2.5
