"""
Training Service.
Mini-batch SFT over the task-mixed corpus with periodic validation, HR@5
tracking and early stopping.
"""
import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from src.config.settings import TrainConfig
from src.exceptions.base import ContractViolation, TrainingDivergedError
from src.services.corpus_service import Corpus, InstructionExample, TaskMixSampler
from src.services.decode_service import rank_examples
from src.services.model_service import MiniRecModel, encode_example, make_batch, sequence_length, sft_loss
from src.services.sid_service import SidTrie, Vocabulary

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("step", "train_loss", "eval_loss", "hr5")


@dataclass
class TrainReport:
    rows: List[Dict[str, Optional[float]]] = field(default_factory=list)
    best_step: int = 0
    best_eval_loss: float = math.inf
    stopped_early: bool = False
    dropped_examples: Dict[str, int] = field(default_factory=dict)

    def evals(self) -> List[Dict[str, Optional[float]]]:
        return [row for row in self.rows if row["eval_loss"] is not None]

    @property
    def final_step(self) -> int:
        return int(self.rows[-1]["step"]) if self.rows else 0

    def early_eval_loss(self, fraction: float = 0.1) -> float:
        """Mean eval loss over evaluations within the first ``fraction`` of the run (step 0 included)."""
        horizon = max(self.final_step * fraction, 0)
        points = [row["eval_loss"] for row in self.evals() if row["step"] <= horizon] or \
                 [self.evals()[0]["eval_loss"]]
        return math.fsum(points) / len(points)


class EarlyStopping:
    """Stops after ``patience`` consecutive evaluations without a new best loss."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.bad_evals = 0

    def update(self, loss: float) -> bool:
        """Record one evaluation; True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        return self.bad_evals >= self.patience


def prepare_pairs(examples: Sequence[InstructionExample], vocab: Vocabulary,
                  max_seq: int) -> Tuple[List[InstructionExample], List[Tuple[List[int], List[int]]], Dict[str, int]]:
    """Tokenize examples, dropping those that do not fit in ``max_seq`` (counted per task)."""
    kept, pairs, dropped = [], [], {}
    for example in examples:
        pair = encode_example(example, vocab)
        if sequence_length(pair) > max_seq:
            dropped[example.task] = dropped.get(example.task, 0) + 1
            continue
        kept.append(example)
        pairs.append(pair)
    if dropped:
        logger.warning(f"Dropped {sum(dropped.values())} examples longer than max_seq {max_seq}: {dropped}")
    return kept, pairs, dropped


def build_optimizer(model: MiniRecModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ContractViolation(f"unknown optimizer {cfg.optimizer!r}")


@torch.no_grad()
def evaluation_loss(model: MiniRecModel, pairs: Sequence[Tuple[List[int], List[int]]], pad_id: int,
                    batch_size: int = 32) -> float:
    """Masked-token mean NLL over all ``pairs``."""
    if not pairs:
        return math.nan
    was_training = model.training
    model.eval()
    total_nll = 0.0
    total_tokens = 0.0
    try:
        for start in range(0, len(pairs), batch_size):
            batch = make_batch(pairs[start:start + batch_size], pad_id)
            log_probs = torch.log_softmax(model(batch.input_ids).double(), dim=-1)
            nll = -log_probs.gather(-1, batch.targets.unsqueeze(-1)).squeeze(-1)
            total_nll += float((nll * batch.loss_mask.double()).sum())
            total_tokens += float(batch.loss_mask.sum())
    finally:
        model.train(was_training)
    return total_nll / total_tokens


def _check_finite(model: MiniRecModel, step: int) -> None:
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise TrainingDivergedError(f"parameter {name} became non-finite at step {step}",
                                        details={"step": step, "parameter": name})


def train(model: MiniRecModel, corpus: Corpus, cfg: TrainConfig, vocab: Vocabulary,
          trie: Optional[SidTrie] = None, progress: bool = True) -> TrainReport:
    """
    Fit ``model`` on ``corpus.train`` and return the loss / HR@5 curves.

    Evaluates at step 0, every ``eval_interval`` steps and at the last step;
    the best-by-eval-loss parameters are restored at the end.
    """
    torch.set_num_threads(max(1, cfg.threads))
    torch.manual_seed(cfg.seed)
    max_seq = model.cfg.max_seq

    train_examples, train_pairs, dropped = prepare_pairs(corpus.train, vocab, max_seq)
    if not train_pairs:
        raise ContractViolation("no training example fits in max_seq")
    valid = list(corpus.valid)
    _, eval_pairs, dropped_valid = prepare_pairs(valid[:cfg.eval_examples], vocab, max_seq)
    for task, count in dropped_valid.items():
        dropped[f"valid:{task}"] = count
    hr_examples = valid[:cfg.eval_users] if trie is not None else []

    sampler = TaskMixSampler(train_examples, corpus.mix_weights, cfg.seed)
    optimizer = build_optimizer(model, cfg)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport(dropped_examples=dropped)
    best_state = copy.deepcopy(model.state_dict())
    model.train()

    def evaluate(step: int, train_loss: Optional[float]) -> bool:
        eval_loss = evaluation_loss(model, eval_pairs, vocab.pad_id, cfg.batch_size) if eval_pairs else None
        hr5 = rank_examples(model, hr_examples, trie, vocab, cfg.hr_beam).hr[5] if hr_examples else None
        report.rows.append({"step": step, "train_loss": train_loss, "eval_loss": eval_loss, "hr5": hr5})
        logger.info(f"step {step}: train_loss={_fmt(train_loss)} eval_loss={_fmt(eval_loss)} hr5={_fmt(hr5)}")
        if eval_loss is None:
            return False
        if eval_loss < report.best_eval_loss:
            report.best_eval_loss = eval_loss
            report.best_step = step
            best_state.update(copy.deepcopy(model.state_dict()))
        return stopper.update(eval_loss)

    evaluate(0, None)
    bar = tqdm(range(1, cfg.steps + 1), desc="train", unit="step", disable=not progress)
    for step in bar:
        batch = make_batch([train_pairs[i] for i in sampler.draw(cfg.batch_size)], vocab.pad_id)
        loss = sft_loss(model, batch)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(f"loss became {loss.item()} at step {step}",
                                        details={"step": step, "last_rows": report.rows[-3:]})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        model.step += 1
        _check_finite(model, step)

        train_loss = float(loss.item())
        bar.set_postfix(loss=f"{train_loss:.4f}")
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            if evaluate(step, train_loss):
                report.stopped_early = True
                logger.info(f"Early stopping at step {step}: no eval improvement in {cfg.patience} evaluations")
                break
        else:
            report.rows.append({"step": step, "train_loss": train_loss, "eval_loss": None, "hr5": None})
    bar.close()

    if report.evals() and report.best_eval_loss < math.inf:
        model.load_state_dict(best_state)
    logger.info(f"Training finished at step {report.final_step}; best eval loss "
                f"{report.best_eval_loss:.4f} at step {report.best_step}")
    return report


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def write_train_report(path, report: TrainReport) -> None:
    """CSV with one row per step; eval columns empty between evaluations."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow([row["step"]] + ["" if row[c] is None else repr(float(row[c])) for c in REPORT_COLUMNS[1:]])


def read_train_report(path) -> List[Dict[str, Optional[float]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            {"step": int(r["step"]), **{c: (float(r[c]) if r[c] else None) for c in REPORT_COLUMNS[1:]}}
            for r in csv.DictReader(f)
        ]
