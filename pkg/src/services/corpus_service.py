"""
Corpus Service.
Builds the multi-task instruction corpus: recommendation tasks over SID
histories, item/SID alignment, and token-level alignment tasks.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from src.config.settings import TASKS
from src.exceptions.base import ContractViolation, CorpusBuildError, PipelineError
from src.repositories.artifact_repository import read_jsonl, write_jsonl
from src.repositories.catalog_repository import ItemCatalog
from src.services.extractor_service import TokenSemantics
from src.services.sid_service import SID_SPAN, SidTuple, format_sid, parse_sid, parse_token
from src.utils.prompt_templates import templates

logger = logging.getLogger(__name__)

TOKEN_TASKS = ("tsalign_s2t", "tsalign_t2s")
_SHUFFLE_STREAM = 301
_SAMPLE_STREAM = 302


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    response: str
    task: str
    user_id: Optional[str] = None

    def __post_init__(self):
        if not self.instruction or not self.response:
            raise CorpusBuildError(f"{self.task} example with empty text", task=self.task)
        if self.task not in TASKS:
            raise CorpusBuildError(f"unknown task {self.task!r}", task=self.task)

    def to_record(self) -> dict:
        record = {"instruction": self.instruction, "response": self.response, "task": self.task}
        if self.user_id is not None:
            record["user_id"] = self.user_id
        return record

    @classmethod
    def from_record(cls, record: Mapping) -> "InstructionExample":
        return cls(instruction=record["instruction"], response=record["response"],
                   task=record["task"], user_id=record.get("user_id"))


@dataclass
class UserSplit:
    train_prefix: List[str]
    valid_target: str
    test_target: str

    @property
    def valid_history(self) -> List[str]:
        return list(self.train_prefix)

    @property
    def test_history(self) -> List[str]:
        return self.train_prefix + [self.valid_target]


@dataclass
class Corpus:
    train: List[InstructionExample] = field(default_factory=list)
    valid: List[InstructionExample] = field(default_factory=list)
    test: List[InstructionExample] = field(default_factory=list)
    mix_weights: Dict[str, float] = field(default_factory=dict)

    def counts(self) -> Dict[str, int]:
        counts = {task: 0 for task in TASKS}
        for example in self.train:
            counts[example.task] += 1
        return counts


def split_leave_last_out(catalog: ItemCatalog) -> Dict[str, UserSplit]:
    """Last item is the test target, the one before it the valid target; shorter users are left out."""
    splits: Dict[str, UserSplit] = {}
    excluded = 0
    for user_id in catalog.user_ids():
        sequence = catalog.sequences[user_id]
        if len(sequence) < 3:
            excluded += 1
            continue
        splits[user_id] = UserSplit(train_prefix=list(sequence[:-2]), valid_target=sequence[-2],
                                    test_target=sequence[-1])
    if excluded:
        logger.warning(f"Excluded {excluded} users with fewer than 3 interactions from the split")
    return splits


def render_history(item_ids: Sequence[str], sids: Mapping[str, SidTuple]) -> str:
    return ", ".join(format_sid(sids[item_id]) for item_id in item_ids)


def _windows(split: UserSplit, max_hist: int, sliding: bool):
    """
    (history, target) pairs over the training prefix.

    Windows whose target is the valid or the test item are skipped, so a user
    who repeats a held-out item gets fewer than len(prefix) - 1 windows.
    """
    prefix = split.train_prefix
    positions = range(1, len(prefix)) if sliding else ([len(prefix) - 1] if len(prefix) > 1 else [])
    held_out = {split.valid_target, split.test_target}
    for position in positions:
        target = prefix[position]
        if target in held_out:
            continue
        yield prefix[max(0, position - max_hist):position], target


def make_seq_rec_examples(catalog: ItemCatalog, sids: Mapping[str, SidTuple], max_hist: int = 20,
                          splits: Optional[Dict[str, UserSplit]] = None,
                          sliding: bool = True) -> List[InstructionExample]:
    """Next-item prediction examples over each user's training prefix."""
    splits = splits if splits is not None else split_leave_last_out(catalog)
    examples = []
    for user_id, split in splits.items():
        for history, target in _windows(split, max_hist, sliding):
            examples.append(InstructionExample(
                instruction=templates.recommendation("seq_rec", history=render_history(history, sids)),
                response=format_sid(sids[target]),
                task="seq_rec",
                user_id=user_id,
            ))
    return examples


def make_seq_rec_eval_examples(splits: Dict[str, UserSplit], sids: Mapping[str, SidTuple], max_hist: int,
                               which: str) -> List[InstructionExample]:
    """One seq_rec example per user for the valid or test target."""
    examples = []
    for user_id, split in splits.items():
        history = split.valid_history if which == "valid" else split.test_history
        target = split.valid_target if which == "valid" else split.test_target
        examples.append(InstructionExample(
            instruction=templates.recommendation("seq_rec", history=render_history(history[-max_hist:], sids)),
            response=format_sid(sids[target]),
            task="seq_rec",
            user_id=user_id,
        ))
    return examples


def make_item_alignment_examples(catalog: ItemCatalog, sids: Mapping[str, SidTuple]) -> List[InstructionExample]:
    """Per item: title -> SID and SID -> title."""
    examples = []
    for item_id in catalog.item_ids():
        item = catalog.items[item_id]
        sid = format_sid(sids[item_id])
        examples.append(InstructionExample(templates.recommendation("title2sid", title=item.title), sid, "title2sid"))
        examples.append(InstructionExample(templates.recommendation("sid2title", sid=sid), item.title, "sid2title"))
    return examples


def make_asymmetric_examples(catalog: ItemCatalog, sids: Mapping[str, SidTuple], max_hist: int = 20,
                             splits: Optional[Dict[str, UserSplit]] = None,
                             sliding: bool = True) -> List[InstructionExample]:
    """SID history -> next item's title (asym1) and description (asym2)."""
    splits = splits if splits is not None else split_leave_last_out(catalog)
    examples = []
    for user_id, split in splits.items():
        for history, target in _windows(split, max_hist, sliding):
            rendered = render_history(history, sids)
            item = catalog.items[target]
            examples.append(InstructionExample(
                templates.recommendation("asym1", history=rendered), item.title, "asym1", user_id))
            if item.description:
                examples.append(InstructionExample(
                    templates.recommendation("asym2", history=rendered), item.description, "asym2", user_id))
    return examples


def make_tsalign_examples(semantics: Iterable[TokenSemantics]) -> List[InstructionExample]:
    """Per token with semantics: description -> token and token -> description."""
    examples = []
    for entry in semantics:
        if not entry.description:
            continue
        examples.append(InstructionExample(
            templates.alignment("tsalign_s2t", description=entry.description), entry.token, "tsalign_s2t"))
        examples.append(InstructionExample(
            templates.alignment("tsalign_t2s", token=entry.token), entry.description, "tsalign_t2s"))
    return examples


def validate_example(example: InstructionExample, codes_per_level: Sequence[int]) -> None:
    """Every SID span must parse; token tasks carry single tokens instead of full tuples."""
    try:
        for text in (example.instruction, example.response):
            for span in SID_SPAN.findall(text):
                if example.task in TOKEN_TASKS:
                    level, code = parse_token(span)
                    if level >= len(codes_per_level) or code >= codes_per_level[level]:
                        raise CorpusBuildError(f"token {span} outside the minted range", task=example.task)
                else:
                    parse_sid(span, codes_per_level)
        if example.task == "tsalign_s2t":
            parse_token(example.response)
    except CorpusBuildError:
        raise
    except PipelineError as e:
        raise CorpusBuildError(f"{example.task} example has a malformed SID: {e}", task=example.task) from e


def assemble_corpus(parts: Mapping[str, Sequence[InstructionExample]], weights: Mapping[str, float], seed: int,
                    codes_per_level: Sequence[int],
                    valid: Sequence[InstructionExample] = (),
                    test: Sequence[InstructionExample] = ()) -> Corpus:
    """
    Validate, concatenate and shuffle the training slices.

    Args:
        parts: Example lists keyed by slice name
        weights: Per-task mixing weights
        seed: Shuffle seed
        codes_per_level: Minted code counts, for SID validation
        valid: Validation examples (seq_rec on valid targets)
        test: Test examples (seq_rec on test targets)
    """
    train: List[InstructionExample] = []
    for name in sorted(parts):
        for example in parts[name]:
            validate_example(example, codes_per_level)
            train.append(example)
    for example in list(valid) + list(test):
        if example.task != "seq_rec":
            raise CorpusBuildError("valid/test sets hold seq_rec examples only", task=example.task)
        validate_example(example, codes_per_level)

    order = np.random.default_rng([seed, _SHUFFLE_STREAM]).permutation(len(train))
    train = [train[i] for i in order]

    present = {e.task for e in train}
    mix = {task: float(weights[task]) for task in TASKS if task in present}
    if any(w <= 0 for w in mix.values()):
        raise ContractViolation("task weights must be positive")

    corpus = Corpus(train=train, valid=list(valid), test=list(test), mix_weights=mix)
    logger.info(f"Corpus: {len(train)} train, {len(corpus.valid)} valid, {len(corpus.test)} test; "
                f"per task {corpus.counts()}")
    return corpus


class TaskMixSampler:
    """Draws training examples: a task with probability proportional to its weight, then a uniform example."""

    def __init__(self, examples: Sequence[InstructionExample], weights: Mapping[str, float], seed: int):
        self.by_task: Dict[str, List[int]] = {}
        for index, example in enumerate(examples):
            self.by_task.setdefault(example.task, []).append(index)
        self.tasks = [task for task in TASKS if task in self.by_task]
        if not self.tasks:
            raise ContractViolation("cannot sample from an empty corpus")
        raw = np.array([weights.get(task, 0.0) for task in self.tasks], dtype=np.float64)
        if (raw <= 0).any():
            raise ContractViolation("every task in the corpus needs a positive weight")
        self.probabilities = raw / raw.sum()
        self.rng = np.random.default_rng([seed, _SAMPLE_STREAM])

    def draw(self, n: int) -> List[int]:
        """Indices of ``n`` examples."""
        task_choice = self.rng.choice(len(self.tasks), size=n, p=self.probabilities)
        offsets = self.rng.random(n)
        indices = []
        for task_index, offset in zip(task_choice, offsets):
            pool = self.by_task[self.tasks[task_index]]
            indices.append(pool[min(int(offset * len(pool)), len(pool) - 1)])
        return indices


def write_examples(path, examples: Iterable[InstructionExample]) -> int:
    return write_jsonl(path, (e.to_record() for e in examples))


def read_examples(path) -> List[InstructionExample]:
    return [InstructionExample.from_record(r) for r in read_jsonl(path)]
