"""
Decode and Evaluation Service.
Trie-constrained beam search over SID tuples, full-ranking HR@K / NDCG@K and
the Title2SID / SID2Title comprehension probes.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from src.exceptions.base import ContractViolation
from src.repositories.catalog_repository import ItemCatalog
from src.services.corpus_service import InstructionExample, make_seq_rec_eval_examples, split_leave_last_out
from src.services.model_service import MiniRecModel, detokenize, encode_prompt, normalize_text
from src.services.sid_service import SidTrie, SidTuple, Vocabulary, format_sid, parse_sid
from src.utils.prompt_templates import templates

logger = logging.getLogger(__name__)

CUTOFFS = (3, 5, 10)


@dataclass
class Beam:
    """Hypotheses as (code prefix, cumulative log-prob), best first."""

    width: int
    hypotheses: List[Tuple[SidTuple, float]] = field(default_factory=lambda: [((), 0.0)])

    def advance(self, candidates: List[Tuple[SidTuple, float]]) -> None:
        candidates.sort(key=lambda h: (-h[1], h[0]))
        self.hypotheses = candidates[:self.width]


@dataclass
class RankReport:
    ranked: Dict[str, List[str]]
    targets: Dict[str, str]
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    misses: int = 0

    @property
    def users_evaluated(self) -> int:
        return len(self.ranked)

    def to_record(self) -> dict:
        return {
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "users_evaluated": self.users_evaluated,
        }


def beam_search_constrained(model: MiniRecModel, prompt: Sequence[int], trie: SidTrie, width: int,
                            vocab: Vocabulary) -> List[Tuple[SidTuple, float]]:
    """
    Complete SID tuples reachable in ``trie``, best total log-prob first.

    Only trie children are expanded at each level; ties are broken by the
    lexicographic order of the tuples.
    """
    if width < 1:
        raise ContractViolation(f"beam width must be >= 1, got {width}")
    if len(trie) == 0:
        raise ContractViolation("cannot decode against an empty trie")
    if len(prompt) + trie.depth - 1 > model.cfg.max_seq:
        raise ContractViolation(f"prompt of {len(prompt)} tokens leaves no room for a {trie.depth}-level SID")

    was_training = model.training
    model.eval()
    try:
        beam = Beam(width=width)
        for level in range(trie.depth):
            rows = [list(prompt) + [vocab.sid_id(l, c) for l, c in enumerate(prefix)]
                    for prefix, _ in beam.hypotheses]
            log_probs = model.next_log_probs(torch.tensor(rows, dtype=torch.long))
            candidates = []
            for row, (prefix, score) in enumerate(beam.hypotheses):
                for code in trie.children(prefix):
                    candidates.append((prefix + (code,), score + float(log_probs[row, vocab.sid_id(level, code)])))
            beam.advance(candidates)
        return beam.hypotheses
    finally:
        model.train(was_training)


def beam_search_free(model: MiniRecModel, prompt: Sequence[int], width: int, max_tokens: int,
                     eos_id: int) -> List[Tuple[List[int], float]]:
    """Unconstrained beam search ending at ``eos_id``; returns finished sequences without the <eos>."""
    if width < 1:
        raise ContractViolation(f"beam width must be >= 1, got {width}")
    max_tokens = min(max_tokens, model.cfg.max_seq - len(prompt) + 1)
    if max_tokens < 1:
        raise ContractViolation(f"prompt of {len(prompt)} tokens leaves no room to generate")

    was_training = model.training
    model.eval()
    try:
        live: List[Tuple[List[int], float]] = [([], 0.0)]
        finished: List[Tuple[List[int], float]] = []
        for _ in range(max_tokens):
            rows = [list(prompt) + generated for generated, _ in live]
            log_probs = model.next_log_probs(torch.tensor(rows, dtype=torch.long))
            top = torch.topk(log_probs, k=min(width, log_probs.shape[1]), dim=1)
            candidates = []
            for row, (generated, score) in enumerate(live):
                for value, token in zip(top.values[row].tolist(), top.indices[row].tolist()):
                    candidates.append((generated + [token], score + value))
            candidates.sort(key=lambda h: (-h[1], h[0]))
            live = []
            for generated, score in candidates[:width]:
                if generated[-1] == eos_id:
                    finished.append((generated[:-1], score))
                else:
                    live.append((generated, score))
            finished.sort(key=lambda h: (-h[1], h[0]))
            # Scores only fall, so nothing live can overtake a full finished list
            if not live or (len(finished) >= width and live[0][1] <= finished[width - 1][1]):
                break
        results = finished or live
        return sorted(results, key=lambda h: (-h[1], h[0]))[:width]
    finally:
        model.train(was_training)


def hit_ratio_at_k(ranked: Sequence[str], target: str, k: int) -> int:
    return int(target in ranked[:k])


def ndcg_at_k(ranked: Sequence[str], target: str, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank + 1) inside the cutoff, else 0."""
    head = list(ranked[:k])
    if target not in head:
        return 0.0
    return 1.0 / math.log2(head.index(target) + 2)


def rank_items(model: MiniRecModel, example: InstructionExample, trie: SidTrie, vocab: Vocabulary,
               width: int) -> List[str]:
    """Ranked, de-duplicated item ids for one seq_rec prompt."""
    prompt = encode_prompt(example.instruction, vocab)
    try:
        beams = beam_search_constrained(model, prompt, trie, width, vocab)
    except ContractViolation as e:
        logger.warning(f"No ranking for user {example.user_id}: {e}")
        return []
    ranked: List[str] = []
    for sid, _ in beams:
        item_id = trie.item_of(sid)
        if item_id is not None and item_id not in ranked:
            ranked.append(item_id)
    return ranked


def rank_examples(model: MiniRecModel, examples: Sequence[InstructionExample], trie: SidTrie,
                  vocab: Vocabulary, width: int, workers: int = 1,
                  cutoffs: Sequence[int] = CUTOFFS) -> RankReport:
    """Rank every example's user and score the response item at each cutoff."""
    def run(example: InstructionExample) -> List[str]:
        return rank_items(model, example, trie, vocab, width)

    # Workers share one module, so its mode is set once around the pool
    was_training = model.training
    model.eval()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Ranker") as executor:
                rankings = list(executor.map(run, examples))
        else:
            rankings = [run(example) for example in examples]
    finally:
        model.train(was_training)

    ranked: Dict[str, List[str]] = {}
    targets: Dict[str, str] = {}
    misses = 0
    for index, (example, items) in enumerate(zip(examples, rankings)):
        key = example.user_id if example.user_id is not None else str(index)
        target = trie.item_of(parse_sid(example.response))
        if target is None:
            raise ContractViolation(f"target SID {example.response} of user {key} is not in the trie")
        if not items:
            misses += 1
        ranked[key] = items
        targets[key] = target

    users = len(ranked)
    hr = {k: (sum(hit_ratio_at_k(ranked[u], targets[u], k) for u in ranked) / users if users else 0.0)
          for k in cutoffs}
    ndcg = {k: (math.fsum(ndcg_at_k(ranked[u], targets[u], k) for u in ranked) / users if users else 0.0)
            for k in cutoffs}
    if misses:
        logger.warning(f"{misses} users got no valid SID from the beam")
    return RankReport(ranked=ranked, targets=targets, hr=hr, ndcg=ndcg, misses=misses)


def full_rank_eval(model: MiniRecModel, catalog: ItemCatalog, sids: Dict[str, SidTuple], trie: SidTrie,
                   vocab: Vocabulary, width: int = 20, max_hist: int = 20, max_users: int = 0,
                   which: str = "test", workers: int = 1) -> RankReport:
    """Full-ranking HR/NDCG at 3, 5 and 10 over each user's held-out target."""
    splits = split_leave_last_out(catalog)
    examples = make_seq_rec_eval_examples(splits, sids, max_hist, which)
    if max_users:
        examples = examples[:max_users]
    report = rank_examples(model, examples, trie, vocab, width, workers)
    logger.info(f"Full-rank eval over {report.users_evaluated} users (beam {width}): "
                + ", ".join(f"HR@{k}={report.hr[k]:.4f}" for k in CUTOFFS) + ", "
                + ", ".join(f"NDCG@{k}={report.ndcg[k]:.4f}" for k in CUTOFFS))
    return report


def comprehension_eval(model: MiniRecModel, catalog: ItemCatalog, sids: Dict[str, SidTuple], trie: SidTrie,
                       vocab: Vocabulary, width: int = 5, max_title_tokens: int = 48,
                       items: Optional[Sequence[str]] = None) -> Tuple[float, float]:
    """
    (acc1, acc2): top-1 accuracy of Title2SID under constrained decoding and
    of SID2Title under free decoding with whitespace-normalized title match.
    """
    item_ids = list(items) if items is not None else catalog.item_ids()
    if not item_ids:
        return 0.0, 0.0
    title_hits = 0
    sid_hits = 0
    for item_id in item_ids:
        item = catalog.items[item_id]
        sid = tuple(sids[item_id])

        prompt = encode_prompt(templates.recommendation("title2sid", title=item.title), vocab)
        try:
            beams = beam_search_constrained(model, prompt, trie, width, vocab)
            title_hits += int(beams[0][0] == sid)
        except ContractViolation as e:
            logger.warning(f"Title2SID skipped for {item_id}: {e}")

        prompt = encode_prompt(templates.recommendation("sid2title", sid=format_sid(sid)), vocab)
        decoded = beam_search_free(model, prompt, width, max_title_tokens, vocab.eos_id)
        if decoded and normalize_text(detokenize(decoded[0][0], vocab)) == normalize_text(item.title):
            sid_hits += 1

    acc1, acc2 = title_hits / len(item_ids), sid_hits / len(item_ids)
    logger.info(f"Comprehension probes over {len(item_ids)} items (beam {width}): ACC1={acc1:.4f}, ACC2={acc2:.4f}")
    return acc1, acc2


def write_ranked_csv(path, report: RankReport, k: int = 10) -> None:
    """Per-user ranked lists with the target's rank (0 when outside the list)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["user_id", "target", "rank", "ranked_items"])
        for user_id in sorted(report.ranked):
            ranked = report.ranked[user_id]
            target = report.targets[user_id]
            rank = ranked.index(target) + 1 if target in ranked else 0
            writer.writerow([user_id, target, rank, " ".join(ranked[:k])])
