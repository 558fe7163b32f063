"""
SID Service.
Mints SID token strings, resolves code collisions, and holds the vocabulary
and the prefix trie of valid SID tuples.
"""
import logging
import re
import string
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.config.settings import QuantizerConfig
from src.exceptions.base import CapacityError, ContractViolation, CoverageError, ParseError
from src.repositories.catalog_repository import ItemCatalog
from src.services.quantizer_service import EncodeResult

logger = logging.getLogger(__name__)

SidTuple = Tuple[int, ...]

LEVEL_LETTERS = string.ascii_lowercase
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<sep>", "<eos>")

_TOKEN = re.compile(r"<([a-z])_(0|[1-9][0-9]*)>")
# A run of adjacent SID tokens inside free text
SID_SPAN = re.compile(r"(?:<[a-z]_[0-9]+>)+")

# Seed stream reserved for collision reassignment
_COLLISION_STREAM = 101


def format_token(level: int, code: int) -> str:
    """Token string for a 0-based level and code, e.g. (0, 236) -> "<a_236>"."""
    return f"<{LEVEL_LETTERS[level]}_{code}>"


def parse_token(token: str) -> Tuple[int, int]:
    """(level, code) for a single SID token string."""
    match = _TOKEN.fullmatch(token)
    if not match:
        raise ParseError(f"not a SID token: {token!r}")
    return LEVEL_LETTERS.index(match.group(1)), int(match.group(2))


def format_sid(sid: Sequence[int]) -> str:
    """Concatenated token string for a SID tuple."""
    return "".join(format_token(level, int(code)) for level, code in enumerate(sid))


def parse_sid(text: str, codes_per_level: Optional[Sequence[int]] = None) -> SidTuple:
    """
    Parse "<a_i><b_j><c_k>" (no separators) into a code tuple.

    Args:
        text: SID string
        codes_per_level: When given, fixes the depth and the valid code range per level

    Returns:
        Tuple of per-level codes
    """
    codes: List[int] = []
    position = 0
    while position < len(text):
        match = _TOKEN.match(text, position)
        if not match:
            raise ParseError(f"unexpected text at offset {position} in SID {text!r}")
        level, code = LEVEL_LETTERS.index(match.group(1)), int(match.group(2))
        if level != len(codes):
            raise ParseError(f"level '{match.group(1)}' out of order in SID {text!r}")
        if codes_per_level is not None:
            if level >= len(codes_per_level):
                raise ParseError(f"SID {text!r} is deeper than {len(codes_per_level)} levels")
            if code >= codes_per_level[level]:
                raise ParseError(f"code {code} out of range at level {level + 1} in SID {text!r}")
        codes.append(code)
        position = match.end()

    if not codes:
        raise ParseError(f"empty SID {text!r}")
    if codes_per_level is not None and len(codes) != len(codes_per_level):
        raise ParseError(f"SID {text!r} has {len(codes)} levels, expected {len(codes_per_level)}")
    return tuple(codes)


def mint_tokens(cfg: QuantizerConfig) -> List[str]:
    """All SID token strings, level-major: <a_0>..<a_K1-1>, <b_0>.., ..."""
    if cfg.levels > len(LEVEL_LETTERS):
        raise ContractViolation(f"at most {len(LEVEL_LETTERS)} levels can be minted, got {cfg.levels}")
    return [format_token(level, code)
            for level, k in enumerate(cfg.codes_per_level[:cfg.levels])
            for code in range(k)]


def assign_sids(encode: EncodeResult, catalog: ItemCatalog, seed: int,
                codes_per_level: Sequence[int]) -> Dict[str, SidTuple]:
    """
    Turn raw codes into unique SID tuples.

    Items sharing a full code tuple keep their prefix; the lexicographically
    first keeps its last code and the others draw an unused last-level code
    from a seeded stream.
    """
    index = {item_id: i for i, item_id in enumerate(encode.item_order)}
    missing = sorted(set(catalog.items) - set(index))
    if missing:
        raise CoverageError(f"No codes for {len(missing)} items: {missing[:20]}", missing=missing)

    raw: Dict[str, SidTuple] = {item_id: encode.code_of(index[item_id]) for item_id in catalog.item_ids()}
    groups: Dict[SidTuple, List[str]] = defaultdict(list)
    used_last: Dict[SidTuple, set] = defaultdict(set)
    for item_id, codes in raw.items():
        groups[codes].append(item_id)
        used_last[codes[:-1]].add(codes[-1])

    k_last = codes_per_level[-1]
    rng = np.random.default_rng([seed, _COLLISION_STREAM])
    sids = dict(raw)
    reassigned = 0
    collided = 0

    for codes in sorted(groups):
        members = sorted(groups[codes])
        if len(members) < 2:
            continue
        collided += 1
        prefix = codes[:-1]
        free = [c for c in range(k_last) if c not in used_last[prefix]]
        if len(members) - 1 > len(free):
            raise CapacityError(
                f"{len(members)} items share SID {format_sid(codes)} but only {len(free)} "
                f"last-level codes are free under that prefix",
                details={"sid": format_sid(codes), "members": len(members), "free": len(free)})
        for item_id in members[1:]:
            code = free.pop(int(rng.integers(len(free))))
            used_last[prefix].add(code)
            sids[item_id] = prefix + (code,)
            reassigned += 1

    if len(set(sids.values())) != len(sids):
        raise ContractViolation("SID assignment is not injective")
    logger.info(f"Assigned {len(sids)} SIDs; {collided} collision groups, {reassigned} items reassigned")
    return sids


def collision_stats(encode: EncodeResult, sids: Dict[str, SidTuple]) -> dict:
    """Counts describing how many items collision resolution touched."""
    index = {item_id: i for i, item_id in enumerate(encode.item_order)}
    changed = sorted(item_id for item_id, sid in sids.items() if encode.code_of(index[item_id]) != sid)
    return {"items": len(sids), "reassigned": len(changed), "reassigned_items": changed}


@dataclass
class Vocabulary:
    """Pre tokens first, then SID tokens, ids contiguous from 0."""

    pre_tokens: List[str] = field(default_factory=list)
    sid_tokens: List[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.pre_tokens) & set(self.sid_tokens)
        if overlap:
            raise ContractViolation(f"pre and SID tokens overlap: {sorted(overlap)[:10]}")
        tokens = self.pre_tokens + self.sid_tokens
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("vocabulary contains duplicate tokens")
        self.id_of: Dict[str, int] = {token: i for i, token in enumerate(tokens)}
        self._tokens = tokens

    @classmethod
    def build(cls, words: Iterable[str], sid_tokens: Sequence[str]) -> "Vocabulary":
        """Specials, then sorted distinct words, then SID tokens in minted order."""
        sid_set = set(sid_tokens)
        specials = set(SPECIAL_TOKENS)
        plain = sorted({w for w in words if w not in sid_set and w not in specials})
        return cls(pre_tokens=list(SPECIAL_TOKENS) + plain, sid_tokens=list(sid_tokens))

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Rebuild from the flat token list written to disk."""
        split = next((i for i, t in enumerate(tokens) if _TOKEN.fullmatch(t)), len(tokens))
        return cls(pre_tokens=list(tokens[:split]), sid_tokens=list(tokens[split:]))

    @property
    def total(self) -> int:
        return len(self._tokens)

    @property
    def sid_offset(self) -> int:
        return len(self.pre_tokens)

    def __len__(self) -> int:
        return self.total

    def tokens(self) -> List[str]:
        return list(self._tokens)

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def is_sid(self, token_id: int) -> bool:
        return token_id >= self.sid_offset

    def sid_id(self, level: int, code: int) -> int:
        """Vocabulary id of the SID token at (level, code)."""
        return self.id_of[format_token(level, code)]

    @property
    def unk_id(self) -> int:
        return self.id_of["<unk>"]

    @property
    def pad_id(self) -> int:
        return self.id_of["<pad>"]

    @property
    def bos_id(self) -> int:
        return self.id_of["<bos>"]

    @property
    def sep_id(self) -> int:
        return self.id_of["<sep>"]

    @property
    def eos_id(self) -> int:
        return self.id_of["<eos>"]


class SidTrie:
    """Prefix trie over SID code tuples; leaves carry item ids."""

    def __init__(self, sids: Dict[str, SidTuple]):
        self._root: dict = {}
        self._leaves: Dict[SidTuple, str] = {}
        self.depth = 0

        for item_id in sorted(sids):
            sid = tuple(int(c) for c in sids[item_id])
            if self.depth and len(sid) != self.depth:
                raise ContractViolation(f"SID of {item_id} has {len(sid)} levels, expected {self.depth}")
            self.depth = len(sid)
            if sid in self._leaves:
                raise ContractViolation(
                    f"SID {format_sid(sid)} assigned to both {self._leaves[sid]} and {item_id}")
            node = self._root
            for code in sid:
                node = node.setdefault(code, {})
            self._leaves[sid] = item_id

    def __len__(self) -> int:
        return len(self._leaves)

    def children(self, prefix: Sequence[int] = ()) -> List[int]:
        """Codes that extend ``prefix`` toward at least one leaf, ascending."""
        node = self._root
        for code in prefix:
            node = node.get(code)
            if node is None:
                return []
        return sorted(node)

    def contains(self, sid: Sequence[int]) -> bool:
        return tuple(sid) in self._leaves

    def item_of(self, sid: Sequence[int]) -> Optional[str]:
        return self._leaves.get(tuple(sid))

    def tuples(self) -> List[SidTuple]:
        return sorted(self._leaves)


def build_trie(sids: Dict[str, SidTuple]) -> SidTrie:
    """Prefix trie enumerating exactly the assigned tuples."""
    trie = SidTrie(sids)
    logger.debug(f"Trie built with {len(trie)} leaves, {len(trie.children())} level-1 branches")
    return trie
