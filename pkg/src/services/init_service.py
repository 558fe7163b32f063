"""
Initialization Service.
Initial embeddings for SID tokens: keyword mean pooling over a pretrained word
table, or draws from a Gaussian fitted to that table.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config.settings import InitPlan
from src.exceptions.base import ContractViolation, DataError, DegenerateInputError, ParseError
from src.services.extractor_service import TokenSemantics
from src.services.sid_service import Vocabulary, parse_token

logger = logging.getLogger(__name__)

_GAUSSIAN_STREAM = 202
_PRE_TOKEN_STREAM = 203


@dataclass
class EmbeddingTable:
    vocab_words: Dict[str, int]
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class GaussianInitParams:
    mean: np.ndarray
    covariance: np.ndarray
    diagonal: bool = True
    _factor: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """n draws, shape (n, dim)."""
        noise = rng.standard_normal((n, self.mean.shape[0]))
        if self.diagonal:
            return self.mean + noise * np.sqrt(np.diag(self.covariance))
        if self._factor is None:
            self._factor = _cholesky(self.covariance)
        return self.mean + noise @ self._factor.T


@dataclass
class InitResult:
    matrix: np.ndarray
    strategies: List[str]
    report: dict


def _cholesky(covariance: np.ndarray) -> np.ndarray:
    dim = covariance.shape[0]
    trace = float(np.trace(covariance))
    if trace == 0.0:
        return np.zeros_like(covariance)
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(covariance + jitter * np.eye(dim))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10 * trace / dim)
    raise DegenerateInputError("covariance is not positive semidefinite")


def load_embedding_table(path: str) -> EmbeddingTable:
    """
    Read "word v1 ... v_dim" lines, with or without a leading "n dim" line.
    Words are lowercased; on a clash the first occurrence wins.
    """
    words: Dict[str, int] = {}
    rows: List[np.ndarray] = []
    dim = None
    dropped = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise ParseError("row has no vector values", path=path, line=line_no)
            if len(parts) != dim + 1:
                raise ParseError(f"expected {dim} values, got {len(parts) - 1}", path=path, line=line_no)
            try:
                vector = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric value", path=path, line=line_no) from None
            if not np.isfinite(vector).all():
                raise DataError(f"{path}:{line_no}: non-finite value for {parts[0]!r}")
            word = parts[0].lower()
            if word in words:
                dropped += 1
                continue
            words[word] = len(rows)
            rows.append(vector)

    if not rows:
        raise DegenerateInputError(f"embedding table {path} is empty")
    if dropped:
        logger.warning(f"Dropped {dropped} table rows whose lowercased word was already present")
    logger.info(f"Loaded {len(rows)}x{dim} embedding table from {path}")
    return EmbeddingTable(vocab_words=words, matrix=np.vstack(rows))


def write_embedding_table(path: str, table: EmbeddingTable) -> None:
    """Write with a "n dim" header, rows in index order."""
    order = sorted(table.vocab_words, key=table.vocab_words.get)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(table)} {table.dim}\n")
        for word in order:
            row = table.matrix[table.vocab_words[word]]
            f.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


def tokenize_keywords(keywords: Sequence[str], table: EmbeddingTable) -> List[int]:
    """Table rows for the whitespace-split, lowercased keyword text; unknown words dropped."""
    words = " ".join(keywords).lower().split()
    return [table.vocab_words[w] for w in words if w in table.vocab_words]


def sa_init_embedding(subtokens: Sequence[int], table: EmbeddingTable) -> np.ndarray:
    """Arithmetic mean of the given table rows, independent of their order."""
    if len(subtokens) == 0:
        raise ContractViolation("sa_init_embedding needs at least one sub-token")
    rows = table.matrix[list(subtokens)]
    # fsum is correctly rounded, so the result does not depend on row order
    return np.array([math.fsum(column) for column in rows.T]) / len(subtokens)


def fit_gaussian(table: EmbeddingTable, full_covariance: bool = False) -> GaussianInitParams:
    """Mean and covariance of the table rows (diagonal unless ``full_covariance``)."""
    if len(table) < 2:
        raise DegenerateInputError(f"fit_gaussian needs at least 2 rows, got {len(table)}")
    mean = table.matrix.mean(axis=0)
    if full_covariance:
        covariance = np.cov(table.matrix, rowvar=False, bias=True).reshape(table.dim, table.dim)
        covariance = (covariance + covariance.T) / 2.0
    else:
        covariance = np.diag(table.matrix.var(axis=0))
    return GaussianInitParams(mean=mean, covariance=covariance, diagonal=not full_covariance)


def _norm_summary(rows: np.ndarray) -> dict:
    if len(rows) == 0:
        return {"count": 0}
    norms = np.linalg.norm(rows, axis=1)
    return {
        "count": int(len(norms)),
        "mean": float(norms.mean()),
        "min": float(norms.min()),
        "max": float(norms.max()),
    }


def build_init_matrix(semantics: Sequence[TokenSemantics], vocab: Vocabulary, table: EmbeddingTable,
                      plan: InitPlan) -> InitResult:
    """
    One row per SID token in vocabulary order. Levels planned as semantic use
    the keyword mean when the token has usable keywords; everything else is a
    seeded Gaussian draw.
    """
    by_token = {s.token: s for s in semantics}
    gaussian = fit_gaussian(table, plan.full_covariance)
    matrix = np.empty((len(vocab.sid_tokens), table.dim), dtype=np.float64)
    strategies: List[str] = []
    fallback_tokens: List[str] = []
    per_level: Dict[str, Dict[str, int]] = {}

    for index, token in enumerate(vocab.sid_tokens):
        level, _ = parse_token(token)
        if level >= len(plan.strategies):
            raise ContractViolation(f"init plan has {len(plan.strategies)} levels but {token} is level {level + 1}")
        wanted = plan.strategies[level]
        row = None
        if wanted == "semantic":
            entry = by_token.get(token)
            subtokens = tokenize_keywords(entry.keywords, table) if entry else []
            if subtokens:
                row = sa_init_embedding(subtokens, table)
            else:
                fallback_tokens.append(token)
        if row is None:
            rng = np.random.default_rng([plan.seed, _GAUSSIAN_STREAM, index])
            row = gaussian.sample(rng, 1)[0]
            used = "gaussian"
        else:
            used = "semantic"
        matrix[index] = row
        strategies.append(used)
        counts = per_level.setdefault(token[1], {"semantic": 0, "gaussian": 0})
        counts[used] += 1

    semantic_rows = matrix[[i for i, s in enumerate(strategies) if s == "semantic"]]
    report = {
        "semantic_count": strategies.count("semantic"),
        "gaussian_count": strategies.count("gaussian"),
        "fallback_tokens": fallback_tokens,
        "plan": list(plan.strategies),
        "per_level": per_level,
        "norms": {"semantic": _norm_summary(semantic_rows), "table": _norm_summary(table.matrix)},
    }
    logger.info(
        f"Init matrix: {report['semantic_count']} semantic, {report['gaussian_count']} gaussian "
        f"({len(fallback_tokens)} fallbacks); semantic norm mean "
        f"{report['norms']['semantic'].get('mean', 0.0):.4f} vs table {report['norms']['table']['mean']:.4f}"
    )
    return InitResult(matrix=matrix, strategies=strategies, report=report)


def pre_token_matrix(vocab: Vocabulary, table: EmbeddingTable, seed: int,
                     full_covariance: bool = False) -> np.ndarray:
    """Rows for the pre tokens: the table row when the word is known, else a Gaussian draw."""
    gaussian = fit_gaussian(table, full_covariance)
    rows = np.empty((len(vocab.pre_tokens), table.dim), dtype=np.float64)
    missing = 0
    for index, word in enumerate(vocab.pre_tokens):
        if word in table.vocab_words:
            rows[index] = table.matrix[table.vocab_words[word]]
        else:
            rows[index] = gaussian.sample(np.random.default_rng([seed, _PRE_TOKEN_STREAM, index]), 1)[0]
            missing += 1
    logger.info(f"Pre-token rows: {len(rows) - missing} from the table, {missing} sampled")
    return rows
