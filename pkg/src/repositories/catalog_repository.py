"""
Catalog Repository.
Reads and writes item metadata, interaction logs and dense item embeddings.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.exceptions.base import ConflictError, CoverageError, DataError, ParseError

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"RECEMB\x00\x01"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    description: str = ""
    brand: str = ""
    categories: Tuple[str, ...] = ()

    def text(self) -> str:
        """Title and description joined into one sentence."""
        return f"{self.title} {self.description}".strip()


@dataclass(frozen=True)
class ItemCatalog:
    items: Dict[str, Item] = field(default_factory=dict)
    sequences: Dict[str, List[str]] = field(default_factory=dict)

    def item_ids(self) -> List[str]:
        """Item ids in lexicographic order."""
        return sorted(self.items)

    def user_ids(self) -> List[str]:
        """User ids in lexicographic order."""
        return sorted(self.sequences)

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    order: int


@dataclass(frozen=True)
class InteractionLog:
    events: List[Interaction] = field(default_factory=list)


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    item_order: List[str]

    def __post_init__(self):
        self._index = {item_id: i for i, item_id in enumerate(self.item_order)}

    @property
    def n_items(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def row(self, item_id: str) -> np.ndarray:
        return self.rows[self._index[item_id]]

    def subset(self, item_ids: Iterable[str]) -> "EmbeddingMatrix":
        """Rows for ``item_ids`` in the given order."""
        ids = list(item_ids)
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise CoverageError(f"Embeddings missing for {len(missing)} items: {missing[:20]}", missing=missing)
        return EmbeddingMatrix(rows=self.rows[[self._index[i] for i in ids]].copy(), item_order=ids)


def _parse_categories(value, path: str, line_no: int) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    if isinstance(value, list):
        flat = []
        for entry in value:
            # Amazon-style metadata nests category paths
            if isinstance(entry, list):
                flat.extend(str(e) for e in entry)
            else:
                flat.append(str(entry))
        return tuple(c.strip() for c in flat if c.strip())
    raise ParseError("categories must be a string or list", path=path, line=line_no)


def _read_jsonl(path: str):
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", path=path, line=line_no) from None
            if not isinstance(record, dict):
                raise ParseError("expected a JSON object", path=path, line=line_no)
            yield line_no, record


def load_catalog(path: str) -> ItemCatalog:
    """Load item metadata, one JSON object per line."""
    items: Dict[str, Item] = {}
    for line_no, record in _read_jsonl(path):
        try:
            item_id = str(record["item_id"])
            title = record["title"]
        except KeyError as e:
            raise ParseError(f"missing field {e.args[0]!r}", path=path, line=line_no) from None
        if not isinstance(title, str) or not title.strip():
            raise ParseError("title must be a non-empty string", path=path, line=line_no)
        description = record.get("description") or ""
        if not isinstance(description, str):
            raise ParseError("description must be a string", path=path, line=line_no)
        if item_id in items:
            raise ConflictError(f"{path}:{line_no}: duplicate item_id {item_id!r}",
                                details={"item_id": item_id, "line": line_no})
        items[item_id] = Item(
            item_id=item_id,
            title=title.strip(),
            description=description.strip(),
            brand=str(record.get("brand") or "").strip(),
            categories=_parse_categories(record.get("categories"), path, line_no),
        )
    logger.info(f"Loaded {len(items)} items from {path}")
    return ItemCatalog(items=items, sequences={})


def load_interactions(path: str, catalog: Optional[ItemCatalog] = None) -> InteractionLog:
    """Load interaction events; with a catalog, every item_id must resolve."""
    events: List[Interaction] = []
    for line_no, record in _read_jsonl(path):
        try:
            user_id = str(record["user_id"])
            item_id = str(record["item_id"])
            timestamp = record["timestamp"]
        except KeyError as e:
            raise ParseError(f"missing field {e.args[0]!r}", path=path, line=line_no) from None
        if isinstance(timestamp, bool) or not isinstance(timestamp, (int, float)) or timestamp != int(timestamp):
            raise ParseError("timestamp must be integer seconds", path=path, line=line_no)
        events.append(Interaction(user_id, item_id, int(timestamp), len(events)))

    if catalog is not None:
        unknown = sorted({e.item_id for e in events if e.item_id not in catalog.items})
        if unknown:
            raise CoverageError(f"Interactions reference {len(unknown)} unknown items: {unknown[:20]}",
                                missing=unknown)
    logger.info(f"Loaded {len(events)} interactions from {path}")
    return InteractionLog(events=events)


def _check_rows(rows: np.ndarray, path: str) -> None:
    finite = np.isfinite(rows).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(f"{path}: non-finite value in embedding row {bad}", details={"row": bad})


def _load_text_embeddings(path: str) -> EmbeddingMatrix:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ParseError("header must be 'n_items dim'", path=path, line=1)
        try:
            n_items, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("header must be 'n_items dim'", path=path, line=1) from None
        if dim <= 0:
            raise ParseError("dim must be positive", path=path, line=1)

        rows = np.empty((n_items, dim), dtype=np.float64)
        order: List[str] = []
        seen = set()
        for line_no, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(order) == n_items:
                raise ParseError(f"more than {n_items} rows", path=path, line=line_no)
            if len(parts) != dim + 1:
                raise ParseError(f"expected {dim} values, got {len(parts) - 1}", path=path, line=line_no)
            item_id = parts[0]
            if item_id in seen:
                raise ConflictError(f"{path}:{line_no}: duplicate embedding id {item_id!r}")
            try:
                rows[len(order)] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric value", path=path, line=line_no) from None
            seen.add(item_id)
            order.append(item_id)
    if len(order) != n_items:
        raise ParseError(f"header declares {n_items} rows, found {len(order)}", path=path)
    return EmbeddingMatrix(rows=rows, item_order=order)


def _load_binary_embeddings(path: str, catalog: ItemCatalog) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        magic, n_items, dim = _HEADER.unpack(f.read(_HEADER.size))
        payload = f.read()
    if magic != EMBEDDING_MAGIC or dim == 0:
        raise ParseError("bad binary embedding header", path=path)
    if len(payload) != n_items * dim * 4:
        raise ParseError(f"payload holds {len(payload)} bytes, expected {n_items * dim * 4}", path=path)
    rows = np.frombuffer(payload, dtype="<f4").reshape(n_items, dim).astype(np.float64)

    ids_path = path + ".ids"
    if os.path.exists(ids_path):
        with open(ids_path, "r", encoding="utf-8") as f:
            order = [line.strip() for line in f if line.strip()]
    else:
        order = list(catalog.items)
    if len(order) != n_items:
        raise ParseError(f"{n_items} rows but {len(order)} item ids", path=path)
    if len(set(order)) != len(order):
        raise ConflictError(f"{path}: duplicate ids in embedding row order")
    return EmbeddingMatrix(rows=rows, item_order=order)


def load_embeddings(path: str, catalog: ItemCatalog) -> EmbeddingMatrix:
    """Load dense item embeddings (text or binary) and check catalog coverage."""
    with open(path, "rb") as f:
        is_binary = f.read(len(EMBEDDING_MAGIC)) == EMBEDDING_MAGIC
    matrix = _load_binary_embeddings(path, catalog) if is_binary else _load_text_embeddings(path)

    _check_rows(matrix.rows, path)
    missing = sorted(set(catalog.items) - set(matrix.item_order))
    if missing:
        raise CoverageError(f"{path}: no embedding for {len(missing)} items: {missing[:20]}", missing=missing)
    logger.info(f"Loaded {matrix.n_items}x{matrix.dim} embeddings from {path}")
    return matrix


def write_embeddings_text(path: str, matrix: EmbeddingMatrix) -> None:
    """Write the text embedding format."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{matrix.n_items} {matrix.dim}\n")
        for item_id, row in zip(matrix.item_order, matrix.rows):
            f.write(item_id + " " + " ".join(repr(float(v)) for v in row) + "\n")


def write_embeddings_binary(path: str, matrix: EmbeddingMatrix) -> None:
    """Write the binary embedding format plus its ``.ids`` sidecar."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, matrix.n_items, matrix.dim))
        f.write(np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes())
    with open(path + ".ids", "w", encoding="utf-8") as f:
        f.write("".join(f"{item_id}\n" for item_id in matrix.item_order))


def _item_record(item: Item) -> dict:
    record = {"item_id": item.item_id, "title": item.title, "description": item.description}
    if item.brand:
        record["brand"] = item.brand
    if item.categories:
        record["categories"] = list(item.categories)
    return record


def write_catalog(path: str, catalog: ItemCatalog) -> None:
    """Write items (lexicographic id order) as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for item_id in catalog.item_ids():
            f.write(json.dumps(_item_record(catalog.items[item_id]), ensure_ascii=False) + "\n")


def write_interactions(path: str, events: Iterable[Tuple[str, str, int]]) -> None:
    """Write (user_id, item_id, timestamp) triples as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for user_id, item_id, timestamp in events:
            f.write(json.dumps({"user_id": user_id, "item_id": item_id, "timestamp": int(timestamp)}) + "\n")


def write_sequences(path: str, catalog: ItemCatalog) -> None:
    """Write per-user chronological sequences as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for user_id in catalog.user_ids():
            f.write(json.dumps({"user_id": user_id, "items": catalog.sequences[user_id]}, ensure_ascii=False) + "\n")


def load_filtered_catalog(catalog_path: str, sequences_path: str) -> ItemCatalog:
    """Read a catalog plus its sequences as written by the quantize stage."""
    catalog = load_catalog(catalog_path)
    sequences: Dict[str, List[str]] = {}
    for line_no, record in _read_jsonl(sequences_path):
        try:
            sequences[str(record["user_id"])] = [str(i) for i in record["items"]]
        except KeyError as e:
            raise ParseError(f"missing field {e.args[0]!r}", path=sequences_path, line=line_no) from None
    return ItemCatalog(items=catalog.items, sequences=sequences)
