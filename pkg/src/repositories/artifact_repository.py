"""
Artifact Repository.
Stage directories, manifests and every on-disk format the pipeline produces.
"""
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.exceptions.base import ArtifactMismatchError, ParseError, PrerequisiteError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CHECKPOINT_MAGIC = b"RECCKPT1"
_LENGTH = struct.Struct("<Q")


class Workspace:
    """Resolves stage directories under a workdir, with optional shared upstream roots."""

    def __init__(self, root, shared: Optional[Mapping[str, Path]] = None):
        self.root = Path(root)
        self.shared = {stage: Path(path) for stage, path in (shared or {}).items()}

    def stage_dir(self, stage: str, create: bool = False) -> Path:
        path = self.shared.get(stage, self.root / stage)
        if create:
            path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, stage: str, name: str) -> Path:
        return self.stage_dir(stage) / name


def write_json(path, payload: Any) -> None:
    """Pretty JSON with sorted keys and a trailing newline."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path, records: Iterable[Mapping[str, Any]]) -> int:
    """One compact JSON object per line, key order preserved. Returns the row count."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl(path) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", path=str(path), line=line_no) from None


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_manifest(workspace: Workspace, stage: str, config_hash: str, files: Sequence[str],
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """Record what a stage produced and under which config hash."""
    manifest = {"stage": stage, "config_hash": config_hash, "files": sorted(files)}
    if extra:
        manifest.update(extra)
    path = workspace.stage_dir(stage, create=True) / MANIFEST
    write_json(path, manifest)
    logger.debug(f"Wrote manifest for {stage} ({config_hash[:12]})")
    return path


def require_stage(workspace: Workspace, stage: str, expected_hash: str, subcommand: Optional[str] = None) -> dict:
    """
    Load an upstream stage's manifest and check it matches the current config.

    Raises:
        PrerequisiteError: stage has not been run
        ArtifactMismatchError: stage was run with a different configuration
    """
    subcommand = subcommand or stage
    path = workspace.stage_dir(stage) / MANIFEST
    if not path.exists():
        raise PrerequisiteError(f"Missing {stage} artifacts in {path.parent}; run `{subcommand}` first",
                                prerequisite=subcommand)
    manifest = read_json(path)
    if manifest.get("config_hash") != expected_hash:
        raise ArtifactMismatchError(
            f"{stage} artifacts in {path.parent} were built with a different config; re-run `{subcommand}`",
            stage=stage,
            details={"found": manifest.get("config_hash"), "expected": expected_hash})
    for name in manifest.get("files", []):
        if not (path.parent / name).exists():
            raise PrerequisiteError(f"{stage} artifact {name} is missing; re-run `{subcommand}`",
                                    prerequisite=subcommand)
    return manifest


# ---------------------------------------------------------------------------
# Codebooks and other level-blocked float32 matrices
# ---------------------------------------------------------------------------

def write_blocks(path, blocks: Sequence[np.ndarray], seed: int) -> None:
    """Header "L d K_1 ... K_L seed", then the blocks as row-major <f4."""
    dim = int(blocks[0].shape[1]) if blocks else 0
    header = " ".join(str(v) for v in [len(blocks), dim] + [int(b.shape[0]) for b in blocks] + [int(seed)])
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        for block in blocks:
            if block.shape[1] != dim:
                raise ValueError("all blocks must share one column count")
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_blocks(path) -> Tuple[List[np.ndarray], int]:
    """Inverse of write_blocks; returns (blocks as float64, seed)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        payload = f.read()
    try:
        values = [int(v) for v in header]
    except ValueError:
        raise ParseError("malformed block header", path=str(path), line=1) from None
    if len(values) < 3 or len(values) != values[0] + 3:
        raise ParseError("block header must be 'L d K_1 ... K_L seed'", path=str(path), line=1)
    n_blocks, dim, counts, seed = values[0], values[1], values[2:-1], values[-1]
    expected = sum(counts) * dim * 4
    if len(payload) != expected:
        raise ParseError(f"payload holds {len(payload)} bytes, expected {expected}", path=str(path))

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    blocks, offset = [], 0
    for count in counts:
        blocks.append(flat[offset:offset + count * dim].reshape(count, dim).copy())
        offset += count * dim
    return blocks, seed


# ---------------------------------------------------------------------------
# SID map, vocabulary, codes
# ---------------------------------------------------------------------------

def write_sid_map(path, sid_strings: Mapping[str, str]) -> None:
    """Lines "item_id<TAB><a_i><b_j><c_k>" in item id order."""
    with open(path, "w", encoding="utf-8") as f:
        for item_id in sorted(sid_strings):
            f.write(f"{item_id}\t{sid_strings[item_id]}\n")


def read_sid_map(path) -> Dict[str, str]:
    result: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected item_id<TAB>sid", path=str(path), line=line_no)
            result[parts[0]] = parts[1]
    return result


def write_codes(path, item_order: Sequence[str], codes: np.ndarray) -> None:
    """Raw pre-collision codes, one item per line."""
    with open(path, "w", encoding="utf-8") as f:
        for item_id, row in zip(item_order, codes):
            f.write(item_id + "\t" + " ".join(str(int(c)) for c in row) + "\n")


def read_codes(path) -> Tuple[List[str], np.ndarray]:
    order, rows = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                item_id, codes = line.rstrip("\n").split("\t")
                rows.append([int(c) for c in codes.split()])
            except ValueError:
                raise ParseError("expected item_id<TAB>codes", path=str(path), line=line_no) from None
            order.append(item_id)
    return order, np.array(rows, dtype=np.int64)


def write_tokens(path, tokens: Sequence[str]) -> None:
    """One token per line; line number (from 0) is the id."""
    with open(path, "w", encoding="utf-8") as f:
        for token in tokens:
            f.write(token + "\n")


def read_tokens(path) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.rstrip("\n")]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, config: Mapping[str, Any], tensors: Mapping[str, np.ndarray],
                     meta: Optional[Mapping[str, Any]] = None) -> None:
    """
    Magic, length-prefixed JSON header (config, meta, tensor index), then each
    tensor as row-major <f4 in index order.
    """
    names = sorted(tensors)
    header = {
        "config": dict(config),
        "meta": dict(meta or {}),
        "tensors": [{"name": name, "shape": list(tensors[name].shape)} for name in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_LENGTH.pack(len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> Tuple[Dict[str, Any], Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns (config, meta, tensors)."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ParseError("not a checkpoint file", path=str(path))
        (length,) = _LENGTH.unpack(f.read(_LENGTH.size))
        header = json.loads(f.read(length).decode("utf-8"))
        tensors: Dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = f.read(count * 4)
            if len(data) != count * 4:
                raise ParseError(f"truncated tensor {entry['name']}", path=str(path))
            tensors[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return header["config"], header.get("meta", {}), tensors
