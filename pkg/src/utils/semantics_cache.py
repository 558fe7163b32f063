"""
Token Semantics Cache.
Disk-backed cache of extraction results with an in-memory LRU front, so
repeated runs never pay for the same remote call twice.
"""
import hashlib
import json
import logging
import os
import tempfile
import threading
from typing import Any, Dict, Iterable, Optional

from cachetools import LRUCache

logger = logging.getLogger(__name__)


def member_hash(members: Iterable[str]) -> str:
    """Order-independent digest of a cluster's member ids."""
    digest = hashlib.sha256()
    for item_id in sorted(members):
        digest.update(item_id.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()


class SemanticsCache:
    """Caches extraction results keyed by (token, member-set hash, backend)."""

    def __init__(self, cache_dir: str, max_size: int = 4096):
        self.cache_dir = cache_dir
        os.makedirs(cache_dir, exist_ok=True)
        self._memory: LRUCache = LRUCache(maxsize=max_size)
        self.lock = threading.RLock()
        self.metrics = {"hits": 0, "misses": 0, "writes": 0}

    def _generate_key(self, token: str, members_digest: str, backend: str) -> str:
        """Generate cache key from token, members and backend identity."""
        blob = f"{token}|{members_digest}|{backend}"
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> str:
        return os.path.join(self.cache_dir, key[:2], f"{key}.json")

    def get(self, token: str, members_digest: str, backend: str) -> Optional[Dict[str, Any]]:
        """Get cached result if available."""
        key = self._generate_key(token, members_digest, backend)
        with self.lock:
            if key in self._memory:
                self.metrics["hits"] += 1
                return dict(self._memory[key])

        path = self._path(key)
        if os.path.exists(path):
            try:
                with open(path, "r", encoding="utf-8") as f:
                    record = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"Ignoring unreadable cache entry {path}: {e}")
            else:
                with self.lock:
                    self._memory[key] = record
                    self.metrics["hits"] += 1
                logger.debug(f"Cache HIT for {token}")
                return dict(record)

        with self.lock:
            self.metrics["misses"] += 1
        logger.debug(f"Cache MISS for {token}")
        return None

    def put(self, token: str, members_digest: str, backend: str, result: Dict[str, Any]) -> None:
        """Cache the result; the file appears atomically or not at all."""
        key = self._generate_key(token, members_digest, backend)
        path = self._path(key)
        os.makedirs(os.path.dirname(path), exist_ok=True)

        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(result, f, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise

        with self.lock:
            self._memory[key] = dict(result)
            self.metrics["writes"] += 1

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics."""
        with self.lock:
            lookups = self.metrics["hits"] + self.metrics["misses"]
            return {
                **self.metrics,
                "memory_size": len(self._memory),
                "hit_rate": self.metrics["hits"] / max(lookups, 1),
            }
