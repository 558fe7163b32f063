"""
Extractor Service.
Builds per-token item clusters and turns each into a description and a
keyword list, either through a remote LLM or a local TF-IDF backend.
"""
import hashlib
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from src.config.settings import ExtractorConfig
from src.exceptions.base import ContractViolation, ExtractionError
from src.repositories.artifact_repository import read_jsonl, write_jsonl
from src.repositories.catalog_repository import ItemCatalog
from src.services.sid_service import SidTuple, Vocabulary, format_token
from src.utils.prompt_templates import templates
from src.utils.semantics_cache import SemanticsCache, member_hash
from src.utils.string_utils import alnum_words, normalize_keywords

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenCluster:
    token: str
    member_items: Tuple[str, ...] = ()
    sample: Tuple[str, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.member_items


@dataclass(frozen=True)
class TokenSemantics:
    token: str
    description: str
    keywords: List[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"token": self.token, "description": self.description, "keywords": list(self.keywords)}


def build_token_clusters(sids: Dict[str, SidTuple], vocab: Vocabulary) -> List[TokenCluster]:
    """One cluster per SID token: every item whose tuple holds the token at any level."""
    members: Dict[str, List[str]] = {token: [] for token in vocab.sid_tokens}
    for item_id, sid in sids.items():
        for level, code in enumerate(sid):
            token = format_token(level, code)
            if token not in members:
                raise ContractViolation(f"SID of {item_id} uses {token}, which is not in the vocabulary")
            members[token].append(item_id)
    return [TokenCluster(token=token, member_items=tuple(sorted(members[token]))) for token in vocab.sid_tokens]


def _token_stream(token: str) -> int:
    return int(hashlib.sha256(token.encode("utf-8")).hexdigest()[:8], 16)


def sample_cluster(cluster: TokenCluster, cap: int, seed: int) -> List[str]:
    """Seeded uniform sample of min(cap, |members|) members, in id order."""
    if cap < 1:
        raise ContractViolation(f"sample cap must be >= 1, got {cap}")
    members = sorted(cluster.member_items)
    if len(members) <= cap:
        return members
    rng = np.random.default_rng([seed, _token_stream(cluster.token)])
    chosen = rng.choice(len(members), size=cap, replace=False)
    return [members[i] for i in sorted(chosen)]


def _prompt_category(item_ids: Sequence[str], catalog: ItemCatalog, default: str) -> str:
    counts = Counter(c for item_id in item_ids for c in catalog.items[item_id].categories)
    if not counts:
        return default
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def render_extraction_prompt(item_ids: Sequence[str], catalog: ItemCatalog, default_category: str) -> str:
    """Extraction prompt over the given items; brand/categories only when present."""
    blocks = []
    for index, item_id in enumerate(item_ids, start=1):
        item = catalog.items[item_id]
        lines = [templates.extraction("item_block", index=index, title=item.title, description=item.description)]
        if item.brand:
            lines.append(templates.extraction("item_brand", brand=item.brand))
        if item.categories:
            lines.append(templates.extraction("item_categories", categories=", ".join(item.categories)))
        blocks.append("\n".join(lines))
    return templates.extraction(
        "semantic_extraction",
        category=_prompt_category(item_ids, catalog, default_category),
        items="\n\n".join(blocks),
    )


class LocalKeywordExtractor:
    """TF-IDF keywords with idf fitted over the whole catalog."""

    def __init__(self, catalog: ItemCatalog, top_terms: int = 15):
        self.catalog = catalog
        self.top_terms = top_terms
        self.vectorizer = TfidfVectorizer(analyzer=alnum_words)
        self.vectorizer.fit([catalog.items[i].text() for i in catalog.item_ids()] or [""])
        self.terms = self.vectorizer.get_feature_names_out()

    def keywords(self, item_ids: Sequence[str]) -> List[str]:
        document = " ".join(self.catalog.items[i].text() for i in sorted(item_ids))
        scores = self.vectorizer.transform([document]).toarray()[0]
        ranked = sorted((i for i in np.flatnonzero(scores > 0)), key=lambda i: (-scores[i], self.terms[i]))
        return [str(self.terms[i]) for i in ranked[:self.top_terms]]

    def extract(self, cluster: TokenCluster) -> Dict[str, object]:
        keywords = normalize_keywords(self.keywords(cluster.member_items))
        if keywords:
            description = templates.extraction("local_description", keywords=", ".join(keywords))
        else:
            titles = ", ".join(self.catalog.items[i].title for i in sorted(cluster.member_items)[:5])
            description = templates.extraction("local_description", keywords=titles)
        return {"description": description, "keywords": keywords}


class SemanticExtractor:
    """Runs extraction over token clusters with caching, fallback and bounded concurrency."""

    def __init__(self, catalog: ItemCatalog, cfg: ExtractorConfig, cache_dir: Optional[str] = None,
                 client=None):
        self.catalog = catalog
        self.cfg = cfg
        self.local = LocalKeywordExtractor(catalog, cfg.top_terms)
        self.cache = SemanticsCache(cache_dir) if cache_dir else None
        # Local keywords depend on idf over the whole catalog
        corpus = "\n".join(catalog.items[i].text() for i in catalog.item_ids())
        self._catalog_digest = hashlib.sha256(corpus.encode("utf-8")).hexdigest()[:16]
        if cfg.backend == "remote" and self.cache is None:
            raise ContractViolation("the remote extractor requires a cache directory")

        self.client = client
        if cfg.backend == "remote" and self.client is None:
            from src.services.semantic_api_service import SemanticAPIService
            self.client = SemanticAPIService(cfg)
        self.stats = {"extracted": 0, "skipped_empty": 0, "fallbacks": 0}
        self.lock = threading.Lock()
        self.fallback_tokens: List[str] = []

    def _backend_key(self, backend: str) -> str:
        if backend == "local":
            return f"local:top{self.cfg.top_terms}:{self._catalog_digest}"
        return f"remote:{self.cfg.endpoint}:{self.cfg.model}:cap{self.cfg.sample_cap}:seed{self.cfg.seed}"

    def _cached(self, backend: str, cluster: TokenCluster, compute) -> Dict[str, object]:
        if self.cache is None:
            return compute()
        digest = member_hash(cluster.member_items)
        key = self._backend_key(backend)
        hit = self.cache.get(cluster.token, digest, key)
        if hit is not None:
            return hit
        result = compute()
        self.cache.put(cluster.token, digest, key, result)
        return result

    def _remote(self, cluster: TokenCluster) -> Dict[str, object]:
        sample = cluster.sample or tuple(sample_cluster(cluster, self.cfg.sample_cap, self.cfg.seed))
        prompt = render_extraction_prompt(sample, self.catalog, self.cfg.category)
        return self.client.extract(prompt, token=cluster.token)

    def extract(self, cluster: TokenCluster) -> Optional[TokenSemantics]:
        """Semantics for one cluster, or None when the cluster is empty."""
        if cluster.is_empty:
            logger.warning(f"Skipping {cluster.token}: empty cluster")
            with self.lock:
                self.stats["skipped_empty"] += 1
            return None

        if self.cfg.backend == "remote":
            try:
                result = self._cached("remote", cluster, lambda: self._remote(cluster))
            except ExtractionError:
                if not self.cfg.fallback_local:
                    raise
                logger.warning(f"Falling back to local keywords for {cluster.token}")
                with self.lock:
                    self.stats["fallbacks"] += 1
                    self.fallback_tokens.append(cluster.token)
                result = self._cached("local", cluster, lambda: self.local.extract(cluster))
        else:
            result = self._cached("local", cluster, lambda: self.local.extract(cluster))

        with self.lock:
            self.stats["extracted"] += 1
        return TokenSemantics(
            token=cluster.token,
            description=str(result["description"]),
            keywords=normalize_keywords(result["keywords"]),
        )

    def extract_all(self, clusters: Sequence[TokenCluster]) -> List[TokenSemantics]:
        """Extract every cluster; output order follows ``clusters``."""
        workers = self.cfg.max_in_flight if self.cfg.backend == "remote" else 1
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Extractor") as executor:
                results = list(executor.map(self.extract, clusters))
        else:
            results = [self.extract(cluster) for cluster in clusters]
        semantics = [r for r in results if r is not None]
        logger.info(f"Extracted semantics for {len(semantics)}/{len(clusters)} tokens "
                    f"({self.stats['fallbacks']} fallbacks, {self.stats['skipped_empty']} empty)")
        return semantics

    def report(self) -> dict:
        report = {**self.stats, "backend": self.cfg.backend, "fallback_tokens": sorted(self.fallback_tokens)}
        if self.cache is not None:
            cache_stats = self.cache.get_stats()
            report.update({"cache_hits": cache_stats["hits"], "cache_misses": cache_stats["misses"]})
        return report


def extract_semantics(cluster: TokenCluster, catalog: ItemCatalog, cfg: ExtractorConfig,
                      cache_dir: Optional[str] = None, client=None) -> Optional[TokenSemantics]:
    """One-off extraction for a single cluster."""
    return SemanticExtractor(catalog, cfg, cache_dir=cache_dir, client=client).extract(cluster)


def write_semantics(path, semantics: Sequence[TokenSemantics]) -> int:
    return write_jsonl(path, (s.to_record() for s in semantics))


def read_semantics(path) -> List[TokenSemantics]:
    return [TokenSemantics(token=r["token"], description=r["description"], keywords=list(r["keywords"]))
            for r in read_jsonl(path)]
