"""
Synthetic Data Service.
Seeded catalog, interaction log, item embeddings and word vectors with a
planted category structure, plus a ready-to-run config for the desk run.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from src.config.settings import PipelineConfig
from src.repositories.catalog_repository import (EmbeddingMatrix, Item, ItemCatalog, write_catalog,
                                                 write_embeddings_text, write_interactions)
from src.services.init_service import EmbeddingTable, write_embedding_table
from src.utils.string_utils import split_words

logger = logging.getLogger(__name__)

_STREAM = 401

# name, descriptors, kinds
CATEGORY_LEXICON: Tuple[Tuple[str, Tuple[str, ...], Tuple[str, ...]], ...] = (
    ("camping", ("waterproof", "lightweight", "outdoor", "rugged", "portable", "insulated"),
     ("tent", "lantern", "backpack", "stove")),
    ("kitchen", ("nonstick", "stainless", "dishwasher", "ceramic", "heatproof", "compact"),
     ("skillet", "kettle", "knife", "blender")),
    ("audio", ("wireless", "stereo", "bass", "noise", "bluetooth", "rechargeable"),
     ("headphones", "speaker", "earbuds", "amplifier")),
    ("fitness", ("adjustable", "ergonomic", "durable", "grip", "cardio", "foldable"),
     ("dumbbell", "treadmill", "mat", "bands")),
    ("garden", ("organic", "weatherproof", "galvanized", "hose", "pruning", "seedling"),
     ("shears", "planter", "sprinkler", "trowel")),
    ("office", ("ergonomic", "magnetic", "recycled", "archival", "desktop", "stackable"),
     ("stapler", "organizer", "notebook", "lamp")),
    ("pets", ("chewproof", "washable", "calming", "orthopedic", "leakproof", "catnip"),
     ("leash", "bed", "feeder", "toy")),
    ("beauty", ("hydrating", "fragrance", "gentle", "vegan", "matte", "soothing"),
     ("serum", "brush", "cream", "palette")),
    ("travel", ("carryon", "spinner", "tsa", "packable", "antitheft", "expandable"),
     ("suitcase", "pillow", "adapter", "wallet")),
    ("gaming", ("mechanical", "rgb", "wired", "console", "precision", "tournament"),
     ("keyboard", "mouse", "controller", "headset")),
    ("baby", ("hypoallergenic", "soft", "bpa", "convertible", "newborn", "swaddle"),
     ("stroller", "bottle", "blanket", "monitor")),
    ("tools", ("cordless", "torque", "magnetic", "heavy", "precision", "impact"),
     ("drill", "wrench", "saw", "screwdriver")),
)
BRANDS = ("acme", "northwind", "contoso", "globex", "initech", "umbrella", "stark", "wayne",
          "vandelay", "hooli", "soylent", "wonka")
FILLER_WORDS = ("a", "an", "and", "for", "with", "the", "of", "use", "features", "everyday", "quality", "design")


@dataclass
class SyntheticData:
    catalog: ItemCatalog
    events: List[Tuple[str, str, int]]
    embeddings: EmbeddingMatrix
    table: EmbeddingTable
    item_category: Dict[str, int]


def _items(cfg: PipelineConfig, rng: np.random.Generator):
    n_cat = min(cfg.synth.categories, len(CATEGORY_LEXICON))
    items: Dict[str, Item] = {}
    placement: Dict[str, Tuple[int, int]] = {}
    width = len(str(cfg.synth.items))
    for index in range(cfg.synth.items):
        category = index % n_cat
        name, descriptors, kinds = CATEGORY_LEXICON[category]
        kind = int(rng.integers(len(kinds)))
        first, second, third = rng.choice(len(descriptors), size=3, replace=False)
        brand = BRANDS[int(rng.integers(len(BRANDS)))]
        item_id = f"I{index:0{width}d}"
        items[item_id] = Item(
            item_id=item_id,
            title=f"{brand} {descriptors[first]} {kinds[kind]} {index}",
            description=(f"a {descriptors[first]} {kinds[kind]} for {name} use with "
                         f"{descriptors[second]} and {descriptors[third]} features"),
            brand=brand,
            categories=(name, kinds[kind]),
        )
        placement[item_id] = (category, kind)
    return items, placement, n_cat


def _item_embeddings(items, placement, n_cat: int, cfg: PipelineConfig, rng: np.random.Generator) -> EmbeddingMatrix:
    dim = cfg.synth.dim
    centers = rng.standard_normal((n_cat, dim))
    kind_offsets = rng.standard_normal((n_cat, 4, dim)) * 0.6
    order = sorted(items)
    rows = np.empty((len(order), dim))
    for row, item_id in enumerate(order):
        category, kind = placement[item_id]
        rows[row] = centers[category] + kind_offsets[category, kind] + cfg.synth.noise * rng.standard_normal(dim)
    return EmbeddingMatrix(rows=rows, item_order=order)


def _sequences(items, placement, n_cat: int, cfg: PipelineConfig, rng: np.random.Generator):
    """Users favour one category; inside it popularity is Zipf-like and kinds tend to repeat."""
    order = sorted(items)
    by_category: Dict[int, List[str]] = {c: [] for c in range(n_cat)}
    for item_id in order:
        by_category[placement[item_id][0]].append(item_id)
    popularity = {item_id: 1.0 / (1 + by_category[placement[item_id][0]].index(item_id)) for item_id in order}

    events: List[Tuple[str, str, int]] = []
    width = len(str(cfg.synth.users))
    for user in range(cfg.synth.users):
        user_id = f"U{user:0{width}d}"
        favourite = int(rng.integers(n_cat))
        length = int(rng.integers(cfg.synth.min_seq, cfg.synth.max_seq + 1))
        seen: List[str] = []
        last_kind = None
        for step in range(length):
            focused = rng.random() < cfg.synth.focus
            pool = [i for i in (by_category[favourite] if focused else order) if i not in seen]
            if not pool:
                pool = [i for i in order if i not in seen]
            weights = np.array([popularity[i] * (2.0 if placement[i][1] == last_kind else 1.0) for i in pool])
            choice = pool[int(rng.choice(len(pool), p=weights / weights.sum()))]
            seen.append(choice)
            last_kind = placement[choice][1]
            events.append((user_id, choice, 1_600_000_000 + user * 100_000 + step * 3600))
    return events


def _word_table(items, placement, n_cat: int, cfg: PipelineConfig, rng: np.random.Generator) -> EmbeddingTable:
    """Category words lie near a per-category direction; other words are isotropic noise."""
    dim = cfg.model.dim
    scale = 1.0 / np.sqrt(dim)
    directions = rng.standard_normal((n_cat, dim)) * scale
    vectors: Dict[str, np.ndarray] = {}
    for category in range(n_cat):
        name, descriptors, kinds = CATEGORY_LEXICON[category]
        for word in (name,) + descriptors + kinds:
            if word not in vectors:
                vectors[word] = directions[category] + 0.3 * scale * rng.standard_normal(dim)
    vocabulary = set(FILLER_WORDS) | set(BRANDS)
    for item in items.values():
        vocabulary.update(split_words(item.title + " " + item.description))
    for word in sorted(vocabulary):
        if word not in vectors:
            vectors[word] = 0.5 * scale * rng.standard_normal(dim)
    words = sorted(vectors)
    return EmbeddingTable(vocab_words={w: i for i, w in enumerate(words)},
                          matrix=np.vstack([vectors[w] for w in words]))


def generate(cfg: PipelineConfig) -> SyntheticData:
    """All synthetic inputs for ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, _STREAM])
    items, placement, n_cat = _items(cfg, rng)
    embeddings = _item_embeddings(items, placement, n_cat, cfg, rng)
    events = _sequences(items, placement, n_cat, cfg, rng)
    table = _word_table(items, placement, n_cat, cfg, rng)
    logger.info(f"Synthesized {len(items)} items in {n_cat} categories, {cfg.synth.users} users, "
                f"{len(events)} interactions, {len(table)}x{table.dim} word table")
    return SyntheticData(catalog=ItemCatalog(items=items), events=events, embeddings=embeddings, table=table,
                         item_category={i: placement[i][0] for i in items})


def desk_config(cfg: PipelineConfig, out_dir: str) -> Dict[str, str]:
    """Config values sized for a minutes-scale CPU run over the synthetic data."""
    return {
        "SEED": str(cfg.seed),
        "PATHS_CATALOG": os.path.join(out_dir, "catalog.jsonl"),
        "PATHS_INTERACTIONS": os.path.join(out_dir, "interactions.jsonl"),
        "PATHS_EMBEDDINGS": os.path.join(out_dir, "embeddings.txt"),
        "PATHS_EMBEDDING_TABLE": os.path.join(out_dir, "word_vectors.txt"),
        "PATHS_WORKDIR": os.path.join(out_dir, "work"),
        "CATALOG_MIN_COUNT": "5",
        "QUANTIZER_LEVELS": "3",
        "QUANTIZER_CODES_PER_LEVEL": "8,16,16",
        "EXTRACTOR_BACKEND": "local",
        "INIT_PLAN": "semantic,semantic,semantic",
        "CORPUS_MAX_HIST": "20",
        "MODEL_DIM": str(cfg.model.dim),
        "MODEL_LAYERS": "2",
        "MODEL_HEADS": "4",
        "MODEL_MAX_SEQ": "160",
        "TRAIN_LR": "0.001",
        "TRAIN_STEPS": "1500",
        "TRAIN_BATCH_SIZE": "32",
        "TRAIN_EVAL_INTERVAL": "50",
        "TRAIN_EVAL_USERS": "100",
        "EVAL_BEAM_WIDTH": "20",
        "EVAL_PROBE_ITEMS": "100",
    }


def write_synthetic(cfg: PipelineConfig) -> Dict[str, str]:
    """Write the synthetic inputs and ``pipeline.env`` into SYNTH_OUT_DIR; returns the written paths."""
    out_dir = cfg.synth.out_dir
    os.makedirs(out_dir, exist_ok=True)
    data = generate(cfg)
    paths = desk_config(cfg, out_dir)
    write_catalog(paths["PATHS_CATALOG"], data.catalog)
    write_interactions(paths["PATHS_INTERACTIONS"], data.events)
    write_embeddings_text(paths["PATHS_EMBEDDINGS"], data.embeddings)
    write_embedding_table(paths["PATHS_EMBEDDING_TABLE"], data.table)
    env_path = os.path.join(out_dir, "pipeline.env")
    with open(env_path, "w", encoding="utf-8") as f:
        f.write("# Desk-scale run over synthetic data\n")
        for key, value in paths.items():
            f.write(f"{key}={value}\n")
    logger.info(f"Synthetic data written to {out_dir}; run with --config {env_path}")
    return {
        "catalog": paths["PATHS_CATALOG"],
        "interactions": paths["PATHS_INTERACTIONS"],
        "embeddings": paths["PATHS_EMBEDDINGS"],
        "embedding_table": paths["PATHS_EMBEDDING_TABLE"],
        "config": env_path,
    }
