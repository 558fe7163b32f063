import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.config.settings import ModelConfig, PipelineConfig  # noqa: E402
from src.repositories.catalog_repository import Item, ItemCatalog  # noqa: E402
from src.services.model_service import build_model  # noqa: E402
from src.services.sid_service import Vocabulary, build_trie, format_token  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def make_catalog(n_items=6, sequences=None, descriptions=True):
    items = {}
    for i in range(n_items):
        item_id = f"i{i}"
        items[item_id] = Item(
            item_id=item_id,
            title=f"red widget {i}",
            description=f"a sturdy widget number {i}" if descriptions else "",
            brand="acme" if i % 2 == 0 else "",
            categories=("tools",) if i % 3 == 0 else (),
        )
    return ItemCatalog(items=items, sequences=sequences or {})


def grid_sids(shape=(2, 2, 2)):
    """One item per tuple of a full product grid."""
    tuples = [tuple(int(c) for c in idx) for idx in np.ndindex(*shape)]
    return {f"i{n:03d}": t for n, t in enumerate(tuples)}


def sid_tokens_for(shape):
    return [format_token(level, code) for level, k in enumerate(shape) for code in range(k)]


def tiny_model(vocab_size, dim=16, layers=1, heads=2, max_seq=32, seed=3, tie=True):
    return build_model(ModelConfig(dim=dim, layers=layers, heads=heads, ffn_mult=2.0, max_seq=max_seq,
                                   vocab_size=vocab_size, tie_embeddings=tie, dropout=0.0, seed=seed))


@pytest.fixture
def catalog():
    return make_catalog()


@pytest.fixture
def grid():
    shape = (2, 2, 2)
    sids = grid_sids(shape)
    vocab = Vocabulary.build(["which", "item", "has", "the", "title", ":", "?"], sid_tokens_for(shape))
    return sids, build_trie(sids), vocab


@pytest.fixture
def golden():
    def read(name):
        with open(os.path.join(FIXTURES, name), "r", encoding="utf-8") as f:
            return f.read()
    return read


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def tiny_pipeline_config(tmp_path):
    """Small synthetic run that trains in seconds."""
    def build(**extra):
        values = {
            "SEED": "7",
            "SYNTH_OUT_DIR": str(tmp_path / "data"),
            "SYNTH_ITEMS": "48",
            "SYNTH_USERS": "60",
            "SYNTH_CATEGORIES": "4",
            "SYNTH_DIM": "8",
            "SYNTH_MIN_SEQ": "6",
            "SYNTH_MAX_SEQ": "8",
            "PATHS_CATALOG": str(tmp_path / "data" / "catalog.jsonl"),
            "PATHS_INTERACTIONS": str(tmp_path / "data" / "interactions.jsonl"),
            "PATHS_EMBEDDINGS": str(tmp_path / "data" / "embeddings.txt"),
            "PATHS_EMBEDDING_TABLE": str(tmp_path / "data" / "word_vectors.txt"),
            "PATHS_WORKDIR": str(tmp_path / "work"),
            "CATALOG_MIN_COUNT": "2",
            "QUANTIZER_CODES_PER_LEVEL": "4,4,16",
            "QUANTIZER_MAX_ITERS": "20",
            "CORPUS_MAX_HIST": "5",
            "MODEL_DIM": "16",
            "MODEL_LAYERS": "1",
            "MODEL_HEADS": "2",
            "MODEL_MAX_SEQ": "96",
            "TRAIN_STEPS": "6",
            "TRAIN_BATCH_SIZE": "8",
            "TRAIN_EVAL_INTERVAL": "3",
            "TRAIN_EVAL_EXAMPLES": "16",
            "TRAIN_EVAL_USERS": "5",
            "TRAIN_HR_BEAM": "4",
            "EVAL_BEAM_WIDTH": "5",
            "EVAL_PROBE_WIDTH": "2",
            "EVAL_PROBE_ITEMS": "4",
            "EVAL_MAX_TITLE_TOKENS": "8",
        }
        values.update({k: str(v) for k, v in extra.items()})
        return PipelineConfig.from_mapping(values)
    return build
