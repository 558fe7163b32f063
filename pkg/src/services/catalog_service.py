"""
Catalog Service.
Applies the minimum-interaction filter and builds chronological user sequences.
"""
import logging
from collections import Counter
from typing import Dict, List

from src.exceptions.base import ContractViolation
from src.repositories.catalog_repository import Interaction, InteractionLog, ItemCatalog

logger = logging.getLogger(__name__)


def filter_and_sequence(log: InteractionLog, catalog: ItemCatalog, min_count: int = 5) -> ItemCatalog:
    """
    Drop users and items with fewer than ``min_count`` interactions, repeating
    until nothing else drops, then sort each user's events into a sequence.

    Args:
        log: Interaction events
        catalog: Item metadata
        min_count: Minimum interactions per user and per item

    Returns:
        Catalog restricted to surviving items, with per-user sequences
    """
    if min_count < 1:
        raise ContractViolation(f"min_count must be >= 1, got {min_count}")

    events: List[Interaction] = [e for e in log.events if e.item_id in catalog.items]
    rounds = 0
    while True:
        rounds += 1
        user_counts = Counter(e.user_id for e in events)
        item_counts = Counter(e.item_id for e in events)
        kept = [e for e in events
                if user_counts[e.user_id] >= min_count and item_counts[e.item_id] >= min_count]
        if len(kept) == len(events):
            break
        events = kept

    sequences: Dict[str, List[str]] = {}
    # Ties on timestamp fall back to input order
    for event in sorted(events, key=lambda e: (e.user_id, e.timestamp, e.order)):
        sequences.setdefault(event.user_id, []).append(event.item_id)

    surviving = {e.item_id for e in events}
    items = {item_id: item for item_id, item in catalog.items.items() if item_id in surviving}
    logger.info(
        f"Filtered to {len(sequences)} users and {len(items)} items "
        f"({len(events)} interactions, {rounds} rounds, min_count={min_count})"
    )
    return ItemCatalog(items=items, sequences=sequences)


def sequences_as_log(catalog: ItemCatalog) -> InteractionLog:
    """Re-express a sequenced catalog as an interaction log with synthetic timestamps."""
    events: List[Interaction] = []
    for user_id in catalog.user_ids():
        for position, item_id in enumerate(catalog.sequences[user_id]):
            events.append(Interaction(user_id, item_id, position, len(events)))
    return InteractionLog(events=events)
