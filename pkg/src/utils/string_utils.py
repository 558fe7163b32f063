"""
String utility functions.
"""
import re
from typing import Iterable, List

_WORD = re.compile(r"[a-z0-9]+")
# SID tokens stay whole; other text splits into words and single punctuation marks
_PIECE = re.compile(r"<[a-z]_[0-9]+>|\w+|[^\w\s]")
_WHITESPACE = re.compile(r"\s+")


def alnum_words(text: str) -> List[str]:
    """
    Split text into lowercased alphanumeric words.

    Args:
        text: Raw text

    Returns:
        Words in order of appearance
    """
    if not text or not isinstance(text, str):
        return []
    return _WORD.findall(text.lower())


def collapse_whitespace(text: str) -> str:
    """Lowercase, trim and collapse runs of whitespace to single spaces."""
    if not text or not isinstance(text, str):
        return ""
    return _WHITESPACE.sub(" ", text.lower()).strip()


def normalize_keywords(keywords: Iterable[str]) -> List[str]:
    """
    Lowercase, trim and deduplicate keywords, keeping first-seen order.

    Args:
        keywords: Raw keyword strings

    Returns:
        Clean keyword list with no empty strings and no duplicates
    """
    seen = set()
    result = []
    for keyword in keywords or []:
        if not isinstance(keyword, str):
            continue
        clean = collapse_whitespace(keyword)
        if clean and clean not in seen:
            seen.add(clean)
            result.append(clean)
    return result


def truncate_string(text: str, max_length: int = 100) -> str:
    """
    Truncate string to maximum length.

    Args:
        text: String to truncate
        max_length: Maximum allowed length

    Returns:
        Truncated string
    """
    if not text or not isinstance(text, str):
        return ""

    if len(text) <= max_length:
        return text

    return text[:max_length-3] + "..."


def split_words(text: str) -> List[str]:
    """Lowercased word, punctuation and SID-token pieces of ``text``."""
    if not text or not isinstance(text, str):
        return []
    return _PIECE.findall(text.lower())
