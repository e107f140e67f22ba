"""Keyword-based routing of medical questions into five service categories.

Incoming question text is normalized to lowercase word tokens, scored against
a per-category keyword lexicon, and routed to the best-matching category.
Category-specific prompt suffixes are then appended to a shared professional
base prompt.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path


class MedicalCategory(Enum):
    MEDICATION = "medication"
    DIAGNOSIS = "diagnosis"
    TREATMENT = "treatment"
    PREVENTION = "prevention"
    EMERGENCY = "emergency"


# Ties are resolved by this fixed priority: time-critical routing first,
# then the order in which a wrong answer is most costly.
TIE_BREAK_ORDER = (
    MedicalCategory.EMERGENCY,
    MedicalCategory.MEDICATION,
    MedicalCategory.DIAGNOSIS,
    MedicalCategory.TREATMENT,
    MedicalCategory.PREVENTION,
)

# Queries matching no keyword at all fall back to the most general category.
DEFAULT_CATEGORY = MedicalCategory.DIAGNOSIS

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class LexiconError(ValueError):
    """Raised when a keyword lexicon or template file is invalid."""


@dataclass(frozen=True)
class KeywordLexicon:
    """Per-category keyword sets; keywords are lowercase, sets may overlap."""

    keywords: dict[MedicalCategory, frozenset[str]]

    def __post_init__(self):
        missing = [c for c in MedicalCategory if c not in self.keywords]
        if missing:
            raise LexiconError(f"lexicon missing categories: {[c.value for c in missing]}")
        for cat, words in self.keywords.items():
            if not words:
                raise LexiconError(f"lexicon category {cat.value!r} has no keywords")


@dataclass(frozen=True)
class PromptTemplate:
    """Shared base prompt plus one suffix per category (suffix may be empty)."""

    base: str
    suffixes: dict[MedicalCategory, str]

    def __post_init__(self):
        if not self.base:
            raise LexiconError("prompt template base must be non-empty")
        missing = [c for c in MedicalCategory if c not in self.suffixes]
        if missing:
            raise LexiconError(f"templates missing categories: {[c.value for c in missing]}")


@dataclass(frozen=True)
class ClassifiedQuery:
    raw: str
    tokens: tuple[str, ...]
    category: MedicalCategory
    scores: dict[MedicalCategory, int]


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace; duplicates kept."""
    return _TOKEN_RE.findall(text.lower())


def classify(query: str, lexicon: KeywordLexicon) -> ClassifiedQuery:
    """Route a query to the category with the highest keyword-match count.

    Each token occurrence contributes one point to every category whose
    keyword set contains it. Ties follow TIE_BREAK_ORDER; an all-zero score
    vector falls back to DEFAULT_CATEGORY.
    """
    tokens = tuple(tokenize(query))
    scores = {
        cat: sum(1 for tok in tokens if tok in lexicon.keywords[cat])
        for cat in MedicalCategory
    }
    best = max(scores.values())
    if best == 0:
        category = DEFAULT_CATEGORY
    else:
        category = next(c for c in TIE_BREAK_ORDER if scores[c] == best)
    return ClassifiedQuery(raw=query, tokens=tokens, category=category, scores=scores)


def build_prompt(classified: ClassifiedQuery, templates: PromptTemplate) -> str:
    """Concatenate base prompt, category suffix, and the raw query text.

    Parts are joined with single newlines; byte-deterministic for fixed
    inputs.
    """
    if classified.category not in templates.suffixes:
        raise LexiconError(f"no suffix configured for category {classified.category.value!r}")
    suffix = templates.suffixes[classified.category]
    return f"{templates.base}\n{suffix}\n{classified.raw}"


def _category_map(raw: dict, path, what: str) -> dict[MedicalCategory, object]:
    if not isinstance(raw, dict):
        raise LexiconError(f"{path}: {what} must be a JSON object")
    out = {}
    for key, value in raw.items():
        try:
            out[MedicalCategory(key)] = value
        except ValueError:
            raise LexiconError(f"{path}: unknown category {key!r}") from None
    return out


def load_lexicon(path) -> KeywordLexicon:
    """Load and validate a keyword lexicon from a JSON file.

    Schema: {"<category>": ["keyword", ...], ...} with all five categories
    present. Keywords are lowercased and deduplicated.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LexiconError(f"{path}: invalid JSON: {exc}") from exc
    mapping = _category_map(raw, path, "lexicon")
    keywords = {}
    for cat, words in mapping.items():
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise LexiconError(f"{path}: keywords for {cat.value!r} must be a list of strings")
        keywords[cat] = frozenset(w.lower() for w in words)
    return KeywordLexicon(keywords)


def load_templates(path) -> PromptTemplate:
    """Load prompt templates from a JSON file.

    Schema: {"base": "...", "suffixes": {"<category>": "...", ...}}.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LexiconError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "base" not in raw or "suffixes" not in raw:
        raise LexiconError(f"{path}: templates file needs 'base' and 'suffixes' keys")
    suffixes = _category_map(raw["suffixes"], path, "suffixes")
    for cat, text in suffixes.items():
        if not isinstance(text, str):
            raise LexiconError(f"{path}: suffix for {cat.value!r} must be a string")
    return PromptTemplate(base=raw["base"], suffixes=suffixes)
