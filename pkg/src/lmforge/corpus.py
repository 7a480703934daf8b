"""Document ingestion, heuristic quality filtering, and corpus statistics.

Documents live in line-delimited JSON files, one object per line with string
fields "id", "text", "source" and "lang" ("en" or "zh"). Filtering looks only
at cheap surface signals: total length, mean paragraph length, and the
punctuation ratio of the text.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import DataError, MalformedLineError

LANGS = ("en", "zh")

# Fullwidth/CJK marks that behave as punctuation but sit outside the Unicode
# P* categories (mostly category S).
_EXTRA_PUNCT = frozenset("～｜＋＝＜＞＾｀￥·")

REASON_OK = "ok"
REASON_TOO_SHORT = "too_short"
REASON_SHORT_PARAGRAPHS = "short_paragraphs"
REASON_PUNCT_TOO_HIGH = "punct_too_high"
REASON_PUNCT_TOO_LOW = "punct_too_low"


@dataclass(frozen=True)
class Document:
    """One corpus record flowing through the filter/dedup stages."""

    id: str
    text: str
    source: str
    lang: str = "en"

    def __post_init__(self):
        if not self.id:
            raise DataError("document id must be non-empty")
        if self.lang not in LANGS:
            raise DataError(f"unknown lang {self.lang!r}, expected one of {LANGS}")


@dataclass(frozen=True)
class FilterRules:
    """Thresholds for the heuristic quality filter."""

    min_text_chars: int = 200
    min_mean_paragraph_chars: int = 40
    max_punct_ratio: float = 0.25
    min_punct_ratio: float = 0.0

    def __post_init__(self):
        if self.min_text_chars < 0 or self.min_mean_paragraph_chars < 0:
            raise DataError("character thresholds must be >= 0")
        if not (0.0 <= self.min_punct_ratio <= self.max_punct_ratio <= 1.0):
            raise DataError("need 0 <= min_punct_ratio <= max_punct_ratio <= 1")


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    reason: str

    def __post_init__(self):
        if self.keep != (self.reason == REASON_OK):
            raise DataError("keep must be true exactly when reason is 'ok'")


@dataclass
class CorpusStats:
    doc_count: int = 0
    total_chars: int = 0
    total_utf8_bytes: int = 0
    per_source_counts: dict[str, int] = field(default_factory=dict)

    def add(self, doc: Document) -> None:
        self.doc_count += 1
        self.total_chars += len(doc.text)
        self.total_utf8_bytes += len(doc.text.encode("utf-8"))
        self.per_source_counts[doc.source] = self.per_source_counts.get(doc.source, 0) + 1

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        merged = CorpusStats(
            doc_count=self.doc_count + other.doc_count,
            total_chars=self.total_chars + other.total_chars,
            total_utf8_bytes=self.total_utf8_bytes + other.total_utf8_bytes,
            per_source_counts=dict(self.per_source_counts),
        )
        for source, count in other.per_source_counts.items():
            merged.per_source_counts[source] = merged.per_source_counts.get(source, 0) + count
        return merged


def is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or ch in _EXTRA_PUNCT


def punct_ratio(text: str) -> float:
    """Punctuation characters over non-whitespace characters (0.0 if none)."""
    non_ws = 0
    punct = 0
    for ch in text:
        if ch.isspace():
            continue
        non_ws += 1
        if is_punct(ch):
            punct += 1
    return punct / non_ws if non_ws else 0.0


def paragraph_lengths(text: str) -> list[int]:
    """Character counts of paragraphs; any newline ends a paragraph."""
    return [len(stripped) for line in text.splitlines() if (stripped := line.strip())]


def heuristic_filter(doc: Document, rules: FilterRules) -> FilterVerdict:
    """Apply length and punctuation-ratio checks; always returns a verdict."""
    text = doc.text
    if len(text) < rules.min_text_chars or not text:
        return FilterVerdict(False, REASON_TOO_SHORT)

    lengths = paragraph_lengths(text)
    mean_par = sum(lengths) / len(lengths) if lengths else 0.0
    if mean_par < rules.min_mean_paragraph_chars:
        return FilterVerdict(False, REASON_SHORT_PARAGRAPHS)

    ratio = punct_ratio(text)
    if ratio > rules.max_punct_ratio:
        return FilterVerdict(False, REASON_PUNCT_TOO_HIGH)
    if ratio < rules.min_punct_ratio:
        return FilterVerdict(False, REASON_PUNCT_TOO_LOW)
    return FilterVerdict(True, REASON_OK)


def corpus_stats(docs: Iterable[Document]) -> CorpusStats:
    stats = CorpusStats()
    for doc in docs:
        stats.add(doc)
    return stats


def _parse_line(path: str, line_number: int, line: str) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLineError(path, line_number, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise MalformedLineError(path, line_number, "record is not an object")
    try:
        return Document(
            id=str(record["id"]),
            text=str(record["text"]),
            source=str(record["source"]),
            lang=str(record.get("lang", "en")),
        )
    except KeyError as exc:
        raise MalformedLineError(path, line_number, f"missing field {exc.args[0]!r}") from exc
    except DataError as exc:
        raise MalformedLineError(path, line_number, str(exc)) from exc


def load_documents(
    path: str | Path,
    on_error: Callable[[MalformedLineError], None] | None = None,
) -> Iterator[Document]:
    """Stream documents from a line-delimited JSON file.

    Malformed lines raise MalformedLineError unless ``on_error`` is given, in
    which case the error is reported to the callback and the line skipped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"documents file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield _parse_line(str(path), line_number, line)
            except MalformedLineError as exc:
                if on_error is None:
                    raise
                on_error(exc)


def save_documents(docs: Iterable[Document], path: str | Path) -> int:
    """Write documents as line-delimited JSON; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(
                {"id": doc.id, "text": doc.text, "source": doc.source, "lang": doc.lang},
                ensure_ascii=False,
            ))
            fh.write("\n")
            count += 1
    return count
