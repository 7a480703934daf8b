"""Near-duplicate removal with 64-bit SimHash fingerprints.

Features are word 3-shingles (character 3-shingles for Chinese) of the
lowercased text, hashed with blake2b. Candidate pairs come from exact matches
on contiguous bit-bands: with ``bands >= hamming_threshold + 1`` every pair
within the threshold shares at least one band, so band bucketing never misses
a true near-duplicate.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

from .corpus import Document
from .errors import DataError

FINGERPRINT_BITS = 64
DEFAULT_SHINGLE = 3


@dataclass(frozen=True)
class Fingerprint:
    doc_id: str
    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < (1 << FINGERPRINT_BITS):
            raise DataError("fingerprint must fit in 64 bits")


@dataclass(frozen=True)
class BucketingConfig:
    bands: int = 4
    hamming_threshold: int = 3

    def __post_init__(self):
        if self.bands < 1 or FINGERPRINT_BITS % self.bands != 0:
            raise DataError("bands must evenly divide 64")
        if self.hamming_threshold < 0:
            raise DataError("hamming_threshold must be >= 0")
        if self.bands < self.hamming_threshold + 1:
            raise DataError(
                "need bands >= hamming_threshold + 1 for the exact-recall guarantee"
            )

    @property
    def bits_per_band(self) -> int:
        return FINGERPRINT_BITS // self.bands


@dataclass
class DedupReport:
    clusters: list[tuple[str, list[str]]] = field(default_factory=list)
    pair_count_checked: int = 0


def _features(text: str, lang: str, shingle: int = DEFAULT_SHINGLE) -> Counter:
    """Multiset of shingle features; empty text yields no features."""
    lowered = text.lower()
    if lang == "zh":
        units: Sequence[str] = [ch for ch in lowered if not ch.isspace()]
        joiner = ""
    else:
        units = lowered.split()
        joiner = " "
    if not units:
        return Counter()
    if len(units) < shingle:
        return Counter({joiner.join(units): 1})
    return Counter(joiner.join(units[i : i + shingle]) for i in range(len(units) - shingle + 1))


def _feature_hash(feature: str) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def simhash(doc: Document, shingle: int = DEFAULT_SHINGLE) -> Fingerprint:
    """Weighted bit-vote fingerprint; ties (sum exactly 0) resolve to bit 0."""
    votes = [0] * FINGERPRINT_BITS
    for feature, weight in _features(doc.text, doc.lang, shingle).items():
        h = _feature_hash(feature)
        for i in range(FINGERPRINT_BITS):
            votes[i] += weight if (h >> i) & 1 else -weight
    bits = 0
    for i, vote in enumerate(votes):
        if vote > 0:
            bits |= 1 << i
    return Fingerprint(doc.id, bits)


def hamming(a: Fingerprint | int, b: Fingerprint | int) -> int:
    x = a.bits if isinstance(a, Fingerprint) else a
    y = b.bits if isinstance(b, Fingerprint) else b
    return (x ^ y).bit_count()


def _band_values(bits: int, cfg: BucketingConfig) -> list[int]:
    width = cfg.bits_per_band
    mask = (1 << width) - 1
    return [(bits >> (band * width)) & mask for band in range(cfg.bands)]


def bucket_candidates(
    fps: Iterable[Fingerprint], cfg: BucketingConfig
) -> set[tuple[str, str]]:
    """All unordered id pairs agreeing exactly on at least one bit-band.

    Superset of every pair within the configured Hamming threshold.
    """
    buckets: dict[tuple[int, int], list[str]] = defaultdict(list)
    for fp in fps:
        for band, value in enumerate(_band_values(fp.bits, cfg)):
            buckets[(band, value)].append(fp.doc_id)
    pairs: set[tuple[str, str]] = set()
    for members in buckets.values():
        if len(members) < 2:
            continue
        for a, b in combinations(members, 2):
            pairs.add((a, b) if a <= b else (b, a))
    return pairs


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        root = x
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def dedup(
    docs: Sequence[Document],
    cfg: BucketingConfig = BucketingConfig(),
    shingle: int = DEFAULT_SHINGLE,
) -> tuple[list[Document], DedupReport]:
    """Drop near-duplicates: candidate pairs within the Hamming threshold form
    edges, connected components are clusters, and the lexicographically
    smallest doc id in each cluster is kept. Output preserves input order.
    """
    ids = [doc.id for doc in docs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate document ids in dedup input")

    fps = {doc.id: simhash(doc, shingle) for doc in docs}
    candidates = bucket_candidates(fps.values(), cfg)

    uf = _UnionFind()
    checked = 0
    for a, b in candidates:
        checked += 1
        if hamming(fps[a], fps[b]) <= cfg.hamming_threshold:
            uf.union(a, b)

    members: dict[str, list[str]] = defaultdict(list)
    for doc_id in ids:
        members[uf.find(doc_id)].append(doc_id)

    keepers = {min(group) for group in members.values()}
    kept = [doc for doc in docs if doc.id in keepers]
    report = DedupReport(pair_count_checked=checked)
    for root in sorted(members):
        group = members[root]
        if len(group) > 1:
            keeper = min(group)
            report.clusters.append((keeper, sorted(g for g in group if g != keeper)))
    return kept, report


def save_fingerprints(fps: Iterable[Fingerprint], path) -> None:
    """CSV rows of doc_id,hex16 (16 lowercase hex digits)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("doc_id,fingerprint\n")
        for fp in fps:
            fh.write(f"{fp.doc_id},{fp.bits:016x}\n")


def load_fingerprints(path) -> list[Fingerprint]:
    fps = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "doc_id,fingerprint":
            raise DataError(f"unexpected fingerprint CSV header: {header.strip()!r}")
        for line in fh:
            if not line.strip():
                continue
            doc_id, _, hexs = line.rstrip("\n").rpartition(",")
            fps.append(Fingerprint(doc_id, int(hexs, 16)))
    return fps
