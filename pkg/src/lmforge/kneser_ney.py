"""Interpolated Kneser-Ney n-gram model for perplexity-based quality filtering.

The model uses absolute discounting with a single fixed discount D per level:

    p_k(w | c) = max(a_k(c.w) - D, 0) / T_k(c) + D * n_k(c) / T_k(c) * p_{k-1}(w | c[1:])

where at the highest order ``a`` is the raw n-gram count, and at every lower
order ``a_k(g)`` is the continuation count: the number of distinct words v
such that the raw (k+1)-gram v.g occurs in the corpus. ``T_k(c)`` is the sum
of ``a_k`` over continuations of c and ``n_k(c)`` the number of distinct
continuations. The recursion bottoms out in the continuation-count unigram
interpolated with a uniform 1/|E| mass over the event vocabulary E
(seen words plus </s> and <unk>), which makes every conditional distribution
sum to exactly 1 and gives unseen words finite probability.

Sentences are padded with (order-1) leading <s> tokens and a trailing </s>;
n-grams ending in <s> are never prediction events. Words are whitespace-split
for English and character-split for Chinese.

After training, the model is held in an ARPA-style canonical form: log10
conditional probabilities per n-gram plus log10 backoff weights per context.
Scoring walks that table, so a saved and reloaded model reproduces scores
bit for bit.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Document
from .errors import DataError

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

DEFAULT_ORDER = 5
DEFAULT_DISCOUNT = 0.75

_SENTENCE_ENDERS = frozenset(".!?。！？")

_ARPA_MAGIC = "forge-arpa-v1"
_NO_PROB = -99.0  # sentinel for grams stored only for their backoff weight


def split_sentences(text: str) -> list[str]:
    """Break text at newlines and after terminal punctuation."""
    sentences = []
    for line in text.splitlines():
        buf = []
        for ch in line:
            buf.append(ch)
            if ch in _SENTENCE_ENDERS:
                piece = "".join(buf).strip()
                if piece:
                    sentences.append(piece)
                buf = []
        piece = "".join(buf).strip()
        if piece:
            sentences.append(piece)
    return sentences


def tokenize_words(sentence: str, lang: str) -> list[str]:
    if lang == "zh":
        return [ch for ch in sentence if not ch.isspace()]
    return sentence.split()


def doc_sentences(doc: Document) -> list[list[str]]:
    """Tokenized sentences of a document, empty sentences dropped."""
    out = []
    for sentence in split_sentences(doc.text):
        words = tokenize_words(sentence, doc.lang)
        if words:
            out.append(words)
    return out


@dataclass
class PplScore:
    doc_id: str
    ppl: float
    token_count: int


class NgramModel:
    """Canonical ARPA-style table: log10 probs and log10 backoffs per level."""

    def __init__(
        self,
        order: int,
        discount: float,
        vocab: set[str],
        probs: list[dict[tuple[str, ...], float]],
        backoffs: list[dict[tuple[str, ...], float]],
    ):
        self.order = order
        self.discount = discount
        self.vocab = vocab  # seen words, excluding <s>/</s>/<unk>
        # probs[k-1]: k-gram -> log10 p(w | gram[:-1])
        self.probs = probs
        # backoffs[k-1]: k-gram context -> log10 lambda
        self.backoffs = backoffs

    @property
    def event_count(self) -> int:
        return len(self.vocab) + 2  # plus </s> and <unk>

    def _map_token(self, token: str) -> str:
        if token in self.vocab or token in (BOS, EOS):
            return token
        return UNK

    def _log10_prob(self, gram: tuple[str, ...]) -> float:
        k = len(gram)
        stored = self.probs[k - 1].get(gram)
        if stored is not None and stored != _NO_PROB:
            return stored
        if k == 1:
            raise DataError(f"unigram table is missing {gram[0]!r}")
        context = gram[:-1]
        backoff = self.backoffs[k - 2].get(context, 0.0)
        return backoff + self._log10_prob(gram[1:])

    def log10_prob(self, context: Sequence[str], word: str) -> float:
        ctx = tuple(self._map_token(t) for t in context)[max(0, len(context) - (self.order - 1)):]
        return self._log10_prob(ctx + (self._map_token(word),))


def log_prob(model: NgramModel, context: Sequence[str], word: str) -> float:
    """Natural-log conditional probability with longest-suffix backoff."""
    return model.log10_prob(context, word) * math.log(10.0)


def _collect_counts(
    docs: Iterable[Document], order: int
) -> tuple[list[dict[tuple[str, ...], int]], set[str], int]:
    """Raw k-gram counts for k=1..order over <s>/</s>-padded sentences."""
    raw: list[dict[tuple[str, ...], int]] = [defaultdict(int) for _ in range(order)]
    vocab: set[str] = set()
    sentence_count = 0
    for doc in docs:
        for words in doc_sentences(doc):
            sentence_count += 1
            vocab.update(words)
            padded = [BOS] * (order - 1) + words + [EOS]
            for k in range(1, order + 1):
                for i in range(len(padded) - k + 1):
                    gram = tuple(padded[i : i + k])
                    if gram[-1] == BOS:
                        continue
                    raw[k - 1][gram] += 1
    return raw, vocab, sentence_count


def _adjusted_counts(
    raw: list[dict[tuple[str, ...], int]], order: int
) -> list[dict[tuple[str, ...], int]]:
    """Continuation counts for k < order, raw counts at the top."""
    adjusted: list[dict[tuple[str, ...], int]] = [dict(raw[order - 1])]
    for k in range(order - 1, 0, -1):
        extensions: dict[tuple[str, ...], set[str]] = defaultdict(set)
        for gram in raw[k]:  # raw (k+1)-grams
            extensions[gram[1:]].add(gram[0])
        adjusted.append({gram: len(exts) for gram, exts in extensions.items()})
    adjusted.reverse()
    return adjusted


class _ContextStats:
    __slots__ = ("total", "types", "words")

    def __init__(self):
        self.total = 0
        self.types = 0
        self.words: dict[str, int] = {}


def _group_by_context(
    counts: dict[tuple[str, ...], int]
) -> dict[tuple[str, ...], _ContextStats]:
    grouped: dict[tuple[str, ...], _ContextStats] = defaultdict(_ContextStats)
    for gram, count in counts.items():
        stats = grouped[gram[:-1]]
        stats.total += count
        stats.types += 1
        stats.words[gram[-1]] = count
    return grouped


def train_kn(
    docs: Iterable[Document],
    order: int = DEFAULT_ORDER,
    discount: float = DEFAULT_DISCOUNT,
) -> NgramModel:
    """Estimate the interpolated model and freeze it into canonical form."""
    if order < 1:
        raise DataError(f"order must be >= 1, got {order}")
    if not (0.0 < discount <= 1.0):
        raise DataError(f"discount must be in (0, 1], got {discount}")

    raw, vocab, sentence_count = _collect_counts(docs, order)
    if sentence_count == 0:
        raise DataError("cannot train an n-gram model on an empty corpus")

    adjusted = _adjusted_counts(raw, order)
    grouped = [_group_by_context(level) for level in adjusted]
    event_count = len(vocab) + 2  # </s> and <unk>

    def prob(gram: tuple[str, ...]) -> float:
        k = len(gram)
        uniform = 1.0 / event_count
        if k == 1:
            stats = grouped[0][()]
            count = stats.words.get(gram[0], 0)
            lam = discount * stats.types / stats.total
            return max(count - discount, 0.0) / stats.total + lam * uniform
        stats = grouped[k - 1].get(gram[:-1])
        if stats is None or stats.total == 0:
            return prob(gram[1:])
        count = stats.words.get(gram[-1], 0)
        lam = discount * stats.types / stats.total
        return max(count - discount, 0.0) / stats.total + lam * prob(gram[1:])

    probs: list[dict[tuple[str, ...], float]] = [dict() for _ in range(order)]
    backoffs: list[dict[tuple[str, ...], float]] = [dict() for _ in range(order)]

    for k in range(1, order + 1):
        for gram in adjusted[k - 1]:
            probs[k - 1][gram] = math.log10(prob(gram))
    probs[0][(UNK,)] = math.log10(prob((UNK,)))

    # Backoff weight of every context seen at level k+1.
    for k in range(1, order):
        for context, stats in grouped[k].items():
            backoffs[k - 1][context] = math.log10(discount * stats.types / stats.total)

    return NgramModel(order, discount, vocab, probs, backoffs)


def perplexity(model: NgramModel, doc: Document) -> PplScore:
    """exp of the mean negative log probability, </s> scored per sentence."""
    total_log10 = 0.0
    events = 0
    for words in doc_sentences(doc):
        padded = [BOS] * (model.order - 1) + [model._map_token(w) for w in words] + [EOS]
        for i in range(model.order - 1, len(padded)):
            context = tuple(padded[max(0, i - model.order + 1) : i])
            total_log10 += model._log10_prob(context + (padded[i],))
            events += 1
    if events == 0:
        raise DataError(f"document {doc.id!r} has no tokens to score (token_count_zero)")
    ppl = 10.0 ** (-total_log10 / events)
    return PplScore(doc.id, ppl, events)


def ppl_filter(
    scores: Sequence[PplScore],
    threshold: float | None = None,
    percentile: float | None = None,
) -> list[str]:
    """Keep low-perplexity documents; returns doc ids in input order.

    Exactly one of ``threshold`` (keep ppl <= T) or ``percentile`` (keep the
    lowest-ppl q% with ties kept) must be given.
    """
    if (threshold is None) == (percentile is None):
        raise DataError("give exactly one of threshold or percentile")
    if not scores:
        logger.warning("ppl_filter called with no scores; keeping nothing")
        return []
    if threshold is not None:
        if threshold <= 0:
            raise DataError("threshold must be > 0")
        return [s.doc_id for s in scores if s.ppl <= threshold]
    if not 0 < percentile <= 100:
        raise DataError("percentile must be in (0, 100]")
    k = int(len(scores) * percentile / 100.0)
    if k == 0:
        return []
    cutoff = sorted(s.ppl for s in scores)[k - 1]
    return [s.doc_id for s in scores if s.ppl <= cutoff]


def save_arpa(model: NgramModel, path: str | Path) -> None:
    """Write the canonical table as versioned ARPA-style text.

    Floats are written with repr(), which round-trips IEEE doubles exactly;
    grams without a probability of their own (pure contexts such as <s>)
    carry the -99 sentinel.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_ARPA_MAGIC}\n")
        fh.write(f"discount {model.discount!r}\n")
        fh.write("\\data\\\n")
        grams_per_level = []
        for k in range(1, model.order + 1):
            grams = set(model.probs[k - 1])
            grams.update(model.backoffs[k - 1])
            grams_per_level.append(sorted(grams))
            fh.write(f"ngram {k}={len(grams)}\n")
        for k in range(1, model.order + 1):
            fh.write(f"\n\\{k}-grams:\n")
            for gram in grams_per_level[k - 1]:
                logp = model.probs[k - 1].get(gram, _NO_PROB)
                row = f"{logp!r}\t{' '.join(gram)}"
                backoff = model.backoffs[k - 1].get(gram)
                if backoff is not None:
                    row += f"\t{backoff!r}"
                fh.write(row + "\n")
        fh.write("\n\\end\\\n")


def load_arpa(path: str | Path) -> NgramModel:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _ARPA_MAGIC:
        raise DataError(f"{path}: not a {_ARPA_MAGIC} model file")
    if not lines[1].startswith("discount "):
        raise DataError(f"{path}: missing discount header")
    discount = float(lines[1].split(" ", 1)[1])

    order = 0
    for line in lines:
        if line.startswith("ngram "):
            order = max(order, int(line.split("=", 1)[0].split(" ")[1]))
    if order < 1:
        raise DataError(f"{path}: no ngram declarations found")

    probs: list[dict[tuple[str, ...], float]] = [dict() for _ in range(order)]
    backoffs: list[dict[tuple[str, ...], float]] = [dict() for _ in range(order)]
    level = 0
    for idx, line in enumerate(lines, start=1):
        if line.endswith("-grams:") and line.startswith("\\"):
            level = int(line[1:].split("-", 1)[0])
            continue
        if level == 0 or not line or line.startswith("\\"):
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise DataError(f"{path}:{idx}: expected 2 or 3 tab-separated fields")
        gram = tuple(fields[1].split(" "))
        if len(gram) != level:
            raise DataError(f"{path}:{idx}: gram arity does not match section")
        logp = float(fields[0])
        if logp != _NO_PROB:
            probs[level - 1][gram] = logp
        if len(fields) == 3:
            backoffs[level - 1][gram] = float(fields[2])

    vocab = {gram[0] for gram in probs[0] if gram[0] not in (BOS, EOS, UNK)}
    return NgramModel(order, discount, vocab, probs, backoffs)


def score_documents(model: NgramModel, docs: Iterable[Document]) -> list[PplScore]:
    return [perplexity(model, doc) for doc in docs]


def save_scores(scores: Iterable[PplScore], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("doc_id,ppl,token_count\n")
        for s in scores:
            fh.write(f"{s.doc_id},{s.ppl!r},{s.token_count}\n")


def load_scores(path: str | Path) -> list[PplScore]:
    scores = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "doc_id,ppl,token_count":
            raise DataError(f"unexpected scores CSV header: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            doc_id, ppl, token_count = line.rstrip("\n").rsplit(",", 2)
            scores.append(PplScore(doc_id, float(ppl), int(token_count)))
    return scores
