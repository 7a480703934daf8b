"""Weighted data-mixture validation, sampling, and sequence packing.

A mixture spec lists per-dataset token counts, sampling weights, and epoch
targets. Sampling draws one whole document at a time from a seeded
categorical distribution over the weights, wrapping each dataset as needed,
until the total token budget is spent; packing concatenates documents with an
end-of-text separator and chunks the result into fixed-length sequences.

``reference_mixture()`` loads the bundled 18-dataset bilingual 2T-token
composition used as the validation fixture.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import DataError

WEIGHT_SUM_TOL = 1e-6
DEFAULT_EPOCH_TOLERANCE = 0.25


@dataclass(frozen=True)
class MixtureEntry:
    name: str
    num_tokens: int
    weight: float
    epochs: float
    category: str = ""
    language: str = "en"

    def __post_init__(self):
        if self.num_tokens <= 0:
            raise DataError(f"{self.name}: num_tokens must be > 0")
        if self.weight < 0:
            raise DataError(f"{self.name}: weight must be >= 0")


@dataclass(frozen=True)
class MixtureSpec:
    entries: tuple[MixtureEntry, ...]
    total_training_tokens: int

    def __post_init__(self):
        if not self.entries:
            raise DataError("mixture spec has no entries")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("mixture entry names must be unique")
        weight_sum = sum(e.weight for e in self.entries)
        if abs(weight_sum - 1.0) > WEIGHT_SUM_TOL:
            raise DataError(f"sampling weights sum to {weight_sum!r}, expected 1")
        if self.total_training_tokens <= 0:
            raise DataError("total_training_tokens must be > 0")

    @property
    def weight_sum(self) -> float:
        return sum(e.weight for e in self.entries)


@dataclass(frozen=True)
class PackedBatchPlan:
    """Fixed-length packing arithmetic for one optimizer step."""

    sequence_length: int
    sequences_per_step: int

    @property
    def tokens_per_step(self) -> int:
        return self.sequence_length * self.sequences_per_step


@dataclass(frozen=True)
class EpochCheck:
    name: str
    stated_epochs: float
    implied_epochs: float
    relative_deviation: float
    within_tolerance: bool


@dataclass(frozen=True)
class MixtureValidation:
    weight_sum: float
    weight_sum_ok: bool
    epoch_checks: tuple[EpochCheck, ...]

    @property
    def all_within_tolerance(self) -> bool:
        return self.weight_sum_ok and all(c.within_tolerance for c in self.epoch_checks)


def validate_mixture(
    spec: MixtureSpec, tolerance: float = DEFAULT_EPOCH_TOLERANCE
) -> MixtureValidation:
    """Report weight-sum and implied-vs-stated epoch deviations; never mutates."""
    weight_sum = spec.weight_sum
    checks = []
    for entry in spec.entries:
        implied = entry.weight * spec.total_training_tokens / entry.num_tokens
        deviation = abs(implied - entry.epochs) / entry.epochs if entry.epochs else float("inf")
        checks.append(
            EpochCheck(entry.name, entry.epochs, implied, deviation, deviation <= tolerance)
        )
    return MixtureValidation(
        weight_sum=weight_sum,
        weight_sum_ok=abs(weight_sum - 1.0) <= WEIGHT_SUM_TOL,
        epoch_checks=tuple(checks),
    )


class StreamToken(NamedTuple):
    token: int
    source: str
    doc_start: bool


def sample_stream(
    spec: MixtureSpec,
    datasets: dict[str, Sequence[Sequence[int]]],
    seed: int,
) -> Iterator[StreamToken]:
    """Deterministic document-contiguous token stream.

    ``datasets`` maps each entry name to its documents (token id lists). Each
    categorical draw over the weights emits the chosen dataset's next whole
    document; datasets wrap when exhausted. The stream stops after exactly
    ``total_training_tokens`` tokens, truncating the final document if needed.
    """
    for entry in spec.entries:
        docs = datasets.get(entry.name)
        if docs is None:
            raise DataError(f"dataset {entry.name!r} missing from sample inputs")
        if entry.weight > 0 and (not docs or all(len(d) == 0 for d in docs)):
            raise DataError(f"dataset {entry.name!r} is empty but has weight > 0")

    rng = random.Random(seed)
    entries = list(spec.entries)
    cumulative = []
    acc = 0.0
    for entry in entries:
        acc += entry.weight
        cumulative.append(acc)
    positions = {entry.name: 0 for entry in entries}
    budget = spec.total_training_tokens

    emitted = 0
    while emitted < budget:
        r = rng.random() * acc
        index = next(i for i, c in enumerate(cumulative) if r < c or i == len(cumulative) - 1)
        entry = entries[index]
        docs = datasets[entry.name]
        doc = ()
        while not doc:
            doc = docs[positions[entry.name] % len(docs)]
            positions[entry.name] += 1
        start = True
        for token in doc:
            yield StreamToken(int(token), entry.name, start)
            start = False
            emitted += 1
            if emitted >= budget:
                return


def pack_sequences(
    stream: Iterable[StreamToken | int],
    sequence_length: int,
    eos_id: int,
) -> Iterator[list[int]]:
    """Concatenate documents with eos separators and emit exact-length chunks.

    Accepts StreamToken items (document boundaries from their flags) or plain
    ints (treated as one continuous document). The trailing partial chunk is
    dropped. An eos separator follows every document.
    """
    if sequence_length < 2:
        raise DataError("sequence_length must be >= 2")
    buffer: list[int] = []
    started = False

    def drain() -> Iterator[list[int]]:
        while len(buffer) >= sequence_length:
            yield buffer[:sequence_length]
            del buffer[:sequence_length]

    for item in stream:
        if isinstance(item, StreamToken):
            if item.doc_start and started:
                buffer.append(eos_id)
            token = item.token
        else:
            token = int(item)
        started = True
        buffer.append(token)
        yield from drain()
    if started:
        buffer.append(eos_id)
        yield from drain()


def stream_source_shares(stream: Iterable[StreamToken]) -> dict[str, float]:
    """Fraction of stream tokens contributed by each source."""
    counts: dict[str, int] = {}
    total = 0
    for item in stream:
        counts[item.source] = counts.get(item.source, 0) + 1
        total += 1
    return {name: count / total for name, count in counts.items()} if total else {}


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------


def _spec_from_payload(payload: dict) -> MixtureSpec:
    try:
        entries = tuple(
            MixtureEntry(
                name=row["name"],
                num_tokens=int(row["num_tokens"]),
                weight=float(row["weight"]),
                epochs=float(row["epochs"]),
                category=row.get("category", ""),
                language=row.get("language", "en"),
            )
            for row in payload["entries"]
        )
        return MixtureSpec(entries, int(payload["total_training_tokens"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad mixture spec: {exc}") from exc


def load_mixture_spec(path: str | Path) -> MixtureSpec:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    return _spec_from_payload(payload)


def save_mixture_spec(spec: MixtureSpec, path: str | Path) -> None:
    payload = {
        "total_training_tokens": spec.total_training_tokens,
        "entries": [
            {
                "name": e.name,
                "num_tokens": e.num_tokens,
                "weight": e.weight,
                "epochs": e.epochs,
                "category": e.category,
                "language": e.language,
            }
            for e in spec.entries
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def reference_mixture() -> MixtureSpec:
    """The bundled 18-dataset bilingual 2T-token training composition."""
    payload = json.loads(
        resources.files("lmforge.data").joinpath("pretrain_mixture.json").read_text("utf-8")
    )
    return _spec_from_payload(payload)
