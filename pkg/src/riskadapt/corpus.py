"""Dataset ingestion, blocking, splitting, and pair featurization.

Records live in two sources; candidate record pairs are produced by token
blocking, labeled pairs are split into train/validation/test, and each pair
is turned into a fixed-length vector of per-attribute similarity channels.
A deterministic synthetic generator materializes desk-scale workloads,
including distribution-misaligned ones (different corruption per source).
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, ParseError, SchemaMismatchError

TEXT = "text"
NUMERIC = "numeric"

LABEL_EQUIVALENT = 1
LABEL_INEQUIVALENT = 0


@dataclass(frozen=True)
class AttributeSpec:
    """One attribute of a record: its name, kind, and numeric scale.

    ``num_range`` is the scale used to normalize absolute differences of
    numeric attributes; it must be positive and is ignored for text.
    """

    name: str
    kind: str
    num_range: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (TEXT, NUMERIC):
            raise SchemaMismatchError(f"unknown attribute kind {self.kind!r}")
        if self.kind == NUMERIC and not self.num_range > 0:
            raise SchemaMismatchError(f"num_range must be positive, got {self.num_range}")


Schema = tuple[AttributeSpec, ...]


@dataclass(frozen=True)
class Record:
    """A single source record: opaque id plus schema-aligned values.

    Values are str (text), float (numeric), or None (missing).
    """

    id: str
    values: tuple


@dataclass
class RecordPair:
    """A candidate pair of records with an optional ground-truth label."""

    left: Record
    right: Record
    label: int | None = None  # 1 equivalent, 0 inequivalent, None unknown


@dataclass(frozen=True)
class FeatureVector:
    """Per-pair similarity channels, every entry in [0, 1]."""

    values: np.ndarray
    schema: tuple[tuple[str, str], ...]  # (attribute name, similarity kind)


@dataclass
class DatasetSplit:
    """Labeled pairs partitioned into train / validation / test."""

    train: list[RecordPair]
    validation: list[RecordPair]
    test: list[RecordPair]
    seed: int


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs for one synthetic source.

    ``corruption_level`` is the per-record severity cap: each record draws
    its own severity uniformly from [0, corruption_level], which drives the
    typo rate, token drop rate, and numeric jitter applied to it.
    """

    n_entities: int
    duplicates_per_entity: int = 2
    corruption_level: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.corruption_level <= 1.0:
            raise ValueError(f"corruption_level must be in [0,1], got {self.corruption_level}")
        if self.n_entities < 1 or self.duplicates_per_entity < 2:
            raise ValueError("need n_entities >= 1 and duplicates_per_entity >= 2")


@dataclass
class Workload:
    """Two record sources plus the ground-truth cross-source match set."""

    schema: Schema
    left: list[Record]
    right: list[Record]
    matches: frozenset[tuple[str, str]]


def pair_id(pair: RecordPair) -> str:
    return f"{pair.left.id}|{pair.right.id}"


# ---------------------------------------------------------------------------
# string similarity primitives
# ---------------------------------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit costs, two-row dynamic program."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    """1 - levenshtein/max-length, on lowercased strings; 1.0 when both empty."""
    a, b = a.lower(), b.lower()
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def tokens(value: str) -> frozenset[str]:
    return frozenset(value.lower().split())


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------

_TEXT_KINDS = ("edit", "jaccard")
_NUMERIC_KINDS = ("eq", "diff")

MISSING_CHANNEL_VALUE = 0.5


def channel_schema(schema: Schema) -> tuple[tuple[str, str], ...]:
    """The (attribute, similarity kind) descriptor for every channel."""
    out: list[tuple[str, str]] = []
    for attr in schema:
        kinds = _TEXT_KINDS if attr.kind == TEXT else _NUMERIC_KINDS
        out.extend((attr.name, kind) for kind in kinds)
    return tuple(out)


def channel_names(schema: Schema) -> tuple[str, ...]:
    return tuple(f"{attr}_{kind}" for attr, kind in channel_schema(schema))


def _attribute_channels(attr: AttributeSpec, a, b) -> tuple[float, float]:
    if a is None or b is None:
        return (MISSING_CHANNEL_VALUE, MISSING_CHANNEL_VALUE)
    if attr.kind == TEXT:
        return (edit_similarity(a, b), jaccard(tokens(a), tokens(b)))
    eq = 1.0 if float(a) == float(b) else 0.0
    diff = 1.0 - min(1.0, abs(float(a) - float(b)) / attr.num_range)
    return (eq, diff)


def featurize_pair(pair: RecordPair, schema: Schema) -> FeatureVector:
    """Similarity channels for one pair; missing values yield 0.5.

    Text attributes emit normalized edit similarity and token Jaccard;
    numeric attributes emit an exact-equality indicator and a scaled
    absolute difference.
    """
    for rec in (pair.left, pair.right):
        if len(rec.values) != len(schema):
            raise SchemaMismatchError(
                f"record {rec.id} has {len(rec.values)} values, schema has {len(schema)}"
            )
    vals: list[float] = []
    for i, attr in enumerate(schema):
        vals.extend(_attribute_channels(attr, pair.left.values[i], pair.right.values[i]))
    return FeatureVector(np.asarray(vals, dtype=np.float64), channel_schema(schema))


def featurize_pairs(pairs: Sequence[RecordPair], schema: Schema) -> np.ndarray:
    """Stacked feature matrix, one row per pair."""
    if not pairs:
        return np.zeros((0, len(channel_schema(schema))), dtype=np.float64)
    return np.vstack([featurize_pair(p, schema).values for p in pairs])


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_records(path: str | Path, schema: Schema) -> list[Record]:
    """Read one source from delimited text; header must match the schema.

    Blank cells become missing values; a malformed row or an unparsable
    numeric cell raises ParseError naming the line; duplicate ids raise
    IntegrityError.
    """
    path = Path(path)
    expected = ["id"] + [attr.name for attr in schema]
    records: list[Record] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected header {expected}") from None
        if header != expected:
            raise ParseError(f"{path}: header {header} does not match schema {expected}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ParseError(f"{path}: line {line_no}: expected {len(expected)} cells, got {len(row)}")
            rec_id, cells = row[0], row[1:]
            if rec_id in seen:
                raise IntegrityError(f"{path}: line {line_no}: duplicate id {rec_id!r}")
            seen.add(rec_id)
            values: list = []
            for attr, cell in zip(schema, cells):
                if cell == "":
                    values.append(None)
                elif attr.kind == NUMERIC:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"{path}: line {line_no}: non-numeric value {cell!r} for {attr.name}"
                        ) from None
                else:
                    values.append(cell)
            records.append(Record(rec_id, tuple(values)))
    return records


def load_pairs(path: str | Path, left: Sequence[Record], right: Sequence[Record]) -> list[RecordPair]:
    """Read a labeled pairs file: left_id, right_id, label in {1, 0}.

    A blank label cell yields an unknown-label pair.
    """
    path = Path(path)
    by_left = {r.id: r for r in left}
    by_right = {r.id: r for r in right}
    pairs: list[RecordPair] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["left_id", "right_id", "label"]:
            raise ParseError(f"{path}: expected header left_id,right_id,label, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path}: line {line_no}: expected 3 cells, got {len(row)}")
            lid, rid, label_cell = row
            if lid not in by_left:
                raise IntegrityError(f"{path}: line {line_no}: unknown left id {lid!r}")
            if rid not in by_right:
                raise IntegrityError(f"{path}: line {line_no}: unknown right id {rid!r}")
            if label_cell == "":
                label = None
            elif label_cell in ("0", "1"):
                label = int(label_cell)
            else:
                raise ParseError(f"{path}: line {line_no}: label must be 0 or 1, got {label_cell!r}")
            pairs.append(RecordPair(by_left[lid], by_right[rid], label))
    return pairs


# ---------------------------------------------------------------------------
# blocking and splitting
# ---------------------------------------------------------------------------

def _record_tokens(record: Record, schema: Schema) -> frozenset[str]:
    toks: set[str] = set()
    for attr, value in zip(schema, record.values):
        if attr.kind == TEXT and value is not None:
            toks |= tokens(value)
    return frozenset(toks)


def block_candidates(
    left: Sequence[Record],
    right: Sequence[Record],
    schema: Schema,
    min_shared_tokens: int = 1,
) -> list[RecordPair]:
    """Cross pairs whose text token sets share at least the given count.

    Output order is deterministic: by left id, then right id. Implemented
    with an inverted token index; equivalent to the brute-force set
    comparison over the full cross product.
    """
    if min_shared_tokens < 1:
        raise ValueError("min_shared_tokens must be >= 1")
    right_tokens = {r.id: _record_tokens(r, schema) for r in right}
    index: dict[str, list[str]] = {}
    for r in right:
        for tok in right_tokens[r.id]:
            index.setdefault(tok, []).append(r.id)
    by_right = {r.id: r for r in right}
    out: list[RecordPair] = []
    for rec in sorted(left, key=lambda r: r.id):
        shared: Counter[str] = Counter()
        for tok in _record_tokens(rec, schema):
            for rid in index.get(tok, ()):
                shared[rid] += 1
        keep = sorted(rid for rid, count in shared.items() if count >= min_shared_tokens)
        out.extend(RecordPair(rec, by_right[rid]) for rid in keep)
    return out


def _largest_remainder(count: int, ratios: Sequence[float]) -> list[int]:
    raw = [count * r for r in ratios]
    floors = [int(x) for x in raw]
    short = count - sum(floors)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def stratified_parts(
    pairs: Sequence[RecordPair],
    fractions: Sequence[float],
    seed: int,
) -> list[list[RecordPair]]:
    """Label-stratified parts by the given fractions, reproducible from seed.

    Fractions may sum to less than 1; the remainder goes unused. Each part's
    match rate stays close to the whole when counts permit.
    """
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"fractions sum to more than 1: {fractions}")
    if any(p.label is None for p in pairs):
        raise ValueError("stratified splitting requires labeled pairs")
    spare = max(0.0, 1.0 - sum(fractions))
    alloc = list(fractions) + [spare]
    rng = np.random.default_rng(seed)
    parts: list[list[RecordPair]] = [[] for _ in alloc]
    for label in (LABEL_EQUIVALENT, LABEL_INEQUIVALENT):
        group = [p for p in pairs if p.label == label]
        order = rng.permutation(len(group))
        counts = _largest_remainder(len(group), alloc)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(group[i] for i in order[start : start + count])
            start += count
    for part in parts:
        order = rng.permutation(len(part))
        part[:] = [part[i] for i in order]
    return parts[: len(fractions)]


def split_dataset(
    pairs: Sequence[RecordPair],
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Stratified train/validation/test partition, reproducible from seed.

    Label stratification keeps every part's match rate close to the whole;
    sizes follow the ratios up to rounding.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 pairs to form 3 parts, got {len(pairs)}")
    parts = stratified_parts(pairs, ratios, seed)
    return DatasetSplit(train=parts[0], validation=parts[1], test=parts[2], seed=seed)


# ---------------------------------------------------------------------------
# synthetic workload generation
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def _wordlist(rng: np.random.Generator, count: int, syllables: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        w = _pseudo_word(rng, syllables)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


YEAR_MIN = 1970
YEAR_MAX = 2015

SYNTHETIC_SCHEMA: Schema = (
    AttributeSpec("title", TEXT),
    AttributeSpec("authors", TEXT),
    AttributeSpec("venue", TEXT),
    AttributeSpec("year", NUMERIC, num_range=float(YEAR_MAX - YEAR_MIN)),
)


@dataclass(frozen=True)
class _Entity:
    title: tuple[str, ...]
    authors: tuple[str, ...]
    venue: str
    year: int


def _canonical_entities(n: int, seed: int) -> list[_Entity]:
    rng = np.random.default_rng(seed)
    vocab = _wordlist(rng, 160, 3)
    names = _wordlist(rng, 60, 2)
    venues = _wordlist(rng, 40, 4)
    entities: list[_Entity] = []
    seen_titles: set[tuple[str, ...]] = set()
    while len(entities) < n:
        length = int(rng.integers(5, 9))
        title = tuple(vocab[i] for i in rng.choice(len(vocab), size=length, replace=False))
        if title in seen_titles:
            continue
        seen_titles.add(title)
        authors = tuple(names[i] for i in rng.choice(len(names), size=int(rng.integers(2, 4)), replace=False))
        venue = venues[int(rng.integers(len(venues)))]
        year = int(rng.integers(YEAR_MIN, YEAR_MAX + 1))
        entities.append(_Entity(title, authors, venue, year))
    return entities


def _corrupt_token(token: str, rng: np.random.Generator) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    pos = int(rng.integers(len(token)))
    kind = int(rng.integers(3))
    if kind == 0 and len(token) > 2:  # delete a character
        return token[:pos] + token[pos + 1 :]
    if kind == 1:  # substitute a character
        return token[:pos] + letters[int(rng.integers(26))] + token[pos + 1 :]
    return token[:pos] + letters[int(rng.integers(26))] + token[pos:]  # insert


def _corrupt_text(text_tokens: tuple[str, ...], severity: float, drop_scale: float,
                  rng: np.random.Generator) -> str:
    kept = [t for t in text_tokens if rng.random() >= drop_scale * severity]
    if not kept:
        kept = [text_tokens[int(rng.integers(len(text_tokens)))]]
    out = [_corrupt_token(t, rng) if rng.random() < severity else t for t in kept]
    return " ".join(out)


def _materialize(entity: _Entity, rec_id: str, level: float, rng: np.random.Generator) -> Record:
    severity = float(rng.uniform(0.0, level)) if level > 0 else 0.0
    # titles take the full corruption severity; authors roughly half;
    # venue and year are the most corruption-resistant attributes
    title = _corrupt_text(entity.title, severity, drop_scale=0.7, rng=rng)
    authors = _corrupt_text(entity.authors, 0.5 * severity, drop_scale=0.5, rng=rng)
    venue = _corrupt_text((entity.venue,), 0.3 * severity, drop_scale=0.0, rng=rng)
    year = float(entity.year)
    if rng.random() < 0.3 * severity:
        year += float(rng.integers(1, 4)) * (1.0 if rng.random() < 0.5 else -1.0)
    return Record(rec_id, (title, authors, venue, year))


def generate_workload(specs: Sequence[SyntheticSpec]) -> Workload:
    """Materialize a two-source workload with per-source corruption.

    Canonical entities derive from the first spec's seed; each source then
    corrupts its copies independently from its own seed. Copies of one
    entity are dealt round-robin to the two sources, so with
    duplicates_per_entity=2 every entity yields exactly one cross-source
    equivalent pair.
    """
    if len(specs) != 2:
        raise ValueError(f"expected exactly 2 source specs, got {len(specs)}")
    if specs[0].n_entities != specs[1].n_entities:
        raise ValueError("source specs must agree on n_entities")
    if specs[0].duplicates_per_entity != specs[1].duplicates_per_entity:
        raise ValueError("source specs must agree on duplicates_per_entity")

    n = specs[0].n_entities
    dups = specs[0].duplicates_per_entity
    entities = _canonical_entities(n, specs[0].seed)
    rngs = [np.random.default_rng(s.seed + 1_000_003) for s in specs]
    sources: list[list[Record]] = [[], []]
    membership: list[list[list[str]]] = [[[] for _ in range(n)], [[] for _ in range(n)]]
    for e_idx, entity in enumerate(entities):
        for copy in range(dups):
            src = copy % 2
            rec_id = f"{'ab'[src]}{e_idx:05d}_{copy}"
            rec = _materialize(entity, rec_id, specs[src].corruption_level, rngs[src])
            sources[src].append(rec)
            membership[src][e_idx].append(rec_id)
    matches = frozenset(
        (lid, rid)
        for e_idx in range(n)
        for lid in membership[0][e_idx]
        for rid in membership[1][e_idx]
    )
    return Workload(SYNTHETIC_SCHEMA, sources[0], sources[1], matches)


def labeled_candidates(workload: Workload, min_shared_tokens: int = 1) -> list[RecordPair]:
    """Blocked candidate pairs of a workload with ground-truth labels applied."""
    pairs = block_candidates(workload.left, workload.right, workload.schema, min_shared_tokens)
    for pair in pairs:
        key = (pair.left.id, pair.right.id)
        pair.label = LABEL_EQUIVALENT if key in workload.matches else LABEL_INEQUIVALENT
    return pairs


# ---------------------------------------------------------------------------
# featurized views for training
# ---------------------------------------------------------------------------

@dataclass
class SplitFeatures:
    """Featurized train/validation/test parts of one task.

    Test labels are for scoring only; training code receives the feature
    matrix without them.
    """

    channel_names: tuple[str, ...]
    train_ids: list[str]
    x_train: np.ndarray
    y_train: np.ndarray
    val_ids: list[str]
    x_val: np.ndarray
    y_val: np.ndarray
    test_ids: list[str]
    x_test: np.ndarray
    y_test: np.ndarray | None = None


def _part_arrays(pairs: Sequence[RecordPair], schema: Schema):
    ids = [pair_id(p) for p in pairs]
    x = featurize_pairs(pairs, schema)
    labels = [p.label for p in pairs]
    y = None if any(v is None for v in labels) else np.asarray(labels, dtype=np.int64)
    return ids, x, y


def build_features(train: Sequence[RecordPair], validation: Sequence[RecordPair],
                   test: Sequence[RecordPair], schema: Schema) -> SplitFeatures:
    train_ids, x_train, y_train = _part_arrays(train, schema)
    val_ids, x_val, y_val = _part_arrays(validation, schema)
    test_ids, x_test, y_test = _part_arrays(test, schema)
    if y_train is None or y_val is None:
        raise ValueError("train and validation parts must be fully labeled")
    return SplitFeatures(channel_names(schema), train_ids, x_train, y_train,
                         val_ids, x_val, y_val, test_ids, x_test, y_test)


def featurize_split(split: DatasetSplit, schema: Schema) -> SplitFeatures:
    return build_features(split.train, split.validation, split.test, schema)
