"""Sample/dataset representation, feature-table I/O, user-disjoint splits, normalization.

Feature-table file format (UTF-8, comma-separated):

    sample_id,country,user_id,screen_source,label,f0,f1,...,f{d-1}

The header line is mandatory and fixed. ``label`` is ``0`` (attack) or ``1``
(bona fide). Identifier columns are restricted to ``[A-Za-z0-9_-]`` so no
quoting is ever needed. Bona fide rows carry screen_source ``"none"``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError

_IDENT_RE = re.compile(r"^[A-Za-z0-9_-]+$")

BONA_FIDE_SOURCE = "none"


class Label(IntEnum):
    """Binary presentation class: 0 = screen display attack, 1 = bona fide."""

    ATTACK = 0
    BONA_FIDE = 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Sample:
    """One labeled feature vector with its capture metadata."""

    sample_id: str
    country: str
    user_id: str
    screen_source: str
    label: Label
    features: np.ndarray

    def __post_init__(self) -> None:
        for name in ("sample_id", "country", "user_id", "screen_source"):
            value = getattr(self, name)
            if not _IDENT_RE.match(value):
                raise DataError(f"{name} {value!r} contains characters outside [A-Za-z0-9_-]")
        if int(self.label) not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "label", Label(int(self.label)))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1 or feats.size == 0:
            raise DataError(f"features must be a nonempty 1-D vector, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"sample {self.sample_id!r} has non-finite feature values")
        object.__setattr__(self, "features", _freeze(feats))


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of samples with one shared dimension."""

    samples: tuple[Sample, ...]
    dimension: int = field(init=False)

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        if not samples:
            raise DataError("dataset must contain at least one sample")
        object.__setattr__(self, "samples", samples)
        d = samples[0].features.shape[0]
        for i, s in enumerate(samples):
            if s.features.shape[0] != d:
                raise DataError(
                    f"inconsistent feature dimension: sample {s.sample_id!r} has "
                    f"{s.features.shape[0]}, expected {d}"
                )
        seen: set[str] = set()
        for s in samples:
            if s.sample_id in seen:
                raise DataError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
        object.__setattr__(self, "dimension", int(d))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def countries(self) -> tuple[str, ...]:
        """Distinct countries in first-appearance order."""
        return tuple(dict.fromkeys(s.country for s in self.samples))

    def user_ids(self) -> tuple[str, ...]:
        """Distinct user ids in first-appearance order."""
        return tuple(dict.fromkeys(s.user_id for s in self.samples))

    def filter(self, predicate: Callable[[Sample], bool]) -> Dataset:
        """New dataset with the samples passing *predicate*; error if none do."""
        kept = tuple(s for s in self.samples if predicate(s))
        if not kept:
            raise DataError("filter produced an empty dataset")
        return Dataset(kept)

    def filter_countries(self, countries: Iterable[str]) -> Dataset:
        wanted = set(countries)
        return self.filter(lambda s: s.country in wanted)

    def merged_with(self, other: Dataset) -> Dataset:
        """Concatenation of two datasets (sample ids must stay unique)."""
        return Dataset(self.samples + other.samples)


def feature_matrix(samples: Sequence[Sample]) -> np.ndarray:
    """Stack the samples' feature vectors into an (n, d) float64 matrix."""
    return np.stack([s.features for s in samples]).astype(np.float64)


@dataclass(frozen=True)
class SplitSpec:
    """User-level train/val/test fractions plus the shuffling seed."""

    train_user_fraction: float
    val_user_fraction: float
    test_user_fraction: float
    seed: int

    def __post_init__(self) -> None:
        fracs = (self.train_user_fraction, self.val_user_fraction, self.test_user_fraction)
        for f in fracs:
            if not (0.0 < f < 1.0):
                raise DataError(f"split fractions must lie in (0, 1), got {f}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension mean and (epsilon-floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = _freeze(np.asarray(self.mean, dtype=np.float64))
        std = _freeze(np.asarray(self.std, dtype=np.float64))
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("normalization mean/std must be 1-D vectors of equal length")
        if np.any(std < STD_EPSILON_FLOOR):
            raise DataError(f"standard deviations must be >= {STD_EPSILON_FLOOR}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


# Floor applied to per-dimension standard deviations so constant dimensions
# normalize to zero instead of dividing by zero.
STD_EPSILON_FLOOR = 1e-8

_HEADER_FIXED = ["sample_id", "country", "user_id", "screen_source", "label"]


def _expected_header(dimension: int) -> list[str]:
    return _HEADER_FIXED + [f"f{i}" for i in range(dimension)]


def load_feature_table(path: str | Path) -> Dataset:
    """Load a feature-table file into a Dataset.

    Row order is preserved; every malformed row is reported with its data-row
    number (the first row after the header is row 1).

    Raises:
        DataError: unreadable file, bad header, malformed row, inconsistent
            dimension, or duplicate sample_id.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc}") from exc

    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"feature table {path} is empty") from None

    n_feat = len(header) - len(_HEADER_FIXED)
    if n_feat < 1 or header != _expected_header(n_feat):
        raise DataError(
            f"feature table {path} has a malformed header; expected "
            f"'sample_id,country,user_id,screen_source,label,f0,...'"
        )

    samples: list[Sample] = []
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(
                f"row {row_no}: expected {n_feat} feature values, got {len(row) - len(_HEADER_FIXED)}"
            )
        sample_id, country, user_id, screen_source, label_txt = row[:5]
        if label_txt not in ("0", "1"):
            raise DataError(f"row {row_no}: label must be '0' or '1', got {label_txt!r}")
        try:
            feats = np.array([float(v) for v in row[5:]], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"row {row_no}: unparseable feature value ({exc})") from exc
        try:
            samples.append(
                Sample(sample_id, country, user_id, screen_source, Label(int(label_txt)), feats)
            )
        except DataError as exc:
            raise DataError(f"row {row_no}: {exc}") from exc

    if not samples:
        raise DataError(f"feature table {path} contains no data rows")
    try:
        return Dataset(tuple(samples))
    except DataError as exc:
        raise DataError(f"feature table {path}: {exc}") from exc


def write_feature_table(ds: Dataset, path: str | Path) -> None:
    """Write a Dataset in the feature-table format (full float precision).

    ``load_feature_table(write_feature_table(ds))`` reproduces *ds* exactly:
    floats are serialized with shortest round-trip repr.
    """
    path = Path(path)
    lines = [",".join(_expected_header(ds.dimension))]
    for s in ds.samples:
        feats = ",".join(repr(float(v)) for v in s.features)
        lines.append(f"{s.sample_id},{s.country},{s.user_id},{s.screen_source},{int(s.label)},{feats}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_by_users(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition a dataset into user-disjoint train/val/test datasets.

    Users are shuffled with the spec seed and allocated to splits with
    largest-remainder rounding, so the three user counts always sum to the
    total and the assignment is deterministic for a fixed seed.

    Raises:
        DataError: fewer than 3 distinct users, or a split would be empty.
    """
    users = sorted(set(s.user_id for s in ds.samples))
    if len(users) < 3:
        raise DataError(f"need at least 3 distinct users to split, got {len(users)}")

    counts = _largest_remainder_counts(
        len(users),
        (spec.train_user_fraction, spec.val_user_fraction, spec.test_user_fraction),
    )
    if min(counts) < 1:
        raise DataError(
            f"too few users ({len(users)}) to populate all three splits with "
            f"fractions {spec.train_user_fraction}/{spec.val_user_fraction}/{spec.test_user_fraction}"
        )

    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(users))
    shuffled = [users[i] for i in order]
    train_users = set(shuffled[: counts[0]])
    val_users = set(shuffled[counts[0] : counts[0] + counts[1]])
    test_users = set(shuffled[counts[0] + counts[1] :])

    def pick(user_set: set[str]) -> Dataset:
        return ds.filter(lambda s: s.user_id in user_set)

    return pick(train_users), pick(val_users), pick(test_users)


def _largest_remainder_counts(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    shortfall = total - sum(counts)
    # Ties broken by position so the allocation is deterministic.
    by_remainder = sorted(range(len(fractions)), key=lambda i: (counts[i] - quotas[i], i))
    for i in range(shortfall):
        counts[by_remainder[i]] += 1
    return counts


def fit_normalization(ds: Dataset) -> NormalizationStats:
    """Per-dimension mean and population standard deviation, epsilon-floored."""
    mat = feature_matrix(ds.samples)
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), STD_EPSILON_FLOOR)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(ds: Dataset, stats: NormalizationStats) -> Dataset:
    """Standardize every sample with the given stats, keeping all metadata."""
    if stats.mean.shape[0] != ds.dimension:
        raise DataError(
            f"normalization stats have dimension {stats.mean.shape[0]}, dataset has {ds.dimension}"
        )
    out = []
    for s in ds.samples:
        scaled = (s.features - stats.mean) / stats.std
        out.append(
            Sample(s.sample_id, s.country, s.user_id, s.screen_source, s.label, scaled)
        )
    return Dataset(tuple(out))
