"""Stratified episode sampling, new-country support extension, synthetic data.

Episode randomness is counter-based: every draw is a pure function of
(spec.seed, draw_index), so arbitrarily many episodes can be generated in
parallel and replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .data import BONA_FIDE_SOURCE, Dataset, Label, Sample
from .errors import DataError
from .protonet import Episode

# Stream tag separating extension-pool draws from episode draws.
_EXTENSION_STREAM = 0xE57E


def _rng(seed: int, draw_index: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**63, draw_index % 2**63])


@dataclass(frozen=True)
class EpisodeSpec:
    """How to draw one episode: per-cell shot counts plus the query recipe.

    The support set holds ``shots_per_country_class`` samples for every
    (support country, class) cell; ``support_pools`` optionally restricts a
    country's support candidates to an explicit sample-id pool (used by the
    new-country extension workflow).
    """

    support_countries: tuple[str, ...]
    class_set: tuple[int, ...] = (int(Label.ATTACK), int(Label.BONA_FIDE))
    shots_per_country_class: int = 2
    query_size: int = 42
    query_balance: bool = True
    seed: int = 0
    support_pools: Mapping[str, frozenset[str]] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "support_countries", tuple(self.support_countries))
        object.__setattr__(self, "class_set", tuple(int(c) for c in self.class_set))
        if not self.support_countries:
            raise DataError("at least one support country is required")
        if len(set(self.support_countries)) != len(self.support_countries):
            raise DataError("support countries must be distinct")
        if len(set(self.class_set)) != len(self.class_set) or not self.class_set:
            raise DataError("class_set must be nonempty and distinct")
        if self.shots_per_country_class < 1:
            raise DataError("shots_per_country_class must be positive")
        if self.query_size < 1:
            raise DataError("query_size must be positive")
        if self.query_balance and self.query_size % len(self.class_set) != 0:
            raise DataError(
                f"balanced query_size {self.query_size} must divide evenly over "
                f"{len(self.class_set)} classes"
            )
        if self.support_pools is not None:
            pools = {c: frozenset(ids) for c, ids in self.support_pools.items()}
            unknown = set(pools) - set(self.support_countries)
            if unknown:
                raise DataError(f"support_pools refer to non-support countries {sorted(unknown)}")
            object.__setattr__(self, "support_pools", pools)

    @property
    def support_size(self) -> int:
        return len(self.support_countries) * len(self.class_set) * self.shots_per_country_class


@dataclass(frozen=True)
class ExtensionSpec:
    """Few-shot extension: which country to add and how much of it."""

    new_country: str
    n_new_users: int = 5
    images_per_screen_source: int = 15

    def __post_init__(self) -> None:
        if self.n_new_users < 1:
            raise DataError("n_new_users must be at least 1")
        if self.images_per_screen_source < 1:
            raise DataError("images_per_screen_source must be at least 1")


@dataclass(frozen=True)
class ExtensionReport:
    """What the extension actually added to the support pool."""

    new_country: str
    selected_users: tuple[str, ...]
    images_per_source: dict[str, int]
    n_attack_images: int
    n_bona_fide_images: int

    @property
    def total_added_images(self) -> int:
        return self.n_attack_images + self.n_bona_fide_images


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster stand-in for a multi-country capture corpus.

    Every sample is country_mean + class_offset + user_offset
    (+ screen_artifact for attacks) + isotropic noise. The class offset is
    +/- class_separation/2 along one coordinate axis (sign convention: bona
    fide positive); ``class_axes`` optionally picks a different axis per
    country, and countries listed in ``class_axis_flips`` swap the two class
    sides, so a new country's class geometry can be displaced from or even
    anti-aligned with the training countries'.
    """

    countries: tuple[str, ...]
    users_per_country: int | Mapping[str, int] = 10
    screen_sources_per_country: int | Mapping[str, int] = 3
    images_per_user_per_condition: int = 5
    dimension: int = 16
    class_separation: float = 4.0
    country_spread: float = 1.0
    screen_artifact_scale: float = 0.5
    user_offset_scale: float = 0.25
    noise_sigma: float = 0.5
    seed: int = 0
    class_axes: Mapping[str, int] | None = None
    class_axis_flips: tuple[str, ...] = ()

    def users_for(self, country: str) -> int:
        if isinstance(self.users_per_country, int):
            return self.users_per_country
        return int(self.users_per_country[country])

    def screens_for(self, country: str) -> int:
        if isinstance(self.screen_sources_per_country, int):
            return self.screen_sources_per_country
        return int(self.screen_sources_per_country[country])

    def __post_init__(self) -> None:
        object.__setattr__(self, "countries", tuple(self.countries))
        if not self.countries or len(set(self.countries)) != len(self.countries):
            raise DataError("countries must be a nonempty list of distinct codes")
        for name in ("users_per_country", "screen_sources_per_country"):
            value = getattr(self, name)
            if isinstance(value, Mapping):
                value = dict(value)
                object.__setattr__(self, name, value)
                if set(value) != set(self.countries):
                    raise DataError(f"{name} mapping must cover exactly the countries")
                if any(int(v) < 1 for v in value.values()):
                    raise DataError(f"{name} values must be positive")
            elif value < 1:
                raise DataError(f"{name} must be positive")
        if min(self.images_per_user_per_condition, self.dimension) < 1:
            raise DataError("counts and dimension must be positive")
        if self.class_separation <= 0:
            raise DataError("class_separation must be > 0")
        for name in ("country_spread", "screen_artifact_scale", "user_offset_scale", "noise_sigma"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if self.class_axes is not None:
            axes = dict(self.class_axes)
            unknown = set(axes) - set(self.countries)
            if unknown:
                raise DataError(f"class_axes refer to unknown countries {sorted(unknown)}")
            if any(not (0 <= a < self.dimension) for a in axes.values()):
                raise DataError("class axis indices must lie in [0, dimension)")
            object.__setattr__(self, "class_axes", axes)
        object.__setattr__(self, "class_axis_flips", tuple(self.class_axis_flips))
        unknown_flips = set(self.class_axis_flips) - set(self.countries)
        if unknown_flips:
            raise DataError(f"class_axis_flips refer to unknown countries {sorted(unknown_flips)}")


def _cells(ds: Dataset, spec: EpisodeSpec) -> dict[tuple[str, int], list[Sample]]:
    cells: dict[tuple[str, int], list[Sample]] = {
        (c, k): [] for c in spec.support_countries for k in spec.class_set
    }
    pools = spec.support_pools or {}
    for s in ds.samples:
        key = (s.country, int(s.label))
        if key not in cells:
            continue
        pool = pools.get(s.country)
        if pool is not None and s.sample_id not in pool:
            continue
        cells[key].append(s)
    return cells


def _draw_support(ds: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> list[Sample]:
    cells = _cells(ds, spec)
    support: list[Sample] = []
    for country in spec.support_countries:
        for cls in spec.class_set:
            candidates = cells[(country, cls)]
            if len(candidates) < spec.shots_per_country_class:
                raise DataError(
                    f"cell ({country}, class {cls}) has {len(candidates)} samples, "
                    f"needs {spec.shots_per_country_class}"
                )
            idx = rng.choice(len(candidates), size=spec.shots_per_country_class, replace=False)
            support.extend(candidates[i] for i in sorted(idx))
    return support


def sample_support(ds: Dataset, spec: EpisodeSpec, draw_index: int = 0) -> list[Sample]:
    """Draw only the support set for (spec.seed, draw_index)."""
    return _draw_support(ds, spec, _rng(spec.seed, draw_index))


def _draw_from_pool(
    pool: list[Sample], count: int, rng: np.random.Generator
) -> list[Sample] | None:
    if len(pool) < count:
        return None
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(idx)]


def sample_episode(ds: Dataset, spec: EpisodeSpec, draw_index: int) -> Episode:
    """Draw one episode, deterministic in (spec.seed, draw_index).

    The query set is drawn from users disjoint from the support users when
    the dataset allows it; otherwise it falls back to excluding only the
    support sample ids and flags the episode with ``users_overlap``.
    """
    rng = _rng(spec.seed, draw_index)
    support = _draw_support(ds, spec, rng)
    support_ids = {s.sample_id for s in support}
    support_users = {s.user_id for s in support}

    def query_candidates(user_disjoint: bool) -> dict[int, list[Sample]]:
        by_class: dict[int, list[Sample]] = {c: [] for c in spec.class_set}
        for s in ds.samples:
            if s.sample_id in support_ids or int(s.label) not in by_class:
                continue
            if user_disjoint and s.user_id in support_users:
                continue
            by_class[int(s.label)].append(s)
        return by_class

    for user_disjoint in (True, False):
        by_class = query_candidates(user_disjoint)
        # The fallback pass reuses the same generator; draws stay deterministic
        # because the feasibility check is itself a pure function of the data.
        if spec.query_balance:
            per_class = spec.query_size // len(spec.class_set)
            if all(len(by_class[c]) >= per_class for c in spec.class_set):
                query: list[Sample] = []
                for c in spec.class_set:
                    chosen = _draw_from_pool(by_class[c], per_class, rng)
                    assert chosen is not None
                    query.extend(chosen)
                return Episode(tuple(support), tuple(query), spec.class_set,
                               users_overlap=not user_disjoint)
        else:
            pool = [s for c in spec.class_set for s in by_class[c]]
            chosen = _draw_from_pool(pool, spec.query_size, rng)
            if chosen is not None:
                return Episode(tuple(support), tuple(chosen), spec.class_set,
                               users_overlap=not user_disjoint)
    raise DataError(
        f"dataset cannot supply a query set of {spec.query_size} "
        f"(balance={spec.query_balance}) after removing the support"
    )


def extend_support(
    base_spec: EpisodeSpec, ds_new: Dataset, ext: ExtensionSpec
) -> tuple[EpisodeSpec, ExtensionReport]:
    """Add a new country to the support recipe from a few of its users.

    Selects ``n_new_users`` users of the new country (seeded by the base
    spec), pools their samples capped at ``images_per_screen_source`` per
    screen source (bona fide counts as the single source "none"), and returns
    a spec whose support for the new country is restricted to that pool,
    together with a report of what was added.

    Raises:
        DataError: the new country is missing, lacks enough users, or the
            selected pool does not cover every class.
    """
    if ext.new_country in base_spec.support_countries:
        raise DataError(f"{ext.new_country} is already a support country")
    new_samples = [s for s in ds_new.samples if s.country == ext.new_country]
    if not new_samples:
        raise DataError(f"dataset has no samples for new country {ext.new_country!r}")
    users = sorted({s.user_id for s in new_samples})
    if len(users) < ext.n_new_users:
        raise DataError(
            f"new country {ext.new_country!r} has {len(users)} users, "
            f"needs {ext.n_new_users}"
        )
    rng = _rng(base_spec.seed, _EXTENSION_STREAM)
    picked = rng.choice(len(users), size=ext.n_new_users, replace=False)
    selected = tuple(users[i] for i in sorted(picked))
    selected_set = set(selected)

    by_source: dict[str, list[Sample]] = {}
    for s in new_samples:
        if s.user_id in selected_set:
            by_source.setdefault(s.screen_source, []).append(s)

    pool: list[Sample] = []
    images_per_source: dict[str, int] = {}
    for source in sorted(by_source):
        group = by_source[source]
        if len(group) > ext.images_per_screen_source:
            idx = rng.choice(len(group), size=ext.images_per_screen_source, replace=False)
            group = [group[i] for i in sorted(idx)]
        images_per_source[source] = len(group)
        pool.extend(group)

    covered = {int(s.label) for s in pool}
    missing = [c for c in base_spec.class_set if c not in covered]
    if missing:
        raise DataError(
            f"selected users of {ext.new_country!r} do not cover classes {missing}"
        )

    n_bf = sum(1 for s in pool if s.label is Label.BONA_FIDE)
    report = ExtensionReport(
        new_country=ext.new_country,
        selected_users=selected,
        images_per_source=images_per_source,
        n_attack_images=len(pool) - n_bf,
        n_bona_fide_images=n_bf,
    )
    pools = dict(base_spec.support_pools or {})
    pools[ext.new_country] = frozenset(s.sample_id for s in pool)
    extended = replace(
        base_spec,
        support_countries=base_spec.support_countries + (ext.new_country,),
        support_pools=pools,
    )
    return extended, report


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.eye(d)[0]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a deterministic labeled feature dataset from the spec.

    Per country there are ``users_per_country`` users, each contributing
    ``images_per_user_per_condition`` bona fide images plus the same count
    for every screen source. Attack samples get their screen source's fixed
    offset plus a sinusoidal ripple along a per-source direction; bona fide
    samples carry screen_source "none".
    """
    rng = np.random.default_rng(spec.seed % 2**63)
    d = spec.dimension
    axes = spec.class_axes or {}
    half = spec.class_separation / 2.0

    samples: list[Sample] = []
    for country in spec.countries:
        country_mean = spec.country_spread * rng.standard_normal(d)
        axis = int(axes.get(country, 0))
        sign = -1.0 if country in spec.class_axis_flips else 1.0
        class_offset = {
            int(Label.BONA_FIDE): sign * half * np.eye(d)[axis],
            int(Label.ATTACK): -sign * half * np.eye(d)[axis],
        }
        sources = [f"scr{j:02d}" for j in range(spec.screens_for(country))]
        screen_offset: dict[str, np.ndarray] = {}
        screen_ripple: dict[str, tuple[np.ndarray, float, float]] = {}
        for source in sources:
            screen_offset[source] = spec.screen_artifact_scale * _unit(rng, d)
            screen_ripple[source] = (
                _unit(rng, d),
                float(rng.uniform(0.5, 1.5)),
                float(rng.uniform(0.0, 2.0 * np.pi)),
            )
        for ui in range(spec.users_for(country)):
            user_id = f"{country}-u{ui:03d}"
            user_offset = spec.user_offset_scale * rng.standard_normal(d)
            conditions = [(BONA_FIDE_SOURCE, Label.BONA_FIDE)] + [
                (source, Label.ATTACK) for source in sources
            ]
            for source, label in conditions:
                for img in range(spec.images_per_user_per_condition):
                    x = country_mean + class_offset[int(label)] + user_offset
                    if label is Label.ATTACK:
                        direction, freq, phase = screen_ripple[source]
                        ripple = 0.5 * spec.screen_artifact_scale * np.sin(
                            2.0 * np.pi * freq * img / spec.images_per_user_per_condition + phase
                        )
                        x = x + screen_offset[source] + ripple * direction
                    x = x + spec.noise_sigma * rng.standard_normal(d)
                    samples.append(
                        Sample(
                            sample_id=f"{user_id}-{source}-i{img:03d}",
                            country=country,
                            user_id=user_id,
                            screen_source=source,
                            label=label,
                            features=x,
                        )
                    )
    return Dataset(tuple(samples))


def synthetic_counts(ds: Dataset) -> list[dict[str, object]]:
    """Per-country (users, screen sources, images) summary rows."""
    rows = []
    for country in ds.countries():
        country_samples = [s for s in ds.samples if s.country == country]
        users = {s.user_id for s in country_samples}
        screens = {s.screen_source for s in country_samples if s.screen_source != BONA_FIDE_SOURCE}
        rows.append(
            {
                "country": country,
                "n_users": len(users),
                "n_screen_sources": len(screens),
                "n_images": len(country_samples),
            }
        )
    return rows
