"""ISO/IEC 30107-3 PAD error rates: APCER, BPCER, DET curve, EER, BPCER_AP.

Score convention: every score is the posterior probability of the bona fide
class, in [0, 1]. Decision rule: a presentation is accepted as bona fide iff
score >= threshold, so raising the threshold rejects more presentations.

APCER is reported per PAIS (presentation attack instrument species) and the
worst case over species governs the system. With a single species
("screen_display" by default) the worst case equals the plain APCER.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Label
from .errors import DataError

DEFAULT_PAIS = "screen_display"


def _as_scores(values: Iterable[float], what: str) -> np.ndarray:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError(f"{what} must be finite values in [0, 1]")
    return arr


@dataclass(frozen=True)
class ScoreSet:
    """Bona fide scores plus per-PAIS attack scores for one evaluation group."""

    bona_fide_scores: np.ndarray
    attack_scores: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "bona_fide_scores", _as_scores(self.bona_fide_scores, "bona fide scores")
        )
        object.__setattr__(
            self,
            "attack_scores",
            {pais: _as_scores(scores, f"attack scores for {pais!r}")
             for pais, scores in dict(self.attack_scores).items()},
        )

    @property
    def n_bona_fide(self) -> int:
        return int(self.bona_fide_scores.size)

    @property
    def n_attack(self) -> int:
        return int(sum(v.size for v in self.attack_scores.values()))


@dataclass(frozen=True)
class DetCurve:
    """(threshold, worst-case APCER, BPCER) triples, thresholds increasing."""

    thresholds: np.ndarray
    apcer: np.ndarray
    bpcer: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.thresholds, dtype=np.float64)
        a = np.asarray(self.apcer, dtype=np.float64)
        b = np.asarray(self.bpcer, dtype=np.float64)
        if not (t.shape == a.shape == b.shape) or t.ndim != 1 or t.size < 2:
            raise DataError("curve needs equal-length 1-D arrays with at least two points")
        if np.any(np.diff(t) <= 0):
            raise DataError("curve thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "apcer", a)
        object.__setattr__(self, "bpcer", b)


@dataclass(frozen=True)
class CountrySummary:
    """The per-country row of a report: EER and the three BPCER_AP points."""

    eer: float
    bpcer10: float
    bpcer20: float
    bpcer100: float
    n_bona_fide: int
    n_attack: int

    def as_dict(self) -> dict[str, float | int]:
        return {
            "eer": self.eer,
            "bpcer10": self.bpcer10,
            "bpcer20": self.bpcer20,
            "bpcer100": self.bpcer100,
            "n_bona_fide": self.n_bona_fide,
            "n_attack": self.n_attack,
        }


@dataclass(frozen=True)
class PadReport:
    """Per-country summaries plus the countries that could not be scored."""

    countries: dict[str, CountrySummary]
    skipped: dict[str, str]

    def as_dict(self) -> dict[str, dict]:
        doc: dict[str, dict] = {c: s.as_dict() for c, s in sorted(self.countries.items())}
        if self.skipped:
            doc["_skipped"] = dict(sorted(self.skipped.items()))
        return doc


def decide(score: float, threshold: float) -> Label:
    """Accept as bona fide iff score >= threshold (boundary accepts)."""
    return Label.BONA_FIDE if score >= threshold else Label.ATTACK


def apcer(attack_scores_for_pais: Sequence[float] | np.ndarray, threshold: float) -> float:
    """Fraction of one species' attack presentations accepted as bona fide.

    Equals 1 - mean(RES_i) where RES_i is 1 when the i-th attack presentation
    is (correctly) classified as an attack.
    """
    scores = _as_scores(attack_scores_for_pais, "attack scores")
    if scores.size == 0:
        raise DataError("APCER requires at least one attack score")
    return float(np.mean(scores >= threshold))


def apcer_worst_case(
    attack_scores: Mapping[str, Sequence[float] | np.ndarray], threshold: float
) -> float:
    """Maximum APCER over all attack species at this threshold."""
    if not attack_scores:
        raise DataError("worst-case APCER requires at least one PAIS")
    return max(apcer(scores, threshold) for scores in attack_scores.values())


def bpcer(bona_fide_scores: Sequence[float] | np.ndarray, threshold: float) -> float:
    """Fraction of bona fide presentations wrongly rejected as attacks."""
    scores = _as_scores(bona_fide_scores, "bona fide scores")
    if scores.size == 0:
        raise DataError("BPCER requires at least one bona fide score")
    return float(np.mean(scores < threshold))


def det_curve(scores: ScoreSet) -> DetCurve:
    """Sweep every achievable operating point of a score set.

    Thresholds are the sorted distinct scores with a 0.0 sentinel below (all
    presentations accepted: APCER 1, BPCER 0) and a +inf sentinel above (all
    rejected: APCER 0, BPCER 1). Each point records the worst-case APCER over
    species and the BPCER.
    """
    if scores.n_bona_fide == 0 or scores.n_attack == 0:
        raise DataError("DET curve requires both bona fide and attack scores")
    if any(v.size == 0 for v in scores.attack_scores.values()):
        raise DataError("every PAIS must have at least one score")
    all_scores = np.concatenate([scores.bona_fide_scores, *scores.attack_scores.values()])
    thresholds = np.unique(np.concatenate([[0.0], all_scores, [np.inf]]))

    bf = scores.bona_fide_scores
    bpcer_vals = np.array([np.mean(bf < t) for t in thresholds])
    apcer_vals = np.zeros_like(thresholds)
    for pais_scores in scores.attack_scores.values():
        per = np.array([np.mean(pais_scores >= t) for t in thresholds])
        apcer_vals = np.maximum(apcer_vals, per)
    return DetCurve(thresholds, apcer_vals, bpcer_vals)


def eer(curve: DetCurve) -> float:
    """Operating point where APCER and BPCER are equal.

    Walks the curve for a sign change of APCER - BPCER; an exact equality is
    returned as-is, otherwise the two piecewise-linear rate segments are
    intersected between the bracketing points.
    """
    diff = curve.apcer - curve.bpcer
    for i in range(diff.size):
        if diff[i] == 0.0:
            return float(curve.apcer[i])
        if i + 1 < diff.size and diff[i] > 0.0 > diff[i + 1]:
            lam = diff[i] / (diff[i] - diff[i + 1])
            return float(curve.apcer[i] + lam * (curve.apcer[i + 1] - curve.apcer[i]))
    raise DataError("curve has no APCER/BPCER crossing; sentinels are missing")


def bpcer_at_ap(curve: DetCurve, ap: int) -> float:
    """BPCER at the operating point where APCER reaches 100/AP percent.

    Uses the smallest threshold whose worst-case APCER is <= 1/ap; when the
    target APCER is not hit exactly, the BPCER is linearly interpolated
    between the bracketing curve points at APCER = 1/ap.
    """
    if ap < 1:
        raise DataError("ap must be a positive integer")
    target = 1.0 / ap
    for i in range(curve.apcer.size):
        if curve.apcer[i] <= target:
            if curve.apcer[i] == target or i == 0:
                return float(curve.bpcer[i])
            a_hi, a_lo = curve.apcer[i - 1], curve.apcer[i]
            lam = (a_hi - target) / (a_hi - a_lo)
            return float(curve.bpcer[i - 1] + lam * (curve.bpcer[i] - curve.bpcer[i - 1]))
    raise DataError("curve never reaches the target APCER; sentinels are missing")


def summarize(scores: ScoreSet) -> CountrySummary:
    """EER plus BPCER10/20/100 for one score set."""
    curve = det_curve(scores)
    return CountrySummary(
        eer=eer(curve),
        bpcer10=bpcer_at_ap(curve, 10),
        bpcer20=bpcer_at_ap(curve, 20),
        bpcer100=bpcer_at_ap(curve, 100),
        n_bona_fide=scores.n_bona_fide,
        n_attack=scores.n_attack,
    )


def build_report(scores_by_country: Mapping[str, ScoreSet]) -> PadReport:
    """Per-country summary table; countries missing a class are skipped."""
    if not scores_by_country:
        raise DataError("report requires at least one country")
    countries: dict[str, CountrySummary] = {}
    skipped: dict[str, str] = {}
    for country, scores in scores_by_country.items():
        if scores.n_bona_fide == 0 or scores.n_attack == 0:
            skipped[country] = (
                "no attack scores" if scores.n_attack == 0 else "no bona fide scores"
            )
            continue
        countries[country] = summarize(scores)
    return PadReport(countries=countries, skipped=skipped)


def export_det_csv(curve: DetCurve) -> str:
    """DET curve as CSV text: header threshold,apcer,bpcer, full precision."""
    lines = ["threshold,apcer,bpcer"]
    for t, a, b in zip(curve.thresholds, curve.apcer, curve.bpcer):
        lines.append(f"{float(t)!r},{float(a)!r},{float(b)!r}")
    return "\n".join(lines) + "\n"


def parse_det_csv(text: str) -> DetCurve:
    """Inverse of export_det_csv."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != "threshold,apcer,bpcer":
        raise DataError("DET CSV must start with header 'threshold,apcer,bpcer'")
    rows = [tuple(float(v) for v in ln.split(",")) for ln in lines[1:]]
    if not rows:
        raise DataError("DET CSV has no data rows")
    arr = np.array(rows, dtype=np.float64)
    return DetCurve(arr[:, 0], arr[:, 1], arr[:, 2])
