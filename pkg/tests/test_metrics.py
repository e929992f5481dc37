"""Metric tests against brute-force counting and exhaustive sweep oracles."""

import numpy as np
import pytest

from protopad.data import Label
from protopad.errors import DataError
from protopad.metrics import (
    DetCurve,
    ScoreSet,
    apcer,
    apcer_worst_case,
    bpcer,
    bpcer_at_ap,
    build_report,
    decide,
    det_curve,
    eer,
    export_det_csv,
    parse_det_csv,
    summarize,
)

# ---------------------------------------------------------------------------
# independent oracles: explicit counting loops, no shared code with metrics.py


def oracle_apcer(scores, threshold):
    accepted = 0
    for s in scores:
        if s >= threshold:
            accepted += 1
    return accepted / len(scores)


def oracle_bpcer(scores, threshold):
    rejected = 0
    for s in scores:
        if s < threshold:
            rejected += 1
    return rejected / len(scores)


def oracle_sweep(score_set):
    """All (threshold, worst-case APCER, BPCER) points by direct recount."""
    values = list(score_set.bona_fide_scores)
    for v in score_set.attack_scores.values():
        values.extend(v)
    thresholds = sorted(set([0.0] + values + [float("inf")]))
    points = []
    for t in thresholds:
        worst = max(oracle_apcer(v, t) for v in score_set.attack_scores.values())
        points.append((t, worst, oracle_bpcer(score_set.bona_fide_scores, t)))
    return points


def oracle_eer(points):
    for i, (_, a, b) in enumerate(points):
        if a == b:
            return a
        if i + 1 < len(points):
            a2, b2 = points[i + 1][1], points[i + 1][2]
            if a > b and a2 < b2:
                lam = (a - b) / ((a - b) - (a2 - b2))
                return a + lam * (a2 - a)
    raise AssertionError("no crossing found")


def oracle_bpcer_at_ap(points, ap):
    target = 1.0 / ap
    for i, (_, a, b) in enumerate(points):
        if a <= target:
            if a == target or i == 0:
                return b
            a_prev, b_prev = points[i - 1][1], points[i - 1][2]
            lam = (a_prev - target) / (a_prev - a)
            return b_prev + lam * (b - b_prev)
    raise AssertionError("target never reached")


def random_score_set(rng, max_scores=100, n_pais=1, easy=False):
    n_bf = int(rng.integers(1, max_scores + 1))
    bf = rng.uniform(0.4 if easy else 0.0, 1.0, size=n_bf)
    attacks = {}
    for p in range(n_pais):
        n_a = int(rng.integers(1, max_scores + 1))
        attacks[f"pais{p}"] = rng.uniform(0.0, 0.6 if easy else 1.0, size=n_a)
    return ScoreSet(bf, attacks)


# ---------------------------------------------------------------------------
# decide / apcer / bpcer


def test_decide_convention():
    assert decide(0.7, 0.5) is Label.BONA_FIDE
    assert decide(0.5, 0.5) is Label.BONA_FIDE  # boundary accepts
    assert decide(0.2, 0.5) is Label.ATTACK


def test_apcer_hand_fixture():
    # four attack presentations, three classified as attacks
    scores = [0.1, 0.2, 0.3, 0.9]
    assert apcer(scores, 0.5) == 0.25


def test_apcer_all_correct_is_zero():
    assert apcer([0.0, 0.1, 0.2], 0.5) == 0.0


def test_threshold_zero_limits():
    assert apcer([0.3, 0.8], 0.0) == 1.0
    assert bpcer([0.3, 0.8], 0.0) == 0.0


def test_apcer_matches_counting_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        scores = rng.uniform(0, 1, size=int(rng.integers(1, 40)))
        t = float(rng.uniform(0, 1))
        assert apcer(scores, t) == oracle_apcer(scores, t)


def test_apcer_empty_errors():
    with pytest.raises(DataError):
        apcer([], 0.5)
    with pytest.raises(DataError):
        apcer_worst_case({}, 0.5)


def test_apcer_worst_case():
    attacks = {"a": [0.9, 0.1], "b": [0.9, 0.9, 0.9, 0.1]}
    # APCERs at 0.5: 0.5 and 0.75
    assert apcer_worst_case(attacks, 0.5) == 0.75
    assert apcer_worst_case({"only": [0.9, 0.1]}, 0.5) == apcer([0.9, 0.1], 0.5)


def test_apcer_worst_case_matches_per_pais_oracle():
    rng = np.random.default_rng(12)
    attacks = {f"p{i}": rng.uniform(0, 1, size=10) for i in range(5)}
    for t in rng.uniform(0, 1, size=20):
        expected = max(oracle_apcer(v, t) for v in attacks.values())
        assert apcer_worst_case(attacks, float(t)) == expected


def test_bpcer_hand_fixture():
    scores = [0.9] * 9 + [0.1]
    assert bpcer(scores, 0.5) == 0.1


def test_bpcer_matches_counting_oracle():
    rng = np.random.default_rng(13)
    for _ in range(50):
        scores = rng.uniform(0, 1, size=int(rng.integers(1, 40)))
        t = float(rng.uniform(0, 1))
        assert bpcer(scores, t) == oracle_bpcer(scores, t)


def test_apcer_plus_attack_accuracy_is_one():
    rng = np.random.default_rng(14)
    for _ in range(20):
        scores = rng.uniform(0, 1, size=30)
        t = float(rng.uniform(0, 1))
        accuracy = np.mean(scores < t)  # correctly rejected attacks
        assert apcer(scores, t) + accuracy == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------------------
# DET curve


def test_det_curve_separable_reaches_origin():
    s = ScoreSet([0.8, 0.9], {"screen_display": [0.1, 0.2]})
    curve = det_curve(s)
    assert any(a == 0.0 and b == 0.0 for a, b in zip(curve.apcer, curve.bpcer))


def test_det_curve_endpoints():
    rng = np.random.default_rng(15)
    s = random_score_set(rng)
    curve = det_curve(s)
    assert curve.apcer[0] == 1.0 and curve.bpcer[0] == 0.0
    assert curve.apcer[-1] == 0.0 and curve.bpcer[-1] == 1.0


def test_det_curve_identical_scores_jumps_between_regimes():
    s = ScoreSet([0.5, 0.5], {"screen_display": [0.5, 0.5]})
    curve = det_curve(s)
    pairs = {(a, b) for a, b in zip(curve.apcer, curve.bpcer)}
    assert pairs == {(1.0, 0.0), (0.0, 1.0)}


def test_det_curve_matches_exhaustive_recount():
    rng = np.random.default_rng(16)
    s = random_score_set(rng, max_scores=25, n_pais=2)
    curve = det_curve(s)
    expected = oracle_sweep(s)
    assert len(expected) == curve.thresholds.size
    for (t, a, b), tc, ac, bc in zip(expected, curve.thresholds, curve.apcer, curve.bpcer):
        assert t == tc and a == ac and b == bc


def test_det_curve_monotonicity():
    rng = np.random.default_rng(17)
    for _ in range(20):
        curve = det_curve(random_score_set(rng, max_scores=30))
        assert np.all(np.diff(curve.apcer) <= 0)
        assert np.all(np.diff(curve.bpcer) >= 0)


def test_det_curve_empty_population_errors():
    with pytest.raises(DataError):
        det_curve(ScoreSet([], {"screen_display": [0.5]}))
    with pytest.raises(DataError):
        det_curve(ScoreSet([0.5], {"screen_display": []}))


def test_score_set_range_validation():
    with pytest.raises(DataError):
        ScoreSet([1.5], {"screen_display": [0.5]})
    with pytest.raises(DataError):
        ScoreSet([0.5], {"screen_display": [float("nan")]})


# ---------------------------------------------------------------------------
# EER


def test_eer_hand_fixture_exact():
    s = ScoreSet([0.9, 0.6, 0.4], {"screen_display": [0.5, 0.3, 0.1]})
    assert eer(det_curve(s)) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_eer_separable_is_zero():
    s = ScoreSet([0.7, 0.8, 0.9], {"screen_display": [0.1, 0.2]})
    assert eer(det_curve(s)) == 0.0


def test_eer_identical_populations_is_half():
    s = ScoreSet([0.3, 0.7], {"screen_display": [0.3, 0.7]})
    assert eer(det_curve(s)) == 0.5


def test_eer_matches_sweep_oracle():
    rng = np.random.default_rng(18)
    for _ in range(50):
        s = random_score_set(rng, max_scores=40)
        assert eer(det_curve(s)) == pytest.approx(oracle_eer(oracle_sweep(s)), abs=1e-12)


def test_eer_bounds():
    """EER stays in [0, 1] always, near-or-below 0.5 for ordered populations.

    The 0.5 + 1/(2 min N) allowance only makes sense when bona fide scores
    stochastically dominate attack scores; rank-reversed data can reach an
    EER of 1 legitimately, so fully random sets are checked against [0, 1].
    """
    rng = np.random.default_rng(19)
    for _ in range(40):
        s = random_score_set(rng, max_scores=30)
        assert 0.0 <= eer(det_curve(s)) <= 1.0
    for _ in range(40):
        n_bf = int(rng.integers(10, 60))
        n_att = int(rng.integers(10, 60))
        s = ScoreSet(
            rng.uniform(0.4, 1.0, n_bf), {"screen_display": rng.uniform(0.0, 0.6, n_att)}
        )
        assert 0.0 <= eer(det_curve(s)) <= 0.5 + 1.0 / (2 * min(n_bf, n_att))
    easy = ScoreSet(rng.uniform(0.7, 1.0, 20), {"screen_display": rng.uniform(0.0, 0.3, 20)})
    assert eer(det_curve(easy)) == 0.0


# ---------------------------------------------------------------------------
# BPCER_AP


def test_bpcer_at_ap_exact_hit():
    # 10 attacks with exactly one above 0.5 -> APCER 0.1; 10 bona fide with two
    # below 0.5 -> BPCER 0.2 at the same threshold.
    s = ScoreSet(
        [0.1, 0.2] + [0.9] * 8,
        {"screen_display": [0.8] + [0.3] * 9},
    )
    curve = det_curve(s)
    idx = np.where(curve.apcer == 0.1)[0]
    assert idx.size > 0 and curve.bpcer[idx[0]] == 0.2
    assert bpcer_at_ap(curve, 10) == 0.2


def test_bpcer_at_ap_separable_zero():
    s = ScoreSet([0.8, 0.9], {"screen_display": [0.1, 0.2]})
    curve = det_curve(s)
    for ap in (10, 20, 100):
        assert bpcer_at_ap(curve, ap) == 0.0


def test_bpcer_at_ap_matches_constrained_oracle():
    rng = np.random.default_rng(20)
    for _ in range(50):
        s = random_score_set(rng, max_scores=40)
        curve = det_curve(s)
        points = oracle_sweep(s)
        for ap in (10, 20, 100):
            assert bpcer_at_ap(curve, ap) == pytest.approx(
                oracle_bpcer_at_ap(points, ap), abs=1e-9
            )


def test_bpcer_at_ap_rejects_bad_ap():
    curve = det_curve(ScoreSet([0.8], {"screen_display": [0.1]}))
    with pytest.raises(DataError):
        bpcer_at_ap(curve, 0)


# ---------------------------------------------------------------------------
# invariances


def test_order_invariance():
    rng = np.random.default_rng(21)
    bf = rng.uniform(0, 1, 25)
    att = rng.uniform(0, 1, 25)
    s1 = ScoreSet(bf, {"screen_display": att})
    s2 = ScoreSet(bf[::-1].copy(), {"screen_display": rng.permutation(att)})
    assert summarize(s1) == summarize(s2)


def test_scale_consistency_under_monotone_transform():
    rng = np.random.default_rng(22)
    for transform in (lambda x: x**3, lambda x: 0.25 + x / 2.0):
        bf = rng.uniform(0, 1, 30)
        att = rng.uniform(0, 1, 30)
        before = summarize(ScoreSet(bf, {"screen_display": att}))
        after = summarize(ScoreSet(transform(bf), {"screen_display": transform(att)}))
        assert before.eer == pytest.approx(after.eer, abs=1e-12)
        assert before.bpcer10 == pytest.approx(after.bpcer10, abs=1e-12)
        assert before.bpcer20 == pytest.approx(after.bpcer20, abs=1e-12)
        assert before.bpcer100 == pytest.approx(after.bpcer100, abs=1e-12)


# ---------------------------------------------------------------------------
# report


def test_report_perfect_separation_all_zero():
    s = ScoreSet([0.8, 0.9, 0.95], {"screen_display": [0.05, 0.1]})
    report = build_report({"ESP": s})
    row = report.countries["ESP"]
    assert (row.eer, row.bpcer10, row.bpcer20, row.bpcer100) == (0, 0, 0, 0)
    assert row.n_bona_fide == 3 and row.n_attack == 2


def test_report_keys_match_inputs():
    rng = np.random.default_rng(23)
    sets = {c: random_score_set(rng, max_scores=20) for c in ("ESP", "CHL", "ARG", "CRI")}
    report = build_report(sets)
    assert set(report.countries) == set(sets)
    assert report.skipped == {}


def test_report_composes_individual_operations():
    rng = np.random.default_rng(24)
    s = random_score_set(rng, max_scores=30)
    report = build_report({"X": s})
    curve = det_curve(s)
    row = report.countries["X"]
    assert row.eer == eer(curve)
    assert row.bpcer10 == bpcer_at_ap(curve, 10)
    assert row.bpcer20 == bpcer_at_ap(curve, 20)
    assert row.bpcer100 == bpcer_at_ap(curve, 100)


def test_report_skips_single_class_country():
    good = ScoreSet([0.9], {"screen_display": [0.1]})
    bad = ScoreSet([0.9, 0.8], {})
    report = build_report({"OK": good, "NOPE": bad})
    assert "NOPE" in report.skipped and "NOPE" not in report.countries
    assert report.as_dict()["_skipped"]["NOPE"] == "no attack scores"


# ---------------------------------------------------------------------------
# CSV export


def test_det_csv_round_trip():
    rng = np.random.default_rng(25)
    curve = det_curve(random_score_set(rng, max_scores=20))
    parsed = parse_det_csv(export_det_csv(curve))
    assert np.array_equal(curve.thresholds, parsed.thresholds)
    assert np.array_equal(curve.apcer, parsed.apcer)
    assert np.array_equal(curve.bpcer, parsed.bpcer)


def test_det_curve_type_validation():
    with pytest.raises(DataError):
        DetCurve(np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
