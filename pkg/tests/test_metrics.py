import math
from fractions import Fraction

import numpy as np
import pytest

from livepad import metrics as M
from livepad.errors import UsageError


# ---------------------------------------------------------------------------
# brute-force oracles, kept deliberately naive


def oracle_apcer(attacks, t):
    return sum(1 for a in attacks if a >= t) / len(attacks)


def oracle_bpcer(bona, t):
    return sum(1 for b in bona if b < t) / len(bona)


def oracle_roc(bona, attacks):
    ts = [math.inf] + sorted(set(bona) | set(attacks), reverse=True) + [-math.inf]
    tpr = lambda t: sum(1 for b in bona if b >= t) / len(bona)
    pts = [(t, oracle_apcer(attacks, t), tpr(t)) for t in ts]
    # exact trapezoid on counts
    fp = [sum(1 for a in attacks if a >= t) for t in ts]
    tp = [sum(1 for b in bona if b >= t) for t in ts]
    area = sum(Fraction((f1 - f0) * (p0 + p1), 2) for f0, f1, p0, p1 in zip(fp, fp[1:], tp, tp[1:]))
    return pts, area / (len(bona) * len(attacks))


def mann_whitney(bona, attacks):
    wins = sum(Fraction(1) if b > a else Fraction(1, 2) if b == a else 0
               for b in bona for a in attacks)
    return wins / (len(bona) * len(attacks))


def oracle_bpcer_at(bona, attacks, target):
    ok = [t for t in sorted(set(bona) | set(attacks)) if oracle_apcer(attacks, t) <= target]
    if not ok:
        return None
    t = min(ok)
    return t, oracle_apcer(attacks, t), oracle_bpcer(bona, t)


def random_set(rng, ties=True):
    nb, na = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    if ties:
        # coarse grid so equal scores happen often
        draw = lambda n: rng.integers(0, 8, n) / 7
    else:
        draw = lambda n: rng.random(n)
    species = {f"s{i}": draw(int(rng.integers(1, 6))) for i in range(int(rng.integers(1, 4)))}
    return M.ScoreSet(draw(nb), species)


def test_apcer_bpcer_examples():
    attacks = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    assert M.apcer(attacks, 0.65) == 0.25
    assert M.apcer(attacks, 0.9) == 0.0
    assert M.apcer([0.5], 0.5) == 1.0  # equality accepts
    assert M.bpcer([0.9] * 5, 0.5) == 0.0
    assert M.bpcer([0.1] + [0.9] * 799, 0.5) == 0.00125
    assert M.bpcer([0.5], 0.5) == 0.0
    with pytest.raises(UsageError):
        M.apcer([], 0.5)
    with pytest.raises(UsageError):
        M.bpcer([], 0.5)


def test_rates_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = random_set(rng)
        a, b = list(s.attack_scores()), list(s.bona_fide)
        t = float(rng.integers(0, 9) / 7) if rng.random() < 0.5 else float(rng.random())
        assert M.apcer(a, t) == oracle_apcer(a, t)
        assert M.bpcer(b, t) == oracle_bpcer(b, t)


def test_rates_monotone_in_threshold():
    rng = np.random.default_rng(1)
    s = random_set(rng)
    grid = np.linspace(-0.1, 1.1, 200)
    ap = [M.apcer(s.attack_scores(), t) for t in grid]
    bp = [M.bpcer(s.bona_fide, t) for t in grid]
    assert all(y <= x for x, y in zip(ap, ap[1:]))
    assert all(y >= x for x, y in zip(bp, bp[1:]))


def test_roc_and_auc_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(500):
        s = random_set(rng)
        b, a = list(s.bona_fide), list(s.attack_scores())
        curve = M.roc(s)
        pts, area = oracle_roc(b, a)
        assert [p[0] for p in pts] == list(curve.thresholds)
        assert [p[1] for p in pts] == list(curve.fpr)
        assert [p[2] for p in pts] == list(curve.tpr)
        assert curve.auc == float(area)
        # the trapezoid with step ties is Mann-Whitney even with ties
        assert curve.auc == float(mann_whitney(b, a))


def test_auc_is_mann_whitney_on_tie_free_sets():
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = random_set(rng, ties=False)
        assert M.auc(s) == float(mann_whitney(list(s.bona_fide), list(s.attack_scores())))


def test_roc_curve_shape():
    rng = np.random.default_rng(4)
    s = random_set(rng)
    c = M.roc(s)
    assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0)
    assert (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert np.all(np.diff(c.thresholds) < 0)
    lines = c.to_csv().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert lines[1].startswith("inf,") and lines[-1].startswith("-inf,")


def test_auc_separated_and_flipped():
    assert M.auc(M.ScoreSet([0.9, 0.8], {"a": [0.1, 0.2]})) == 1.0
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = random_set(rng, ties=False)
        flipped = M.ScoreSet(1 - s.bona_fide, {k: 1 - v for k, v in s.attacks.items()})
        assert M.auc(flipped) == pytest.approx(1 - M.auc(s), abs=1e-15)


def test_auc_near_half_for_identical_distributions():
    rng = np.random.default_rng(6)
    scores = rng.random(10000)
    labels = rng.permutation(np.arange(10000) < 5000)
    assert abs(M.auc(M.ScoreSet(scores[labels], {"x": scores[~labels]})) - 0.5) <= 0.05


def test_roc_needs_both_classes():
    with pytest.raises(UsageError):
        M.roc(M.ScoreSet([0.5], {}))
    with pytest.raises(UsageError):
        M.roc(M.ScoreSet([], {"a": [0.5]}))


def test_scoreset_validation():
    with pytest.raises(UsageError):
        M.ScoreSet([1.5], {"a": [0.1]})
    with pytest.raises(UsageError):
        M.ScoreSet([0.5], {"a": [math.nan]})


def test_bpcer_at_apcer_matches_scan():
    rng = np.random.default_rng(7)
    for _ in range(500):
        s = random_set(rng)
        target = float(rng.choice([0.05, 0.1, 0.2, 0.25, 0.5, 0.9]))
        op = M.bpcer_at_apcer(s, target)
        expected = oracle_bpcer_at(list(s.bona_fide), list(s.attack_scores()), target)
        if expected is None:
            assert not op.attainable and op.bpcer == 1.0
        else:
            assert op.attainable
            assert (op.threshold, op.apcer, op.bpcer) == expected


def test_bpcer_at_apcer_examples():
    op = M.bpcer_at_apcer(M.ScoreSet([0.8, 0.9], {"a": [0.1, 0.2]}), 0.1)
    assert op.attainable and op.bpcer == 0.0
    # one attack above every bona fide score, every threshold accepts it
    op = M.bpcer_at_apcer(M.ScoreSet([0.2, 0.3], {"a": [0.9]}), 0.5)
    assert not op.attainable and op.bpcer == 1.0
    with pytest.raises(UsageError):
        M.bpcer_at_apcer(M.ScoreSet([0.2], {"a": [0.9]}), 0.0)


def test_select_threshold_is_acer_optimal():
    rng = np.random.default_rng(8)
    for _ in range(300):
        s = random_set(rng)
        t = M.select_threshold(s)
        got = M.evaluate(s, t).acer
        scan = [M.evaluate(s, c).acer for c in [*np.unique(s.bona_fide), *s.attack_scores(), 2.0]]
        assert got == min(scan)


def test_select_threshold_midpoint_of_gap():
    s = M.ScoreSet([0.8, 0.9], {"a": [0.1, 0.2]})
    assert M.select_threshold(s) == pytest.approx(0.5)


def test_acer_arithmetic_and_display():
    value = M.acer(0.0063, 0.0012)
    assert value == pytest.approx(0.00375, abs=1e-15)
    assert M.pct(value) in ("0.37", "0.38")
    assert M.pct(0.00375) == "0.38"  # binary 0.375 is just above the tie
    assert M.pct(0.125) == "12.50"
    assert M.pct(0.0) == "0.00"


def test_pct_half_even():
    assert M.pct(0.00125, places=1) == "0.1"
    assert M.pct(0.00375, places=1) == "0.4"
    assert M.pct(np.float64(0.5)) == "50.00"


def test_evaluate_all_correct_and_identity():
    s = M.ScoreSet([0.9, 0.95], {"ecoflex": [0.1], "playdoh": [0.2, 0.3]})
    r = M.evaluate(s, 0.5)
    assert (r.apcer, r.bpcer, r.acer, r.auc) == (0.0, 0.0, 0.0, 1.0)
    rng = np.random.default_rng(9)
    for _ in range(100):
        s = random_set(rng)
        r = M.evaluate(s, float(rng.random()))
        assert r.acer == (r.apcer + r.bpcer) / 2
        assert r.apcer == sum(r.per_pai_apcer.values()) / len(r.per_pai_apcer)


def test_evaluate_weighted_aggregation():
    s = M.ScoreSet([0.9], {"a": [0.6], "b": [0.1, 0.1, 0.1]})
    assert M.evaluate(s, 0.5).apcer == 0.5
    assert M.evaluate(s, 0.5, aggregation="weighted").apcer == 0.25
    with pytest.raises(UsageError):
        M.evaluate(s, 0.5, aggregation="median")


def test_report_rows_follow_corpus_order():
    clarkson = ["ecoflex", "photopaper", "playdoh", "woodglue", "synthetic"]
    s = M.ScoreSet([0.9], {k: [0.1] for k in reversed(clarkson)})
    text = M.evaluate(s, 0.5).render()
    rows = [line.split()[0] for line in text.splitlines() if line.startswith("  ")]
    assert rows[:5] == [k.upper() for k in clarkson]

    colfi = list(M.COLFISPOOF_SPECIES)
    assert len(colfi) == 12 and colfi[0] == "dragonskin" and colfi[-1] == "silly-putty"
    s = M.ScoreSet([0.9], {k: [0.1] for k in sorted(colfi, reverse=True)})
    text = M.evaluate(s, 0.5).render(species_order=colfi)
    rows = [line.split()[0] for line in text.splitlines() if line.startswith("  ")]
    assert rows[:12] == [k.upper() for k in colfi]


def test_report_kv_is_sorted_and_flags_unattainable():
    s = M.ScoreSet([0.2, 0.3], {"a": [0.9]})
    r = M.evaluate(s, 0.5, bpcer_at=[0.1])
    kv = r.to_kv().splitlines()
    assert kv == sorted(kv)
    assert "bpcer_at_apcer.0.1.attainable = false" in kv
    assert "(unattainable)" in r.render()


def test_score_file_round_trip(tmp_path):
    path = tmp_path / "scores.csv"
    rows = [("l1", "bona_fide", None, 0.9), ("a1", "attack", "playdoh", 0.1 + 0.2)]
    M.write_scores(path, rows)
    assert path.read_text().splitlines()[0] == "sample_id,label,pai_species,score"
    s = M.read_scores(path)
    assert list(s.bona_fide) == [0.9]
    assert list(s.attacks["playdoh"]) == [0.1 + 0.2]


def test_score_file_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,score\nx,0.5\n")
    with pytest.raises(UsageError):
        M.read_scores(path)
    path.write_text("sample_id,label,pai_species,score\nx,attack,,0.5\n")
    with pytest.raises(UsageError, match=":2:"):
        M.read_scores(path)
    path.write_text("sample_id,label,pai_species,score\nx,maybe,,0.5\n")
    with pytest.raises(UsageError):
        M.read_scores(path)
