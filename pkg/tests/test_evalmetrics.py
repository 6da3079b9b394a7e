import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crackinspect.evalmetrics import (
    REPORT_COLUMNS,
    ConfusionCounts,
    SuiteReport,
    TileEvaluation,
    accuracy,
    associate,
    ccf1,
    confusion,
    cpa,
    crack_presence,
    evaluate_run,
    evaluate_tile,
    mcc,
    tile_prf,
)
from crackinspect.imaging import components_from_pixel_sets, connected_components

from oracles import (
    brute_force_association,
    exact_accuracy,
    exact_ccf1,
    exact_cpa,
    exact_mcc,
    exact_prf,
    naive_confusion,
)


# -- confusion, accuracy, mcc ----------------------------------------------------

def test_confusion_examples():
    assert confusion([1, 1, 1], [1, 1, 1]) == ConfusionCounts(3, 0, 0, 0)
    c = confusion([0, 1, 0, 1], [1, 0, 1, 0])
    assert c.tp == c.tn == 0
    with pytest.raises(ValueError, match="length mismatch"):
        confusion([1, 0], [1])


def test_confusion_matches_naive_loop():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 2, 1000)
    truth = rng.integers(0, 2, 1000)
    c = confusion(pred, truth)
    assert (c.tp, c.fp, c.tn, c.fn) == naive_confusion(pred, truth)
    assert c.total == 1000


def test_accuracy_examples():
    assert accuracy(ConfusionCounts(10, 0, 10, 0)) == 1.0
    assert accuracy(ConfusionCounts(8, 2, 9, 1)) == 0.85
    assert accuracy(ConfusionCounts(0, 5, 0, 5)) == 0.0
    with pytest.raises(ValueError):
        accuracy(ConfusionCounts(0, 0, 0, 0))


def test_mcc_examples():
    assert mcc(ConfusionCounts(4, 0, 7, 0)) == 1.0
    assert mcc(ConfusionCounts(8, 2, 9, 1)) == pytest.approx(70 / 9900 ** 0.5, abs=1e-15)
    assert mcc(ConfusionCounts(8, 2, 9, 1)) == pytest.approx(0.703527, abs=1e-6)
    assert mcc(ConfusionCounts(5, 0, 0, 5)) == 0.0
    assert mcc(ConfusionCounts(0, 4, 0, 3)) == -1.0  # fully inverted predictions
    assert mcc(ConfusionCounts(0, 4, 6, 0)) == 0.0


def test_mcc_against_exact_oracle_large_counts():
    rng = random.Random(1)
    for trial in range(1000):
        hi = rng.choice([10, 1000, 10 ** 6, 10 ** 9])
        tp, fp, tn, fn = (rng.randint(0, hi) for _ in range(4))
        if tp + fp + tn + fn == 0:
            continue
        got = mcc(ConfusionCounts(tp, fp, tn, fn))
        assert abs(got - float(exact_mcc(tp, fp, tn, fn))) <= 1e-12, (tp, fp, tn, fn)
        assert -1.0 <= got <= 1.0
        assert abs(accuracy(ConfusionCounts(tp, fp, tn, fn)) - exact_accuracy(tp, fp, tn, fn)) <= 1e-12


def test_mcc_extreme_counts_do_not_overflow():
    n = 10 ** 9
    assert mcc(ConfusionCounts(n, 0, n, 0)) == 1.0
    assert mcc(ConfusionCounts(0, n, 0, n)) == -1.0
    assert mcc(ConfusionCounts(n, 0, 0, n)) == 0.0
    assert mcc(ConfusionCounts(1, n, n, n)) == pytest.approx(float(exact_mcc(1, n, n, n)), abs=1e-12)


# -- presence and cpa ----------------------------------------------------------

def test_crack_presence_examples():
    assert crack_presence(3, 1) == 1
    assert crack_presence(0, 0) == 1
    assert crack_presence(0, 2) == 0
    assert crack_presence(2, 0) == 0


def _ev(pm=1, f1=1.0, n_g=0):
    return TileEvaluation("t", n_g, 0, None, pm, 1.0, 1.0, f1)


def test_cpa_examples():
    assert cpa([_ev(1), _ev(1)]) == 1.0
    assert cpa([_ev(1), _ev(0)]) == 0.5
    assert cpa([_ev(0), _ev(0), _ev(0)]) == 0.0
    with pytest.raises(ValueError):
        cpa([])


# -- association ---------------------------------------------------------------

def test_associate_identity():
    m = np.zeros((10, 10), bool)
    m[1, 1:5] = True
    m[6:9, 6] = True
    comps = connected_components(m)
    a = associate(comps, comps)
    assert a.pairs == ((0, 0, 4), (1, 1, 3))
    assert a.unmatched_g == a.unmatched_d == ()


def test_associate_greedy_conflict():
    a_pix = {(r, c) for r in range(3) for c in range(3)}  # area 9
    b_pix = {(r, c) for r in (5, 6) for c in (5, 6)}  # area 4
    x_pix = {(2, 0), (2, 1), (2, 2), (2, 3), (3, 4), (4, 5)} | b_pix
    g = components_from_pixel_sets([a_pix, b_pix])
    d = components_from_pixel_sets([x_pix])
    m = np.zeros((10, 10), bool)
    for r, c in x_pix:
        m[r, c] = True
    assert len(connected_components(m)) == 1  # X is a genuine 8-connected crack
    assoc = associate(g, d)
    ga = next(c.id for c in g if c.area == 9)
    gb = next(c.id for c in g if c.area == 4)
    assert assoc.pairs == ((ga, d[0].id, 3),)
    assert assoc.unmatched_g == (gb,)
    assert assoc.unmatched_d == ()


def test_associate_no_detections():
    g = components_from_pixel_sets([{(0, 0)}, {(5, 5), (5, 6)}])
    a = associate(g, [])
    assert a.pairs == () and sorted(a.unmatched_g) == [0, 1]


def test_associate_tie_goes_to_larger_detection():
    g = components_from_pixel_sets([{(0, c) for c in range(4)}])
    d = components_from_pixel_sets([{(0, 0), (0, 1), (1, 0)}, {(0, 2), (0, 3), (1, 3), (2, 3), (3, 3)}])
    a = associate(g, d)
    big = next(c.id for c in d if c.area == 5)
    assert a.pairs == ((0, big, 2),)


def test_associate_iou_measure():
    g = components_from_pixel_sets([{(0, 0), (0, 1)}])
    d = components_from_pixel_sets([{(0, 1), (0, 2), (0, 3)}])
    assert associate(g, d, "iou").pairs == ((0, 0, 0.25),)
    with pytest.raises(ValueError):
        associate(g, d, "dice")


def _random_sets(rng, n, h=12, w=12):
    out = []
    for _ in range(n):
        r, c = rng.integers(0, h - 3), rng.integers(0, w - 3)
        pix = {(int(r + dr), int(c + dc)) for dr in range(4) for dc in range(4) if rng.random() < 0.6}
        out.append(pix or {(int(r), int(c))})
    return out


def test_association_against_brute_force():
    rng = np.random.default_rng(99)
    for trial in range(500):
        g = components_from_pixel_sets(_random_sets(rng, rng.integers(0, 6)))
        d = components_from_pixel_sets(_random_sets(rng, rng.integers(0, 6)))
        a = associate(g, d)
        expect = brute_force_association([set(c.pixels) for c in g], [set(c.pixels) for c in d])
        assert [(g[i].id, d[j].id, ov) for i, j, ov in expect] == list(a.pairs), trial
        # single consumption and count bounds
        assert len(a.pairs) <= min(len(g), len(d))
        assert len({p[1] for p in a.pairs}) == len(a.pairs)
        assert len({p[0] for p in a.pairs}) == len(a.pairs)
        assert all(p[2] > 0 for p in a.pairs)
        assert len(a.pairs) + len(a.unmatched_g) == len(g)
        assert len(a.pairs) + len(a.unmatched_d) == len(d)


# -- per-tile scores and ccf1 -------------------------------------------------------

def test_tile_prf_examples():
    assert tile_prf(0, 0, 0) == (1.0, 1.0, 1.0)
    assert tile_prf(2, 0, 0) == (0.0, 1.0, 0.0)
    r, p, f1 = tile_prf(4, 5, 3)
    assert (r, p) == (0.75, 0.6) and f1 == pytest.approx(2 / 3, abs=1e-15)
    assert tile_prf(0, 3, 0) == (1.0, 0.0, 0.0)
    assert tile_prf(3, 3, 0) == (0.0, 0.0, 0.0)  # 0/0 F1 convention
    with pytest.raises(ValueError):
        tile_prf(1, 1, 2)


def test_ccf1_examples():
    assert ccf1([_ev(f1=1.0, n_g=2), _ev(f1=1.0)]) == 1.0
    assert ccf1([_ev(f1=1.0, n_g=0), _ev(f1=0.0, n_g=3)]) == 0.2
    assert ccf1([_ev(f1=0.0, n_g=1), _ev(f1=0.0)]) == 0.0
    with pytest.raises(ValueError):
        ccf1([])


def _random_tiles(rng, n):
    tiles = []
    for _ in range(n):
        n_g, n_d = rng.randint(0, 6), rng.randint(0, 6)
        tiles.append((n_g, n_d, rng.randint(0, min(n_g, n_d))))
    return tiles


def test_tile_metrics_against_exact_oracle():
    rng = random.Random(7)
    for _ in range(1000):
        tiles = _random_tiles(rng, rng.randint(1, 12))
        evals = [TileEvaluation.from_counts(f"t{i}", *t) for i, t in enumerate(tiles)]
        for e, t in zip(evals, tiles):
            r, p, f1 = exact_prf(*t)
            assert abs(e.recall - r) <= 1e-12 and abs(e.precision - p) <= 1e-12 and abs(e.f1 - f1) <= 1e-12
            assert e.weight == t[0] + 1
        assert abs(ccf1(evals) - exact_ccf1(tiles)) <= 1e-12
        assert abs(cpa(evals) - exact_cpa([t[:2] for t in tiles])) <= 1e-12


@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=15),
       st.randoms())
def test_aggregates_permutation_invariant(raw, rnd):
    tiles = [(g, d, min(m, g, d)) for g, d, m in raw]
    evals = [TileEvaluation.from_counts(f"t{i}", *t) for i, t in enumerate(tiles)]
    shuffled = list(evals)
    rnd.shuffle(shuffled)
    assert ccf1(shuffled) == ccf1(evals)
    assert cpa(shuffled) == cpa(evals)
    assert 0.0 <= ccf1(evals) <= 1.0 and 0.0 <= cpa(evals) <= 1.0


@given(st.integers(0, 8), st.integers(0, 8), st.integers(0, 8))
def test_single_tile_ccf1_is_its_f1(g, d, m):
    e = TileEvaluation.from_counts("t", g, d, min(m, g, d))
    assert ccf1([e]) == e.f1


# -- evaluate_run and reports ---------------------------------------------------------

def _blob_mask(*blobs, shape=(12, 12)):
    m = np.zeros(shape, bool)
    for r, c in blobs:
        m[r:r + 2, c:c + 2] = True
    return m


def _toy_suite():
    truth = {"a": _blob_mask((1, 1)), "b": _blob_mask((1, 1), (8, 8)), "c": _blob_mask(), "d": _blob_mask((4, 4))}
    dets = {0: {"a": _blob_mask((1, 1)), "b": _blob_mask((8, 8))}, 1: {"c": _blob_mask((5, 5)), "d": _blob_mask()}}
    preds = {0: ([1, 1, 0, 0, 0], [1, 0, 0, 0, 1]), 1: ([1, 0], [1, 0])}
    return truth, dets, preds


def test_two_fold_toy_suite_hand_computed():
    truth, dets, preds = _toy_suite()
    rep = evaluate_run(truth, dets, preds, "m", "AllLights", "low")
    f0, f1 = rep.fold_rows()
    # fold 0: tiles a (1/1 matched) and b (1 of 2 matched); patch tp=1 fn=1 tn=2 fp=1
    assert f0.accuracy == 0.6
    assert f0.mcc == pytest.approx(1 / 6, abs=1e-15)
    assert f0.cpa == 1.0
    assert f0.ccf1 == pytest.approx(float(Fraction(1 * 2 + Fraction(2, 3) * 3, 5)), abs=1e-15)
    # fold 1: c is a false alarm, d is missed; patches all correct
    assert (f1.accuracy, f1.mcc, f1.cpa, f1.ccf1) == (1.0, 1.0, 0.0, 0.0)
    (mean,) = rep.mean_rows()
    assert mean.fold == "mean"
    assert mean.accuracy == 0.8
    assert mean.mcc == pytest.approx(7 / 12, abs=1e-15)
    assert mean.cpa == 0.5 and mean.ccf1 == pytest.approx(0.4, abs=1e-15)


def test_oracle_detections_score_one():
    truth, _, _ = _toy_suite()
    truth = {k: v for k, v in truth.items() if v.any()}
    dets = {0: {"a": truth["a"], "b": truth["b"]}, 1: {"d": truth["d"]}}
    preds = {0: ([1, 0, 1], [1, 0, 1]), 1: ([0, 1], [0, 1])}
    (mean,) = evaluate_run(truth, dets, preds).mean_rows()
    assert (mean.accuracy, mean.mcc, mean.cpa, mean.ccf1) == (1.0, 1.0, 1.0, 1.0)


def test_empty_detections_on_cracked_suite():
    truth = {"a": _blob_mask((1, 1)), "b": _blob_mask((3, 3))}
    dets = {0: {"a": _blob_mask()}, 1: {"b": _blob_mask()}}
    preds = {0: ([1, 0], [0, 0]), 1: ([1, 0], [0, 0])}
    (mean,) = evaluate_run(truth, dets, preds).mean_rows()
    assert mean.cpa == 0.0 and mean.ccf1 == 0.0


def test_misaligned_tiles_rejected():
    truth = {"a": _blob_mask((1, 1))}
    with pytest.raises(ValueError, match="misaligned"):
        evaluate_run(truth, {0: {"zz": _blob_mask()}}, {0: ([1], [1])})
    with pytest.raises(ValueError):
        evaluate_tile("a", _blob_mask(), np.zeros((3, 3), bool))


def test_report_serialisation():
    truth, dets, preds = _toy_suite()
    rep = evaluate_run(truth, dets, preds, "m", "AllLights", "low")
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert [ln.split(",")[3] for ln in lines[1:]] == ["0", "1", "mean"]
    back = SuiteReport.from_json(rep.to_json())
    assert back.to_csv() == rep.to_csv()
    assert json.loads(rep.to_json())
    series = rep.plot_series().splitlines()
    assert series[0] == "metric,model,resolution,config,value"
    assert len(series) == 1 + 4


def test_report_rows_permutation_invariant():
    truth, dets, preds = _toy_suite()
    a = evaluate_run(truth, dets, preds, "m", "c", "low")
    b = evaluate_run(dict(reversed(list(truth.items()))),
                     {1: dict(reversed(list(dets[1].items()))), 0: dets[0]}, preds, "m", "c", "low")
    assert a.to_csv() == b.to_csv()
