import csv
import io
import json
import math
from collections import Counter

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metacam.evaluation import (EVAL_REPORT_SCHEMA, DistanceGapReport, EvalReport, clustering_quality,
                                cmc_map, distance_gap, positive_pairs, report_json)


def col(*xs):
    return np.array(xs, dtype=float)[:, None]


# --- retrieval ---------------------------------------------------------------


def test_two_positive_average_precision():
    r = cmc_map(col(0), [7], [0], col(1, 2, 3, 4), [1, 7, 2, 7], [1, 1, 1, 1])
    assert r.mAP == 0.5
    assert r.cmc == {1: 0.0, 5: 1.0}


@pytest.mark.parametrize("rank", [1, 2, 5])
def test_single_positive_at_rank(rank):
    ids = [0] * 6
    ids[rank - 1] = 7
    r = cmc_map(col(0), [7], [0], col(1, 2, 3, 4, 5, 6), ids, [1] * 6, ranks=(1, 2, 5))
    assert r.mAP == 1.0 / rank
    assert r.cmc == {k: float(k >= rank) for k in (1, 2, 5)}


def test_same_camera_matches_are_excluded():
    # the nearest gallery entry shares id and camera; it must not count
    r = cmc_map(col(0), [7], [0], col(0.1, 1, 2), [7, 3, 7], [0, 1, 2])
    assert r.mAP == 0.5 and r.cmc[1] == 0.0


def test_query_without_cross_camera_positive_is_skipped():
    r = cmc_map(col(0, 0), [7, 8], [0, 0], col(0.5, 1), [7, 8], [0, 1])
    assert r.n_queries_total == 2 and r.n_queries_used == 1 and r.mAP == 0.5


def test_perfect_retrieval():
    r = cmc_map(col(0, 10, 20), [1, 2, 3], [0, 0, 0], col(0.1, 10.1, 20.1), [1, 2, 3], [1, 1, 1])
    assert r.mAP == 1.0 and r.cmc[1] == 1.0


def test_distance_ties_follow_gallery_index():
    r = cmc_map(col(0), [7], [0], col(1, 1), [3, 7], [1, 1])
    assert r.mAP == 0.5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gallery_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gq, gg = rng.normal(size=(8, 3)), rng.normal(size=(20, 3))
    qi, qc = rng.integers(0, 4, 8), rng.integers(0, 3, 8)
    gi, gc = rng.integers(0, 4, 20), rng.integers(0, 3, 20)
    perm = rng.permutation(20)
    a = cmc_map(gq, qi, qc, gg, gi, gc)
    b = cmc_map(gq, qi, qc, gg[perm], gi[perm], gc[perm])
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12) and a.cmc == b.cmc
    assert all(0 <= v <= 1 for v in a.cmc.values()) and a.cmc[1] <= a.cmc[5]


def test_report_round_trip():
    r = EvalReport(0.25, {1: 0.0, 5: 0.5}, 3, 4)
    d = json.loads(report_json(r, "abc"))
    jsonschema.validate(d, EVAL_REPORT_SCHEMA)
    assert d["config_hash"] == "abc"
    assert EvalReport.from_dict(d) == r


def test_report_schema_rejects_out_of_range():
    with pytest.raises(jsonschema.ValidationError):
        EvalReport.from_dict({"mAP": 1.5, "cmc": {}, "n_queries_used": 0, "n_queries_total": 0})


# --- clustering scores ---------------------------------------------------------


def contingency_scores(pred, truth):
    n = len(pred)
    cells = Counter(zip(pred, truth))
    a, b = Counter(pred), Counter(truth)
    c2 = lambda x: x * (x - 1) / 2
    index = sum(c2(v) for v in cells.values())
    sa, sb = sum(c2(v) for v in a.values()), sum(c2(v) for v in b.values())
    expected = sa * sb / c2(n)
    ari = (index - expected) / (0.5 * (sa + sb) - expected)
    mi = sum(v / n * math.log(n * v / (a[p] * b[t])) for (p, t), v in cells.items())
    h = lambda c: -sum(v / n * math.log(v / n) for v in c.values())
    return ari, mi / ((h(a) + h(b)) / 2)


def test_renamed_partition_scores_one():
    ari, nmi = clustering_quality([5, 5, 3, 3, 9], [0, 0, 1, 1, 2])
    assert ari == pytest.approx(1.0) and nmi == pytest.approx(1.0)


def test_single_cluster_is_not_better_than_chance():
    ari, _ = clustering_quality([0] * 12, np.repeat(np.arange(3), 4))
    assert ari <= 0


def test_scores_match_contingency_oracle(rng):
    pred, truth = rng.integers(0, 4, 30), rng.integers(0, 5, 30)
    ari, nmi = clustering_quality(pred, truth)
    ref_ari, ref_nmi = contingency_scores(pred.tolist(), truth.tolist())
    assert abs(ari - ref_ari) <= 1e-12 and abs(nmi - ref_nmi) <= 1e-12


# --- distance gap ---------------------------------------------------------------


def test_identical_features_gap_zero():
    g = distance_gap(np.ones((6, 3)), [0, 0, 0, 1, 1, 1], [0, 0, 1, 0, 1, 1])
    assert g.intra_mean == g.inter_mean == 0.0 and g.gap == 0.0


def test_pair_cap_and_histogram_totals(rng):
    ids = np.repeat(np.arange(2), 400)
    cams = np.tile(np.arange(4), 200)
    g = distance_gap(rng.normal(size=(800, 3)), ids, cams)
    intra, inter = positive_pairs(ids, cams)
    assert len(inter) > 50_000 and g.n_inter == 50_000 and g.n_intra == len(intra)
    assert sum(g.inter_counts) == g.n_inter and sum(g.intra_counts) == g.n_intra


def test_gap_is_deterministic_per_seed(rng):
    F, ids, cams = rng.normal(size=(60, 3)), np.repeat(np.arange(6), 10), np.tile(np.arange(5), 12)
    a, b = distance_gap(F, ids, cams, max_pairs=40, seed=4), distance_gap(F, ids, cams, max_pairs=40, seed=4)
    assert a.to_dict() == b.to_dict()


def test_full_population_gap_is_permutation_invariant(rng):
    F, ids, cams = rng.normal(size=(40, 3)), np.repeat(np.arange(4), 10), np.tile(np.arange(5), 8)
    perm = rng.permutation(40)
    a, b = distance_gap(F, ids, cams), distance_gap(F[perm], ids[perm], cams[perm])
    assert a.gap == pytest.approx(b.gap, abs=1e-12)


def test_gap_undefined_without_inter_pairs():
    g = distance_gap(np.eye(3), [0, 0, 1], [0, 0, 0])
    assert not g.gap_defined and g.gap is None


def test_gap_csv_matches_json(rng):
    g = distance_gap(rng.normal(size=(30, 2)), np.repeat(np.arange(3), 10), np.tile(np.arange(3), 10))
    d = json.loads(report_json(g))
    assert DistanceGapReport.from_dict(d).intra_counts == g.intra_counts
    text = g.to_csv("config_hash=x")
    assert text.startswith("# config_hash=x\n")
    rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
    assert sum(int(r["intra_count"]) for r in rows) == sum(d["intra_counts"])
    assert sum(int(r["inter_count"]) for r in rows) == sum(d["inter_counts"])
