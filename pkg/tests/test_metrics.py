import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolkp.errors import EmptySet, SchemaError
from toolkp.metrics import KeypointPairSet, MetricsReport, akd, ap_at, evaluate_report, read_pairs_csv

pixel = st.floats(-500, 2000, allow_nan=False)
pair = st.tuples(st.tuples(pixel, pixel), st.tuples(pixel, pixel))


def oracle_distance(gt, pred):
    dx, dy = pred[0] - gt[0], pred[1] - gt[1]
    return math.sqrt(dx * dx + dy * dy)


def oracle_akd(pairs):
    total = sum(Fraction(oracle_distance(g, p)) for g, p in pairs)
    return float(total) / len(pairs)


def oracle_ap(pairs, k):
    hits = 0
    for g, p in pairs:
        if oracle_distance(g, p) <= k:
            hits += 1
    return hits / len(pairs)


def random_pairs(rng, m):
    gt = rng.uniform(0, 640, size=(m, 2))
    pred = gt + rng.normal(scale=rng.uniform(1, 60), size=(m, 2))
    return [(tuple(g), tuple(p)) for g, p in zip(gt, pred)]


def test_examples():
    assert akd([((0, 0), (3, 4))]) == 5.0
    pairs = [((0, 0), (0, 10)), ((0, 0), (0, 20)), ((0, 0), (0, 40))]
    assert ap_at(pairs, 15) == pytest.approx(1 / 3)
    assert ap_at(pairs, 30) == pytest.approx(2 / 3)
    assert ap_at(pairs, 45) == 1.0
    assert ap_at([((0, 0), (0, 15))], 15) == 1.0  # inclusive


def test_empty_and_bad_inputs():
    with pytest.raises(EmptySet):
        akd([])
    with pytest.raises(ValueError):
        ap_at([((0, 0), (1, 1))], 0)
    with pytest.raises(SchemaError):
        KeypointPairSet(np.zeros((2, 2)), np.zeros((3, 2)), ("a", "b"))
    with pytest.raises(SchemaError):
        KeypointPairSet(np.array([[np.nan, 0]]), np.zeros((1, 2)), ("a",))


def test_matches_oracle_exactly(rng):
    for _ in range(100):
        pairs = random_pairs(rng, int(rng.integers(1, 50)))
        assert akd(pairs) == oracle_akd(pairs)
        for k in (15, 30, 45):
            assert ap_at(pairs, k) == oracle_ap(pairs, k)


@given(st.lists(pair, min_size=1, max_size=30))
def test_akd_order_invariant(pairs):
    assert akd(pairs) == akd(pairs[::-1]) == oracle_akd(pairs)


@given(st.lists(pair, min_size=1, max_size=30), st.floats(0.1, 500), st.floats(0.1, 500))
def test_ap_monotone(pairs, a, b):
    lo, hi = sorted((a, b))
    assert ap_at(pairs, lo) <= ap_at(pairs, hi)


def test_report_roundtrips(rng):
    r = evaluate_report(random_pairs(rng, 17))
    assert MetricsReport.from_dict(r.to_dict()) == r
    import json

    assert MetricsReport.from_dict(json.loads(r.to_json())) == r
    header, row = r.to_csv().splitlines()
    assert MetricsReport.from_dict(dict(zip(header.split(","), (float(x) for x in row.split(","))))) == r
    assert r.table_row("ours").count("|") == 6


def test_csv_reader(tmp_path):
    p = tmp_path / "pairs.csv"
    p.write_text("image_id,gt_x,gt_y,pred_x,pred_y\nimg0,0,0,3,4\nimg1,10,10,10,10\n")
    s = read_pairs_csv(p)
    assert s.image_ids == ("img0", "img1")
    assert akd(s) == 2.5
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        read_pairs_csv(tmp_path / "bad.csv")
    (tmp_path / "empty.csv").write_text("image_id,gt_x,gt_y,pred_x,pred_y\n")
    with pytest.raises(EmptySet):
        read_pairs_csv(tmp_path / "empty.csv")
