import json
import math

import numpy as np
import pytest

from offtrack.eval import (EvalReport, ade, association_accuracy, ids_and_recall, miss_rate,
                           summarize_completion, yaw_error_deg)
from offtrack.types import Tracklet

from conftest import straight_track


def test_association_accuracy():
    assert association_accuracy([0, 2, 1], [0, 2, 1]) == 1.0
    assert association_accuracy([0, 1], [0, 0]) == 0.5
    assert association_accuracy([None, 1], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        association_accuracy([], [])
    with pytest.raises(ValueError):
        association_accuracy([1], [1, 2])


def test_ade_and_yaw():
    g = np.array([[0.0, 0.0, 0.1], [1.0, 1.0, 3.1]])
    assert ade(g, g) == 0.0
    assert ade(g + [0.6, 0.8, 0.0], g) == pytest.approx(1.0)
    assert yaw_error_deg(g, g) == 0.0
    p = g.copy()
    p[:, 2] += math.pi / 2
    assert yaw_error_deg(p, g) == pytest.approx(90.0)
    with pytest.raises(ValueError):
        ade(g[:1], g)


def test_miss_rate():
    gts = [np.zeros((3, 3)) for _ in range(4)]
    preds = [np.zeros((3, 3)) for _ in range(4)]
    assert miss_rate(preds, gts) == 0.0
    preds[2][1, 0] = 3.0
    assert miss_rate(preds, gts, 2.0) == 0.25
    rates = [miss_rate(preds, gts, t) for t in (0.5, 2.0, 2.9, 3.5)]
    assert rates == sorted(rates, reverse=True)


def test_metrics_order_invariant(rng):
    preds = [rng.normal(size=(4, 3)) for _ in range(6)]
    gts = [rng.normal(size=(4, 3)) for _ in range(6)]
    perm = rng.permutation(6)
    a = summarize_completion(preds, gts)
    b = summarize_completion([preds[i] for i in perm], [gts[i] for i in perm])
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12)


def test_ids_and_recall():
    g1 = straight_track("g1", 0.0, 5.0)
    g2 = straight_track("g2", 0.0, 5.0, y0=20.0)
    assert ids_and_recall([g1, g2], [g1, g2], 2.0) == (0, 1.0)
    split = [g1.slice(0, 5, id="p1"), g1.slice(5, None, id="p2"), g2]
    assert ids_and_recall(split, [g1, g2], 2.0) == (1, 1.0)
    gap = [g1.slice(0, 4, id="p1"), g1.slice(6, None, id="p1b"), g2]
    ids, rec = ids_and_recall(gap, [g1, g2], 2.0)
    assert ids == 1 and rec == pytest.approx(20 / 22)
    far = Tracklet("x", "car", np.array(g1.data) + [0, 5.0, 0, 0, 0, 0, 0, 0, 0, 0])
    assert ids_and_recall([far], [g1], 2.0) == (0, 0.0)


def test_report_json_and_text_agree(tmp_path):
    rep = EvalReport(meta={"config_hash": "x"})
    rep.add("ade", 0.5).add("ids", 3).add("empty", float("nan"))
    path = tmp_path / "r.json"
    rep.save(path)
    back = EvalReport.from_json(path.read_text())
    assert back.metrics["ade"] == 0.5 and math.isnan(back.metrics["empty"])
    assert json.loads(path.read_text())["metrics"]["empty"] is None
    text = rep.to_text()
    assert "ade     0.5000" in text and "ids     3" in text and "n/a" in text
