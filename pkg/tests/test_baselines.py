import math

import numpy as np
import pytest

from offtrack.baselines import cvm_associate, linear_interpolate
from offtrack.geometry import transform_tracklet
from offtrack.types import Observation

from conftest import make_track


def test_cvm_example():
    h = make_track("h", [(0.0, -5.0, 0.0, 0.0, 10, 0), (0.5, 0.0, 0.0, 0.0, 10.0, 0.0)])
    a = make_track("A", [(2.5, 20.0, 0.0, 0.0)])
    b = make_track("B", [(2.5, 5.0, 15.0, 0.0)])
    assert cvm_associate(h, [b, a]) == 1
    assert math.hypot(20 - 5, 15) == pytest.approx(21.2132, abs=1e-4)


def test_cvm_zero_velocity_picks_nearest_and_respects_filter():
    h = make_track("h", [(0.0, 0.0, 0.0, 0.0)])
    far = make_track("far", [(3.0, 9.0, 0.0, 0.0)])
    near = make_track("near", [(3.0, 2.0, 1.0, 0.0)])
    too_soon = make_track("soon", [(1.0, 0.0, 0.0, 0.0)])
    assert cvm_associate(h, [far, near, too_soon]) == 1
    assert cvm_associate(h, [too_soon]) is None
    assert cvm_associate(h, []) is None


def test_cvm_rigid_invariance(rng):
    for _ in range(20):
        h = make_track("h", [(0.0, 0, 0, 0.2, *rng.normal(size=2) * 5)])
        cands = [make_track(f"c{k}", [(2.0 + rng.integers(0, 4), *rng.normal(size=2) * 20, 0.0)]) for k in range(6)]
        o = (float(rng.normal() * 50), float(rng.normal() * 50), float(rng.uniform(-3, 3)))
        moved = [transform_tracklet(t, o) for t in [h] + cands]
        assert cvm_associate(h, cands) == cvm_associate(moved[0], moved[1:])


def test_linear_interpolate_examples():
    a = Observation(0.0, 0.0, 0.0, 0.0)
    b = Observation(2.5, 10.0, 0.0, 0.0)
    assert [p.x for p in linear_interpolate(a, b, 2.0)] == pytest.approx([2, 4, 6, 8])
    same = linear_interpolate(a, Observation(2.0, 0.0, 0.0, 0.0), 2.0)
    assert all(p == (0.0, 0.0, 0.0) for p in same)
    yaw = linear_interpolate(Observation(0, 0, 0, 3.0), Observation(1.0, 0, 0, -3.0), 4.0)
    # Shortest arc goes through pi: every interpolated |yaw| stays above 3.
    assert all(abs(p.theta) > 3.0 for p in yaw)
    assert linear_interpolate(a, Observation(0.5, 1, 1, 0), 2.0) == []
    with pytest.raises(ValueError):
        linear_interpolate(b, a, 2.0)


def test_linear_interpolate_collinear(rng):
    for _ in range(20):
        a = Observation(0.0, *rng.normal(size=2) * 10, 0.0)
        b = Observation(4.0, *rng.normal(size=2) * 10, 1.0)
        pts = np.array([[p.x, p.y] for p in linear_interpolate(a, b, 2.0)])
        d = np.array([b.x - a.x, b.y - a.y])
        rel = pts - [a.x, a.y]
        cross = rel[:, 0] * d[1] - rel[:, 1] * d[0]
        assert np.all(np.abs(cross) < 1e-9)
        t = rel @ d / (d @ d)
        assert np.all((t > 0) & (t < 1))
