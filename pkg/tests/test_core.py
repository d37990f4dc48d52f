import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moralkit.core import (Box3D, Detection, EgoPose, FeatureMap, ObjectClass, enhance, radial_unit_vector,
                           transform_to_frame, wrap_angle)
from moralkit.errors import DegeneratePoint

from conftest import random_radar


def test_radial_unit_vector_examples():
    assert np.allclose(radial_unit_vector((3, 4, 0)), (0.6, 0.8, 0.0), atol=0, rtol=1e-15)
    assert np.array_equal(radial_unit_vector((0, 0, 5)), (0.0, 0.0, 1.0))
    with pytest.raises(DegeneratePoint):
        radial_unit_vector((0, 0, 0))


def test_radial_unit_vector_norm(rng):
    p = rng.normal(0, 30, (10_000, 3))
    n = np.linalg.norm(radial_unit_vector(p), axis=1)
    assert np.max(np.abs(n - 1)) < 1e-12


def test_transform_examples():
    p = np.array([[1.0, 0.0, 0.0]])
    ident = EgoPose()
    assert np.array_equal(transform_to_frame(p, ident, ident), p)
    assert np.allclose(transform_to_frame(p, ident, EgoPose((1, 0, 0), 0.0)), [[0, 0, 0]], atol=0)
    assert np.allclose(transform_to_frame(p, ident, EgoPose((0, 0, 0), math.pi / 2)), [[0, -1, 0]], atol=1e-15)


def test_transform_carries_extra_columns(rng):
    cloud = random_radar(rng, 20)
    out = transform_to_frame(cloud, EgoPose((1, 2, 0), 0.3), EgoPose((-4, 1, 0), -1.0))
    assert np.array_equal(out[:, 3:], cloud[:, 3:])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_transform_round_trip(vals, yaw_a, yaw_b):
    a = EgoPose((vals[0], vals[1], vals[2]), yaw_a)
    b = EgoPose((vals[3], vals[4], vals[5]), yaw_b)
    pts = np.random.default_rng(0).uniform(-50, 50, (32, 3))
    back = transform_to_frame(transform_to_frame(pts, a, b), b, a)
    assert np.max(np.abs(back - pts)) < 1e-9


def test_enhance_columns():
    cloud = np.zeros((3, 7))
    cloud[:, 5] = (-3.0, 0.0, 2.5)
    e = enhance(cloud)
    assert e.shape == (3, 10)
    assert np.array_equal(e[0, 7:], (3, 9, -1))
    assert np.array_equal(e[1, 7:], (0, 0, 0))
    assert np.array_equal(e[2, 7:], (2.5, 6.25, 1))
    assert np.array_equal(e[:, :7], cloud)


def test_enhance_is_pure(rng):
    cloud = random_radar(rng, 500)
    a, b = enhance(cloud), enhance(cloud.copy())
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(a[:, 7], np.abs(cloud[:, 5]))
    assert np.array_equal(a[:, 8], cloud[:, 5] ** 2)


def test_enhance_empty():
    assert enhance(np.zeros((0, 7))).shape == (0, 10)


def test_wrap_angle_range():
    a = wrap_angle(np.linspace(-20, 20, 1001))
    assert np.all(a > -math.pi) and np.all(a <= math.pi)
    assert wrap_angle(-math.pi) == math.pi


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0.0)
    b = Box3D((1, 2, 3), (4, 2, 1), 3 * math.pi, "Cyclist")
    assert b.cls is ObjectClass.CYCLIST
    assert -math.pi < b.yaw <= math.pi
    assert Box3D.from_dict(b.to_dict()) == b


def test_detection_round_trip():
    d = Detection(Box3D((1.5, -2.25, 0.7), (4.2, 1.8, 1.5), 0.1), 0.8125, "seq/0004")
    assert Detection.from_dict(d.to_dict()) == d


def test_feature_map_invariants():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FeatureMap(np.full((1, 2, 2), np.nan))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((1, 2, 2)), cell_size=0.0)
    fm = FeatureMap(np.zeros((4, 5, 6)))
    assert (fm.channels, fm.height, fm.width) == (4, 5, 6)
