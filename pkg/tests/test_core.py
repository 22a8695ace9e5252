import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constellation_loc.core import (
    ContractViolation, Descriptor, NotFound, ObjectMap, PoseSE2z, SemanticObject, apply_pose, descriptor_distance,
    matched_rows, normalize_yaw, read_map, write_map,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-20.0, 20.0, allow_nan=False)


def test_vector_distance_is_euclidean():
    assert descriptor_distance(Descriptor("vector", [0, 0]), Descriptor("vector", [3, 4])) == 5.0


def test_distance_to_self_is_zero():
    d = Descriptor("vector", np.arange(5.0))
    assert descriptor_distance(d, d) == 0.0
    w = Descriptor("walk_matrix", np.arange(12).reshape(4, 3) % 5)
    assert descriptor_distance(w, w) == 0.0


def _brute_matched(a, b):
    # greedy row matching on multisets, independent of Counter
    rest = [tuple(r) for r in b.tolist()]
    hits = 0
    for r in map(tuple, a.tolist()):
        if r in rest:
            rest.remove(r)
            hits += 1
    return hits


def test_walk_matrix_distance_ten_of_thirty():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, (30, 4))
    b = a.copy()
    b[10:] += 10  # rows 10.. cannot match anything in a (labels 0..4)
    b = b[rng.permutation(30)]
    assert _brute_matched(a, b) == 10
    assert descriptor_distance(Descriptor("walk_matrix", a), Descriptor("walk_matrix", b)) == pytest.approx(
        1 - 10 / 30
    )


def test_walk_matrix_multiset_counts_duplicates_once_each():
    a = np.array([[1, 2], [1, 2], [3, 4]])
    b = np.array([[1, 2], [3, 4], [3, 4]])
    assert matched_rows(a, b) == 2 == _brute_matched(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matched_rows_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, (12, 2)), rng.integers(0, 3, (12, 2))
    assert matched_rows(a, b) == _brute_matched(a, b)


def test_distance_rejects_mismatches():
    with pytest.raises(ContractViolation):
        descriptor_distance(Descriptor("vector", [1, 2]), Descriptor("vector", [1, 2, 3]))
    with pytest.raises(ContractViolation):
        descriptor_distance(Descriptor("vector", [1, 2]), Descriptor("walk_matrix", [[1, 2]]))


def test_descriptor_rejects_nonfinite():
    with pytest.raises(ContractViolation):
        Descriptor("vector", [1.0, np.nan])


def test_triangle_inequality_on_random_triples():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b, c = (Descriptor("vector", rng.normal(size=8)) for _ in range(3))
        assert descriptor_distance(a, c) <= descriptor_distance(a, b) + descriptor_distance(b, c) + 1e-12


def test_distance_symmetric():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a, b = Descriptor("vector", rng.normal(size=4)), Descriptor("vector", rng.normal(size=4))
        assert descriptor_distance(a, b) == descriptor_distance(b, a)


def test_apply_pose_examples():
    np.testing.assert_allclose(apply_pose(PoseSE2z(0, 0, 0), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(apply_pose(PoseSE2z(1, 0, math.pi / 2), [1, 0, 5]), [1, 1, 5], atol=1e-12)
    np.testing.assert_allclose(apply_pose(PoseSE2z(5, -3, math.pi / 6), [2, 0, 1]), [6.7321, -2.0, 1], atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(finite, finite, angle, finite, finite, finite)
def test_pose_inverse_roundtrip(x, y, yaw, px, py, pz):
    t = PoseSE2z(x, y, yaw)
    p = np.array([px, py, pz])
    np.testing.assert_allclose(apply_pose(t, apply_pose(t.inverse(), p)), p, atol=1e-9)
    assert apply_pose(t, p)[2] == pz


@settings(max_examples=100, deadline=None)
@given(finite, finite, angle, finite, finite, angle)
def test_pose_compose_matches_sequential_application(x1, y1, a1, x2, y2, a2):
    t1, t2 = PoseSE2z(x1, y1, a1), PoseSE2z(x2, y2, a2)
    p = np.array([[1.0, -2.0, 0.5], [10.0, 3.0, 0.0]])
    np.testing.assert_allclose(t1.compose(t2).apply(p), t1.apply(t2.apply(p)), atol=1e-8)


@given(st.floats(-100, 100, allow_nan=False))
def test_yaw_normalized_half_open(yaw):
    y = normalize_yaw(yaw)
    assert -math.pi < y <= math.pi
    assert math.isclose(math.cos(y), math.cos(yaw), abs_tol=1e-9)
    assert math.isclose(math.sin(y), math.sin(yaw), abs_tol=1e-9)


def test_yaw_pi_stays_pi():
    assert PoseSE2z(0, 0, -math.pi).yaw == math.pi
    assert PoseSE2z(0, 0, math.pi).yaw == math.pi


def test_object_map_invariants():
    with pytest.raises(ContractViolation):
        ObjectMap([1, 1], [0, 0], np.zeros((2, 3)), 2)
    with pytest.raises(ContractViolation):
        ObjectMap([1, 2], [0, 2], np.zeros((2, 3)), 2)
    with pytest.raises(ContractViolation):
        SemanticObject(0, 0, (0, math.inf, 0))
    m = ObjectMap([5, 2], [1, 0], [[1, 2, 3], [4, 5, 6]], 2)
    assert m.index_of(2) == 1
    with pytest.raises(NotFound):
        m.index_of(9)
    with pytest.raises(ValueError):
        m.positions[0, 0] = 1.0


def test_map_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = ObjectMap(np.arange(20), rng.integers(0, 4, 20), rng.normal(size=(20, 3)) * 50, 4, "local")
    write_map(tmp_path / "m.txt", m)
    back = read_map(tmp_path / "m.txt")
    assert back.same_as(m)
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0] == "# n_classes=4"


def test_map_file_error_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# n_classes=2\n0,1,0,0,0\n1,1,0,0\n")
    with pytest.raises(ValueError, match=":3:"):
        read_map(p)
