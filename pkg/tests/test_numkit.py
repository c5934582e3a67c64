import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmpfl.numkit import (
    BoxDomain,
    as_param_vector,
    clipped_gaussian_direction,
    derive_seed,
    euclidean_distance,
    make_rng,
    pairwise_distances,
    project_box,
    substream,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize(
    "a, b, expected",
    [([0, 0], [0, 0], 0.0), ([3, 0], [0, 4], 5.0), ([0.1], [0.15], 0.05)],
)
def test_distance_examples(a, b, expected):
    assert euclidean_distance(a, b) == pytest.approx(expected, abs=1e-15)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        euclidean_distance([1.0, 2.0], [1.0])


def test_param_vector_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_param_vector([1.0, np.nan])
    with pytest.raises(ValueError):
        as_param_vector([np.inf])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=3, max_size=3))
def test_triangle_inequality(rows):
    a, b, c = (np.array(r) for r in rows)
    ab, bc, ac = euclidean_distance(a, b), euclidean_distance(b, c), euclidean_distance(a, c)
    assert ac <= (ab + bc) * (1 + 1e-12) + 1e-300
    assert ab == euclidean_distance(b, a)


def test_pairwise_matches_scalar_distance():
    pts = np.random.default_rng(0).normal(size=(6, 4))
    dist = pairwise_distances(pts)
    for i in range(6):
        assert dist[i, i] == 0.0
        for j in range(6):
            assert dist[i, j] == pytest.approx(euclidean_distance(pts[i], pts[j]), rel=1e-14)


@pytest.mark.parametrize(
    "v, expected",
    [([5.0], [1.0]), ([0.3], [0.3]), ([-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0])],
)
def test_project_box_examples(v, expected):
    assert project_box(v, BoxDomain(-1.0, 1.0)).tolist() == expected


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20))
def test_project_box_idempotent(values):
    dom = BoxDomain.symmetric(3.0)
    once = project_box(values, dom)
    assert np.array_equal(project_box(once, dom), once)
    assert dom.contains(once)


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        BoxDomain(1.0, -1.0)


def test_per_coordinate_box():
    dom = BoxDomain(np.array([0.0, -1.0]), np.array([1.0, 5.0]))
    assert project_box([2.0, -3.0], dom).tolist() == [1.0, -1.0]
    with pytest.raises(ValueError):
        project_box([1.0, 2.0, 3.0], dom)


@pytest.mark.parametrize("dim", [1, 2, 10, 1000, 10_000])
def test_clipped_direction_norm(dim):
    v = clipped_gaussian_direction(dim, 2.0, 0.37, make_rng(dim))
    assert abs(np.linalg.norm(v) - 0.37) <= 1e-12 * 0.37


def test_clipped_direction_one_dimensional_and_seeded():
    vals = {float(clipped_gaussian_direction(1, 1.0, 0.5, make_rng(s))[0]) for s in range(20)}
    assert vals == {-0.5, 0.5}
    a = clipped_gaussian_direction(5, 1.0, 1.0, make_rng(3))
    b = clipped_gaussian_direction(5, 1.0, 1.0, make_rng(3))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("args", [(0, 1.0, 1.0), (3, 0.0, 1.0), (3, 1.0, -1.0)])
def test_clipped_direction_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        clipped_gaussian_direction(*args, make_rng(0))


def test_substreams_are_keyed():
    a = substream(5, 1, 2).random(4)
    assert np.array_equal(a, substream(5, 1, 2).random(4))
    assert not np.array_equal(a, substream(5, 2, 1).random(4))
    assert not np.array_equal(a, substream(6, 1, 2).random(4))
    assert derive_seed(5, 1) == derive_seed(5, 1) != derive_seed(5, 2)


def test_streams_are_pinned():
    # frozen outputs: a change here breaks reproducibility of every stored report
    assert make_rng(12345).integers(0, 2**32, size=3).tolist() == [3003105693, 976400781, 3387213022]
    assert substream(7, 1, 2).integers(0, 2**32, size=2).tolist() == [2567386825, 2056838993]
