import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierclip import autodiff as ad
from hierclip import oracles
from hierclip._mutants import activated
from hierclip.masks import (
    AffinityGrid,
    affinity_1d,
    affinity_2d,
    export_mask,
    extend_with_class_slot,
    mask_1d,
    mask_2d,
    nonsplittable_update,
    read_mask_csv,
    shortest_path_bound,
)
from hierclip.selfcheck import random_grid


def grid(h, w, value):
    return AffinityGrid(np.full((h, w - 1), value), np.full((h - 1, w), value))


# ---------------------------------------------------------------- affinities

def test_two_tokens_have_unit_affinity():
    rng = np.random.default_rng(0)
    a = affinity_1d(rng.normal(size=(2, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    assert a.shape == (1,) and a[0] == pytest.approx(1.0, abs=1e-15)


def test_three_equal_tokens():
    a = affinity_1d(np.ones((3, 2)), np.eye(2), np.eye(2))
    np.testing.assert_allclose(a, [np.sqrt(0.5)] * 2, atol=1e-15)


def test_affinity_1d_matches_scalar_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        t, wq, wk = rng.normal(size=(6, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        np.testing.assert_allclose(affinity_1d(t, wq, wk, 2.0), oracles.chain_affinity(t, wq, wk, 2.0),
                                   rtol=0, atol=1e-12)


def test_affinity_1d_errors():
    with pytest.raises(ValueError):
        affinity_1d(np.ones((1, 2)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        affinity_1d(np.ones((3, 2)), np.eye(2), np.eye(2), sigma_t=0.0)


def test_equal_2x2_grid():
    g = affinity_2d(np.ones((2, 2, 3)), np.eye(3), np.eye(3))
    np.testing.assert_allclose(g.horiz, 0.5, atol=1e-15)
    np.testing.assert_allclose(g.vert, 0.5, atol=1e-15)


def test_affinity_2d_single_row_reduces_to_1d():
    rng = np.random.default_rng(1)
    t, wq, wk = rng.normal(size=(7, 5)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    g = affinity_2d(t[None], wq, wk, 3.0)
    np.testing.assert_allclose(g.horiz[0], affinity_1d(t, wq, wk, 3.0), atol=1e-15)
    assert g.vert.shape == (0, 7)


def test_affinity_2d_matches_scalar_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p, wq, wk = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        g = affinity_2d(p, wq, wk, 1.5)
        horiz, vert = oracles.grid_affinity(p, wq, wk, 1.5)
        np.testing.assert_allclose(g.horiz, horiz, atol=1e-12)
        np.testing.assert_allclose(g.vert, vert, atol=1e-12)


def test_affinity_2d_errors():
    with pytest.raises(ValueError):
        affinity_2d(np.ones((1, 1, 2)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        affinity_2d(np.ones((2, 2, 2)), np.eye(2), np.eye(2), sigma_v=-1.0)


def test_affinity_batched_matches_single():
    rng = np.random.default_rng(2)
    p, wq, wk = rng.normal(size=(3, 2, 3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    g = affinity_2d(p, wq, wk, 1.0)
    for b in range(3):
        one = affinity_2d(p[b], wq, wk, 1.0)
        np.testing.assert_allclose(g.horiz[b], one.horiz, atol=1e-15)
        np.testing.assert_allclose(g.vert[b], one.vert, atol=1e-15)


# ---------------------------------------------------------------- non-splittable update

def test_update_examples():
    assert nonsplittable_update(np.array([0.6]), np.array([0.5]))[0] == pytest.approx(0.8)
    x = np.array([0.1, 0.7, 1.0])
    np.testing.assert_array_equal(nonsplittable_update(np.zeros(3), x), x)
    np.testing.assert_array_equal(nonsplittable_update(None, x), x)
    np.testing.assert_array_equal(nonsplittable_update(np.ones(3), x), np.ones(3))


def test_update_rejects_out_of_range():
    with pytest.raises(ValueError):
        nonsplittable_update(np.array([1.2]), np.array([0.5]))
    with pytest.raises(ValueError):
        nonsplittable_update(np.array([0.2]), np.array([0.0]))
    with pytest.raises(ValueError):
        nonsplittable_update(np.array([0.2, 0.3]), np.array([0.5]))


# ---------------------------------------------------------------- 1D masks

def test_mask_1d_worked_example():
    c = mask_1d(np.array([0.9, 0.2, 0.8]))
    assert c[0, 1] == pytest.approx(0.9, abs=1e-15)
    assert c[0, 2] == pytest.approx(0.18, abs=1e-15)
    assert c[0, 3] == pytest.approx(0.144, abs=1e-15)
    assert c[1, 3] == pytest.approx(0.16, abs=1e-15)


def test_mask_1d_ones_and_empty():
    assert np.array_equal(mask_1d(np.ones(5)), np.ones((6, 6)))
    assert mask_1d(np.zeros(0)).shape == (1, 1)


def test_mask_1d_length_32_brute_force():
    a = np.random.default_rng(3).uniform(0.01, 1, 32)
    assert np.abs(mask_1d(a) - oracles.chain_mask(a)).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20))
def test_mask_1d_properties(values):
    a = np.array(values)
    c = mask_1d(a)
    n = len(a) + 1
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 1.0)
    assert np.all(c > 0) and np.all(c <= 1.0)
    for i in range(n):
        for j in range(i, n):
            for k in range(j, n):
                assert abs(c[i, k] - c[i, j] * c[j, k]) < 1e-12


def test_mask_1d_tensor_in_tensor_out():
    t = ad.Tensor(np.array([0.5, 0.25]))
    assert isinstance(mask_1d(t), ad.Tensor)


# ---------------------------------------------------------------- 2D masks

def test_mask_2d_worked_example():
    g = AffinityGrid(np.array([[0.9], [0.6]]), np.array([[0.5, 0.8]]))
    c = mask_2d(g)
    assert c[0, 3] == pytest.approx(0.72, abs=1e-15)
    assert c[3, 0] == pytest.approx(0.72, abs=1e-15)


def test_mask_2d_all_ones():
    assert np.array_equal(mask_2d(grid(3, 4, 1.0)), np.ones((12, 12)))


def test_mask_2d_matches_path_enumeration_5x5():
    g = random_grid(np.random.default_rng(4), 5, 5)
    assert np.abs(mask_2d(g) - oracles.grid_mask(g.horiz, g.vert)).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_mask_2d_properties(h, w, seed):
    if h * w < 2:
        w = 2
    g = random_grid(np.random.default_rng(seed), h, w)
    c = mask_2d(g)
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 1.0)
    assert np.all(c > 0) and np.all(c <= 1.0)
    assert np.all(c <= shortest_path_bound(g) + 1e-12)


def test_single_row_grid_equals_chain():
    a = np.random.default_rng(5).uniform(0.05, 1, 6)
    g = AffinityGrid(a[None], np.zeros((0, 7)))
    np.testing.assert_allclose(mask_2d(g), mask_1d(a), atol=1e-15)
    np.testing.assert_allclose(shortest_path_bound(g), mask_1d(a), atol=1e-12)


def test_uniform_grid_bound_is_power_of_distance():
    g = grid(4, 5, 0.7)
    bound, c = shortest_path_bound(g), mask_2d(g)
    for u in range(20):
        for v in range(20):
            (r1, c1), (r2, c2) = divmod(u, 5), divmod(v, 5)
            assert bound[u, v] == pytest.approx(0.7 ** (abs(r1 - r2) + abs(c1 - c2)), abs=1e-12)
    assert np.abs(c - bound).max() < 1e-12


def test_two_turn_detour_is_strictly_better():
    # 3x3 grid where the only strong route from (0,0) to (2,2) zig-zags
    horiz = np.full((3, 2), 0.05)
    vert = np.full((2, 3), 0.05)
    horiz[0, 0] = vert[0, 1] = horiz[1, 1] = vert[1, 2] = 0.95
    g = AffinityGrid(horiz, vert)
    c, bound = mask_2d(g), shortest_path_bound(g)
    assert c[0, 8] < bound[0, 8] - 0.5
    assert bound[0, 8] == pytest.approx(0.95 ** 4, abs=1e-12)


def test_zero_weight_edge_counts_as_an_edge():
    assert shortest_path_bound(grid(2, 2, 1.0)).min() == 1.0


def test_min_mutant_breaks_tightness():
    g = AffinityGrid(np.array([[0.9], [0.6]]), np.array([[0.5, 0.8]]))
    with activated("min-path"):
        c = mask_2d(g)
    assert c[0, 3] == pytest.approx(0.3)
    assert shortest_path_bound(g)[0, 3] == pytest.approx(0.72)


def test_monotone_layering():
    rng = np.random.default_rng(6)
    a1, g1 = rng.uniform(0, 1, 9), random_grid(rng, 3, 4)
    a2 = nonsplittable_update(a1, rng.uniform(0.01, 1, 9))
    g2 = nonsplittable_update(g1, random_grid(rng, 3, 4, low=0.01))
    assert np.all(mask_1d(a2) >= mask_1d(a1) - 1e-12)
    assert np.all(mask_2d(g2) >= mask_2d(g1) - 1e-12)


def test_class_slot_row_and_column_of_ones():
    c = mask_2d(random_grid(np.random.default_rng(7), 2, 3))
    full = extend_with_class_slot(ad.Tensor(c)).data
    assert full.shape == (7, 7)
    assert np.all(full[0] == 1) and np.all(full[:, 0] == 1)
    assert np.array_equal(full[1:, 1:], c)


def test_mask_csv_round_trip():
    c = mask_2d(random_grid(np.random.default_rng(8), 3, 3))
    blob = export_mask(c)
    assert blob.count(b"\n") == 9
    assert np.array_equal(read_mask_csv(blob), c)


def test_grid_validation():
    with pytest.raises(ValueError):
        AffinityGrid(np.ones((2, 2)), np.ones((2, 3))).validate()
    with pytest.raises(ValueError):
        AffinityGrid(np.full((2, 1), 1.5), np.ones((1, 2))).validate()
