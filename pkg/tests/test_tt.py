import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dirtrel.tt import (
    GridSpec, TTDomainError, TTResourceError, TTShapeError, TTTensor, eval_continuous,
    eval_discrete, full_tensor, storage_size,
)

from conftest import random_tt


def dense_oracle(tt):
    """Entry-by-entry chained products, independent of full_tensor's reshapes."""
    out = np.empty(tt.dims)
    for idx in itertools.product(*(range(n) for n in tt.dims)):
        v = np.ones((1, 1))
        for k, i in enumerate(idx):
            v = v @ tt.cores[k][:, i, :]
        out[idx] = v[0, 0]
    return out


@st.composite
def tt_shapes(draw, max_d=4, max_n=4, max_r=3):
    d = draw(st.integers(1, max_d))
    dims = [draw(st.integers(2, max_n)) for _ in range(d)]
    ranks = [1] + [draw(st.integers(1, max_r)) for _ in range(d - 1)] + [1]
    seed = draw(st.integers(0, 2**31 - 1))
    return dims, ranks, seed


class TestConstruction:
    def test_boundary_ranks(self):
        with pytest.raises(TTShapeError):
            TTTensor((np.ones((2, 3, 1)),))

    def test_rank_mismatch(self):
        with pytest.raises(TTShapeError):
            TTTensor((np.ones((1, 3, 2)), np.ones((3, 3, 1))))

    def test_mode_size(self):
        with pytest.raises(TTShapeError):
            TTTensor((np.ones((1, 1, 1)),))

    def test_immutable(self, rng):
        tt = random_tt(rng, (3, 3), (1, 2, 1))
        with pytest.raises(ValueError):
            tt.cores[0][0, 0, 0] = 1.0

    def test_grid_validation(self):
        with pytest.raises(TTShapeError):
            GridSpec((np.array([0.0, 0.0, 1.0]),))
        g = GridSpec.uniform([0, -1], [1, 1], 5)
        assert g.dims == (5, 5)
        np.testing.assert_array_equal(g.lower, [0, -1])
        np.testing.assert_array_equal(g.upper, [1, 1])

    def test_serialisation_round_trip(self, rng):
        tt = random_tt(rng, (3, 4, 2), (1, 2, 3, 1))
        back = TTTensor.loads(tt.dumps())
        for a, b in zip(tt.cores, back.cores):
            np.testing.assert_array_equal(a, b)
        g = GridSpec.uniform([0, 0, 0], [1, 2, 3], (3, 4, 2))
        g2 = GridSpec.from_dict(g.to_dict())
        for a, b in zip(g.nodes, g2.nodes):
            np.testing.assert_array_equal(a, b)


class TestEvalDiscrete:
    def test_separable_product(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        tt = TTTensor((a.reshape(1, 2, 1), b.reshape(1, 2, 1)))
        assert eval_discrete(tt, [1, 1]) == 8.0

    def test_all_ones(self):
        tt = TTTensor(tuple(np.ones((1, 3, 1)) for _ in range(5)))
        assert eval_discrete(tt, [0, 2, 1, 0, 2]) == 1.0

    def test_matches_dense_3x3x3(self, rng):
        tt = random_tt(rng, (3, 3, 3), (1, 2, 2, 1))
        dense = dense_oracle(tt)
        idx = np.array(list(itertools.product(range(3), repeat=3)))
        np.testing.assert_allclose(eval_discrete(tt, idx), dense[tuple(idx.T)], rtol=1e-13)
        assert np.array_equal(eval_discrete(tt, idx), full_tensor(tt)[tuple(idx.T)])

    @pytest.mark.parametrize("bad", [[3, 0], [-1, 0], [0, 0, 0]])
    def test_out_of_range(self, rng, bad):
        tt = random_tt(rng, (3, 3), (1, 2, 1))
        with pytest.raises(TTDomainError):
            eval_discrete(tt, bad)


class TestFullTensor:
    def test_d1(self):
        core = np.array([[[1.0], [5.0], [2.0]]])
        np.testing.assert_array_equal(full_tensor(TTTensor((core,))), [1.0, 5.0, 2.0])

    def test_rank1_outer(self):
        a, b, c = np.arange(1.0, 3.0), np.arange(2.0, 5.0), np.array([1.0, -1.0])
        tt = TTTensor((a.reshape(1, -1, 1), b.reshape(1, -1, 1), c.reshape(1, -1, 1)))
        np.testing.assert_array_equal(full_tensor(tt), np.einsum("i,j,k->ijk", a, b, c))

    def test_elementwise_444(self, rng):
        tt = random_tt(rng, (4, 4, 4), (1, 3, 3, 1))
        full = full_tensor(tt)
        idx = np.array(list(itertools.product(range(4), repeat=3)))
        assert np.max(np.abs(full[tuple(idx.T)] - eval_discrete(tt, idx))) == 0.0

    def test_cap(self, rng):
        tt = random_tt(rng, (10, 10, 10), (1, 1, 1, 1))
        with pytest.raises(TTResourceError):
            full_tensor(tt, cap=999)

    @given(tt_shapes())
    def test_matches_eval_discrete(self, shape):
        dims, ranks, seed = shape
        tt = random_tt(np.random.default_rng(seed), dims, ranks)
        full = full_tensor(tt)
        idx = np.array(list(itertools.product(*(range(n) for n in dims))))
        assert np.array_equal(full[tuple(idx.T)], eval_discrete(tt, idx))
        np.testing.assert_allclose(full, dense_oracle(tt), rtol=1e-12, atol=1e-12)


class TestEvalContinuous:
    def test_at_nodes(self, rng):
        tt = random_tt(rng, (4, 5), (1, 3, 1))
        g = GridSpec.uniform([0, -1], [1, 1], (4, 5))
        idx = np.array(list(itertools.product(range(4), range(5))))
        assert np.array_equal(eval_continuous(tt, g, g.points(idx)), eval_discrete(tt, idx))

    def test_1d_linear(self):
        tt = TTTensor((np.array([0.0, 2.0]).reshape(1, 2, 1),))
        g = GridSpec((np.array([0.0, 1.0]),))
        assert eval_continuous(tt, g, [0.25]) == pytest.approx(0.5)

    def test_affine_reproduced(self, rng):
        # f(x, y) = x + y as a rank-2 train: [x, 1] @ [[1], [y]]
        nodes = np.linspace(0, 1, 5)
        c1 = np.stack([nodes, np.ones(5)], axis=1)[None, :, :]
        c2 = np.stack([np.ones(5), nodes], axis=0)[:, :, None]
        tt = TTTensor((c1, c2))
        g = GridSpec.uniform([0, 0], [1, 1], 5)
        x = rng.uniform(size=(20, 2))
        np.testing.assert_allclose(eval_continuous(tt, g, x), x.sum(axis=1), atol=1e-14)

    def test_outside(self, rng):
        tt = random_tt(rng, (3, 3), (1, 2, 1))
        g = GridSpec.uniform([0, 0], [1, 1], 3)
        with pytest.raises(TTDomainError):
            eval_continuous(tt, g, [1.01, 0.5])

    def test_grid_mismatch(self, rng):
        tt = random_tt(rng, (3, 3), (1, 2, 1))
        with pytest.raises(TTShapeError):
            eval_continuous(tt, GridSpec.uniform([0, 0], [1, 1], 4), [0.5, 0.5])

    @given(tt_shapes(max_d=3), st.integers(0, 2**31 - 1))
    def test_piecewise_linear_along_coordinate(self, shape, seed):
        dims, ranks, tseed = shape
        r = np.random.default_rng(seed)
        tt = random_tt(np.random.default_rng(tseed), dims, ranks)
        g = GridSpec.uniform(np.zeros(len(dims)), np.ones(len(dims)), dims)
        k = int(r.integers(len(dims)))
        base = g.points(np.array([[int(r.integers(n)) for n in dims]]))[0]
        cell = int(r.integers(dims[k] - 1))
        lo, hi = g.nodes[k][cell], g.nodes[k][cell + 1]
        ts = np.linspace(0, 1, 7)
        pts = np.repeat(base[None], ts.size, axis=0)
        pts[:, k] = lo + ts * (hi - lo)
        vals = eval_continuous(tt, g, pts)
        expected = (1 - ts) * vals[0] + ts * vals[-1]
        np.testing.assert_allclose(vals, expected, rtol=1e-10, atol=1e-10)


class TestStorage:
    def test_example(self, rng):
        assert storage_size(random_tt(rng, (10, 10, 10), (1, 2, 2, 1))) == 80

    @pytest.mark.parametrize("d,n", [(1, 2), (4, 7), (9, 3)])
    def test_rank_one(self, d, n):
        tt = TTTensor(tuple(np.ones((1, n, 1)) for _ in range(d)))
        assert storage_size(tt) == d * n

    @given(tt_shapes(max_d=6, max_n=8, max_r=4))
    def test_bound(self, shape):
        dims, ranks, seed = shape
        tt = random_tt(np.random.default_rng(seed), dims, ranks)
        assert storage_size(tt) == sum(c.size for c in tt.cores)
        assert storage_size(tt) <= len(dims) * max(dims) * max(ranks) ** 2
