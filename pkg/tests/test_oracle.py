"""The reference implementations themselves, pinned on hand-computed
and closed-form values."""

import numpy as np
import pytest

from hednet.blocks import ssr_block_forward
from hednet.core import KernelSpec, SparseTensor
from hednet.errors import ProbeError, TopologyError
from hednet.ops import ConvWeights
from hednet.oracle import (dense_conv_reference, finite_diff_grad,
                           influence_set, minkowski_dilate,
                           random_sparse_tensor, submanifold_reference)

from conftest import rand_res


class TestDenseReference:
    def test_hand_computed_1d_style_case(self):
        # 2x2 input, 3x3 kernel with only the center tap set to 2
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = np.zeros((9, 1, 1))
        w[4, 0, 0] = 2.0
        k = KernelSpec.cube(2, 3, 1, 1)
        y = dense_conv_reference(x, k, ConvWeights(w))
        assert np.array_equal(y, 2.0 * x)

    def test_sum_kernel_counts_neighbors(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((9, 1, 1))
        k = KernelSpec.cube(2, 3, 1, 1)
        y = dense_conv_reference(x, k, ConvWeights(w))
        # corner sees 4 in-range cells, edge 6, center 9
        assert y[0, 0, 0, 0] == 4.0
        assert y[0, 0, 0, 1] == 6.0
        assert y[0, 0, 1, 1] == 9.0

    def test_stride_two_positions(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        w = np.zeros((1, 1, 1))
        w[0, 0, 0] = 1.0
        k = KernelSpec.cube(2, 1, 1, 1, stride=2, padding=0)
        y = dense_conv_reference(x, k, ConvWeights(w))
        assert np.array_equal(y[0, 0], x[0, 0, ::2, ::2])

    def test_bias_broadcast(self):
        x = np.zeros((1, 1, 2, 2))
        w = np.zeros((9, 1, 2))
        y = dense_conv_reference(x, KernelSpec.cube(2, 3, 1, 2),
                                 ConvWeights(w, np.array([3.0, -1.0])))
        assert np.all(y[0, 0] == 3.0)
        assert np.all(y[0, 1] == -1.0)


class TestSubmanifoldReference:
    def test_reads_only_active_neighbors(self):
        x = np.ones((1, 1, 3, 3))
        active = np.zeros((1, 3, 3), dtype=bool)
        active[0, 1, 1] = True
        active[0, 0, 0] = True
        w = np.ones((9, 1, 1))
        y = submanifold_reference(x, active, KernelSpec.cube(2, 3, 1, 1),
                                  ConvWeights(w))
        # center gathers itself and the one active neighbor
        assert y[0, 0, 1, 1] == 2.0
        # inactive sites produce nothing
        assert y[0, 0, 2, 2] == 0.0


class TestFiniteDiff:
    def test_quadratic_exact(self):
        f = lambda p: float(p @ p)
        g = finite_diff_grad(f, np.array([1.0, 2.0]), 1e-6)
        assert np.max(np.abs(g - np.array([2.0, 4.0]))) < 1e-9


class TestInfluence:
    def test_submanifold_conv_influence_is_local(self):
        t = SparseTensor(np.array([[0, 2, 2], [0, 2, 3], [0, 6, 6]],
                                  dtype=np.int32),
                         np.ones((3, 2)), (9, 9), 1)
        rng = np.random.default_rng(0)
        w = rand_res(rng, 9, 2)
        pipe = lambda x: ssr_block_forward(x, w, linear=True)
        inf = influence_set(pipe, t, (0, 6, 6))
        # (6,6) has no active cell within two hops of the pair at (2,*)
        assert (0, 6, 6) in inf
        assert (0, 2, 2) not in inf
        assert (0, 2, 3) not in inf

    def test_inactive_probe_raises(self):
        t = random_sparse_tensor(1, (6, 6), 0.2, 2)
        inactive = None
        for y in range(6):
            for x in range(6):
                if not any((c[1], c[2]) == (y, x) for c in t.coords):
                    inactive = (0, y, x)
                    break
            if inactive:
                break
        with pytest.raises(ProbeError):
            influence_set(lambda s: s, t, inactive)

    def test_value_dependent_topology_detected(self):
        t = SparseTensor(np.array([[0, 1, 1], [0, 3, 4]], dtype=np.int32),
                         np.array([[1.0, 0.0], [0.5, 0.0]]), (6, 6), 1)

        def bad_pipe(s):
            # drops rows based on feature values: not a fixed topology
            keep = s.features[:, 0] <= 1.5
            return SparseTensor(s.coords[keep], s.features[keep],
                                s.spatial_shape, s.batch_size)

        with pytest.raises(TopologyError):
            influence_set(bad_pipe, t, (0, 1, 1), delta=10.0)


class TestGenerators:
    def test_random_tensor_is_seed_stable(self):
        a = random_sparse_tensor(42, (6, 6, 6), 0.2, 3)
        b = random_sparse_tensor(42, (6, 6, 6), 0.2, 3)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.features, b.features)

    def test_dilation_hand_case(self):
        coords = np.array([[0, 0, 0]])
        offs = KernelSpec.cube(2, 3, 1, 1).centered_offsets()
        got = minkowski_dilate(coords, (5, 5), offs)
        assert got == {(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)}

    def test_dilation_composes(self):
        coords = np.array([[0, 3, 3]])
        offs = KernelSpec.cube(2, 3, 1, 1).centered_offsets()
        once = minkowski_dilate(coords, (9, 9), offs)
        twice = minkowski_dilate(np.array(sorted(once)), (9, 9), offs)
        # Chebyshev ball of radius 2 around (3,3), fully interior
        assert len(twice) == 25
