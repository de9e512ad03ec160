import math
import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contrastive_geometry.errors import (
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    InvalidParameterError,
)
from contrastive_geometry.features import (
    FeatureMap,
    InstanceVector,
    ViewPairBatch,
    cosine_sim,
    decode_dclf,
    encode_dclf,
    gaussian_potential,
    l2_normalize,
    pairwise_cos_matrix,
    read_dclf,
    write_dclf,
    zero_columns,
)

from oracles import cos, random_unit


def fmap(cols, h=1, w=None):
    cols = np.asarray(cols, dtype=float)
    w = w or cols.shape[0] // h
    return FeatureMap.from_columns(cols, h, w)


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(fmap([[3.0, 4.0]]), 1e-12)
        np.testing.assert_allclose(out.columns(), [[0.6, 0.8]])
        assert out.normalized

    def test_zero_vector_is_clamped(self):
        out = l2_normalize(fmap([[0.0, 0.0]]), 1e-12)
        assert np.array_equal(out.columns(), [[0.0, 0.0]])
        assert list(zero_columns(out)) == [0]

    def test_random_128_dim_map_has_unit_columns(self):
        rng = np.random.default_rng(3)
        m = FeatureMap(rng.standard_normal((128, 7, 7)) * 5.0)
        norms = np.linalg.norm(l2_normalize(m).columns(), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 2, 3), elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, data):
        # a nonzero column shorter than epsilon is scaled by 1/epsilon but not
        # to unit length, so idempotence only holds for zero or >= epsilon columns
        norms = np.linalg.norm(data.reshape(4, -1), axis=0)
        assume(np.all((norms == 0) | (norms >= 1e-12)))
        once = l2_normalize(FeatureMap(data))
        twice = l2_normalize(once)
        np.testing.assert_allclose(twice.data, once.data, rtol=0, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            FeatureMap(np.array([[[np.nan]]]))
        with pytest.raises(InvalidInputError):
            l2_normalize(np.array([[np.inf, 1.0]]))

    def test_rejects_bad_epsilon(self):
        with pytest.raises(InvalidParameterError):
            l2_normalize(fmap([[1.0, 0.0]]), 0.0)

    def test_normalized_flag_is_checked(self):
        with pytest.raises(InvalidInputError):
            FeatureMap(np.ones((2, 1, 1)), normalized=True)
        InstanceVector(np.array([0.6, 0.8]), normalized=True)

    def test_batch_normalization(self):
        rng = np.random.default_rng(0)
        batch = l2_normalize(ViewPairBatch(rng.standard_normal((3, 2, 5, 2, 2))))
        assert batch.normalized
        np.testing.assert_allclose(np.linalg.norm(batch.flat(), axis=-1), 1.0)


class TestKernels:
    def test_cosine_examples(self):
        assert cosine_sim([1, 0], [1, 0]) == 1.0
        assert cosine_sim([1, 0], [-1, 0]) == -1.0
        assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_cosine_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            cosine_sim([0, 0], [1, 0])

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 5, elements=st.floats(-100, 100)),
        arrays(np.float64, 5, elements=st.floats(-100, 100)),
        st.floats(0.01, 100),
    )
    def test_cosine_properties(self, x, y, scale):
        if np.linalg.norm(x) < 1e-6 or np.linalg.norm(y) < 1e-6:
            return
        c = cosine_sim(x, y)
        assert -1.0 <= c <= 1.0
        assert c == pytest.approx(cosine_sim(y, x), abs=1e-12)
        assert cosine_sim(scale * x, y) == pytest.approx(c, abs=1e-9)

    def test_potential_examples(self):
        x = np.array([1.0, 0.0])
        assert gaussian_potential(x, x, 0.7) == 1.0
        assert gaussian_potential(x, -x, 1.0) == pytest.approx(0.01831563888873418, rel=1e-12)
        assert gaussian_potential(x, np.array([0.0, 1.0]), 2.0) == pytest.approx(math.exp(-4), rel=1e-12)

    def test_potential_rejects_bad_t(self):
        with pytest.raises(InvalidParameterError):
            gaussian_potential([1, 0], [0, 1], 0.0)

    def test_kernel_bridge(self):
        rng = np.random.default_rng(11)
        xs = random_unit(rng, (1000, 6))
        ys = random_unit(rng, (1000, 6))
        ts = rng.uniform(0.1, 4.0, 1000)
        for x, y, t in zip(xs, ys, ts):
            expected = math.exp(-2 * t * (1 - cosine_sim(x, y)))
            assert abs(gaussian_potential(x, y, t) - expected) <= 1e-10

    def test_pairwise_matrix_matches_loop(self):
        rng = np.random.default_rng(5)
        a = l2_normalize(FeatureMap(rng.standard_normal((6, 2, 2))))
        b = l2_normalize(FeatureMap(rng.standard_normal((6, 2, 2))))
        mat = pairwise_cos_matrix(a, b)
        for p, ap in enumerate(a.columns()):
            for q, bq in enumerate(b.columns()):
                assert mat[p, q] == pytest.approx(cos(ap, bq), abs=1e-12)

    def test_pairwise_self(self):
        rng = np.random.default_rng(6)
        a = l2_normalize(FeatureMap(rng.standard_normal((8, 3, 3))))
        mat = pairwise_cos_matrix(a, a)
        np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-12)
        np.testing.assert_allclose(mat, mat.T, atol=1e-10)

    def test_pairwise_scalar_case(self):
        a = fmap([[1.0, 2.0]])
        b = fmap([[2.0, -1.0]])
        assert pairwise_cos_matrix(a, b).shape == (1, 1)
        assert pairwise_cos_matrix(a, b)[0, 0] == pytest.approx(cosine_sim([1, 2], [2, -1]), abs=1e-15)

    def test_pairwise_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            pairwise_cos_matrix(FeatureMap(np.ones((2, 1, 1))), FeatureMap(np.ones((3, 1, 1))))


class TestContainers:
    def test_batch_layout_round_trip(self):
        rng = np.random.default_rng(1)
        views = rng.standard_normal((2, 2, 3, 2, 4))
        batch = ViewPairBatch(views)
        flat = batch.flat()
        assert flat.shape == (2, 2, 8, 3)
        # spatial index p = row * W + col
        np.testing.assert_array_equal(flat[1, 0, 5], views[1, 0, :, 1, 1])
        np.testing.assert_array_equal(batch.unflatten(flat), views)
        again = ViewPairBatch.from_flat(flat, 2, 4)
        np.testing.assert_array_equal(again.views, views)

    def test_from_maps_requires_homogeneous_shapes(self):
        a = FeatureMap(np.ones((2, 1, 1)))
        b = FeatureMap(np.ones((2, 1, 2)))
        with pytest.raises(InvalidInputError):
            ViewPairBatch.from_maps([(a, a), (b, b)])

    def test_immutable(self):
        m = FeatureMap(np.ones((2, 1, 1)))
        with pytest.raises(ValueError):
            m.data[0, 0, 0] = 3.0


class TestDCLF:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        arr = rng.standard_normal((3, 2, 4, 2, 3)).astype(np.float32)
        write_dclf(tmp_path / "x.dclf", arr)
        back = read_dclf(tmp_path / "x.dclf")
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, arr.astype(np.float64))

    def test_header_layout(self):
        buf = encode_dclf(np.zeros((1, 2, 3, 4, 5)))
        assert buf[:4] == b"DCLF"
        assert struct.unpack("<6I", buf[4:28]) == (1, 1, 2, 3, 4, 5)
        assert len(buf) == 28 + 4 * 120

    def test_value_order(self):
        arr = np.arange(2 * 1 * 2 * 1 * 3, dtype=np.float32).reshape(2, 1, 2, 1, 3)
        payload = np.frombuffer(encode_dclf(arr)[28:], dtype="<f4")
        np.testing.assert_array_equal(payload, np.arange(12))

    def test_bad_magic(self):
        buf = bytearray(encode_dclf(np.zeros((1, 1, 1, 1, 1))))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError) as err:
            decode_dclf(bytes(buf))
        assert err.value.offset == 0

    def test_bad_version(self):
        buf = bytearray(encode_dclf(np.zeros((1, 1, 1, 1, 1))))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError):
            decode_dclf(bytes(buf))

    @pytest.mark.parametrize("cut", [2, 10, 28, 31])
    def test_truncated(self, cut):
        buf = encode_dclf(np.zeros((1, 1, 2, 1, 1)))
        with pytest.raises(FormatError):
            decode_dclf(buf[:cut])
