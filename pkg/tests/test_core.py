import numpy as np
import pytest

from rowfuse.core import (
    INT32_MAX,
    DType,
    IndexWidth,
    Matrix2D,
    NonContiguousInput,
    ShapeMismatch,
    SizeMismatch,
    Vector,
    assert_contiguous,
    check_index_width,
    flat_offset,
    flatten,
    read_matrix_csv,
    write_matrix_csv,
)


class TestDType:
    def test_byte_widths(self):
        assert DType.F32.byte_width == 4
        assert DType.F64.byte_width == 8

    def test_np_dtype_round_trip(self):
        for dt in DType:
            assert DType.from_numpy(dt.np_dtype) is dt

    def test_parse(self):
        assert DType.parse("f32") is DType.F32
        assert DType.parse(" F64 ") is DType.F64
        with pytest.raises(ValueError):
            DType.parse("bf16")

    def test_from_numpy_rejects_ints(self):
        with pytest.raises(ValueError):
            DType.from_numpy(np.dtype(np.int64))


class TestIndexWidth:
    def test_small_shapes_narrow(self):
        assert check_index_width(1024, 1024) is IndexWidth.NARROW32

    def test_huge_product_wide(self):
        assert check_index_width(2**31, 2) is IndexWidth.WIDE64

    def test_46341_square_is_wide(self):
        # 46341^2 = 2,147,488,281 > 2^31 - 1; one below the root stays narrow
        assert 46341 * 46341 == 2_147_488_281
        assert check_index_width(46341, 46341) is IndexWidth.WIDE64
        assert check_index_width(46340, 46340) is IndexWidth.NARROW32

    def test_exact_boundary(self):
        # last offset == INT32_MAX still fits; one more element does not
        assert check_index_width(2**30, 2) is IndexWidth.NARROW32
        assert 2**30 * 2 - 1 == INT32_MAX
        assert check_index_width(2**30, 3) is IndexWidth.WIDE64

    def test_monotone_in_each_dimension(self):
        sizes = [1, 2, 46340, 46341, 2**17]
        for r in sizes:
            for c in sizes:
                wide = check_index_width(r, c) is IndexWidth.WIDE64
                wider = check_index_width(r + 1, c) is IndexWidth.WIDE64
                taller = check_index_width(r, c + 1) is IndexWidth.WIDE64
                assert wider >= wide and taller >= wide

    def test_rejects_empty(self):
        with pytest.raises(SizeMismatch):
            check_index_width(0, 5)

    def test_flat_offset_exact_past_int32(self):
        n = 46341
        off = flat_offset(n - 1, n - 1, n)
        assert off == n * n - 1 == 2_147_488_280
        assert off > INT32_MAX  # a 32-bit index would have wrapped negative

    def test_flat_offset_bounds(self):
        with pytest.raises(SizeMismatch):
            flat_offset(0, 5, 5)


class TestVector:
    def test_requires_1d(self):
        with pytest.raises(ShapeMismatch):
            Vector(np.zeros((2, 2)), DType.F64)

    def test_requires_nonempty(self):
        with pytest.raises(SizeMismatch):
            Vector(np.zeros(0), DType.F64)

    def test_of_casts(self):
        v = Vector.of([1, 2, 3], DType.F32)
        assert v.data.dtype == np.float32
        assert v.length == 3


class TestMatrix2D:
    def test_length_must_match(self):
        with pytest.raises(SizeMismatch):
            Matrix2D(2, 3, np.zeros(5), DType.F64)

    def test_shape_must_be_positive(self):
        with pytest.raises(SizeMismatch):
            Matrix2D(0, 3, np.zeros(0), DType.F64)

    def test_dtype_must_match_buffer(self):
        with pytest.raises(SizeMismatch):
            Matrix2D(1, 2, np.zeros(2, dtype=np.float32), DType.F64)

    def test_from_rows_row_major(self):
        m = Matrix2D.from_rows([[1.0, 2.0], [3.0, 4.0]])
        assert m.data.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert m.row(1).tolist() == [3.0, 4.0]

    def test_from_array_contiguous(self):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        m = Matrix2D.from_array(arr)
        assert m.contiguous
        assert np.shares_memory(m.data, arr)

    def test_from_array_strided_is_flagged(self):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        m = Matrix2D.from_array(arr.T)
        assert not m.contiguous
        # physical buffer kept in memory order, not logical order
        assert m.rows == 3 and m.cols == 2
        with pytest.raises(NonContiguousInput):
            _ = m.view2d

    def test_assert_contiguous(self):
        ok = Matrix2D.from_rows([[1.0]])
        assert_contiguous(ok)  # 1x1 is trivially fine
        bad = Matrix2D(2, 2, np.zeros(4), DType.F64, contiguous=False)
        with pytest.raises(NonContiguousInput):
            assert_contiguous(bad)

    def test_nbytes(self):
        assert Matrix2D.zeros(3, 5, DType.F32).nbytes == 60
        assert Matrix2D.zeros(3, 5, DType.F64).nbytes == 120

    def test_copy_is_independent(self):
        m = Matrix2D.from_rows([[1.0, 2.0]])
        c = m.copy()
        c.data[0] = 9.0
        assert m.data[0] == 1.0


class TestFlatten:
    def test_basic_shape(self):
        m = flatten(2, 3, 4, np.arange(24, dtype=np.float64))
        assert (m.rows, m.cols) == (6, 4)
        assert m.contiguous

    def test_singleton(self):
        m = flatten(1, 1, 1, np.array([7.0]))
        assert (m.rows, m.cols) == (1, 1)
        assert m.data.tolist() == [7.0]

    def test_wrong_length(self):
        with pytest.raises(SizeMismatch):
            flatten(2, 2, 3, np.zeros(11))

    def test_zero_copy(self):
        buf = np.arange(12, dtype=np.float64)
        m = flatten(2, 2, 3, buf)
        buf[0] = 42.0
        assert m.data[0] == 42.0

    def test_element_access_matches_flat_layout(self):
        b, t, h = 2, 3, 4
        buf = np.arange(b * t * h, dtype=np.float64)
        m = flatten(b, t, h, buf)
        for i in range(b * t):
            for j in range(h):
                assert m.view2d[i, j] == buf[i * h + j]

    def test_rejects_strided_buffer(self):
        base = np.arange(24, dtype=np.float64).reshape(4, 6)
        with pytest.raises(NonContiguousInput):
            flatten(2, 3, 2, base.T)


class TestMatrixCsv:
    @pytest.mark.parametrize("dtype", [DType.F32, DType.F64])
    def test_round_trip_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(3)
        arr = rng.uniform(-1, 1, (4, 7)).astype(dtype.np_dtype)
        m = Matrix2D.from_array(arr, dtype)
        path = tmp_path / "m.csv"
        write_matrix_csv(m, path)
        back = read_matrix_csv(path)
        assert (back.rows, back.cols, back.dtype) == (4, 7, dtype)
        assert np.array_equal(back.data, m.data)

    def test_header_guard(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("oops\n1,2,f64\n0,0\n")
        with pytest.raises(SizeMismatch):
            read_matrix_csv(path)

    def test_refuses_strided(self, tmp_path):
        bad = Matrix2D(2, 2, np.zeros(4), DType.F64, contiguous=False)
        with pytest.raises(NonContiguousInput):
            write_matrix_csv(bad, tmp_path / "x.csv")
