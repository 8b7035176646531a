import numpy as np
import pytest

from einmor import tensor4 as t4


def random_tensor(rng, dims, complex_field=False):
    n = dims[0] * dims[1]
    p = dims[2] * dims[3]
    mat = rng.standard_normal((n, p))
    if complex_field:
        mat = mat + 1j * rng.standard_normal((n, p))
    return t4.Tensor4(mat, dims)


def einstein_reference(a, b):
    # independent route: contraction on explicit 4D arrays
    return np.einsum("abjk,jkcd->abcd", a.to_array(), b.to_array())


class TestIvec:
    def test_frozen_values(self):
        assert t4.ivec((1, 1), (3, 4)) == 1
        assert t4.ivec((3, 2), (3, 4)) == 6
        assert t4.ivec((3, 4), (3, 4)) == 12

    def test_bijection(self):
        for J in [(1, 1), (2, 3), (4, 4), (5, 2)]:
            seen = sorted(
                t4.ivec((j1, j2), J)
                for j1 in range(1, J[0] + 1)
                for j2 in range(1, J[1] + 1)
            )
            assert seen == list(range(1, J[0] * J[1] + 1))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            t4.ivec((0, 1), (3, 4))
        with pytest.raises(IndexError):
            t4.ivec((4, 1), (3, 4))
        with pytest.raises(IndexError):
            t4.ivec((1, 5), (3, 4))


class TestUnfolding:
    def test_entry_placement(self):
        # element (2,1,1,2) of a (2,2,2,2) tensor sits at unfolded (2,3), 1-based
        arr = np.zeros((2, 2, 2, 2))
        arr[1, 0, 0, 1] = 7.0
        t = t4.from_array(arr)
        assert t.data[1, 2] == 7.0
        assert t4.ivec((2, 1), (2, 2)) == 2
        assert t4.ivec((1, 2), (2, 2)) == 3

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for dims in [(1, 1, 1, 1), (2, 3, 4, 1), (3, 2, 2, 3)]:
            arr = rng.standard_normal(dims)
            t = t4.from_array(arr)
            assert t.dims == dims
            np.testing.assert_array_equal(t.to_array(), arr)
            back = t4.fold(t4.unfold(t), dims)
            np.testing.assert_array_equal(back.to_array(), arr)

    def test_unfold_matches_ivec(self):
        rng = np.random.default_rng(12)
        dims = (2, 3, 3, 2)
        arr = rng.standard_normal(dims)
        t = t4.from_array(arr)
        J, K = dims[:2], dims[2:]
        for j1 in range(1, J[0] + 1):
            for j2 in range(1, J[1] + 1):
                for k1 in range(1, K[0] + 1):
                    for k2 in range(1, K[1] + 1):
                        r = t4.ivec((j1, j2), J) - 1
                        c = t4.ivec((k1, k2), K) - 1
                        assert t.data[r, c] == arr[j1 - 1, j2 - 1, k1 - 1, k2 - 1]


class TestTensor4Basics:
    def test_validation(self):
        with pytest.raises(ValueError):
            t4.Tensor4(np.zeros((2, 2)), (2, 2, 2, 2))
        with pytest.raises(ValueError):
            t4.Tensor4(np.zeros((4, 4)), (2, 2, 2, 0))
        with pytest.raises(ValueError):
            t4.Tensor4(np.zeros((4, 4)), (2, 2, 2))

    def test_immutable(self):
        t = t4.zeros((2, 2, 2, 2))
        with pytest.raises(AttributeError):
            t.dims = (1, 1, 1, 1)
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_arithmetic(self):
        rng = np.random.default_rng(13)
        a = random_tensor(rng, (2, 3, 2, 2))
        b = random_tensor(rng, (2, 3, 2, 2))
        np.testing.assert_allclose((a + b).data, a.data + b.data)
        np.testing.assert_allclose((a - b).data, a.data - b.data)
        np.testing.assert_allclose((2.5 * a).data, 2.5 * a.data)
        np.testing.assert_allclose((a / 2.0).data, a.data / 2.0)
        np.testing.assert_allclose((-a).data, -a.data)
        with pytest.raises(ValueError):
            a + random_tensor(rng, (3, 2, 2, 2))

    def test_transpose_swaps_pairs(self):
        rng = np.random.default_rng(14)
        a = random_tensor(rng, (2, 3, 4, 2))
        at = a.T
        assert at.dims == (4, 2, 2, 3)
        arr, arrt = a.to_array(), at.to_array()
        for idx in np.ndindex(*a.dims):
            assert arrt[idx[2], idx[3], idx[0], idx[1]] == arr[idx]


class TestEinsteinProduct:
    def test_against_contraction(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            dims_a = tuple(rng.integers(1, 4, size=4))
            dims_b = dims_a[2:] + tuple(rng.integers(1, 4, size=2))
            a = random_tensor(rng, dims_a)
            b = random_tensor(rng, dims_b)
            prod = a @ b
            np.testing.assert_allclose(
                prod.to_array(), einstein_reference(a, b), rtol=0, atol=1e-13
            )

    def test_homomorphism(self):
        # unfold(a * b) = unfold(a) @ unfold(b)
        rng = np.random.default_rng(16)
        a = random_tensor(rng, (2, 3, 3, 2), complex_field=True)
        b = random_tensor(rng, (3, 2, 2, 2), complex_field=True)
        np.testing.assert_allclose((a @ b).data, a.data @ b.data)

    def test_transpose_rule(self):
        rng = np.random.default_rng(17)
        a = random_tensor(rng, (2, 2, 3, 2))
        b = random_tensor(rng, (3, 2, 2, 3))
        lhs = (a @ b).T
        rhs = b.T @ a.T
        assert lhs.dims == rhs.dims
        np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-13)

    def test_identity_neutral(self):
        rng = np.random.default_rng(18)
        a = random_tensor(rng, (2, 3, 3, 2))
        left = t4.identity((2, 3)) @ a
        right = a @ t4.identity((3, 2))
        np.testing.assert_allclose(left.data, a.data)
        np.testing.assert_allclose(right.data, a.data)

    def test_non_conformal(self):
        rng = np.random.default_rng(19)
        a = random_tensor(rng, (2, 2, 3, 2))
        b = random_tensor(rng, (2, 3, 2, 2))
        with pytest.raises(ValueError):
            a @ b

    def test_trace_and_inner(self):
        rng = np.random.default_rng(20)
        a = random_tensor(rng, (2, 3, 2, 3))
        assert t4.trace(a) == pytest.approx(np.trace(a.data))
        x = random_tensor(rng, (2, 3, 2, 2))
        y = random_tensor(rng, (2, 3, 2, 2))
        assert t4.inner(x, y) == pytest.approx(np.trace(x.data.T @ y.data))
        assert t4.fro_norm(x) == pytest.approx(np.sqrt(t4.inner(x, x)))


class TestFactorizations:
    def test_qr(self):
        rng = np.random.default_rng(21)
        for dims in [(3, 3, 2, 2), (4, 2, 2, 3), (2, 2, 2, 2)]:
            a = random_tensor(rng, dims)
            q, r = t4.tensor_qr(a)
            np.testing.assert_allclose((q @ r).data, a.data, atol=1e-12)
            np.testing.assert_allclose(
                q.data.T @ q.data, np.eye(q.data.shape[1]), atol=1e-12
            )
            rd = r.data
            assert np.allclose(rd, np.triu(rd))
            assert np.all(np.diag(rd) >= 0)

    def test_qr_rejects_wide(self):
        rng = np.random.default_rng(22)
        with pytest.raises(ValueError):
            t4.tensor_qr(random_tensor(rng, (2, 2, 3, 2)))

    def test_svd(self):
        rng = np.random.default_rng(23)
        for dims in [(3, 2, 2, 2), (2, 2, 3, 2)]:
            a = random_tensor(rng, dims)
            u, s, v = t4.tensor_svd(a)
            np.testing.assert_allclose((u @ s @ v.T).data, a.data, atol=1e-12)
            np.testing.assert_allclose(
                u.data.T @ u.data, np.eye(u.data.shape[0]), atol=1e-12
            )
            np.testing.assert_allclose(
                v.data.T @ v.data, np.eye(v.data.shape[0]), atol=1e-12
            )
            sv = np.diag(s.data)
            np.testing.assert_allclose(
                np.sort(sv)[::-1], np.linalg.svd(a.data, compute_uv=False), atol=1e-12
            )
            np.testing.assert_allclose(
                t4.singular_values(a), np.linalg.svd(a.data, compute_uv=False)
            )

    def test_eigenvalues(self):
        rng = np.random.default_rng(24)
        a = random_tensor(rng, (2, 3, 2, 3))
        got = np.sort_complex(t4.eigenvalues(a))
        want = np.sort_complex(np.linalg.eigvals(a.data))
        np.testing.assert_allclose(got, want, atol=1e-12)
        with pytest.raises(ValueError):
            t4.eigenvalues(random_tensor(rng, (2, 3, 3, 2)))

    def test_inverse(self):
        rng = np.random.default_rng(25)
        a = random_tensor(rng, (2, 3, 2, 3))
        inv = t4.inverse(a)
        np.testing.assert_allclose((a @ inv).data, np.eye(6), atol=1e-10)
        np.testing.assert_allclose((inv @ a).data, np.eye(6), atol=1e-10)

    def test_inverse_singular(self):
        sing = t4.Tensor4(np.zeros((4, 4)), (2, 2, 2, 2))
        with pytest.raises(t4.SingularOperatorError):
            t4.inverse(sing)


class TestShiftedSolver:
    def test_solve(self):
        rng = np.random.default_rng(26)
        a = random_tensor(rng, (3, 2, 3, 2))
        v = random_tensor(rng, (3, 2, 1, 2))
        solver = t4.ShiftedSolver(a)
        for sigma in [0.0, -1.5, 2.0 + 1.0j]:
            x = solver.solve(sigma, v)
            residual = a.data @ x.data - sigma * x.data - v.data
            assert np.linalg.norm(residual) < 1e-10
            xt = solver.solve(sigma, v, transposed=True)
            residual_t = a.data.T @ xt.data - sigma * xt.data - v.data
            assert np.linalg.norm(residual_t) < 1e-10

    def test_one_shot_matches(self):
        rng = np.random.default_rng(27)
        a = random_tensor(rng, (2, 2, 2, 2))
        v = random_tensor(rng, (2, 2, 1, 1))
        np.testing.assert_allclose(
            t4.shifted_solve(a, -0.5, v).data,
            t4.ShiftedSolver(a).solve(-0.5, v).data,
        )

    def test_singular_shift(self):
        a = t4.identity((2, 2))
        v = t4.Tensor4(np.ones((4, 1)), (2, 2, 1, 1))
        solver = t4.ShiftedSolver(a)
        with pytest.raises(t4.SingularOperatorError) as exc:
            solver.solve(1.0, v)
        assert exc.value.sigma == 1.0

    def test_cache_reuse(self):
        rng = np.random.default_rng(28)
        a = random_tensor(rng, (2, 2, 2, 2))
        solver = t4.ShiftedSolver(a)
        v = random_tensor(rng, (2, 2, 1, 1))
        solver.solve(-1.0, v)
        solver.solve(-1.0, v, transposed=True)
        solver.solve(-1.0 + 0j, v)
        assert len(solver._cache) == 1


class TestBlocks:
    def test_row_mode_shapes(self):
        rng = np.random.default_rng(29)
        a = random_tensor(rng, (2, 3, 2, 2))
        b = random_tensor(rng, (2, 3, 2, 2))
        assert t4.block_concat([a, b], (1, "row")).dims == (2, 6, 2, 2)
        assert t4.block_concat([a, b], (2, "row")).dims == (2, 3, 2, 4)
        assert t4.block_concat([a, b], (1, "column")).dims == (4, 3, 2, 2)
        assert t4.block_concat([a, b], (2, "column")).dims == (2, 3, 4, 2)

    def test_mode2_row_blocks_are_column_slices(self):
        rng = np.random.default_rng(30)
        parts = [random_tensor(rng, (3, 2, 2, 2)) for _ in range(3)]
        cat = t4.block_concat(parts, (2, "row"))
        np.testing.assert_allclose(cat.data, np.hstack([p.data for p in parts]))
        layout = t4.BlockLayout((2, 2), 3)
        for l, p in enumerate(parts, start=1):
            np.testing.assert_array_equal(
                t4.block_extract(cat, layout, l).data, p.data
            )

    def test_mode1_row_blocks_are_row_slices(self):
        rng = np.random.default_rng(31)
        parts = [random_tensor(rng, (2, 2, 3, 2)) for _ in range(2)]
        cat = t4.block_concat(parts, (1, "row"))
        np.testing.assert_allclose(cat.data, np.vstack([p.data for p in parts]))

    def test_mixed_mode_product_contracts(self):
        # [A B] stacked along mode-2 rows times [C; D] stacked along mode-1
        # rows contracts to A*C + B*D
        rng = np.random.default_rng(32)
        K = (2, 2)
        a, b = (random_tensor(rng, K + K) for _ in range(2))
        c, d = (random_tensor(rng, K + K) for _ in range(2))
        lhs = t4.block_concat([a, b], (2, "row")) @ t4.block_concat([c, d], (1, "row"))
        rhs = a @ c + b @ d
        np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-13)

    def test_mixed_mode_product_expands(self):
        # the opposite pairing produces the 2 x 2 block arrangement
        rng = np.random.default_rng(33)
        K = (2, 2)
        a, b = (random_tensor(rng, K + K) for _ in range(2))
        c, d = (random_tensor(rng, K + K) for _ in range(2))
        lhs = t4.block_concat([a, b], (1, "row")) @ t4.block_concat([c, d], (2, "row"))
        top = t4.block_concat([a @ c, a @ d], (2, "row"))
        bot = t4.block_concat([b @ c, b @ d], (2, "row"))
        rhs = t4.block_concat([top, bot], (1, "row"))
        assert lhs.dims == rhs.dims
        np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-13)

    def test_bad_mode(self):
        rng = np.random.default_rng(34)
        a = random_tensor(rng, (2, 2, 2, 2))
        with pytest.raises(ValueError):
            t4.block_concat([a, a], (3, "row"))
        with pytest.raises(ValueError):
            t4.block_concat([], (1, "row"))

    def test_extract_validation(self):
        rng = np.random.default_rng(35)
        cat = random_tensor(rng, (3, 2, 2, 6))
        layout = t4.BlockLayout((2, 2), 3)
        with pytest.raises(IndexError):
            t4.block_extract(cat, layout, 0)
        with pytest.raises(IndexError):
            t4.block_extract(cat, layout, 4)
        with pytest.raises(ValueError):
            t4.block_extract(cat, t4.BlockLayout((2, 2), 2), 1)


class TestT4Format:
    def test_round_trip_real(self, tmp_path):
        rng = np.random.default_rng(36)
        t = random_tensor(rng, (2, 3, 2, 2))
        path = tmp_path / "a.t4"
        t4.write_t4(path, t)
        back = t4.read_t4(path)
        assert back.dims == t.dims
        np.testing.assert_array_equal(back.data, t.data)

    def test_round_trip_complex(self, tmp_path):
        rng = np.random.default_rng(37)
        t = random_tensor(rng, (2, 2, 3, 1), complex_field=True)
        path = tmp_path / "c.t4"
        t4.write_t4(path, t)
        back = t4.read_t4(path)
        assert back.scalar_field == "complex"
        np.testing.assert_array_equal(back.data, t.data)

    def test_header_layout(self, tmp_path):
        t = t4.identity((2, 1))
        path = tmp_path / "i.t4"
        t4.write_t4(path, t)
        first = path.read_text().splitlines()[0]
        assert first == "T4 2 1 2 1 real"

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.t4"
        path.write_text("nope 1 2 3 4 real\n")
        with pytest.raises(ValueError):
            t4.read_t4(path)
        path.write_text("T4 2 2 2 2 real\n1.0 2.0\n")
        with pytest.raises(ValueError):
            t4.read_t4(path)
