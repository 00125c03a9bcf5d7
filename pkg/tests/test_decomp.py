import warnings

import numpy as np
import pytest

from tnet.decomp import (
    MPSCores, TuckerFactors, hooi, hosvd, load_bundle, mps_element, mps_reconstruct,
    relative_error, save_bundle, tt_rank_bounds, tt_svd, tucker_reconstruct,
)
from tnet.tensor_core import RankError, ShapeError


def random_orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def exact_tucker(rng, shape, ranks):
    core = rng.standard_normal(ranks)
    t = core
    for k, (i, r) in enumerate(zip(shape, ranks)):
        # einsum oracle for the mode-k product, independent of mode_n_product
        t = np.moveaxis(np.tensordot(random_orthonormal(rng, i, r), t, axes=(1, k)), 0, k)
    return t


def exact_train(rng, shape, chain):
    cores = [rng.standard_normal((chain[k], n, chain[k + 1])) for k, n in enumerate(shape)]
    full = cores[0]
    for c in cores[1:]:
        full = np.tensordot(full, c, axes=(-1, 0))
    return full.reshape(shape), cores


class TestTuckerFactors:
    def test_rejects_rank_above_extent(self):
        with pytest.raises(RankError):
            TuckerFactors(np.zeros((3,)), [np.zeros((2, 3))])

    def test_rejects_mismatched_core(self):
        with pytest.raises((ShapeError, RankError)):
            TuckerFactors(np.zeros((2, 2)), [np.zeros((4, 2)), np.zeros((4, 3))])


class TestHOSVD:
    def test_full_rank_reconstructs(self, rng):
        t = rng.standard_normal((3, 4, 5))
        tucker = hosvd(t, t.shape)
        assert relative_error(t, tucker_reconstruct(tucker)) <= 1e-10

    def test_factor_columns_orthonormal(self, rng):
        tucker = hosvd(rng.standard_normal((4, 5, 6)), (2, 3, 4))
        for f in tucker.factors:
            np.testing.assert_allclose(f.T @ f, np.eye(f.shape[1]), atol=1e-12)

    def test_rank_one(self, rng):
        a, b, c = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(2)
        t = np.einsum("i,j,k->ijk", a, b, c)
        assert relative_error(t, tucker_reconstruct(hosvd(t, (1, 1, 1)))) <= 1e-10

    def test_rank_errors(self):
        with pytest.raises(RankError):
            hosvd(np.ones((2, 3)), (3, 1))
        with pytest.raises(RankError):
            hosvd(np.ones((2, 3)), (0, 1))
        with pytest.raises(RankError):
            hosvd(np.ones((2, 3)), (1,))


class TestHOOI:
    @pytest.mark.parametrize("shape,ranks", [((6, 5, 4), (3, 2, 2)), ((4, 4, 3, 5), (2, 3, 2, 2))])
    def test_recovers_exact_multilinear_rank(self, rng, shape, ranks):
        t = exact_tucker(rng, shape, ranks)
        tucker, history = hooi(t, ranks)
        assert relative_error(t, tucker_reconstruct(tucker)) <= 1e-8
        assert len(history) - 1 <= 2

    def test_history_monotone(self, rng):
        t = rng.standard_normal((6, 7, 5))
        _, history = hooi(t, (2, 3, 2), tol=1e-12, max_iter=50)
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_never_worse_than_hosvd(self, rng):
        t = rng.standard_normal((5, 6, 4))
        tucker, history = hooi(t, (2, 2, 2), tol=1e-10)
        base = relative_error(t, tucker_reconstruct(hosvd(t, (2, 2, 2))))
        assert history[-1] <= base + 1e-15
        assert relative_error(t, tucker_reconstruct(tucker)) == pytest.approx(history[-1], rel=1e-12)

    def test_zero_iterations_is_hosvd(self, rng):
        t = rng.standard_normal((3, 4, 5))
        tucker, history = hooi(t, (2, 2, 2), max_iter=0)
        ref = hosvd(t, (2, 2, 2))
        assert len(history) == 1
        np.testing.assert_array_equal(tucker.core, ref.core)

    def test_zero_tensor(self):
        tucker, history = hooi(np.zeros((2, 3, 2)), (1, 1, 1))
        assert all(h == 0.0 for h in history)
        assert np.all(tucker_reconstruct(tucker) == 0)

    @pytest.mark.parametrize("kwargs", [{"tol": 0.0}, {"tol": -1.0}, {"max_iter": -1}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            hooi(np.ones((2, 2)), (1, 1), **kwargs)


class TestTTSVD:
    def test_matrix_is_truncated_svd(self, rng):
        m = rng.standard_normal((5, 7))
        mps = tt_svd(m, (3,))
        oracle = np.linalg.svd(m, compute_uv=False)
        err = np.linalg.norm(mps_reconstruct(mps) - m)
        assert err == pytest.approx(np.sqrt(np.sum(oracle[3:] ** 2)), rel=1e-9)

    @pytest.mark.parametrize("shape,chain", [
        ((3, 4, 5), (1, 2, 3, 1)),
        ((2, 3, 4, 3, 2), (1, 2, 4, 3, 2, 1)),
    ])
    def test_recovers_synthetic_train(self, rng, shape, chain):
        t, _ = exact_train(rng, shape, chain)
        mps = tt_svd(t, chain)
        assert relative_error(t, mps_reconstruct(mps)) <= 1e-8
        assert mps.ranks == chain

    def test_interior_rank_form(self, rng):
        t, _ = exact_train(rng, (3, 4, 5), (1, 2, 3, 1))
        assert tt_svd(t, (2, 3)).ranks == (1, 2, 3, 1)

    def test_separable_rank_one(self, rng):
        vs = [rng.standard_normal(n) for n in (3, 2, 4)]
        t = np.einsum("i,j,k->ijk", *vs)
        assert relative_error(t, mps_reconstruct(tt_svd(t, (1, 1)))) <= 1e-10

    def test_full_bounds_exact(self, rng):
        t = rng.standard_normal((2, 3, 4))
        mps = tt_svd(t, tt_rank_bounds(t.shape))
        assert relative_error(t, mps_reconstruct(mps)) <= 1e-10

    def test_clamps_with_warning(self, rng):
        t = rng.standard_normal((2, 3, 2))
        with pytest.warns(UserWarning, match="clamped"):
            mps = tt_svd(t, (5, 5))
        assert mps.ranks == (1, 2, 2, 1)

    def test_no_warning_within_bounds(self, rng):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            tt_svd(rng.standard_normal((2, 3, 2)), (2, 2))

    @pytest.mark.parametrize("ranks", [(0, 2), (2,), (2, 1, 2, 1)])
    def test_rejects_bad_ranks(self, rng, ranks):
        with pytest.raises(RankError):
            tt_svd(rng.standard_normal((2, 3, 2)), ranks)

    def test_rank_bounds(self):
        assert tt_rank_bounds((2, 3, 4)) == (1, 2, 4, 1)


class TestMPS:
    def test_element_matches_reconstruction(self, rng):
        t, _ = exact_train(rng, (3, 4, 2, 5), (1, 2, 3, 2, 1))
        mps = tt_svd(t, (2, 3, 2))
        full = mps_reconstruct(mps)
        for idx in zip(*(rng.integers(0, n, 20) for n in t.shape)):
            assert mps_element(mps, idx) == full[idx]

    def test_element_matches_explicit_product(self, rng):
        cores = [rng.standard_normal(s) for s in ((1, 3, 2), (2, 4, 2), (2, 3, 1))]
        mps = MPSCores(cores)
        for idx in [(0, 0, 0), (2, 3, 1), (1, 2, 0)]:
            oracle = (cores[0][:, idx[0], :] @ cores[1][:, idx[1], :] @ cores[2][:, idx[2], :])[0, 0]
            assert mps_element(mps, idx) == pytest.approx(oracle, rel=1e-13)

    def test_zero_core(self, rng):
        cores = [rng.standard_normal((1, 3, 2)), np.zeros((2, 2, 2)), rng.standard_normal((2, 2, 1))]
        mps = MPSCores(cores)
        assert np.all(mps_reconstruct(mps) == 0)
        assert mps_element(mps, (1, 1, 1)) == 0.0

    def test_element_index_checks(self, rng):
        mps = MPSCores([rng.standard_normal((1, 2, 1))])
        with pytest.raises(IndexError):
            mps_element(mps, (2,))
        with pytest.raises(ShapeError):
            mps_element(mps, (0, 0))

    def test_rejects_inconsistent_links(self, rng):
        with pytest.raises(RankError):
            MPSCores([rng.standard_normal((1, 2, 2)), rng.standard_normal((3, 2, 1))])

    def test_rejects_open_boundary(self, rng):
        with pytest.raises(RankError):
            MPSCores([rng.standard_normal((2, 2, 1))])


class TestRelativeError:
    def test_zero_over_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_zero_reference_raises(self):
        with pytest.raises(ShapeError):
            relative_error(np.zeros(3), np.ones(3))

    def test_value(self):
        assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 3.0])) == pytest.approx(0.2)


class TestBundle:
    def test_tucker_round_trip(self, tmp_path, rng):
        tucker = hosvd(rng.standard_normal((3, 4, 2)), (2, 2, 1))
        meta = save_bundle(tmp_path / "b", tucker, relative_err=0.5, iterations=3)
        back, meta2 = load_bundle(tmp_path / "b")
        assert meta == meta2
        assert meta2["method"] == "tucker" and meta2["ranks"] == [2, 2, 1]
        assert back.core.tobytes() == tucker.core.tobytes()
        for a, b in zip(back.factors, tucker.factors):
            assert a.tobytes() == b.tobytes()

    def test_mps_round_trip(self, tmp_path, rng):
        mps = tt_svd(rng.standard_normal((2, 3, 4)), (2, 3))
        save_bundle(tmp_path / "m", mps)
        back, meta = load_bundle(tmp_path / "m")
        assert meta["method"] == "mps" and meta["ranks"] == [1, 2, 3, 1]
        assert np.array_equal(mps_reconstruct(back), mps_reconstruct(mps))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_bundle(tmp_path / "nowhere")
