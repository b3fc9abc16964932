"""Adapter bank tests: ladder construction, slicing, blending, error bounds."""

import hashlib

import numpy as np
import pytest

from chunklora import adapter as ad
from chunklora.errors import PolicyError, RangeError, ShapeError
from chunklora.linalg import frobenius, svd, truncated_reconstruct

SITE = ad.Site(0, "q")


def checksum(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@pytest.fixture(scope="module")
def ladder16():
    a = ad.synthesize_adapter(SITE, 64, 64, r_max=16, seed=11)
    return a, ad.build_rank_ladder(a)


class TestSynthesize:
    def test_same_seed_same_delta(self):
        a = ad.synthesize_adapter(SITE, 64, 64, 16, seed=5)
        b = ad.synthesize_adapter(SITE, 64, 64, 16, seed=5)
        assert checksum(a.delta()) == checksum(b.delta())

    def test_different_seed_differs(self):
        a = ad.synthesize_adapter(SITE, 64, 64, 16, seed=5)
        b = ad.synthesize_adapter(SITE, 64, 64, 16, seed=6)
        assert checksum(a.delta()) != checksum(b.delta())

    def test_numerical_rank_bounded(self):
        a = ad.synthesize_adapter(SITE, 64, 64, 16, seed=7)
        sigma = svd(a.delta()).sigma
        assert sigma[16] <= 1e-10 * sigma[0]

    def test_spectrum_strictly_decreasing(self):
        a = ad.synthesize_adapter(SITE, 64, 64, 16, seed=9)
        sigma = svd(a.delta()).sigma[:16]
        assert np.all(np.diff(sigma) < 0.0)

    def test_rejects_oversized_rank(self):
        with pytest.raises(RangeError):
            ad.synthesize_adapter(SITE, 8, 8, 16, seed=1)


class TestRankLadder:
    def test_trained_rank_limits_spectrum(self):
        a = ad.synthesize_adapter(SITE, 32, 32, 4, seed=3)
        ladder = ad.build_rank_ladder(a, allowed_ranks=(2, 4))
        above = np.sum(ladder.sigma > 1e-10 * ladder.sigma[0])
        assert above <= 4

    def test_full_rank_slice_recovers_delta(self, ladder16):
        a, ladder = ladder16
        recon = (ladder.u[:, :16] * ladder.sigma[:16]) @ ladder.v[:, :16].T
        assert frobenius(recon - a.delta()) <= 1e-5 * frobenius(a.delta())

    def test_slices_are_nested(self, ladder16):
        # span(U_4) must sit inside span(U_8): projection residual ~ 0
        _, ladder = ladder16
        u4 = ladder.u[:, :4]
        u8 = ladder.u[:, :8]
        residual = u4 - u8 @ (u8.T @ u4)
        assert frobenius(residual) <= 1e-8

    def test_idempotent_build(self, ladder16):
        a, ladder = ladder16
        again = ad.build_rank_ladder(a)
        assert np.array_equal(ladder.u, again.u)
        assert np.array_equal(ladder.sigma, again.sigma)
        assert np.array_equal(ladder.v, again.v)

    def test_allowed_rank_validation(self, ladder16):
        a, _ = ladder16
        with pytest.raises(RangeError):
            ad.build_rank_ladder(a, allowed_ranks=(4, 128))
        with pytest.raises(RangeError):
            ad.build_rank_ladder(a, allowed_ranks=(8, 4))


class TestApply:
    def test_zero_scale(self, ladder16):
        _, ladder = ladder16
        x = np.ones(64)
        out = ad.apply(ladder, ad.ChunkAdapterSetting(8, 0.0), x)
        assert np.array_equal(out, np.zeros(64))

    def test_zero_rank(self, ladder16):
        _, ladder = ladder16
        out = ad.apply(ladder, ad.ChunkAdapterSetting(0, 1.0), x=np.ones(64))
        assert np.array_equal(out, np.zeros(64))

    def test_full_rank_matches_dense_oracle(self, ladder16):
        a, ladder = ladder16
        rng = np.random.default_rng(23)
        x = rng.standard_normal(64)
        got = ad.apply(ladder, ad.ChunkAdapterSetting(16, 1.0), x)
        want = a.delta() @ x
        assert np.max(np.abs(got - want)) <= 1e-5

    def test_disallowed_rank(self, ladder16):
        _, ladder = ladder16
        with pytest.raises(PolicyError):
            ad.apply(ladder, ad.ChunkAdapterSetting(5, 1.0), np.ones(64))

    def test_bad_input_length(self, ladder16):
        _, ladder = ladder16
        with pytest.raises(ShapeError):
            ad.apply(ladder, ad.ChunkAdapterSetting(4, 1.0), np.ones(63))

    def test_operator_norm_bounded_by_tail(self, ladder16):
        a, ladder = ladder16
        rng = np.random.default_rng(31)
        dense = a.delta()
        for r in (4, 8, 16):
            bound = ad.linearization_error(ladder, r)
            for _ in range(20):
                x = rng.standard_normal(64)
                got = ad.apply(ladder, ad.ChunkAdapterSetting(r, 1.0), x)
                gap = np.linalg.norm(got - dense @ x)
                assert gap <= bound * np.linalg.norm(x) + 1e-9


class TestBlend:
    def test_endpoints(self, ladder16):
        _, ladder = ladder16
        rng = np.random.default_rng(41)
        x = rng.standard_normal(64)
        hi = ad.ChunkAdapterSetting(16, 1.0)
        lo = ad.ChunkAdapterSetting(4, 0.5)
        assert np.array_equal(
            ad.blend_apply(ladder, hi, lo, 1.0, x), ad.apply(ladder, hi, x)
        )
        assert np.array_equal(
            ad.blend_apply(ladder, hi, lo, 0.0, x), ad.apply(ladder, lo, x)
        )

    def test_midpoint_is_mean(self, ladder16):
        _, ladder = ladder16
        rng = np.random.default_rng(43)
        x = rng.standard_normal(64)
        hi = ad.ChunkAdapterSetting(16, 1.0)
        lo = ad.ChunkAdapterSetting(8, 0.75)
        got = ad.blend_apply(ladder, hi, lo, 0.5, x)
        want = 0.5 * (ad.apply(ladder, hi, x) + ad.apply(ladder, lo, x))
        assert np.allclose(got, want, atol=1e-14)

    def test_lipschitz_in_lambda(self, ladder16):
        # finite-difference check of the cross-fade continuity bound
        _, ladder = ladder16
        rng = np.random.default_rng(47)
        x = rng.standard_normal(64)
        hi = ad.ChunkAdapterSetting(16, 1.0)
        lo = ad.ChunkAdapterSetting(4, 0.5)
        bound = np.linalg.norm(ad.apply(ladder, hi, x)) + np.linalg.norm(
            ad.apply(ladder, lo, x)
        )
        lams = np.linspace(0.0, 1.0, 21)
        outs = [ad.blend_apply(ladder, hi, lo, lam, x) for lam in lams]
        for a_out, b_out, la, lb in zip(outs, outs[1:], lams, lams[1:]):
            delta = abs(lb - la)
            assert np.linalg.norm(b_out - a_out) <= delta * bound + 1e-12

    def test_rejects_bad_lambda(self, ladder16):
        _, ladder = ladder16
        s = ad.ChunkAdapterSetting(4, 1.0)
        with pytest.raises(RangeError):
            ad.blend_apply(ladder, s, s, 1.5, np.ones(64))


class TestLinearizationError:
    def test_full_rank_zero(self, ladder16):
        _, ladder = ladder16
        assert ad.linearization_error(ladder, len(ladder.sigma)) == 0.0

    def test_rank_zero_is_full_norm(self, ladder16):
        a, ladder = ladder16
        assert ad.linearization_error(ladder, 0) == pytest.approx(
            frobenius(a.delta()), abs=1e-10
        )

    def test_matches_explicit_subtraction(self, ladder16):
        a, ladder = ladder16
        res = svd(a.delta())
        for r in (0, 4, 8, 16):
            direct = frobenius(a.delta() - truncated_reconstruct(res, r))
            assert abs(ad.linearization_error(ladder, r) - direct) <= 1e-8

    def test_monotone_in_rank(self, ladder16):
        _, ladder = ladder16
        errs = [ad.linearization_error(ladder, r) for r in range(len(ladder.sigma) + 1)]
        assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))

    def test_range_check(self, ladder16):
        _, ladder = ladder16
        with pytest.raises(RangeError):
            ad.linearization_error(ladder, len(ladder.sigma) + 1)


class TestActiveAdapterSet:
    def test_missing_site_contributes_nothing(self, ladder16):
        aset = ad.ActiveAdapterSet()
        assert aset.contribution(SITE, np.ones(64)) is None

    def test_gated_off_contributes_nothing(self, ladder16):
        _, ladder = ladder16
        aset = ad.ActiveAdapterSet()
        aset.activate(ladder, ad.ChunkAdapterSetting(16, 0.0))
        assert aset.contribution(SITE, np.ones(64)) is None
        assert aset.mac_count == 0

    def test_mac_tally_single(self, ladder16):
        _, ladder = ladder16
        aset = ad.ActiveAdapterSet()
        aset.activate(ladder, ad.ChunkAdapterSetting(8, 1.0))
        aset.contribution(SITE, np.ones(64))
        assert aset.mac_count == 2 * 8 * (64 + 64)

    def test_mac_tally_fade_counts_both_sides(self, ladder16):
        _, ladder = ladder16
        aset = ad.ActiveAdapterSet()
        aset.activate(
            ladder,
            ad.ChunkAdapterSetting(16, 1.0),
            outgoing=ad.ChunkAdapterSetting(4, 0.5),
            fade_lambda=0.5,
        )
        out = aset.contribution(SITE, np.ones(64))
        assert out is not None
        assert aset.mac_count == 2 * 4 * 128 + 2 * 16 * 128


class TestAdapterFile:
    def test_round_trip(self, tmp_path):
        a = ad.synthesize_adapter(ad.Site(1, "up"), 256, 64, 16, seed=77)
        path = str(tmp_path / "a.cwla")
        ad.save_adapter(path, a)
        back = ad.load_adapter(path)
        assert back.site == a.site
        assert back.trained_rank == 16
        # factors round-trip through float32 storage
        assert np.allclose(back.down, a.down, atol=1e-6)
        assert np.allclose(back.up, a.up, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cwla"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        from chunklora.errors import FormatError

        with pytest.raises(FormatError):
            ad.load_adapter(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.cwla"
        path.write_bytes(b"CW")
        from chunklora.errors import FormatError

        with pytest.raises(FormatError):
            ad.load_adapter(str(path))
