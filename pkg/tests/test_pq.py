"""Product quantizer: training, codes, lookup tables, blocked storage, files."""

import os

import numpy as np
import pytest

from frann.core import Metric, Transform, similarity
from frann.pq import (
    KSUB,
    CodeBlockArray,
    PQCodebook,
    adc_score,
    adc_score_q8,
    codebook_from_bytes,
    codebook_to_bytes,
    compute_lut,
    encode_for_insert,
    load_codebook,
    opq_init,
    pack_codes,
    pq_decode,
    pq_encode,
    pq_train,
    quantize_lut,
    save_codebook,
    split_subspaces,
    unpack_codes,
)


def random_codebook(rng, m, dsub):
    return PQCodebook(rng.normal(size=(m, KSUB, dsub)).astype(np.float32))


class TestEncodeDecode:
    def setup_method(self):
        self.rng = np.random.default_rng(100)

    def test_encode_picks_nearest_subcentroid(self):
        cb = random_codebook(self.rng, 4, 3)
        x = self.rng.normal(size=(30, 12)).astype(np.float32)
        codes = pq_encode(cb, x)
        subs = split_subspaces(x, 4)
        for j in range(4):
            d = np.linalg.norm(
                subs[:, j, None, :].astype(np.float64)
                - cb.centroids[j][None].astype(np.float64),
                axis=2,
            )
            np.testing.assert_array_equal(codes[:, j], np.argmin(d, axis=1))

    def test_codes_in_nibble_range(self):
        cb = random_codebook(self.rng, 8, 2)
        x = self.rng.normal(size=(100, 16)).astype(np.float32)
        codes = pq_encode(cb, x)
        assert codes.dtype == np.uint8
        assert codes.min() >= 0 and codes.max() < 16

    def test_decode_then_encode_is_stable(self):
        """Encoding a reconstruction returns the original codes."""
        cb = random_codebook(self.rng, 4, 4)
        x = self.rng.normal(size=(50, 16)).astype(np.float32)
        codes = pq_encode(cb, x)
        again = pq_encode(cb, pq_decode(cb, codes))
        np.testing.assert_array_equal(codes, again)

    def test_trained_codebook_reduces_error(self):
        x = self.rng.normal(size=(2000, 16)).astype(np.float32)
        cb = pq_train(x, 4, seed=0)
        err_trained = np.mean((x - pq_decode(cb, pq_encode(cb, x))) ** 2)
        cb_rand = random_codebook(self.rng, 4, 4)
        err_rand = np.mean((x - pq_decode(cb_rand, pq_encode(cb_rand, x))) ** 2)
        assert err_trained < err_rand

    def test_train_deterministic(self):
        x = self.rng.normal(size=(500, 8)).astype(np.float32)
        a = pq_train(x, 4, seed=3)
        b = pq_train(x, 4, seed=3)
        assert a.centroids.tobytes() == b.centroids.tobytes()


class TestADCDecomposition:
    """Table lookups must reproduce the score of the reconstruction.

    For a query x and stored code c, summing per-subspace table entries
    equals scoring x against the decoded vector, because both metrics
    decompose over orthogonal coordinate groups.
    """

    def setup_method(self):
        self.rng = np.random.default_rng(200)

    def _check(self, metric, m, dsub, n=400, tol=1e-4):
        cb = random_codebook(self.rng, m, dsub)
        d = m * dsub
        x = self.rng.normal(size=d).astype(np.float32)
        vecs = self.rng.normal(size=(n, d)).astype(np.float32)
        codes = pq_encode(cb, vecs)
        lut = compute_lut(cb, x, metric)
        got = adc_score(lut, codes)
        recon = pq_decode(cb, codes)
        expect = similarity(recon, x, metric, np.float64)
        np.testing.assert_allclose(got, expect, atol=tol)

    def test_ip(self):
        self._check(Metric.IP, m=8, dsub=2)

    def test_l2(self):
        self._check(Metric.L2, m=8, dsub=2)

    def test_larger_subspaces(self):
        self._check(Metric.IP, m=4, dsub=8)
        self._check(Metric.L2, m=4, dsub=8)

    def test_lut_shape(self):
        cb = random_codebook(self.rng, 6, 3)
        x = self.rng.normal(size=18).astype(np.float32)
        assert compute_lut(cb, x, Metric.IP).shape == (6, 16)


class TestQuantizedLUT:
    def setup_method(self):
        self.rng = np.random.default_rng(300)

    def test_dequantized_entries_close(self):
        lut = self.rng.normal(size=(8, 16)).astype(np.float32)
        q = quantize_lut(lut)
        assert q.q.dtype == np.uint8
        # one table entry dequantizes to within one step
        step = q.scale
        row_min = lut.min(axis=1, keepdims=True)
        approx = q.q.astype(np.float64) * step + row_min
        assert np.max(np.abs(approx - lut)) <= step + 1e-6

    def test_scores_close_to_float_path(self):
        m = 16
        lut = self.rng.normal(size=(m, 16)).astype(np.float32)
        q = quantize_lut(lut)
        codes = self.rng.integers(0, 16, size=(300, m), dtype=np.uint8)
        exact = adc_score(lut, codes)
        approx = adc_score_q8(q, codes)
        # worst case error is one quantization step per subspace
        assert np.max(np.abs(exact - approx)) <= m * q.scale + 1e-5

    def test_constant_table(self):
        lut = np.full((4, 16), 2.5, dtype=np.float32)
        q = quantize_lut(lut)
        codes = np.zeros((5, 4), dtype=np.uint8)
        np.testing.assert_allclose(adc_score_q8(q, codes), 10.0, atol=1e-5)


class TestCodeBlockArray:
    """Blocked storage must agree with plain row storage at every size."""

    def setup_method(self):
        self.rng = np.random.default_rng(400)

    def test_roundtrip_one_shot(self):
        codes = self.rng.integers(0, 16, size=(100, 8), dtype=np.uint8)
        arr = CodeBlockArray(8)
        arr.append(codes)
        np.testing.assert_array_equal(arr.get_codes(0, 100), codes)

    def test_incremental_equals_bulk(self):
        """Appending in odd-sized pieces gives the same stored bytes."""
        codes = self.rng.integers(0, 16, size=(173, 4), dtype=np.uint8)
        bulk = CodeBlockArray(4)
        bulk.append(codes)
        inc = CodeBlockArray(4)
        sizes = [1, 2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 12]
        at = 0
        for s in sizes:
            inc.append(codes[at : at + s])
            at += s
        assert at == 173
        np.testing.assert_array_equal(inc.get_codes(0, 173), codes)
        n_blocks = (173 + 31) // 32
        assert (
            inc.blocks[:n_blocks].tobytes() == bulk.blocks[:n_blocks].tobytes()
        )

    def test_single_appends_cross_byte_boundaries(self):
        """One code at a time exercises both nibbles of every byte."""
        codes = self.rng.integers(0, 16, size=(67, 2), dtype=np.uint8)
        arr = CodeBlockArray(2)
        for i in range(67):
            arr.append(codes[i : i + 1])
            np.testing.assert_array_equal(arr.get_codes(0, i + 1), codes[: i + 1])

    def test_scan_equals_scalar_after_incremental_fill(self):
        codes = self.rng.integers(0, 16, size=(90, 8), dtype=np.uint8)
        lut = self.rng.normal(size=(8, 16)).astype(np.float32)
        arr = CodeBlockArray(8)
        for i in range(0, 90, 7):
            arr.append(codes[i : i + 7])
        out = np.zeros(90, dtype=np.float32)
        arr.scan_f32(lut, 90, out)
        assert np.array_equal(out, adc_score(lut, codes))

    def test_empty_scan(self):
        arr = CodeBlockArray(4)
        out = np.zeros(0, dtype=np.float32)
        arr.scan_f32(np.zeros((4, 16), dtype=np.float32), 0, out)


class TestPackUnpack:
    def setup_method(self):
        self.rng = np.random.default_rng(500)

    def test_roundtrip_even(self):
        codes = self.rng.integers(0, 16, size=(10, 8), dtype=np.uint8)
        buf = pack_codes(codes)
        assert len(buf) == 10 * 8 // 2
        np.testing.assert_array_equal(unpack_codes(buf, 10, 8), codes)

    def test_roundtrip_odd_total(self):
        """An odd nibble count pads the stream to a whole byte at the end."""
        codes = self.rng.integers(0, 16, size=(7, 5), dtype=np.uint8)
        buf = pack_codes(codes)
        assert len(buf) == (7 * 5 + 1) // 2
        np.testing.assert_array_equal(unpack_codes(buf, 7, 5), codes)

    def test_known_bytes(self):
        codes = np.array([[1, 2], [15, 0]], dtype=np.uint8)
        buf = pack_codes(codes)
        # low nibble first: 0x21, 0x0f
        assert buf == bytes([0x21, 0x0F])


class TestCodebookFile:
    def setup_method(self):
        self.rng = np.random.default_rng(600)

    def test_bytes_roundtrip(self):
        cb = random_codebook(self.rng, 8, 3)
        blob = codebook_to_bytes(cb)
        assert blob[:5] == b"HKPQ1"
        back = codebook_from_bytes(blob)
        assert back.centroids.tobytes() == cb.centroids.tobytes()

    def test_file_roundtrip(self, tmp_path):
        cb = random_codebook(self.rng, 4, 6)
        p = os.path.join(tmp_path, "cb.bin")
        save_codebook(cb, p)
        back = load_codebook(p)
        assert back.centroids.tobytes() == cb.centroids.tobytes()

    def test_bad_magic_rejected(self):
        cb = random_codebook(self.rng, 4, 2)
        blob = b"XXXXX" + codebook_to_bytes(cb)[5:]
        with pytest.raises(ValueError):
            codebook_from_bytes(blob)

    def test_truncated_rejected(self):
        cb = random_codebook(self.rng, 4, 2)
        blob = codebook_to_bytes(cb)
        with pytest.raises(ValueError):
            codebook_from_bytes(blob[:-3])


class TestOPQInit:
    def setup_method(self):
        self.rng = np.random.default_rng(700)

    def _correlated(self, n=1500, d=16):
        """Anisotropic data exercises the projection choice."""
        basis = self.rng.normal(size=(d, d))
        scale = np.linspace(3.0, 0.1, d)
        z = self.rng.normal(size=(n, d)) * scale
        return (z @ basis).astype(np.float32)

    def test_history_monotone_nonincreasing(self):
        x = self._correlated()
        _, _, hist = opq_init(x, d_out=8, m=4, seed=0, iters=6)
        h = np.asarray(hist)
        assert len(h) == 6
        assert np.all(np.diff(h) <= 1e-9 * np.abs(h[:-1]) + 1e-12)

    def test_shapes(self):
        x = self._correlated()
        t, cb, _ = opq_init(x, d_out=8, m=4, seed=0, iters=3)
        assert t.A.shape == (16, 8)
        assert t.b.shape == (8,)
        assert np.all(t.b == 0)
        assert cb.centroids.shape == (4, 16, 2)

    def test_refit_beats_frozen_projection(self):
        """Alternating refits must beat quantizing the initial projection."""
        x = self._correlated()
        t0, cb0, hist0 = opq_init(x, d_out=8, m=4, seed=1, iters=1)
        _, _, hist = opq_init(x, d_out=8, m=4, seed=1, iters=8)
        assert hist[-1] <= hist0[-1] + 1e-9

    def test_deterministic(self):
        x = self._correlated(n=400)
        t1, cb1, h1 = opq_init(x, d_out=8, m=4, seed=5, iters=3)
        t2, cb2, h2 = opq_init(x, d_out=8, m=4, seed=5, iters=3)
        assert t1.A.tobytes() == t2.A.tobytes()
        assert cb1.centroids.tobytes() == cb2.centroids.tobytes()
        assert h1 == h2


class TestEncodeForInsert:
    def test_matches_manual_pipeline(self):
        rng = np.random.default_rng(800)
        x = rng.normal(size=(1000, 12)).astype(np.float32)
        t, cb, _ = opq_init(x, d_out=8, m=4, seed=0, iters=2)
        v = rng.normal(size=(20, 12)).astype(np.float32)
        codes = encode_for_insert(t, cb, v)
        manual = pq_encode(cb, t.apply(v))
        np.testing.assert_array_equal(codes, manual)
