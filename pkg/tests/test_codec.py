import itertools

import numpy as np
import pytest

from semgest import codec as C
from semgest.codec import (
    Codebook,
    LatentSeq,
    RvqCodec,
    TokenSeq,
    build_codec,
    decode,
    encode,
    encode_latents,
    fit_linear_codec,
    quantize,
    quantize_batch,
    rvq_loss,
    tokens_to_latents,
    train_codebooks,
)
from semgest.errors import (
    ConfigError,
    FingerprintMismatchError,
    RankDeficiencyError,
    TooShortError,
)


def make_codec(layer1, layer2=None, d=2, part="body", mean=None):
    """Hand-built codec with orthonormal identity encoder (C = d*D)."""
    layer1 = np.asarray(layer1, dtype=np.float64)
    dd = layer1.shape[1]
    books = [Codebook(entries=layer1, layer=1)]
    if layer2 is not None:
        books.append(Codebook(entries=np.asarray(layer2, dtype=np.float64), layer=2))
    return RvqCodec(
        part=part,
        d=d,
        latent_dim=dd,
        mean=np.zeros(dd) if mean is None else np.asarray(mean, dtype=np.float64),
        encoder=np.eye(dd),
        decoder=np.eye(dd),
        codebooks=tuple(books),
    )


class TestLinearCodec:
    def test_exact_subspace_zero_error(self):
        rng = np.random.default_rng(0)
        basis = rng.normal(size=(3, 8))
        coords = rng.normal(size=(100, 3))
        data = coords @ basis + rng.normal(size=8)  # rows in an affine 3-dim subspace
        # d=2 windows concatenate two rows, so they span a 6-dim subspace
        mean, enc, dec, err = fit_linear_codec(data, d=2, latent_dim=6)
        assert err <= 1e-9
        windows, _ = C.window_frames(data, 2)
        recon = (windows - mean) @ enc.T @ dec.T + mean
        assert np.abs(recon - windows).max() <= 1e-9

    def test_full_dim_is_lossless(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(64, 4))
        d = 2
        mean, enc, dec, err = fit_linear_codec(data, d=d, latent_dim=d * 4)
        assert err <= 1e-9

    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(2)
        d, dim, c = 4, 5, 7
        data = rng.normal(size=(1000 * d, dim))
        _, _, _, err = fit_linear_codec(data, d=d, latent_dim=c)
        # independent oracle: full SVD tail energy of the centered windows
        windows = data.reshape(1000, d * dim)
        centered = windows - windows.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        want = np.sum(s[c:] ** 2)
        assert abs(err - want) <= 1e-6 * max(want, 1.0)

    def test_rank_deficiency_reports_rank(self):
        rng = np.random.default_rng(3)
        basis = rng.normal(size=(2, 6))
        data = rng.normal(size=(50, 2)) @ basis
        with pytest.raises(RankDeficiencyError) as err:
            fit_linear_codec(data, d=1, latent_dim=4)
        assert err.value.rank == 2

    def test_too_few_windows(self):
        with pytest.raises(ConfigError):
            fit_linear_codec(np.zeros((4, 3)), d=2, latent_dim=5)


class TestTrainCodebooks:
    def test_exact_values_recovered(self):
        vals = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0], [1.0, -5.0]])
        latents = np.repeat(vals, 6, axis=0)
        books, energies = train_codebooks(latents, layers=1, codebook_size=4, seed=0)
        got = sorted(map(tuple, np.round(books[0].entries, 9)))
        assert got == sorted(map(tuple, vals))
        assert energies[-1] <= 1e-12

    def test_layer_objectives_match_brute_force(self):
        rng = np.random.default_rng(4)
        latents = np.vstack(
            [rng.normal(scale=0.2, size=(5, 2)), rng.normal(scale=0.2, size=(5, 2)) + 6.0]
        )

        def brute_force(points, k=2):
            best, best_labels = np.inf, None
            for labels in itertools.product(range(k), repeat=len(points)):
                labels = np.array(labels)
                obj = 0.0
                for j in range(k):
                    members = points[labels == j]
                    if len(members):
                        obj += ((members - members.mean(axis=0)) ** 2).sum()
                if obj < best:
                    best, best_labels = obj, labels
            return best, best_labels

        books, energies = train_codebooks(latents, layers=2, codebook_size=2, seed=1)
        want1, labels1 = brute_force(latents)
        got1 = energies[1] * len(latents)
        assert abs(got1 - want1) <= 1e-9
        # layer 2 clusters the residues left by layer 1
        means = np.array([latents[labels1 == j].mean(axis=0) for j in range(2)])
        from semgest.cluster import assign_nearest

        lab, _ = assign_nearest(latents, means)
        residues = latents - means[lab]
        want2, _ = brute_force(residues)
        got2 = energies[2] * len(latents)
        assert abs(got2 - want2) <= 1e-9

    def test_residual_energy_monotone_over_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            latents = rng.normal(size=(300, 4))
            _, energies = train_codebooks(latents, layers=4, codebook_size=8, seed=seed)
            diffs = np.diff(energies)
            assert (diffs <= 1e-9).all()

    def test_codebook_size_exceeds_samples(self):
        with pytest.raises(ConfigError):
            train_codebooks(np.zeros((3, 2)), layers=1, codebook_size=4)


class TestQuantize:
    def test_hand_checked_example(self):
        books = [np.array([[0.0, 0.0], [1.0, 1.0]])]
        idx, q, r = quantize(np.array([0.9, 0.8]), books)
        # 0.9^2 + 0.8^2 = 1.45 > 0.1^2 + 0.2^2 = 0.05
        assert idx[0] == 1
        assert np.allclose(q, [1.0, 1.0])
        assert np.allclose(r, [-0.1, -0.2])

    def test_exact_entry_zero_residue(self):
        books = [np.array([[2.0, -1.0], [0.5, 0.5]])]
        idx, q, r = quantize(np.array([0.5, 0.5]), books)
        assert idx[0] == 1
        assert np.abs(r).max() == 0.0

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(5)
        entries = rng.normal(size=(32, 8))
        z = rng.normal(size=(1000, 8))
        idx, _, _ = quantize_batch(z, [entries])
        want = np.array(
            [np.argmin([np.sum((v - e) ** 2) for e in entries]) for v in z]
        )
        assert np.array_equal(idx[:, 0], want)

    def test_tie_breaks_low_index(self):
        books = [np.array([[1.0, 0.0], [-1.0, 0.0]])]
        idx, _, _ = quantize(np.array([0.0, 0.0]), books)
        assert idx[0] == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(3), [np.zeros((2, 2)) + np.array([[0.0], [1.0]])])

    def test_nearest_entry_property_exhaustive(self):
        rng = np.random.default_rng(6)
        books = [rng.normal(size=(16, 4)) for _ in range(3)]
        z = rng.normal(size=(50, 4))
        idx, q, r = quantize_batch(z, books)
        residues = z.copy()
        for layer, entries in enumerate(books):
            d2 = ((residues[:, None, :] - entries[None]) ** 2).sum(axis=2)
            chosen = d2[np.arange(len(z)), idx[:, layer]]
            assert (chosen <= d2.min(axis=1) + 1e-12).all()
            residues = residues - entries[idx[:, layer]]
        assert np.allclose(residues, r)


class TestEncodeDecode:
    def test_token_count(self):
        rng = np.random.default_rng(7)
        cdc, _ = build_codec(rng.normal(size=(64, 3)), d=8, latent_dim=4,
                             layers=2, codebook_size=4)
        tokens = encode(rng.normal(size=(16, 3)), cdc)
        assert tokens.length == 2
        assert tokens.padded_frames == 0

    def test_ragged_clip_padded(self):
        rng = np.random.default_rng(8)
        cdc, _ = build_codec(rng.normal(size=(64, 3)), d=8, latent_dim=4,
                             layers=1, codebook_size=4)
        tokens = encode(rng.normal(size=(13, 3)), cdc)
        assert tokens.length == 2
        assert tokens.padded_frames == 3
        assert decode(tokens, cdc).frame_count == 13
        assert decode(tokens, cdc, trim=False).frame_count == 16

    def test_empty_clip_errors(self):
        rng = np.random.default_rng(9)
        cdc, _ = build_codec(rng.normal(size=(64, 3)), d=8, latent_dim=4,
                             layers=1, codebook_size=4)
        with pytest.raises(TooShortError):
            encode(np.zeros((0, 3)), cdc)

    def test_idempotent_on_separated_codebooks(self):
        # coarse layer-1 grid, tiny layer-2 refinements: greedy requantization
        # of any codebook sum recovers the same tokens
        grid = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
        fine = np.array([[0.05, 0.0], [0.0, -0.05], [-0.05, 0.05]])
        cdc = make_codec(grid, fine, d=1)
        rng = np.random.default_rng(10)
        idx = np.stack(
            [rng.integers(0, 4, size=20), rng.integers(0, 3, size=20)], axis=1
        )
        tokens = TokenSeq(idx, part="body", fingerprint=cdc.fingerprint)
        again = encode(decode(tokens, cdc), cdc)
        assert np.array_equal(again.indices, tokens.indices)

    def test_lossless_roundtrip_of_training_window(self):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(80, 3))
        d = 4
        cdc, _ = build_codec(data, d=d, latent_dim=d * 3, layers=2,
                             codebook_size=10, seed=0)
        window = data[:d]
        z = encode_latents(window, cdc)
        # quantization error remains, so compare through the exact latents
        recon = decode(z, cdc)
        assert np.abs(recon.data - window).max() <= 1e-5

    def test_zero_latent_decodes_to_mean(self):
        rng = np.random.default_rng(12)
        cdc, _ = build_codec(rng.normal(size=(32, 3)), d=4, latent_dim=4,
                             layers=1, codebook_size=4)
        out = decode(LatentSeq(np.zeros((2, 4)), part="body"), cdc)
        want = cdc.mean.reshape(cdc.d, cdc.frame_dim)
        assert np.abs(out.data - np.vstack([want, want])).max() <= 1e-12

    def test_fingerprint_mismatch(self):
        rng = np.random.default_rng(13)
        a, _ = build_codec(rng.normal(size=(32, 3)), d=4, latent_dim=4,
                           layers=1, codebook_size=4, seed=0)
        b, _ = build_codec(rng.normal(size=(32, 3)), d=4, latent_dim=4,
                           layers=1, codebook_size=4, seed=99)
        tokens = encode(rng.normal(size=(8, 3)), a)
        with pytest.raises(FingerprintMismatchError):
            decode(tokens, b)

    def test_body_hand_fingerprints_distinct(self):
        rng = np.random.default_rng(14)
        data = rng.normal(size=(32, 3))
        body, _ = build_codec(data, d=4, latent_dim=4, layers=1,
                              codebook_size=4, part="body")
        hand, _ = build_codec(data, d=4, latent_dim=4, layers=1,
                              codebook_size=4, part="hand", has_root=False)
        assert body.fingerprint != hand.fingerprint

    def test_error_decomposition(self):
        rng = np.random.default_rng(15)
        train = rng.normal(size=(400, 3))
        d, c = 4, 6
        cdc, _ = build_codec(train, d=d, latent_dim=c, layers=2,
                             codebook_size=8, seed=0)
        clip = rng.normal(size=(5 * d, 3))
        windows, _ = C.window_frames(clip, d)
        z = encode_latents(clip, cdc).values
        tokens = encode(clip, cdc)
        q = tokens_to_latents(tokens, cdc).values
        recon = decode(tokens, cdc)
        total = np.sum((recon.data - clip) ** 2)
        centered = windows - cdc.mean
        trunc = np.sum((centered - z @ cdc.encoder) ** 2)
        quant = np.sum((z - q) ** 2)
        assert abs(total - (trunc + quant)) <= 1e-6 * max(total, 1.0)

    def test_lossless_decomposition(self):
        rng = np.random.default_rng(16)
        train = rng.normal(size=(400, 2))
        d = 2
        cdc, _ = build_codec(train, d=d, latent_dim=d * 2, layers=1,
                             codebook_size=16, seed=0)
        clip = rng.normal(size=(10 * d, 2))
        tokens = encode(clip, cdc)
        q = tokens_to_latents(tokens, cdc).values
        z = encode_latents(clip, cdc).values
        total = np.sum((decode(tokens, cdc).data - clip) ** 2)
        quant = np.sum((z - q) ** 2)
        assert abs(total - quant) <= 1e-6 * max(total, 1.0)


class TestRvqLoss:
    def test_perfect_reconstruction_zero(self):
        rng = np.random.default_rng(17)
        m = rng.normal(size=(10, 4))
        z = rng.normal(size=(5, 3))
        out = rvq_loss(m, m, z, z)
        assert all(v == 0.0 for v in out.values())

    def test_constant_shift(self):
        rng = np.random.default_rng(18)
        m = rng.normal(size=(10, 4))
        shift = 0.37
        out = rvq_loss(m, m + shift, np.zeros((5, 3)), np.zeros((5, 3)))
        assert abs(out["position"] - shift) <= 1e-12
        assert out["velocity"] <= 1e-12  # float cancellation, not exact zero
        assert out["acceleration"] <= 1e-12

    def test_velocity_weight_linearity(self):
        rng = np.random.default_rng(19)
        m = rng.normal(size=(12, 4))
        m2 = m + rng.normal(size=(12, 4)) * 0.1
        z, q = np.zeros((3, 2)), np.zeros((3, 2))
        base = rvq_loss(m, m2, z, q, weights=(0.0, 1.0, 0.0, 0.0))
        double = rvq_loss(m, m2, z, q, weights=(0.0, 2.0, 0.0, 0.0))
        assert abs(double["total"] - 2.0 * base["total"]) <= 1e-12


class TestCodebookInvariants:
    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError):
            Codebook(entries=np.array([[1.0, 2.0], [1.0, 2.0]]), layer=1)

    def test_monotone_capacity_on_training_set(self):
        rng = np.random.default_rng(20)
        data = rng.normal(size=(200, 3))
        d, c = 2, 4
        errors = []
        for layers in range(1, 5):
            cdc, energies = build_codec(data, d=d, latent_dim=c, layers=layers,
                                        codebook_size=8, seed=0)
            errors.append(energies[-1])
        assert (np.diff(errors) <= 1e-9).all()


class TestArchive:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        body, _ = build_codec(rng.normal(size=(64, 3)), d=4, latent_dim=4,
                              layers=2, codebook_size=4, part="body")
        hand, _ = build_codec(rng.normal(size=(64, 2)), d=4, latent_dim=3,
                              layers=2, codebook_size=4, part="hand", has_root=False)
        path = tmp_path / "codec.bin"
        C.save_codecs(path, body, hand)
        loaded = C.load_codecs(path)
        assert [c.part for c in loaded] == ["body", "hand"]
        assert loaded[0].fingerprint == body.fingerprint
        assert loaded[1].fingerprint == hand.fingerprint
        clip = rng.normal(size=(8, 3))
        assert np.array_equal(encode(clip, loaded[0]).indices, encode(clip, body).indices)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE1234")
        with pytest.raises(ValueError):
            C.load_codecs(path)


class TestTokenText:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(22)
        body = TokenSeq(rng.integers(0, 9, size=(6, 4)), part="body",
                        fingerprint="aa", padded_frames=2)
        hand = TokenSeq(rng.integers(0, 9, size=(6, 2)), part="hand",
                        fingerprint="bb")
        path = tmp_path / "tokens.txt"
        C.save_token_text(path, body, hand)
        b2, h2 = C.load_token_text(path)
        assert np.array_equal(b2.indices, body.indices)
        assert np.array_equal(h2.indices, hand.indices)
        assert b2.fingerprint == "aa" and h2.fingerprint == "bb"
        assert b2.padded_frames == 2 and h2.padded_frames == 0
