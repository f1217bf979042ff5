from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hvlm.synthcohort import SequenceVolume
from hvlm.voltok import (Codebook, PatchSpec, TokenizerDiverged, TokenizerHParams, VQVAE, background_flags,
                         cache_path, inverse_permutation, load_tokenizer, patch_volume, permute_patches,
                         quantize, quantize_batch, random_axis_permutation, read_token_grid, save_tokenizer,
                         tokenize_and_cache, tokenize_sequence, train_tokenizer, write_token_grid)


def brute_force_nearest(z, entries):
    best, best_d = 0, None
    for j, e in enumerate(entries):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(z, e))
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


# ------------------------------------------------------------------ PatchSpec


def test_desk_spec_dimensions():
    spec = PatchSpec()
    assert spec.latent_grid == (2, 2, 1)
    assert spec.latent_dim == 8
    assert spec.compression == 16


def test_paper_scale_latent_is_256():
    spec = PatchSpec.paper_scale()
    assert spec.patch_dims == (32, 32, 4)
    assert spec.latent_grid == (8, 8, 2)
    assert spec.latent_dim == 256
    assert spec.compression == 16


@pytest.mark.parametrize("dims", [(0, 8, 2), (8, -8, 2)])
def test_spec_rejects_nonpositive(dims):
    with pytest.raises(ValueError):
        PatchSpec(dims)


# ------------------------------------------------------------------ patching


def test_patch_count_exact_multiple():
    coords, patches = patch_volume(np.ones((64, 64, 8)), PatchSpec((32, 32, 4), (4, 4, 2)))
    assert len(patches) == 8
    assert patches.shape[1:] == (32, 32, 4)


def test_patch_count_with_padding():
    vol = np.ones((33, 32, 4))
    coords, patches = patch_volume(vol, PatchSpec((32, 32, 4), (4, 4, 2)))
    assert len(patches) == 2
    second = patches[[i for i, c in enumerate(coords) if c[0] == 1][0]]
    assert second[0].sum() == 32 * 4 and second[1:].sum() == 0


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(1, 7)))
def test_patches_cover_padded_grid_once(shape):
    spec = PatchSpec()
    vol = np.random.default_rng(0).random(shape).astype(np.float32)
    coords, patches = patch_volume(vol, spec)
    n = [-(-s // p) for s, p in zip(shape, spec.patch_dims)]
    assert len(patches) == int(np.prod(n))
    assert len({tuple(c) for c in coords}) == len(coords)
    padded = np.zeros([a * p for a, p in zip(n, spec.patch_dims)], np.float32)
    for c, p in zip(coords, patches):
        sl = tuple(slice(int(i) * d, (int(i) + 1) * d) for i, d in zip(c, spec.patch_dims))
        padded[sl] += p
    np.testing.assert_array_equal(padded[: shape[0], : shape[1], : shape[2]], vol)
    assert padded.sum() == pytest.approx(float(vol.sum()), rel=1e-5)


def test_oriented_patches_follow_sequence_axes():
    vox = np.zeros((32, 8, 32), np.float32)          # coronal: canonical (x, z, y)
    seq = SequenceVolume("COR_T2", "T2", "coronal", vox)
    _, patches = patch_volume(seq, PatchSpec())
    assert patches.shape[1:] == (8, 2, 8)


def test_empty_volume_rejected():
    with pytest.raises(ValueError):
        patch_volume(np.zeros((0, 4, 4)), PatchSpec())


def test_nonfinite_volume_rejected():
    vol = np.zeros((8, 8, 2))
    vol[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        patch_volume(vol, PatchSpec())


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_background_filter_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    p = np.random.default_rng(1).random((50, 8, 8, 2)) ** 3
    assert background_flags(p, hi).sum() <= background_flags(p, lo).sum()


# ------------------------------------------------------------------ quantize


def test_quantize_nearest():
    k, zq = quantize(np.array([0.9, 0.8]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert k == 1
    np.testing.assert_array_equal(zq, [1.0, 1.0])


def test_quantize_exact_match():
    k, zq = quantize(np.array([0.0, 0.0]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert k == 0
    np.testing.assert_array_equal(zq, [0.0, 0.0])


def test_quantize_tie_goes_to_lowest_index():
    k, _ = quantize(np.array([0.5, 0.0]), np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert k == 0


def test_quantize_rejects_nonfinite_and_bad_shape():
    cb = np.zeros((2, 2))
    with pytest.raises(ValueError):
        quantize(np.array([np.inf, 0.0]), cb)
    with pytest.raises(ValueError):
        quantize(np.zeros(3), cb)


def test_codebook_invariants():
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 4)), np.zeros(1))
    with pytest.raises(ValueError):
        Codebook(np.array([[0.0], [np.nan]]), np.zeros(2))


def test_quantize_batch_matches_single():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(32, 8))
    z = rng.normal(size=(300, 8))
    np.testing.assert_array_equal(quantize_batch(z, e), [quantize(v, e)[0] for v in z])


def test_quantize_batch_ties_lowest():
    e = np.array([[0.0], [1.0], [1.0]])
    np.testing.assert_array_equal(quantize_batch(np.array([[0.5], [1.0]]), e), [0, 1])


# ------------------------------------------------------------------ permutation


def test_identity_permutation_unchanged():
    x = np.random.default_rng(0).random((3, 8, 8, 2))
    np.testing.assert_array_equal(permute_patches(x, (0, 1, 2)), x)


def test_permuted_shape_bookkeeping():
    x = np.zeros((1, 32, 32, 4))
    # one-based (3,1,2) is zero-based (2,0,1)
    assert permute_patches(x, (2, 0, 1)).shape[1:] == (4, 32, 32)


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
def test_permutation_then_inverse_is_identity(perm):
    x = np.random.default_rng(1).random((4, 8, 8, 2)).astype(np.float32)
    back = permute_patches(permute_patches(x, perm), inverse_permutation(perm))
    assert back.tobytes() == x.tobytes()


def test_random_permutation_picks_one_bucket():
    rng = np.random.default_rng(0)
    batch = [np.zeros((8, 8, 2))] * 3 + [np.ones((8, 2, 8))] * 2
    seen = set()
    for _ in range(20):
        out, perm = random_axis_permutation(batch, rng)
        assert len(out) in (2, 3)
        src_shape = (8, 8, 2) if len(out) == 3 else (8, 2, 8)
        assert out.shape[1:] == tuple(src_shape[p] for p in perm)
        seen.add(len(out))
    assert seen == {2, 3}


def test_random_permutation_empty_batch():
    with pytest.raises(ValueError):
        random_axis_permutation([], np.random.default_rng(0))


# ------------------------------------------------------------------ model


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
def test_decode_encode_preserves_shape(perm):
    spec = PatchSpec()
    model = VQVAE(spec, 16, 8)
    shape = spec.oriented(perm)
    x = torch.rand(5, *shape)
    z = model.encode(x, perm)
    assert z.shape == (5, spec.latent_dim)
    assert model.decode(z, perm).shape == x.shape


def test_latent_is_canonical_under_permutation():
    """A permuted patch encodes to the same canonical latent when the conv stack is symmetric."""
    spec = PatchSpec((4, 4, 4), (2, 2, 2), 1)
    torch.manual_seed(0)
    model = VQVAE(spec, 4, 2)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.Conv3d) and m.kernel_size == (3, 3, 3):
                w = m.weight
                sym = sum(w.permute(0, 1, *(2 + i for i in p)) for p in itertools.permutations(range(3))) / 6
                m.weight.copy_(sym)
    x = torch.rand(2, 4, 4, 4)
    perm = (2, 0, 1)
    z0 = model.encode(x, (0, 1, 2))
    z1 = model.encode(x.permute(0, *(1 + p for p in perm)), perm)
    torch.testing.assert_close(z0, z1, atol=1e-5, rtol=1e-5)


def test_constant_zero_patches_reconstruct_to_zero():
    x = np.zeros((256, 8, 8, 2), np.float32)
    tok = train_tokenizer(x, PatchSpec(), TokenizerHParams(steps=150, batch_size=32, seed=0, eval_every=50))
    assert tok.history[-1]["val_l1"] < 0.02
    assert tok.history[-1]["val_l1"] <= tok.history[0]["val_l1"]


def test_divergence_reports_step():
    x = np.full((64, 8, 8, 2), np.nan, np.float32)
    with pytest.raises(TokenizerDiverged) as info:
        train_tokenizer(x, PatchSpec(), TokenizerHParams(steps=5, batch_size=8))
    assert info.value.step == 1


def test_toy_cohort_halves_val_l1(toy_tokenizer):
    h = toy_tokenizer.history
    assert h[-1]["val_l1"] <= 0.5 * h[0]["val_l1"]
    assert toy_tokenizer.codebook.usage_counts.sum() > 0


@pytest.mark.slow
def test_larger_codebook_not_worse(toy_patches):
    # single seeds disagree (seed 0 favours K=8), so compare the mean over three
    def final(k, seed):
        return train_tokenizer(toy_patches, PatchSpec(),
                               TokenizerHParams(steps=400, codebook_size=k, seed=seed)).history[-1]["val_l1"]
    big = np.mean([final(64, s) for s in range(3)])
    small = np.mean([final(8, s) for s in range(3)])
    assert big <= small


def _perm_ratio(tok):
    rng = np.random.default_rng(5)
    ratios = []
    for shape, v in tok.val_patches.items():
        if len(v) == 0:
            continue
        base = tok.l1(v)
        permuted = []
        for perm in itertools.permutations(range(3)):
            if perm != (0, 1, 2):
                permuted.append(tok.l1(np.ascontiguousarray(permute_patches(v, perm))))
        ratios.append(np.mean(permuted) / base)
    del rng
    return float(np.mean(ratios))


def test_permutation_augmentation_regularizes(toy_patches, toy_tokenizer):
    plain = train_tokenizer(toy_patches, PatchSpec(), TokenizerHParams(steps=400, permute=False, seed=0))
    with_aug, without = _perm_ratio(toy_tokenizer), _perm_ratio(plain)
    assert with_aug <= 1.5
    assert without > with_aug


# ------------------------------------------------------------------ cache


def test_cache_round_trip(tmp_path, small_cohort, toy_tokenizer):
    study = small_cohort[0]
    seq = study.sequences[1]
    grid = tokenize_sequence(seq, toy_tokenizer, 0.02)
    path = tmp_path / "g.tok"
    write_token_grid(path, grid, toy_tokenizer.spec, "abc")
    header, back = read_token_grid(path)
    assert header["checksum"] == "abc"
    for f in ("coords", "latents", "codes", "intensity", "kept"):
        np.testing.assert_array_equal(getattr(back, f), getattr(grid, f))
    assert back.source_orientation == grid.source_orientation
    assert back.seq_name == grid.seq_name


def test_codes_are_nearest_entries(small_cohort, toy_tokenizer):
    grid = tokenize_sequence(small_cohort[1].sequences[0], toy_tokenizer, 0.02)
    entries = toy_tokenizer.codebook.entries
    for z, c in zip(grid.latents[:20], grid.codes[:20]):
        assert c == brute_force_nearest(z.astype(np.float64), entries.astype(np.float64))


def test_kept_flags_honor_threshold(small_cohort, toy_tokenizer):
    grid = tokenize_sequence(small_cohort[2].sequences[0], toy_tokenizer, 0.3)
    np.testing.assert_array_equal(grid.kept, grid.intensity >= 0.3)
    assert grid.refilter(0.5).kept.sum() <= grid.kept.sum()


def test_stale_checksum_regenerates(tmp_path, small_cohort, toy_tokenizer):
    study = small_cohort[4]
    good = toy_tokenizer.checksum()
    first = tokenize_and_cache(study, toy_tokenizer, 0.02, tmp_path, good)
    name = study.sequences[0].seq_name
    path = cache_path(tmp_path, good, study.study_id, name)
    # corrupt the stored checksum: the next read must treat it as a miss and rewrite
    header, grid = read_token_grid(path)
    write_token_grid(path, grid, toy_tokenizer.spec, "0" * 64)
    again = tokenize_and_cache(study, toy_tokenizer, 0.02, tmp_path, good)
    assert read_token_grid(path)[0]["checksum"] == good
    np.testing.assert_array_equal(again[name].latents, first[name].latents)


def test_tokenizer_save_load(tmp_path, toy_tokenizer):
    save_tokenizer(toy_tokenizer, tmp_path / "t.pt")
    back = load_tokenizer(tmp_path / "t.pt")
    assert back.checksum() == toy_tokenizer.checksum()
