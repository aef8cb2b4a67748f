import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import gazevla.tokenizers as tk
from gazevla.simworld import ContinuousAction


@pytest.fixture(scope="module")
def vocab():
    return tk.TextVocab()


@pytest.fixture(scope="module")
def codec():
    return tk.ActionCodec()


def test_layout_disjoint_contiguous():
    layout = tk.VocabLayout()
    specials = set(range(tk.N_SPECIALS))
    words = set(range(layout.text_offset, layout.action_offset))
    actions = set(range(layout.action_offset, layout.vocab_size))
    assert len(words) == layout.n_words
    assert len(actions) == 256
    assert not (specials & words) and not (words & actions) and not (specials & actions)
    assert layout.vocab_size == tk.N_SPECIALS + layout.n_words + 256


def test_empty_text(vocab):
    assert vocab.encode("") == [tk.BOS_ID, tk.EOS_ID]


def test_text_roundtrip(vocab):
    s = "put the red block into the blue bowl then flip the pink cup"
    assert vocab.decode(vocab.encode(s)) == s


def test_text_injective(vocab):
    a = vocab.encode("flip the red cup")
    b = vocab.encode("flip the blue cup")
    assert a != b


def test_unknown_word(vocab):
    with pytest.raises(tk.UnknownWord):
        vocab.encode("launch the red rocket")


def test_text_padding(vocab):
    ids = vocab.encode("flip the red cup", pad_to=12)
    assert len(ids) == 12 and ids[-1] == tk.PAD_ID
    with pytest.raises(tk.ShapeMismatch):
        vocab.encode("put the red block into the blue bowl", pad_to=4)


@pytest.mark.parametrize("value,expected_bin", [(-1.0, 0), (1.0, 255), (0.37, 175), (0.0, 128)])
def test_action_bins(codec, value, expected_bin):
    assert codec.bin_of(value) == expected_bin


def test_action_out_of_range(codec):
    with pytest.raises(tk.OutOfRange):
        codec.bin_of(1.01)


def test_action_roundtrip_bound(codec):
    rng = np.random.default_rng(0)
    acts = rng.uniform(-1, 1, size=(10_000, 4))
    for a in acts:
        back = codec.detokenize(codec.tokenize(a)).as_vector()
        assert np.max(np.abs(back - a)) <= 1.0 / 256 + 1e-12


def test_action_tokenize_idempotent(codec):
    rng = np.random.default_rng(1)
    for a in rng.uniform(-1, 1, size=(10_000, 4)):
        ids = codec.tokenize(a)
        again = codec.tokenize(codec.detokenize(ids).as_vector())
        assert again == ids


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=4, max_size=4))
def test_action_roundtrip_property(vals):
    codec = tk.ActionCodec()
    a = ContinuousAction(*vals)
    back = codec.detokenize(codec.tokenize(a))
    assert np.max(np.abs(back.as_vector() - a.as_vector())) <= 1.0 / 256 + 1e-12


def test_unit_bins(codec):
    assert codec.unit_bin(0.0) == 0
    assert codec.unit_bin(1.0) == 255
    assert codec.unit_bin(0.5) == 128


# ---------------------------------------------------------------------------
# patch embedder


def test_patchify_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    assert np.array_equal(tk.unpatchify(tk.patchify(img), 64), img)


def test_patchify_row_major():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    img[0:8, 8:16] = 7  # patch row 0, col 1 -> index 1
    patches = tk.patchify(img, 8)
    assert patches[1].max() == 7 and patches[0].max() == 0


def test_embedder_token_count():
    emb = tk.PatchEmbedder(d_model=32)
    img = torch.zeros(2, 64, 64, 3, dtype=torch.uint8)
    out = emb(img, "base")
    assert out.shape == (2, 64, 32)


def test_embedder_zero_projection_gives_pos_plus_tag():
    emb = tk.PatchEmbedder(d_model=16)
    with torch.no_grad():
        emb.proj.weight.zero_()
        emb.proj.bias.zero_()
    img = torch.zeros(1, 64, 64, 3, dtype=torch.uint8)
    out = emb(img, "wrist").squeeze(0)
    expect = emb.pos["wrist"] + emb.view_tag["wrist"]
    assert torch.equal(out, expect)


def test_embedder_patch_permutation_equivariance():
    emb = tk.PatchEmbedder(d_model=16)
    with torch.no_grad():
        emb.pos["base"].zero_()
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    swapped = img.copy()
    swapped[0:8, 0:8], swapped[0:8, 8:16] = img[0:8, 8:16].copy(), img[0:8, 0:8].copy()
    a = tk.encode_image(emb, img, "base")
    b = tk.encode_image(emb, swapped, "base")
    assert torch.allclose(a[0], b[1]) and torch.allclose(a[1], b[0])
    assert torch.allclose(a[2:], b[2:])


def test_embedder_shape_mismatch():
    emb = tk.PatchEmbedder(d_model=8)
    with pytest.raises(tk.ShapeMismatch):
        emb(torch.zeros(1, 32, 32, 3), "base")


# ---------------------------------------------------------------------------
# scene tokenizer


def _toy_patches(n=100, d=192, rank=12, seed=0):
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(d, rank)))[0]
    coef = rng.normal(size=(n, rank)) * np.linspace(3.0, 0.5, rank)
    return coef @ basis.T + rng.normal(size=(n, d)) * 0.01 + 0.3


def test_fit_pca_orthonormal():
    mean, comps = tk.fit_pca(_toy_patches(), k=8)
    eye = comps.T @ comps
    assert np.allclose(eye, np.eye(8), atol=1e-6)


def test_degenerate_covariance():
    flat = np.full((200, 192), 0.5)
    with pytest.raises(tk.DegenerateCovariance):
        tk.fit_pca(flat, 4)


def test_full_rank_lossless():
    x = _toy_patches(n=300)
    mean, comps = tk.fit_pca(x, k=192)
    tok = tk.SceneTokenizer(mean, comps)
    z = (x.astype(np.float32) - tok.mean) @ tok.components
    back = z @ tok.components.T + tok.mean
    assert np.max(np.abs(back - x)) < 1e-3  # float32 rounding on 192-dim sums


def test_pca_matches_independent_eigendecomposition_oracle():
    # oracle: SVD route, entirely independent of fit_pca's covariance+eigh route
    x = _toy_patches(n=100)
    k = 6
    mean, comps = tk.fit_pca(x, k)
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    oracle_basis = vt[:k].T
    proj = centered @ comps @ comps.T
    proj_oracle = centered @ oracle_basis @ oracle_basis.T
    err = np.mean((centered - proj) ** 2)
    err_oracle = np.mean((centered - proj_oracle) ** 2)
    assert abs(err - err_oracle) < 1e-8


def test_pca_beats_random_orthonormal_basis():
    x = _toy_patches(n=400, seed=3)
    k = 6
    mean, comps = tk.fit_pca(x, k)
    centered = x - x.mean(axis=0)
    err_pca = np.mean((centered - centered @ comps @ comps.T) ** 2)
    rng = np.random.default_rng(9)
    for _ in range(5):
        q = np.linalg.qr(rng.normal(size=(192, k)))[0]
        err_rand = np.mean((centered - centered @ q @ q.T) ** 2)
        assert err_pca <= err_rand + 1e-12


def test_scene_encode_decode_contracts():
    rng = np.random.default_rng(2)
    crops = rng.integers(0, 256, size=(80, 32, 32, 3), dtype=np.uint8)
    tok = tk.fit_scene_tokenizer(crops, k=16, min_patches=1)
    z = tok.encode(crops[0])
    assert z.shape == (16, 16)
    # projection contracts norm per token
    patches = tk.patchify(crops[0].astype(np.float32) / 255.0)
    centered = patches - tok.mean
    assert np.all(np.linalg.norm(z, axis=1) <= np.linalg.norm(centered, axis=1) + 1e-5)
    # mean patch encodes to ~zero
    mean_img = np.tile(tok.mean.reshape(8, 8, 3), (4, 4, 1))
    assert np.max(np.abs(tok.encode(mean_img)[0])) < 1e-4
    # decode(encode(x)) == x for x in the component span
    span_patch = (tok.mean + tok.components[:, 0] * 0.1).reshape(8, 8, 3)
    img = np.clip(np.tile(span_patch, (4, 4, 1)), 0, 1)
    back = tok.decode(tok.encode(img))
    assert np.max(np.abs(back - img)) < 1e-5


def test_scene_tokenizer_save_load_digest(tmp_path):
    rng = np.random.default_rng(4)
    crops = rng.integers(0, 256, size=(50, 32, 32, 3), dtype=np.uint8)
    tok = tk.fit_scene_tokenizer(crops, k=8, min_patches=1)
    p = tmp_path / "scene.bin"
    tok.save(p)
    back = tk.SceneTokenizer.load(p)
    assert back.digest() == tok.digest()
    assert np.array_equal(back.mean, tok.mean)
    assert np.array_equal(back.components, tok.components)
    z = tok.encode(crops[0])
    assert np.array_equal(back.encode(crops[0]), z)


def test_unfitted_raises():
    tok = tk.SceneTokenizer.unfitted()
    with pytest.raises(tk.NotFitted):
        tok.encode(np.zeros((32, 32, 3), dtype=np.uint8))


def test_min_patches_guard():
    rng = np.random.default_rng(5)
    crops = rng.integers(0, 256, size=(4, 32, 32, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        tk.fit_scene_tokenizer(crops, k=4)
