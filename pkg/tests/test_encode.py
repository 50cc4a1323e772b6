import numpy as np
import pytest

from memecap.encode import (
    ChainOfHumor,
    HashEmbeddingTextEncoder,
    PatchMeanImageEncoder,
    assemble_chain_of_humor,
    combine_variant_features,
    encode_caption,
    encode_image_areas,
)
from memecap.errors import ValidationError


def test_solid_image_identical_rows(rng):
    enc = PatchMeanImageEncoder(d=8, patch_grid=4, seed=0)
    img = np.full((20, 20, 3), 137, dtype=np.uint8)
    feats = encode_image_areas(img, enc)
    assert np.allclose(feats.matrix, feats.matrix[0])


def test_patch_count_contract(rng):
    enc = PatchMeanImageEncoder(d=6, patch_grid=4, seed=0)
    for size in ((16, 16), (33, 57), (101, 40)):
        img = rng.integers(0, 256, size=(*size, 3)).astype(np.uint8)
        assert encode_image_areas(img, enc).matrix.shape == (16, 6)


def test_patch_means_hand_computed():
    enc = PatchMeanImageEncoder(d=3, patch_grid=2, channels=3, value_range=1.0)
    enc.weight = np.eye(3)
    enc.bias = np.zeros(3)
    img = np.zeros((8, 8, 3))
    img[:4] = 1.0
    img[4:] = 0.25
    feats = enc.encode(img)
    expected = np.array([[1, 1, 1], [1, 1, 1], [0.25, 0.25, 0.25], [0.25, 0.25, 0.25]])
    assert np.allclose(feats.matrix, expected)


def test_image_smaller_than_grid_errors(rng):
    enc = PatchMeanImageEncoder(d=4, patch_grid=4)
    with pytest.raises(ValidationError, match="smaller"):
        enc.encode(np.zeros((3, 10, 3)))


def test_caption_single_token_shape():
    enc = HashEmbeddingTextEncoder(d=16, seed=0)
    assert encode_caption(["hello"], enc).matrix.shape == (1, 16)


def test_caption_determinism():
    enc = HashEmbeddingTextEncoder(d=16, seed=3)
    a = enc.encode(["a", "b", "c"]).matrix
    b = enc.encode(["a", "b", "c"]).matrix
    assert np.array_equal(a, b)


def test_shared_token_same_position_same_row():
    enc = HashEmbeddingTextEncoder(d=12, seed=1)
    a = enc.encode(["the", "cat", "sat"]).matrix
    b = enc.encode(["the", "dog", "ran"]).matrix
    assert np.array_equal(a[0], b[0])


def test_closed_vocab_names_token():
    enc = HashEmbeddingTextEncoder(d=8, closed_vocab={"a", "b"})
    with pytest.raises(ValidationError, match="zorp"):
        enc.encode(["a", "zorp"])


def test_sequence_length_cap():
    enc = HashEmbeddingTextEncoder(d=8)
    with pytest.raises(ValidationError, match="1024"):
        enc.encode(["x"] * 1025)


def test_features_finite_random_inputs(rng):
    img_enc = PatchMeanImageEncoder(d=32, patch_grid=4, seed=5)
    txt_enc = HashEmbeddingTextEncoder(d=32, seed=6)
    for _ in range(25):
        img = rng.integers(0, 256, size=(rng.integers(8, 40), rng.integers(8, 40), 3)).astype(np.uint8)
        assert np.isfinite(img_enc.encode(img).matrix).all()
        toks = [f"t{rng.integers(100)}" for _ in range(rng.integers(1, 20))]
        assert np.isfinite(txt_enc.encode(toks).matrix).all()


def test_encoding_ignores_outside_pixels(rng):
    enc = PatchMeanImageEncoder(d=8, patch_grid=2, seed=2)
    img = rng.integers(0, 256, size=(30, 30, 3)).astype(np.uint8)
    sub = img[5:25, 5:25]
    direct = enc.encode(sub.copy()).matrix
    img[0:5, :] = 0  # mutate pixels outside the crop
    assert np.array_equal(enc.encode(img[5:25, 5:25]).matrix, direct)


def test_shared_feature_width():
    img_enc = PatchMeanImageEncoder(d=24, seed=0)
    txt_enc = HashEmbeddingTextEncoder(d=24, seed=0)
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    assert img_enc.encode(img).matrix.shape[1] == txt_enc.encode(["x"]).matrix.shape[1]


def test_encoder_serialization_round_trip(tmp_path, rng):
    enc = PatchMeanImageEncoder(d=8, patch_grid=3, seed=4)
    enc.save(tmp_path / "img.bin")
    again = PatchMeanImageEncoder.load(tmp_path / "img.bin")
    img = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
    assert np.array_equal(enc.encode(img).matrix, again.encode(img).matrix)

    txt = HashEmbeddingTextEncoder(d=8, seed=5)
    txt.save(tmp_path / "txt.bin")
    tagain = HashEmbeddingTextEncoder.load(tmp_path / "txt.bin")
    assert np.array_equal(txt.encode(["a", "b"]).matrix, tagain.encode(["a", "b"]).matrix)


def test_variant_combination_modes(rng):
    base = encode_image_areas(rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8), PatchMeanImageEncoder(d=4, seed=1))
    variants = [base, base]
    avg = combine_variant_features(base, variants, "average")
    assert np.allclose(avg.matrix, base.matrix)
    cat = combine_variant_features(base, variants, "concat")
    assert cat.matrix.shape[0] == 3 * base.matrix.shape[0]


def test_chain_of_humor_template():
    coh = ChainOfHumor(
        concept="a dog",
        emotion="surprise",
        event="sharing a photo",
        consequence="discussing the photo",
        humor_device="anthropomorphism",
    )
    text = assemble_chain_of_humor(coh)
    values = ["a dog", "surprise", "sharing a photo", "discussing the photo", "anthropomorphism"]
    positions = [text.index(v) for v in values]
    assert positions == sorted(positions)
    assert assemble_chain_of_humor(coh) == text


def test_chain_of_humor_field_swap_changes_output():
    a = ChainOfHumor("a", "b", "c", "d", "e")
    b = ChainOfHumor("b", "a", "c", "d", "e")
    assert assemble_chain_of_humor(a) != assemble_chain_of_humor(b)


def test_chain_of_humor_empty_field_errors():
    with pytest.raises(ValidationError, match="emotion"):
        ChainOfHumor("a", "", "c", "d", "e")
