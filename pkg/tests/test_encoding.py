import numpy as np
import pytest

from xfusion.encoding import (
    ModalityConfig,
    assemble_multimodal_embedding,
    encode_modality,
    init_modality_encoder,
    init_positional_encoder,
    make_stub,
    positional_encoding,
    validate_modalities,
)
from xfusion.tensor import ParameterStore, ShapeError, Tensor


def mask(latent_dim, dims):
    m = [False] * latent_dim
    for d in dims:
        m[d] = True
    return tuple(m)


class TestModalityConfig:
    def test_mask_coverage_enforced(self):
        mods = [
            ModalityConfig("a", 4, mask(4, [0, 1])),
            ModalityConfig("b", 4, mask(4, [2])),
        ]
        with pytest.raises(ValueError) as err:
            validate_modalities(mods, 4)
        assert "3" in str(err.value)

    def test_single_spatial_enforced(self):
        mods = [
            ModalityConfig("a", 4, mask(2, [0]), is_spatial=True),
            ModalityConfig("b", 4, mask(2, [1]), is_spatial=True),
        ]
        with pytest.raises(ValueError):
            validate_modalities(mods, 2)

    def test_valid_config_passes(self):
        mods = [
            ModalityConfig("a", 4, mask(3, [0, 1]), is_spatial=True),
            ModalityConfig("b", 4, mask(3, [2])),
        ]
        validate_modalities(mods, 3)


class TestEncodeModality:
    def _encoder(self, raw_dim, n_tokens, stub_dim, dim, seed=0):
        rng = np.random.default_rng(seed)
        stub = make_stub(raw_dim, n_tokens, stub_dim, rng)
        store = ParameterStore()
        init_modality_encoder(store, "enc.m", stub_dim, dim, rng)
        return stub, store

    def test_zero_input_gives_zero_block(self):
        stub, store = self._encoder(6, 2, 3, 4)
        out = encode_modality(np.zeros(6), stub, store, "enc.m", 2)
        np.testing.assert_array_equal(out.values, np.zeros((2, 4)))

    def test_identity_composition_is_reshape(self):
        # identity stub (raw_dim == n_tokens*stub_dim) and identity projection
        stub, store = self._encoder(6, 2, 3, 3)
        stub.matrix = np.eye(6)
        store["enc.m.proj.w"].values = np.eye(3)
        raw = np.arange(6.0)
        out = encode_modality(raw, stub, store, "enc.m", 2)
        np.testing.assert_allclose(out.values, raw.reshape(2, 3))

    def test_desk_scale_shapes(self):
        stub, store = self._encoder(24, 8, 16, 64)
        out = encode_modality(np.random.default_rng(1).normal(size=24), stub, store, "enc.m", 8)
        assert out.shape == (8, 64)

    def test_batch_matches_per_sample(self):
        stub, store = self._encoder(5, 3, 2, 4)
        raws = np.random.default_rng(2).normal(size=(4, 5))
        batched = encode_modality(raws, stub, store, "enc.m", 3)
        assert batched.shape == (4, 3, 4)
        for i in range(4):
            single = encode_modality(raws[i], stub, store, "enc.m", 3)
            np.testing.assert_allclose(batched.values[i], single.values)

    def test_wrong_raw_length(self):
        stub, store = self._encoder(5, 3, 2, 4)
        with pytest.raises(ShapeError):
            encode_modality(np.zeros(6), stub, store, "enc.m", 3)

    def test_stub_matrix_is_frozen(self):
        stub, _ = self._encoder(5, 3, 2, 4)
        with pytest.raises(ValueError):
            stub.matrix[0, 0] = 1.0


class TestPositionalEncoding:
    def _pos(self, raw_dim=4, n_tokens=2, dim=3):
        store = ParameterStore()
        init_positional_encoder(store, "pos", raw_dim, n_tokens, dim, np.random.default_rng(0))
        return store

    def test_disabled_gate_returns_none(self):
        store = self._pos()
        assert positional_encoding(np.zeros(4), store, "pos", 2, 3, enabled=False) is None

    def test_enabled_without_spatial_raw_raises(self):
        store = self._pos()
        with pytest.raises(ValueError):
            positional_encoding(None, store, "pos", 2, 3, enabled=True)

    def test_zero_raw_zero_bias_gives_zeros(self):
        store = self._pos()
        out = positional_encoding(np.zeros(4), store, "pos", 2, 3, enabled=True)
        np.testing.assert_array_equal(out.values, np.zeros((2, 3)))


class TestAssemble:
    def _blocks(self, n=2, n_tokens=8, dim=64, seed=0):
        rng = np.random.default_rng(seed)
        return {f"m{i}": Tensor(rng.normal(size=(n_tokens, dim))) for i in range(n)}

    def test_concat_shape_two_modalities(self):
        feats = self._blocks(2)
        out = assemble_multimodal_embedding(feats, ["m0", "m1"], None, "concat")
        assert out.shape == (16, 64)

    def test_single_modality_concat_is_block(self):
        feats = self._blocks(1)
        out = assemble_multimodal_embedding(feats, ["m0"], None, "concat")
        np.testing.assert_array_equal(out.values, feats["m0"].values)

    def test_add_mode_of_identical_blocks_is_block(self):
        block = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        out = assemble_multimodal_embedding({"a": block, "b": block}, ["a", "b"], None, "add")
        np.testing.assert_allclose(out.values, block.values)

    def test_canonical_order_ignores_insertion_order(self):
        feats = self._blocks(2)
        a = assemble_multimodal_embedding({"m0": feats["m0"], "m1": feats["m1"]}, ["m0", "m1"], None, "concat")
        b = assemble_multimodal_embedding({"m1": feats["m1"], "m0": feats["m0"]}, ["m0", "m1"], None, "concat")
        np.testing.assert_array_equal(a.values, b.values)

    def test_positional_term_added_to_every_block(self):
        feats = self._blocks(2, n_tokens=4, dim=3)
        pos = Tensor(np.ones((4, 3)))
        out = assemble_multimodal_embedding(feats, ["m0", "m1"], pos, "concat")
        expected = np.concatenate([feats["m0"].values + 1.0, feats["m1"].values + 1.0], axis=0)
        np.testing.assert_array_equal(out.values, expected)

    def test_empty_feature_map_rejected(self):
        with pytest.raises(ValueError):
            assemble_multimodal_embedding({}, ["m0"], None, "concat")

    def test_token_counts_for_all_subset_sizes(self):
        feats = self._blocks(4, n_tokens=8, dim=16)
        order = sorted(feats)
        for size in range(1, 5):
            subset = {k: feats[k] for k in order[:size]}
            cat = assemble_multimodal_embedding(subset, order, None, "concat")
            assert cat.shape == (8 * size, 16)
            avg = assemble_multimodal_embedding(subset, order, None, "add")
            assert avg.shape == (8, 16)
