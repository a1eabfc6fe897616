import hashlib
import struct

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from idgan.data import (
    DatasetHandle,
    FactorSpace,
    VariantConfig,
    apply_variant,
    dataset_to_bytes,
    fixed_factor_indices,
    generate_dsprites,
    ingest_image_folder,
    load_dataset,
    render_sprites,
    sample_fixed_factor_batch,
    save_dataset,
)
from idgan.errors import (
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    UnsupportedMetricError,
)

SMALL = (3, 2, 4, 4, 4)


def digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@pytest.fixture(scope="module")
def small_space():
    return FactorSpace.dsprites(SMALL)


@pytest.fixture(scope="module")
def plain(small_space):
    return generate_dsprites(small_space, resolution=32)


class TestFactorSpace:
    def test_canonical_size(self):
        assert FactorSpace.dsprites().size == 737_280

    def test_reduced_size(self):
        assert FactorSpace.dsprites((3, 6, 10, 16, 16)).size == 46_080

    def test_grids_must_increase(self):
        with pytest.raises(InvalidConfigError):
            FactorSpace(("a",), (2,), ([1.0, 1.0],))

    def test_index_endpoints(self, small_space):
        assert (small_space.index_to_factors(0) == 0).all()
        last = small_space.index_to_factors(small_space.size - 1)
        assert (last == np.asarray(SMALL) - 1).all()

    def test_round_trip(self):
        space = FactorSpace.dsprites()
        rng = np.random.default_rng(0)
        idx = rng.integers(space.size, size=10_000)
        assert (space.factors_to_index(space.index_to_factors(idx)) == idx).all()

    def test_row_major(self, small_space):
        # the last factor varies fastest
        assert (small_space.index_to_factors(1) == [0, 0, 0, 0, 1]).all()

    @pytest.mark.parametrize("bad", [-1, 384])
    def test_out_of_range(self, small_space, bad):
        with pytest.raises(InvalidInputError):
            small_space.index_to_factors(bad)

    def test_factor_out_of_range(self, small_space):
        with pytest.raises(InvalidInputError):
            small_space.factors_to_index([3, 0, 0, 0, 0])


class TestGenerate:
    def test_size_and_binary(self, plain, small_space):
        assert len(plain) == small_space.size
        assert plain.images.shape == (384, 32, 32, 1)
        assert np.isin(plain.images, (0, 255)).all()

    def test_every_image_has_a_sprite(self, plain):
        assert (plain.images.reshape(len(plain), -1).max(1) == 255).all()

    def test_deterministic(self, small_space, plain):
        again = generate_dsprites(small_space, resolution=32)
        assert digest(again.images) == digest(plain.images)

    def test_canonical_slice_renders(self):
        space = FactorSpace.dsprites()
        masks = render_sprites(space, [0, space.size - 1], 64)
        assert masks.shape == (2, 64, 64) and masks.any(axis=(1, 2)).all()

    def test_scale_grows_area(self, small_space):
        small = small_space.factors_to_index([0, 0, 0, 1, 1])
        large = small_space.factors_to_index([0, 1, 0, 1, 1])
        masks = render_sprites(small_space, [small, large], 64)
        assert masks[1].sum() > masks[0].sum()

    def test_position_moves_sprite(self, small_space):
        left = small_space.factors_to_index([1, 1, 0, 0, 1])
        right = small_space.factors_to_index([1, 1, 0, 3, 1])
        masks = render_sprites(small_space, [left, right], 64)
        cols = [np.nonzero(m.any(0))[0].mean() for m in masks]
        assert cols[1] > cols[0] + 10

    def test_resolution_too_small(self, small_space):
        with pytest.raises(InvalidConfigError):
            generate_dsprites(small_space, resolution=8)
        tiny_scale = FactorSpace(small_space.names, (1, 1, 1, 1, 1),
                                 ([1.0], [0.1], [0.0], [0.5], [0.5]))
        with pytest.raises(InvalidConfigError):
            generate_dsprites(tiny_scale, resolution=16)

    def test_parallel_matches_serial(self, small_space, plain):
        par = generate_dsprites(small_space, resolution=32, workers=2)
        assert digest(par.images) == digest(plain.images)


class TestVariants:
    def test_color_levels(self, plain):
        colored = apply_variant(plain, VariantConfig("color", seed=3))
        allowed = np.rint(np.arange(8) / 7 * 255).astype(np.uint8)
        assert np.isin(colored.images, allowed).all()
        mask = plain.images[..., 0] > 0
        assert ((colored.images.max(-1) > 0) == mask).all()

    def test_color_never_black(self, plain):
        colored = apply_variant(plain, VariantConfig("color", seed=11, color_levels=2))
        mask = plain.images[..., 0] > 0
        assert (colored.images[mask].max(-1) > 0).all()

    def test_noisy_background_uniform(self):
        space = FactorSpace.dsprites((3, 6, 10, 4, 4))
        d = generate_dsprites(space, resolution=32)
        noisy = apply_variant(d, VariantConfig("noisy", seed=5))
        mask = d.images[..., 0] > 0
        background = noisy.images[~mask].reshape(-1)[:1_000_000] / 255.0
        assert background.size == 1_000_000
        assert stats.kstest(background, "uniform").statistic < 0.01
        assert (noisy.images[mask] == 255).all()

    def test_scream_preserves_mask_support(self, plain):
        scream = apply_variant(plain, VariantConfig("scream", seed=2))
        assert scream.images.shape == plain.images.shape[:3] + (3,)
        # backgrounds differ between samples (random crops)
        assert not np.array_equal(scream.images[0], scream.images[1])
        mask = plain.images[..., 0] > 0
        # sprite pixels are the inverted crop; re-inverting gives a smooth patch
        img = scream.images[5].astype(int)
        recovered = np.where(mask[5][..., None], 255 - img, img)
        assert np.abs(np.diff(recovered, axis=0)).max() < 40

    @pytest.mark.parametrize("kind", ["color", "noisy", "scream"])
    def test_same_seed_bit_identical(self, plain, kind):
        a = apply_variant(plain, VariantConfig(kind, seed=9))
        b = apply_variant(plain, VariantConfig(kind, seed=9))
        c = apply_variant(plain, VariantConfig(kind, seed=10))
        assert digest(a.images) == digest(b.images) != digest(c.images)

    def test_twice_is_invalid(self, plain):
        colored = apply_variant(plain, VariantConfig("color", seed=1))
        with pytest.raises(InvalidStateError):
            apply_variant(colored, VariantConfig("noisy", seed=1))

    def test_color_levels_validated(self):
        with pytest.raises(InvalidConfigError):
            VariantConfig("color", color_levels=1)


class TestFixedFactor:
    def test_shares_factor(self, plain, small_space):
        idx = fixed_factor_indices(small_space, "scale", 1, 100, 0)
        assert len(idx) == 100
        assert (small_space.index_to_factors(idx)[:, 1] == 1).all()
        batch = sample_fixed_factor_batch(plain, "scale", 1, 100, 0)
        assert np.array_equal(batch, plain.images[idx])

    def test_deterministic(self, plain):
        a = sample_fixed_factor_batch(plain, 2, 3, 10, 7)
        b = sample_fixed_factor_batch(plain, 2, 3, 10, 7)
        assert np.array_equal(a, b)

    def test_other_factors_uniform(self, small_space):
        idx = fixed_factor_indices(small_space, 0, 2, 10_000, 1)
        orient = small_space.index_to_factors(idx)[:, 2]
        counts = np.bincount(orient, minlength=4)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_invalid(self, small_space, plain):
        with pytest.raises(InvalidInputError):
            fixed_factor_indices(small_space, 0, 3, 10, 0)
        with pytest.raises(InvalidInputError):
            fixed_factor_indices(small_space, "colour", 0, 10, 0)


class TestPersistence:
    def test_round_trip(self, plain, tmp_path):
        path = save_dataset(plain, tmp_path / "d.idgn")
        back = load_dataset(path)
        assert np.array_equal(back.images, plain.images)
        assert np.array_equal(back.factors, plain.factors)
        assert back.space == plain.space
        assert back.variant.kind == "plain"
        assert path.read_bytes() == dataset_to_bytes(back)

    def test_header_layout(self, plain):
        raw = dataset_to_bytes(plain)
        assert raw[:5] == b"IDGN\x01"
        assert struct.unpack("<I", raw[5:9])[0] == 5
        (name_len,) = struct.unpack("<I", raw[9:13])
        assert raw[13:13 + name_len] == b"shape"

    def test_colored_round_trip(self, plain, tmp_path):
        colored = apply_variant(plain, VariantConfig("color", seed=1))
        back = load_dataset(save_dataset(colored, tmp_path / "c.idgn"))
        assert np.array_equal(back.images, colored.images)
        with pytest.raises(InvalidStateError):
            apply_variant(back, VariantConfig("noisy"))

    def test_single_byte_corruption(self, plain, tmp_path):
        raw = bytearray(dataset_to_bytes(plain))
        rng = np.random.default_rng(0)
        for pos in rng.integers(len(raw), size=100):
            bad = bytearray(raw)
            bad[pos] ^= 1 << int(rng.integers(8))
            (tmp_path / "bad.idgn").write_bytes(bytes(bad))
            with pytest.raises(FormatError):
                load_dataset(tmp_path / "bad.idgn")

    def test_payload_flip_names_checksum(self, plain, tmp_path):
        raw = bytearray(dataset_to_bytes(plain))
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "bad.idgn").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_dataset(tmp_path / "bad.idgn")
        assert err.value.section == "checksum"

    def test_truncated(self, plain, tmp_path):
        raw = dataset_to_bytes(plain)
        (tmp_path / "t.idgn").write_bytes(raw[:len(raw) // 3])
        with pytest.raises(FormatError) as err:
            load_dataset(tmp_path / "t.idgn")
        assert err.value.section == "images"

    def test_empty(self, tmp_path):
        (tmp_path / "e.idgn").write_bytes(b"")
        with pytest.raises(FormatError) as err:
            load_dataset(tmp_path / "e.idgn")
        assert err.value.section == "header"


class TestIngest:
    @pytest.fixture
    def folder(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(10):
            arr = rng.integers(0, 256, size=(40 + i, 50, 3), dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / f"img_{i:02d}.png")
        (tmp_path / "broken.png").write_bytes(b"not an image")
        return tmp_path

    def test_ingest(self, folder):
        with pytest.warns(UserWarning):
            d = ingest_image_folder(folder, resolution=32)
        assert len(d) == 10 and d.images.shape == (10, 32, 32, 3)
        assert d.meta["skipped"] == 1
        assert not d.has_factors
        with pytest.raises(UnsupportedMetricError):
            d.require_factors()

    def test_deterministic(self, folder):
        with pytest.warns(UserWarning):
            a = ingest_image_folder(folder, resolution=32)
        with pytest.warns(UserWarning):
            b = ingest_image_folder(folder, resolution=32)
        assert digest(a.images) == digest(b.images)

    def test_handle_validation(self):
        with pytest.raises(InvalidInputError):
            DatasetHandle(np.zeros((2, 4, 4, 2), np.uint8), None, None)
