import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridbench.errors import ManifestError, ResourceBudgetError
from gridbench.prng import Stream, derive
from gridbench.synthgrid import (
    GridConfig, PreprocessSpec, Sample, bilinear_resize, build_grid,
    glyph_mask, load_manifest, preprocess, render_sample, sample_key,
    save_manifest, template_mask, translation_offset,
)


def _stream(tag=0):
    return Stream(derive(911, "test", tag))


class TestRenderSample:
    def test_identical_streams_identical_pixels(self):
        a = render_sample(0, 0, _stream(), uid=1)
        b = render_sample(0, 0, _stream(), uid=1)
        assert np.array_equal(a.pixels, b.pixels)

    def test_same_jitter_different_domain_same_mask(self):
        mask0 = glyph_mask(0, _stream(), 16)
        mask1 = glyph_mask(0, _stream(), 16)
        assert np.array_equal(mask0, mask1)
        s0 = render_sample(0, 0, _stream(), uid=1)
        s1 = render_sample(0, 1, _stream(), uid=1)
        assert not np.array_equal(s0.pixels, s1.pixels)

    def test_template_contrast_class0_vs_class1(self):
        # mean absolute difference of the embedded templates, computed directly
        t0 = template_mask(0, 16).astype(float)
        t1 = template_mask(1, 16).astype(float)
        diff = np.abs(t0 - t1).sum()
        assert diff >= 0.25 * max(t0.sum(), t1.sum())

    def test_all_template_pairs_distinct(self):
        masks = [template_mask(k, 16) for k in range(10)]
        for a in range(10):
            for b in range(a + 1, 10):
                xor = np.logical_xor(masks[a], masks[b]).sum()
                assert xor >= 0.25 * max(masks[a].sum(), masks[b].sum()), (a, b)

    def test_out_of_range_ids(self):
        with pytest.raises(ValueError):
            render_sample(10, 0, _stream())
        with pytest.raises(ValueError):
            render_sample(0, 5, _stream())

    @given(class_id=st.integers(0, 9), domain_id=st.integers(0, 4),
           tag=st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_pixels_always_in_unit_range(self, class_id, domain_id, tag):
        s = render_sample(class_id, domain_id, _stream(tag), uid=tag)
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        assert s.pixels.dtype == np.float32
        assert s.pixels.shape == (3, 16, 16)

    def test_glyph_contrast_on_mask(self):
        for domain in range(5):
            key = derive(5, "contrast", domain)
            mask = glyph_mask(2, Stream(key), 16)
            sample = render_sample(2, domain, Stream(key), uid=key)
            img = sample.pixels[0]
            # glyph offset is +-0.35 before quantization
            assert abs(img[mask].mean() - img[~mask].mean()) > 0.2


class TestBuildGrid:
    def test_pool_sizes_exact(self, tiny_grid):
        cfg = tiny_grid.config
        for c, d in tiny_grid.cells():
            for pool, size in cfg.pool_sizes.items():
                assert tiny_grid.pool_size(c, d, pool) == size

    def test_bit_identical_rebuild(self):
        cfg = GridConfig(n_classes=2, n_domains=2, image_size=10,
                         samples_per_cell=(4, 2, 2, 3), seed=3)
        g1 = build_grid(cfg)
        g2 = build_grid(cfg)
        for pool in ("train", "val", "test", "reserve"):
            assert g1.pool_digest(pool) == g2.pool_digest(pool)

    def test_uid_is_pure_function_of_coordinates(self, tiny_grid):
        uid = sample_key(42, 1, 2, "train", 5)
        c, d, pool, row = tiny_grid.locate(uid)
        assert (c, d, pool, row) == (1, 2, "train", 5)
        s = tiny_grid.sample(uid)
        fresh = render_sample(1, 2, Stream(uid), image_size=12, uid=uid)
        assert np.array_equal(s.pixels, fresh.pixels)

    def test_memory_budget_error_names_cell(self):
        cfg = GridConfig(n_classes=2, n_domains=2, image_size=16,
                         samples_per_cell=(100, 10, 10, 10), seed=0)
        with pytest.raises(ResourceBudgetError, match=r"\(0,0\)"):
            build_grid(cfg, memory_budget_bytes=1000)

    def test_pools_are_read_only(self, tiny_grid):
        cell = tiny_grid.pool(0, 0, "test")
        with pytest.raises(ValueError):
            cell.pixels[0, 0, 0, 0] = 0.5

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GridConfig(n_classes=1)
        with pytest.raises(ValueError):
            GridConfig(n_domains=9)
        with pytest.raises(ValueError):
            GridConfig(samples_per_cell=(1, 2, 3))


class TestManifest:
    def test_roundtrip_membership(self, tmp_path):
        cfg = GridConfig(n_classes=2, n_domains=2, image_size=8,
                         samples_per_cell=(3, 2, 2, 1), seed=9)
        grid = build_grid(cfg)
        manifest = save_manifest(grid, str(tmp_path))
        loaded = load_manifest(manifest)
        assert (loaded.n_classes, loaded.n_domains) == (2, 2)
        for c, d in grid.cells():
            for pool in ("train", "val", "test", "reserve"):
                src = grid.pool(c, d, pool)
                dst = loaded.pool(c, d, pool)
                assert len(src) == len(dst)
                src_bytes = sorted(src.pixels[i].tobytes() for i in range(len(src)))
                dst_bytes = sorted(dst.pixels[i].tobytes() for i in range(len(dst)))
                assert src_bytes == dst_bytes

    def test_header_only_manifest(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("path,class_id,domain_id,pool\n")
        with pytest.raises(ManifestError, match="no samples"):
            load_manifest(str(path))

    def test_single_sample_cells(self, tmp_path):
        cfg = GridConfig(n_classes=2, n_domains=2, image_size=8,
                         samples_per_cell=(1, 0, 1, 0), seed=1)
        grid = build_grid(cfg)
        manifest = save_manifest(grid, str(tmp_path))
        loaded = load_manifest(manifest)
        for c, d in loaded.cells():
            for pool in ("train", "val", "test", "reserve"):
                assert loaded.pool_size(c, d, pool) <= 1

    def test_missing_file_names_path(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("path,class_id,domain_id,pool\nghost.png,0,0,train\n"
                        "other.png,1,1,train\n")
        with pytest.raises(ManifestError, match="ghost.png"):
            load_manifest(str(path))

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("path,class_id,domain_id,pool\na.png,xx,0,train\n")
        with pytest.raises(ManifestError, match="row 2"):
            load_manifest(str(path))

    def test_class_gap_detected(self, tmp_path):
        cfg = GridConfig(n_classes=2, n_domains=2, image_size=8,
                         samples_per_cell=(1, 0, 0, 0), seed=1)
        grid = build_grid(cfg)
        manifest = save_manifest(grid, str(tmp_path))
        rows = open(manifest).read().splitlines()
        # relabel class 1 as class 3, leaving ids 1 and 2 unused
        doctored = [rows[0]] + [r.replace(",1,0,", ",3,0,").replace(",1,1,", ",3,1,")
                                for r in rows[1:]]
        path = tmp_path / "gap.csv"
        path.write_text("\n".join(doctored) + "\n")
        with pytest.raises(ManifestError, match="class id gap"):
            load_manifest(str(path))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("file,cls,dom,pool\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(str(path))


class TestPreprocess:
    def _sample(self, pixels):
        arr = np.asarray(pixels, dtype=np.float32)
        return Sample(pixels=arr, class_id=0, domain_id=0, uid=0)

    def test_identity_spec(self):
        s = render_sample(1, 1, _stream(), uid=0)
        spec = PreprocessSpec(target_size=16)
        out = preprocess(s, spec, "eval")
        assert np.array_equal(out.pixels, s.pixels)

    def test_constant_image_stays_constant_under_resize(self):
        s = self._sample(np.full((3, 2, 2), 0.37))
        out = preprocess(s, PreprocessSpec(target_size=4), "eval")
        assert out.pixels.shape == (3, 4, 4)
        assert np.allclose(out.pixels, 0.37, atol=1e-7)

    def test_translation_offsets_enumerate(self):
        # floor(u * 0.1 * 16) over u in [0, 1) can only be 0 or 1
        offsets = {translation_offset(u, 0.1, 16)
                   for u in np.linspace(0.0, 0.999999, 2000)}
        assert offsets == {0, 1}

    def test_train_mode_translates_eval_does_not(self):
        s = render_sample(0, 2, _stream(), uid=0)
        spec = PreprocessSpec(target_size=16, random_translate_max=0.3,
                              augment_seed=5)
        e1 = preprocess(s, spec, "eval")
        e2 = preprocess(s, spec, "eval")
        assert np.array_equal(e1.pixels, e2.pixels)
        # find a stream that produces a non-zero shift
        shifted = preprocess(s, spec, "train", stream=Stream(derive(5, "big")))
        assert shifted.pixels.shape == s.pixels.shape

    def test_degenerate_one_pixel_resize(self):
        s = self._sample(np.full((3, 1, 1), 0.5))
        out = preprocess(s, PreprocessSpec(target_size=3), "eval")
        assert np.allclose(out.pixels, 0.5)

    def test_center_crop_to_square(self):
        rect = np.zeros((3, 4, 8), dtype=np.float32)
        rect[:, :, 2:6] = 1.0
        s = self._sample(rect)
        out = preprocess(s, PreprocessSpec(target_size=4, center_crop=True), "eval")
        assert out.pixels.shape == (3, 4, 4)
        assert np.allclose(out.pixels, 1.0)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PreprocessSpec(target_size=8, random_translate_max=0.7)

    @given(tag=st.integers(0, 99))
    @settings(max_examples=20, deadline=None)
    def test_pixel_range_preserved(self, tag):
        s = render_sample(tag % 10, tag % 5, _stream(tag), uid=tag)
        spec = PreprocessSpec(target_size=11, random_translate_max=0.2,
                              augment_seed=tag)
        out = preprocess(s, spec, "train", stream=Stream(tag))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_bilinear_resize_matches_manual_2x_upsample():
    img = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = bilinear_resize(img, 4)
    # half-pixel convention: corners replicate the nearest source pixel
    assert out.shape == (1, 4, 4)
    assert out[0, 0, 0] == pytest.approx(0.0)
    assert out[0, 0, 3] == pytest.approx(1.0)
    assert out[0, 1, 1] == pytest.approx(0.375)
