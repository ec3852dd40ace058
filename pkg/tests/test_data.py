"""Tests for codecs, procedural textures, the toy matting set and dir scans."""

import hashlib
import struct
import zlib

import numpy as np
import pytest

from mattekit import data
from mattekit.data import (
    ImageDecodeError,
    ShapeSpec,
    decode_image,
    decode_png,
    decode_pnm,
    encode_image,
    encode_png,
    encode_pnm,
    gray_to_trimap,
    procedural_texture,
    scan_image_dir,
    shape_alpha,
    toy_matting_dataset,
    train_test_split,
    trimap_to_gray,
)


def filtered_png(img: np.ndarray, filters: list[int]) -> bytes:
    """Independent PNG writer applying a chosen filter type per row."""
    h, w = img.shape[:2]
    bpp = 1 if img.ndim == 2 else img.shape[2]
    rows = img.reshape(h, w * bpp).astype(np.int32)
    raw = bytearray()
    for r in range(h):
        f = filters[r % len(filters)]
        cur = rows[r]
        prev = rows[r - 1] if r else np.zeros(w * bpp, dtype=np.int32)
        left = np.zeros(w * bpp, dtype=np.int32)
        left[bpp:] = cur[:-bpp]
        up_left = np.zeros(w * bpp, dtype=np.int32)
        up_left[bpp:] = prev[:-bpp]
        if f == 0:
            enc = cur
        elif f == 1:
            enc = cur - left
        elif f == 2:
            enc = cur - prev
        elif f == 3:
            enc = cur - (left + prev) // 2
        else:
            p = left + prev - up_left
            pa, pb, pc = abs(p - left), abs(p - prev), abs(p - up_left)
            pred = np.where((pa <= pb) & (pa <= pc), left,
                            np.where(pb <= pc, prev, up_left))
            enc = cur - pred
        raw.append(f)
        raw.extend((enc & 0xFF).astype(np.uint8).tobytes())
    color_type = 0 if img.ndim == 2 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)

    def chunk(kind, payload):
        return (struct.pack(">I", len(payload)) + kind + payload
                + struct.pack(">I", zlib.crc32(kind + payload)))

    return (data.PNG_SIGNATURE + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(bytes(raw)))
            + chunk(b"IEND", b""))


class TestPngCodec:
    def test_rgb_round_trip_identical(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(13, 17, 3), dtype=np.uint8)
        assert np.array_equal(decode_png(encode_png(img)), img)

    def test_gray_round_trip_identical(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(9, 5), dtype=np.uint8)
        assert np.array_equal(decode_png(encode_png(img)), img)

    @pytest.mark.parametrize("filters", [[0], [1], [2], [3], [4], [0, 1, 2, 3, 4]])
    def test_all_scanline_filters_decode(self, filters):
        rng = np.random.default_rng(sum(filters))
        img = rng.integers(0, 256, size=(8, 6, 3), dtype=np.uint8)
        assert np.array_equal(decode_png(filtered_png(img, filters)), img)

    def test_gray_filters_decode(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(7, 7), dtype=np.uint8)
        assert np.array_equal(decode_png(filtered_png(img, [4, 3, 1])), img)

    def test_truncated_file_is_error_not_partial(self):
        img = np.zeros((4, 4), dtype=np.uint8)
        blob = encode_png(img)
        with pytest.raises(ImageDecodeError) as exc:
            decode_png(blob[:len(blob) - 15])
        assert exc.value.offset > 0

    def test_bad_signature_offset_zero(self):
        with pytest.raises(ImageDecodeError) as exc:
            decode_png(b"JFIF" + b"\x00" * 32)
        assert exc.value.offset == 0

    def test_crc_corruption_detected(self):
        blob = bytearray(encode_png(np.zeros((4, 4), dtype=np.uint8)))
        blob[40] ^= 0xFF  # inside IDAT payload
        with pytest.raises(ImageDecodeError, match="CRC|corrupt"):
            decode_png(bytes(blob))

    def test_unsupported_color_type_reports_ihdr_offset(self):
        ihdr = struct.pack(">IIBBBBB", 4, 4, 8, 6, 0, 0, 0)  # RGBA
        blob = (data.PNG_SIGNATURE
                + struct.pack(">I", len(ihdr)) + b"IHDR" + ihdr
                + struct.pack(">I", zlib.crc32(b"IHDR" + ihdr)))
        with pytest.raises(ImageDecodeError, match="color type") as exc:
            decode_png(blob)
        assert exc.value.offset == 16

    def test_rejects_non_uint8(self):
        with pytest.raises(ValueError, match="uint8"):
            encode_png(np.zeros((4, 4), dtype=np.float32))


class TestPnmCodec:
    def test_ppm_round_trip(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(6, 11, 3), dtype=np.uint8)
        assert np.array_equal(decode_pnm(encode_pnm(img)), img)

    def test_pgm_round_trip(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(6, 11), dtype=np.uint8)
        assert np.array_equal(decode_pnm(encode_pnm(img)), img)

    def test_comment_lines_skipped(self):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        blob = b"P5\n# a comment\n4 3\n255\n" + img.tobytes()
        assert np.array_equal(decode_pnm(blob), img)

    def test_truncated_pixels_error(self):
        blob = encode_pnm(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ImageDecodeError, match="truncated"):
            decode_pnm(blob[:-3])

    def test_bad_magic(self):
        with pytest.raises(ImageDecodeError) as exc:
            decode_pnm(b"P3\n1 1\n255\n abc")
        assert exc.value.offset == 0


class TestTrimapGrayConvention:
    def test_labels_to_gray_and_back_exact(self):
        labels = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        gray = trimap_to_gray(labels)
        assert np.array_equal(gray, [[0, 128], [255, 128]])
        assert np.array_equal(gray_to_trimap(gray), labels)

    def test_round_trip_through_png_file(self, tmp_path):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        p = tmp_path / "trimap.png"
        encode_image(trimap_to_gray(labels), p)
        gray = data.to_uint8(decode_image(p).pixels[:, :, 0])
        assert np.array_equal(gray_to_trimap(gray), labels)

    def test_invalid_labels_rejected(self):
        with pytest.raises(ValueError):
            trimap_to_gray(np.array([0, 3]))
        with pytest.raises(ValueError):
            gray_to_trimap(np.array([0, 127]))


class TestImageFileApi:
    def test_float_image_quantizes_and_clamps(self, tmp_path):
        img = np.array([[[-0.2, 0.5, 1.7]]], dtype=np.float32)
        p = tmp_path / "x.png"
        encode_image(img, p)
        rec = decode_image(p)
        assert rec.pixels.shape == (1, 1, 3)
        np.testing.assert_allclose(rec.pixels[0, 0], [0.0, 0.5, 1.0], atol=1 / 255)

    def test_gray_decodes_with_channel_axis(self, tmp_path):
        p = tmp_path / "g.pgm"
        encode_image(np.zeros((4, 4), dtype=np.uint8), p)
        assert decode_image(p).pixels.shape == (4, 4, 1)

    def test_decoded_values_in_unit_range(self, tmp_path):
        rng = np.random.default_rng(6)
        p = tmp_path / "r.png"
        encode_image(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8), p)
        px = decode_image(p).pixels
        assert px.min() >= 0.0 and px.max() <= 1.0 and np.isfinite(px).all()

    def test_unknown_extension_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            encode_image(np.zeros((4, 4), dtype=np.uint8), tmp_path / "x.jpg")


class TestProceduralTextures:
    def test_gradient_corners_hold_endpoint_colors(self):
        rng = np.random.default_rng(7)
        c0 = rng.uniform(0, 1, 3)
        c1 = rng.uniform(0, 1, 3)
        img = procedural_texture("gradient", 16, np.random.default_rng(7))
        np.testing.assert_allclose(img[0, 0], c0.astype(np.float32), atol=1e-6)
        np.testing.assert_allclose(img[-1, -1], c1.astype(np.float32), atol=1e-6)

    def test_same_seed_identical(self):
        for kind in data.TEXTURE_KINDS:
            a = procedural_texture(kind, 16, 42)
            b = procedural_texture(kind, 16, 42)
            assert np.array_equal(a, b), kind

    def test_different_kinds_differ_substantially(self):
        imgs = [procedural_texture(k, 32, 11) for k in data.TEXTURE_KINDS]
        for i in range(len(imgs)):
            for j in range(i + 1, len(imgs)):
                frac = np.mean(np.any(imgs[i] != imgs[j], axis=2))
                assert frac >= 0.10, (data.TEXTURE_KINDS[i], data.TEXTURE_KINDS[j])

    def test_unit_range_no_nan_over_many_seeds(self):
        for seed in range(1000):
            kind = data.TEXTURE_KINDS[seed % 4]
            img = procedural_texture(kind, 8, seed)
            assert np.isfinite(img).all()
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_size_and_kind_validation(self):
        with pytest.raises(ValueError):
            procedural_texture("gradient", 4, 0)
        with pytest.raises(ValueError):
            procedural_texture("perlin", 16, 0)


class TestShadeToRange:
    def test_affine_endpoint_mapping(self):
        texture = np.array([[0.0, 0.5, 1.0]], dtype=np.float32)
        shaded = data.shade_to_range(texture, (0.2, 0.6))
        np.testing.assert_allclose(shaded, [[0.2, 0.4, 0.6]], atol=1e-7)
        assert shaded.dtype == np.float32

    def test_default_ranges_are_disjoint_in_expectation_but_overlap(self):
        fg_lo, fg_hi = data.FG_VALUE_RANGE
        bg_lo, bg_hi = data.BG_VALUE_RANGE
        assert (fg_lo + fg_hi) / 2 > (bg_lo + bg_hi) / 2  # fg brighter on average
        assert fg_lo < bg_hi  # but brightness alone never decides the layer

    def test_invalid_range_rejected(self):
        for bad in ((0.5, 0.5), (-0.1, 0.5), (0.2, 1.5), (0.8, 0.2)):
            with pytest.raises(ValueError):
                data.shade_to_range(np.zeros((2, 2)), bad)

    def test_toy_dataset_foreground_is_shaded_bright(self):
        for item in toy_matting_dataset(8, 16, seed=5):
            assert item.fg.min() >= data.FG_VALUE_RANGE[0] - 1e-6


def disk_alpha_reference(spec: ShapeSpec, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=np.float64)
    cy, cx = spec.center
    for y in range(size):
        for x in range(size):
            dist = ((y - cy) ** 2 + (x - cx) ** 2) ** 0.5
            v = (spec.radii[0] - dist) / spec.softness + 0.5
            out[y, x] = min(1.0, max(0.0, v))
    return out


class TestToyMattingDataset:
    def test_disk_alpha_matches_analytic_reference(self):
        items = toy_matting_dataset(12, 24, seed=3)
        disks = [it for it in items if it.shape.kind == "disk"]
        assert disks, "expected at least one disk in 12 items"
        for it in disks[:2]:
            ref = disk_alpha_reference(it.shape, 24)
            np.testing.assert_allclose(it.gt_alpha, ref, atol=1e-6)

    def test_alpha_reproducible_from_descriptor(self):
        for it in toy_matting_dataset(6, 20, seed=9):
            assert np.array_equal(shape_alpha(it.shape, 20), it.gt_alpha)

    def test_every_item_has_fractional_alpha(self):
        for it in toy_matting_dataset(20, 32, seed=1):
            frac = (it.gt_alpha > 0) & (it.gt_alpha < 1)
            assert frac.any(), f"item {it.index} has a hard-edged alpha"

    def test_average_fractional_share_at_least_5_percent(self):
        items = toy_matting_dataset(30, 32, seed=2)
        shares = [np.mean((it.gt_alpha > 0) & (it.gt_alpha < 1)) for it in items]
        assert np.mean(shares) >= 0.05

    def test_same_arguments_same_digest(self):
        def digest(items):
            h = hashlib.sha256()
            for it in items:
                h.update(it.fg.tobytes())
                h.update(it.gt_alpha.tobytes())
            return h.hexdigest()

        a = digest(toy_matting_dataset(8, 16, seed=5))
        b = digest(toy_matting_dataset(8, 16, seed=5))
        c = digest(toy_matting_dataset(8, 16, seed=6))
        assert a == b and a != c

    def test_split_is_first_80_last_20(self):
        items = toy_matting_dataset(10, 16, seed=0)
        train, test = train_test_split(items)
        assert [it.index for it in train] == list(range(8))
        assert [it.index for it in test] == [8, 9]

    def test_softness_within_band(self):
        for it in toy_matting_dataset(25, 16, seed=4):
            assert 1.0 <= it.shape.softness <= 4.0

    def test_n_validation(self):
        with pytest.raises(ValueError):
            toy_matting_dataset(0, 16, seed=0)


class TestScanImageDir:
    def test_nested_mixed_files_sorted_and_filtered(self, tmp_path):
        (tmp_path / "b").mkdir()
        (tmp_path / "a").mkdir()
        keep = [tmp_path / "a" / "2.png", tmp_path / "a" / "10.ppm",
                tmp_path / "b" / "x.pgm", tmp_path / "top.png"]
        skip = [tmp_path / "a" / "notes.txt", tmp_path / "b" / "z.jpg"]
        for p in keep + skip:
            p.write_bytes(b"")
        got = list(scan_image_dir(tmp_path))
        assert got == sorted(keep, key=lambda p: p.as_posix())

    def test_empty_dir_yields_nothing(self, tmp_path):
        assert list(scan_image_dir(tmp_path)) == []

    def test_ordering_stable_across_scans(self, tmp_path):
        for name in ["q.png", "a.png", "m.ppm"]:
            (tmp_path / name).write_bytes(b"")
        assert list(scan_image_dir(tmp_path)) == list(scan_image_dir(tmp_path))

    def test_missing_root_raises(self, tmp_path):
        with pytest.raises(NotADirectoryError):
            scan_image_dir(tmp_path / "nope")
