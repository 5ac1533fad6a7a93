import numpy as np
import pytest

from config import DescriptorParams
from core_types import normalized_grid
from descriptor import (
    N_BITS,
    N_BYTES,
    DarkNoiseModel,
    DescriptorExtractor,
    MultimodalDescriptor,
    Validity,
    calibrate_dark_noise,
    combine_bits,
    extract_descriptor,
    hamming_distance,
    hamming_to_many,
    make_sampling_pattern,
    normal_map,
    visual_bit,
)
from errors import ConfigError, DveoError
from feature_detection import Keypoint, Modality
from tests.conftest import make_frame


@pytest.fixture
def textured_frame(camera):
    rng = np.random.default_rng(7)
    gray = rng.integers(0, 200, camera.shape)
    depth = np.full(camera.shape, 1.1, dtype=np.float32)
    return make_frame(gray, depth, camera)


class Test_visual_bit:
    @pytest.mark.parametrize(
        "i1, i2, dn, expected",
        [(10, 20, 0, 1), (20, 10, 0, 0), (2, 4, 5, 0), (4, 10, 5, 1), (7, 7, 0, 0)],
    )
    def test_cases(self, i1, i2, dn, expected):
        assert visual_bit(i1, i2, DarkNoiseModel(dn)) == expected


class Test_dark_noise:
    def test_black(self):
        assert calibrate_dark_noise([np.zeros((4, 4))]).i_dn == 0.0

    def test_constant(self):
        assert calibrate_dark_noise([np.full((4, 4), 3)] * 3).i_dn == pytest.approx(3.0)

    def test_mean_over_images(self):
        model = calibrate_dark_noise(iter([np.full((4, 4), 2), np.full((4, 4), 4)]))
        assert model.i_dn == pytest.approx(3.0)

    def test_no_images(self):
        with pytest.raises(ConfigError):
            calibrate_dark_noise([])

    @pytest.mark.parametrize("i_dn", [-1.0, 255.0])
    def test_range(self, i_dn):
        with pytest.raises(ConfigError):
            DarkNoiseModel(i_dn)


class Test_sampling_pattern:
    def test_shape_and_bounds(self):
        pattern = make_sampling_pattern(48, 9, 2018)
        assert pattern.p1.shape == pattern.p2.shape == (N_BITS, 2)
        bound = 48 // 2 - 9 // 2 - 1
        assert np.abs(pattern.p1).max() <= bound
        assert np.abs(pattern.p2).max() <= bound
        assert not np.any(np.all(pattern.p1 == pattern.p2, axis=1))

    def test_deterministic(self):
        a = make_sampling_pattern(48, 9, 11)
        make_sampling_pattern.cache_clear()
        b = make_sampling_pattern(48, 9, 11)
        np.testing.assert_array_equal(a.p1, b.p1)
        np.testing.assert_array_equal(a.p2, b.p2)

    def test_seed_changes_pattern(self):
        assert not np.array_equal(make_sampling_pattern(48, 9, 1).p1, make_sampling_pattern(48, 9, 2).p1)

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_sampling_pattern().p1[0, 0] = 0


class Test_combine_bits:
    def test_empty(self):
        d = combine_bits(np.zeros(N_BITS, bool), np.zeros(N_BITS, bool))
        assert d.validity == Validity.EMPTY
        assert not d.unpacked().any()
        assert len(d.to_bytes()) == N_BYTES

    def test_validity(self):
        v = np.zeros(N_BITS, bool)
        d = np.zeros(N_BITS, bool)
        v[0] = True
        assert combine_bits(v, d).validity == Validity.VISUAL
        assert combine_bits(d, v).validity == Validity.DEPTH
        d[1] = True
        both = combine_bits(v, d)
        assert both.validity == Validity.VISUAL_DEPTH
        assert both.unpacked()[:3].tolist() == [True, True, False]
        assert len(both.to_bytes()) == N_BYTES


class Test_hamming:
    def _random(self, seed):
        bits = np.random.default_rng(seed).integers(0, 2, N_BITS).astype(bool)
        return MultimodalDescriptor(np.packbits(bits), Validity.VISUAL)

    def test_self(self):
        d = self._random(1)
        assert hamming_distance(d, d) == 0

    def test_complement(self):
        d = self._random(2)
        assert hamming_distance(d, MultimodalDescriptor(np.bitwise_not(d.bits), Validity.VISUAL)) == 256

    def test_symmetric(self):
        a, b = self._random(3), self._random(4)
        assert hamming_distance(a, b) == hamming_distance(b, a)
        assert hamming_distance(a, b) == int(np.sum(a.unpacked() != b.unpacked()))

    def test_invalid(self):
        with pytest.raises(DveoError):
            hamming_distance(None, self._random(5))
        with pytest.raises(DveoError):
            hamming_distance(np.zeros(8, np.uint8), self._random(5))

    def test_to_many(self):
        a = self._random(6)
        others = [self._random(s) for s in (7, 8, 9)]
        expected = [hamming_distance(a, o) for o in others]
        np.testing.assert_array_equal(hamming_to_many(a, others), expected)
        np.testing.assert_array_equal(hamming_to_many(a, np.stack([o.bits for o in others])), expected)
        assert len(hamming_to_many(a, [])) == 0


class Test_extractor:
    def test_outside_window(self, textured_frame):
        ex = DescriptorExtractor(textured_frame)
        assert ex.describe((10.0, 10.0), Modality.MULTIMODAL) is None
        assert ex.describe((80.0, 60.0), Modality.MULTIMODAL) is not None

    def test_repeatable(self, textured_frame):
        a = DescriptorExtractor(textured_frame).describe((80.0, 60.0), Modality.VISUAL)
        b = DescriptorExtractor(textured_frame).describe((80.0, 60.0), Modality.VISUAL)
        assert hamming_distance(a, b) == 0

    def test_brightness_offset_invariance(self, camera, textured_frame):
        brighter = make_frame(textured_frame.gray.astype(int) + 40, textured_frame.depth, camera)
        a = DescriptorExtractor(textured_frame).describe((80.0, 60.0), Modality.VISUAL)
        b = DescriptorExtractor(brighter).describe((80.0, 60.0), Modality.VISUAL)
        assert hamming_distance(a, b) == 0

    def test_offset_invariance_on_random_lit_frames(self, camera):
        rng = np.random.default_rng(11)
        dn = DarkNoiseModel(3.0)
        depth = np.full(camera.shape, 1.5, dtype=np.float32)
        pixels = [(30.0, 30.0), (80.0, 60.0), (120.0, 85.0)]
        for _ in range(100):
            gray = rng.integers(40, 200, camera.shape)
            offset = int(rng.integers(1, 56))
            a = DescriptorExtractor(make_frame(gray, depth, camera), dn=dn)
            b = DescriptorExtractor(make_frame(gray + offset, depth, camera), dn=dn)
            for p in pixels:
                assert hamming_distance(a.describe(p, Modality.VISUAL), b.describe(p, Modality.VISUAL)) == 0

    def test_dark_noise_zeroes_visual_bits(self, camera):
        rng = np.random.default_rng(3)
        dark = make_frame(rng.integers(0, 6, camera.shape), np.zeros(camera.shape), camera)
        ex = DescriptorExtractor(dark, dn=DarkNoiseModel(5.0))
        for modality in (Modality.VISUAL, Modality.MULTIMODAL):
            d = ex.describe((80.0, 60.0), modality)
            assert d.validity == Validity.EMPTY
            assert hamming_distance(d, MultimodalDescriptor(np.zeros(N_BYTES, np.uint8), Validity.EMPTY)) == 0

    def test_fronto_parallel_depth_bits(self, textured_frame, camera):
        ex = DescriptorExtractor(textured_frame)
        p = ex.pattern
        separation = np.hypot(*(p.p1 - p.p2).T) * 1.1 / camera.fx
        expected = separation <= 0.05
        assert expected.any()
        d = ex.describe((80.0, 60.0), Modality.DEPTH)
        assert d.validity == Validity.DEPTH
        np.testing.assert_array_equal(d.unpacked(), expected)

    def test_modality_gating(self, textured_frame):
        ex = DescriptorExtractor(textured_frame)
        visual, depth = ex.parts((80.0, 60.0))
        both = ex.describe((80.0, 60.0), Modality.MULTIMODAL)
        np.testing.assert_array_equal(both.unpacked(), visual | depth)
        np.testing.assert_array_equal(ex.describe((80.0, 60.0), Modality.VISUAL).unpacked(), visual)

    def test_visual_bits_disabled(self, camera):
        flat = make_frame(np.full(camera.shape, 100), np.zeros(camera.shape), camera)
        ex = DescriptorExtractor(flat, params=DescriptorParams(use_visual_bits=False))
        assert ex.describe((80.0, 60.0), Modality.VISUAL).validity == Validity.EMPTY
        assert ex.describe((10.0, 60.0), Modality.VISUAL) is None

    def test_roof_sets_normal_bits(self, camera):
        u = np.arange(camera.width, dtype=float)
        # planes z = 1.5 + |x| meeting at 90 degrees above the center column
        depth = 1.5 / (1.0 - np.abs(u - 80.0) / camera.fx)
        frame = make_frame(np.zeros(camera.shape), np.tile(depth, (camera.height, 1)), camera)
        ex = DescriptorExtractor(frame)
        p = ex.pattern
        crossing = np.sign(p.p1[:, 0]) * np.sign(p.p2[:, 0]) < 0
        far_apart = np.hypot(*(p.p1 - p.p2).T) > 8
        bits = ex.parts((80.0, 60.0))[1]
        assert bits[crossing & far_apart].any()
        assert not bits[~crossing & far_apart & (np.minimum(np.abs(p.p1[:, 0]), np.abs(p.p2[:, 0])) > 3)].any()

    def test_extract_descriptor(self, textured_frame):
        kp = Keypoint(pixel=(80.0, 60.0), score=1.0, modality=Modality.MULTIMODAL, depth=1.1)
        d = extract_descriptor(kp, textured_frame)
        assert d.validity == Validity.VISUAL_DEPTH
        assert extract_descriptor(kp, textured_frame, modality=Modality.DEPTH).validity == Validity.DEPTH


class Test_normal_map:
    def test_matches_per_pixel_plane_fit(self, camera):
        rng = np.random.default_rng(5)
        h, w = 14, 18
        depth = rng.uniform(1.0, 3.0, (h, w))
        depth[rng.random((h, w)) < 0.2] = 0.0
        valid = depth > 0
        xy = normalized_grid(camera)[:h, :w]
        points = np.dstack([xy[..., 0] * depth, xy[..., 1] * depth, depth])
        normals = normal_map(points, valid, 5)
        for r in range(h):
            for c in range(w):
                window = (slice(max(0, r - 2), r + 3), slice(max(0, c - 2), c + 3))
                nb = points[window][valid[window]]
                if len(nb) < 3:
                    assert np.all(np.isnan(normals[r, c]))
                    continue
                centered = nb - nb.mean(axis=0)
                n = np.linalg.eigh(centered.T @ centered)[1][:, 0]
                if n @ points[r, c] > 0:
                    n = -n
                np.testing.assert_allclose(normals[r, c], n, atol=1e-6)

    def test_tilted_plane(self, camera):
        # z = 2 + 0.5 x, a plane tilted about the vertical axis
        xy = normalized_grid(camera)
        depth = 2.0 / (1.0 - 0.5 * xy[..., 0])
        points = np.dstack([xy[..., 0] * depth, xy[..., 1] * depth, depth])
        normals = normal_map(points, depth > 0, 5)
        expected = np.array([0.5, 0.0, -1.0]) / np.sqrt(1.25)
        np.testing.assert_allclose(normals[10:-10, 10:-10], np.broadcast_to(expected, normals[10:-10, 10:-10].shape),
                                   atol=1e-6)
