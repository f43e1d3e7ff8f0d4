import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iqt.backbone import (
    BackboneSpec,
    FeatureMap,
    ToyBackbone,
    decode_feature_file,
    diff_features,
    encode_feature_file,
    extract_features,
    inception_grid,
    load_feature_file,
    inception_backbone,
    save_feature_file,
)
from iqt.errors import ConfigError, FormatError, ShapeError
from iqt.io import ImageBuffer


def random_image(rng, h, w):
    return ImageBuffer(rng.random((h, w, 3)))


class TestExtract:
    def test_toy_channel_count(self, rng):
        spec = BackboneSpec(stages=6, channels=4)
        f = extract_features(random_image(rng, 16, 16), spec)
        assert spec.total_channels == 24 and f.channels == 24 and f.stages == 6

    def test_inception_channel_count(self):
        assert inception_backbone().total_channels == 1920

    def test_256_input_gives_32x32x24(self, rng):
        f = extract_features(random_image(rng, 256, 256), BackboneSpec())
        assert f.shape == (32, 32, 24)

    def test_spec_grid_matches_running_the_stem(self, rng):
        spec = BackboneSpec(channels=2)
        for size in (8, 16, 24, 40):
            f = extract_features(random_image(rng, size, size), spec)
            assert f.height == spec.grid(size)

    def test_too_small(self, rng):
        with pytest.raises(ShapeError, match="smaller than one"):
            extract_features(random_image(rng, 7, 16), BackboneSpec())

    def test_pure_function(self, rng):
        img = random_image(rng, 32, 24)
        a = extract_features(img, BackboneSpec(seed=3))
        b = extract_features(img, ToyBackbone(BackboneSpec(seed=3)))
        assert a.values.tobytes() == b.values.tobytes()

    def test_stage_order_probe(self, rng):
        spec = BackboneSpec(stages=4, channels=3)
        bb = ToyBackbone(spec)
        for s in range(spec.stages):
            bb.weights[f"stage.{s}.w"] = np.zeros_like(bb.weights[f"stage.{s}.w"])
            bb.weights[f"stage.{s}.b"] = np.full(spec.channels, float(s + 1))
        f = extract_features(random_image(rng, 16, 16), bb)
        for s in range(spec.stages):
            block = f.values[..., s * spec.channels : (s + 1) * spec.channels]
            assert np.all(block == s + 1)

    def test_feature_file_kind_cannot_run_images(self, rng):
        with pytest.raises(ConfigError):
            extract_features(random_image(rng, 16, 16), inception_backbone())

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            BackboneSpec(kind="vgg")
        with pytest.raises(ConfigError):
            BackboneSpec(downsample=6)


def test_inception_geometry():
    # valid-padded stem of Inception-ResNet-V2
    assert inception_grid(192) == 21
    assert inception_grid(299) == 35
    assert inception_grid(256) == 29


class TestDiff:
    def test_self_difference_is_zero(self, rng):
        a = FeatureMap(rng.normal(size=(3, 4, 6)).astype(np.float32))
        assert not np.any(diff_features(a, a).values)

    def test_zero_dist(self, rng):
        a = FeatureMap(rng.normal(size=(3, 4, 6)).astype(np.float32))
        z = FeatureMap(np.zeros((3, 4, 6), np.float32))
        assert diff_features(a, z).values.tobytes() == a.values.tobytes()

    def test_scalar(self):
        r = FeatureMap(np.full((1, 1, 1), 1.5, np.float32))
        d = FeatureMap(np.full((1, 1, 1), 0.25, np.float32))
        assert diff_features(r, d).values[0, 0, 0] == 1.25

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            diff_features(FeatureMap(np.zeros((2, 2, 2))), FeatureMap(np.zeros((2, 3, 2))))

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_antisymmetry(self, seed):
        g = np.random.default_rng(seed)
        a = FeatureMap(g.normal(size=(2, 3, 4)).astype(np.float32))
        b = FeatureMap(g.normal(size=(2, 3, 4)).astype(np.float32))
        assert diff_features(a, b).values.tobytes() == (-diff_features(b, a).values).tobytes()


class TestFeatureFile:
    def test_round_trip(self, rng, tmp_path):
        f = FeatureMap(rng.normal(size=(4, 4, 24)).astype(np.float32), stages=6)
        save_feature_file(f, tmp_path / "f.iqtf")
        g = load_feature_file(tmp_path / "f.iqtf", stages=6)
        assert g.values.tobytes() == f.values.tobytes()
        assert g.stages == 6

    def test_layout(self):
        f = FeatureMap(np.arange(12, dtype=np.float32).reshape(1, 3, 4))
        data = encode_feature_file(f)
        assert data[:4] == b"IQTF"
        assert data[4:6] == b"\x01\x00"
        assert data[6:18] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
        assert np.frombuffer(data[18:], "<f4").tolist() == list(range(12))

    def test_wrong_magic(self):
        data = bytearray(encode_feature_file(FeatureMap(np.zeros((1, 1, 1)))))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic") as info:
            decode_feature_file(bytes(data))
        assert info.value.offset == 0

    def test_truncated_payload_reports_offset(self):
        data = encode_feature_file(FeatureMap(np.zeros((2, 2, 2))))[:-3]
        with pytest.raises(FormatError, match="truncated") as info:
            decode_feature_file(data)
        assert info.value.offset == len(data)

    def test_truncated_header(self):
        with pytest.raises(FormatError, match="header"):
            decode_feature_file(b"IQTF\x01\x00\x01")

    def test_dim_overflow(self):
        header = b"IQTF\x01\x00" + (2**20).to_bytes(4, "little") * 3
        with pytest.raises(FormatError, match="overflow") as info:
            decode_feature_file(header)
        assert info.value.offset == 6

    def test_version(self):
        data = bytearray(encode_feature_file(FeatureMap(np.zeros((1, 1, 1)))))
        data[4] = 9
        with pytest.raises(FormatError, match="version"):
            decode_feature_file(bytes(data))
