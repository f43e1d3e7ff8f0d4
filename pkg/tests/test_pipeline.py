import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from iqt.errors import ConfigError, FormatError, ShapeError
from iqt.io import ImageBuffer, ManifestEntry, parse_manifest
from iqt.model import IQTModel
from iqt.pipeline import (
    Checkpoint,
    TrainConfig,
    apply_transform,
    augment_pair,
    decode_checkpoint,
    encode_checkpoint,
    forward_score,
    load_checkpoint,
    normalize_mos,
    patch_scores,
    plan_patches,
    save_checkpoint,
    score_pair,
    train,
    write_loss_log,
)


def image(rng, h, w=None):
    return ImageBuffer(rng.random((h, w or h, 3)))


class TestPlanPatches:
    def test_exact_fit(self):
        plan = plan_patches(256, 256, 256)
        assert plan.count == 1 and plan.positions() == [(0, 0)]

    def test_two_by_two(self):
        plan = plan_patches(512, 512, 256)
        assert plan.rows == (0, 256) and plan.cols == (0, 256)

    def test_overlapping(self):
        plan = plan_patches(500, 500, 256)
        assert plan.rows == (0, 244) and plan.count == 4

    def test_rectangular(self):
        plan = plan_patches(300, 700, 256)
        assert plan.rows == (0, 44) and plan.cols == (0, 222, 444)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            plan_patches(255, 300, 256)

    @given(st.integers(1, 64), st.integers(0, 400), st.integers(0, 400))
    @settings(max_examples=200, deadline=None)
    def test_covers_in_bounds_and_minimal(self, patch, extra_h, extra_w):
        h, w = patch + extra_h, patch + extra_w
        plan = plan_patches(h, w, patch)
        for offsets, dim in ((plan.rows, h), (plan.cols, w)):
            assert len(offsets) == math.ceil(dim / patch)
            assert offsets[0] == 0 and offsets[-1] == dim - patch
            assert all(0 <= o <= dim - patch for o in offsets)
            covered = np.zeros(dim, bool)
            for o in offsets:
                covered[o : o + patch] = True
            assert covered.all()


class TestAugment:
    def test_identity(self, rng):
        px = rng.random((4, 4, 3))
        assert apply_transform(px, False, 0).tobytes() == px.tobytes()

    def test_double_flip(self, rng):
        px = rng.random((4, 5, 3))
        once = apply_transform(px, True, 0)
        assert apply_transform(once, True, 0).tobytes() == px.tobytes()

    def test_quarter_turn_on_2x2(self):
        # a b      b d
        # c d  ->  a c   (one counter-clockwise turn)
        px = np.arange(4, dtype=float).reshape(2, 2, 1).repeat(3, axis=2)
        out = apply_transform(px, False, 1)[..., 0]
        np.testing.assert_array_equal(out, [[1, 3], [0, 2]])
        np.testing.assert_array_equal(apply_transform(px, False, 4), px)

    def test_flip_is_horizontal(self):
        px = np.arange(6, dtype=float).reshape(2, 3, 1).repeat(3, axis=2)
        np.testing.assert_array_equal(apply_transform(px, True, 0)[..., 0], [[2, 1, 0], [5, 4, 3]])

    def test_pair_correspondence(self, rng):
        ref = image(rng, 6)
        dist = ImageBuffer(ref.pixels * 0.5)
        g = np.random.default_rng(0)
        for _ in range(16):
            r, d = augment_pair(ref, dist, g)
            np.testing.assert_allclose(d.pixels, r.pixels * 0.5)

    def test_disabled(self, rng):
        ref, dist = image(rng, 5), image(rng, 5)
        r, d = augment_pair(ref, dist, np.random.default_rng(0), flip=False, rotate=False)
        assert r.pixels.tobytes() == ref.pixels.tobytes() and d.pixels.tobytes() == dist.pixels.tobytes()


class TestForwardScore:
    def test_deterministic(self, rng):
        model = IQTModel(tiny_config())
        ref, dist = image(rng, 16), image(rng, 16)
        assert forward_score(ref, dist, model) == forward_score(ref, dist, model)

    def test_wrong_patch_size(self, rng):
        with pytest.raises(ShapeError):
            forward_score(image(rng, 24), image(rng, 24), IQTModel(tiny_config()))

    def test_identical_images_equal_zero_diff(self, rng):
        # with dist == ref the diff stream is exactly zero
        model = IQTModel(tiny_config())
        ref = image(rng, 16)
        streams = model.streams(ref, ref)
        assert not np.any(streams["diff"].values)
        zeros = np.zeros_like(streams["diff"].values)
        manual = float(model.forward(zeros, streams["ref"].values).data)
        assert forward_score(ref, ref, model) == manual

    def test_manual_composition(self, rng):
        model = IQTModel(tiny_config(), seed=4)
        ref, dist = image(rng, 16), image(rng, 16)
        f_ref = model.backbone(ref.pixels * 2 - 1)
        f_dist = model.backbone(dist.pixels * 2 - 1)
        manual = float(model.forward(f_ref.values - f_dist.values, f_ref.values).data)
        assert forward_score(ref, dist, model) == manual


class TestScorePair:
    def test_single_patch(self, rng):
        model = IQTModel(tiny_config())
        ref, dist = image(rng, 16), image(rng, 16)
        assert score_pair(ref, dist, model) == forward_score(ref, dist, model)

    def test_overlapping_average(self, rng):
        model = IQTModel(tiny_config(patch=256))
        ref, dist = image(rng, 500), image(rng, 500)
        scores = []
        for top in (0, 244):
            for left in (0, 244):
                scores.append(forward_score(ref.crop(top, left, 256), dist.crop(top, left, 256), model))
        assert len(patch_scores(ref, dist, model)) == 4
        assert score_pair(ref, dist, model) == pytest.approx(sum(scores) / 4, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            score_pair(image(rng, 16), image(rng, 24), IQTModel(tiny_config()))


def short_cfg(steps=5, **kw):
    return TrainConfig(patch_size=16, batch_size=4, total_steps=steps, **kw)


class TestTrain:
    def test_zero_steps_is_init(self, ladder_manifest):
        cfg = tiny_config()
        ckpt = train(parse_manifest(ladder_manifest), short_cfg(0, seed=3), cfg)
        init = IQTModel(cfg, seed=3)
        for k, v in init.params.items():
            assert ckpt.params[k].tobytes() == v.data.tobytes()
        assert ckpt.step == 0 and ckpt.history == []

    def test_same_seed_bitwise(self, ladder_manifest):
        entries = parse_manifest(ladder_manifest)
        a = train(entries, short_cfg(seed=1), tiny_config())
        b = train(entries, short_cfg(seed=1), tiny_config())
        assert encode_checkpoint(a) == encode_checkpoint(b)
        assert a.history == b.history

    def test_loss_decreases_and_log(self, ladder_manifest, tmp_path):
        log = tmp_path / "loss.csv"
        ckpt = train(parse_manifest(ladder_manifest), short_cfg(60, flip=False, rotate=False, lr0=1e-3),
                     tiny_config(), log_path=log)
        lines = log.read_text().splitlines()
        assert lines[0] == "step,lr,mse" and len(lines) == 61
        mse = [h[2] for h in ckpt.history]
        assert np.mean(mse[-10:]) < np.mean(mse[:10])
        assert ckpt.meta["mos_min"] == 1.0 and ckpt.meta["mos_max"] == 5.0

    def test_skips_unreadable_rows(self, ladder_manifest, tmp_path):
        entries = parse_manifest(ladder_manifest)
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n1")
        entries.append(ManifestEntry(bad, bad, 3.0))
        with pytest.warns(UserWarning, match="skipping"):
            train(entries, short_cfg(1), tiny_config())

    def test_all_rows_unreadable(self, tmp_path):
        missing = tmp_path / "missing.ppm"
        with pytest.warns(UserWarning), pytest.raises(ConfigError, match="no usable"):
            train([ManifestEntry(missing, missing, 1.0)], short_cfg(1), tiny_config())

    def test_patch_mismatch(self, ladder_manifest):
        with pytest.raises(ConfigError):
            train(parse_manifest(ladder_manifest), TrainConfig(patch_size=32), tiny_config())


def test_normalize_mos_is_monotone(rng):
    mos = rng.uniform(1, 5, size=20)
    norm, lo, hi = normalize_mos(mos)
    assert norm.min() == 0.0 and norm.max() == 1.0
    order = np.argsort(mos)
    assert np.all(np.diff(norm[order]) >= 0)
    assert (lo, hi) == (mos.min(), mos.max())


def test_write_loss_log_repr_values(tmp_path):
    p = tmp_path / "l.csv"
    write_loss_log(p, [(0, 0.1, 1 / 3)])
    assert p.read_text().splitlines()[1] == f"0,0.1,{1 / 3!r}"


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        return Checkpoint.from_model(IQTModel(tiny_config(), seed=2), step=7, meta={"mos_min": 1.0})

    def test_save_load_save_identical(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "a.iqtc")
        loaded = load_checkpoint(tmp_path / "a.iqtc")
        save_checkpoint(loaded, tmp_path / "b.iqtc")
        assert (tmp_path / "a.iqtc").read_bytes() == (tmp_path / "b.iqtc").read_bytes()
        assert loaded.step == 7 and loaded.meta == {"mos_min": 1.0} and loaded.config == ckpt.config

    def test_forward_bitwise_after_round_trip(self, ckpt, rng):
        ref, dist = image(rng, 16), image(rng, 16)
        back = decode_checkpoint(encode_checkpoint(ckpt))
        assert forward_score(ref, dist, ckpt.model()) == forward_score(ref, dist, back.model())

    def test_header_layout(self, ckpt):
        data = encode_checkpoint(ckpt)
        assert data[:4] == b"IQTC" and data[4:6] == b"\x01\x00"

    def test_truncation_reports_offset(self, ckpt):
        data = encode_checkpoint(ckpt)
        for cut in (3, 10, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError, match="truncated") as info:
                decode_checkpoint(data[:cut])
            assert info.value.offset is not None and info.value.offset <= cut

    def test_bad_magic_and_version(self, ckpt):
        data = bytearray(encode_checkpoint(ckpt))
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"NOPE" + bytes(data[4:]))
        data[4] = 2
        with pytest.raises(FormatError, match="version") as info:
            decode_checkpoint(bytes(data))
        assert info.value.offset == 4

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(FormatError, match="trailing"):
            decode_checkpoint(encode_checkpoint(ckpt) + b"\x00")

    def test_path_in_message(self, ckpt, tmp_path):
        p = tmp_path / "cut.iqtc"
        p.write_bytes(encode_checkpoint(ckpt)[:20])
        with pytest.raises(FormatError, match="cut.iqtc"):
            load_checkpoint(p)
