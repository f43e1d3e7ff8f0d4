import numpy as np
import pytest

from iqt.backbone import FeatureMap
from iqt.embedding import assemble_sequence, init_embedding_params, project_and_flatten, trunc_normal
from iqt.errors import ShapeError


def test_identity_projection_flattens_raw_features(rng):
    f = FeatureMap(rng.normal(size=(3, 4, 5)).astype(np.float32))
    x = project_and_flatten(f, np.eye(5, dtype=np.float32), np.zeros(5, np.float32))
    np.testing.assert_array_equal(x.data, f.values.reshape(12, 5))
    # row k <-> cell (k // W, k % W)
    np.testing.assert_array_equal(x.data[6], f.values[1, 2])


def test_token_count_is_h_times_w(rng):
    x = project_and_flatten(rng.normal(size=(2, 2, 7)), rng.normal(size=(7, 3)), np.zeros(3))
    assert x.shape == (4, 3)


def test_zero_weight_gives_bias_rows(rng):
    b = np.array([1.0, -2.0, 0.5], np.float32)
    x = project_and_flatten(rng.normal(size=(2, 3, 4)), np.zeros((4, 3), np.float32), b)
    np.testing.assert_array_equal(x.data, np.tile(b, (6, 1)))


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channels"):
        project_and_flatten(rng.normal(size=(2, 2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_batched_projection_matches_per_sample(rng):
    maps = rng.normal(size=(3, 2, 2, 4)).astype(np.float32)
    w, b = rng.normal(size=(4, 5)).astype(np.float32), np.zeros(5, np.float32)
    batched = project_and_flatten(maps, w, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], project_and_flatten(maps[i], w, b).data, rtol=1e-6)


class TestAssemble:
    def test_zero_positions(self, rng):
        x, tok = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
        seq = assemble_sequence(x, tok, np.zeros((5, 3)))
        np.testing.assert_allclose(seq.data, np.vstack([tok, x]), rtol=1e-6)

    def test_zero_content_gives_positions(self, rng):
        pos = rng.normal(size=(5, 3)).astype(np.float32)
        seq = assemble_sequence(np.zeros((4, 3), np.float32), np.zeros((1, 3), np.float32), pos)
        np.testing.assert_array_equal(seq.data, pos)

    def test_challenge_geometry(self):
        seq = assemble_sequence(np.zeros((441, 128)), np.zeros((1, 128)), np.zeros((442, 128)))
        assert seq.shape == (442, 128)

    def test_row_zero_is_quality_slot(self, rng):
        x, tok, pos = rng.normal(size=(4, 3)), rng.normal(size=(1, 3)), rng.normal(size=(5, 3))
        seq = assemble_sequence(x, tok, pos).data
        np.testing.assert_allclose(seq[0], tok[0] + pos[0], rtol=1e-6)
        np.testing.assert_allclose(seq[1:], x + pos[1:], rtol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            assemble_sequence(np.zeros((4, 3)), np.zeros((1, 3)), np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            assemble_sequence(np.zeros((4, 3)), np.zeros((1, 2)), np.zeros((5, 3)))

    def test_batched_token_broadcast(self, rng):
        seq = assemble_sequence(np.zeros((2, 4, 3)), rng.normal(size=(1, 3)), np.zeros((5, 3)))
        assert seq.shape == (2, 5, 3)
        np.testing.assert_array_equal(seq.data[0], seq.data[1])


def test_spatial_permutation_equivariance(rng):
    h, w, c, d = 3, 3, 4, 5
    fvals = rng.normal(size=(h, w, c)).astype(np.float32)
    wt, b = rng.normal(size=(c, d)).astype(np.float32), rng.normal(size=d).astype(np.float32)
    tok, pos = rng.normal(size=(1, d)).astype(np.float32), rng.normal(size=(1 + h * w, d)).astype(np.float32)
    perm = rng.permutation(h * w)
    base = assemble_sequence(project_and_flatten(fvals, wt, b), tok, pos).data
    permuted_f = fvals.reshape(h * w, c)[perm].reshape(h, w, c)
    permuted_pos = np.vstack([pos[:1], pos[1:][perm]])
    out = assemble_sequence(project_and_flatten(permuted_f, wt, b), tok, permuted_pos).data
    np.testing.assert_array_equal(out[0], base[0])
    np.testing.assert_array_equal(out[1:], base[1:][perm])


def test_init_shapes_and_scales():
    p = init_embedding_params(24, 16, 4, np.random.default_rng(0))
    assert p["embed.proj.w"].shape == (24, 16)
    assert p["embed.pos_enc"].shape == (5, 16) and p["embed.pos_dec"].shape == (5, 16)
    assert p["embed.token_enc"].shape == (1, 16)
    assert not np.any(p["embed.proj.b"].data)
    assert np.all(np.abs(p["embed.pos_enc"].data) <= 0.04 + 1e-7)
    assert all(t.requires_grad for t in p.values())


def test_trunc_normal_bounds():
    x = trunc_normal(np.random.default_rng(0), (200, 50), std=0.02)
    assert np.all(np.abs(x) <= 0.04)
    assert abs(x.std() - 0.02 * 0.88) < 0.002  # truncation at 2 sigma shrinks std to ~0.88
