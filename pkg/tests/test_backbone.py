import numpy as np
import pytest

from fsra import autodiff as ad
from fsra.autodiff import Tensor, grad_check
from fsra.backbone import BackboneConfig, TokenSequence, VitBackbone, patchify, unpatchify
from fsra.trainer import init_params


def tiny_config(**overrides):
    base = dict(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                mlp_ratio=2.0, dropout=0.0)
    base.update(overrides)
    return BackboneConfig(**base)


def make_backbone(cfg, seed=0, dtype=np.float32):
    bb = VitBackbone(cfg, dtype=dtype)
    bb.init(np.random.default_rng(seed))
    return bb


class TestConfig:
    def test_patch_divisibility_enforced(self):
        with pytest.raises(ValueError):
            BackboneConfig(image_size=100, patch_size=16)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            BackboneConfig(embed_dim=65, heads=4)

    def test_patch_counts(self):
        assert BackboneConfig(image_size=256, patch_size=16).num_patches == 256
        assert BackboneConfig(image_size=224, patch_size=16).num_patches == 196
        assert BackboneConfig().num_patches == 64  # toy profile


class TestPatchify:
    def test_shapes_256(self):
        img = Tensor(np.zeros((1, 256, 256, 3), dtype=np.float32))
        out = patchify(img, 16)
        assert out.shape == (1, 256, 16 * 16 * 3)

    def test_shapes_224(self):
        img = Tensor(np.zeros((2, 224, 224, 3), dtype=np.float32))
        assert patchify(img, 16).shape == (2, 196, 768)

    def test_roundtrip_is_exact(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 16, 16, 3)).astype(np.float32)
        patches = patchify(Tensor(img), 4)
        back = unpatchify(patches.data, 4, 16, 16)
        np.testing.assert_array_equal(back, img)

    def test_row_major_order_and_channel_last(self):
        # mark pixel (row 0, col 4) so it lands in patch 1, element 0
        img = np.zeros((1, 8, 8, 3), dtype=np.float32)
        img[0, 0, 4, 0] = 1.0
        patches = patchify(Tensor(img), 4)
        assert patches.data[0, 1, 0] == 1.0
        assert patches.data[0, 0].sum() == 0.0

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            patchify(Tensor(np.zeros((1, 10, 10, 3))), 4)


class TestEmbed:
    def test_zero_weights_give_positions_only(self):
        cfg = tiny_config()
        bb = VitBackbone(cfg)  # all zeros before init
        pos = np.random.default_rng(1).standard_normal(
            (cfg.num_patches + 1, cfg.embed_dim)).astype(np.float32)
        bb.params["backbone.pos_embed"].data = pos
        img = Tensor(np.random.default_rng(2).random((2, 8, 8, 3)).astype(np.float32))
        seq = bb.embed(patchify(img, cfg.patch_size))
        np.testing.assert_allclose(seq.tokens.data, np.broadcast_to(pos, (2, 5, 8)),
                                   rtol=1e-6)

    def test_output_shape(self):
        cfg = tiny_config()
        bb = make_backbone(cfg)
        img = Tensor(np.zeros((3, 8, 8, 3), dtype=np.float32))
        seq = bb.embed(patchify(img, cfg.patch_size))
        assert seq.tokens.shape == (3, cfg.num_patches + 1, cfg.embed_dim)

    def test_position_sensitivity(self):
        cfg = tiny_config()
        bb = make_backbone(cfg, seed=3)
        img = Tensor(np.random.default_rng(4).random((1, 8, 8, 3)).astype(np.float32))
        first = bb.embed(patchify(img, 4)).tokens.data.copy()
        bb.params["backbone.pos_embed"].data = bb.params["backbone.pos_embed"].data + 0.5
        second = bb.embed(patchify(img, 4)).tokens.data
        assert not np.allclose(first, second)


class TestForward:
    def test_depth_zero_is_identity(self):
        cfg = tiny_config(depth=0)
        bb = make_backbone(cfg)
        img = Tensor(np.random.default_rng(5).random((2, 8, 8, 3)).astype(np.float32))
        seq = bb.embed(patchify(img, 4))
        f, patch_feats = bb.forward(seq)
        np.testing.assert_array_equal(f.data, seq.tokens.data[:, 0, :])
        np.testing.assert_array_equal(patch_feats.data, seq.tokens.data[:, 1:, :])

    def test_output_shapes(self):
        cfg = tiny_config(depth=2)
        bb = make_backbone(cfg, seed=6)
        img = Tensor(np.zeros((4, 8, 8, 3), dtype=np.float32))
        f, patch_feats = bb.features(img)
        assert f.shape == (4, cfg.embed_dim)
        assert patch_feats.shape == (4, cfg.num_patches, cfg.embed_dim)

    def test_attention_probs_sum_to_one(self):
        cfg = tiny_config(depth=2)
        bb = make_backbone(cfg, seed=7)
        img = Tensor(np.random.default_rng(8).random((2, 8, 8, 3)).astype(np.float32))
        collected = []
        bb.features(img, collect_attn=collected)
        assert len(collected) == 2
        for probs in collected:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_eval_forward_deterministic(self):
        cfg = tiny_config(dropout=0.3)
        bb = make_backbone(cfg, seed=9)
        img = Tensor(np.random.default_rng(10).random((2, 8, 8, 3)).astype(np.float32))
        a, _ = bb.features(img)
        b, _ = bb.features(img)
        np.testing.assert_array_equal(a.data, b.data)

    def test_patch_permutation_equivariance_of_global_feature(self):
        cfg = tiny_config(depth=2)
        bb = make_backbone(cfg, seed=11, dtype=np.float64)
        rng = np.random.default_rng(12)
        img = Tensor(rng.random((1, 8, 8, 3)))
        patches = patchify(img, 4)
        f_base, _ = bb.forward(bb.embed(patches))

        perm = rng.permutation(cfg.num_patches)
        permuted = Tensor(patches.data[:, perm, :])
        pos = bb.params["backbone.pos_embed"]
        orig = pos.data.copy()
        pos.data = np.concatenate([orig[:1], orig[1:][perm]], axis=0)
        f_perm, _ = bb.forward(bb.embed(permuted))
        pos.data = orig
        np.testing.assert_allclose(f_perm.data, f_base.data, atol=1e-5)

    def test_full_backbone_gradient_check(self):
        cfg = tiny_config()
        bb = make_backbone(cfg, seed=13, dtype=np.float64)
        rng = np.random.default_rng(14)
        img = Tensor(rng.random((1, 8, 8, 3)), requires_grad=True)
        w = rng.standard_normal(cfg.embed_dim)

        def f(x):
            feat, _ = bb.features(x)
            return ad.sum(ad.mul(feat, Tensor(w)))

        res = grad_check(f, img, tol=1e-3)
        assert res.passed, res

    def test_training_forward_without_rng_rejected(self):
        cfg = tiny_config(dropout=0.2)
        bb = make_backbone(cfg)
        img = Tensor(np.zeros((1, 8, 8, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            bb.features(img, training=True)
