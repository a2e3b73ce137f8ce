"""Prior encoders, routing, and the probabilistic prior sampler."""

import numpy as np
import pytest

from uniscale import autodiff as ad
from uniscale import geometry as geo
from uniscale import priors as pr
from uniscale.model import ParamStore


class TestSampler:
    def test_non_metric_never_supervises_scale(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            cfg = pr.sample_prior_config(rng, batch_is_metric=False)
            assert not cfg.supervise_scale

    def test_types_require_injection(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            cfg = pr.sample_prior_config(rng, batch_is_metric=True)
            if not cfg.inject_any:
                assert not cfg.use_pose and not cfg.use_intrinsics

    def test_reproducible_with_fixed_seed(self):
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        seq_a = [pr.sample_prior_config(rng_a, True) for _ in range(100)]
        seq_b = [pr.sample_prior_config(rng_b, True) for _ in range(100)]
        assert seq_a == seq_b

    def test_empirical_injection_frequency(self):
        rng = np.random.default_rng(123)
        n = 100_000
        hits = sum(pr.sample_prior_config(rng, True).inject_any
                   for _ in range(n))
        # 3-sigma band around 0.5 for 100k Bernoulli draws
        assert abs(hits / n - 0.5) < 0.006

    def test_conditional_type_frequency(self):
        rng = np.random.default_rng(7)
        injected = pose = 0
        for _ in range(50_000):
            cfg = pr.sample_prior_config(rng, True)
            if cfg.inject_any:
                injected += 1
                pose += cfg.use_pose
        assert abs(pose / injected - 0.9) < 0.01

    def test_scale_supervision_frequency(self):
        rng = np.random.default_rng(8)
        n = 50_000
        hits = sum(pr.sample_prior_config(rng, True).supervise_scale
                   for _ in range(n))
        assert abs(hits / n - 0.95) < 0.01


class TestPoseEncoder:
    def _encoder(self, rotation_param="6d"):
        store = ParamStore(seed=0)
        return pr.PoseEncoder(store, embed_dim=8,
                              rotation_param=rotation_param), store

    def test_embedding_shape_is_one_by_c(self):
        enc, _ = self._encoder()
        out = enc.encode(geo.Pose.identity(), 1.0)
        assert out.shape == (1, 8)

    def test_zero_mlp_gives_bias_embedding(self):
        enc, store = self._encoder()
        for name in ("pose_encoder.w1", "pose_encoder.w2"):
            store.params[name].data[:] = 0.0
        store.params["pose_encoder.b2"].data[:] = 3.5
        out = enc.encode(geo.Pose.identity(), 1.0)
        assert np.allclose(out.data, 3.5)

    def test_translation_scale_normalization(self, rng):
        enc, _ = self._encoder()
        r = geo.random_rotation(rng)
        t = rng.normal(size=3)
        a = enc.encode(geo.Pose(r, t), 2.0)
        b = enc.encode(geo.Pose(r, 5.0 * t), 5.0 * 2.0)
        assert np.array_equal(a.data, b.data)

    def test_rotation_representation_sign_invariance(self, rng):
        # q and -q describe the same rotation; the matrix input erases the sign
        enc, _ = self._encoder(rotation_param="quat")
        r = geo.random_rotation(rng)
        q = geo.matrix_to_quat(r)
        a = enc.pose_vector(geo.Pose(geo.quat_to_matrix(q), np.zeros(3)), 1.0)
        b = enc.pose_vector(geo.Pose(geo.quat_to_matrix(-q), np.zeros(3)), 1.0)
        assert np.allclose(a, b, atol=1e-12)

    def test_input_dims_by_representation(self):
        enc6, _ = self._encoder("6d")
        encq, _ = self._encoder("quat")
        assert enc6.in_dim == 9
        assert encq.in_dim == 7
        assert enc6.pose_vector(geo.Pose.identity(), 1.0).shape == (9,)
        assert encq.pose_vector(geo.Pose.identity(), 1.0).shape == (7,)

    def test_nonpositive_scale_norm_rejected(self):
        enc, _ = self._encoder()
        with pytest.raises(ValueError):
            enc.pose_vector(geo.Pose.identity(), 0.0)

    def test_unknown_representation_rejected(self):
        store = ParamStore(seed=0)
        with pytest.raises(ValueError):
            pr.PoseEncoder(store, 8, rotation_param="euler")


class TestRayEncoder:
    def _encoder(self):
        store = ParamStore(seed=0)
        return pr.RayEncoder(store, embed_dim=8, image_size=16, patch_size=8)

    def test_embedding_shape_matches_patch_grid(self):
        enc = self._encoder()
        k = geo.K_from_fov([1.0, 1.0], 16, 16)
        assert enc.encode(k).shape == (4, 8)

    def test_identical_intrinsics_identical_embeddings(self):
        enc = self._encoder()
        k = geo.K_from_fov([1.0, 1.0], 16, 16)
        a = enc.encode(k)
        b = enc.encode(geo.Intrinsics(fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy,
                                      width=16, height=16))
        assert np.array_equal(a.data, b.data)

    def test_doubled_focal_changes_embeddings(self):
        enc = self._encoder()
        k = geo.K_from_fov([1.0, 1.0], 16, 16)
        k2 = geo.Intrinsics(fx=2 * k.fx, fy=2 * k.fy, cx=k.cx, cy=k.cy,
                            width=16, height=16)
        assert not np.allclose(enc.encode(k).data, enc.encode(k2).data)

    def test_extent_mismatch_rejected(self):
        enc = self._encoder()
        with pytest.raises(geo.GeometryError):
            enc.encode(geo.K_from_fov([1.0, 1.0], 32, 32))


class TestRouting:
    def _streams(self, rng):
        return {role: [ad.Tensor(rng.normal(size=(n, 4))) for _ in range(2)]
                for role, n in (("camera", 1), ("class", 1),
                                ("register", 3), ("patch", 5))}

    def test_empty_bundle_leaves_streams_untouched(self, rng):
        streams = self._streams(rng)
        out = pr.route(streams)
        for role in streams:
            for a, b in zip(streams[role], out[role]):
                assert a is b

    def test_pose_only_leaves_patches_untouched(self, rng):
        streams = self._streams(rng)
        emb = [ad.Tensor(rng.normal(size=(1, 4))) for _ in range(2)]
        out = pr.route(streams, pose_embeddings=emb)
        for a, b in zip(streams["patch"], out["patch"]):
            assert a is b
        for tok, e, new in zip(streams["camera"], emb, out["camera"]):
            assert np.array_equal(new.data, tok.data + e.data)

    def test_registers_never_receive_priors(self, rng):
        streams = self._streams(rng)
        out = pr.route(streams,
                       pose_embeddings=[ad.Tensor(np.ones((1, 4)))] * 2,
                       ray_embeddings=[ad.Tensor(np.ones((5, 4)))] * 2)
        for a, b in zip(streams["register"], out["register"]):
            assert a is b

    def test_zero_embeddings_match_no_prior_path(self, rng):
        streams = self._streams(rng)
        zero_pose = [ad.Tensor(np.zeros((1, 4)))] * 2
        zero_ray = [ad.Tensor(np.zeros((5, 4)))] * 2
        out = pr.route(streams, pose_embeddings=zero_pose,
                       ray_embeddings=zero_ray)
        for role in streams:
            for a, b in zip(streams[role], out[role]):
                assert np.array_equal(a.data, b.data)

    def test_class_target_for_camera_token_ablation(self, rng):
        streams = self._streams(rng)
        emb = [ad.Tensor(np.ones((1, 4)))] * 2
        out = pr.route(streams, pose_embeddings=emb, pose_target="class")
        for a, b in zip(streams["camera"], out["camera"]):
            assert a is b
        for tok, new in zip(streams["class"], out["class"]):
            assert np.array_equal(new.data, tok.data + 1.0)

    def test_shapes_preserved(self, rng):
        streams = self._streams(rng)
        out = pr.route(streams,
                       pose_embeddings=[ad.Tensor(np.ones((1, 4)))] * 2,
                       ray_embeddings=[ad.Tensor(np.ones((5, 4)))] * 2)
        for role in streams:
            for a, b in zip(streams[role], out[role]):
                assert a.shape == b.shape

    def test_invalid_destination_rejected(self, rng):
        with pytest.raises(pr.RoutingError):
            pr.route(self._streams(rng), destination="dense-head")

    def test_invalid_pose_target_rejected(self, rng):
        with pytest.raises(pr.RoutingError):
            pr.route(self._streams(rng), pose_target="register")


class TestBundle:
    def test_flags_follow_contents(self):
        b = pr.PriorBundle(poses=[geo.Pose.identity()])
        assert b.has_pose and not b.has_intrinsics
        assert not pr.PriorBundle.empty().has_pose

    def test_scale_norm_prefers_ground_truth(self):
        b = pr.PriorBundle(poses=[geo.Pose(np.eye(3), [3.0, 0, 0])])
        assert pr.prior_scale_norm(b, s_gt=2.5) == 2.5

    def test_scale_norm_falls_back_to_mean_center_norm(self):
        b = pr.PriorBundle(poses=[geo.Pose(np.eye(3), [3.0, 0.0, 0.0]),
                                  geo.Pose(np.eye(3), [0.0, 5.0, 0.0])])
        assert pr.prior_scale_norm(b) == pytest.approx(4.0)

    def test_scale_norm_degenerate_fallback(self):
        assert pr.prior_scale_norm(pr.PriorBundle.empty()) == 1.0
        b = pr.PriorBundle(poses=[geo.Pose.identity()])
        assert pr.prior_scale_norm(b) == 1.0
