"""Scale targets, the four losses, schedules, train steps, resumable state."""

import numpy as np
import pytest

from uniscale import autodiff as ad
from uniscale import geometry as geo
from uniscale import priors as pr
from uniscale import supervision as sv
from uniscale.model import Model, ModelConfig
from uniscale.scenes import SceneSpec, generate_scene

from conftest import MICRO_CONFIG


def single_pixel_scene(depth_value=3.0):
    k = geo.Intrinsics(fx=10.0, fy=10.0, cx=2.5, cy=2.5, width=5, height=5)
    depth = np.zeros((5, 5))
    depth[2, 2] = depth_value
    return [depth], [k], [geo.Pose.identity()]


class TestScaleTarget:
    def test_single_pixel_at_principal_point(self):
        depths, ks, poses = single_pixel_scene(3.0)
        target = sv.compute_scale_target(depths, ks, poses)
        assert target.s_gt == pytest.approx(3.0)
        assert target.depths[0][2, 2] == pytest.approx(1.0)

    def test_unit_mean_norm_invariant(self, small_scene):
        s = small_scene
        target = sv.compute_scale_target(s.depths, [s.intrinsics] * 3, s.poses)
        norms = np.concatenate([
            np.linalg.norm(p[m], axis=-1)
            for p, m in zip(target.points, target.masks)])
        assert abs(norms.mean() - 1.0) < 1e-6

    def test_homogeneity(self, small_scene):
        s = small_scene
        base = sv.compute_scale_target(s.depths, [s.intrinsics] * 3, s.poses)
        for c in (0.1, 3.0, 100.0):
            scaled_depths = [d * c for d in s.depths]
            scaled_poses = [geo.Pose(p.rotation, p.translation * c)
                            for p in s.poses]
            scaled = sv.compute_scale_target(scaled_depths,
                                             [s.intrinsics] * 3, scaled_poses)
            assert abs(scaled.s_gt / (c * base.s_gt) - 1.0) < 1e-9
            for a, b in zip(scaled.depths, base.depths):
                assert np.allclose(a, b, rtol=1e-9)

    def test_outlier_clamped_to_cap(self):
        k = geo.Intrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)
        depth = np.full((8, 8), 2.0)
        depth[0, 0] = 2.0e6
        target = sv.compute_scale_target([depth], [k], [geo.Pose.identity()],
                                         cap_factor=50.0)
        # brute-force oracle with the clamp applied
        cap = 50.0 * np.median(depth)
        clamped = np.minimum(depth, cap)
        pts = geo.unproject(clamped, k)
        expected = np.linalg.norm(pts.reshape(-1, 3), axis=-1).mean()
        assert target.s_gt == pytest.approx(expected, rel=1e-12)

    def test_invalid_pixels_excluded(self):
        depths, ks, poses = single_pixel_scene(2.0)
        target = sv.compute_scale_target(depths, ks, poses)
        assert target.masks[0].sum() == 1
        assert target.depths[0][0, 0] == 0.0

    def test_all_invalid_rejected(self):
        k = geo.Intrinsics(fx=10.0, fy=10.0, cx=2.5, cy=2.5, width=5, height=5)
        with pytest.raises(sv.SupervisionError):
            sv.compute_scale_target([np.zeros((5, 5))], [k],
                                    [geo.Pose.identity()])

    def test_empty_scene_rejected(self):
        with pytest.raises(sv.SupervisionError):
            sv.compute_scale_target([], [], [])

    def test_camera_targets_normalized(self, small_scene):
        s = small_scene
        target = sv.compute_scale_target(s.depths, [s.intrinsics] * 3, s.poses)
        for cam, pose in zip(target.cameras, s.poses):
            assert np.allclose(cam.t, pose.translation / target.s_gt)
            assert cam.q[0] >= 0


class TestCameraLoss:
    def _pair(self, fov=1.0):
        cam = geo.CameraParam([1.0, 0, 0, 0], np.zeros(3), [fov, fov])
        pred = lambda: type("P", (), {
            "q": ad.Tensor([[1.0, 0, 0, 0]]),
            "t": ad.Tensor([[0.0, 0.0, 0.0]]),
            "f": ad.Tensor([[fov, fov]])})()
        return pred(), cam

    def test_exact_match_is_zero(self):
        pred, cam = self._pair()
        assert sv.loss_camera([pred], [cam]).item() == 0.0

    def test_small_offset_quadratic(self):
        pred, cam = self._pair()
        eps = 0.05
        pred.t = ad.Tensor([[eps, 0.0, 0.0]])
        expected = 0.5 * eps**2 / 9.0  # one of nine components in the mean
        assert sv.loss_camera([pred], [cam], delta=0.1).item() == \
            pytest.approx(expected)

    def test_large_offset_linear(self):
        pred, cam = self._pair()
        delta = 0.1
        off = 10 * delta
        pred.t = ad.Tensor([[off, 0.0, 0.0]])
        expected = delta * (off - 0.5 * delta) / 9.0
        assert sv.loss_camera([pred], [cam], delta=delta).item() == \
            pytest.approx(expected)

    def test_quaternion_sign_flip_equivalent(self):
        rng = np.random.default_rng(0)
        r = geo.random_rotation(rng)
        q = geo.matrix_to_quat(r)
        cam = geo.CameraParam(q, np.zeros(3), [1.0, 1.0])
        pred = type("P", (), {"q": ad.Tensor(-q.reshape(1, 4)),
                              "t": ad.Tensor(np.zeros((1, 3))),
                              "f": ad.Tensor([[1.0, 1.0]])})()
        assert sv.loss_camera([pred], [cam]).item() == pytest.approx(0.0,
                                                                     abs=1e-12)

    def test_frame_count_mismatch_rejected(self):
        pred, cam = self._pair()
        with pytest.raises(sv.SupervisionError):
            sv.loss_camera([pred], [cam, cam])


class TestDepthLoss:
    def test_perfect_prediction_unit_conf_is_zero(self, rng):
        gt = rng.uniform(1.0, 3.0, size=(6, 6))
        mask = np.ones((6, 6), dtype=bool)
        loss = sv.loss_depth(ad.Tensor(gt), ad.Tensor(np.ones((6, 6))), gt,
                             mask)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_unit_conf_reduces_to_mae_plus_gradient(self, rng):
        gt = rng.uniform(1.0, 3.0, size=(4, 4))
        pred = gt + 0.5  # constant offset: gradient term vanishes
        mask = np.ones((4, 4), dtype=bool)
        loss = sv.loss_depth(ad.Tensor(pred), ad.Tensor(np.ones((4, 4))), gt,
                             mask)
        assert loss.item() == pytest.approx(0.5)

    def test_optimal_confidence_is_alpha_over_residual(self):
        # 1-d numeric minimization oracle for conf * r - alpha * log conf
        r, alpha = 0.37, 0.2
        cs = np.linspace(0.05, 5.0, 20_000)
        vals = cs * r - alpha * np.log(cs)
        assert cs[np.argmin(vals)] == pytest.approx(alpha / r, rel=1e-2)
        # the loss gradient wrt conf vanishes exactly at alpha / r
        conf = ad.Tensor(np.full((1, 1), alpha / r), requires_grad=True)
        pred = ad.Tensor(np.full((1, 1), 1.0 + r))
        loss = sv.loss_depth(pred, conf, np.ones((1, 1)),
                             np.ones((1, 1), dtype=bool), alpha=alpha)
        ad.backward(loss)
        assert conf.grad[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_gradient_term_penalizes_edges(self):
        gt = np.ones((4, 4))
        pred = np.ones((4, 4))
        pred[:, 2:] += 1.0  # spurious edge
        mask = np.ones((4, 4), dtype=bool)
        edge = sv._gradient_term(ad.Tensor(pred[..., None]), gt[..., None],
                                 mask)
        flat = sv._gradient_term(ad.Tensor(np.full((4, 4, 1), 2.0)),
                                 gt[..., None], mask)
        assert flat.item() == pytest.approx(0.0, abs=1e-15)
        assert edge.item() > 0.0

    def test_pair_mask_requires_both_pixels_valid(self):
        gt = np.ones((2, 2))
        mask = np.array([[True, False], [True, True]])
        pred = np.array([[5.0, 99.0], [1.0, 1.0]])  # invalid pixel arbitrary
        loss = sv.loss_depth(ad.Tensor(pred), ad.Tensor(np.ones((2, 2))), gt,
                             mask)
        # valid pairs: (0,0)-(1,0) vertical, (1,0)-(1,1) horizontal
        expected_data = 4.0 / 3.0          # conf * |resid| over 3 valid pixels
        expected_grad = 4.0 / 1.0 + 0.0    # one vertical pair + one horizontal
        assert loss.item() == pytest.approx(expected_data + expected_grad)

    def test_empty_mask_rejected(self):
        with pytest.raises(sv.SupervisionError):
            sv.loss_depth(ad.Tensor(np.ones((2, 2))),
                          ad.Tensor(np.ones((2, 2))), np.ones((2, 2)),
                          np.zeros((2, 2), dtype=bool))


class TestPmapLoss:
    def test_perfect_prediction_is_zero(self, rng):
        gt = rng.normal(size=(3, 3, 3))
        loss = sv.loss_pmap(ad.Tensor(gt), ad.Tensor(np.ones((3, 3))), gt,
                            np.ones((3, 3), dtype=bool))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_global_translation_leaves_gradient_term_unchanged(self, rng):
        gt = rng.normal(size=(3, 3, 3))
        pred = rng.normal(size=(3, 3, 3))
        mask = np.ones((3, 3), dtype=bool)
        v = np.array([1.0, -2.0, 0.5])
        base = sv._gradient_term(ad.Tensor(pred), gt, mask)
        shifted = sv._gradient_term(ad.Tensor(pred + v), gt + v, mask)
        assert shifted.item() == pytest.approx(base.item(), abs=1e-12)

    def test_matches_brute_force_on_3x3(self, rng):
        gt = rng.normal(size=(3, 3, 3))
        pred = rng.normal(size=(3, 3, 3))
        conf = np.abs(rng.normal(1.0, 0.2, size=(3, 3))) + 0.5
        mask = rng.random((3, 3)) > 0.3
        if mask.sum() == 0:
            mask[1, 1] = True
        alpha = 0.2
        # scalarized direct summation
        data = 0.0
        for i in range(3):
            for j in range(3):
                if mask[i, j]:
                    r = np.abs(pred[i, j] - gt[i, j]).sum()
                    data += conf[i, j] * r - alpha * np.log(conf[i, j])
        data /= mask.sum()
        grad = 0.0
        for axis in (0, 1):
            pd = np.diff(pred, axis=axis).sum(axis=-1, where=None)
            acc, cnt = 0.0, 0
            for i in range(3 - (axis == 0)):
                for j in range(3 - (axis == 1)):
                    i2, j2 = i + (axis == 0), j + (axis == 1)
                    if mask[i, j] and mask[i2, j2]:
                        diff = (pred[i2, j2] - pred[i, j]) - (gt[i2, j2] - gt[i, j])
                        acc += np.abs(diff).sum()
                        cnt += 1
            if cnt:
                grad += acc / cnt
        expected = data + grad
        loss = sv.loss_pmap(ad.Tensor(pred), ad.Tensor(conf), gt, mask,
                            alpha=alpha)
        assert loss.item() == pytest.approx(expected, rel=1e-12)


class TestScaleLoss:
    def test_exact_match_zero(self):
        s = ad.Tensor(2.5)
        assert sv.loss_scale(s, 2.5, True).item() == pytest.approx(0.0)

    def test_factor_e_gives_one(self):
        s = ad.Tensor(np.e * 2.0)
        assert sv.loss_scale(s, 2.0, True).item() == pytest.approx(1.0)

    def test_common_rescale_invariance(self):
        for a in (0.1, 1.0, 7.3):
            la = sv.loss_scale(ad.Tensor(a * 3.0), a * 2.0, True).item()
            assert la == pytest.approx(sv.loss_scale(ad.Tensor(3.0), 2.0,
                                                     True).item(), rel=1e-9)

    def test_masked_loss_is_zero_with_zero_gradient(self):
        s = ad.Tensor(5.0, requires_grad=True)
        loss = sv.loss_scale(s, None, False)
        assert loss.item() == 0.0
        assert not loss.requires_grad
        assert s.grad is None

    def test_nonpositive_scales_rejected(self):
        with pytest.raises(sv.SupervisionError):
            sv.loss_scale(ad.Tensor(1.0), -1.0, True)
        with pytest.raises(sv.SupervisionError):
            sv.loss_scale(ad.Tensor(-1.0), 1.0, True)


class TestTotalLoss:
    def _setup(self):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        sample = generate_scene(SceneSpec(seed=3, n_frames=2, image_size=16))
        target = sv.compute_scale_target(sample.depths,
                                         [sample.intrinsics] * 2, sample.poses)
        return model, sample, target

    def test_components_sum_and_finiteness(self):
        model, sample, target = self._setup()
        pred = model.forward(sample.images)
        total, report = sv.total_loss(pred, target, supervise_scale=True)
        assert report.finite()
        assert report.total == pytest.approx(report.camera + report.depth
                                             + report.pmap + report.scale)
        assert report.camera >= 0
        assert report.scale >= 0

    def test_loss_weights_scale_components(self):
        model, sample, target = self._setup()
        pred = model.forward(sample.images)
        _, base = sv.total_loss(pred, target, True)
        pred2 = model.forward(sample.images)
        total, rep = sv.total_loss(pred2, target, True,
                                   weights=(2.0, 1.0, 1.0, 1.0))
        assert rep.camera == pytest.approx(base.camera)
        assert rep.total == pytest.approx(base.total + base.camera)

    def test_scale_mask_recorded(self):
        model, sample, target = self._setup()
        pred = model.forward(sample.images)
        _, rep = sv.total_loss(pred, target, supervise_scale=False)
        assert rep.scale == 0.0
        assert not rep.scale_mask


class TestSchedule:
    def test_position_zero_uses_floor(self):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        cfg = sv.TrainConfig(warmup_steps=100)
        lrs, lr_fast, lr_slow = sv.lr_schedule(cfg, model, 0)
        assert lr_fast == pytest.approx(1e-8)
        assert lr_slow == pytest.approx(1e-8)

    def test_groups_reach_distinct_peaks(self):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        cfg = sv.TrainConfig(warmup_steps=10, peak_lr_fast=5e-5,
                             peak_lr_slow=1e-6)
        lrs, lr_fast, lr_slow = sv.lr_schedule(cfg, model, 500)
        assert lr_fast == 5e-5
        assert lr_slow == 1e-6
        assert lrs["scale_head.mlp_w1"] == 5e-5
        assert lrs["pose_encoder.w1"] == 5e-5
        assert lrs["embed.w"] == 1e-6

    def test_cosine_decay_reaches_zero(self):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        cfg = sv.TrainConfig(steps=100, warmup_steps=10, lr_decay="cosine")
        _, lr_fast, _ = sv.lr_schedule(cfg, model, 100)
        assert lr_fast == pytest.approx(0.0, abs=1e-20)
        _, mid, _ = sv.lr_schedule(cfg, model, 55)
        assert 0 < mid < cfg.peak_lr_fast

    def test_unknown_decay_rejected(self):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        cfg = sv.TrainConfig(lr_decay="polynomial")
        with pytest.raises(sv.SupervisionError):
            sv.lr_schedule(cfg, model, 200)

    def test_unknown_train_config_keys_rejected(self):
        with pytest.raises(sv.SupervisionError):
            sv.TrainConfig.from_dict({"steps": 10, "momentum": 0.9})


class TestTrainStep:
    def _setup(self, metric=True, seed=3):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        sample = generate_scene(SceneSpec(seed=seed, n_frames=2,
                                          image_size=16, metric=metric))
        target = sv.compute_scale_target(sample.depths,
                                         [sample.intrinsics] * 2, sample.poses)
        state = ad.init_adamw_state(model.params())
        return model, sample, target, state

    def test_loss_decreases_over_50_repeated_steps(self):
        model, sample, target, state = self._setup()
        cfg = sv.TrainConfig(steps=50, warmup_steps=5, peak_lr_fast=3e-3,
                             peak_lr_slow=1e-3, weight_decay=0.0)
        rng = np.random.default_rng(0)
        force = pr.PriorConfig(inject_any=False, use_pose=False,
                               use_intrinsics=False, supervise_scale=True)
        first = None
        last = None
        for step in range(50):
            report, _, applied = sv.train_step(model, sample, target, rng,
                                               state, step, cfg,
                                               force_priors=force)
            assert applied
            if first is None:
                first = report.total
            last = report.total
        assert last < first

    def test_non_metric_scale_head_grads_are_exactly_zero(self):
        model, sample, target, state = self._setup(metric=False, seed=5)
        # the masked scale loss alone contributes nothing to the scale head
        prediction = model.forward(sample.images)
        loss = sv.loss_scale(prediction.scale, None, supervise=False)
        model.store.zero_grads()
        if loss.requires_grad:
            ad.backward(loss)
        for name in model.fast_param_names():
            g = model.params()[name].grad
            assert g is None or np.array_equal(g, np.zeros_like(g))

    def test_sampled_priors_recorded_in_report(self):
        model, sample, target, state = self._setup()
        cfg = sv.TrainConfig()
        rng = np.random.default_rng(1)
        report, prior_cfg, applied = sv.train_step(model, sample, target, rng,
                                                   state, 0, cfg)
        assert isinstance(prior_cfg, pr.PriorConfig)
        assert report.finite()


class TestTrainLoopAndState:
    def _samples(self):
        return [generate_scene(SceneSpec(seed=s, n_frames=2, image_size=16))
                for s in (3, 4)]

    def _cfg(self, steps=6):
        return sv.TrainConfig(steps=steps, warmup_steps=2, peak_lr_fast=1e-3,
                              peak_lr_slow=3e-4, seed=0, checkpoint_every=3)

    def test_log_is_json_lines(self, tmp_path):
        import json
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        sv.train(model, self._samples(), self._cfg(), tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 6
        for line in lines:
            entry = json.loads(line)
            assert {"step", "scene", "loss", "priors", "lr_fast",
                    "lr_slow"} <= set(entry)

    def test_deterministic_given_seed(self, tmp_path):
        samples = self._samples()
        runs = []
        for d in ("a", "b"):
            model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
            sv.train(model, samples, self._cfg(), tmp_path / d)
            runs.append({k: p.data.copy()
                         for k, p in model.store.params.items()})
        for k in runs[0]:
            assert np.array_equal(runs[0][k], runs[1][k])

    def test_resume_is_bit_exact(self, tmp_path):
        samples = self._samples()
        cfg = self._cfg(steps=6)

        straight = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        sv.train(straight, samples, cfg, tmp_path / "straight")

        half = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        cfg_half = sv.TrainConfig(**{**cfg.to_dict(), "steps": 3})
        sv.train(half, samples, cfg_half, tmp_path / "resumed")
        model, opt_state, step, rng = sv.load_train_state(
            tmp_path / "resumed" / "train_state.usck", Model)
        assert step == 3
        sv.train(model, samples, cfg, tmp_path / "resumed",
                 resume_state=(opt_state, step, rng))

        for name, p in straight.store.params.items():
            assert np.array_equal(p.data, model.store.params[name].data)

    def test_checkpoints_written_on_schedule(self, tmp_path):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        sv.train(model, self._samples(), self._cfg(), tmp_path)
        assert (tmp_path / "checkpoint.usck").exists()
        assert (tmp_path / "train_state.usck").exists()

    def test_train_state_round_trip(self, tmp_path):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        state = ad.init_adamw_state(model.params())
        state["step"] = 7
        rng = np.random.default_rng(99)
        rng.random(13)  # advance
        path = tmp_path / "state.usck"
        sv.save_train_state(path, model, state, 7, rng)
        loaded_model, loaded_state, step, loaded_rng = sv.load_train_state(
            path, Model)
        assert step == 7
        assert loaded_state["step"] == 7
        assert loaded_rng.random() == rng.random()
        for name, p in model.store.params.items():
            assert np.array_equal(loaded_model.store.params[name].data, p.data)

    def test_plain_checkpoint_refused_as_train_state(self, tmp_path):
        model = Model(ModelConfig(seed=0, **MICRO_CONFIG))
        model.save(tmp_path / "plain.usck")
        with pytest.raises(ad.CheckpointError):
            sv.load_train_state(tmp_path / "plain.usck", Model)
