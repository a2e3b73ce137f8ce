"""Scale-target normalization, the four training losses, and the train loop.

Total loss = camera + depth + pmap + scale. Depth and point-map losses use
the aleatoric confidence weighting (conf * |residual| - alpha * log conf)
plus a forward-difference gradient term; the camera loss is a Huber over the
(q, t, fov) parameter vector; the scale loss is the absolute log-ratio of
predicted and target scene scale, masked to zero on non-metric batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import priors as pr


class SupervisionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scale target ("scale value calculation")


@dataclass
class ScaleTarget:
    """Ground-truth scene scale and the matching normalized supervision."""

    s_gt: float
    depths: list       # per-frame H x W normalized z-depth (0 = invalid)
    points: list       # per-frame H x W x 3 normalized frame-0 world points
    masks: list        # per-frame bool validity
    cameras: list      # per-frame geo.CameraParam targets (normalized t)


def compute_scale_target(depths, intrinsics, poses, cap_factor=50.0):
    """Normalize a scene so the mean valid world-point norm equals one.

    Depths are clamped to ``cap_factor`` times the per-scene median valid
    depth before unprojection (outlier guard); the clamped values also define
    the normalized supervision, keeping the unit-mean-norm invariant exact.
    Poses must be frame-0 anchored (frame 0 = identity).
    """
    if not depths:
        raise SupervisionError("empty scene")
    masks = [np.asarray(d) > 0 for d in depths]
    all_valid = np.concatenate([d[m] for d, m in zip(depths, masks)])
    if all_valid.size == 0:
        raise SupervisionError("scene has no valid depth pixels")
    cap = cap_factor * float(np.median(all_valid))
    clamped = [np.where(m, np.minimum(d, cap), 0.0) for d, m in zip(depths, masks)]

    world_points = []
    norms = []
    for d, k, pose, m in zip(clamped, intrinsics, poses, masks):
        pts = geo.transform_points(geo.unproject(d, k), pose)
        world_points.append(pts)
        norms.append(np.linalg.norm(pts[m], axis=-1))
    s_gt = float(np.mean(np.concatenate(norms)))
    if s_gt <= 0:
        raise SupervisionError("degenerate scene scale")

    n_depths = [np.where(m, d / s_gt, 0.0) for d, m in zip(clamped, masks)]
    n_points = [p / s_gt for p in world_points]
    cams = []
    for k, pose in zip(intrinsics, poses):
        cams.append(geo.CameraParam(geo.matrix_to_quat(pose.rotation),
                                    pose.translation / s_gt,
                                    geo.fov_from_K(k)))
    return ScaleTarget(s_gt=s_gt, depths=n_depths, points=n_points,
                       masks=masks, cameras=cams)


# ---------------------------------------------------------------------------
# losses


def loss_camera(preds, targets, delta=0.1):
    """Mean Huber over the 9 camera components of all frames."""
    if len(preds) != len(targets):
        raise SupervisionError("camera loss: frame count mismatch")
    rows = []
    for pred, tgt in zip(preds, targets):
        sign = 1.0 if pred.q.data.reshape(-1)[0] >= 0 else -1.0
        q = pred.q * sign
        diff = ad.concat([q - tgt.q.reshape(1, 4),
                          pred.t - tgt.t.reshape(1, 3),
                          pred.f - tgt.f.reshape(1, 2)])
        rows.append(diff)
    from .model import row_concat
    return ad.tmean(ad.huber(row_concat(rows), delta))


def _masked_mean(term, mask):
    count = float(mask.sum())
    return ad.tsum(ad.mul(term, ad.Tensor(mask.astype(np.float64)))) * (1.0 / count)


def _gradient_term(pred, gt, mask):
    """Mean absolute forward-difference error over pairs of valid pixels."""
    h, w = mask.shape
    total = None
    for axis in (0, 1):
        n = pred.shape[axis]
        pd = ad.slice_axis(pred, axis, 1, n) - ad.slice_axis(pred, axis, 0, n - 1)
        gd = np.diff(gt, axis=axis) if gt.ndim == 2 else np.diff(gt, axis=axis)
        pm = mask.take(range(1, n), axis=axis) & mask.take(range(0, n - 1), axis=axis)
        if pm.sum() == 0:
            continue
        err = ad.absval(pd - gd)
        if err.data.ndim == 3:  # channel-wise maps: sum channels first
            err = ad.tsum(err, axis=2)
        piece = _masked_mean(err, pm)
        total = piece if total is None else total + piece
    return total


def loss_depth(pred_depth, pred_conf, gt_depth, mask, alpha=0.2):
    """Confidence-weighted L1 with -alpha*log(conf) regularizer + gradient term."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise SupervisionError("depth loss: empty valid mask")
    resid = ad.absval(pred_depth - gt_depth)
    weighted = ad.mul(pred_conf, resid) - ad.log(pred_conf) * alpha
    loss = _masked_mean(weighted, mask)
    grad_term = _gradient_term(pred_depth, np.asarray(gt_depth), mask)
    return loss if grad_term is None else loss + grad_term


def loss_pmap(pred_points, pred_conf, gt_points, mask, alpha=0.2):
    """Point-map analogue of loss_depth with per-pixel 3-vector L1 residuals."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise SupervisionError("pmap loss: empty valid mask")
    resid = ad.tsum(ad.absval(pred_points - gt_points), axis=2)  # H x W
    weighted = ad.mul(pred_conf, resid) - ad.log(pred_conf) * alpha
    loss = _masked_mean(weighted, mask)
    grad_term = _gradient_term(pred_points, np.asarray(gt_points), mask)
    return loss if grad_term is None else loss + grad_term


def loss_scale(s_pred, s_gt, supervise):
    """|log S_gt - log S_pred|; exactly zero (and gradient-free) when masked."""
    if not supervise:
        return ad.Tensor(0.0)
    if s_gt is None or s_gt <= 0:
        raise SupervisionError("scale loss: target scale must be positive")
    if float(s_pred.data) <= 0:
        raise SupervisionError("scale loss: predicted scale must be positive")
    return ad.absval(ad.log(s_pred) - float(np.log(s_gt)))


@dataclass
class LossReport:
    camera: float
    depth: float
    pmap: float
    scale: float
    total: float
    scale_mask: bool

    def finite(self):
        return all(np.isfinite(v) for v in (self.camera, self.depth,
                                            self.pmap, self.scale, self.total))


def total_loss(prediction, target: ScaleTarget, supervise_scale,
               huber_delta=0.1, alpha=0.2, weights=(1.0, 1.0, 1.0, 1.0)):
    """Assemble the four components; returns (scalar Tensor, LossReport).

    ``weights`` multiplies (camera, depth, pmap, scale) in the total; the
    reported per-component values stay unweighted.
    """
    l_cam = loss_camera(prediction.cameras, target.cameras, delta=huber_delta)
    l_depth = None
    l_pmap = None
    for dense, d_gt, p_gt, m in zip(prediction.dense, target.depths,
                                    target.points, target.masks):
        ld = loss_depth(dense.depth, dense.depth_conf, d_gt, m, alpha=alpha)
        lp = loss_pmap(dense.points, dense.point_conf, p_gt, m, alpha=alpha)
        l_depth = ld if l_depth is None else l_depth + ld
        l_pmap = lp if l_pmap is None else l_pmap + lp
    n = len(prediction.dense)
    l_depth = l_depth * (1.0 / n)
    l_pmap = l_pmap * (1.0 / n)
    l_scale = loss_scale(prediction.scale, target.s_gt if supervise_scale else None,
                         supervise_scale)
    w_cam, w_depth, w_pmap, w_scale = weights
    total = (l_cam * w_cam + l_depth * w_depth
             + l_pmap * w_pmap + l_scale * w_scale)
    report = LossReport(camera=l_cam.item(), depth=l_depth.item(),
                        pmap=l_pmap.item(), scale=l_scale.item(),
                        total=total.item(), scale_mask=bool(supervise_scale))
    return total, report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 100
    peak_lr_fast: float = 5e-5   # scale head + prior encoders
    peak_lr_slow: float = 1e-6   # everything else
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    huber_delta: float = 0.1
    alpha: float = 0.2
    cap_factor: float = 50.0
    seed: int = 0
    checkpoint_every: int = 500
    p_inject: float = 0.5
    p_type: float = 0.9
    p_scale: float = 0.95
    lr_decay: str = "none"       # "none" or "cosine" (to zero at cfg.steps)
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # camera, depth, pmap, scale

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SupervisionError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)


def lr_schedule(cfg: TrainConfig, model, step):
    """Per-parameter learning rates with linear warmup from 1e-8."""
    fast = set(model.fast_param_names())
    lr_fast = ad.warmup_lr(step, cfg.peak_lr_fast, cfg.warmup_steps)
    lr_slow = ad.warmup_lr(step, cfg.peak_lr_slow, cfg.warmup_steps)
    if cfg.lr_decay == "cosine" and step >= cfg.warmup_steps:
        span = max(cfg.steps - cfg.warmup_steps, 1)
        frac = min((step - cfg.warmup_steps) / span, 1.0)
        decay = 0.5 * (1.0 + np.cos(np.pi * frac))
        lr_fast *= decay
        lr_slow *= decay
    elif cfg.lr_decay not in ("none", "cosine"):
        raise SupervisionError(f"unknown lr_decay: {cfg.lr_decay!r}")
    return {name: (lr_fast if name in fast else lr_slow)
            for name in model.params()}, lr_fast, lr_slow


def train_step(model, sample, target: ScaleTarget, rng, opt_state, step,
               cfg: TrainConfig, force_priors=None):
    """One optimization step on a single scene batch.

    Samples the prior configuration (unless ``force_priors`` pins it), runs
    forward + backward, and applies a clipped AdamW update with the two-group
    warmup schedule. Returns (LossReport, PriorConfig, applied flag).
    """
    prior_cfg = force_priors or pr.sample_prior_config(
        rng, sample.metric, cfg.p_inject, cfg.p_type, cfg.p_scale)

    bundle = None
    if model.cfg.prior_injection and (prior_cfg.use_pose or prior_cfg.use_intrinsics):
        bundle = pr.PriorBundle(
            poses=sample.poses if prior_cfg.use_pose else None,
            intrinsics=[sample.intrinsics] * len(sample.images)
            if prior_cfg.use_intrinsics else None)

    scale_norm = target.s_gt if sample.metric else 1.0
    prediction = model.forward(sample.images, priors=bundle, scale_norm=scale_norm)
    supervise = prior_cfg.supervise_scale and model.cfg.scale_head_enabled
    loss, report = total_loss(prediction, target, supervise,
                              huber_delta=cfg.huber_delta, alpha=cfg.alpha,
                              weights=cfg.loss_weights)
    if not report.finite():
        return report, prior_cfg, False

    model.store.zero_grads()
    ad.backward(loss)
    grads = model.store.grads()
    lrs, _, _ = lr_schedule(cfg, model, step)
    applied = ad.adamw_step(model.params(), grads, opt_state, lrs,
                            weight_decay=cfg.weight_decay,
                            clip_norm=cfg.clip_norm)
    model.store.zero_grads()
    return report, prior_cfg, applied


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def save_train_state(path, model, opt_state, step, rng):
    """Full resumable snapshot: parameters, optimizer moments, rng state."""
    arrays = dict(model.store.params)
    for name, m in opt_state["m"].items():
        arrays[f"__opt_m__.{name}"] = m
    for name, v in opt_state["v"].items():
        arrays[f"__opt_v__.{name}"] = v
    header = {
        "model_config": model.cfg.to_dict(),
        "train_state": {
            "step": step,
            "opt_step": opt_state["step"],
            "skipped": opt_state["skipped"],
            "rng_state": json.loads(json.dumps(rng_state(rng))),
        },
    }
    ad.save_checkpoint(path, arrays, header=header)


def load_train_state(path, model_cls):
    header, arrays = ad.load_checkpoint(path)
    if "train_state" not in header:
        raise ad.CheckpointError("not a training-state checkpoint")
    from .model import ModelConfig
    cfg = ModelConfig.from_dict(header["model_config"])
    model = model_cls(cfg)
    opt_state = ad.init_adamw_state(model.params())
    for name, arr in arrays.items():
        if name.startswith("__opt_m__."):
            opt_state["m"][name[len("__opt_m__."):]] = arr
        elif name.startswith("__opt_v__."):
            opt_state["v"][name[len("__opt_v__."):]] = arr
        else:
            if name not in model.store.params:
                raise ad.CheckpointError(f"unexpected parameter {name}")
            model.store.params[name].data = arr
    ts = header["train_state"]
    opt_state["step"] = ts["opt_step"]
    opt_state["skipped"] = ts["skipped"]
    rng = restore_rng(ts["rng_state"])
    return model, opt_state, ts["step"], rng


def train(model, samples, cfg: TrainConfig, out_dir, log_name="train_log.jsonl",
          resume_state=None, checkpoint_name="checkpoint.usck",
          state_name="train_state.usck"):
    """Run the training loop over a list of scene samples.

    One scene per step, chosen from the seeded rng stream. Writes a JSON line
    per step and periodic checkpoints; fully deterministic given (config,
    seed), and bit-exactly resumable from the saved training state.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    targets = [compute_scale_target(
        s.depths, [s.intrinsics] * len(s.images), s.poses,
        cap_factor=cfg.cap_factor) for s in samples]

    if resume_state is not None:
        opt_state, start_step, rng = resume_state
    else:
        opt_state = ad.init_adamw_state(model.params())
        start_step = 0
        rng = np.random.default_rng(cfg.seed)

    log_path = os.path.join(out_dir, log_name)
    mode = "a" if start_step > 0 else "w"
    with open(log_path, mode) as log:
        for step in range(start_step, cfg.steps):
            idx = int(rng.integers(len(samples)))
            report, prior_cfg, applied = train_step(
                model, samples[idx], targets[idx], rng, opt_state, step, cfg)
            _, lr_fast, lr_slow = lr_schedule(cfg, model, step)
            log.write(json.dumps({
                "step": step, "scene": idx, "applied": applied,
                "lr_fast": lr_fast, "lr_slow": lr_slow,
                "loss": asdict(report),
                "priors": asdict(prior_cfg), "seed": cfg.seed,
            }) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
                model.save(os.path.join(out_dir, checkpoint_name),
                           extra_header={"step": step + 1})
                save_train_state(os.path.join(out_dir, state_name),
                                 model, opt_state, step + 1, rng)
    return opt_state
