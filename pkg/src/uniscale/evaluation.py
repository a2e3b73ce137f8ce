"""Depth evaluation (AbsRel / inlier ratio) in metric and median-aligned
modes, prior-configuration sweeps, and the ablation harness.

rel is reported x100 and tau as a percentage; the inlier threshold defaults
to 1.03 (Robust-MVD convention).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import priors as pr
from .model import Model, ModelConfig
from .supervision import TrainConfig, train


class EvalError(ValueError):
    pass


def absrel(pred, gt, mask):
    """Mean |d_hat - d| / d over valid pixels, x100."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise EvalError("absrel: empty valid mask")
    p = np.asarray(pred)[mask]
    g = np.asarray(gt)[mask]
    if np.any(g <= 0):
        raise EvalError("absrel: nonpositive ground-truth depth inside mask")
    return 100.0 * float(np.mean(np.abs(p - g) / g))


def inlier_ratio(pred, gt, mask, thresh=1.03):
    """Percentage of valid pixels with max(d_hat/d, d/d_hat) < thresh."""
    if thresh <= 1:
        raise EvalError("inlier_ratio: threshold must exceed 1")
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise EvalError("inlier_ratio: empty valid mask")
    p = np.asarray(pred)[mask]
    g = np.asarray(gt)[mask]
    if np.any(g <= 0):
        raise EvalError("inlier_ratio: nonpositive ground-truth depth inside mask")
    ratio = np.maximum(p / g, g / p)
    return 100.0 * float(np.mean(ratio < thresh))


def median_align(pred, gt, mask):
    """Rescale pred by median(gt)/median(pred) over the valid mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise EvalError("median_align: empty valid mask")
    med_pred = float(np.median(np.asarray(pred)[mask]))
    if med_pred <= 0:
        raise EvalError("median_align: nonpositive prediction median")
    med_gt = float(np.median(np.asarray(gt)[mask]))
    return np.asarray(pred) * (med_gt / med_pred)


@dataclass
class EvalConfig:
    mode: str = "aligned"  # "metric" or "aligned"
    use_pose: bool = False
    use_intrinsics: bool = False
    inlier_thresh: float = 1.03

    def __post_init__(self):
        if self.mode not in ("metric", "aligned"):
            raise EvalError(f"unknown eval mode {self.mode}")
        if self.inlier_thresh <= 1:
            raise EvalError("inlier threshold must exceed 1")


@dataclass
class EvalReport:
    mode: str
    use_pose: bool
    use_intrinsics: bool
    per_scene: list = field(default_factory=list)
    mean_rel: float = 0.0
    mean_tau: float = 0.0
    scale_ratios: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _scene_bundle(sample, config: EvalConfig):
    if not (config.use_pose or config.use_intrinsics):
        return None
    return pr.PriorBundle(
        poses=sample.poses if config.use_pose else None,
        intrinsics=[sample.intrinsics] * len(sample.images)
        if config.use_intrinsics else None)


def evaluate_scene(model, sample, config: EvalConfig):
    """Per-scene rel / tau (averaged over frames) and the scale ratio."""
    if config.mode == "metric" and not sample.metric:
        raise EvalError("metric-mode evaluation on a non-metric scene")
    bundle = _scene_bundle(sample, config)
    prediction = model.forward(sample.images, priors=bundle, scale_norm=None)
    s_pred = float(prediction.scale.data)
    rels, taus = [], []
    for dense, gt in zip(prediction.dense, sample.depths):
        mask = np.asarray(gt) > 0
        pred = dense.depth.data * s_pred
        if config.mode == "aligned":
            pred = median_align(pred, gt, mask)
        rels.append(absrel(pred, gt, mask))
        taus.append(inlier_ratio(pred, gt, mask, config.inlier_thresh))
    ratio = s_pred / sample.s_gt if (sample.metric and sample.s_gt) else None
    return {"rel": float(np.mean(rels)), "tau": float(np.mean(taus)),
            "scale_pred": s_pred, "scale_ratio": ratio}


def evaluate(model, samples, config: EvalConfig, names=None):
    """Evaluate a list of scenes; deterministic reduction in input order."""
    report = EvalReport(mode=config.mode, use_pose=config.use_pose,
                        use_intrinsics=config.use_intrinsics)
    for i, sample in enumerate(samples):
        row = evaluate_scene(model, sample, config)
        row["scene"] = names[i] if names else f"scene_{i:04d}"
        report.per_scene.append(row)
        if row["scale_ratio"] is not None:
            report.scale_ratios.append(row["scale_ratio"])
    report.mean_rel = float(np.mean([r["rel"] for r in report.per_scene]))
    report.mean_tau = float(np.mean([r["tau"] for r in report.per_scene]))
    return report


PRIOR_SWEEP = (
    ("none", False, False),
    ("K", False, True),
    ("P", True, False),
    ("K+P", True, True),
)


def sweep_priors(model, samples, mode="aligned", inlier_thresh=1.03, names=None):
    """The four prior rows (no priors, K, P, K+P) as a name -> report dict."""
    out = {}
    for label, use_pose, use_k in PRIOR_SWEEP:
        cfg = EvalConfig(mode=mode, use_pose=use_pose, use_intrinsics=use_k,
                         inlier_thresh=inlier_thresh)
        out[label] = evaluate(model, samples, cfg, names=names)
    return out


# ---------------------------------------------------------------------------
# report output


def report_table(reports):
    """Aligned plain-text table for a dict of label -> EvalReport."""
    lines = [f"{'config':<12} {'mode':<8} {'rel':>8} {'tau':>8}"]
    for label, rep in reports.items():
        lines.append(f"{label:<12} {rep.mode:<8} {rep.mean_rel:>8.2f} "
                     f"{rep.mean_tau:>8.1f}")
    return "\n".join(lines)


def write_reports(reports, out_dir, stem="eval"):
    os.makedirs(out_dir, exist_ok=True)
    payload = {label: rep.to_dict() for label, rep in reports.items()}
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, f"{stem}.txt"), "w") as fh:
        fh.write(report_table(reports) + "\n")
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "mode", "mean_rel", "mean_tau"])
        for label, rep in reports.items():
            writer.writerow([label, rep.mode, rep.mean_rel, rep.mean_tau])


def view_count_curve(model, samples, counts, config: EvalConfig):
    """rel / tau as a function of the number of input views."""
    curve = []
    for n in counts:
        usable = [s for s in samples if len(s.images) >= n]
        if not usable:
            continue
        subs = []
        for s in usable:
            sub = _subsample_views(s, n)
            subs.append(sub)
        rep = evaluate(model, subs, config)
        curve.append({"views": n, "rel": rep.mean_rel, "tau": rep.mean_tau})
    return curve


def _subsample_views(sample, n):
    from dataclasses import replace as dc_replace
    return dc_replace(sample, images=sample.images[:n],
                      depths=sample.depths[:n], poses=sample.poses[:n],
                      primitives=[], world_poses=[])


def plot_curves(curves, path, title="rel vs views"):
    """Render labeled (views, rel) and (views, tau) curves to an SVG file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, curve in curves.items():
        xs = [c["views"] for c in curve]
        axes[0].plot(xs, [c["rel"] for c in curve], marker="o", label=label)
        axes[1].plot(xs, [c["tau"] for c in curve], marker="o", label=label)
    axes[0].set_xlabel("views")
    axes[0].set_ylabel("rel (x100)")
    axes[1].set_xlabel("views")
    axes[1].set_ylabel("tau (%)")
    axes[0].legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_VARIANTS = {
    "full": {},
    "no-camera-token": {"scale_use_camera_token": False},
    "no-class-token": {"scale_use_class_token": False},
    "no-agg-patch-token": {"scale_use_patch_token": False},
    "no-prior-into-scale-head": {"prior_to_scale_head": False},
    "no-prior-injection": {"prior_injection": False},
    "no-scale-head": {"scale_head_enabled": False},
    "quat-pose-encoder": {"pose_rotation_param": "quat"},
}


def variant_config(base: ModelConfig, variant):
    if variant not in ABLATION_VARIANTS:
        raise EvalError(f"unknown ablation variant {variant}")
    return replace(base, **ABLATION_VARIANTS[variant])


def ablation_run(variants, train_samples, eval_samples, base_model_cfg: ModelConfig,
                 train_cfg: TrainConfig, out_dir, eval_mode="aligned",
                 view_counts=None):
    """Train each variant under identical seeds and emit paired comparisons.

    Returns {variant: {"sweep": reports, "curve": view-count curve}} and
    writes per-variant report files plus a paired-curve SVG under out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    curves = {}
    for variant in variants:
        cfg = variant_config(base_model_cfg, variant)
        model = Model(cfg)
        vdir = os.path.join(out_dir, variant)
        train(model, train_samples, train_cfg, vdir)
        reports = sweep_priors(model, eval_samples, mode=eval_mode)
        write_reports(reports, vdir, stem="sweep")
        entry = {"sweep": reports}
        if view_counts:
            ccfg = EvalConfig(mode=eval_mode, use_pose=True, use_intrinsics=True)
            curve = view_count_curve(model, eval_samples, view_counts, ccfg)
            entry["curve"] = curve
            curves[variant] = curve
        results[variant] = entry
    if curves:
        plot_curves(curves, os.path.join(out_dir, "curves.svg"),
                    title="ablation view-count curves")
        with open(os.path.join(out_dir, "curves.json"), "w") as fh:
            json.dump(curves, fh, indent=2, sort_keys=True)
    comparison = {
        v: {label: {"rel": rep.mean_rel, "tau": rep.mean_tau}
            for label, rep in entry["sweep"].items()}
        for v, entry in results.items()
    }
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
    return results
