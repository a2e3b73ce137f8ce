"""Operator command surface: synth, train, eval, ablate, gradcheck, infer.

Configuration precedence: built-in defaults < JSON config file (--config)
< UNISCALE_* environment variables < command-line flags. Every key has a
flag of the same name (dashes for underscores); unknown config keys are
rejected. An effective-config dump is written beside every output.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config plumbing


DEFAULTS = {
    "synth": {
        "out_dir": "data", "n_scenes": 8, "n_frames": 4, "image_size": 64,
        "seed": 0, "train_fraction": 0.75, "non_metric_fraction": 0.0,
        "jobs": 1,
    },
    "train": {
        "manifest": "data/manifest.json", "out_dir": "runs/train",
        "split": "train", "steps": 2000, "warmup_steps": 100,
        "peak_lr_fast": 5e-5, "peak_lr_slow": 1e-6, "weight_decay": 1e-4,
        "clip_norm": 1.0, "seed": 0, "checkpoint_every": 500,
        "image_size": 64, "patch_size": 8, "embed_dim": 64,
        "aggregator_blocks": 4, "attention_heads": 4, "mlp_ratio": 2,
        "lr_decay": "none", "resume": "",
    },
    "eval": {
        "manifest": "data/manifest.json", "checkpoint": "runs/train/checkpoint.usck",
        "out_dir": "runs/eval", "split": "val", "mode": "aligned",
        "use_pose": False, "use_intrinsics": False, "sweep_priors": False,
        "inlier_thresh": 1.03, "jobs": 1, "plot": False,
    },
    "ablate": {
        "manifest": "data/manifest.json", "out_dir": "runs/ablate",
        "variants": "full,quat-pose-encoder", "steps": 200, "seed": 0,
        "eval_mode": "aligned", "view_counts": "2,3,4",
        "image_size": 64, "patch_size": 8, "embed_dim": 64,
        "aggregator_blocks": 4, "attention_heads": 4,
        "peak_lr_fast": 5e-5, "peak_lr_slow": 1e-6,
    },
    "gradcheck": {
        "out_dir": "runs/gradcheck", "seed": 0, "draws": 20,
        "op_tolerance": 1e-5, "model_tolerance": 1e-4, "model_coords": 100,
    },
    "infer": {
        "input": "", "checkpoint": "runs/train/checkpoint.usck",
        "out_dir": "runs/infer", "use_pose": False, "use_intrinsics": False,
    },
}


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve_config(command, args):
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config file: {e}", EXIT_CONFIG)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)
        for k, v in file_cfg.items():
            cfg[k] = _coerce(v, DEFAULTS[command][k])
    for key in cfg:
        env = os.environ.get(f"UNISCALE_{key.upper()}")
        if env is not None:
            cfg[key] = _coerce(env, DEFAULTS[command][key])
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _coerce(val, DEFAULTS[command][key])
    return cfg


def dump_effective_config(cfg, out_dir, command):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}_effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _add_flags(parser, command):
    parser.add_argument("--config", help="JSON config file")
    for key, default in DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, action="store_const", const=True,
                                default=None, help=f"(default {default})")
        else:
            parser.add_argument(flag, type=str, default=None,
                                help=f"(default {default})")


# ---------------------------------------------------------------------------
# shared data loading


def _load_split(manifest_path, split):
    from .scenes import load_manifest, read_scene

    try:
        _, entries = load_manifest(manifest_path)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise CliError(f"cannot read manifest: {e}", EXIT_DATA)
    samples, names = [], []
    for entry, path in entries:
        if split not in ("all", entry["split"]):
            continue
        try:
            samples.append(read_scene(path))
        except Exception as e:
            raise CliError(f"cannot read scene {path}: {e}", EXIT_DATA)
        names.append(entry["path"])
    if not samples:
        raise CliError(f"no scenes in split {split!r}", EXIT_DATA)
    return samples, names


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg):
    from .scenes import SceneSpec, make_dataset

    rng = np.random.default_rng(cfg["seed"])
    specs = []
    for i in range(cfg["n_scenes"]):
        metric = bool(rng.random() >= cfg["non_metric_fraction"])
        specs.append(SceneSpec(seed=int(rng.integers(2**31)),
                               n_frames=cfg["n_frames"],
                               image_size=cfg["image_size"], metric=metric))
    try:
        manifest = make_dataset(specs, (cfg["train_fraction"],
                                        1.0 - cfg["train_fraction"]),
                                cfg["seed"], cfg["out_dir"],
                                jobs=cfg["jobs"])
    except OSError as e:
        raise CliError(f"cannot write dataset: {e}", EXIT_DATA)
    dump_effective_config(cfg, cfg["out_dir"], "synth")
    print(f"wrote {len(manifest['scenes'])} scenes to {cfg['out_dir']}")
    return EXIT_OK


def cmd_train(cfg):
    from . import supervision as sv
    from .model import Model, ModelConfig

    samples, _ = _load_split(cfg["manifest"], cfg["split"])
    tcfg = sv.TrainConfig(steps=cfg["steps"], warmup_steps=cfg["warmup_steps"],
                          peak_lr_fast=cfg["peak_lr_fast"],
                          peak_lr_slow=cfg["peak_lr_slow"],
                          weight_decay=cfg["weight_decay"],
                          clip_norm=cfg["clip_norm"], seed=cfg["seed"],
                          checkpoint_every=cfg["checkpoint_every"],
                          lr_decay=cfg["lr_decay"])
    resume_state = None
    if cfg["resume"]:
        try:
            model, opt_state, step, rng = sv.load_train_state(cfg["resume"], Model)
        except Exception as e:
            raise CliError(f"refusing resume, corrupt state: {e}", EXIT_DATA)
        resume_state = (opt_state, step, rng)
    else:
        mcfg = ModelConfig(image_size=cfg["image_size"],
                           patch_size=cfg["patch_size"],
                           embed_dim=cfg["embed_dim"],
                           aggregator_blocks=cfg["aggregator_blocks"],
                           attention_heads=cfg["attention_heads"],
                           mlp_ratio=cfg["mlp_ratio"], seed=cfg["seed"])
        model = Model(mcfg)
    dump_effective_config(cfg, cfg["out_dir"], "train")
    sv.train(model, samples, tcfg, cfg["out_dir"], resume_state=resume_state)
    print(f"trained {tcfg.steps} steps; checkpoint in {cfg['out_dir']}")
    return EXIT_OK


def cmd_eval(cfg):
    from . import evaluation as ev
    from .model import Model

    try:
        model, _ = Model.load(cfg["checkpoint"])
    except Exception as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_DATA)
    samples, names = _load_split(cfg["manifest"], cfg["split"])
    dump_effective_config(cfg, cfg["out_dir"], "eval")
    try:
        if cfg["sweep_priors"]:
            reports = ev.sweep_priors(model, samples, mode=cfg["mode"],
                                      inlier_thresh=cfg["inlier_thresh"],
                                      names=names)
        else:
            econf = ev.EvalConfig(mode=cfg["mode"], use_pose=cfg["use_pose"],
                                  use_intrinsics=cfg["use_intrinsics"],
                                  inlier_thresh=cfg["inlier_thresh"])
            label = "K+P" if (cfg["use_pose"] and cfg["use_intrinsics"]) else (
                "P" if cfg["use_pose"] else ("K" if cfg["use_intrinsics"] else "none"))
            if cfg["jobs"] > 1:
                with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
                    rows = list(pool.map(
                        lambda s: ev.evaluate_scene(model, s, econf), samples))
                report = ev.EvalReport(mode=econf.mode, use_pose=econf.use_pose,
                                       use_intrinsics=econf.use_intrinsics)
                for name, row in zip(names, rows):
                    row["scene"] = name
                    report.per_scene.append(row)
                    if row["scale_ratio"] is not None:
                        report.scale_ratios.append(row["scale_ratio"])
                report.mean_rel = float(np.mean([r["rel"] for r in report.per_scene]))
                report.mean_tau = float(np.mean([r["tau"] for r in report.per_scene]))
            else:
                report = ev.evaluate(model, samples, econf, names=names)
            reports = {label: report}
    except ev.EvalError as e:
        raise CliError(str(e), EXIT_DATA)
    ev.write_reports(reports, cfg["out_dir"])
    if cfg["plot"]:
        ccfg = ev.EvalConfig(mode=cfg["mode"])
        counts = sorted({min(len(s.images), n) for s in samples for n in (2, 3, 4)})
        curve = ev.view_count_curve(model, samples, counts, ccfg)
        ev.plot_curves({"model": curve},
                       os.path.join(cfg["out_dir"], "curve.svg"))
    print(ev.report_table(reports))
    return EXIT_OK


def cmd_ablate(cfg):
    from . import evaluation as ev
    from .model import ModelConfig
    from .supervision import TrainConfig

    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in ev.ABLATION_VARIANTS:
            raise CliError(f"unknown ablation variant {v}", EXIT_CONFIG)
    train_samples, _ = _load_split(cfg["manifest"], "train")
    eval_samples, _ = _load_split(cfg["manifest"], "val")
    mcfg = ModelConfig(image_size=cfg["image_size"], patch_size=cfg["patch_size"],
                       embed_dim=cfg["embed_dim"],
                       aggregator_blocks=cfg["aggregator_blocks"],
                       attention_heads=cfg["attention_heads"], seed=cfg["seed"])
    tcfg = TrainConfig(steps=cfg["steps"], seed=cfg["seed"],
                       peak_lr_fast=cfg["peak_lr_fast"],
                       peak_lr_slow=cfg["peak_lr_slow"])
    counts = [int(c) for c in str(cfg["view_counts"]).split(",") if c]
    dump_effective_config(cfg, cfg["out_dir"], "ablate")
    ev.ablation_run(variants, train_samples, eval_samples, mcfg, tcfg,
                    cfg["out_dir"], eval_mode=cfg["eval_mode"],
                    view_counts=counts)
    print(f"ablation reports written to {cfg['out_dir']}")
    return EXIT_OK


def cmd_gradcheck(cfg):
    from . import verify

    dump_effective_config(cfg, cfg["out_dir"], "gradcheck")
    results = verify.check_ops(seed=cfg["seed"], draws=cfg["draws"],
                               tolerance=cfg["op_tolerance"])
    ok = True
    lines = []
    for name in sorted(results):
        res = results[name]
        ok &= res.passed
        lines.append(f"{'PASS' if res.passed else 'FAIL'} op {name:<24} "
                     f"worst_rel={res.worst_rel:.2e}")
    m_ok, m_worst, m_loc = verify.check_model_gradients(
        n_coords=cfg["model_coords"], tolerance=cfg["model_tolerance"],
        seed=cfg["seed"])
    ok &= m_ok
    lines.append(f"{'PASS' if m_ok else 'FAIL'} micro-model worst_rel={m_worst:.2e} "
                 f"at {m_loc}")
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(cfg["out_dir"], "gradcheck.txt"), "w") as fh:
        fh.write(text + "\n")
    if not ok:
        raise CliError("gradient check failed", EXIT_NUMERIC)
    return EXIT_OK


def cmd_infer(cfg):
    from . import priors as pr
    from .model import Model, metricize
    from .scenes import SceneSample, read_scene, write_scene

    if not cfg["input"]:
        raise CliError("--input is required", EXIT_CONFIG)
    try:
        model, _ = Model.load(cfg["checkpoint"])
    except Exception as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_DATA)

    if cfg["input"].endswith(".uscn"):
        try:
            sample = read_scene(cfg["input"])
        except Exception as e:
            raise CliError(f"cannot read scene: {e}", EXIT_DATA)
        images = sample.images
    else:
        images = _load_images(cfg["input"], model.cfg.image_size)
        sample = None

    bundle = None
    if sample is not None and (cfg["use_pose"] or cfg["use_intrinsics"]):
        bundle = pr.PriorBundle(
            poses=sample.poses if cfg["use_pose"] else None,
            intrinsics=[sample.intrinsics] * len(images)
            if cfg["use_intrinsics"] else None)

    prediction = model.forward(images, priors=bundle)
    depths, points, cams = metricize(prediction.dense, prediction.cameras,
                                     prediction.scale)
    s_pred = float(prediction.scale.data)

    from . import geometry as geo
    os.makedirs(cfg["out_dir"], exist_ok=True)
    poses = [geo.Pose(geo.quat_to_matrix(c.q), c.t) for c in cams]
    k = geo.K_from_fov(cams[0].f, model.cfg.image_size, model.cfg.image_size)
    out = SceneSample(images=images, depths=depths, intrinsics=k, poses=poses,
                      metric=True, s_gt=s_pred)
    write_scene(out, os.path.join(cfg["out_dir"], "prediction.uscn"))
    _depth_svg(depths, os.path.join(cfg["out_dir"], "depth.svg"))
    dump_effective_config(cfg, cfg["out_dir"], "infer")
    print(f"predicted scale {s_pred:.4f}; outputs in {cfg['out_dir']}")
    return EXIT_OK


def _load_images(path, image_size):
    from PIL import Image

    if not os.path.isdir(path):
        raise CliError("input must be a .uscn scene or an image directory",
                       EXIT_DATA)
    files = sorted(f for f in os.listdir(path)
                   if f.lower().endswith((".png", ".jpg", ".jpeg")))
    if not files:
        raise CliError("no images found in input directory", EXIT_DATA)
    images = []
    for f in files:
        img = Image.open(os.path.join(path, f)).convert("RGB")
        img = img.resize((image_size, image_size))
        arr = np.asarray(img, dtype=np.float64) / 255.0
        images.append(arr.transpose(2, 0, 1))
    return images


def _depth_svg(depths, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(depths)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3))
    if n == 1:
        axes = [axes]
    for ax, d in zip(axes, depths):
        im = ax.imshow(d, cmap="viridis")
        ax.axis("off")
        fig.colorbar(im, ax=ax, shrink=0.7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "infer": cmd_infer,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uniscale",
        description="Metric-scale multi-view reconstruction: synthetic data, "
                    "training, evaluation, ablations, verification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_flags(p, name)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
