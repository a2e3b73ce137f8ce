"""Gradient verification batteries: per-op finite-difference checks and a
full micro-model check of the total training loss.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import priors as pr
from .model import Model, ModelConfig
from .scenes import SceneSpec, generate_scene
from .supervision import compute_scale_target, total_loss


def _rand(rng, shape):
    return ad.Tensor(rng.normal(0.0, 1.0, size=shape))


def op_check_cases(rng):
    """Scalar-valued wrappers around every differentiable op kind.

    Inputs are drawn away from non-smooth points (abs/relu kinks, huber
    corner) so central differences are valid.
    """
    def away_from_zero(shape, lo=0.2):
        x = rng.normal(0.0, 1.0, size=shape)
        x = np.where(np.abs(x) < lo, lo * np.sign(x) + (x == 0) * lo, x)
        return ad.Tensor(x)

    a44 = _rand(rng, (4, 4))
    b44 = _rand(rng, (4, 4))
    pos = ad.Tensor(np.abs(rng.normal(1.5, 0.3, size=(3, 5))) + 0.5)

    return {
        "matmul": (lambda x: ad.tsum(ad.huber(x @ b44, 1.0)), a44),
        "add": (lambda x: ad.tsum(ad.mul(x + b44, x)), a44),
        "mul": (lambda x: ad.tsum(ad.mul(x, b44)), a44),
        "concat-last-axis": (lambda x: ad.tsum(ad.mul(ad.concat([x, b44]),
                                                      ad.concat([b44, x]))),
                             a44),
        "softmax-over-axis": (lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), b44)),
                              a44),
        "exp": (lambda x: ad.tsum(ad.exp(x)), _rand(rng, (3, 3))),
        "log": (lambda x: ad.tsum(ad.log(x)), pos),
        "abs": (lambda x: ad.tsum(ad.absval(x)), away_from_zero((4, 4))),
        "huber": (lambda x: ad.tsum(ad.huber(x, 0.5)), _rand(rng, (4, 4))),
        "layer-normalize": (lambda x: ad.tsum(ad.mul(ad.layer_normalize(x), b44)),
                            a44),
        "l2-normalize-last-axis": (lambda x: ad.tsum(ad.mul(ad.l2_normalize(x), b44)),
                                   a44 + 2.0),
        "mean-over-axis": (lambda x: ad.tsum(ad.exp(ad.tmean(x, axis=0))), a44),
        "sum-over-axis": (lambda x: ad.tsum(ad.exp(ad.tsum(x, axis=1) * 0.3)), a44),
        "relu": (lambda x: ad.tsum(ad.mul(ad.relu(x), b44)), away_from_zero((4, 4))),
        "slice": (lambda x: ad.tsum(ad.mul(ad.slice_axis(x, 1, 1, 3),
                                           ad.slice_axis(b44, 1, 0, 2))), a44),
        "reshape": (lambda x: ad.tsum(ad.mul(ad.reshape(x, (2, 8)),
                                             ad.reshape(b44, (2, 8)))), a44),
        "transpose-last-two": (lambda x: ad.tsum(ad.mul(ad.transpose(x), b44)), a44),
        "sigmoid": (lambda x: ad.tsum(ad.mul(ad.sigmoid(x), b44)), a44),
        "softmax-matmul-chain": (lambda x: ad.tsum(
            ad.mul(ad.softmax(x @ b44, axis=-1) @ a44.detach(), b44)), a44),
    }


def check_ops(seed=0, draws=20, step=1e-6, tolerance=1e-5):
    """Finite-difference every op kind over repeated random draws."""
    results = {}
    for draw in range(draws):
        rng = np.random.default_rng(seed + draw)
        for name, (f, x) in op_check_cases(rng).items():
            res = ad.finite_diff_check(f, x, step=step, tolerance=tolerance)
            prev = results.get(name)
            if prev is None or res.worst_rel > prev.worst_rel:
                results[name] = res
    return results


def micro_model_setup(seed=0):
    """2-frame 16x16 micro configuration with priors and scale supervision."""
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=8,
                      aggregator_blocks=2, attention_heads=2,
                      register_count=2, mlp_ratio=2, seed=seed)
    model = Model(cfg)
    sample = generate_scene(SceneSpec(seed=seed, n_frames=2, image_size=16))
    target = compute_scale_target(sample.depths,
                                  [sample.intrinsics] * 2, sample.poses)
    bundle = pr.PriorBundle(poses=sample.poses,
                            intrinsics=[sample.intrinsics] * 2)
    return model, sample, target, bundle


def model_loss(model, sample, target, bundle):
    prediction = model.forward(sample.images, priors=bundle,
                               scale_norm=target.s_gt)
    loss, _ = total_loss(prediction, target, supervise_scale=True)
    return loss


def check_model_gradients(n_coords=100, step=1e-6, tolerance=1e-4, seed=0):
    """Compare analytic parameter gradients of the full micro-model loss
    against central differences on randomly sampled coordinates.

    Returns (passed, worst_rel, worst_location).
    """
    model, sample, target, bundle = micro_model_setup(seed)
    model.store.zero_grads()
    loss = model_loss(model, sample, target, bundle)
    ad.backward(loss)

    rng = np.random.default_rng(seed + 1)
    names = sorted(model.params())
    sizes = np.array([model.params()[n].size for n in names], dtype=float)
    probs = sizes / sizes.sum()
    worst = (0.0, None)
    for _ in range(n_coords):
        name = names[int(rng.choice(len(names), p=probs))]
        param = model.params()[name]
        idx = int(rng.integers(param.size))
        analytic = 0.0 if param.grad is None else float(param.grad.reshape(-1)[idx])
        flat = param.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        hi = model_loss(model, sample, target, bundle).item()
        flat[idx] = orig - step
        lo = model_loss(model, sample, target, bundle).item()
        flat[idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1.0)
        if rel > worst[0]:
            worst = (rel, (name, idx))
    return worst[0] < tolerance, worst[0], worst[1]
