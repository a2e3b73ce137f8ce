"""Pose and intrinsics prior encoders, semantic-aware routing, prior sampling.

Pose priors become a single embedding added to camera-role tokens; intrinsics
priors become per-patch ray embeddings added to patch-role tokens. The same
embeddings are reused at the two declared destinations (main token stream and
scale head) -- computed once, added twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo


class RoutingError(ValueError):
    pass


@dataclass
class PriorBundle:
    """Optional per-frame pose / intrinsics priors (all-or-none per type)."""

    poses: list | None = None  # list[geo.Pose], metric units, frame-0 anchored
    intrinsics: list | None = None  # list[geo.Intrinsics]
    has_pose: bool = field(init=False)
    has_intrinsics: bool = field(init=False)

    def __post_init__(self):
        self.has_pose = self.poses is not None
        self.has_intrinsics = self.intrinsics is not None

    @staticmethod
    def empty():
        return PriorBundle()


@dataclass
class PriorConfig:
    """Outcome of one probabilistic prior draw for a training batch."""

    inject_any: bool
    use_pose: bool
    use_intrinsics: bool
    supervise_scale: bool


def sample_prior_config(rng, batch_is_metric,
                        p_inject=0.5, p_type=0.9, p_scale=0.95):
    """Draw the training prior configuration.

    Priors are injected with probability 0.5; given injection, pose and
    intrinsics are included independently with probability 0.9 each. Scale
    supervision fires with probability 0.95 on metric batches and never on
    non-metric ones.
    """
    inject_any = bool(rng.random() < p_inject)
    use_pose = inject_any and bool(rng.random() < p_type)
    use_intrinsics = inject_any and bool(rng.random() < p_type)
    supervise_scale = bool(batch_is_metric) and bool(rng.random() < p_scale)
    return PriorConfig(inject_any, use_pose, use_intrinsics, supervise_scale)


class PoseEncoder:
    """MLP mapping a (rotation, translation) vector to a 1 x C embedding.

    Rotation enters either as the continuous 6D representation (default) or
    as a unit quaternion (ablation variant), translation divided by the
    caller-supplied scale normalizer.
    """

    def __init__(self, store, embed_dim, hidden_dim=None, rotation_param="6d",
                 prefix="pose_encoder"):
        if rotation_param not in ("6d", "quat"):
            raise ValueError(f"unknown rotation parameterization: {rotation_param}")
        self.rotation_param = rotation_param
        self.in_dim = 9 if rotation_param == "6d" else 7
        hidden = hidden_dim or embed_dim
        self.w1 = store.add(f"{prefix}.w1", (self.in_dim, hidden))
        self.b1 = store.add(f"{prefix}.b1", (hidden,), zero=True)
        self.w2 = store.add(f"{prefix}.w2", (hidden, embed_dim))
        self.b2 = store.add(f"{prefix}.b2", (embed_dim,), zero=True)

    def pose_vector(self, pose: geo.Pose, scale_norm):
        if scale_norm <= 0:
            raise ValueError("scale_norm must be positive")
        if self.rotation_param == "6d":
            rot = geo.matrix_to_rot6d(pose.rotation)
        else:
            rot = geo.matrix_to_quat(pose.rotation)
        return np.concatenate([rot, pose.translation / scale_norm])

    def encode(self, pose: geo.Pose, scale_norm):
        g = ad.Tensor(self.pose_vector(pose, scale_norm).reshape(1, self.in_dim))
        h = ad.relu(g @ self.w1 + self.b1)
        return h @ self.w2 + self.b2


class RayEncoder:
    """Origin-free raymap encoder: per-patch linear projection to N_pt x C."""

    def __init__(self, store, embed_dim, image_size, patch_size, prefix="ray_encoder"):
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        in_dim = 3 * patch_size * patch_size
        self.w = store.add(f"{prefix}.w", (in_dim, embed_dim))
        self.b = store.add(f"{prefix}.b", (embed_dim,), zero=True)

    def patchify_raymap(self, k: geo.Intrinsics):
        if (k.height, k.width) != (self.image_size, self.image_size):
            raise geo.GeometryError(
                f"intrinsics extents ({k.height}, {k.width}) do not match the "
                f"model image size {self.image_size}")
        rays = geo.make_raymap(k)  # H x W x 3
        g, p = self.grid, self.patch_size
        patches = rays.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(g * g, 3 * p * p)

    def encode(self, k: geo.Intrinsics):
        flat = ad.Tensor(self.patchify_raymap(k))
        return flat @ self.w + self.b


ROUTE_DESTINATIONS = ("main-tokens", "scale-head")


def route(streams, pose_embeddings=None, ray_embeddings=None,
          destination="main-tokens", pose_target="camera"):
    """Add prior embeddings to their token streams; other streams untouched.

    ``streams`` maps role names ("camera", "patch", "class", "register") to
    per-frame token Tensors. Pose embeddings land on ``pose_target`` (the
    camera-role stream by default; the class stream for the no-camera-token
    ablation), ray embeddings always land on the patch stream. Register
    tokens never receive priors.
    """
    if destination not in ROUTE_DESTINATIONS:
        raise RoutingError(f"unknown routing destination: {destination}")
    if pose_target not in ("camera", "class"):
        raise RoutingError(f"invalid pose target: {pose_target}")
    out = dict(streams)
    if pose_embeddings is not None:
        out[pose_target] = [tok + emb for tok, emb in zip(streams[pose_target],
                                                          pose_embeddings)]
    if ray_embeddings is not None:
        out["patch"] = [tok + emb for tok, emb in zip(streams["patch"],
                                                      ray_embeddings)]
    return out


def prior_scale_norm(bundle: PriorBundle, s_gt=None):
    """Translation normalizer for the pose encoder.

    During training the batch's ground-truth scale target is used; at
    inference (unknown scale) the mean camera-center norm of the provided
    poses stands in, with 1.0 as the degenerate fallback.
    """
    if s_gt is not None and s_gt > 0:
        return float(s_gt)
    if bundle.has_pose:
        norms = [np.linalg.norm(p.translation) for p in bundle.poses]
        mean = float(np.mean(norms))
        if mean > 1e-9:
            return mean
    return 1.0
