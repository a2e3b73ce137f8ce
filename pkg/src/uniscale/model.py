"""Desk-scale scale-aware multi-view reconstruction network.

Pipeline: linear patch embedder -> token assembly (camera / register / class /
patch tokens, frame 0 carrying distinct anchor parameters) -> alternating
frame-level / global attention aggregator -> camera head, dense head, and the
metric-scale head (attention-pooled patch tokens + normalized token concat +
MLP + exp, averaged over frames).

Everything runs on the float64 autodiff engine; forward passes over read-only
parameters are safe to run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import priors as pr


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    aggregator_blocks: int = 4
    attention_heads: int = 4
    register_count: int = 4
    mlp_ratio: int = 2
    seed: int = 0
    # ablation switches
    scale_head_enabled: bool = True
    scale_use_camera_token: bool = True
    scale_use_class_token: bool = True
    scale_use_patch_token: bool = True
    prior_injection: bool = True
    prior_to_scale_head: bool = True
    pose_rotation_param: str = "6d"  # or "quat"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelError("image_size must be divisible by patch_size")
        if self.embed_dim % self.attention_heads != 0:
            raise ModelError("embed_dim must be divisible by attention_heads")
        if self.patch_size % 4 != 0 and self.patch_size != 1:
            raise ModelError("patch_size must be a multiple of 4")
        if self.pose_rotation_param not in ("6d", "quat"):
            raise ModelError(f"unknown pose_rotation_param {self.pose_rotation_param}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid * self.grid

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        known = {f for f in ModelConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown config keys: {sorted(unknown)}")
        return ModelConfig(**d)


class ParamStore:
    """Named float64 parameter registry with seeded initialization."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}

    def add(self, name, shape, zero=False, std=None):
        if name in self.params:
            raise ModelError(f"duplicate parameter {name}")
        shape = tuple(shape)
        if zero:
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            s = std if std is not None else 1.0 / np.sqrt(max(fan_in, 1))
            data = self.rng.normal(0.0, s, size=shape)
        t = ad.Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}


@dataclass
class DensePrediction:
    """Per-frame dense outputs (autodiff Tensors, scale-invariant units)."""

    depth: ad.Tensor        # H x W, > 0
    depth_conf: ad.Tensor   # H x W, > 0
    points: ad.Tensor       # H x W x 3, frame-0 coordinates
    point_conf: ad.Tensor   # H x W, > 0


@dataclass
class CameraPrediction:
    """Per-frame camera parameters (autodiff Tensors)."""

    q: ad.Tensor  # (1, 4) unit quaternion
    t: ad.Tensor  # (1, 3) scale-normalized translation
    f: ad.Tensor  # (1, 2) fov radians in (0, pi)

    def as_param(self):
        q = geo.canonicalize_quat(self.q.data.reshape(4))
        return geo.CameraParam(q / np.linalg.norm(q), self.t.data.reshape(3),
                               self.f.data.reshape(2))


@dataclass
class Prediction:
    cameras: list          # list[CameraPrediction]
    dense: list            # list[DensePrediction]
    scale: ad.Tensor       # scalar, > 0
    class_tokens: list = field(default_factory=list)
    agg_camera: list = field(default_factory=list)
    agg_patch: list = field(default_factory=list)


def row_concat(tensors):
    """Concatenate (T_i, C) token blocks along the token axis."""
    cols = [ad.transpose(t) for t in tensors]
    return ad.transpose(ad.concat(cols))


def attention_pool(patches, w, b):
    """Softmax-weighted convex combination of patch tokens -> (1, C).

    ``w``/``b`` realize the learned scalar projection; the weights are
    nonnegative and sum to one, so the output stays in the convex hull of
    the patch tokens.
    """
    logits = patches @ w + b                       # (N_pt, 1)
    weights = ad.softmax(logits, axis=0)           # sums to 1 over patches
    return ad.transpose(weights) @ patches          # (1, C)


class Model:
    """The full network; owns every learned parameter via a ParamStore."""

    # per-frame token row layout
    CAM_ROW = 0

    def __init__(self, config: ModelConfig, store=None):
        self.cfg = config
        c = config.embed_dim
        self.store = store or ParamStore(config.seed)
        s = self.store
        p = config.patch_size
        self.reg_row = slice(1, 1 + config.register_count)
        self.cls_row = 1 + config.register_count
        self.patch_row = self.cls_row + 1
        self.tokens_per_frame = self.patch_row + config.n_patches

        # patch embedder
        s.add("embed.w", (3 * p * p, c))
        s.add("embed.b", (c,), zero=True)
        s.add("embed.pos", (config.n_patches, c), zero=True)
        s.add("embed.cls", (1, c))
        s.add("embed.cls_mix", (c, c))

        # special tokens; frame 0 carries distinct anchors
        s.add("tokens.camera", (1, c))
        s.add("tokens.camera_first", (1, c))
        s.add("tokens.register", (config.register_count, c))
        s.add("tokens.register_first", (config.register_count, c))

        # aggregator blocks (even = frame-level, odd = global)
        for i in range(config.aggregator_blocks):
            self._add_block(f"agg.{i}")

        # camera head: one cross-frame attention block + linear to 9
        self._add_block("camera_head.block")
        s.add("camera_head.out_w", (c, 9), std=0.02)
        s.add("camera_head.out_b", (9,), zero=True)

        # dense head: two learned 2x upsampling stages + pixel projection
        cm = max(c // 2, 4)
        self.dense_mid = cm
        s.add("dense.up1_w", (c, 4 * cm))
        s.add("dense.up1_b", (4 * cm,), zero=True)
        s.add("dense.up2_w", (cm, 4 * cm))
        s.add("dense.up2_b", (4 * cm,), zero=True)
        r = max(p // 4, 1)
        self.dense_pix = r
        s.add("dense.out_w", (cm, r * r * 6), std=0.02)
        s.add("dense.out_b", (r * r * 6,), zero=True)

        # scale head
        if config.scale_head_enabled:
            k = (int(config.scale_use_camera_token) + int(config.scale_use_class_token)
                 + int(config.scale_use_patch_token))
            if k == 0:
                raise ModelError("scale head needs at least one input token source")
            self.scale_inputs = k
            s.add("scale_head.pool_w", (c, 1))
            s.add("scale_head.pool_b", (1,), zero=True)
            s.add("scale_head.mlp_w1", (k * c, c))
            s.add("scale_head.mlp_b1", (c,), zero=True)
            s.add("scale_head.mlp_w2", (c, 1), zero=True)
            s.add("scale_head.mlp_b2", (1,), zero=True)

        # prior encoders
        if config.prior_injection:
            self.pose_encoder = pr.PoseEncoder(
                s, c, rotation_param=config.pose_rotation_param)
            self.ray_encoder = pr.RayEncoder(
                s, c, config.image_size, config.patch_size)
        else:
            self.pose_encoder = None
            self.ray_encoder = None

    def _add_block(self, prefix):
        c = self.cfg.embed_dim
        s = self.store
        for ln in ("ln1", "ln2"):
            s.add(f"{prefix}.{ln}_g", (c,), zero=True)  # gamma stored as offset from 1
            s.add(f"{prefix}.{ln}_b", (c,), zero=True)
        for m in ("q", "k", "v", "o"):
            s.add(f"{prefix}.w{m}", (c, c))
            s.add(f"{prefix}.b{m}", (c,), zero=True)
        h = self.cfg.mlp_ratio * c
        s.add(f"{prefix}.mlp_w1", (c, h))
        s.add(f"{prefix}.mlp_b1", (h,), zero=True)
        s.add(f"{prefix}.mlp_w2", (h, c))
        s.add(f"{prefix}.mlp_b2", (c,), zero=True)

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def params(self):
        return self.store.params

    def fast_param_names(self):
        """Scale head and prior encoders train at the higher peak rate."""
        prefixes = ("scale_head.", "pose_encoder.", "ray_encoder.")
        return [n for n in self.store.params if n.startswith(prefixes)]

    def save(self, path, extra_header=None):
        header = {"model_config": self.cfg.to_dict()}
        if extra_header:
            header.update(extra_header)
        ad.save_checkpoint(path, self.store.params, header=header)

    @classmethod
    def load(cls, path):
        header, arrays = ad.load_checkpoint(path)
        cfg = ModelConfig.from_dict(header["model_config"])
        model = cls(cfg)
        if set(arrays) != set(model.store.params):
            raise ad.CheckpointError("checkpoint parameters do not match the model")
        for name, arr in arrays.items():
            if model.store.params[name].data.shape != arr.shape:
                raise ad.CheckpointError(f"shape mismatch for parameter {name}")
            model.store.params[name].data = arr
        return model, header

    # ------------------------------------------------------------------
    # building blocks

    def _ln(self, x, prefix, which):
        g = self.store.params[f"{prefix}.{which}_g"]
        b = self.store.params[f"{prefix}.{which}_b"]
        normed = ad.layer_normalize(x)
        return normed + ad.mul(normed, g) + b

    def _attention(self, x, prefix):
        s = self.store.params
        heads = self.cfg.attention_heads
        dh = self.cfg.embed_dim // heads
        q = x @ s[f"{prefix}.wq"] + s[f"{prefix}.bq"]
        k = x @ s[f"{prefix}.wk"] + s[f"{prefix}.bk"]
        v = x @ s[f"{prefix}.wv"] + s[f"{prefix}.bv"]
        outs = []
        inv = 1.0 / np.sqrt(dh)
        for h in range(heads):
            qh = ad.slice_axis(q, 1, h * dh, (h + 1) * dh)
            kh = ad.slice_axis(k, 1, h * dh, (h + 1) * dh)
            vh = ad.slice_axis(v, 1, h * dh, (h + 1) * dh)
            att = ad.softmax((qh @ ad.transpose(kh)) * inv, axis=-1)
            outs.append(att @ vh)
        merged = ad.concat(outs)
        return merged @ s[f"{prefix}.wo"] + s[f"{prefix}.bo"]

    def _mlp(self, x, prefix):
        s = self.store.params
        h = ad.relu(x @ s[f"{prefix}.mlp_w1"] + s[f"{prefix}.mlp_b1"])
        return h @ s[f"{prefix}.mlp_w2"] + s[f"{prefix}.mlp_b2"]

    def _block(self, x, prefix):
        x = x + self._attention(self._ln(x, prefix, "ln1"), prefix)
        return x + self._mlp(self._ln(x, prefix, "ln2"), prefix)

    # ------------------------------------------------------------------
    # stages

    def patchify_embed(self, image):
        """Image (3, H, W) -> (class token (1, C), patch tokens (N_pt, C))."""
        n = self.cfg.image_size
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (3, n, n):
            raise ModelError(f"image shape {image.shape} does not match config "
                             f"(3, {n}, {n})")
        p = self.cfg.patch_size
        g = self.cfg.grid
        hwc = image.transpose(1, 2, 0)
        patches = hwc.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        flat = ad.Tensor(patches.reshape(g * g, 3 * p * p))
        s = self.store.params
        t_pt = flat @ s["embed.w"] + s["embed.b"] + s["embed.pos"]
        pooled = ad.reshape(ad.tmean(t_pt, axis=0), (1, self.cfg.embed_dim))
        t_cls = s["embed.cls"] + pooled @ s["embed.cls_mix"]
        return t_cls, t_pt

    def assemble_tokens(self, t_pt, frame_index, t_cls,
                        pose_embedding=None, ray_embedding=None):
        """Build the per-frame token matrix with priors applied.

        Row layout: camera, registers, class, patches. Frame 0 uses the
        distinct first-frame camera/register parameters.
        """
        s = self.store.params
        c = self.cfg.embed_dim
        cam = s["tokens.camera_first"] if frame_index == 0 else s["tokens.camera"]
        reg = s["tokens.register_first"] if frame_index == 0 else s["tokens.register"]
        if pose_embedding is not None:
            if pose_embedding.shape != (1, c):
                raise ModelError(f"pose embedding shape {pose_embedding.shape}")
            cam = cam + pose_embedding
        if ray_embedding is not None:
            if ray_embedding.shape != t_pt.shape:
                raise ModelError(f"ray embedding shape {ray_embedding.shape}")
            t_pt = t_pt + ray_embedding
        return row_concat([cam, reg, t_cls, t_pt])

    def aggregate(self, frames):
        """Alternate frame-level and global attention blocks over all tokens.

        Returns (aggregated camera token, aggregated patch tokens) per frame;
        class and register tokens participate but are not exported.
        """
        if not frames:
            raise ModelError("aggregate: empty frame list")
        xs = list(frames)
        n = len(xs)
        t = self.tokens_per_frame
        for i in range(self.cfg.aggregator_blocks):
            prefix = f"agg.{i}"
            if i % 2 == 0:  # frame-level
                xs = [self._block(x, prefix) for x in xs]
            else:  # global over the concatenation of all frames
                merged = self._block(row_concat(xs), prefix)
                xs = [ad.slice_axis(merged, 0, j * t, (j + 1) * t) for j in range(n)]
        cams = [ad.slice_axis(x, 0, self.CAM_ROW, self.CAM_ROW + 1) for x in xs]
        patches = [ad.slice_axis(x, 0, self.patch_row, t) for x in xs]
        return cams, patches

    def camera_head(self, agg_cams):
        """Aggregated camera tokens -> per-frame camera parameters.

        Frame 0 is the coordinate anchor: identity rotation and zero
        translation by construction; its fov is still predicted.
        """
        x = row_concat(agg_cams)  # (N, C)
        x = self._block(x, "camera_head.block")
        s = self.store.params
        raw = x @ s["camera_head.out_w"] + s["camera_head.out_b"]  # (N, 9)
        out = []
        for i in range(len(agg_cams)):
            row = ad.slice_axis(raw, 0, i, i + 1)
            fov = ad.sigmoid(ad.slice_axis(row, 1, 7, 9)) * np.pi
            if i == 0:
                q = ad.Tensor([[1.0, 0.0, 0.0, 0.0]])
                t = ad.Tensor([[0.0, 0.0, 0.0]])
            else:
                q = ad.l2_normalize(ad.slice_axis(row, 1, 0, 4))
                t = ad.slice_axis(row, 1, 4, 7)
            out.append(CameraPrediction(q=q, t=t, f=fov))
        return out

    def dense_head(self, agg_patches):
        """Aggregated patch tokens -> dense depth / points with confidences."""
        s = self.store.params
        g = self.cfg.grid
        cm = self.dense_mid
        r = self.dense_pix
        out = []
        for patch in agg_patches:
            x = ad.reshape(patch, (g, g, self.cfg.embed_dim))
            x = ad.relu(x @ s["dense.up1_w"] + s["dense.up1_b"])
            x = _pixel_shuffle(x, 2, cm)
            x = ad.relu(x @ s["dense.up2_w"] + s["dense.up2_b"])
            x = _pixel_shuffle(x, 2, cm)
            x = x @ s["dense.out_w"] + s["dense.out_b"]
            x = _pixel_shuffle(x, r, 6)  # (H, W, 6)
            n = self.cfg.image_size
            depth = ad.exp(ad.reshape(ad.slice_axis(x, 2, 0, 1), (n, n)))
            dconf = ad.exp(ad.reshape(ad.slice_axis(x, 2, 1, 2), (n, n)))
            points = ad.slice_axis(x, 2, 2, 5)
            pconf = ad.exp(ad.reshape(ad.slice_axis(x, 2, 5, 6), (n, n)))
            out.append(DensePrediction(depth=depth, depth_conf=dconf,
                                       points=points, point_conf=pconf))
        return out

    def scale_head(self, agg_cams, agg_patches, class_tokens,
                   pose_embeddings=None, ray_embeddings=None):
        """Scene scale from normalized token concat + MLP + exp, frame-averaged.

        Prior embeddings enter before normalization (pose) and before the
        pooling layer (ray). Routing respects the ablation switches: with the
        camera token disabled, pose embeddings land on the class tokens.
        """
        if not (len(agg_cams) == len(agg_patches) == len(class_tokens)):
            raise ModelError("scale_head: token lists have mismatched frame counts")
        cfg = self.cfg
        if not cfg.scale_head_enabled:
            return ad.Tensor(1.0)
        s = self.store.params
        n = len(agg_cams)
        per_frame = []
        for i in range(n):
            cam = agg_cams[i]
            patch = agg_patches[i]
            cls = class_tokens[i]
            if pose_embeddings is not None:
                if cfg.scale_use_camera_token:
                    cam = cam + pose_embeddings[i]
                else:
                    cls = cls + pose_embeddings[i]
            if ray_embeddings is not None:
                patch = patch + ray_embeddings[i]
            parts = []
            if cfg.scale_use_camera_token:
                parts.append(ad.layer_normalize(cam))
            if cfg.scale_use_patch_token:
                pooled = attention_pool(patch, s["scale_head.pool_w"],
                                        s["scale_head.pool_b"])
                parts.append(ad.layer_normalize(pooled))
            if cfg.scale_use_class_token:
                parts.append(ad.layer_normalize(cls))
            merged = ad.concat(parts) if len(parts) > 1 else parts[0]
            h = ad.relu(merged @ s["scale_head.mlp_w1"] + s["scale_head.mlp_b1"])
            per_frame.append(ad.exp(h @ s["scale_head.mlp_w2"] + s["scale_head.mlp_b2"]))
        total = per_frame[0]
        for t in per_frame[1:]:
            total = total + t
        return ad.reshape(total * (1.0 / n), ())

    # ------------------------------------------------------------------
    # full forward

    def encode_priors(self, bundle: pr.PriorBundle, n_frames, scale_norm=None):
        """Per-frame pose / ray embeddings for an injected prior bundle."""
        pose_embs = None
        ray_embs = None
        if bundle is None or not self.cfg.prior_injection:
            return pose_embs, ray_embs
        if bundle.has_pose:
            if len(bundle.poses) != n_frames:
                raise ModelError("pose prior count does not match frame count")
            norm = pr.prior_scale_norm(bundle, scale_norm)
            pose_embs = [self.pose_encoder.encode(p, norm) for p in bundle.poses]
        if bundle.has_intrinsics:
            if len(bundle.intrinsics) != n_frames:
                raise ModelError("intrinsics prior count does not match frame count")
            ray_embs = [self.ray_encoder.encode(k) for k in bundle.intrinsics]
        return pose_embs, ray_embs

    def forward(self, images, priors: pr.PriorBundle | None = None, scale_norm=None):
        """End-to-end: images (+ optional priors) -> cameras, dense maps, scale."""
        if len(images) < 1:
            raise ModelError("forward: at least one frame required")
        n = len(images)
        cls_tokens, patch_tokens = [], []
        for img in images:
            t_cls, t_pt = self.patchify_embed(img)
            cls_tokens.append(t_cls)
            patch_tokens.append(t_pt)

        pose_embs, ray_embs = self.encode_priors(priors, n, scale_norm)

        frames = []
        for i in range(n):
            frames.append(self.assemble_tokens(
                patch_tokens[i], i, cls_tokens[i],
                pose_embedding=None if pose_embs is None else pose_embs[i],
                ray_embedding=None if ray_embs is None else ray_embs[i]))
        agg_cams, agg_patches = self.aggregate(frames)
        cameras = self.camera_head(agg_cams)
        dense = self.dense_head(agg_patches)
        sh_pose = pose_embs if self.cfg.prior_to_scale_head else None
        sh_ray = ray_embs if self.cfg.prior_to_scale_head else None
        scale = self.scale_head(agg_cams, agg_patches, cls_tokens,
                                pose_embeddings=sh_pose, ray_embeddings=sh_ray)
        return Prediction(cameras=cameras, dense=dense, scale=scale,
                          class_tokens=cls_tokens, agg_camera=agg_cams,
                          agg_patch=agg_patches)


def _pixel_shuffle(x, r, channels):
    """(g, g, r*r*channels) -> (r*g, r*g, channels) learned-upsampling reshuffle."""
    g = x.shape[0]
    if r == 1:
        return ad.reshape(x, (g, g, channels))
    x = ad.reshape(x, (g, g, r, r, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (g * r, g * r, channels))


def metricize(dense, cameras, scale):
    """Scale normalized predictions into metric units (numpy, inference side).

    Returns (depths, points, cameras) with depth/points/translation multiplied
    by ``scale``; rotations and fov untouched.
    """
    s = float(scale.data) if isinstance(scale, ad.Tensor) else float(scale)
    if s <= 0:
        raise ModelError("metricize: scale must be positive")
    depths = [d.depth.data * s for d in dense]
    points = [d.points.data * s for d in dense]
    cams = []
    for c in cameras:
        p = c.as_param() if isinstance(c, CameraPrediction) else c
        cams.append(geo.CameraParam(p.q, p.t * s, p.f))
    return depths, points, cams


def config_to_json(cfg: ModelConfig):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
