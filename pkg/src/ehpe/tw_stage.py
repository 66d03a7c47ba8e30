"""TIP-and-wrist stage: encoder, 2D heatmap head, refinement to a 2.5D
heatmap volume, soft-argmax decoding and the stage-one loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .handsim import CATEGORY, CATEGORY_NAMES, N_JOINTS
from .nn import Params, add_conv, conv, l1_penalty

LAMBDA_H = 3.0
LAMBDA_ED = 1e-2
LAMBDA_R = 1e-2

_LETTER = {"W": "W", "T": "TIP", "D": "DIP", "P": "PIP", "M": "MCP"}


def parse_joint_set(spec: str) -> tuple[int, ...]:
    """``"W+T"`` -> indices of the wrist and the five fingertips, in joint order."""
    cats = set()
    for tok in spec.replace(" ", "").split("+"):
        if tok not in _LETTER:
            raise ValueError(f"unknown joint category {tok!r} in {spec!r} (use W, T, D, P, M)")
        cats.add(CATEGORY_NAMES.index(_LETTER[tok]))
    return tuple(int(j) for j in range(N_JOINTS) if CATEGORY[j] in cats)


def pixel_to_cell(xy: np.ndarray, stride: int) -> np.ndarray:
    """Pixel coordinates (integer centres) -> cell coordinates of a map
    downsampled by ``stride``."""
    return (np.asarray(xy, dtype=float) + 0.5) / stride - 0.5


def cell_to_pixel(uv, stride: int):
    return uv * stride + (stride - 1) / 2.0


@dataclass(frozen=True)
class ModelConfigTW:
    image_size: tuple[int, int] = (64, 64)
    heatmap_stride: int = 4
    feature_stride: int = 32
    d: int = 8
    tw_joints: str = "W+T"
    channels: tuple[int, ...] = (16, 32, 64, 128)
    head_width: int = 16
    refine_width: int = 16
    refine_blocks: int = 4
    refine_pools: int = 2
    sigma: tuple[float, float] = (1.5, 1.5)
    refined_at_feature_res: bool = False

    def __post_init__(self):
        h, w = self.image_size
        if h % self.feature_stride or w % self.feature_stride:
            raise ValueError("image size must be divisible by the feature stride")
        if 2 ** (len(self.channels) + 1) != self.feature_stride:
            raise ValueError("stem (/4) plus one stride-2 block per extra channel entry must reach feature_stride")
        if self.refine_blocks < 2 * self.refine_pools:
            raise ValueError("refinement needs two residual blocks per max-pool (down and up path)")
        if min(self.sigma) <= 0:
            raise ValueError("sigma must be positive")
        parse_joint_set(self.tw_joints)

    @property
    def joints(self) -> tuple[int, ...]:
        return parse_joint_set(self.tw_joints)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.heatmap_stride, self.image_size[1] // self.heatmap_stride

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.feature_stride, self.image_size[1] // self.feature_stride

    @property
    def volume_stride(self) -> int:
        return self.feature_stride if self.refined_at_feature_res else self.heatmap_stride

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfigTW":
        d = dict(d)
        for k in ("image_size", "channels", "sigma"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ------------------------------------------------------------------ Gaussian targets

def gaussian_target(joint_xy, sigma_x: float, sigma_y: float, h: int, w: int) -> np.ndarray:
    """Normalised 2D Gaussian evaluated at cell centres of an h x w map.

    ``joint_xy`` = (x, y) in cell units, x along columns. The peak value is
    1 / (2 pi sigma_x sigma_y) when the joint sits on a cell centre.
    """
    if sigma_x <= 0 or sigma_y <= 0:
        raise ValueError("sigma must be positive")
    x, y = float(joint_xy[0]), float(joint_xy[1])
    if not (-0.5 <= x <= w - 0.5 and -0.5 <= y <= h - 0.5):
        raise ValueError(f"joint ({x:.3f}, {y:.3f}) outside the {h}x{w} heatmap")
    cols = np.arange(w, dtype=float)
    rows = np.arange(h, dtype=float)
    gx = np.exp(-((x - cols) ** 2) / (2 * sigma_x ** 2))
    gy = np.exp(-((y - rows) ** 2) / (2 * sigma_y ** 2))
    return np.outer(gy, gx) / (2 * np.pi * sigma_x * sigma_y)


def gaussian_targets(joints_xy: np.ndarray, sigma, h: int, w: int) -> np.ndarray:
    """Vectorised :func:`gaussian_target` for (..., J, 2) -> (..., J, h, w)."""
    sx, sy = sigma
    x, y = joints_xy[..., 0:1], joints_xy[..., 1:2]
    gx = np.exp(-((x - np.arange(w)) ** 2) / (2 * sx ** 2))
    gy = np.exp(-((y - np.arange(h)) ** 2) / (2 * sy ** 2))
    return gy[..., :, None] * gx[..., None, :] / (2 * np.pi * sx * sy)


# ------------------------------------------------------------------ soft-argmax

def coordinate_grid(nx: int, ny: int, nd: int) -> np.ndarray:
    gx, gy, gd = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nd), indexing="ij")
    return np.stack([gx, gy, gd], axis=-1).reshape(-1, 3).astype(float)


def soft_argmax(volume: Tensor, return_probs: bool = False):
    """Expected (x, y, d) index under a softmax over the whole volume.

    ``volume`` is (X, Y, D, J) or (B, X, Y, D, J); returns (J, 3) or (B, J, 3).
    """
    volume = ad.as_tensor(volume)
    squeeze = volume.ndim == 4
    v = ad.reshape(volume, (1,) + volume.shape) if squeeze else volume
    b, nx, ny, nd, nj = v.shape
    flat = ad.reshape(ad.transpose(v, (0, 4, 1, 2, 3)), (b, nj, nx * ny * nd))
    probs = ad.softmax(flat, axis=-1)
    coords = ad.matmul(probs, Tensor(coordinate_grid(nx, ny, nd)))
    if squeeze:
        coords = ad.reshape(coords, (nj, 3))
    return (coords, probs) if return_probs else coords


# ------------------------------------------------------------------ model

@dataclass
class TWOutput:
    heatmap2d: Tensor   # (B, J, h_hm, w_hm)
    volume: Tensor      # (B, X, Y, d, J)
    featmap: Tensor     # (B, C, h, w)
    joints: Tensor      # (B, J, 3) in volume-cell units
    probs: Tensor       # (B, J, X*Y*d), softmax of the volume

    def joints_pixels(self, stride: int) -> np.ndarray:
        """Decoded joints with (x, y) in image pixels."""
        j = self.joints.data.copy()
        j[..., :2] = cell_to_pixel(j[..., :2], stride)
        return j


class TWStage:
    """Backbone-lite encoder + hourglass-lite heatmap head + refinement."""

    def __init__(self, config: ModelConfigTW | None = None, seed: int = 0):
        self.config = config or ModelConfigTW()
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> Params:
        cfg, p = self.config, Params()
        ch = cfg.channels
        add_conv(p, rng, "backbone.stem", 3, ch[0], 3)
        for i in range(1, len(ch)):
            add_conv(p, rng, f"backbone.block{i}", ch[i - 1], ch[i], 3)
        hw = cfg.head_width
        add_conv(p, rng, "head.skip", ch[0], hw, 1)
        add_conv(p, rng, "head.lateral", ch[1], hw, 1)
        add_conv(p, rng, "head.mix", hw, hw, 3)
        add_conv(p, rng, "head.out", hw, cfg.n_joints, 1)
        rw = cfg.refine_width
        add_conv(p, rng, "refine.context", ch[-1], rw, 1)
        add_conv(p, rng, "refine.in", cfg.n_joints + hw + rw, rw, 1)
        for b in range(cfg.refine_blocks):
            add_conv(p, rng, f"refine.res{b}.conv1", rw, rw, 3)
            add_conv(p, rng, f"refine.res{b}.conv2", rw, rw, 3, gain=0.1)
        add_conv(p, rng, "refine.out", rw, cfg.d * cfg.n_joints, 1, gain=0.5)
        return p

    def _res(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        y = ad.relu(conv(p, f"{name}.conv1", x))
        return ad.relu(ad.add(x, conv(p, f"{name}.conv2", y)))

    def forward(self, images) -> TWOutput:
        cfg, p = self.config, self.params
        x = ad.as_tensor(images)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.image_size):
            raise ValueError(f"expected images (B, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
        b = x.shape[0]

        # encoder: stem at /4, then one stride-2 block per channel step
        stem = ad.maxpool2d(ad.relu(conv(p, "backbone.stem", x, stride=2)), 2)
        feats = [stem]
        for i in range(1, len(cfg.channels)):
            feats.append(ad.relu(conv(p, f"backbone.block{i}", feats[-1], stride=2)))
        featmap = feats[-1]

        # hourglass-lite head at heatmap resolution
        up = ad.upsample_nearest(conv(p, "head.lateral", feats[1]), 2)
        hg = ad.relu(ad.add(conv(p, "head.skip", stem), up))
        hg = ad.relu(conv(p, "head.mix", hg))
        heat = conv(p, "head.out", hg)

        # refinement: heatmap + head features + upsampled F, then residual
        # blocks with max-pool down / nearest up
        ctx = ad.relu(conv(p, "refine.context", featmap))
        ctx = ad.upsample_nearest(ctx, cfg.feature_stride // cfg.heatmap_stride)
        r = conv(p, "refine.in", ad.concat([heat, hg, ctx], axis=1))
        skips = []
        blk = 0
        for _ in range(cfg.refine_pools):
            r = self._res(f"refine.res{blk}", r)
            skips.append(r)
            r = ad.maxpool2d(r, 2)
            blk += 1
        for _ in range(cfg.refine_blocks - 2 * cfg.refine_pools):
            r = self._res(f"refine.res{blk}", r)
            blk += 1
        for s in reversed(skips):
            r = self._res(f"refine.res{blk}", ad.add(ad.upsample_nearest(r, 2), s))
            blk += 1
        if cfg.refined_at_feature_res:
            factor = cfg.feature_stride // cfg.heatmap_stride
            r = ad.maxpool2d(r, factor)
        out = conv(p, "refine.out", r)  # (B, d*J, X', Y')
        nj, nd = cfg.n_joints, cfg.d
        hh, ww = out.shape[2], out.shape[3]
        vol = ad.reshape(out, (b, nj, nd, hh, ww))
        vol = ad.transpose(vol, (0, 4, 3, 2, 1))  # (B, x, y, d, J)
        joints, probs = soft_argmax(vol, return_probs=True)
        return TWOutput(heat, vol, featmap, joints, probs)

    __call__ = forward


# ------------------------------------------------------------------ loss

@dataclass
class LossReport:
    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.components.items()}
        out["total"] = self.total.item()
        return out


def loss_tw(pred2d: Tensor, target2d, pred_joints: Tensor, target_joints, weights: list[Tensor],
            lambdas=(LAMBDA_H, LAMBDA_ED, LAMBDA_R)) -> LossReport:
    """Stage-one loss; batched inputs average over the batch.

    L_H: per joint, summed squared heatmap error, averaged over joints.
    L_ED: squared coordinate error averaged over joints (no square root).
    L_R: summed absolute value of all weight matrices.
    """
    pred2d, pred_joints = ad.as_tensor(pred2d), ad.as_tensor(pred_joints)
    target2d, target_joints = ad.as_tensor(target2d), ad.as_tensor(target_joints)
    if pred2d.shape != target2d.shape:
        raise ValueError(f"heatmap shapes differ: {pred2d.shape} vs {target2d.shape}")
    if pred_joints.shape != target_joints.shape:
        raise ValueError(f"joint shapes differ: {pred_joints.shape} vs {target_joints.shape}")
    n_j = pred2d.shape[-3]
    n_batch = int(np.prod(pred2d.shape[:-3])) if pred2d.ndim > 3 else 1
    l_h = ad.scale(ad.square(ad.sub(target2d, pred2d)).sum(), 1.0 / (n_j * n_batch))
    l_ed = ad.scale(ad.square(ad.sub(pred_joints, target_joints)).sum(), 1.0 / (pred_joints.shape[-2] * n_batch))
    l_r = l1_penalty(weights)
    lh, led, lr = lambdas
    total = ad.add(ad.add(ad.scale(l_h, lh), ad.scale(l_ed, led)), ad.scale(l_r, lr))
    return LossReport(total, {"L_H": l_h, "L_ED": l_ed, "L_R": l_r})


def tw_targets(joints25d: np.ndarray, config: ModelConfigTW) -> tuple[np.ndarray, np.ndarray]:
    """Heatmap targets and volume-cell joint targets for the supervised set.

    ``joints25d`` is (B, 21, 3) in pixels / depth units.
    """
    sel = np.asarray(joints25d)[..., list(config.joints), :]
    hm = gaussian_targets(pixel_to_cell(sel[..., :2], config.heatmap_stride), config.sigma, *config.heatmap_size)
    tgt = sel.copy()
    tgt[..., :2] = pixel_to_cell(sel[..., :2], config.volume_stride)
    return hm, tgt
