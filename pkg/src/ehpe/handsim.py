"""Synthetic kinematic hand generator.

Joint order is fixed as ``[W, thumb MCP, PIP, DIP, TIP, index ..., middle ...,
ring ..., pinky ...]``; the thumb is a four-joint chain like the other fingers
so every hand has exactly 5 TIP, 5 DIP, 5 PIP, 5 MCP and 1 wrist.

Coordinates: image pixels have integer centres, ``x`` is the column and ``y``
the row; depth ``z`` is in discrete-depth units in ``[0, d)``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_JOINTS = 21
N_FINGERS = 5
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

W, MCP, PIP, DIP, TIP = 0, 1, 2, 3, 4
CATEGORY_NAMES = ("W", "MCP", "PIP", "DIP", "TIP")
CATEGORY = np.array([W] + [MCP, PIP, DIP, TIP] * N_FINGERS, dtype=np.uint8)
PARENT = np.array([-1] + [p for f in range(N_FINGERS) for p in (0, 4 * f + 1, 4 * f + 2, 4 * f + 3)])

# kinematic bones as (parent, child), one per non-root joint
BONES = tuple((int(PARENT[j]), j) for j in range(1, N_JOINTS))


def finger_joints(f: int) -> list[int]:
    """Indices of MCP, PIP, DIP, TIP of finger ``f``."""
    return [4 * f + 1 + k for k in range(4)]


@dataclass(frozen=True)
class Skeleton:
    """Bone lengths per finger: (wrist->MCP, MCP->PIP, PIP->DIP, DIP->TIP)."""

    bone_lengths: np.ndarray = field(default_factory=lambda: np.array([
        [0.45, 0.45, 0.35, 0.30],
        [0.95, 0.45, 0.28, 0.22],
        [0.95, 0.50, 0.32, 0.24],
        [0.90, 0.47, 0.30, 0.23],
        [0.85, 0.36, 0.23, 0.20],
    ]))
    # in-plane direction of each metacarpal, radians from +Y towards +X
    palm_angles: np.ndarray = field(default_factory=lambda: np.deg2rad([-45.0, -12.0, 0.0, 12.0, 24.0]))
    # extra in-plane offset of the finger chain relative to its metacarpal
    finger_offsets: np.ndarray = field(default_factory=lambda: np.deg2rad([-20.0, 0.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        bl = np.asarray(self.bone_lengths, dtype=float)
        if bl.shape != (N_FINGERS, 4) or np.any(bl <= 0):
            raise ValueError("bone_lengths must be 5x4 positive values")
        object.__setattr__(self, "bone_lengths", bl)

    @property
    def parent(self) -> np.ndarray:
        return PARENT

    @property
    def category(self) -> np.ndarray:
        return CATEGORY

    def bone_length(self, child: int) -> float:
        f, k = divmod(child - 1, 4)
        return float(self.bone_lengths[f, k])


@dataclass(frozen=True)
class PoseLimits:
    """Angle ranges in degrees, each a (low, high) pair."""

    mcp_flex: tuple[float, float] = (-10.0, 90.0)
    pip_flex: tuple[float, float] = (0.0, 100.0)
    dip_flex: tuple[float, float] = (0.0, 80.0)
    abduction: tuple[float, float] = (-15.0, 15.0)
    global_x: tuple[float, float] = (-30.0, 30.0)
    global_y: tuple[float, float] = (-30.0, 30.0)
    global_z: tuple[float, float] = (-45.0, 45.0)

    @classmethod
    def zero(cls) -> "PoseLimits":
        z = (0.0, 0.0)
        return cls(z, z, z, z, z, z, z)

    def ranges(self) -> dict[str, tuple[float, float]]:
        out = {k: tuple(getattr(self, k)) for k in self.__dataclass_fields__}
        for k, (lo, hi) in out.items():
            if not lo <= hi:
                raise ValueError(f"empty range for {k}: ({lo}, {hi})")
        return out


@dataclass(frozen=True)
class HandPose:
    """Finger angles (5, 4) as [mcp_flex, abduction, pip_flex, dip_flex] and a
    global XYZ Euler rotation, all in radians."""

    fingers: np.ndarray
    global_rot: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.fingers.reshape(-1), self.global_rot])


def sample_pose(rng_seed, limits: PoseLimits | None = None) -> HandPose:
    """Draw joint angles uniformly within ``limits``.

    ``rng_seed`` may be an int, a seed sequence entry list, or a Generator
    (consumed in place, which is how redraws continue the stream).
    """
    limits = limits or PoseLimits()
    r = limits.ranges()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)

    def draw(key, size=None):
        lo, hi = r[key]
        return np.deg2rad(rng.uniform(lo, hi, size))

    fingers = np.stack([draw("mcp_flex", 5), draw("abduction", 5), draw("pip_flex", 5), draw("dip_flex", 5)], axis=1)
    global_rot = np.array([draw("global_x"), draw("global_y"), draw("global_z")])
    return HandPose(fingers, global_rot)


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def forward_kinematics(pose: HandPose, skeleton: Skeleton | None = None) -> np.ndarray:
    """21x3 joint positions with the wrist at the origin.

    The palm lies in the XY plane with normal +Z. Flexion bends a finger out
    of the palm plane towards -Z, accumulating along the chain.
    """
    sk = skeleton or Skeleton()
    normal = np.array([0.0, 0.0, 1.0])
    joints = np.zeros((N_JOINTS, 3))
    for f in range(N_FINGERS):
        mcp_flex, abd, pip_flex, dip_flex = pose.fingers[f]
        phi = sk.palm_angles[f]
        idx = finger_joints(f)
        joints[idx[0]] = sk.bone_lengths[f, 0] * np.array([np.sin(phi), np.cos(phi), 0.0])
        psi = phi + sk.finger_offsets[f] + abd
        u = np.array([np.sin(psi), np.cos(psi), 0.0])
        theta = 0.0
        for k, flex in enumerate((mcp_flex, pip_flex, dip_flex)):
            theta += flex
            direction = np.cos(theta) * u - np.sin(theta) * normal
            joints[idx[k + 1]] = joints[idx[k]] + sk.bone_lengths[f, k + 1] * direction
    return joints @ _rotation(*pose.global_rot).T


class OutOfFrame(ValueError):
    """Projected joints fall outside the image or depth range; redraw."""


@dataclass(frozen=True)
class Camera:
    """Orthographic camera: pixels = scale * (X, Y) + center; depth mapped
    linearly from ``depth_range`` onto ``[0, d)``."""

    scale: float = 18.0
    center: tuple[float, float] = (32.0, 16.0)
    depth_range: tuple[float, float] = (-2.0, 2.0)
    d: int = 8
    image_size: tuple[int, int] = (64, 64)  # (H, W)

    def shifted(self, dx: float, dy: float) -> "Camera":
        return Camera(self.scale, (self.center[0] + dx, self.center[1] + dy), self.depth_range, self.d,
                      self.image_size)


def project_to_25d(joints3d: np.ndarray, camera: Camera | None = None, check: bool = True) -> np.ndarray:
    cam = camera or Camera()
    lo, hi = cam.depth_range
    out = np.empty_like(np.asarray(joints3d, dtype=float))
    out[:, 0] = cam.scale * joints3d[:, 0] + cam.center[0]
    out[:, 1] = cam.scale * joints3d[:, 1] + cam.center[1]
    out[:, 2] = cam.d * (joints3d[:, 2] - lo) / (hi - lo)
    if check and not in_frame(out, cam):
        raise OutOfFrame("joints outside image or depth range")
    return out


def unproject_from_25d(joints25d: np.ndarray, camera: Camera | None = None) -> np.ndarray:
    cam = camera or Camera()
    lo, hi = cam.depth_range
    out = np.empty_like(np.asarray(joints25d, dtype=float))
    out[:, 0] = (joints25d[:, 0] - cam.center[0]) / cam.scale
    out[:, 1] = (joints25d[:, 1] - cam.center[1]) / cam.scale
    out[:, 2] = joints25d[:, 2] * (hi - lo) / cam.d + lo
    return out


def in_frame(joints25d: np.ndarray, camera: Camera | None = None) -> bool:
    cam = camera or Camera()
    h, w = cam.image_size
    x, y, z = joints25d[:, 0], joints25d[:, 1], joints25d[:, 2]
    return bool(np.all((x >= 0) & (x < w) & (y >= 0) & (y < h) & (z >= 0) & (z < cam.d)))


# ------------------------------------------------------------------ rendering

FINGER_COLORS = np.array([
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
])
WRIST_COLOR = np.array([1.0, 1.0, 1.0])
BONE_WIDTH = 0.7
BLOB_SIGMA = 0.9
SUPPORT = 3.0  # pixels; nothing is drawn farther than this from a primitive


def _depth_brightness(z, d: int) -> float:
    return 1.0 - 0.6 * float(z) / d


def _joint_color(j: int) -> np.ndarray:
    return WRIST_COLOR if j == 0 else FINGER_COLORS[(j - 1) // 4]


def render_image(joints25d: np.ndarray, skeleton: Skeleton | None = None, image_size=(64, 64),
                 d: int = 8) -> np.ndarray:
    """Rasterise a hand into a (3, H, W) image in [0, 1].

    Bones are drawn only when all 21 joints are given; any joint subset is
    drawn as blobs. Primitives are composited with a per-channel maximum.
    """
    h, w = image_size
    img = np.zeros((3, h, w))
    joints25d = np.asarray(joints25d, dtype=float).reshape(-1, 3)
    if len(joints25d) == 0:
        return img
    ys, xs = np.mgrid[0:h, 0:w].astype(float)

    def stamp(intensity, color):
        np.maximum(img, color[:, None, None] * intensity[None], out=img)

    if len(joints25d) == N_JOINTS:
        for parent, child in BONES:
            a, b = joints25d[parent], joints25d[child]
            ab = b[:2] - a[:2]
            denom = float(ab @ ab)
            t = np.zeros_like(xs) if denom == 0 else np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0, 1)
            dist2 = (xs - a[0] - t * ab[0]) ** 2 + (ys - a[1] - t * ab[1]) ** 2
            prof = np.exp(-dist2 / (2 * BONE_WIDTH ** 2)) * (dist2 <= SUPPORT ** 2)
            zmid = a[2] + t * (b[2] - a[2])
            stamp(0.8 * prof * (1.0 - 0.6 * zmid / d), _joint_color(child))
    for j, (x, y, z) in enumerate(joints25d):
        dist2 = (xs - x) ** 2 + (ys - y) ** 2
        blob = np.exp(-dist2 / (2 * BLOB_SIGMA ** 2)) * (dist2 <= SUPPORT ** 2)
        stamp(blob * _depth_brightness(z, d), _joint_color(j) if len(joints25d) == N_JOINTS else WRIST_COLOR)
    return img


# ------------------------------------------------------------------ dataset

MAGIC = b"EHPEDS1"
VERSION = 1
SPLIT_SCHEME_SHA256_MOD10 = 1
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<7sHQIIIIB3Q")  # magic, version, n, C, H, W, d, scheme, n_train, n_val, n_test


def record_dtype(c: int = 3, h: int = 64, w: int = 64) -> np.dtype:
    return np.dtype([
        ("image", "<f8", (c, h, w)),
        ("joints25d", "<f8", (N_JOINTS, 3)),
        ("category", "u1", (N_JOINTS,)),
        ("sample_id", "<i8"),
    ])


def split_of(sample_id: int) -> int:
    """0 train, 1 val, 2 test; 80/10/10 by SHA-256 of the decimal id."""
    bucket = int.from_bytes(hashlib.sha256(str(int(sample_id)).encode()).digest()[:8], "little") % 10
    return 0 if bucket < 8 else (1 if bucket == 8 else 2)


@dataclass
class HandSample:
    image: np.ndarray
    joints25d: np.ndarray
    category: np.ndarray
    sample_id: int


@dataclass
class HandDataset:
    images: np.ndarray      # (N, 3, H, W)
    joints25d: np.ndarray   # (N, 21, 3)
    category: np.ndarray    # (N, 21) uint8
    sample_ids: np.ndarray  # (N,) int64
    d: int = 8

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, i: int) -> HandSample:
        return HandSample(self.images[i], self.joints25d[i], self.category[i], int(self.sample_ids[i]))

    @property
    def splits(self) -> np.ndarray:
        return np.array([split_of(s) for s in self.sample_ids], dtype=np.int8)

    def subset(self, split: str | np.ndarray) -> "HandDataset":
        mask = self.splits == SPLITS.index(split) if isinstance(split, str) else np.asarray(split)
        return HandDataset(self.images[mask], self.joints25d[mask], self.category[mask], self.sample_ids[mask],
                           self.d)


def generate_sample(sample_id: int, seed: int, limits: PoseLimits | None = None,
                    skeleton: Skeleton | None = None, camera: Camera | None = None,
                    jitter_px: float = 3.0, max_tries: int = 1000) -> HandSample:
    """One sample from its own RNG stream, so generation order never matters."""
    sk, cam = skeleton or Skeleton(), camera or Camera()
    rng = np.random.default_rng([int(seed), int(sample_id)])
    for _ in range(max_tries):
        pose = sample_pose(rng, limits)
        dx, dy = rng.uniform(-jitter_px, jitter_px, 2)
        try:
            j25 = project_to_25d(forward_kinematics(pose, sk), cam.shifted(dx, dy))
        except OutOfFrame:
            continue
        img = render_image(j25, sk, cam.image_size, cam.d)
        return HandSample(img, j25, CATEGORY.copy(), int(sample_id))
    raise RuntimeError(f"sample {sample_id}: no in-frame pose after {max_tries} draws")


def make_dataset(n: int, seed: int, path=None, **kwargs) -> HandDataset:
    """Generate ``n`` samples (ids 0..n-1) and optionally write them to ``path``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [generate_sample(i, seed, **kwargs) for i in range(n)]
    ds = HandDataset(
        images=np.stack([s.image for s in samples]),
        joints25d=np.stack([s.joints25d for s in samples]),
        category=np.stack([s.category for s in samples]),
        sample_ids=np.arange(n, dtype=np.int64),
        d=(kwargs.get("camera") or Camera()).d,
    )
    if path is not None:
        write_dataset(ds, path)
    return ds


def write_dataset(ds: HandDataset, path) -> None:
    path = Path(path)
    n, c, h, w = ds.images.shape
    counts = np.bincount(ds.splits, minlength=3)
    recs = np.empty(n, dtype=record_dtype(c, h, w))
    recs["image"] = ds.images
    recs["joints25d"] = ds.joints25d
    recs["category"] = ds.category
    recs["sample_id"] = ds.sample_ids
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.d, SPLIT_SCHEME_SHA256_MOD10, *map(int, counts)))
            fh.write(recs.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror or exc}") from exc


class DatasetFormatError(ValueError):
    pass


def read_dataset(path) -> HandDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, d, scheme, *counts = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION or scheme != SPLIT_SCHEME_SHA256_MOD10:
        raise DatasetFormatError(f"{path}: unsupported version {version} / split scheme {scheme}")
    dt = record_dtype(c, h, w)
    if len(raw) != _HEADER.size + n * dt.itemsize:
        raise DatasetFormatError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    recs = np.frombuffer(raw, dtype=dt, count=n, offset=_HEADER.size)
    ds = HandDataset(np.array(recs["image"]), np.array(recs["joints25d"]), np.array(recs["category"]),
                     np.array(recs["sample_id"]), int(d))
    if list(np.bincount(ds.splits, minlength=3)) != counts:
        raise DatasetFormatError(f"{path}: split counts in header do not match records")
    return ds
