"""Procedural pose-variant glyph dataset and preprocessing.

Each identity is a unique closed polyline glyph with an asymmetry mark.
"Frontal" is the plain rasterization; "profile" is a fixed horizontal
shear-plus-rotation warp of it. Per-view jitter (small rotation, brightness)
distinguishes views of the same identity and pose. Everything is a pure
function of its seeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import Tensor

BACKGROUND = 16
FOREGROUND = 230
SUPERSAMPLE = 4

# the fixed "profile" warp: rotate then shear horizontally about the center
POSE_ROTATION_DEG = 18.0
POSE_SHEAR = 0.35

FRONTAL, PROFILE = 0, 1

MAGIC = b"PIGD"
VERSION = 1


@dataclass(frozen=True)
class GlyphIdentity:
    identity_id: int
    seed: int
    stroke_params: tuple  # (n_vertices, angles..., radii..., mark_angle, mark_radius, mark_size)


def generate_identity(identity_id: int, master_seed: int) -> GlyphIdentity:
    rng = np.random.default_rng([master_seed, identity_id])
    n = int(rng.integers(5, 10))
    base = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    angles = base + rng.uniform(-0.25, 0.25, n)
    radii = rng.uniform(0.22, 0.45, n)
    mark_angle = float(rng.uniform(0.0, 2.0 * math.pi))
    mark_radius = float(rng.uniform(0.08, 0.16))
    mark_size = float(rng.uniform(0.035, 0.06))
    params = (float(n), *angles.tolist(), *radii.tolist(),
              mark_angle, mark_radius, mark_size)
    return GlyphIdentity(identity_id, master_seed, params)


def _unpack_params(params):
    n = int(params[0])
    angles = params[1 : 1 + n]
    radii = params[1 + n : 1 + 2 * n]
    mark_angle, mark_radius, mark_size = params[1 + 2 * n :]
    return n, angles, radii, mark_angle, mark_radius, mark_size


def _affine_about_center(side: int, rotation_deg: float, shear: float):
    """Inverse-map coefficients for PIL.Image.transform (output -> input)."""
    c = (side - 1) / 2.0
    th = math.radians(rotation_deg)
    # forward: shear @ rotation
    a11 = math.cos(th) + shear * math.sin(th)
    a12 = -math.sin(th) + shear * math.cos(th)
    a21 = math.sin(th)
    a22 = math.cos(th)
    det = a11 * a22 - a12 * a21
    i11, i12 = a22 / det, -a12 / det
    i21, i22 = -a21 / det, a11 / det
    # p_in = A_inv (p_out - c) + c
    return (i11, i12, c - i11 * c - i12 * c,
            i21, i22, c - i21 * c - i22 * c)


def _warp(img: np.ndarray, rotation_deg: float, shear: float) -> np.ndarray:
    side = img.shape[0]
    pil = Image.fromarray(img, mode="L")
    coeffs = _affine_about_center(side, rotation_deg, shear)
    out = pil.transform((side, side), Image.AFFINE, coeffs,
                        resample=Image.BILINEAR, fillcolor=BACKGROUND)
    return np.asarray(out, dtype=np.uint8)


def apply_pose_transform(img: np.ndarray) -> np.ndarray:
    """The fixed frontal -> profile image warp."""
    return _warp(img, POSE_ROTATION_DEG, POSE_SHEAR)


def polygon_area(xs, ys) -> float:
    """Shoelace area of a closed polygon."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    return 0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))


def glyph_polygon(identity: GlyphIdentity, side: int):
    """Vertex coordinates of the glyph polygon on a side x side canvas."""
    n, angles, radii, _, _, _ = _unpack_params(identity.stroke_params)
    c = (side - 1) / 2.0
    xs = [c + r * side * math.cos(a) for a, r in zip(angles, radii)]
    ys = [c + r * side * math.sin(a) for a, r in zip(angles, radii)]
    return xs, ys


def render(identity: GlyphIdentity, pose: int, side: int) -> np.ndarray:
    """Rasterize one glyph at the given pose; returns u8 (side, side)."""
    if side < 16:
        raise ValueError(f"render: side must be >= 16, got {side}")
    if pose not in (FRONTAL, PROFILE):
        raise ValueError(f"render: pose label must be 0 or 1, got {pose}")
    from PIL import ImageDraw

    ss = side * SUPERSAMPLE
    n, angles, radii, ma, mr, msz = _unpack_params(identity.stroke_params)
    c = (ss - 1) / 2.0
    pts = [(c + r * ss * math.cos(a), c + r * ss * math.sin(a))
           for a, r in zip(angles, radii)]
    img = Image.new("L", (ss, ss), BACKGROUND)
    draw = ImageDraw.Draw(img)
    draw.polygon(pts, fill=FOREGROUND)
    # asymmetry mark: a dark hole offset from the center
    mx, my = c + mr * ss * math.cos(ma), c + mr * ss * math.sin(ma)
    rad = msz * ss
    draw.ellipse((mx - rad, my - rad, mx + rad, my + rad), fill=BACKGROUND)
    frontal = np.asarray(
        img.resize((side, side), Image.BILINEAR), dtype=np.uint8
    )
    if pose == FRONTAL:
        return frontal
    return apply_pose_transform(frontal)


def jitter_view(img: np.ndarray, rng) -> np.ndarray:
    """Per-view augmentation: rotation within +-5 degrees, brightness +-10%."""
    angle = float(rng.uniform(-5.0, 5.0))
    bright = float(rng.uniform(0.9, 1.1))
    out = _warp(img, angle, 0.0).astype(np.float64) * bright
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def preprocess(raw: np.ndarray, crop_side: int, rng=None) -> Tensor:
    """Crop and scale a u8 image to a (1, crop, crop) tensor in [-1, 1].

    With an rng, the crop offset is random (training); without, it is
    centered and deterministic (eval).
    """
    side = raw.shape[0]
    if crop_side > side:
        raise ValueError(f"preprocess: crop {crop_side} exceeds image side {side}")
    margin = side - crop_side
    if rng is not None:
        oy = int(rng.integers(0, margin + 1))
        ox = int(rng.integers(0, margin + 1))
    else:
        oy = ox = margin // 2
    crop = raw[oy : oy + crop_side, ox : ox + crop_side]
    data = crop.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return Tensor(data[None, :, :])


@dataclass
class DatasetFile:
    num_identities: int
    frontal_views: int
    profile_views: int
    side: int
    images: np.ndarray  # (N, side, side) u8, identity-major
    identity_labels: np.ndarray  # (N,) u32
    pose_labels: np.ndarray  # (N,) u8

    @property
    def num_samples(self) -> int:
        return self.images.shape[0]

    def indices_for(self, identity_ids) -> np.ndarray:
        wanted = set(int(i) for i in identity_ids)
        return np.array(
            [i for i, y in enumerate(self.identity_labels) if int(y) in wanted],
            dtype=np.int64,
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HIIII", VERSION, self.num_identities,
                                 self.frontal_views, self.profile_views, self.side))
            for img, yid, yp in zip(self.images, self.identity_labels,
                                    self.pose_labels):
                fh.write(img.tobytes())
                fh.write(struct.pack("<IB", int(yid), int(yp)))

    @classmethod
    def load(cls, path) -> "DatasetFile":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise ValueError(f"not a glyph dataset file (magic {magic!r})")
            header = fh.read(18)
            if len(header) != 18:
                raise ValueError("truncated dataset header")
            version, n_id, n_f, n_p, side = struct.unpack("<HIIII", header)
            if version != VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            n = n_id * (n_f + n_p)
            images = np.empty((n, side, side), dtype=np.uint8)
            yid = np.empty(n, dtype=np.uint32)
            yp = np.empty(n, dtype=np.uint8)
            for i in range(n):
                block = fh.read(side * side + 5)
                if len(block) != side * side + 5:
                    raise ValueError(f"truncated dataset at sample {i}")
                images[i] = np.frombuffer(
                    block[: side * side], dtype=np.uint8
                ).reshape(side, side)
                yid[i], yp[i] = struct.unpack("<IB", block[side * side :])
        return cls(n_id, n_f, n_p, side, images, yid, yp)


def build_dataset(num_identities: int, frontal_views: int, profile_views: int,
                  side: int, master_seed: int) -> DatasetFile:
    if num_identities < 1 or frontal_views < 1 or profile_views < 1:
        raise ValueError("build_dataset: identity and view counts must be >= 1")
    images, yid, yp = [], [], []
    for ident_id in range(num_identities):
        ident = generate_identity(ident_id, master_seed)
        for pose, count in ((FRONTAL, frontal_views), (PROFILE, profile_views)):
            base = render(ident, pose, side)
            for view in range(count):
                rng = np.random.default_rng([master_seed, ident_id, pose, view])
                images.append(jitter_view(base, rng))
                yid.append(ident_id)
                yp.append(pose)
    return DatasetFile(
        num_identities, frontal_views, profile_views, side,
        np.stack(images), np.array(yid, dtype=np.uint32),
        np.array(yp, dtype=np.uint8),
    )


def split(dataset: DatasetFile, train_fraction: float = 0.9, seed: int = 0):
    """Identity-disjoint train/test split; returns (train_ids, test_ids)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"split: train_fraction must be in (0,1), got {train_fraction}")
    n = dataset.num_identities
    if n < 2:
        raise ValueError("split: need at least 2 identities")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train = sorted(int(i) for i in perm[:n_train])
    test = sorted(int(i) for i in perm[n_train:])
    return train, test
