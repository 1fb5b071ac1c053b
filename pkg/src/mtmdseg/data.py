"""Synthetic two-domain musculoskeletal volumes, slice preprocessing and exam IO.

Domain 0 ("ankle-like") holds three compact bones, domain 1
("shoulder-like") a thin curved plate and a rounded head, each with its own
intensity model and noise level.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .network import ANKLE, SHOULDER, DomainSpec

DOMAINS: tuple[DomainSpec, ...] = (ANKLE, SHOULDER)
DEFAULT_SIZE = (16, 64, 64)
DEFAULT_SPACING = (1.2, 0.4, 0.4)  # (z, y, x) mm


@dataclass
class Volume:
    exam_id: str
    domain: int
    voxels: np.ndarray  # float32 [Z, H, W]
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 4:
            raise ValueError(f"volume needs shape [Z>=4, H, W], got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")


@dataclass
class LabelVolume:
    exam_id: str
    domain: int
    labels: np.ndarray  # uint8 [Z, H, W]


@dataclass(frozen=True)
class DomainIntensity:
    background: float
    soft_tissue: float
    bones: tuple[float, ...]
    noise_sigma: float


INTENSITY = {
    0: DomainIntensity(background=0.10, soft_tissue=0.35, bones=(0.85, 0.70, 0.95), noise_sigma=0.06),
    1: DomainIntensity(background=0.25, soft_tissue=0.45, bones=(0.80, 0.70), noise_sigma=0.12),
}


def _smooth_field(rng: np.random.Generator, shape, coarse=4) -> np.ndarray:
    """Random low-frequency field in roughly [-1, 1]."""
    g = rng.uniform(-1, 1, size=(coarse,) * 3)
    return ndimage.zoom(g, [s / coarse for s in shape], order=3, mode="nearest")[: shape[0], : shape[1], : shape[2]]


def _grid_mm(size, spacing):
    z, y, x = np.meshgrid(*(np.arange(n) * s for n, s in zip(size, spacing)), indexing="ij")
    return z, y, x


def _ellipsoid(rng, grid, center, radii, wobble=0.2):
    z, y, x = grid
    d = np.sqrt(((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
                + ((x - center[2]) / radii[2]) ** 2)
    return d < 1.0 + wobble * _smooth_field(rng, z.shape)


def _curved_plate(rng, grid, center, radius, thickness, direction, half_angle):
    z, y, x = grid
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    r = np.sqrt(dz ** 2 + dy ** 2 + dx ** 2)
    shell = np.abs(r - radius * (1 + 0.08 * _smooth_field(rng, z.shape))) < thickness / 2
    cosang = (dy * direction[0] + dx * direction[1]) / np.maximum(np.sqrt(dy ** 2 + dx ** 2), 1e-9)
    return shell & (cosang > np.cos(half_angle)) & (np.abs(dz) < radius * 0.9)


def _place(rng, extent, margin):
    return np.array([rng.uniform(margin[i], extent[i] - margin[i]) for i in range(3)])


def _ankle_labels(rng, size, spacing) -> np.ndarray:
    grid = _grid_mm(size, spacing)
    extent = [n * s for n, s in zip(size, spacing)]
    labels = np.zeros(size, dtype=np.uint8)
    for lab in (1, 2, 3):
        for _ in range(200):
            radii = (rng.uniform(0.25, 0.4) * extent[0], rng.uniform(2.4, 4.0), rng.uniform(2.4, 4.0))
            c = _place(rng, extent, (0.45 * extent[0], radii[1] + 1.0, radii[2] + 1.0))
            blob = _ellipsoid(rng, grid, c, radii)
            grown = ndimage.binary_dilation(blob, iterations=1)
            if blob.sum() > 50 and not np.any(grown & (labels > 0)):
                labels[blob] = lab
                break
        else:
            raise ValueError(f"volume size {size} too small to place three separate structures")
    return labels


def _shoulder_labels(rng, size, spacing) -> np.ndarray:
    grid = _grid_mm(size, spacing)
    extent = [n * s for n, s in zip(size, spacing)]
    labels = np.zeros(size, dtype=np.uint8)
    for _ in range(200):
        labels[:] = 0
        head_r = (0.4 * extent[0], rng.uniform(3.2, 5.0), rng.uniform(3.2, 5.0))
        head_c = _place(rng, extent, (0.5 * extent[0], head_r[1] + 1.0, head_r[2] + 1.0))
        head = _ellipsoid(rng, grid, head_c, head_r, wobble=0.1)
        ang = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.sin(ang), np.cos(ang)])
        plate_r = max(head_r[1:]) + rng.uniform(1.6, 2.6)
        plate = _curved_plate(rng, grid, head_c, plate_r, rng.uniform(0.9, 1.4), direction, rng.uniform(0.6, 0.9))
        if plate.sum() < 40 or head.sum() < 50:
            continue
        if np.any(ndimage.binary_dilation(head, iterations=1) & plate):
            continue
        labels[plate] = 1
        labels[head] = 2
        return labels
    raise ValueError(f"volume size {size} too small to place the shoulder structures")


def generate_exam(seed: int, domain: int, index: int, size=DEFAULT_SIZE,
                  spacing=DEFAULT_SPACING) -> tuple[Volume, LabelVolume]:
    if domain not in INTENSITY:
        raise ValueError(f"unknown domain {domain}")
    z, h, w = size
    if z < 4 or h < 24 or w < 24:
        raise ValueError(f"volume size {size} too small to place structures")
    rng = np.random.default_rng([seed, domain, index])
    labels = (_ankle_labels if domain == 0 else _shoulder_labels)(rng, size, spacing)
    model = INTENSITY[domain]
    gain = rng.uniform(0.85, 1.15)

    grid = _grid_mm(size, spacing)
    extent = [n * s for n, s in zip(size, spacing)]
    fg = labels > 0
    com = np.array(ndimage.center_of_mass(fg)) * np.array(spacing)
    tissue = _ellipsoid(rng, grid, com, (extent[0], 0.38 * extent[1], 0.38 * extent[2]), wobble=0.25)

    img = np.full(size, model.background)
    img[tissue] = model.soft_tissue
    for lab, value in enumerate(model.bones, start=1):
        img[labels == lab] = value * (1 + 0.05 * _smooth_field(rng, size)[labels == lab])
    img = ndimage.gaussian_filter(img, sigma=(0.3, 0.7, 0.7))
    img *= gain * (1 + 0.1 * _smooth_field(rng, size))
    img = np.abs(img + rng.normal(0, model.noise_sigma, size))
    exam_id = f"d{domain}-s{seed}-e{index:02d}"
    return (Volume(exam_id, domain, img.astype(np.float32), tuple(spacing)),
            LabelVolume(exam_id, domain, labels))


def generate_dataset(seed: int, domain: int, num_exams: int = 8, size=DEFAULT_SIZE,
                     spacing=DEFAULT_SPACING) -> list[tuple[Volume, LabelVolume]]:
    if num_exams < 3:
        raise ValueError("leave-one-out needs at least 3 exams per domain")
    return [generate_exam(seed, domain, i, size, spacing) for i in range(num_exams)]


# ---------------------------------------------------------------- slice preprocessing

def normalize_slice(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("cannot normalize a constant slice")
    return (img - img.mean()) / sd


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_horizontal: bool = True
    flip_vertical: bool = True
    max_translation_frac: float = 0.25
    max_rotation_deg: float = 45.0

    def __post_init__(self):
        if not 0 <= self.max_translation_frac <= 1:
            raise ValueError("translation fraction must lie in [0, 1]")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError("rotation must lie in [0, 180] degrees")


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool = False
    flip_v: bool = False
    shift: tuple[float, float] = (0.0, 0.0)  # fraction of (H, W)
    angle_deg: float = 0.0


def draw_augmentation(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentDraw:
    fh, fv = rng.random(2) < 0.5
    t = policy.max_translation_frac
    shift = tuple(rng.uniform(-t, t, size=2))
    angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    return AugmentDraw(bool(fh and policy.flip_horizontal), bool(fv and policy.flip_vertical), shift, angle)


def apply_augmentation(img: np.ndarray, mask: np.ndarray, d: AugmentDraw) -> tuple[np.ndarray, np.ndarray]:
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ")
    if d.flip_h:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if d.flip_v:
        img, mask = img[::-1], mask[::-1]
    if d.angle_deg == 0 and d.shift == (0.0, 0.0):
        return np.ascontiguousarray(img), np.ascontiguousarray(mask)
    h, w = img.shape
    a = np.deg2rad(d.angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset_px = np.array([d.shift[0] * h, d.shift[1] * w])
    # output pixel p samples input at R^T (p - c - t) + c
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()]) - (center + offset_px)[:, None]
    src = rot.T @ pts + center[:, None]
    out_img = ndimage.map_coordinates(img, src, order=1, mode="constant", cval=float(img.min())).reshape(h, w)
    out_mask = ndimage.map_coordinates(mask, src, order=0, mode="constant", cval=0).reshape(h, w)
    return out_img.astype(img.dtype, copy=False), out_mask.astype(mask.dtype, copy=False)


def augment(img: np.ndarray, mask: np.ndarray, policy: AugmentationPolicy, seed) -> tuple[np.ndarray, np.ndarray]:
    return apply_augmentation(img, mask, draw_augmentation(policy, np.random.default_rng(seed)))


# ---------------------------------------------------------------- exam files

EXAM_MAGIC = b"MDSEG1\0"


class ExamFormatError(ValueError):
    pass


class MalformedHeaderError(ExamFormatError):
    pass


class TruncatedPayloadError(ExamFormatError):
    pass


class ChecksumMismatchError(ExamFormatError):
    pass


def _payload(vol: Volume, lab: LabelVolume) -> bytes:
    return (np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes()
            + np.ascontiguousarray(lab.labels, dtype=np.uint8).tobytes())


def save_exam(path: str | Path, vol: Volume, lab: LabelVolume) -> str:
    if vol.voxels.shape != lab.labels.shape:
        raise ValueError("volume and label shapes differ")
    payload = _payload(vol, lab)
    checksum = hashlib.sha256(payload).hexdigest()
    header = {
        "exam_id": vol.exam_id,
        "domain": vol.domain,
        "shape": list(vol.voxels.shape),
        "spacing": list(vol.spacing),
        "dtype": {"voxels": "<f4", "labels": "u1"},
        "checksum": checksum,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(EXAM_MAGIC + struct.pack("<I", len(hb)) + hb + payload)
    return checksum


def load_exam(path: str | Path) -> tuple[Volume, LabelVolume]:
    raw = Path(path).read_bytes()
    if raw[: len(EXAM_MAGIC)] != EXAM_MAGIC or len(raw) < len(EXAM_MAGIC) + 4:
        raise MalformedHeaderError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack_from("<I", raw, len(EXAM_MAGIC))
    start = len(EXAM_MAGIC) + 4
    try:
        header = json.loads(raw[start:start + hlen])
        exam_id, domain = header["exam_id"], int(header["domain"])
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        checksum = header["checksum"]
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedHeaderError(f"{path}: malformed header ({e})") from e
    n = int(np.prod(shape))
    payload = raw[start + hlen:]
    if len(payload) < 5 * n:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} of {5 * n} bytes)")
    payload = payload[: 5 * n]
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    vox = np.frombuffer(payload, dtype="<f4", count=n).reshape(shape).astype(np.float32)
    labels = np.frombuffer(payload, dtype=np.uint8, offset=4 * n, count=n).reshape(shape).copy()
    return Volume(exam_id, domain, vox, spacing), LabelVolume(exam_id, domain, labels)


def exam_filename(domain: int, index: int) -> str:
    return f"domain{domain}_exam{index:02d}.mdseg"


def save_dataset(root: str | Path, datasets: dict[int, list[tuple[Volume, LabelVolume]]]) -> dict[str, str]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sums = {}
    for k, exams in datasets.items():
        for i, (v, l) in enumerate(exams):
            name = exam_filename(k, i)
            sums[name] = save_exam(root / name, v, l)
    return sums


def load_dataset(root: str | Path) -> dict[int, list[tuple[Volume, LabelVolume]]]:
    root = Path(root)
    files = sorted(root.glob("domain*_exam*.mdseg"))
    if not files:
        raise FileNotFoundError(f"no exam files in {root}")
    out: dict[int, list] = {}
    for f in files:
        v, l = load_exam(f)
        out.setdefault(v.domain, []).append((v, l))
    return dict(sorted(out.items()))


@dataclass
class SliceSet:
    """Normalized 2D slices of a set of exams for one domain."""

    images: np.ndarray  # [S, H, W] float32
    labels: np.ndarray  # [S, H, W] uint8
    exam_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.images)


def exams_to_slices(exams: list[tuple[Volume, LabelVolume]], indices=None) -> SliceSet:
    indices = range(len(exams)) if indices is None else indices
    imgs, labs, owner = [], [], []
    for i in indices:
        v, l = exams[i]
        for z in range(v.voxels.shape[0]):
            imgs.append(normalize_slice(v.voxels[z]).astype(np.float32))
            labs.append(l.labels[z])
            owner.append(i)
    return SliceSet(np.stack(imgs), np.stack(labs), np.asarray(owner))
