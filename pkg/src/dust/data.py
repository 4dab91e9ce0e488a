"""Synthetic cardiac-like segmentation data, PGM I/O, preprocessing and augmentation.

Each sample shows three structures on a dark background: an outer blob
(class 1), a ring (class 2) around an inner core (class 3). A scalar
difficulty in [0, 1] controls additive Gaussian noise and the amplitude of
a smooth radial jitter on every boundary. Sample ``i`` draws from its own
stream seeded by ``(seed, i)``, so adding samples never alters existing ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_VERSION = 1
SPLITS = ("labeled", "unlabeled", "val", "test")
N_CLASSES = 4
MAX_NOISE_SIGMA = 0.45
MAX_JITTER = 0.28
MIN_CLASS_FRACTION = 0.01


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    """Binary P5 PGM; uint8 arrays get maxval 255, uint16 arrays 65535 (big endian)."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        maxval, payload = 255, array.tobytes()
    elif array.dtype == np.uint16:
        maxval, payload = 65535, array.astype(">u2").tobytes()
    else:
        raise TypeError(f"write_pgm: unsupported dtype {array.dtype}")
    h, w = array.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.uint8 if maxval < 256 else np.uint16)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class SynthSample:
    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    difficulty: float
    split: str


def _jittered_ellipse(yy, xx, cy, cx, ry, rx, angle, jitter, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    theta = np.arctan2(v, u)
    # smooth boundary perturbation from a few low angular harmonics
    wobble = np.zeros_like(theta)
    for k in (2, 3, 4, 5):
        wobble += rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * math.pi)) / k
    return np.hypot(u, v) <= 1.0 + jitter * wobble


def _draw(rng: np.random.Generator, size: int, difficulty: float, margin: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = MAX_JITTER * difficulty
    lo, hi = margin, size - margin
    for attempt in range(50):
        shrink = 0.97**attempt
        core_r = rng.uniform(5.0, 8.0) * shrink
        ring_w = rng.uniform(2.5, 4.5) * shrink
        outer_r = core_r + ring_w
        rv_ry, rv_rx = rng.uniform(7.0, 10.0) * shrink, rng.uniform(10.0, 15.0) * shrink
        cy, cx = rng.uniform(lo + outer_r + 2, hi - outer_r - 2, size=2)
        direction = rng.uniform(0, 2 * math.pi)
        dist = outer_r + 0.45 * rv_ry
        ry_c, rx_c = cy + dist * math.sin(direction), cx + dist * math.cos(direction)
        angle = direction + math.pi / 2
        ecc = rng.uniform(0.85, 1.15)

        mask = np.zeros((size, size), dtype=np.uint8)
        rv = _jittered_ellipse(yy, xx, ry_c, rx_c, rv_ry, rv_rx, angle, jitter, rng)
        ring = _jittered_ellipse(yy, xx, cy, cx, outer_r, outer_r * ecc, direction, jitter, rng)
        core = _jittered_ellipse(yy, xx, cy, cx, core_r, core_r * ecc, direction, jitter, rng)
        mask[rv] = 1
        mask[ring] = 2
        mask[core & ring] = 3
        fg = mask > 0
        inside = np.zeros_like(fg)
        inside[lo:hi, lo:hi] = True
        counts = np.bincount(mask.ravel(), minlength=N_CLASSES)
        if fg[~inside].any() or (counts[1:] < MIN_CLASS_FRACTION * size * size).any():
            continue
        levels = {
            0: rng.uniform(0.02, 0.1),
            1: rng.uniform(0.6, 0.72),
            2: rng.uniform(0.38, 0.48),
            3: rng.uniform(0.84, 0.98),
        }
        body_r = rng.uniform(0.36, 0.44) * size
        body = np.hypot(yy - size / 2, xx - size / 2) <= body_r
        image = np.full((size, size), levels[0])
        image[body] = levels[0] + rng.uniform(0.1, 0.16)
        for cls in (1, 2, 3):
            image[mask == cls] = levels[cls]
        sigma = MAX_NOISE_SIGMA * difficulty
        if sigma > 0:
            image = image + rng.normal(0.0, sigma, image.shape)
        return image, mask
    raise RuntimeError("could not fit the structures on the canvas after 50 attempts")


def generate_sample(seed: int, index: int, sample_id: str, split: str, size: int = 80,
                    difficulty_range: tuple[float, float] = (0.0, 1.0), margin: int | None = None,
                    difficulty: float | None = None) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    d = float(rng.uniform(*difficulty_range)) if difficulty is None else float(difficulty)
    if margin is None:
        margin = max(1, size // 5)
    image, mask = _draw(rng, size, d, margin)
    img16 = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16)
    return SynthSample(sample_id, img16, mask, d, split)


@dataclass
class DatasetManifest:
    seed: int
    n_classes: int
    image_size: int
    difficulty_range: tuple[float, float]
    samples: list[dict]
    counts: dict[str, int] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def ids(self, split: str) -> list[str]:
        return [s["id"] for s in self.samples if s["split"] == split]

    def record(self, sample_id: str) -> dict:
        for s in self.samples:
            if s["id"] == sample_id:
                return s
        raise KeyError(f"unknown sample id {sample_id!r}")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "difficulty_range": list(self.difficulty_range),
            "counts": self.counts,
            "samples": self.samples,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        if obj.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {obj.get('version')}")
        return cls(obj["seed"], obj["n_classes"], obj["image_size"], tuple(obj["difficulty_range"]),
                   obj["samples"], obj["counts"], obj["version"])


def generate(out_dir: str | Path, counts: dict[str, int], seed: int = 0, size: int = 80,
             difficulty_range: tuple[float, float] = (0.0, 1.0), divisor: int = 8) -> DatasetManifest:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``."""
    if size % divisor:
        raise ValueError(f"image size {size} must be divisible by {divisor}")
    for split in ("labeled", "unlabeled"):
        if counts.get(split, 0) < 1:
            raise ValueError(f"need at least one {split} sample")
    lo, hi = difficulty_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"difficulty range must lie within [0, 1], got {difficulty_range}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    index = 0
    for split in SPLITS:
        for _ in range(counts.get(split, 0)):
            sid = f"s{index:04d}"
            s = generate_sample(seed, index, sid, split, size, difficulty_range)
            write_pgm(out / "images" / f"{sid}.pgm", s.image)
            write_pgm(out / "masks" / f"{sid}.pgm", s.mask)
            records.append({
                "id": sid,
                "image": f"images/{sid}.pgm",
                "mask": f"masks/{sid}.pgm",
                "split": split,
                "difficulty": round(s.difficulty, 12),
            })
            index += 1
    manifest = DatasetManifest(seed, N_CLASSES, size, (lo, hi), records,
                               {k: int(counts.get(k, 0)) for k in SPLITS})
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# preprocessing / augmentation
# ---------------------------------------------------------------------------


def preprocess(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit population std; a constant image maps to zeros."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if std == 0:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def center_crop(array: np.ndarray, crop: int) -> np.ndarray:
    h, w = array.shape[-2:]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than canvas {h}x{w}")
    oy, ox = (h - crop) // 2, (w - crop) // 2
    return array[..., oy:oy + crop, ox:ox + crop]


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, crop: int):
    """Random flips, a k*90 degree rotation and a random crop, applied identically to both."""
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than canvas {h}x{w}")
    hflip, vflip = rng.random() < 0.5, rng.random() < 0.5
    k = int(rng.integers(4))
    oy, ox = int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1))
    return _apply(image, hflip, vflip, k, oy, ox, crop), _apply(mask, hflip, vflip, k, oy, ox, crop)


def _apply(a, hflip, vflip, k, oy, ox, crop):
    if hflip:
        a = a[:, ::-1]
    if vflip:
        a = a[::-1, :]
    a = np.rot90(a, k)
    return np.ascontiguousarray(a[oy:oy + crop, ox:ox + crop])


class Dataset:
    """Loaded dataset: preprocessed float images and masks keyed by sample id."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = DatasetManifest.from_json(json.loads(path.read_text()))
        self.images: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        self.difficulty: dict[str, float] = {}
        for rec in self.manifest.samples:
            sid = rec["id"]
            self.images[sid] = preprocess(read_pgm(self.root / rec["image"]))
            self.masks[sid] = read_pgm(self.root / rec["mask"]).astype(np.int64)
            self.difficulty[sid] = float(rec["difficulty"])

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def ids(self, split: str) -> list[str]:
        return self.manifest.ids(split)

    def stack(self, ids: Sequence[str], crop: int) -> tuple[np.ndarray, np.ndarray]:
        """Center-cropped [M,1,c,c] images and [M,c,c] masks."""
        for sid in ids:
            if sid not in self.images:
                raise KeyError(f"unknown sample id {sid!r}")
        imgs = np.stack([center_crop(self.images[s], crop) for s in ids])[:, None]
        masks = np.stack([center_crop(self.masks[s], crop) for s in ids])
        return np.ascontiguousarray(imgs), np.ascontiguousarray(masks)
