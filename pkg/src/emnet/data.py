"""Dataset manifests, interval subsampling, Gaussian noise and synthetic faces.

Manifest format: one record per line, three whitespace-separated fields

    <relative image path> <yaw radians> <pitch radians>

Blank lines and ``#`` comments are ignored. Record order defines the 1-based
serial numbers. Images are 8-bit PNG (RGB) or ``.npy`` float32 arrays of
shape [3, H, W] with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError

IMAGE_SIZE = 224
YAW_RANGE = 1.2
PITCH_RANGE = 0.6


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    yaw: float
    pitch: float


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def serials(self) -> list[int]:
        return list(range(1, len(self.records) + 1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields (path yaw pitch), got {len(parts)}")
        rel, yaw_s, pitch_s = parts
        try:
            yaw, pitch = float(yaw_s), float(pitch_s)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: yaw/pitch must be numbers: {raw!r}") from None
        if not (math.isfinite(yaw) and math.isfinite(pitch)):
            raise ManifestError(f"{path}:{lineno}: non-finite label")
        if abs(pitch) > math.pi / 2:
            raise ManifestError(f"{path}:{lineno}: pitch {pitch} outside [-pi/2, pi/2]")
        if abs(yaw) > math.pi:
            raise ManifestError(f"{path}:{lineno}: yaw {yaw} outside [-pi, pi]")
        if rel in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image path {rel!r}")
        seen.add(rel)
        records.append(ManifestRecord(rel, yaw, pitch))
    return DatasetManifest(path.parent, records)


def write_manifest(path, records, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines += [f"{r.path} {r.yaw!r} {r.pitch!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def interval_subsample(m: DatasetManifest) -> DatasetManifest:
    """Keep the records with odd 1-based serial numbers (1, 3, 5, ...)."""
    return DatasetManifest(m.root, m.records[::2])


# -- images -------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    if img.ndim != 3 or img.shape[0] != 3:
        raise ManifestError(f"{path}: expected a 3-channel image, got shape {img.shape}")
    return img


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, img.astype(np.float32))
        return
    from PIL import Image

    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def normalize_image(img):
    """Per-channel standardization with mean 0.5 and std 0.5."""
    return (img - 0.5) / 0.5


def denormalize_image(x):
    return x * 0.5 + 0.5


def gaussian_noise(shape, sigma: float, seed) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """img + N(0, sigma^2) per scalar on the [0, 1] scale, clamped back to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noisy = img + gaussian_noise(img.shape, sigma, seed).astype(img.dtype)
    return np.clip(noisy, 0.0, 1.0)


# -- synthetic faces --------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    yaw: float
    pitch: float
    serial: int
    meta: dict = field(default_factory=dict)


def _soft_ellipse(xx, yy, cx, cy, a, b, theta=0.0):
    """Anti-aliased coverage of a rotated ellipse, in [0, 1]."""
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return np.clip(0.5 + (1.0 - rho) * min(a, b), 0.0, 1.0)


def _paint(img, alpha, color):
    img *= 1.0 - alpha
    img += alpha * np.asarray(color, dtype=np.float32)[:, None, None]


def render_face(yaw: float, pitch: float, rng: np.random.Generator, size: int = IMAGE_SIZE,
                jitter: bool = True) -> tuple[np.ndarray, dict]:
    """Draw a schematic face whose irises are displaced by (sin yaw, sin pitch).

    Returns the float image and geometry: eye centres, iris centres and the
    face rotation, all in pixel (x, y) coordinates.
    """
    k = size / IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = rng.uniform(0.15, 0.85, 3).astype(np.float32)[:, None, None]
    for _ in range(6):
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(8, 40, 2) * k
        _paint(img, 0.5 * _soft_ellipse(xx, yy, cx, cy, a, b, rng.uniform(0, math.pi)), rng.uniform(0, 1, 3))

    if jitter:
        shift = rng.uniform(-8, 8, 2) * k
        theta = rng.uniform(-0.15, 0.15)
        scale = rng.uniform(0.9, 1.1)
    else:
        shift, theta, scale = np.zeros(2), 0.0, 1.0
    center = np.array([size / 2, size / 2]) + shift
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    s = scale * k

    def place(offset):
        return center + rot @ (np.asarray(offset, dtype=np.float64) * s)

    gain = rng.uniform(0.6, 1.2)
    skin = rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7]) * gain
    _paint(img, _soft_ellipse(xx, yy, *center, 66 * s, 84 * s, theta), np.clip(skin, 0, 1))
    mouth = place((0, 46))
    _paint(img, _soft_ellipse(xx, yy, *mouth, 22 * s, 6 * s, theta), np.clip(skin * 0.55, 0, 1))

    white = np.clip(np.array([0.93, 0.93, 0.9]) * min(gain * 1.1, 1.0), 0, 1)
    iris_color = rng.uniform(0.05, 0.35, 3)
    offset = np.array([11.0 * math.sin(yaw), -6.0 * math.sin(pitch)])
    eyes, irises = [], []
    for side in (-1, 1):
        ec = place((30 * side, -14))
        ic = place(np.array([30 * side, -14]) + offset)
        eye_alpha = _soft_ellipse(xx, yy, *ec, 17 * s, 9 * s, theta)
        _paint(img, eye_alpha, white)
        _paint(img, eye_alpha * _soft_ellipse(xx, yy, *ic, 6.5 * s, 6.5 * s), iris_color)
        eyes.append(ec)
        irises.append(ic)

    img = np.clip(img, 0.0, 1.0)
    meta = {"eye_centers": np.array(eyes), "iris_centers": np.array(irises), "theta": theta,
            "scale": s, "eye_axes": (17 * s, 9 * s)}
    return img, meta


def synth_sample(serial: int, seed: int, size: int = IMAGE_SIZE, jitter: bool = True) -> Sample:
    rng = np.random.default_rng([seed, serial])
    yaw = float(rng.uniform(-YAW_RANGE, YAW_RANGE))
    pitch = float(rng.uniform(-PITCH_RANGE, PITCH_RANGE))
    img, meta = render_face(yaw, pitch, rng, size, jitter)
    # quantize so in-memory samples match their PNG files exactly
    img = to_uint8(img).astype(np.float32) / 255.0
    return Sample(img, yaw, pitch, serial, meta)


def synth_generate(n: int, seed: int, start: int = 1, size: int = IMAGE_SIZE, jitter: bool = True) -> list[Sample]:
    """Samples with serials start..start+n-1; each draws from its own (seed, serial) stream."""
    if n < 1:
        raise ValueError("synth_generate needs n >= 1")
    return [synth_sample(i, seed, size, jitter) for i in range(start, start + n)]


def write_synth_dataset(out_dir, samples: list[Sample], fmt: str = "png") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for smp in samples:
        rel = f"images/{smp.serial:06d}.{fmt}"
        save_image(out / rel, smp.image)
        records.append(ManifestRecord(rel, smp.yaw, smp.pitch))
    manifest = out / "manifest.txt"
    write_manifest(manifest, records, header="path yaw pitch (radians)")
    return manifest


# -- in-memory arrays for training ----------------------------------------------------


@dataclass
class ImageSet:
    images: np.ndarray  # uint8 [N, 3, H, W]
    labels: np.ndarray  # float32 [N, 2] (yaw, pitch)
    serials: np.ndarray  # int64 [N]

    def __len__(self):
        return len(self.labels)

    def batch(self, idx, sigma: float = 0.0, noise_seed: int = 0) -> np.ndarray:
        """Float images in [0, 1] for the given indices, optionally noised per (seed, serial)."""
        imgs = self.images[idx].astype(np.float32) / 255.0
        if sigma > 0:
            for j, i in enumerate(np.atleast_1d(idx)):
                imgs[j] = add_gaussian_noise(imgs[j], sigma, [noise_seed, int(self.serials[i])])
        return imgs


def imageset_from_samples(samples: list[Sample]) -> ImageSet:
    return ImageSet(np.stack([to_uint8(s.image) for s in samples]),
                    np.array([[s.yaw, s.pitch] for s in samples], dtype=np.float32),
                    np.array([s.serial for s in samples], dtype=np.int64))


def imageset_from_manifest(m: DatasetManifest) -> ImageSet:
    imgs = np.stack([to_uint8(load_image(m.root / r.path)) for r in m.records]) if m.records else \
        np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.uint8)
    labels = np.array([[r.yaw, r.pitch] for r in m.records], dtype=np.float32).reshape(-1, 2)
    return ImageSet(imgs, labels, np.arange(1, len(m) + 1, dtype=np.int64))
