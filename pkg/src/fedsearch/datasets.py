"""Dataset manifests, image I/O, patch extraction, and synthetic data.

Manifests are CSV files with the header
``id,path,label,magnification,center,split``; paths are resolved
relative to the manifest's directory.  The synthetic generator produces
two visually separable classes (smooth blobs vs. high-frequency
stripes) across any number of clients, each tagged with a magnification
whose configured scale factor stretches the class textures.  Generation
is byte-deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, ImageLoadError, ManifestError

MANIFEST_COLUMNS = ["id", "path", "label", "magnification", "center", "split"]
LABELS = ("benign", "malignant")
SPLITS = ("train", "validation", "test")
MAGNIFICATIONS = ("40x", "100x", "200x", "400x")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: Path
    label: str
    magnification: str
    center: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    stats: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stats:
            self.stats = compute_stats(self.records)

    def split_records(self, *splits: str) -> list[ImageRecord]:
        wanted = set(splits)
        return [r for r in self.records if r.split in wanted]

    def count(self, label: str | None = None, magnification: str | None = None,
              split: str | None = None) -> int:
        total = 0
        for (lab, mag, spl), n in self.stats.items():
            if label is not None and lab != label:
                continue
            if magnification is not None and mag != magnification:
                continue
            if split is not None and spl != split:
                continue
            total += n
        return total


def compute_stats(records: list[ImageRecord]) -> dict[tuple[str, str, str], int]:
    stats: dict[tuple[str, str, str], int] = {}
    for r in records:
        key = (r.label, r.magnification, r.split)
        stats[key] = stats.get(key, 0) + 1
    return stats


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest (missing header)") from None
        if header != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: bad header {header}, expected {MANIFEST_COLUMNS}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}: line {line_no}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            rec_id, rel_path, label, magnification, center, split = (f.strip() for f in row)
            if not rec_id:
                raise ManifestError(f"{path}: line {line_no}: empty id")
            if rec_id in seen:
                raise ManifestError(f"{path}: line {line_no}: duplicate id {rec_id!r} (first on line {seen[rec_id]})")
            if label not in LABELS:
                raise ManifestError(f"{path}: line {line_no}: unknown label {label!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}: line {line_no}: unknown split {split!r}")
            seen[rec_id] = line_no
            records.append(
                ImageRecord(
                    id=rec_id,
                    path=path.parent / rel_path,
                    label=label,
                    magnification=magnification or "none",
                    center=center,
                    split=split,
                )
            )
    return DatasetManifest(records=records)


def write_manifest(manifest: DatasetManifest, path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            rel = Path(r.path)
            try:
                rel = rel.relative_to(base)
            except ValueError:
                pass
            writer.writerow([r.id, rel.as_posix(), r.label, r.magnification, r.center, r.split])


def load_image(path) -> np.ndarray:
    """Read a PNG or PPM file into a [3,H,W] float array scaled to [0,1].

    Grayscale inputs are replicated across the three channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "L"):
                img = img.convert("RGB")
            data = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ImageLoadError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageLoadError(f"cannot read image {path}: {exc}") from None
    if data.ndim == 2:
        data = np.stack([data, data, data])
    else:
        data = data.transpose(2, 0, 1)
    return np.ascontiguousarray(data)


def save_image(tensor: np.ndarray, path) -> None:
    """Write a [3,H,W] array in [0,1] as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(tensor), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected a [3,H,W] tensor, got shape {arr.shape}")
    as_bytes = (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(as_bytes, mode="RGB").save(path, format="PNG")


def patchify(
    image: np.ndarray,
    patch_size: int = 224,
    tissue_threshold: float = 0.70,
    background_luminance: float = 0.85,
) -> list[np.ndarray]:
    """Non-overlapping grid tiles that contain enough foreground.

    The image is tiled row-major; remainder pixels at the right/bottom
    edges are cropped.  A pixel counts as foreground when its mean
    channel value falls below ``background_luminance``; a tile is kept
    when its foreground fraction is at least ``tissue_threshold``.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError(f"patchify expects [C,H,W], got shape {image.shape}")
    _, h, w = image.shape
    if patch_size < 1 or patch_size > h or patch_size > w:
        raise DataError(f"patch size {patch_size} does not fit image {h}x{w}")
    luminance = image.mean(axis=0)
    patches = []
    for top in range(0, h - patch_size + 1, patch_size):
        for left in range(0, w - patch_size + 1, patch_size):
            tile_lum = luminance[top : top + patch_size, left : left + patch_size]
            foreground = float((tile_lum < background_luminance).mean())
            if foreground >= tissue_threshold:
                patches.append(image[:, top : top + patch_size, left : left + patch_size])
    return patches


# -- synthetic data ----------------------------------------------------------

DEFAULT_SCALE_FACTORS = {"40x": 1.0, "100x": 1.5, "200x": 2.0, "400x": 4.0}


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale stand-in for a multi-center patch corpus."""

    clients: int = 4
    train_per_client: int = 80
    val_per_client: int = 20
    test_per_client: int = 20
    image_size: int = 64
    stripe_wavelength: float = 4.0  # pixels, before magnification scaling
    blob_radius: float = 5.0  # pixels, before magnification scaling
    noise_sigma: float = 0.04
    magnifications: tuple[str, ...] = MAGNIFICATIONS
    scale_factors: dict = field(default_factory=lambda: dict(DEFAULT_SCALE_FACTORS))
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError("clients must be positive")
        if self.image_size < 8:
            raise ConfigError("image_size too small")
        for m in self.magnifications:
            if m not in self.scale_factors:
                raise ConfigError(f"no scale factor for magnification {m!r}")

    def magnification_for(self, client_index: int) -> str:
        return self.magnifications[client_index % len(self.magnifications)]


def _coords(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys, xs


# Texture fields are standardized to fixed contrasts so pixel variance
# separates the classes at every magnification scale.
BENIGN_CONTRAST = 0.06
MALIGNANT_CONTRAST = 0.18


def _benign_image(rng, size, scale, noise_sigma, blob_radius):
    """Smooth low-frequency blobs on a light background."""
    ys, xs = _coords(size)
    blobs = np.zeros((size, size))
    for _ in range(rng.integers(3, 8)):
        cy, cx = rng.uniform(0, size, size=2)
        radius = blob_radius * scale * rng.uniform(0.7, 1.4)
        depth = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
        blobs += depth * np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2)))
    blobs = (blobs - blobs.mean()) / max(blobs.std(), 1e-9) * BENIGN_CONTRAST
    base = rng.uniform(0.70, 0.82)
    color = 1.0 + rng.uniform(-0.3, 0.3, size=3)
    img = base + blobs[None, :, :] * color[:, None, None]
    img += rng.uniform(-0.04, 0.04, size=3)[:, None, None]
    img += rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _malignant_image(rng, size, scale, noise_sigma, stripe_wavelength):
    """High-frequency stripes with random orientation and phase."""
    ys, xs = _coords(size)
    theta = rng.uniform(0.0, np.pi)
    wavelength = stripe_wavelength * scale * rng.uniform(0.85, 1.2)
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / wavelength + phase)
    wave = (wave - wave.mean()) / max(wave.std(), 1e-9) * MALIGNANT_CONTRAST
    base = rng.uniform(0.58, 0.72)
    color = 1.0 + rng.uniform(-0.25, 0.25, size=3)
    img = base + wave[None, :, :] * color[:, None, None]
    img += rng.uniform(-0.04, 0.04, size=3)[:, None, None]
    img += rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_image(config: SynthConfig, label: str, magnification: str, key: tuple[int, ...]) -> np.ndarray:
    """One deterministic synthetic image; ``key`` isolates the RNG stream."""
    rng = np.random.default_rng([config.seed, *key])
    scale = config.scale_factors[magnification]
    if label == "benign":
        return _benign_image(rng, config.image_size, scale, config.noise_sigma, config.blob_radius)
    return _malignant_image(rng, config.image_size, scale, config.noise_sigma, config.stripe_wavelength)


def synth_generate(config: SynthConfig, out_dir) -> list[DatasetManifest]:
    """Write per-client image trees and manifests; returns the manifests.

    Output layout: ``client-<k>/<split>/<id>.png`` with a
    ``client-<k>/manifest.csv`` beside each tree.  Every split is
    class-balanced (benign first, then malignant, within each split).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from None
    per_split = {"train": config.train_per_client, "validation": config.val_per_client,
                 "test": config.test_per_client}
    manifests = []
    for k in range(config.clients):
        magnification = config.magnification_for(k)
        center = f"client-{k}"
        records = []
        client_dir = out_dir / center
        for split_index, (split, count) in enumerate(per_split.items()):
            split_dir = client_dir / split
            split_dir.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                label = "benign" if i < (count + 1) // 2 else "malignant"
                image_id = f"{center}-{split}-{i:04d}"
                image = synth_image(config, label, magnification, (k, split_index, i))
                image_path = split_dir / f"{image_id}.png"
                save_image(image, image_path)
                records.append(
                    ImageRecord(
                        id=image_id,
                        path=image_path,
                        label=label,
                        magnification=magnification,
                        center=center,
                        split=split,
                    )
                )
        manifest = DatasetManifest(records=records)
        write_manifest(manifest, client_dir / "manifest.csv")
        manifests.append(manifest)
    return manifests


def load_split_arrays(manifest: DatasetManifest, *splits: str) -> tuple[np.ndarray, list[ImageRecord]]:
    """Stack the images of the given splits into one [N,3,H,W] array."""
    records = manifest.split_records(*splits)
    if not records:
        raise DataError(f"no records in splits {splits}")
    images = [load_image(r.path) for r in records]
    return np.stack(images), records
