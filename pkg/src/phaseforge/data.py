"""Synthetic dataset construction and on-disk persistence.

A dataset directory holds manifest.json plus two NPY files per sample:
{id}.gt.npy (float64, N x N x 2 real/imaginary channels) and
{id}.meas.npy (uint16, M x M quantized intensity). Generation is
deterministic in the seed, and every write goes through a temp file plus
rename, so regeneration is byte-identical and never leaves partial files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .fields import ComplexField
from .optics import IntensityMeasurement, OpticsConfig, forward_measure

MODES = ("correlated", "uncorrelated", "phase-only")
SOURCES = ("builtin-shapes", "image-directory")
DATASET_FORMAT_VERSION = 1

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def minmax_scale(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; constant images map to 0."""
    image = np.asarray(image, dtype=np.float64)
    lo = image.min()
    hi = image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def builtin_image(rng: np.random.Generator, n: int) -> np.ndarray:
    """Procedural N x N grayscale image: random rectangles, discs, and a
    linear gradient, min-max scaled to [0, 1]."""
    if n < 2:
        raise ConfigurationError(f"image size must be >= 2, got {n}")
    ii, jj = np.mgrid[0:n, 0:n] / (n - 1)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    image = rng.uniform(0.1, 0.5) * (np.cos(angle) * ii + np.sin(angle) * jj)
    for _ in range(int(rng.integers(2, 5))):
        value = rng.uniform(0.3, 1.0)
        if rng.random() < 0.5:
            r0, c0 = rng.integers(0, n, size=2)
            r1 = int(rng.integers(r0 + 1, n + 1))
            c1 = int(rng.integers(c0 + 1, n + 1))
            image[r0:r1, c0:c1] += value
        else:
            cy, cx = rng.uniform(0, n - 1, size=2)
            radius = rng.uniform(n / 8, n / 4)
            mask = (ii * (n - 1) - cy) ** 2 + (jj * (n - 1) - cx) ** 2 <= radius**2
            image[mask] += value
    return minmax_scale(image)


def synth_complex(raw_a: np.ndarray, raw_b: np.ndarray | None, mode: str) -> ComplexField:
    """Build a complex field from [0, 1] raw images.

    correlated:   magnitude raw_a, phase exp(2*pi*j*raw_a)
    uncorrelated: magnitude raw_a, phase exp(2*pi*j*raw_b)
    phase-only:   unit magnitude, phase exp(2*pi*j*raw_a)
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}, expected one of {MODES}")
    raw_a = np.asarray(raw_a, dtype=np.float64)
    if raw_a.min() < 0.0 or raw_a.max() > 1.0:
        raise ConfigurationError("raw_a must be scaled to [0, 1]")
    if mode == "uncorrelated":
        if raw_b is None:
            raise ConfigurationError("uncorrelated mode requires a second raw image")
        raw_b = np.asarray(raw_b, dtype=np.float64)
        if raw_b.shape != raw_a.shape:
            raise ConfigurationError(f"raw shapes differ: {raw_a.shape} vs {raw_b.shape}")
        if raw_b.min() < 0.0 or raw_b.max() > 1.0:
            raise ConfigurationError("raw_b must be scaled to [0, 1]")
    phase_source = raw_b if mode == "uncorrelated" else raw_a
    magnitude = np.ones_like(raw_a) if mode == "phase-only" else raw_a
    theta = 2.0 * np.pi * phase_source
    re, im = np.cos(theta), np.sin(theta)
    # renormalize the phasor so unit-magnitude samples are exact under hypot
    norm = np.hypot(re, im)
    return ComplexField(magnitude * (re / norm), magnitude * (im / norm))


@dataclass(frozen=True)
class Sample:
    id: str
    mode: str
    ground_truth: ComplexField
    measurement: IntensityMeasurement


def _atomic_save_npy(path: str, array: np.ndarray) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, array)
    os.replace(tmp, path)


def _atomic_save_json(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _load_directory_images(image_dir: str, n: int):
    """Yield (source name, scaled image) per readable file, plus warnings."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a hard dependency
        raise DataError("image-directory source requires Pillow") from exc

    warnings: list[str] = []
    images: list[tuple[str, np.ndarray]] = []
    names = sorted(os.listdir(image_dir))
    for name in names:
        path = os.path.join(image_dir, name)
        if not os.path.isfile(path):
            continue
        try:
            with Image.open(path) as img:
                gray = img.convert("L").resize((n, n), Image.BILINEAR)
                arr = np.asarray(gray, dtype=np.float64) / 255.0
        except Exception as exc:
            warnings.append(f"skipped {name}: {exc}")
            continue
        images.append((name, minmax_scale(arr)))
    return images, warnings


def load_image_file(path: str, n: int) -> np.ndarray:
    """One image file -> grayscale, bilinear-resized, min-max scaled."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a hard dependency
        raise DataError("image input requires Pillow") from exc
    if not os.path.isfile(path):
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L").resize((n, n), Image.BILINEAR), dtype=np.float64)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return minmax_scale(arr / 255.0)


def _raw_image_stream(source: str, image_dir: str | None, n: int, rng: np.random.Generator):
    """Returns (next_image callable, source description, warnings)."""
    if source == "builtin-shapes":
        return (lambda: builtin_image(rng, n)), "builtin-shapes", []
    if source != "image-directory":
        raise ConfigurationError(f"unknown source {source!r}, expected one of {SOURCES}")
    if not image_dir or not os.path.isdir(image_dir):
        raise DataError(f"image directory not found: {image_dir!r}")
    images, warnings = _load_directory_images(image_dir, n)
    pool = iter(images)

    def next_image() -> np.ndarray:
        try:
            return next(pool)[1]
        except StopIteration:
            raise DataError(
                f"image directory {image_dir!r} ran out of readable images"
            ) from None

    return next_image, f"image-directory:{os.path.basename(os.path.abspath(image_dir))}", warnings


def generate_dataset(
    out_dir: str,
    optics: OpticsConfig,
    mode: str = "phase-only",
    train_count: int = 1,
    test_count: int = 1,
    source: str = "builtin-shapes",
    image_dir: str | None = None,
    seed: int = 0,
) -> dict:
    """Synthesize, measure, and persist a dataset; returns the manifest."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}, expected one of {MODES}")
    if train_count < 1 or test_count < 1:
        raise ConfigurationError("train and test counts must be >= 1")
    rng = np.random.default_rng(seed)
    next_image, source_desc, warnings = _raw_image_stream(source, image_dir, optics.n, rng)
    os.makedirs(out_dir, exist_ok=True)

    ids: list[str] = []
    for split, count in (("train", train_count), ("test", test_count)):
        for index in range(count):
            raw_a = next_image()
            raw_b = next_image() if mode == "uncorrelated" else None
            field = synth_complex(raw_a, raw_b, mode)
            measurement = forward_measure(field, optics)
            sample_id = f"{split}-{index:05d}"
            gt = np.stack([field.re, field.im], axis=-1)
            _atomic_save_npy(os.path.join(out_dir, f"{sample_id}.gt.npy"), gt)
            _atomic_save_npy(os.path.join(out_dir, f"{sample_id}.meas.npy"), measurement.data)
            ids.append(sample_id)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "mode": mode,
        "optics": optics.to_dict(),
        "counts": {"train": train_count, "test": test_count},
        "source": source_desc,
        "seed": seed,
        "scaling": "per-image-min-max",
        "samples": sorted(ids),
        "warnings": warnings,
    }
    _atomic_save_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


class LazySample:
    """Sample proxy that reads its arrays from disk on first access."""

    __slots__ = ("id", "mode", "_dir", "_optics", "_gt", "_meas")

    def __init__(self, sample_id: str, mode: str, directory: str, optics: OpticsConfig):
        self.id = sample_id
        self.mode = mode
        self._dir = directory
        self._optics = optics
        self._gt = None
        self._meas = None

    def _read(self, suffix: str) -> np.ndarray:
        path = os.path.join(self._dir, f"{self.id}.{suffix}.npy")
        try:
            return np.load(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"sample {self.id!r}: cannot read {path}: {exc}") from exc

    @property
    def ground_truth(self) -> ComplexField:
        if self._gt is None:
            arr = self._read("gt")
            if arr.ndim != 3 or arr.shape[-1] != 2 or arr.shape[0] != self._optics.n:
                raise DataError(
                    f"sample {self.id!r}: ground truth shape {arr.shape} does not match "
                    f"n={self._optics.n}"
                )
            self._gt = ComplexField(arr[..., 0], arr[..., 1])
        return self._gt

    @property
    def measurement(self) -> IntensityMeasurement:
        if self._meas is None:
            arr = self._read("meas")
            if arr.dtype != np.uint16 or arr.shape != (self._optics.m, self._optics.m):
                raise DataError(
                    f"sample {self.id!r}: measurement dtype/shape {arr.dtype}/{arr.shape} "
                    f"does not match m={self._optics.m}"
                )
            self._meas = IntensityMeasurement(arr, self._optics)
        return self._meas

    def verify(self) -> None:
        """Re-run the forward model; exact integer mismatch is an error."""
        fresh = forward_measure(self.ground_truth, self._optics)
        if not np.array_equal(fresh.data, self.measurement.data):
            raise DataError(f"sample {self.id!r}: stored measurement does not reproduce")


def load_dataset(path: str, split: str | None = None, verify: bool = False):
    """Load (manifest, samples) with stable id order; arrays load lazily.

    `split` filters ids by their "train"/"test" prefix. With verify=True,
    every measurement is re-derived from its ground truth immediately.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DataError(
            f"dataset format version {version} is not supported "
            f"(expected {DATASET_FORMAT_VERSION}); regenerate the dataset"
        )
    optics = OpticsConfig(**manifest["optics"])
    mode = manifest["mode"]
    ids = sorted(manifest["samples"])
    if split is not None:
        if split not in ("train", "test"):
            raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
        ids = [i for i in ids if i.startswith(f"{split}-")]
    samples = [LazySample(sample_id, mode, path, optics) for sample_id in ids]
    if verify:
        for sample in samples:
            sample.verify()
    return manifest, samples
