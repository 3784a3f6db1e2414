"""Single-shot Fourier measurement model with optional defocus.

The object is an N x N complex field displayed at pixel pitch `pitch`. A
defocus of distance `distance` multiplies it by the quadratic phase kernel

    h(p, q) = exp(j * pi * (p^2 + q^2) / (wavelength * distance)),

with p and q the physical coordinates of each pixel measured from the
array center. The modulated field is zero-padded into the center of an
M x M plane (M > 2N for oversampling) and the sensor records

    X = gain * |DFT_M(padded field)|^2,

rounded to integers and clipped to a bit-depth cap. Saturated bins lose
information; the defocus spreads energy away from the DC peak so fewer
bins saturate at a given gain.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError
from .fields import ComplexField


@dataclass(frozen=True)
class OpticsConfig:
    """Physical and sampling parameters of the measurement bench.

    Defaults follow a visible-light bench: HeNe wavelength, 8 um modulator
    pitch, 30 mm defocus, 12-bit sensor.
    """

    n: int = 128
    m: int = 768
    wavelength: float = 632.8e-9
    pitch: float = 8e-6
    distance: float = 30e-3
    bit_depth: int = 12
    gain: float = 1.0
    defocus: bool = True

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ConfigurationError(f"n must be even and >= 2, got {self.n}")
        if self.m <= 2 * self.n:
            raise ConfigurationError(
                f"oversampling requires m > 2n, got m={self.m}, n={self.n}"
            )
        if self.m % self.n:
            raise ConfigurationError(f"m must be a multiple of n, got {self.m}/{self.n}")
        if not 1 <= self.bit_depth <= 16:
            raise ConfigurationError(
                f"bit_depth must be in [1, 16] for 16-bit storage, got {self.bit_depth}"
            )
        if self.gain <= 0:
            raise ConfigurationError(f"gain must be positive, got {self.gain}")
        if self.wavelength <= 0 or self.pitch <= 0 or self.distance <= 0:
            raise ConfigurationError("wavelength, pitch and distance must be positive")

    @property
    def cap(self) -> int:
        """Largest representable sensor count."""
        return (1 << self.bit_depth) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "OpticsConfig":
        """Small configuration for fast tests: 16 -> 64 oversampling."""
        base = dict(n=16, m=64)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class IntensityMeasurement:
    """Quantized sensor frame plus the configuration that produced it."""

    data: np.ndarray
    config: OpticsConfig

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != (self.config.m, self.config.m):
            raise ConfigurationError(
                f"measurement shape {data.shape} does not match m={self.config.m}"
            )
        if data.dtype != np.uint16:
            raise ConfigurationError(f"measurement dtype must be uint16, got {data.dtype}")
        object.__setattr__(self, "data", data)

    @property
    def saturated_fraction(self) -> float:
        return float(np.mean(self.data == self.config.cap))


def defocus_kernel(cfg: OpticsConfig, n: int | None = None) -> ComplexField:
    """Quadratic phase factor of a defocus, sampled on the N x N grid.

    Every sample has unit magnitude; the phase grows with the squared
    distance from the array center. Pass `n` to sample the same kernel on
    a different grid size (the central crop for n < cfg.n).
    """
    if n is None:
        n = cfg.n
    coords = (np.arange(n) - n // 2) * cfg.pitch
    p, q = np.meshgrid(coords, coords, indexing="ij")
    phase = np.pi * (p * p + q * q) / (cfg.wavelength * cfg.distance)
    return ComplexField(np.cos(phase), np.sin(phase))


def pad_center(z: np.ndarray, m: int) -> np.ndarray:
    """Zero-pad an N x N array into the center of an M x M plane."""
    n = z.shape[0]
    if z.shape != (n, n) or m < n:
        raise ConfigurationError(f"cannot pad shape {z.shape} into {m} x {m}")
    out = np.zeros((m, m), dtype=z.dtype)
    off = (m - n) // 2
    out[off : off + n, off : off + n] = z
    return out


def crop_center(z: np.ndarray, n: int) -> np.ndarray:
    """Extract the central n x n window of a square array."""
    m = z.shape[0]
    if z.shape != (m, m) or n > m:
        raise ConfigurationError(f"cannot crop {n} x {n} from shape {z.shape}")
    off = (m - n) // 2
    return z[off : off + n, off : off + n]


def apply_defocus(x: ComplexField, cfg: OpticsConfig) -> ComplexField:
    """Pointwise product of the object with the defocus kernel."""
    h = defocus_kernel(cfg)
    return ComplexField.from_complex(x.to_complex() * h.to_complex())


def measure_intensity(
    x: ComplexField, cfg: OpticsConfig, apply_kernel: bool | None = None
) -> np.ndarray:
    """Noise-free sensor-plane intensity before quantization.

    Returns gain * |DFT_M(pad(x * h))|^2 as float64; `apply_kernel`
    overrides cfg.defocus when given.
    """
    if x.shape != (cfg.n, cfg.n):
        raise ConfigurationError(f"field shape {x.shape} does not match n={cfg.n}")
    use_kernel = cfg.defocus if apply_kernel is None else apply_kernel
    z = x.to_complex()
    if use_kernel:
        z = z * defocus_kernel(cfg).to_complex()
    spectrum = np.fft.fft2(pad_center(z, cfg.m))
    return cfg.gain * np.abs(spectrum) ** 2


def quantize(intensity: np.ndarray, cfg: OpticsConfig) -> IntensityMeasurement:
    """Round to integer counts and clip at the bit-depth cap."""
    counts = np.minimum(np.round(intensity), cfg.cap).astype(np.uint16)
    return IntensityMeasurement(counts, cfg)


def forward_measure(
    x: ComplexField, cfg: OpticsConfig, apply_kernel: bool | None = None
) -> IntensityMeasurement:
    """Full forward model: defocus, pad, DFT, intensity, gain, quantize."""
    return quantize(measure_intensity(x, cfg, apply_kernel), cfg)


SCALE_MODES = ("decimate", "box-filter-decimate")


def scale_convert(measurement, size: int, mode: str = "box-filter-decimate", gain: float | None = None) -> np.ndarray:
    """Reduce an M x M intensity frame to the H x H grid of a DFT of size H.

    Sampling the oversampled spectrum at stride M/H lands exactly on the
    frequencies of an H-point DFT of the (circularly folded) object, so
    "decimate" mode takes every (M/H)-th bin. "box-filter-decimate" averages
    each (M/H) x (M/H) block first, trading exactness for noise averaging.
    Counts are divided by the exposure gain; the result is the float64
    squared-magnitude target for an H x H DFT.
    """
    if isinstance(measurement, IntensityMeasurement):
        data = measurement.data.astype(np.float64)
        g = measurement.config.gain if gain is None else gain
    else:
        data = np.asarray(measurement, dtype=np.float64)
        g = 1.0 if gain is None else gain
    m = data.shape[0]
    if data.shape != (m, m):
        raise ConfigurationError(f"intensity frame must be square, got {data.shape}")
    if size < 1 or m % size:
        raise ConfigurationError(f"target size {size} must divide frame size {m}")
    if mode not in SCALE_MODES:
        raise ConfigurationError(f"unknown scale mode {mode!r}, expected one of {SCALE_MODES}")
    r = m // size
    if mode == "decimate":
        out = data[::r, ::r] / g
    else:
        out = data.reshape(size, r, size, r).mean(axis=(1, 3)) / g
    return out


def magnitude_project(u: ComplexField, s: np.ndarray) -> ComplexField:
    """Replace the Fourier magnitude of `u` with sqrt(s), keeping phase.

    `s` is a non-negative squared-magnitude target on the same grid. Bins
    where the spectrum of `u` has (near-)zero magnitude take the target
    magnitude at phase zero.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != u.shape:
        raise ConfigurationError(f"target shape {s.shape} does not match field {u.shape}")
    if np.any(s < 0):
        raise ConfigurationError("squared-magnitude target must be non-negative")
    spectrum = np.fft.fft2(u.to_complex())
    return ComplexField.from_complex(
        np.fft.ifft2(replace_magnitude(spectrum, np.sqrt(s)))
    )


def replace_magnitude(spectrum: np.ndarray, target_mag: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Set |spectrum| to target_mag bin by bin, preserving phase."""
    mag = np.abs(spectrum)
    small = mag < eps
    scale = np.where(small, 0.0, target_mag / np.where(small, 1.0, mag))
    return np.where(small, target_mag.astype(complex), spectrum * scale)
