"""Complex-valued 2-D fields stored as separate real and imaginary planes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ComplexField:
    """A complex H x W field split into real and imaginary float planes."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.ndim != 2 or re.shape != im.shape:
            raise ConfigurationError(
                f"ComplexField needs matching 2-D planes, got {re.shape} and {im.shape}"
            )
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexField":
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "ComplexField":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def phase(self) -> np.ndarray:
        """Principal-value phase in (-pi, pi]."""
        return np.angle(self.to_complex())

    def energy(self) -> float:
        return float(np.sum(self.re * self.re + self.im * self.im))


def fft2(field: ComplexField) -> ComplexField:
    """Unnormalized 2-D DFT of a field."""
    return ComplexField.from_complex(np.fft.fft2(field.to_complex()))


def ifft2(field: ComplexField) -> ComplexField:
    """Inverse 2-D DFT carrying the 1/(H*W) factor."""
    return ComplexField.from_complex(np.fft.ifft2(field.to_complex()))
