"""Input coercion and validation shared by the estimator facade."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .fields import ComplexField
from .optics import IntensityMeasurement, OpticsConfig


def as_complex_field(value) -> ComplexField:
    """Accept a ComplexField, a complex 2-D array, or an (H, W, 2) pair."""
    if isinstance(value, ComplexField):
        return value
    arr = np.asarray(value)
    if arr.ndim == 2 and np.iscomplexobj(arr):
        return ComplexField.from_complex(arr)
    if arr.ndim == 2:
        return ComplexField(arr.astype(np.float64), np.zeros(arr.shape))
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return ComplexField(arr[..., 0], arr[..., 1])
    raise ConfigurationError(
        f"cannot interpret shape {arr.shape} ({arr.dtype}) as a complex field"
    )


def as_field_list(values) -> list[ComplexField]:
    """Accept one field, a sequence of fields, or a stacked (B, H, W, 2) array."""
    if isinstance(values, ComplexField):
        return [values]
    arr = np.asarray(values) if not isinstance(values, (list, tuple)) else None
    if arr is not None and arr.ndim == 4 and arr.shape[-1] == 2:
        return [ComplexField(row[..., 0], row[..., 1]) for row in arr]
    if arr is not None and arr.ndim == 3 and np.iscomplexobj(arr):
        return [ComplexField.from_complex(row) for row in arr]
    if arr is not None and arr.ndim <= 3:
        return [as_complex_field(arr)]
    return [as_complex_field(v) for v in values]


def as_measurement(value, optics: OpticsConfig | None = None) -> IntensityMeasurement:
    """Accept an IntensityMeasurement or a uint16 array plus its optics."""
    if isinstance(value, IntensityMeasurement):
        return value
    if optics is None:
        raise ConfigurationError("raw measurement arrays require an OpticsConfig")
    return IntensityMeasurement(np.asarray(value, dtype=np.uint16), optics)


def as_measurement_list(values, optics: OpticsConfig | None = None) -> list[IntensityMeasurement]:
    if isinstance(values, IntensityMeasurement):
        return [values]
    if hasattr(values, "measurement"):  # a single dataset sample
        return [values.measurement]
    out = []
    for v in values:
        if hasattr(v, "measurement"):
            v = v.measurement
        out.append(as_measurement(v, optics))
    return out


def check_same_length(X, y, x_name: str = "X", y_name: str = "y") -> None:
    if len(X) != len(y):
        raise ConfigurationError(
            f"{x_name} has {len(X)} entries but {y_name} has {len(y)}"
        )


def check_uniform_optics(measurements: list[IntensityMeasurement]) -> OpticsConfig:
    """All measurements in a batch must share one geometry."""
    if not measurements:
        raise ConfigurationError("expected at least one measurement")
    first = measurements[0].config
    for m in measurements[1:]:
        if m.config != first:
            raise ConfigurationError("measurements mix different optics configurations")
    return first
