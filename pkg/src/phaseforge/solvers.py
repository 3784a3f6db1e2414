"""Classical iterative Fourier phase-retrieval baselines.

All four solvers (GS, HIO, RAAR, WF) consume the same oversampled
intensity measurement: the unknown N x N field sits in the center of an
M x M plane whose Fourier magnitude is known. Restarts draw seeded random
initializations; the best restart is selected by the normalized Fourier
magnitude residual

    ||  |DFT(estimate)| - sqrt(X) ||_2 / || sqrt(X) ||_2,

which needs no ground truth. `align_trivial` removes the measurement's
trivial ambiguities (global phase, circular shift, conjugate twin) before
any reference-based scoring.

When a measurement declares a defocus, the known quadratic-phase kernel h
is part of the forward model: the padded plane holds x*h, not x. The
object-domain projection therefore divides h out before applying the
amplitude constraint and multiplies it back after, and every solver
returns the object estimate with h removed. Constraining the object
through h is what makes the ground truth a fixed point of the iteration
on defocused data; it also suppresses the shift and twin ambiguities,
because a shifted or twinned solution no longer satisfies the constraint
after division by h.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError
from .fields import ComplexField
from .optics import IntensityMeasurement, crop_center, defocus_kernel, pad_center

METHODS = ("gs", "hio", "raar", "wf")
CONSTRAINTS = ("none", "real-nonnegative", "phase-only")


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budget, relaxation, and object-domain constraint choices."""

    method: str = "hio"
    iterations: int = 1500
    restarts: int = 3
    beta: float | None = None
    t0: float = 330.0
    mu_max: float = 0.4
    support_size: int | None = None
    constraint: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.constraint not in CONSTRAINTS:
            raise ConfigurationError(
                f"unknown constraint {self.constraint!r}, expected one of {CONSTRAINTS}"
            )
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigurationError("iterations and restarts must be >= 1")
        if self.beta is not None and not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.t0 <= 0 or self.mu_max <= 0:
            raise ConfigurationError("t0 and mu_max must be positive")

    @property
    def resolved_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return {"hio": 0.9, "raar": 0.87}.get(self.method, 0.9)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SolveResult:
    """Best-restart reconstruction with its residual trace."""

    field: ComplexField
    residuals: np.ndarray
    restart_index: int

    @property
    def residual(self) -> float:
        return float(self.residuals[-1])


def _resolve_target(measurement, cfg: SolverConfig) -> tuple[np.ndarray, int, np.ndarray | None]:
    """Gain-corrected intensity target, support size, and defocus kernel.

    The kernel is the known unit-modulus phase factor multiplying the
    object inside the support; it is None for raw arrays and for
    measurements captured without defocus.
    """
    kernel = None
    if isinstance(measurement, IntensityMeasurement):
        data = measurement.data.astype(np.float64) / measurement.config.gain
        n = cfg.support_size if cfg.support_size is not None else measurement.config.n
        if measurement.config.defocus:
            kernel = defocus_kernel(measurement.config, n=n).to_complex()
    else:
        data = np.asarray(measurement, dtype=np.float64)
        if cfg.support_size is None:
            raise ConfigurationError("support_size is required for raw intensity arrays")
        n = cfg.support_size
    m = data.shape[0]
    if data.shape != (m, m):
        raise ConfigurationError(f"measurement must be square, got {data.shape}")
    if np.any(data < 0):
        raise ConfigurationError("intensity measurement must be non-negative")
    if n > m:
        raise ConfigurationError(f"support {n} exceeds measurement size {m}")
    return data, n, kernel


def _support_window(m: int, n: int) -> tuple[slice, slice]:
    off = (m - n) // 2
    return slice(off, off + n), slice(off, off + n)


def _object_project(
    z: np.ndarray, n: int, constraint: str, kernel: np.ndarray | None = None
) -> np.ndarray:
    """Metric projection onto {zero outside support} ∩ constraint set.

    With a kernel the constraint set is {pad(x * kernel) : x satisfies the
    amplitude constraint}; as the kernel has unit modulus pointwise, the
    change of variables preserves distances and projecting the divided
    field remains a metric projection.
    """
    out = np.zeros_like(z)
    win = _support_window(z.shape[0], n)
    inner = z[win]
    if constraint != "none" and kernel is not None:
        inner = inner * np.conj(kernel)
    if constraint == "none":
        out[win] = inner
    elif constraint == "real-nonnegative":
        out[win] = np.maximum(inner.real, 0.0)
    else:  # phase-only: project onto the unit circle, zero phase at origin
        mag = np.abs(inner)
        safe = np.where(mag < 1e-300, 1.0, mag)
        out[win] = np.where(mag < 1e-300, 1.0 + 0.0j, inner / safe)
    if constraint != "none" and kernel is not None:
        out[win] = out[win] * kernel
    return out


def _magnitude_project(z: np.ndarray, sqrt_target: np.ndarray) -> np.ndarray:
    spectrum = np.fft.fft2(z)
    mag = np.abs(spectrum)
    small = mag < 1e-12
    scale = np.where(small, 0.0, sqrt_target / np.where(small, 1.0, mag))
    replaced = np.where(small, sqrt_target.astype(complex), spectrum * scale)
    return np.fft.ifft2(replaced)


def _residual(z: np.ndarray, sqrt_target: np.ndarray, denom: float) -> float:
    return float(np.linalg.norm(np.abs(np.fft.fft2(z)) - sqrt_target) / denom)


def _init_field(
    m: int, n: int, constraint: str, rng: np.random.Generator, kernel: np.ndarray | None
) -> np.ndarray:
    """Seeded random start, zero outside the support."""
    z = np.zeros((m, m), dtype=complex)
    win = _support_window(m, n)
    draw = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    z[win] = draw
    return _object_project(z, n, constraint, kernel)


def _run_restarts(measurement, cfg, step_fn, x0: ComplexField | None):
    """Shared restart loop: run step_fn per restart, keep the best trace."""
    target, n, kernel = _resolve_target(measurement, cfg)
    sqrt_target = np.sqrt(target)
    denom = max(float(np.linalg.norm(sqrt_target)), 1e-300)
    m = target.shape[0]
    best = None
    for restart in range(cfg.restarts):
        if x0 is not None:
            if x0.shape != (n, n):
                raise ConfigurationError(f"x0 shape {x0.shape} does not match support {n}")
            inner = x0.to_complex()
            if kernel is not None:
                inner = inner * kernel
            start = pad_center(inner, m)
        else:
            rng = np.random.default_rng([cfg.seed, restart])
            start = _init_field(m, n, cfg.constraint, rng, kernel)
        est, trace = step_fn(start, sqrt_target, denom, m, n, cfg, kernel)
        if best is None or trace[-1] < best[1][-1]:
            best = (est, trace, restart)
    est, trace, restart = best
    inner = crop_center(est, n)
    if kernel is not None:
        inner = inner * np.conj(kernel)
    field = ComplexField.from_complex(inner)
    return SolveResult(field, np.asarray(trace), restart)


def _gs_steps(start, sqrt_target, denom, m, n, cfg, kernel):
    y = _object_project(start, n, cfg.constraint, kernel)
    trace = [_residual(y, sqrt_target, denom)]
    for _ in range(cfg.iterations):
        y = _object_project(_magnitude_project(y, sqrt_target), n, cfg.constraint, kernel)
        trace.append(_residual(y, sqrt_target, denom))
    return y, trace


def _hio_steps(start, sqrt_target, denom, m, n, cfg, kernel):
    beta = cfg.resolved_beta
    win = _support_window(m, n)
    y = _object_project(start, n, cfg.constraint, kernel)
    est = y
    trace = [_residual(est, sqrt_target, denom)]
    for _ in range(cfg.iterations):
        z = _magnitude_project(y, sqrt_target)
        projected = _object_project(z, n, cfg.constraint, kernel)
        satisfied = np.zeros((m, m), dtype=bool)
        if cfg.constraint == "real-nonnegative":
            inner = z[win] if kernel is None else z[win] * np.conj(kernel)
            satisfied[win] = inner.real >= 0.0
        else:
            satisfied[win] = True
        y = np.where(satisfied, projected, y - beta * z)
        est = projected
        trace.append(_residual(est, sqrt_target, denom))
    return est, trace


def _raar_steps(start, sqrt_target, denom, m, n, cfg, kernel):
    beta = cfg.resolved_beta
    x = start.copy()
    pm = _magnitude_project(x, sqrt_target)
    est = _object_project(pm, n, cfg.constraint, kernel)
    trace = [_residual(est, sqrt_target, denom)]
    for _ in range(cfg.iterations):
        x = raar_update(x, pm, n, cfg.constraint, beta, kernel)
        pm = _magnitude_project(x, sqrt_target)
        est = _object_project(pm, n, cfg.constraint, kernel)
        trace.append(_residual(est, sqrt_target, denom))
    return est, trace


def raar_update(
    x: np.ndarray,
    pm: np.ndarray,
    n: int,
    constraint: str,
    beta: float,
    kernel: np.ndarray | None = None,
) -> np.ndarray:
    """One relaxed averaged-alternating-reflections step.

    x <- beta * (x + R_S(R_M(x))) / 2 + (1 - beta) * P_M(x), with `pm`
    the precomputed magnitude projection P_M(x).
    """
    rm = 2.0 * pm - x
    rs = 2.0 * _object_project(rm, n, constraint, kernel) - rm
    return beta * 0.5 * (x + rs) + (1.0 - beta) * pm


def wf_objective(x: np.ndarray, target: np.ndarray) -> float:
    """f(x) = (1/(4 M^2)) sum(|DFT(pad x)|^2 - X)^2."""
    m = target.shape[0]
    y = np.fft.fft2(pad_center(np.asarray(x, dtype=complex), m))
    r = np.abs(y) ** 2 - target
    return float(np.sum(r * r) / (4.0 * m * m))


def wf_gradient(x: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Wirtinger gradient of `wf_objective` in df/dRe + j df/dIm layout."""
    m = target.shape[0]
    n = x.shape[0]
    y = np.fft.fft2(pad_center(np.asarray(x, dtype=complex), m))
    r = np.abs(y) ** 2 - target
    return crop_center(np.fft.ifft2(r * y), n)


def _wf_steps(start, sqrt_target, denom, m, n, cfg, kernel):
    # gradient descent runs on the padded-plane field; the kernel only
    # matters when the final iterate is converted to an object estimate
    target = sqrt_target**2
    x = crop_center(start, n)
    norm0 = float(np.sum(np.abs(x) ** 2))
    # scale the start so its measurement energy matches the data; the
    # mu / ||x0||^2 schedule assumes that scale
    energy = np.sum(target) / (m * m)
    if norm0 > 0:
        x = x * np.sqrt(energy / norm0)
    norm0 = max(float(np.sum(np.abs(x) ** 2)), 1e-300)
    full = pad_center(x, m)
    trace = [_residual(full, sqrt_target, denom)]
    for t in range(1, cfg.iterations + 1):
        mu = min(1.0 - np.exp(-t / cfg.t0), cfg.mu_max) / norm0
        with np.errstate(over="ignore", invalid="ignore"):
            stepped = x - mu * wf_gradient(x, target)
            r = _residual(pad_center(stepped, m), sqrt_target, denom)
        if not np.isfinite(r) or r > 1e6:
            # the ramped schedule can overshoot on spiky Fourier spectra;
            # freeze this restart at its last sane iterate
            trace.extend([trace[-1]] * (cfg.iterations + 1 - len(trace)))
            break
        x = stepped
        trace.append(r)
    return pad_center(x, m), trace


def gs_solve(measurement, cfg: SolverConfig, x0: ComplexField | None = None) -> SolveResult:
    """Alternating magnitude/object projections (error reduction)."""
    return _run_restarts(measurement, cfg, _gs_steps, x0)


def hio_solve(measurement, cfg: SolverConfig, x0: ComplexField | None = None) -> SolveResult:
    """Hybrid input-output: feedback y - beta*z outside the constraint set."""
    return _run_restarts(measurement, cfg, _hio_steps, x0)


def raar_solve(measurement, cfg: SolverConfig, x0: ComplexField | None = None) -> SolveResult:
    """Relaxed averaged alternating reflections."""
    return _run_restarts(measurement, cfg, _raar_steps, x0)


def wf_solve(measurement, cfg: SolverConfig, x0: ComplexField | None = None) -> SolveResult:
    """Wirtinger-flow gradient descent with the ramped step schedule."""
    return _run_restarts(measurement, cfg, _wf_steps, x0)


_SOLVE_FNS = {"gs": gs_solve, "hio": hio_solve, "raar": raar_solve, "wf": wf_solve}


def solve(measurement, cfg: SolverConfig, x0: ComplexField | None = None) -> SolveResult:
    """Dispatch on cfg.method."""
    return _SOLVE_FNS[cfg.method](measurement, cfg, x0)


def _conjugate_twin(z: np.ndarray) -> np.ndarray:
    """conj(z[-p mod N]): the spatial twin sharing the Fourier magnitude."""
    return np.conj(np.roll(z[::-1, ::-1], 1, axis=(0, 1)))


def align_trivial(candidate: ComplexField, reference: ComplexField) -> ComplexField:
    """Remove global phase, circular shift, and the conjugate-twin ambiguity.

    Searches all N^2 circular shifts of the candidate and of its conjugate
    twin via FFT cross-correlation, applies the closed-form optimal global
    phase, and returns the variant maximizing |<aligned, reference>|.
    """
    if candidate.shape != reference.shape:
        raise ConfigurationError(
            f"shape mismatch: {candidate.shape} vs {reference.shape}"
        )
    r = reference.to_complex()
    r_spec = np.fft.fft2(r)
    best = None
    for variant in (candidate.to_complex(), _conjugate_twin(candidate.to_complex())):
        corr = np.fft.ifft2(np.conj(np.fft.fft2(variant)) * r_spec)
        idx = np.unravel_index(int(np.argmax(np.abs(corr))), corr.shape)
        score = np.abs(corr[idx])
        if best is None or score > best[0]:
            best = (score, variant, idx, np.angle(corr[idx]))
    _, variant, (s0, s1), theta = best
    aligned = np.exp(1j * theta) * np.roll(variant, (s0, s1), axis=(0, 1))
    return ComplexField.from_complex(aligned)
