"""Numerical self-verification suites.

Finite-difference gradient checks for every differentiable primitive, the
magnitude-projection exactness check, and the scale-conversion identity.
The test suite and the `selftest` CLI subcommand both run these.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative difference with an absolute floor."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(
    f: Callable[..., float], arrays: list[np.ndarray], idx: int, step: float = 1e-6
) -> np.ndarray:
    """Central finite differences of f w.r.t. every entry of arrays[idx]."""
    arrays = [a.copy() for a in arrays]
    target = arrays[idx]
    grad = np.zeros_like(target)
    flat = target.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(*arrays)
        flat[i] = orig - step
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradcheck(
    build: Callable[..., ad.TapeTensor],
    arrays: Sequence[np.ndarray],
    step: float = 1e-6,
) -> float:
    """Compare backward() against central differences for one scalar graph.

    `build` maps leaf TapeTensors to a scalar TapeTensor. Returns the
    largest relative error over all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def f(*arrs):
        tape = Tape()
        return float(build(*[tape.leaf(a) for a in arrs]).value)

    tape = Tape()
    leaves = [tape.leaf(a.copy()) for a in arrays]
    tape.backward(build(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(f, list(arrays), i, step=step)
        worst = max(worst, max_rel_err(leaf.grad, num))
    return worst


def _weighted_sum(out: ad.TapeTensor, rng: np.random.Generator) -> ad.TapeTensor:
    """Project an op output to a scalar with fixed random weights.

    A plain sum can hide gradient errors whose contributions cancel; random
    weights make the check sensitive to every output entry.
    """
    w = rng.standard_normal(out.value.shape)
    return ad.sum_(ad.mul(out, w))


def check_primitives(seed: int = 0, step: float = 1e-6) -> list[tuple[str, float]]:
    """Finite-difference every primitive on small random shapes.

    Returns (name, max relative error) pairs. Inputs of non-smooth ops are
    kept away from their kink points.
    """
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    cases: list[tuple[str, Callable, list[np.ndarray]]] = []
    w1 = rng.standard_normal((3, 4))
    cases.append(("add", lambda a, b: ad.sum_(ad.mul(ad.add(a, b), w1)), [r(3, 4), r(4)]))
    cases.append(("sub", lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), w1)), [r(3, 4), r(3, 4)]))
    cases.append(("mul", lambda a, b: ad.sum_(ad.mul(ad.mul(a, b), w1)), [r(3, 4), r()]))
    cases.append(("scale", lambda a: ad.sum_(ad.mul(ad.scale(a, -1.7), w1)), [r(3, 4)]))
    cases.append(
        ("abs", lambda a: ad.sum_(ad.mul(ad.abs_(a), w1)), [np.sign(r(3, 4)) * (0.5 + rng.random((3, 4)))])
    )
    cases.append(("sqrt", lambda a: ad.sum_(ad.mul(ad.sqrt_(a), w1)), [0.1 + rng.random((3, 4))]))
    cases.append(
        ("leaky_relu", lambda a: ad.sum_(ad.mul(ad.leaky_relu(a, 0.2), w1)), [np.sign(r(3, 4)) * (0.2 + rng.random((3, 4)))])
    )
    cases.append(("sigmoid", lambda a: ad.sum_(ad.mul(ad.sigmoid(a), w1)), [r(3, 4)]))
    cases.append(("sum", lambda a: ad.sum_(a), [r(3, 4)]))
    wn = rng.standard_normal((2, 2, 3))
    cases.append(("narrow", lambda a: ad.sum_(ad.mul(ad.narrow(a, 1, 2, 2), wn)), [r(2, 5, 3)]))
    wr = rng.standard_normal((3, 4))
    cases.append(("reshape", lambda a: ad.sum_(ad.mul(ad.reshape(a, (3, 4)), wr)), [r(2, 6)]))
    wc = rng.standard_normal((2, 5))
    cases.append(
        ("concat", lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=-1), wc)), [r(2, 3), r(2, 2)])
    )
    wu = rng.standard_normal((2, 6, 6, 2))
    cases.append(("nearest_upsample2", lambda a: ad.sum_(ad.mul(ad.nearest_upsample2(a), wu)), [r(2, 3, 3, 2)]))
    wp = rng.standard_normal((2, 4))
    cases.append(("global_avg_pool", lambda a: ad.sum_(ad.mul(ad.global_avg_pool(a), wp)), [r(2, 3, 3, 4)]))
    wd = rng.standard_normal((2, 3))
    cases.append(
        ("dense", lambda x, w, b: ad.sum_(ad.mul(ad.dense(x, w, b), wd)), [r(2, 5), r(5, 3), r(3)])
    )
    wc1 = rng.standard_normal((2, 5, 5, 4))
    cases.append(
        (
            "conv2d_s1",
            lambda x, w, b: ad.sum_(ad.mul(ad.conv2d(x, w, b, 1), wc1)),
            [r(2, 5, 5, 3), 0.2 * r(3, 3, 3, 4), 0.2 * r(4)],
        )
    )
    wc2 = rng.standard_normal((3, 3, 3))
    cases.append(
        (
            "conv2d_s2",
            lambda x, w, b: ad.sum_(ad.mul(ad.conv2d(x, w, b, 2), wc2)),
            [r(6, 6, 2), 0.2 * r(3, 3, 2, 3), 0.2 * r(3)],
        )
    )
    wi = rng.standard_normal((2, 4, 4, 3))
    cases.append(
        (
            "instance_norm",
            lambda x, g, b: ad.sum_(ad.mul(ad.instance_norm(x, g, b), wi)),
            [r(2, 4, 4, 3), 0.5 + rng.random(3), r(3)],
        )
    )
    wf = rng.standard_normal((2, 4, 4, 2))
    cases.append(("fft2", lambda a: ad.sum_(ad.mul(ad.fft2(a), wf)), [r(2, 4, 4, 2)]))
    cases.append(("ifft2", lambda a: ad.sum_(ad.mul(ad.ifft2(a), wf)), [r(2, 4, 4, 2)]))
    target = 0.5 + rng.random((4, 4))
    wm = rng.standard_normal((4, 4, 2))
    mag_in = r(4, 4, 2)
    mag_in += 0.5 * np.sign(mag_in)  # keep |z| well above the eps fallback
    cases.append(
        ("magnitude_replace", lambda a: ad.sum_(ad.mul(ad.magnitude_replace(a, target), wm)), [mag_in])
    )

    results = []
    for name, build, arrays in cases:
        results.append((name, gradcheck(build, arrays, step=step)))
    return results


def check_projection(seed: int = 0) -> float:
    """Sup-norm ratio of |fft2(projected)|^2 against its target magnitude."""
    rng = np.random.default_rng(seed)
    h = 8
    u = rng.standard_normal((h, h, 2))
    # strictly positive target built from a random field's spectrum
    s = np.abs(np.fft.fft2(rng.standard_normal((h, h)) + 1j * rng.standard_normal((h, h)))) ** 2 + 0.1
    tape = Tape()
    spec = ad.fft2(tape.leaf(u))
    replaced = ad.magnitude_replace(spec, np.sqrt(s))
    proj = ad.ifft2(replaced)
    achieved = np.abs(np.fft.fft2(proj.value[..., 0] + 1j * proj.value[..., 1])) ** 2
    return float(np.max(np.abs(achieved - s)) / np.max(s))


def check_scale_identity(seed: int = 0) -> float:
    """Decimating the oversampled intensity must equal the small DFT exactly."""
    from .fields import ComplexField
    from .optics import OpticsConfig, measure_intensity, scale_convert

    rng = np.random.default_rng(seed)
    h = 8
    u = rng.standard_normal((h, h)) + 1j * rng.standard_normal((h, h))
    cfg = OpticsConfig(n=h, m=4 * h, gain=1.0, defocus=False)
    intensity = measure_intensity(ComplexField.from_complex(u), cfg)
    s = scale_convert(intensity, h, mode="decimate")
    ref = np.abs(np.fft.fft2(u)) ** 2
    return float(np.max(np.abs(s - ref)) / np.max(ref))


def check_full_model(seed: int = 0, n_params: int = 5, entries_per_param: int = 2,
                     step: float = 1e-6) -> float:
    """Finite-difference spot check of the full desk network loss.

    Perturbs a few entries of `n_params` randomly chosen parameters and
    compares against the tape gradient. Returns the max relative error.
    """
    from .data import builtin_image, synth_complex
    from .network import ModelConfig, init_state, scale_targets
    from .optics import OpticsConfig, forward_measure
    from .training import batch_loss

    cfg = ModelConfig.desk(seed=seed)
    optics = OpticsConfig.desk()
    rng = np.random.default_rng(seed)
    gt = synth_complex(builtin_image(rng, cfg.n), None, "phase-only")
    meas = forward_measure(gt, optics)
    state = init_state(cfg)
    targets = scale_targets([meas], cfg)
    noise = rng.standard_normal((1, cfg.n, cfg.n, 1))
    gt_batch = np.stack([np.stack([gt.re, gt.im], axis=-1)])

    def run(params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        tape = Tape()
        leaves = {name: tape.leaf(v) for name, v in params.items()}
        loss, _, _ = batch_loss(leaves, cfg, targets, noise, gt_batch, tv_weight=0.1)
        tape.backward(loss)
        grads = {name: leaf.grad for name, leaf in leaves.items()}
        tape.release()
        return float(loss.value), grads

    base = {name: p.value.copy() for name, p in state.items()}
    _, grads = run(base)
    names = sorted(base)
    picked = [names[i] for i in rng.choice(len(names), size=min(n_params, len(names)), replace=False)]
    worst = 0.0
    for name in picked:
        flat_idx = rng.choice(base[name].size, size=min(entries_per_param, base[name].size), replace=False)
        for fi in flat_idx:
            bumped = {k: v.copy() for k, v in base.items()}
            bumped[name].ravel()[fi] += step
            fp, _ = run(bumped)
            bumped[name].ravel()[fi] -= 2 * step
            fm, _ = run(bumped)
            num = (fp - fm) / (2 * step)
            ana = float(grads[name].ravel()[fi])
            worst = max(worst, max_rel_err(np.array(ana), np.array(num), floor=1e-4))
    return worst


def run_selftest(seed: int = 0, *, full_model: bool = True, emit=print) -> bool:
    """Run every suite, print one line per check, return overall success."""
    ok = True

    def report(name: str, err: float, tol: float) -> None:
        nonlocal ok
        good = err < tol
        ok = ok and good
        emit(f"{'ok  ' if good else 'FAIL'}  {name}: max rel err {err:.3e} (tol {tol:g})")

    for name, err in check_primitives(seed=seed):
        report(f"grad {name}", err, 1e-4)
    report("projection exactness", check_projection(seed=seed), 1e-10)
    report("scale-conversion identity", check_scale_identity(seed=seed), 1e-10)
    if full_model:
        report("full-model gradient spot check", check_full_model(seed=seed), 1e-3)
    return ok
