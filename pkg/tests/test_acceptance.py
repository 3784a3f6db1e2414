"""Acceptance gate: one test per shipped guarantee.

Each test is self-contained and enforces both the numeric tolerance and the
runtime budget of its guarantee. Heavier end-to-end checks (the unwinding
ablation, bit-reproducible training) live here rather than in the per-module
suites.
"""

import shutil
import time

import numpy as np
import pytest

import oracles
from phaseforge.cli import main
from phaseforge.data import builtin_image, generate_dataset, load_dataset
from phaseforge.fields import ComplexField
from phaseforge.metrics import mae, psnr, ssim
from phaseforge.network import (
    ForwardCapture,
    ModelConfig,
    init_state,
    pprnet_forward,
)
from phaseforge.optics import OpticsConfig, forward_measure, measure_intensity, pad_center, scale_convert
from phaseforge.selfcheck import check_full_model, check_primitives, run_selftest
from phaseforge.solvers import (
    SolverConfig,
    align_trivial,
    solve,
    wf_gradient,
    wf_objective,
)
from phaseforge.training import TrainConfig, loss_pixel, loss_tv, train, validation_psnr


# ---------------------------------------------------------------------------
# 1. gradient correctness

def test_criterion_01_autodiff_finite_differences():
    start = time.time()
    worst = dict(check_primitives(seed=0))
    for name, err in worst.items():
        assert err < 1e-4, f"{name}: max rel err {err:.3e}"
    full = check_full_model(seed=0)
    assert full < 1e-3, f"full-model spot check {full:.3e}"
    assert time.time() - start < 300.0


# ---------------------------------------------------------------------------
# 2. measurement-consistency projections are exact

def test_criterion_02_projection_exactness():
    rng = np.random.default_rng(2)
    optics = OpticsConfig.desk()
    field = ComplexField(rng.random((16, 16)), rng.random((16, 16)))
    meas = forward_measure(field, optics)
    state = init_state(ModelConfig.desk(seed=0))
    capture = ForwardCapture()
    pprnet_forward(meas, state, collect=capture)
    assert capture.projections, "no projections captured"
    for _, _, value, sqrt_s in capture.projections:
        spectrum = np.fft.fft2(value[..., 0] + 1j * value[..., 1])
        target = np.asarray(sqrt_s, dtype=np.float64) ** 2
        positive = target > 0
        err = np.abs(np.abs(spectrum) ** 2 - target)[positive].max()
        assert err / target.max() < 1e-10


# ---------------------------------------------------------------------------
# 3. scale conversion reproduces the small DFT exactly

def test_criterion_03_scale_identity():
    rng = np.random.default_rng(3)
    h = 16
    for _ in range(5):
        u = rng.standard_normal((h, h)) + 1j * rng.standard_normal((h, h))
        padded = pad_center(u, 4 * h)
        intensity = np.abs(np.fft.fft2(padded)) ** 2
        converted = scale_convert(intensity, h, mode="decimate")
        small = np.abs(np.fft.fft2(u)) ** 2
        assert np.max(np.abs(converted - small)) / small.max() < 1e-10


# ---------------------------------------------------------------------------
# 4. classical solvers behave

def test_criterion_04_classical_solver_sanity():
    start = time.time()
    optics = OpticsConfig.desk(gain=1.0, defocus=False)

    # GS: residual trace monotone non-increasing on noiseless instances
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = ComplexField(rng.standard_normal((16, 16)), rng.standard_normal((16, 16)))
        res = solve(
            measure_intensity(x, optics),
            SolverConfig(method="gs", iterations=150, restarts=1, support_size=16, seed=seed),
        )
        assert np.all(np.diff(res.residuals) <= 1e-12)

    # HIO: best of 10 restarts recovers a real nonnegative target
    rng = np.random.default_rng(3)
    x = ComplexField(rng.random((16, 16)), np.zeros((16, 16)))
    res = solve(
        measure_intensity(x, optics),
        SolverConfig(
            method="hio",
            iterations=1000,
            restarts=10,
            support_size=16,
            constraint="real-nonnegative",
            seed=3,
        ),
    )
    assert res.residual < 1e-2

    # WF: objective non-increasing under a small fixed step
    rng = np.random.default_rng(6)
    truth = ComplexField(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
    target = measure_intensity(truth, OpticsConfig(n=8, m=32, gain=1.0, defocus=False))
    z = (rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))) / np.sqrt(2)
    step = 1e-3 * 0.4
    values = [wf_objective(z, target)]
    for _ in range(50):
        z = z - step * wf_gradient(z, target)
        values.append(wf_objective(z, target))
    assert np.all(np.diff(values) <= 1e-12)

    assert time.time() - start < 180.0


# ---------------------------------------------------------------------------
# 5. defocused measurements beat focused ones under saturation

def test_criterion_05_defocus_benefit():
    start = time.time()
    rng = np.random.default_rng(42)
    images = [builtin_image(rng, 16) for _ in range(10)]
    margins = []
    for arm_defocus in (True, False):
        optics = OpticsConfig.desk(pitch=32e-6, gain=8.0, defocus=arm_defocus)
        scores = []
        for i, image in enumerate(images):
            field = ComplexField(image, np.zeros_like(image))
            meas = forward_measure(field, optics)
            cfg = SolverConfig(
                method="hio",
                iterations=500,
                restarts=6,
                constraint="real-nonnegative",
                seed=i,
            )
            result = solve(meas, cfg)
            aligned = align_trivial(result.field, field)
            scores.append(psnr(aligned.magnitude(), image, peak=1.0))
        margins.append(float(np.mean(scores)))
    benefit = margins[0] - margins[1]
    assert benefit >= 3.0, f"defocus benefit {benefit:.2f} dB < 3 dB"
    assert time.time() - start < 300.0


# ---------------------------------------------------------------------------
# 6. unwinding projections earn their parameters

def test_criterion_06_unwinding_ablation(tmp_path):
    start = time.time()
    optics = OpticsConfig.desk(bit_depth=16, gain=0.8)
    data_dir = tmp_path / "ablation"
    generate_dataset(
        data_dir, optics, mode="phase-only", train_count=512, test_count=64,
        source="builtin-shapes", seed=0,
    )
    _, train_samples = load_dataset(data_dir, split="train")
    _, test_samples = load_dataset(data_dir, split="test")
    scores = {}
    for k in (3, 0):
        state = init_state(ModelConfig.desk(unwind=k, seed=0))
        train(state, train_samples, None, TrainConfig.desk())
        scores[k] = validation_psnr(state, test_samples, batch_size=8, noise_seed=1000)
    gap = scores[3] - scores[0]
    assert gap >= 1.0, f"unwinding gain {gap:.2f} dB < 1 dB ({scores})"
    assert time.time() - start <= 1800.0


# ---------------------------------------------------------------------------
# 7. a single sample is memorized immediately

def test_criterion_07_overfit_sanity(tmp_path):
    start = time.time()
    optics = OpticsConfig.desk()
    generate_dataset(
        tmp_path / "one", optics, mode="phase-only", train_count=1, test_count=1,
        source="builtin-shapes", seed=5,
    )
    _, samples = load_dataset(tmp_path / "one", split="train")
    state = init_state(ModelConfig.desk(seed=0))
    tcfg = TrainConfig(
        learning_rate=1e-3, batch_size=1, epochs=10, tv_weight=0.0, fixed_noise=True,
    )
    history = train(state, samples, None, tcfg)
    losses = [row["train_loss"] for row in history]
    assert len(losses) == 10
    assert np.all(np.diff(losses) < 0.0), f"not strictly decreasing: {losses}"
    assert time.time() - start < 120.0


# ---------------------------------------------------------------------------
# 8. bit-reproducibility of the command-line entry points

def _tree_bytes(root):
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_criterion_08_determinism(tmp_path, capsys):
    # selftest: identical stdout across two runs
    transcripts = []
    for _ in range(2):
        assert main(["selftest", "--threads", "1"]) == 0
        transcripts.append(capsys.readouterr().out)
    assert transcripts[0] == transcripts[1]

    # synth: byte-identical dataset when re-run at the same path
    data_dir = tmp_path / "data"
    synth_argv = [
        "synth", "--out", str(data_dir), "--count", "4", "--test-count", "1",
        "--n", "16", "--m", "64", "--seed", "9", "--threads", "1",
    ]
    assert main(synth_argv) == 0
    first = _tree_bytes(data_dir)
    shutil.rmtree(data_dir)
    assert main(synth_argv) == 0
    assert _tree_bytes(data_dir) == first

    # train --threads 1: byte-identical checkpoints and loss curve
    run_dir = tmp_path / "run"
    train_argv = [
        "train", "--data", str(data_dir), "--out", str(run_dir),
        "--c", "4", "--scales", "2", "--unwind", "1", "--g-depth", "1",
        "--g-width", "4", "--epochs", "2", "--batch-size", "2",
        "--lr", "1e-3", "--quiet", "--threads", "1",
    ]
    assert main(train_argv) == 0
    first = _tree_bytes(run_dir)
    shutil.rmtree(run_dir)
    assert main(train_argv) == 0
    assert _tree_bytes(run_dir) == first
    capsys.readouterr()


# ---------------------------------------------------------------------------
# 9. losses and metrics match naive loop implementations

def test_criterion_09_loss_and_metric_oracles():
    rng = np.random.default_rng(99)
    for _ in range(3):
        pred = rng.standard_normal((6, 6, 2))
        gt = rng.standard_normal((6, 6, 2))
        assert abs(loss_pixel(pred, gt) - oracles.naive_pixel_loss(pred, gt)) < 1e-10
        assert abs(loss_tv(pred) - oracles.naive_tv_loss(pred)) < 1e-10

        batch_pred = rng.standard_normal((3, 6, 6, 2))
        batch_gt = rng.standard_normal((3, 6, 6, 2))
        per_sample = [
            oracles.naive_pixel_loss(batch_pred[i], batch_gt[i]) for i in range(3)
        ]
        assert abs(loss_pixel(batch_pred, batch_gt) - np.mean(per_sample)) < 1e-10

        a = rng.random((12, 12))
        b = rng.random((12, 12))
        assert abs(psnr(a, b, peak=1.0) - oracles.naive_psnr(a, b, 1.0)) < 1e-10
        assert abs(ssim(a, b, 1.0) - oracles.naive_ssim(a, b)) < 1e-10
        assert abs(mae(a, b) - oracles.naive_mae(a, b)) < 1e-10
