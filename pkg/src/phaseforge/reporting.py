"""Evaluation reports and feature-map inspection.

An EvalReport is one row per sample (PSNR/SSIM/MAE on the magnitude and
phase channels) plus aggregate means and provenance hashes. Reports
serialize to JSON (full) and CSV (rows only); loading a JSON report
recomputes the aggregate and refuses a file whose stored aggregate does
not match.

Network estimates are scored as-is; classical-solver estimates pass
through trivial-ambiguity alignment first, since those methods cannot
distinguish a solution from its shifted/conjugated twins.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError
from .fields import ComplexField
from .metrics import PHASE_PEAK, mae, phase_channel, psnr, ssim
from .network import ForwardCapture, ModelState, pprnet_forward, scale_targets
from .solvers import SolverConfig, align_trivial, solve
from .training import predict_batch

REPORT_FORMAT_VERSION = 1
METRIC_COLUMNS = ("psnr_mag", "psnr_phase", "ssim_mag", "ssim_phase", "mae_mag", "mae_phase")
SSIM_SETTINGS = {"window": 7, "k1": 0.01, "k2": 0.03}

_INF = "inf"  # JSON-safe sentinel for exact matches


@dataclass
class EvalReport:
    rows: list[dict]
    aggregate: dict
    provenance: dict = field(default_factory=dict)
    settings: dict = field(default_factory=lambda: dict(SSIM_SETTINGS))

    def row_for(self, sample_id: str) -> dict:
        for row in self.rows:
            if row["id"] == sample_id:
                return row
        raise KeyError(sample_id)


def score_pair(est: ComplexField, gt: ComplexField) -> dict:
    """All six channel metrics for one (estimate, truth) pair.

    Magnitude uses max(|gt|) as the PSNR/SSIM peak; phase compares wrapped
    angles shifted by +pi with a fixed 2*pi peak.
    """
    est_mag, gt_mag = est.magnitude(), gt.magnitude()
    est_ph, gt_ph = phase_channel(est), phase_channel(gt)
    mag_peak = float(np.max(gt_mag))
    return {
        "psnr_mag": psnr(est_mag, gt_mag, mag_peak),
        "psnr_phase": psnr(est_ph, gt_ph, PHASE_PEAK),
        "ssim_mag": ssim(est_mag, gt_mag, mag_peak, **SSIM_SETTINGS),
        "ssim_phase": ssim(est_ph, gt_ph, PHASE_PEAK, **SSIM_SETTINGS),
        "mae_mag": mae(est_mag, gt_mag),
        "mae_phase": mae(est_ph, gt_ph),
    }


def _aggregate(rows: list[dict]) -> dict:
    return {key: float(np.mean([row[key] for row in rows])) for key in METRIC_COLUMNS}


def _build_report(scored, provenance) -> EvalReport:
    rows = [dict(id=sample_id, **metrics) for sample_id, metrics in scored]
    rows.sort(key=lambda row: row["id"])
    return EvalReport(rows=rows, aggregate=_aggregate(rows), provenance=provenance or {})


def evaluate_network(
    state: ModelState,
    samples,
    noise_seed: int = 0,
    batch_size: int = 8,
    provenance: dict | None = None,
) -> EvalReport:
    """Score a trained network on a dataset split; estimates are NOT
    ambiguity-aligned (supervised training resolves the ambiguities)."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    cfg = state.config
    targets_all = scale_targets([s.measurement for s in samples], cfg)
    noise = np.random.default_rng(noise_seed).standard_normal((len(samples), cfg.n, cfg.n, 1))
    scored = []
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        batch = {size: arr[lo:hi] for size, arr in targets_all.items()}
        values = predict_batch(state, batch, noise[lo:hi])
        for row, sample in zip(values, samples[lo:hi]):
            est = ComplexField(row[..., 0].astype(np.float64), row[..., 1].astype(np.float64))
            scored.append((sample.id, score_pair(est, sample.ground_truth)))
    return _build_report(scored, provenance)


def evaluate_classical(
    solver_config: SolverConfig,
    samples,
    provenance: dict | None = None,
) -> EvalReport:
    """Run a classical solver per sample, align trivial ambiguities against
    the ground truth, then score."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    scored = []
    for sample in samples:
        estimate = solve(sample.measurement, solver_config).field
        aligned = align_trivial(estimate, sample.ground_truth)
        scored.append((sample.id, score_pair(aligned, sample.ground_truth)))
    return _build_report(scored, provenance)


# ---------------------------------------------------------------------------
# serialization

def _encode(value: float):
    if np.isinf(value):
        return _INF if value > 0 else f"-{_INF}"
    return float(value)


def _decode(value):
    if isinstance(value, str):
        return float(value)
    return float(value)


def save_report(report: EvalReport, json_path: str, csv_path: str | None = None) -> None:
    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "settings": report.settings,
        "provenance": report.provenance,
        "rows": [
            {key: (value if key == "id" else _encode(value)) for key, value in row.items()}
            for row in report.rows
        ],
        "aggregate": {key: _encode(value) for key, value in report.aggregate.items()},
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("id",) + METRIC_COLUMNS)
            writer.writeheader()
            for row in report.rows:
                writer.writerow(row)


def load_report(json_path: str) -> EvalReport:
    with open(json_path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != REPORT_FORMAT_VERSION:
        raise DataError(f"unsupported report format in {json_path}")
    rows = [
        {key: (value if key == "id" else _decode(value)) for key, value in row.items()}
        for row in payload["rows"]
    ]
    stored = {key: _decode(value) for key, value in payload["aggregate"].items()}
    report = EvalReport(
        rows=rows,
        aggregate=_aggregate(rows),
        provenance=payload.get("provenance", {}),
        settings=payload.get("settings", dict(SSIM_SETTINGS)),
    )
    for key in METRIC_COLUMNS:
        a, b = report.aggregate[key], stored[key]
        if a != b and not (np.isinf(a) and np.isinf(b) and a * b > 0):
            raise DataError(
                f"aggregate {key} in {json_path} does not match its rows "
                f"(stored {b!r}, recomputed {a!r})"
            )
    return report


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def checkpoint_digest(checkpoint_dir: str) -> str:
    """Order-independent hash over every file of a checkpoint directory."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(checkpoint_dir)):
        path = os.path.join(checkpoint_dir, name)
        if os.path.isfile(path):
            digest.update(name.encode())
            digest.update(bytes.fromhex(file_digest(path)))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# feature inspection

def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim != 2:
        raise ConfigurationError(f"PGM image must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def to_uint8(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round(255.0 * (plane - lo) / (hi - lo)).astype(np.uint8)


def inspect_features(state: ModelState, sample, out_dir: str, noise_seed: int = 0) -> dict:
    """Dump, for each expanding-path fusion block, the gated channel with
    the largest attention weight as a PGM image plus a JSON sidecar of all
    attention weights. Returns the sidecar payload."""
    os.makedirs(out_dir, exist_ok=True)
    capture = ForwardCapture()
    pprnet_forward(sample.measurement, state, noise_seed=noise_seed, collect=capture)
    expanding = [entry for entry in capture.hubs if not entry[0].startswith("init.")]
    if not expanding:  # single-scale model: the initialization hub is all there is
        expanding = capture.hubs
    sidecar = {"sample_id": sample.id, "noise_seed": noise_seed, "scales": []}
    for index, (hub_name, size, attention, gated, _fused) in enumerate(expanding):
        best = int(np.argmax(attention))
        image_name = f"scale{index}_{hub_name.split('.')[0]}_{size}x{size}.pgm"
        write_pgm(os.path.join(out_dir, image_name), to_uint8(gated[..., best]))
        sidecar["scales"].append(
            {
                "hub": hub_name,
                "size": int(size),
                "image": image_name,
                "selected_channel": best,
                "attention": [float(a) for a in np.asarray(attention).ravel()],
            }
        )
    with open(os.path.join(out_dir, "attention.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar
