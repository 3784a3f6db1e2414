"""Losses, Adam, and the supervised training loop.

The training objective is an L1 pixel distance on the real/imaginary
channels plus a squared-total-variation smoothness term:

    L = L_pixel + tv_weight * L_TV
    L_pixel = (1 / 2N^2) * sum(|d_re| + |d_im|)
    L_TV    = (1 / 2N^2) * sum of squared forward differences, both
              channels, last row/column excluded

Batched inputs average the per-sample losses.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TapeTensor
from .errors import ConfigurationError, DataError, TrainingDiverged
from .fields import ComplexField
from .metrics import phase_psnr
from .network import ModelConfig, ModelState, Parameter, bind, forward_on_tape, parameter_shapes, scale_targets

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# losses

def _as_pair_array(value) -> np.ndarray:
    if isinstance(value, ComplexField):
        return np.stack([value.re, value.im], axis=-1)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-1] != 2:
        raise ConfigurationError(f"expected (..., H, W, 2) channel pair, got shape {arr.shape}")
    return arr


def pixel_loss_graph(pred: TapeTensor, gt: np.ndarray) -> TapeTensor:
    """L1 distance over both channels on the tape; mean over any batch."""
    if pred.shape != gt.shape:
        raise ConfigurationError(f"prediction {pred.shape} vs target {gt.shape}")
    h, w = pred.shape[-3], pred.shape[-2]
    batch = int(np.prod(pred.shape[:-3], dtype=np.int64))
    total = ad.sum_(ad.abs_(ad.sub(pred, gt)))
    return ad.scale(total, 1.0 / (2.0 * h * w * batch))


def tv_loss_graph(pred: TapeTensor) -> TapeTensor:
    """Squared forward differences, both channels, interior terms only."""
    h, w = pred.shape[-3], pred.shape[-2]
    if h < 2 or w < 2:
        raise ConfigurationError(f"tv loss needs at least 2x2 fields, got {pred.shape}")
    batch = int(np.prod(pred.shape[:-3], dtype=np.int64))
    dh = ad.sub(ad.narrow(pred, -2, 1, w - 1), ad.narrow(pred, -2, 0, w - 1))
    dv = ad.sub(ad.narrow(pred, -3, 1, h - 1), ad.narrow(pred, -3, 0, h - 1))
    total = ad.add(ad.sum_(ad.mul(dh, dh)), ad.sum_(ad.mul(dv, dv)))
    return ad.scale(total, 1.0 / (2.0 * h * w * batch))


def loss_pixel(est, gt) -> float:
    a = _as_pair_array(est)
    b = _as_pair_array(gt)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[-3], a.shape[-2]
    batch = int(np.prod(a.shape[:-3], dtype=np.int64))
    return float(np.sum(np.abs(a - b)) / (2.0 * h * w * batch))


def loss_tv(est) -> float:
    a = _as_pair_array(est)
    h, w = a.shape[-3], a.shape[-2]
    if h < 2 or w < 2:
        raise ConfigurationError(f"tv loss needs at least 2x2 fields, got {a.shape}")
    batch = int(np.prod(a.shape[:-3], dtype=np.int64))
    dh = a[..., :, 1:, :] - a[..., :, :-1, :]
    dv = a[..., 1:, :, :] - a[..., :-1, :, :]
    return float((np.sum(dh * dh) + np.sum(dv * dv)) / (2.0 * h * w * batch))


def loss_total(est, gt, tv_weight: float = 0.1) -> float:
    value = loss_pixel(est, gt)
    if tv_weight:
        value += tv_weight * loss_tv(est)
    return value


def batch_loss(
    leaves,
    cfg: ModelConfig,
    targets: dict[int, np.ndarray],
    noise: np.ndarray,
    gt_batch: np.ndarray,
    tv_weight: float = 0.1,
) -> tuple[TapeTensor, float, float]:
    """Forward the network and attach the training loss on the same tape.

    Returns (loss node, pixel value, tv value); the TV graph is only built
    when tv_weight > 0.
    """
    tape = next(iter(leaves.values())).tape
    gt = np.asarray(gt_batch, dtype=cfg.np_dtype)
    pred = forward_on_tape(tape, leaves, targets, noise, cfg)
    pixel = pixel_loss_graph(pred, gt)
    if tv_weight > 0:
        tv = tv_loss_graph(pred)
        total = ad.add(pixel, ad.scale(tv, tv_weight))
        return total, float(pixel.value), float(tv.value)
    return pixel, float(pixel.value), 0.0


# ---------------------------------------------------------------------------
# optimizer

def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (value', m', v')."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over every parameter of a ModelState, reading Parameter.grad.

    clip_norm, when set, rescales the whole gradient to that global norm
    before the moment updates.
    """

    def __init__(self, state: ModelState, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 10.0):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.state = state
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {name: np.zeros_like(p.value) for name, p in state.items()}
        self._v = {name: np.zeros_like(p.value) for name, p in state.items()}

    def gradient_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.state.values())))

    def step(self) -> None:
        self.t += 1
        factor = 1.0
        if self.clip_norm is not None:
            norm = self.gradient_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for name, p in self.state.items():
            p.value, self._m[name], self._v[name] = adam_step(
                p.value, p.grad * factor, self._m[name], self._v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
            )


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 24
    epochs: int = 160
    tv_weight: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float | None = 10.0
    fixed_noise: bool = False
    val_noise_seed: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch size and epochs must be >= 1")
        if self.tv_weight < 0:
            raise ConfigurationError(f"tv weight must be >= 0, got {self.tv_weight}")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint cadence must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=1e-3, batch_size=8, epochs=20)
        base.update(overrides)
        return cls(**base)


def _stack_ground_truth(samples, cfg: ModelConfig) -> np.ndarray:
    rows = []
    for s in samples:
        gt = s.ground_truth
        if gt.shape != (cfg.n, cfg.n):
            raise ConfigurationError(f"sample {s.id!r} has shape {gt.shape}, config n={cfg.n}")
        rows.append(np.stack([gt.re, gt.im], axis=-1))
    return np.stack(rows).astype(cfg.np_dtype)


def predict_batch(state: ModelState, targets: dict[int, np.ndarray], noise: np.ndarray) -> np.ndarray:
    """Value-only forward for a prepared batch; returns (B, N, N, 2)."""
    tape = Tape()
    leaves = bind(tape, state)
    value = forward_on_tape(tape, leaves, targets, noise, state.config).value
    tape.release()
    return value


def validation_psnr(state: ModelState, samples, batch_size: int, noise_seed: int) -> float:
    """Mean phase PSNR over a held-out split, deterministic in noise_seed."""
    if not samples:
        return float("nan")
    cfg = state.config
    targets_all = scale_targets([s.measurement for s in samples], cfg)
    rng = np.random.default_rng(noise_seed)
    noise_all = rng.standard_normal((len(samples), cfg.n, cfg.n, 1))
    scores = []
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        batch_targets = {size: arr[lo:hi] for size, arr in targets_all.items()}
        out = predict_batch(state, batch_targets, noise_all[lo:hi])
        for row, sample in zip(out, samples[lo:hi]):
            est = ComplexField(row[..., 0].astype(np.float64), row[..., 1].astype(np.float64))
            scores.append(phase_psnr(est, sample.ground_truth))
    return float(np.mean(scores))


def train(
    state: ModelState,
    train_samples,
    val_samples=None,
    train_config: TrainConfig | None = None,
    out_dir: str | None = None,
    log=None,
) -> list[dict]:
    """Shuffled mini-batch Adam training; returns the per-epoch history.

    With out_dir set, writes loss_curve.csv, checkpoints at the configured
    cadence, and a final checkpoint. Fully reproducible from the seeds.
    """
    tcfg = train_config or TrainConfig()
    cfg = state.config
    samples = list(train_samples)
    if not samples:
        raise ConfigurationError("training requires at least one sample")
    gt_all = _stack_ground_truth(samples, cfg)
    targets_all = scale_targets([s.measurement for s in samples], cfg)
    count = len(samples)

    rng = np.random.default_rng(tcfg.seed)
    fixed_noise = rng.standard_normal((count, cfg.n, cfg.n, 1)) if tcfg.fixed_noise else None
    adam = Adam(state, tcfg.learning_rate, clip_norm=tcfg.clip_norm)
    history: list[dict] = []
    step = 0

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(count)
        sums = np.zeros(3)
        for batch_index, lo in enumerate(range(0, count, tcfg.batch_size)):
            idx = order[lo : lo + tcfg.batch_size]
            tape = Tape()
            leaves = bind(tape, state)
            batch_targets = {size: arr[idx] for size, arr in targets_all.items()}
            if fixed_noise is not None:
                noise = fixed_noise[idx]
            else:
                noise = rng.standard_normal((len(idx), cfg.n, cfg.n, 1))
            loss, pixel, tv = batch_loss(
                leaves, cfg, batch_targets, noise, gt_all[idx], tcfg.tv_weight
            )
            if not np.isfinite(loss.value):
                norm = float(np.sqrt(sum(float(np.sum(p.value**2)) for p in state.values())))
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_index} "
                    f"(parameter norm {norm:.6g})"
                )
            tape.backward(loss)
            state.zero_grads()
            for name, leaf in leaves.items():
                state[name].grad += leaf.grad
            tape.release()
            adam.step()
            step += 1
            sums += len(idx) * np.array([float(loss.value), pixel, tv])
        train_loss, pixel_mean, tv_mean = sums / count
        val = validation_psnr(state, list(val_samples or []), tcfg.batch_size, tcfg.val_noise_seed)
        row = {
            "epoch": epoch,
            "train_loss": float(train_loss),
            "pixel": float(pixel_mean),
            "tv": float(tv_mean),
            "val_psnr": float(val),
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch:4d}  loss {row['train_loss']:.6f}  pixel {row['pixel']:.6f}  "
                f"tv {row['tv']:.6f}  val_psnr {row['val_psnr']:.3f}"
            )
        if out_dir and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out_dir, f"checkpoint-epoch{epoch:04d}"), step)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(state, os.path.join(out_dir, "checkpoint-final"), step)
        write_loss_curve(os.path.join(out_dir, "loss_curve.csv"), history)
    return history


def write_loss_curve(path: str, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "pixel", "tv", "val_psnr"])
        writer.writeheader()
        for row in history:
            writer.writerow({key: row[key] for key in writer.fieldnames})


# ---------------------------------------------------------------------------
# checkpoints

def config_digest(config_dict: dict) -> str:
    import hashlib

    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(state: ModelState, path: str, step: int = 0) -> None:
    """One NPY per parameter plus a JSON manifest."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, p in state.items():
        fname = f"{name}.npy"
        np.save(os.path.join(path, fname), p.value)
        entries.append({"name": name, "shape": list(p.value.shape), "file": fname})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": state.config.to_dict(),
        "config_sha256": config_digest(state.config.to_dict()),
        "training_step": step,
        "parameters": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[ModelState, int]:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"checkpoint format version {version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = ModelConfig(**manifest["config"])
    recorded = manifest.get("config_sha256")
    if recorded and recorded != config_digest(manifest["config"]):
        raise DataError(f"checkpoint config hash mismatch under {path}")
    expected = parameter_shapes(cfg)
    params: dict[str, Parameter] = {}
    for entry in manifest["parameters"]:
        name = entry["name"]
        if name not in expected:
            raise DataError(f"checkpoint parameter {name!r} not part of the architecture")
        try:
            value = np.load(os.path.join(path, entry["file"]))
        except OSError as exc:
            raise DataError(f"checkpoint parameter file unreadable: {exc}") from exc
        if value.shape != expected[name]:
            raise DataError(
                f"checkpoint parameter {name!r} has shape {value.shape}, "
                f"expected {expected[name]}"
            )
        params[name] = Parameter(name, value.astype(cfg.np_dtype))
    missing = set(expected) - set(params)
    if missing:
        raise DataError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    ordered = {name: params[name] for name in expected}
    return ModelState(cfg, ordered), int(manifest.get("training_step", 0))
