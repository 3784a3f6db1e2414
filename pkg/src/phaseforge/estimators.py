"""scikit-learn style facade over the network and the classical solvers.

Both estimators follow the BaseEstimator contract (constructor arguments
become get_params/set_params entries, fitted attributes carry a trailing
underscore), so they compose with sklearn model-selection utilities. X is
a list of IntensityMeasurements (dataset samples also work); y is a list
of ground-truth ComplexFields or a stacked (B, N, N, 2) array.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Sample
from .errors import ConfigurationError
from .fields import ComplexField
from .metrics import phase_psnr
from .network import ModelConfig, init_state, scale_targets
from .solvers import SolverConfig, align_trivial, solve
from .training import TrainConfig, predict_batch, train
from .validation import (
    as_field_list,
    as_measurement_list,
    check_same_length,
    check_uniform_optics,
)


class PPRNetReconstructor(BaseEstimator):
    """Supervised single-shot reconstructor: fit on (measurement, field)
    pairs, predict complex fields from new measurements."""

    def __init__(
        self,
        c: int = 8,
        scales: int = 2,
        unwind: int = 3,
        g_depth: int = 8,
        g_width: int = 32,
        scale_mode: str = "box-filter-decimate",
        dtype: str = "float64",
        learning_rate: float = 1e-3,
        batch_size: int = 8,
        epochs: int = 20,
        tv_weight: float = 0.1,
        clip_norm: float | None = 10.0,
        fixed_noise: bool = False,
        model_seed: int = 0,
        train_seed: int = 0,
        noise_seed: int = 0,
    ):
        self.c = c
        self.scales = scales
        self.unwind = unwind
        self.g_depth = g_depth
        self.g_width = g_width
        self.scale_mode = scale_mode
        self.dtype = dtype
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.tv_weight = tv_weight
        self.clip_norm = clip_norm
        self.fixed_noise = fixed_noise
        self.model_seed = model_seed
        self.train_seed = train_seed
        self.noise_seed = noise_seed

    def _model_config(self, optics) -> ModelConfig:
        return ModelConfig(
            n=optics.n,
            m=optics.m,
            c=self.c,
            scales=self.scales,
            unwind=self.unwind,
            g_depth=self.g_depth,
            g_width=self.g_width,
            scale_mode=self.scale_mode,
            dtype=self.dtype,
            seed=self.model_seed,
        )

    def fit(self, X, y=None, validation=None):
        """Train from scratch on measurements X and ground-truth fields y.

        X may also be dataset samples carrying their own ground truth, in
        which case y stays None. `validation` takes (X_val, y_val) pairs
        in the same formats for the per-epoch held-out metric.
        """
        samples = self._make_samples(X, y, tag="fit")
        optics = check_uniform_optics([s.measurement for s in samples])
        cfg = self._model_config(optics)
        tcfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            tv_weight=self.tv_weight,
            clip_norm=self.clip_norm,
            fixed_noise=self.fixed_noise,
            seed=self.train_seed,
        )
        val_samples = None
        if validation is not None:
            val_samples = self._make_samples(validation[0], validation[1], tag="val")
        state = init_state(cfg)
        self.history_ = train(state, samples, val_samples, tcfg)
        self.state_ = state
        self.n_features_in_ = optics.m * optics.m
        return self

    def _make_samples(self, X, y, tag: str) -> list[Sample]:
        if y is None:
            samples = []
            for i, item in enumerate(X if isinstance(X, (list, tuple)) else [X]):
                if not hasattr(item, "ground_truth"):
                    raise ConfigurationError(
                        "fit requires y unless X entries carry their own ground truth"
                    )
                samples.append(
                    Sample(
                        id=getattr(item, "id", f"{tag}-{i:05d}"),
                        mode=getattr(item, "mode", "unknown"),
                        ground_truth=item.ground_truth,
                        measurement=item.measurement,
                    )
                )
            return samples
        measurements = as_measurement_list(X)
        fields = as_field_list(y)
        check_same_length(measurements, fields)
        return [
            Sample(id=f"{tag}-{i:05d}", mode="unknown", ground_truth=gt, measurement=m)
            for i, (m, gt) in enumerate(zip(measurements, fields))
        ]

    def _require_fitted(self):
        if not hasattr(self, "state_"):
            raise ConfigurationError("this reconstructor is not fitted yet; call fit first")

    def predict(self, X) -> list[ComplexField]:
        """Reconstruct a field per measurement; deterministic in noise_seed."""
        self._require_fitted()
        measurements = as_measurement_list(X)
        cfg = self.state_.config
        for m in measurements:
            if m.config.m != cfg.m:
                raise ConfigurationError(
                    f"measurement m={m.config.m} does not match fitted m={cfg.m}"
                )
        targets = scale_targets(measurements, cfg)
        noise = np.random.default_rng(self.noise_seed).standard_normal(
            (len(measurements), cfg.n, cfg.n, 1)
        )
        out = []
        for lo in range(0, len(measurements), max(1, self.batch_size)):
            hi = min(lo + max(1, self.batch_size), len(measurements))
            batch = {size: arr[lo:hi] for size, arr in targets.items()}
            values = predict_batch(self.state_, batch, noise[lo:hi])
            out.extend(
                ComplexField(row[..., 0].astype(np.float64), row[..., 1].astype(np.float64))
                for row in values
            )
        return out

    def score(self, X, y) -> float:
        """Mean phase PSNR (dB) of predictions against ground truth."""
        self._require_fitted()
        fields = as_field_list(y)
        estimates = self.predict(X)
        check_same_length(estimates, fields, "predictions", "y")
        return float(np.mean([phase_psnr(est, gt) for est, gt in zip(estimates, fields)]))


class FourierMagnitudeSolver(BaseEstimator):
    """Classical iterative solvers behind the same estimator surface.

    Stateless: fit only validates the configuration. predict/transform run
    the configured solver per measurement; score aligns trivial ambiguities
    before comparing, since these solvers cannot resolve them.
    """

    def __init__(
        self,
        method: str = "hio",
        iterations: int = 1500,
        restarts: int = 3,
        beta: float | None = None,
        t0: float = 330.0,
        mu_max: float = 0.4,
        constraint: str = "none",
        support_size: int | None = None,
        seed: int = 0,
    ):
        self.method = method
        self.iterations = iterations
        self.restarts = restarts
        self.beta = beta
        self.t0 = t0
        self.mu_max = mu_max
        self.constraint = constraint
        self.support_size = support_size
        self.seed = seed

    def _solver_config(self) -> SolverConfig:
        return SolverConfig(
            method=self.method,
            iterations=self.iterations,
            restarts=self.restarts,
            beta=self.beta,
            t0=self.t0,
            mu_max=self.mu_max,
            constraint=self.constraint,
            support_size=self.support_size,
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        self._solver_config()
        self.is_fitted_ = True
        return self

    def predict(self, X) -> list[ComplexField]:
        cfg = self._solver_config()
        return [solve(m, cfg).field for m in as_measurement_list(X)]

    def transform(self, X) -> list[ComplexField]:
        return self.predict(X)

    def fit_transform(self, X, y=None) -> list[ComplexField]:
        return self.fit(X, y).transform(X)

    def score(self, X, y) -> float:
        """Mean phase PSNR (dB) after trivial-ambiguity alignment."""
        fields = as_field_list(y)
        estimates = self.predict(X)
        check_same_length(estimates, fields, "predictions", "y")
        scores = []
        for est, gt in zip(estimates, fields):
            aligned = align_trivial(est, gt)
            scores.append(phase_psnr(aligned, gt))
        return float(np.mean(scores))
