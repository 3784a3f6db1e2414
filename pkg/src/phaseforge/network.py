"""Multi-scale phase-retrieval network built from tape primitives.

The architecture is a UNet-style encoder/decoder whose working feature
maps are repeatedly pulled toward the measured Fourier magnitudes: at
every scale a hybrid block (HUB) splits the features, sends the first two
channels — interpreted as a complex field — through a chain of unwinding
layers (PUB) that alternate an exact magnitude projection with a learned
correction, refines the remaining channels with plain conv blocks (FRB),
and fuses everything back with channel attention (FFB).

Unwinding layer k computes

    u' = ifft2( sqrt(S) * exp(j*phase(fft2(u))) )        (projection)
    u  <- g_k(u') + beta_k * u                           (learned update)

where S is the measurement scaled to this grid, g_k is a small stack of
3x3 convolutions and beta_k a learnable scalar.

Parameters live outside any tape in a ModelState; a forward pass binds
them as leaves, so one state can serve concurrent forwards.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TapeTensor
from .errors import ConfigurationError
from .fields import ComplexField
from .optics import SCALE_MODES, IntensityMeasurement, scale_convert

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-scale geometry; `desk()` gives the small
    configuration every test trains in seconds/minutes.
    """

    n: int = 128
    m: int = 768
    c: int = 64
    scales: int = 3
    unwind: int = 5
    g_depth: int = 8
    g_width: int = 32
    leaky_slope: float = 0.2
    scale_mode: str = "box-filter-decimate"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ConfigurationError(f"n must be even and >= 2, got {self.n}")
        if self.scales < 1:
            raise ConfigurationError(f"scales must be >= 1, got {self.scales}")
        if self.n % (1 << (self.scales - 1)):
            raise ConfigurationError(
                f"n={self.n} is not divisible by 2^(scales-1)={1 << (self.scales - 1)}"
            )
        if self.coarsest_size < 2:
            raise ConfigurationError("coarsest scale must keep at least 2 pixels")
        if self.m <= 2 * self.n:
            raise ConfigurationError(f"oversampling requires m > 2n, got {self.m}, {self.n}")
        for size in self.scale_sizes:
            if self.m % size:
                raise ConfigurationError(f"m={self.m} not divisible by scale size {size}")
        if self.c < 3:
            raise ConfigurationError(f"c must be >= 3 (2 go to PUB, rest to FRB), got {self.c}")
        if self.unwind < 0:
            raise ConfigurationError(f"unwind depth must be >= 0, got {self.unwind}")
        if self.g_depth < 1 or self.g_width < 1:
            raise ConfigurationError("g_depth and g_width must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigurationError(
                f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}"
            )

    @property
    def scale_sizes(self) -> tuple[int, ...]:
        """Spatial sizes from finest to coarsest."""
        return tuple(self.n >> s for s in range(self.scales))

    @property
    def coarsest_size(self) -> int:
        return self.n >> (self.scales - 1)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def channels_at(self, scale: int) -> int:
        return self.c << scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(n=16, m=64, c=8, scales=2, unwind=3)
        base.update(overrides)
        return cls(**base)

    def with_unwind(self, k: int) -> "ModelConfig":
        return replace(self, unwind=k)


class Parameter:
    """Named learnable array with a persistent gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray) -> None:
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ModelState:
    """Ordered mapping of parameter name -> Parameter for one config."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]) -> None:
        self.config = config
        self._params = dict(params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self._params.values())


def _hub_total_channels(cfg: ModelConfig, channels: int, with_skip: bool) -> int:
    # stack = [x, pub out (2), frb out (C-2)] [+ skip (C)]
    return 2 * channels + (channels if with_skip else 0)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(prefix: str, cin: int, cout: int, k: int = 3, norm: bool = True):
        shapes[f"{prefix}.w"] = (k, k, cin, cout)
        shapes[f"{prefix}.b"] = (cout,)
        if norm:
            shapes[f"{prefix}.gamma"] = (cout,)
            shapes[f"{prefix}.beta"] = (cout,)

    def hub(prefix: str, channels: int, with_skip: bool):
        for k in range(cfg.unwind):
            layer = f"{prefix}.pub.layer{k}"
            shapes[f"{layer}.beta"] = ()
            widths = [2] + [cfg.g_width] * (cfg.g_depth - 1) + [2]
            for j in range(cfg.g_depth):
                conv(f"{layer}.g{j}", widths[j], widths[j + 1], norm=False)
        for j in range(3):
            conv(f"{prefix}.frb.conv{j}", channels - 2, channels - 2)
        ctot = _hub_total_channels(cfg, channels, with_skip)
        hidden = max(1, ctot // 4)
        shapes[f"{prefix}.ffb.fc1.w"] = (ctot, hidden)
        shapes[f"{prefix}.ffb.fc1.b"] = (hidden,)
        shapes[f"{prefix}.ffb.fc2.w"] = (hidden, ctot)
        shapes[f"{prefix}.ffb.fc2.b"] = (ctot,)
        conv(f"{prefix}.ffb.fuse", ctot, channels)

    conv("init.proj", 1, cfg.c, k=1, norm=False)
    hub("init.hub", cfg.c, with_skip=False)
    for i in range(1, cfg.scales):
        cin = cfg.channels_at(i - 1)
        conv(f"ds{i}.conv0", cin, 2 * cin)
        conv(f"ds{i}.conv1", 2 * cin, 2 * cin)
        conv(f"ds{i}.conv2", 2 * cin, 2 * cin)
    if cfg.scales > 1:
        hub("bottleneck.hub", cfg.channels_at(cfg.scales - 1), with_skip=False)
    for s in range(cfg.scales - 2, -1, -1):
        cs = cfg.channels_at(s)
        conv(f"up{s}.us.conv", 2 * cs, cs)
        hub(f"up{s}.hub", cs, with_skip=True)
    conv("pp.conv1", cfg.c, cfg.c)
    conv("pp.conv2", cfg.c, 2, norm=False)
    return shapes


def init_state(cfg: ModelConfig) -> ModelState:
    """Fan-in-scaled uniform init for weights/biases, (1, 0) for norm
    affine pairs, 1.0 for every unwinding beta. Deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.np_dtype
    params: dict[str, Parameter] = {}
    for name, shape in parameter_shapes(cfg).items():
        leafname = name.rsplit(".", 1)[-1]
        if leafname == "gamma":
            value = np.ones(shape, dtype=dtype)
        elif leafname == "beta" and shape == ():
            value = np.asarray(1.0, dtype=dtype)
        elif leafname == "beta":
            value = np.zeros(shape, dtype=dtype)
        elif leafname == "w":
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif leafname == "b":
            fan_in = _bias_fan_in(name, cfg)
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            raise ConfigurationError(f"unrecognized parameter kind in {name!r}")
        params[name] = Parameter(name, value)
    return ModelState(cfg, params)


def _bias_fan_in(name: str, cfg: ModelConfig) -> int:
    shapes = parameter_shapes(cfg)
    w_shape = shapes[name.rsplit(".", 1)[0] + ".w"]
    if len(w_shape) == 4:
        return w_shape[0] * w_shape[1] * w_shape[2]
    return w_shape[0]


def bind(tape: Tape, state: ModelState) -> dict[str, TapeTensor]:
    """Register every parameter as a leaf on a fresh tape."""
    return {name: tape.leaf(p.value) for name, p in state.items()}


@dataclass
class ForwardCapture:
    """Optional instrumentation filled during a forward pass."""

    projections: list = field(default_factory=list)  # (hub, layer, pair value, sqrt target)
    hubs: list = field(default_factory=list)  # (hub, size, attention, gated, fused)


def conv_block(x: TapeTensor, leaves, prefix: str, stride: int, cfg: ModelConfig) -> TapeTensor:
    y = ad.conv2d(x, leaves[f"{prefix}.w"], leaves[f"{prefix}.b"], stride)
    y = ad.instance_norm(y, leaves[f"{prefix}.gamma"], leaves[f"{prefix}.beta"])
    return ad.leaky_relu(y, cfg.leaky_slope)


def ds_block(x: TapeTensor, leaves, prefix: str, cfg: ModelConfig) -> TapeTensor:
    if x.shape[-3] % 2 or x.shape[-2] % 2:
        raise ConfigurationError(f"ds_block needs even spatial size, got {x.shape}")
    x = conv_block(x, leaves, f"{prefix}.conv0", 2, cfg)
    x = conv_block(x, leaves, f"{prefix}.conv1", 1, cfg)
    return conv_block(x, leaves, f"{prefix}.conv2", 1, cfg)


def us_block(x: TapeTensor, leaves, prefix: str, cfg: ModelConfig) -> TapeTensor:
    return conv_block(ad.nearest_upsample2(x), leaves, f"{prefix}.conv", 1, cfg)


def pub_forward(
    u: TapeTensor,
    sqrt_s: np.ndarray,
    leaves,
    prefix: str,
    cfg: ModelConfig,
    collect: ForwardCapture | None = None,
    hub_name: str = "",
) -> TapeTensor:
    """K unwinding layers on a (..., H, H, 2) channel pair."""
    for k in range(cfg.unwind):
        projected = ad.ifft2(ad.magnitude_replace(ad.fft2(u), sqrt_s))
        if collect is not None:
            collect.projections.append((hub_name, k, projected.value, sqrt_s))
        h = projected
        for j in range(cfg.g_depth):
            h = ad.conv2d(h, leaves[f"{prefix}.layer{k}.g{j}.w"], leaves[f"{prefix}.layer{k}.g{j}.b"], 1)
            if j < cfg.g_depth - 1:
                h = ad.leaky_relu(h, cfg.leaky_slope)
        u = ad.add(h, ad.mul(leaves[f"{prefix}.layer{k}.beta"], u))
    return u


def frb_forward(v: TapeTensor, leaves, prefix: str, cfg: ModelConfig) -> TapeTensor:
    for j in range(3):
        v = conv_block(v, leaves, f"{prefix}.conv{j}", 1, cfg)
    return v


def ffb_forward(
    stack: TapeTensor,
    out_channels: int,
    leaves,
    prefix: str,
    cfg: ModelConfig,
    collect: ForwardCapture | None = None,
    hub_name: str = "",
) -> TapeTensor:
    """Channel attention over the stacked features, then a fusing conv."""
    ctot = stack.shape[-1]
    if leaves[f"{prefix}.fc1.w"].shape[0] != ctot:
        raise ConfigurationError(
            f"attention input width {ctot} does not match parameters "
            f"{leaves[f'{prefix}.fc1.w'].shape}"
        )
    pooled = ad.global_avg_pool(stack)
    hidden = ad.leaky_relu(
        ad.dense(pooled, leaves[f"{prefix}.fc1.w"], leaves[f"{prefix}.fc1.b"]), cfg.leaky_slope
    )
    attention = ad.sigmoid(ad.dense(hidden, leaves[f"{prefix}.fc2.w"], leaves[f"{prefix}.fc2.b"]))
    gate = ad.reshape(attention, attention.shape[:-1] + (1, 1, ctot))
    gated = ad.mul(stack, gate)
    fused = conv_block(gated, leaves, f"{prefix}.fuse", 1, cfg)
    if collect is not None:
        collect.hubs.append((hub_name, stack.shape[-3], attention.value, gated.value, fused.value))
    return fused


def hub_forward(
    x: TapeTensor,
    sqrt_s: np.ndarray,
    skip: TapeTensor | None,
    leaves,
    prefix: str,
    cfg: ModelConfig,
    collect: ForwardCapture | None = None,
) -> TapeTensor:
    channels = x.shape[-1]
    u = ad.narrow(x, -1, 0, 2)
    v = ad.narrow(x, -1, 2, channels - 2)
    u_out = pub_forward(u, sqrt_s, leaves, f"{prefix}.pub", cfg, collect, hub_name=prefix)
    v_out = frb_forward(v, leaves, f"{prefix}.frb", cfg)
    parts = [x, u_out, v_out]
    if skip is not None:
        parts.append(skip)
    stack = ad.concat(parts, axis=-1)
    return ffb_forward(stack, channels, leaves, f"{prefix}.ffb", cfg, collect, hub_name=prefix)


def scale_targets(measurements, cfg: ModelConfig) -> dict[int, np.ndarray]:
    """sqrt of the scale-converted measurement for every scale size.

    Accepts one IntensityMeasurement or a list; list input yields stacked
    (B, H, H) targets matching a batched forward.
    """
    single = isinstance(measurements, IntensityMeasurement)
    batch = [measurements] if single else list(measurements)
    targets: dict[int, np.ndarray] = {}
    for size in cfg.scale_sizes:
        planes = []
        for meas in batch:
            if meas.config.m != cfg.m:
                raise ConfigurationError(
                    f"measurement size {meas.config.m} does not match config m={cfg.m}"
                )
            planes.append(np.sqrt(scale_convert(meas, size, mode=cfg.scale_mode)))
        stacked = np.stack(planes).astype(cfg.np_dtype)
        targets[size] = stacked[0] if single else stacked
    return targets


def forward_on_tape(
    tape: Tape,
    leaves,
    sqrt_targets: dict[int, np.ndarray],
    noise: np.ndarray,
    cfg: ModelConfig,
    collect: ForwardCapture | None = None,
) -> TapeTensor:
    """Full network on an existing tape.

    `noise` is (N, N, 1) or (B, N, N, 1); each sqrt target must carry the
    same leading batch shape.
    """
    if noise.shape[-3:] != (cfg.n, cfg.n, 1):
        raise ConfigurationError(f"noise shape {noise.shape} does not match n={cfg.n}")
    x = ad.conv2d(tape.leaf(noise.astype(cfg.np_dtype)), leaves["init.proj.w"], leaves["init.proj.b"], 1)
    x = hub_forward(x, sqrt_targets[cfg.n], None, leaves, "init.hub", cfg, collect)
    skips: dict[int, TapeTensor] = {0: x}
    for i in range(1, cfg.scales):
        x = ds_block(x, leaves, f"ds{i}", cfg)
        if i < cfg.scales - 1:
            skips[i] = x
    if cfg.scales > 1:
        x = hub_forward(
            x, sqrt_targets[cfg.coarsest_size], None, leaves, "bottleneck.hub", cfg, collect
        )
    for s in range(cfg.scales - 2, -1, -1):
        x = us_block(x, leaves, f"up{s}.us", cfg)
        x = hub_forward(x, sqrt_targets[cfg.n >> s], skips[s], leaves, f"up{s}.hub", cfg, collect)
    x = conv_block(x, leaves, "pp.conv1", 1, cfg)
    return ad.conv2d(x, leaves["pp.conv2.w"], leaves["pp.conv2.b"], 1)


def pprnet_forward(
    measurement: IntensityMeasurement,
    state: ModelState,
    noise_seed: int = 0,
    collect: ForwardCapture | None = None,
) -> ComplexField:
    """Reconstruct one measurement; deterministic in (state, noise_seed)."""
    cfg = state.config
    if measurement.config.m != cfg.m:
        raise ConfigurationError(
            f"measurement m={measurement.config.m} does not match config m={cfg.m}"
        )
    tape = Tape()
    leaves = bind(tape, state)
    targets = scale_targets(measurement, cfg)
    noise = np.random.default_rng(noise_seed).standard_normal((cfg.n, cfg.n, 1))
    out = forward_on_tape(tape, leaves, targets, noise, cfg, collect)
    value = np.asarray(out.value, dtype=np.float64)
    tape.release()
    return ComplexField(value[..., 0], value[..., 1])
