"""Single-shot Fourier phase retrieval workbench."""

from .data import Sample, builtin_image, generate_dataset, load_dataset, synth_complex
from .errors import ConfigurationError, DataError, PhaseForgeError, TrainingDiverged
from .estimators import FourierMagnitudeSolver, PPRNetReconstructor
from .fields import ComplexField
from .metrics import mae, magnitude_psnr, phase_psnr, psnr, ssim
from .network import ModelConfig, ModelState, init_state, pprnet_forward, scale_targets
from .optics import (
    IntensityMeasurement,
    OpticsConfig,
    defocus_kernel,
    forward_measure,
    magnitude_project,
    measure_intensity,
    scale_convert,
)
from .reporting import (
    EvalReport,
    evaluate_classical,
    evaluate_network,
    inspect_features,
    load_report,
    save_report,
)
from .solvers import SolveResult, SolverConfig, align_trivial, solve
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ComplexField",
    "ConfigurationError",
    "DataError",
    "EvalReport",
    "FourierMagnitudeSolver",
    "IntensityMeasurement",
    "ModelConfig",
    "ModelState",
    "OpticsConfig",
    "PPRNetReconstructor",
    "PhaseForgeError",
    "Sample",
    "SolveResult",
    "SolverConfig",
    "TrainConfig",
    "TrainingDiverged",
    "align_trivial",
    "builtin_image",
    "defocus_kernel",
    "evaluate_classical",
    "evaluate_network",
    "forward_measure",
    "generate_dataset",
    "init_state",
    "inspect_features",
    "load_checkpoint",
    "load_dataset",
    "load_report",
    "mae",
    "magnitude_project",
    "magnitude_psnr",
    "measure_intensity",
    "phase_psnr",
    "pprnet_forward",
    "psnr",
    "save_checkpoint",
    "save_report",
    "scale_convert",
    "scale_targets",
    "solve",
    "ssim",
    "synth_complex",
    "train",
    "__version__",
]
