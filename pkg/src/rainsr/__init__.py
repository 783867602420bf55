"""rainsr: desk-scale real-world 4x super-resolution under rain.

Three training stages compose the pipeline: an unpaired sunny<->rainy
translator, a learned /4 degrader into the real-LR domain, and a 4x
super-resolution network trained on pseudo-pairs so that inference both
upscales and derains.  Everything is seed-deterministic; checkpoints
round-trip bit-exactly.
"""

__version__ = "0.1.0"

from .config import TrainConfig, default_config, load_config
from .datasets import (BatchStream, DatasetIndex, MicroSizes, RainParams,
                       ingest_folder, make_micro_dataset, synth_rain)
from .imaging import (PatchSampleSpec, crop_to_multiple, extract_patches,
                      from_model_range, resize_bicubic, to_model_range)
from .metrics import MetricsReport, evaluate_pipeline, psnr, ssim
from .nets import (NetworkSpec, OptimizerState, ParamStore, backward,
                   build_network, forward, grad_check, opt_step)
from .run import evaluate_run, run_stage

__all__ = [
    "TrainConfig", "default_config", "load_config",
    "BatchStream", "DatasetIndex", "MicroSizes", "RainParams",
    "ingest_folder", "make_micro_dataset", "synth_rain",
    "PatchSampleSpec", "crop_to_multiple", "extract_patches",
    "from_model_range", "resize_bicubic", "to_model_range",
    "MetricsReport", "evaluate_pipeline", "psnr", "ssim",
    "NetworkSpec", "OptimizerState", "ParamStore", "backward",
    "build_network", "forward", "grad_check", "opt_step",
    "evaluate_run", "run_stage",
    "__version__",
]
