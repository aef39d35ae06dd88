from .schedule import (
    NoiseSchedule,
    ScheduleError,
    TrajectoryError,
    make_schedule,
    forward_diffuse,
    ddim_step,
    ddim_sample,
    ddim_invert,
)
from .denoiser import DenoiseOutput, Denoiser, LinearDenoiser, HashTokenizer
from .toy_unet import (
    ToyDenoiser,
    ToyDenoiserConfig,
    TrainingDiverged,
    train_toy_denoiser,
    save_denoiser,
    load_denoiser,
    encode_latent,
    decode_latent,
)

__all__ = [
    "NoiseSchedule",
    "ScheduleError",
    "TrajectoryError",
    "make_schedule",
    "forward_diffuse",
    "ddim_step",
    "ddim_sample",
    "ddim_invert",
    "DenoiseOutput",
    "Denoiser",
    "LinearDenoiser",
    "HashTokenizer",
    "ToyDenoiser",
    "ToyDenoiserConfig",
    "TrainingDiverged",
    "train_toy_denoiser",
    "save_denoiser",
    "load_denoiser",
    "encode_latent",
    "decode_latent",
]
