"""Diffusion over one-hot categorical vectors with an argmax-and-re-noise sampler."""

from .categorical import corrupt, discretize, one_hot, renoise
from .denoiser import Condition, DenoiserSpec, EncoderSpec, encode, init_denoiser, init_encoder
from .estimators import ADDClassifier, ADDSequenceGenerator, PDDSequenceGenerator
from .pdd import pdd_generate, pdd_train_step
from .sampler import SampleConfig, Trajectory, sample
from .schedule import Schedule, build_schedule, sampling_timesteps
from .tasks import BlobTask, GrammarTask, gen_blobs, gen_grammar
from .training import DivergenceError, TrainConfig, train_step

__version__ = "0.1.0"

__all__ = [
    "ADDClassifier",
    "ADDSequenceGenerator",
    "BlobTask",
    "Condition",
    "DenoiserSpec",
    "DivergenceError",
    "EncoderSpec",
    "GrammarTask",
    "PDDSequenceGenerator",
    "SampleConfig",
    "Schedule",
    "TrainConfig",
    "Trajectory",
    "build_schedule",
    "corrupt",
    "discretize",
    "encode",
    "gen_blobs",
    "gen_grammar",
    "init_denoiser",
    "init_encoder",
    "one_hot",
    "pdd_generate",
    "pdd_train_step",
    "renoise",
    "sample",
    "sampling_timesteps",
    "train_step",
]
