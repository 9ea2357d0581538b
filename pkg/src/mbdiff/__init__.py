"""Band-split diffusion decoder for discrete audio tokens, at desk scale."""

__version__ = "0.1.0"

from .audio import AudioSignal, RngStream, SynthSpec, load_wav, save_wav, synthesize
from .config import PipelineConfig, load_config
from .eq import EqProfile, deequalize, equalize, fit_profile
from .filterbank import FilterBank, design_bands, merge, split
from .kernels import BACKEND
from .metrics import MelConfig, mel_snr
from .schedule import NoiseSchedule, make_schedule, power_schedule, subsample

__all__ = [
    "AudioSignal", "RngStream", "SynthSpec", "load_wav", "save_wav", "synthesize",
    "PipelineConfig", "load_config", "EqProfile", "deequalize", "equalize", "fit_profile",
    "FilterBank", "design_bands", "merge", "split", "BACKEND", "MelConfig", "mel_snr",
    "NoiseSchedule", "make_schedule", "power_schedule", "subsample",
]
