"""Local-global temporal difference video super-resolution."""

from .data import Clip, PairedSample, degrade, synth_scene
from .model import LGTD, ModelConfig, build_model, flops_estimate, param_count
from .metrics import psnr, ssim

__all__ = ["Clip", "PairedSample", "degrade", "synth_scene", "LGTD", "ModelConfig", "build_model",
           "flops_estimate", "param_count", "psnr", "ssim"]
__version__ = "0.1.0"
