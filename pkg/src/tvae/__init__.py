"""Temporal VAE for longitudinal bone-lesion prediction, with phantom data and metrics."""
from .losses import LossBreakdown, LossWeights
from .metrics import EvalConfig, EvalReport, evaluate_model, psnr, ssim, uncertainty_map
from .model import TVAE, HiddenStates, LatentGaussian, TVAEConfig, sample_latent
from .phantom import PhantomConfig, VolumeSequence, generate_dataset, generate_sequence
from .train import TrainConfig, Trainer, fit, load_checkpoint, load_model, save_checkpoint

__version__ = "0.1.0"
