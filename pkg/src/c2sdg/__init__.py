"""Channel-level contrastive single-domain generalization for segmentation.

A self-contained float64 stack: a tape-based autodiff tensor core, style
augmentation (gamma/noise/blur, Bezier intensity curves, low-frequency
Fourier amplitude replacement), channel-prompt feature disentanglement with
contrastive training, a double-conv U-shape segmentation backbone, a
synthetic multi-domain benchmark, and channel-ablation analysis tools.
"""

from .cfd import ChannelPrompt, Projector, contrastive_losses, disentangle, prompt_masks
from .dataio import (BenchmarkSpec, Dataset, DomainSpec, Sample, default_benchmark_spec,
                     load_dataset, read_pgm, read_ppm, synth_benchmark, synth_domain,
                     write_pgm, write_ppm)
from .errors import ConfigError, DataError, NumericError
from .fourier import ComplexPlane, fft2, ifft2, low_freq_swap
from .segmodel import SegModel, UNet, bce_loss, binarize, seg_loss_total, stem
from .styleaug import (AugConfig, add_gaussian_noise, bezier_transform, gamma_correct,
                       gaussian_blur, make_style_batch, spatial_augment)
from .tensor import SGD, BatchNormState, Tensor, backward, forward_op, no_grad, sgd_update
from .trainer import (TrainConfig, TrainResult, dice, evaluate, normalize_image, poly_lr,
                      target_mean_dice, train, train_step)

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "BatchNormState", "BenchmarkSpec", "ChannelPrompt", "ComplexPlane",
    "ConfigError", "DataError", "Dataset", "DomainSpec", "NumericError", "Projector",
    "SGD", "Sample", "SegModel", "Tensor", "TrainConfig", "TrainResult", "UNet",
    "add_gaussian_noise", "backward", "bce_loss", "bezier_transform", "binarize",
    "contrastive_losses", "default_benchmark_spec", "dice", "disentangle", "evaluate",
    "fft2", "forward_op", "gamma_correct", "gaussian_blur", "ifft2", "load_dataset",
    "low_freq_swap", "make_style_batch", "no_grad", "normalize_image", "poly_lr",
    "prompt_masks", "read_pgm", "read_ppm", "seg_loss_total", "sgd_update",
    "spatial_augment", "stem", "synth_benchmark", "synth_domain", "target_mean_dice",
    "train", "train_step", "write_pgm", "write_ppm",
]
