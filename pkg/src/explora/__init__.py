"""ExPLoRA at desk scale: parameter-efficient extended self-supervised pre-training of ViTs.

The pieces, bottom up:

* :mod:`explora.autograd` / :mod:`explora.nn` -- a small numpy reverse-mode autodiff and layers
* :mod:`explora.vit` -- ViT backbone (incl. channel-group variant), MAE decoder, parameter accounting
* :mod:`explora.peft` -- the trainable partition (unfrozen blocks + LoRA), inject / merge / deltas
* :mod:`explora.objectives` -- MAE and Dino-style self-distillation losses
* :mod:`explora.train` -- optimiser, schedules, resumable pre-training, probing, fine-tuning
* :mod:`explora.analysis` -- per-block spectra and probes for choosing blocks to unfreeze
* :mod:`explora.data` / :mod:`explora.cli` -- synthetic domains, ingestion, command line
"""

from .autograd import ContractError, NumericError, Tape, Tensor
from .peft import Partition, apply_delta, extract_delta, inject, merge
from .vit import ViTConfig, ViTModel, param_count

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericError", "Partition", "Tape", "Tensor", "ViTConfig", "ViTModel",
           "apply_delta", "extract_delta", "inject", "merge", "param_count"]
