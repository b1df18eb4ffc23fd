"""Two-stage supervised fine-tuning of a toy vision transformer.

Stage 1 fits detection, segmentation and captioning heads on a frozen
backbone; stage 2 fits only low-rank adapters on the q/v projections while
sampling one task per batch. Out-of-domain quality is read off linear probes
on the CLS feature.
"""

from .core import ConfigError, FrozenTensorMutated, ParameterStore, load_config, snapshot
from .lora import LoraSet, init_lora, lora_param_count

__all__ = [
    "ConfigError",
    "FrozenTensorMutated",
    "LoraSet",
    "ParameterStore",
    "init_lora",
    "load_config",
    "lora_param_count",
    "snapshot",
]
__version__ = "0.1.0"
