"""Region-aware attention for image restoration, on a small numpy autodiff core."""

from ._kernels import BACKEND
from .attention import gathered_region_attention, mh_masked_attention, rmsa_layer, wmsa_layer
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, RatError
from .losses import focal_region_loss, l1, psnr, ssim
from .model import RATConfig, build_model, forward, load_model, save_model
from .region import (
    AttentionBias,
    MaskSet,
    RegionPartition,
    attention_bias,
    downscale_partition,
    postprocess_masks,
)
from .tensor import Tensor, backward

__version__ = "0.1.0"
