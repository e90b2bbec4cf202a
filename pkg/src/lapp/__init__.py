"""Layer adaptive progressive pruning for CIFAR-scale CNNs.

Submodules
----------
flops      multiply-accumulate and parameter accounting
masking    l1 importance, learnable-threshold masks, straight-through estimator
sbc        sparse conv + bypass modules and their compact form
networks   ResNet/VGG builders, SBCNet construction, uniform-rate baseline
surgery    masked SBCNet -> compact network conversion
harness    CIFAR-10 ingestion, augmentation, schedule, evaluation, checkpoints
controller the prune/train loop
cli        the ``lapp`` command
"""

from .flops import (BypassSpec, FlopsAccount, LayerSpec, bypass_flops, compression_rate,
                    conv_flops, flops_regularizer, masked_network_flops, network_total_flops,
                    params_count)
from .masking import MaskBundle, apply_mask, binarize_ste, importance_l1, kept_indices, soft_mask
from .networks import (ArchSpec, arch_spec, build_baseline, build_sbcnet, structural_flops,
                       uniform_prune_init)
from .sbc import CompactSBC, SBCModule, make_sbc, select_bypass_width
from .surgery import convert, equivalence_check

__version__ = "0.1.0"
