"""Base-anchored spectral filtering of LoRA adapters.

Decomposes a released LoRA update into spectral channels, scores each
channel's alignment with the principal subspace of the pretrained base
weight, and removes or down-weights channels that look no more structured
than random directions.  Works purely in parameter space: no training data,
no generation, no extra optimization.
"""

from ._version import __version__
from .checkpoint import TensorRecord, read_checkpoint, read_metadata, write_checkpoint
from .core import (
    GateConfig,
    LayerReport,
    PrincipalSubspace,
    SpectralChannel,
    anchoring_score,
    build_subspace,
    filter_layer,
    gate_hard,
    gate_soft,
    null_baseline,
    select_k,
    spectral_channels,
)
from .lab import PlantSpec, SeparationResult, gen_base, gen_planted_lora, monte_carlo_null, run_ablation
from .linalg import ThinSvd, jacobi_svd, reconstruct, subspace_alignment, thin_svd
from .lora import (
    BaseRef,
    KeyMap,
    LoraLayer,
    assemble_delta,
    detect_factor_pairs,
    pair_layers,
    refactor_channels,
)
from .pipeline import RunConfig, ablation_split, inspect_adapter, run_filter
from .report import FilterReport

__all__ = [
    "__version__",
    "BaseRef",
    "FilterReport",
    "GateConfig",
    "KeyMap",
    "LayerReport",
    "LoraLayer",
    "PlantSpec",
    "PrincipalSubspace",
    "RunConfig",
    "SeparationResult",
    "SpectralChannel",
    "TensorRecord",
    "ThinSvd",
    "ablation_split",
    "anchoring_score",
    "assemble_delta",
    "build_subspace",
    "detect_factor_pairs",
    "filter_layer",
    "gate_hard",
    "gate_soft",
    "gen_base",
    "gen_planted_lora",
    "inspect_adapter",
    "jacobi_svd",
    "monte_carlo_null",
    "null_baseline",
    "pair_layers",
    "read_checkpoint",
    "read_metadata",
    "reconstruct",
    "refactor_channels",
    "run_ablation",
    "run_filter",
    "select_k",
    "spectral_channels",
    "subspace_alignment",
    "thin_svd",
    "write_checkpoint",
]
