"""Attention-sparsity guided Q/K low-rank factoring and mixed-precision quantization."""

from .attention import analyze_layers, attention_map, bound_check, compression_error, sparsity_stats
from .bitalloc import BitPlan, LayerImportance, alloc_oracle, allocate_bits, block_influence, round_bits
from .calibration import CalibrationSet, load_calibration, save_calibration, synthetic_calibration
from .checkpoint import ChecksumError, load_checkpoint, save_checkpoint
from .lowrank import apply_lowrank_qk, decompose_whitened, fit_whitening
from .model import LowRank, ModelCheckpoint, TransformerConfig, forward_collect, init_model
from .pipeline import (
    CompressionRecipe,
    EvalReport,
    StageError,
    compress_casp,
    evaluate_ppl,
    run_ablation,
    sweep_vision_ratio,
    toy_model,
)
from .quantize import QuantizedTensor, dequantize, effective_bits, quantize

__version__ = "0.1.0"
