"""End-to-end compression: low-rank Q/K, layer scoring, bit allocation, quantization.

Every stochastic step draws from ``recipe.seed``, so a recipe and a model fix
the output checkpoint and report byte for byte.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bitalloc
from .attention import analyze_layers
from .calibration import CalibrationSet, load_calibration, synthetic_calibration, training_batches
from .checkpoint import checkpoint_bytes
from .lowrank import apply_lowrank_qk, attention_inputs, fit_whitening
from .model import (
    LowRank,
    ModelCheckpoint,
    TransformerConfig,
    forward_collect,
    init_model,
    logits,
    materialize,
    trace,
    train,
)
from .quantize import QuantizedTensor, bit_breakdown, quantize

SCHEMES = ("rtn", "greedy", "vq", "none")
ALLOCATIONS = ("optimal", "random", "uniform")
DENSE_BITS = 32

CALIB_COUNT = 64
CALIB_SEQ_LEN = 32
HELDOUT_COUNT = 64
ANALYSIS_SEQUENCES = 16
SWEEP_RATIOS = (0.0, 0.25, 0.5, 0.75)
MIXED_RATIOS = (0.0, 0.25, 0.5, 0.75)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class CompressionRecipe:
    rank_keep: float | None = 0.25  # None skips the Q/K factoring
    quant_scheme: str = "rtn"
    b_avg: float = 2.0
    mu: float | None = None
    allowed_bits: tuple = (2, 3)
    calib_path: str | None = None
    seed: int = 0
    eta: float | None = None
    group_size: int = 128
    vq_dim: int = 4
    allocation: str = "optimal"

    def __post_init__(self):
        if self.quant_scheme not in SCHEMES:
            raise ValueError(f"quant_scheme must be one of {SCHEMES}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"allocation must be one of {ALLOCATIONS}")
        if self.rank_keep is not None and not 0 < self.rank_keep <= 1:
            raise ValueError("rank_keep must lie in (0, 1]")
        if not self.b_avg > 0:
            raise ValueError("b_avg must be positive")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("mu must be positive")
        bits = tuple(sorted({int(b) for b in self.allowed_bits}))
        if not bits:
            raise ValueError("allowed_bits is empty")
        object.__setattr__(self, "allowed_bits", bits)


@dataclass(frozen=True)
class LayerRow:
    layer: int
    sparsity: float
    density: float
    e: float
    score: float
    params: int
    bits_cont: float
    bits_int: int
    effective_bits: float


@dataclass(frozen=True)
class EvalReport:
    ppl_before: float
    ppl: float
    layers: tuple
    model_size_bytes: int
    avg_effective_bits: float
    total_params: int
    mu: float
    lambda_: float
    recipe: dict = field(default_factory=dict)

    def to_records(self) -> list:
        head = {k: v for k, v in asdict(self).items() if k != "layers"}
        head["kind"] = "summary"
        rows = [{"kind": "layer", **asdict(r)} for r in self.layers]
        return [head, *rows]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


# --------------------------------------------------------------------------- evaluation


def evaluate_ppl(model: ModelCheckpoint, heldout) -> float:
    """exp of the mean next-token negative log-likelihood over every position."""
    tokens = np.asarray(getattr(heldout, "sequences", heldout))
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("held-out set is empty")
    if tokens.shape[1] < 2:
        raise ValueError("sequence length must be at least 2")
    lg = logits(model, tokens)[:, :-1]
    top = lg.max(axis=-1, keepdims=True)
    logz = top[..., 0] + np.log(np.exp(lg - top).sum(axis=-1))
    target = np.take_along_axis(lg, tokens[:, 1:, None].astype(np.int64), axis=-1)[..., 0]
    return float(np.exp(np.mean(logz - target)))


def stored_bits(t) -> int:
    """Bits a tensor occupies in the checkpoint (dense entries at float32)."""
    if isinstance(t, LowRank):
        return stored_bits(t.a) + stored_bits(t.b)
    if isinstance(t, QuantizedTensor):
        return bit_breakdown(t).total_bits
    return DENSE_BITS * int(np.prod(t.shape))


def layer_bits(model: ModelCheckpoint) -> list:
    return [sum(stored_bits(t) for t in layer.tensors().values()) for layer in model.layers]


def avg_effective_bits(model: ModelCheckpoint) -> float:
    """Stored bits of the per-layer matrices over their dense (pre-factoring) parameter count."""
    return sum(layer_bits(model)) / model.original_param_count()


# --------------------------------------------------------------------------- stages


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        raise StageError(name, exc) from exc


def default_calibration(seed: int, count: int = CALIB_COUNT, seq_len: int = CALIB_SEQ_LEN) -> CalibrationSet:
    ratios = np.resize(np.asarray(MIXED_RATIOS), count)
    return synthetic_calibration(count, seq_len, ratios, seed=seed)


def default_heldout(seed: int, count: int = HELDOUT_COUNT, seq_len: int = CALIB_SEQ_LEN) -> CalibrationSet:
    """Same distribution as :func:`default_calibration`, disjoint seed stream."""
    ratios = np.resize(np.asarray(MIXED_RATIOS), count)
    return synthetic_calibration(count, seq_len, ratios, seed=seed + 1_000_003)


def _tensor_inputs(model: ModelCheckpoint, calib, layer: int | None = None):
    """Per layer, the row activations each weight matrix multiplies (one dict if ``layer`` is given)."""
    traces, _ = trace(model, np.asarray(calib.sequences))
    out = []
    for tr in traces if layer is None else traces[layer : layer + 1]:
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        attn = flat(tr.attn_in)
        out.append(
            {
                "w_q": attn,
                "w_k": attn,
                "w_v": attn,
                "w_o": flat(tr.attn_mix),
                "mlp_up": flat(tr.mlp_in),
                "mlp_down": flat(tr.mlp_act),
            }
        )
    return out if layer is None else out[0]


def _quantize_layer(layer, acts: dict, bits: int, recipe: CompressionRecipe, rng) -> dict:
    def q(w, x):
        group = recipe.vq_dim if recipe.quant_scheme == "vq" else recipe.group_size
        seed = int(rng.integers(2**31))
        return quantize(materialize(w), recipe.quant_scheme, bits, group, acts=x, seed=seed)

    new = {}
    for name, t in layer.tensors().items():
        x = acts[name]
        if isinstance(t, LowRank):
            qa = q(t.a, x)
            new[name] = LowRank(qa, q(t.b, x @ materialize(qa)))
        else:
            new[name] = q(t, x)
    return new


def _integer_plan(plan, recipe: CompressionRecipe, n_layers: int, rng):
    rounded = bitalloc.round_bits(plan, recipe.allowed_bits)
    bits = rounded.bits_int
    if recipe.allocation == "uniform":
        return rounded, np.full(n_layers, int(bits.min()), dtype=np.int64)
    if recipe.allocation == "random":
        base = int(bits.min())
        n_up = int(np.count_nonzero(bits > base))
        shuffled = np.full(n_layers, base, dtype=np.int64)
        if n_up:
            shuffled[rng.choice(n_layers, size=n_up, replace=False)] = int(bits.max())
        return rounded, shuffled
    return rounded, bits


def compress_casp(
    model: ModelCheckpoint,
    recipe: CompressionRecipe,
    calib: CalibrationSet | None = None,
    heldout: CalibrationSet | None = None,
) -> tuple:
    """Run the full recipe; returns ``(compressed model, EvalReport)``.

    Stage failures are re-raised as :class:`StageError` naming the stage.
    """
    rng = np.random.default_rng(recipe.seed)
    if calib is None:
        if recipe.calib_path is not None:
            calib = _stage("calibration", load_calibration, recipe.calib_path, model.config.vocab_size)
        else:
            calib = default_calibration(recipe.seed)
    if heldout is None:
        heldout = default_heldout(recipe.seed, seq_len=max(calib.seq_len, 2))
    _stage("calibration", calib.check_vocab, model.config.vocab_size)
    if calib.seq_len > model.config.max_seq_len:
        raise StageError("calibration", ValueError("calibration sequences exceed max_seq_len"))

    ppl_before = _stage("eval", evaluate_ppl, model, heldout)
    _stage("forward_collect", forward_collect, model, calib)
    current = model
    if recipe.rank_keep is not None:
        inputs = _stage("fit_whitening", attention_inputs, model, calib)
        for x in inputs:
            _stage("fit_whitening", fit_whitening, x)
        current = _stage("apply_lowrank_qk", apply_lowrank_qk, model, calib, recipe.rank_keep, inputs)

    pairs = _stage("block_influence", forward_collect, current, calib)
    scores = [_stage("block_influence", bitalloc.block_influence, a, b) for a, b in pairs]
    params = np.array(current.layer_param_counts(), dtype=np.float64)
    total = model.original_param_count()
    plan = _stage(
        "allocate_bits",
        bitalloc.allocate_bits,
        bitalloc.LayerImportance(np.clip(scores, 0.0, 2.0)),
        params,
        recipe.b_avg,
        recipe.mu,
        total_params=total,
    )
    plan, bits = _stage("round_bits", _integer_plan, plan, recipe, len(scores), rng)

    compressed = current
    if recipe.quant_scheme != "none":
        for i, layer in enumerate(current.layers):
            # inputs come from the model with layers < i already quantized
            acts = _stage("quantize", _tensor_inputs, compressed, calib, i)
            new = _stage("quantize", _quantize_layer, layer, acts, int(bits[i]), recipe, rng)
            compressed = compressed.replace_layer(i, **new)

    blob = _stage("save", checkpoint_bytes, compressed)
    ppl_after = _stage("eval", evaluate_ppl, compressed, heldout)
    summaries = _stage(
        "analyze", analyze_layers, model, current, calib.sequences[:ANALYSIS_SEQUENCES], recipe.eta
    )
    per_layer_bits = layer_bits(compressed)
    rows = tuple(
        LayerRow(
            layer=i,
            sparsity=s.sparsity,
            density=s.density,
            e=s.e,
            score=float(scores[i]),
            params=int(params[i]),
            bits_cont=float(plan.bits_cont[i]),
            bits_int=int(bits[i]),
            effective_bits=per_layer_bits[i] / params[i],
        )
        for i, s in enumerate(summaries)
    )
    report = EvalReport(
        ppl_before=ppl_before,
        ppl=ppl_after,
        layers=rows,
        model_size_bytes=len(blob),
        avg_effective_bits=sum(per_layer_bits) / total,
        total_params=int(total),
        mu=plan.mu,
        lambda_=plan.lambda_,
        recipe={k: list(v) if isinstance(v, tuple) else v for k, v in asdict(recipe).items()},
    )
    return compressed, report


# --------------------------------------------------------------------------- sweeps and ablations


@dataclass(frozen=True)
class SweepRow:
    ratio: float
    e: float  # mean over layers
    e_layers: tuple
    density: float
    sparsity: float
    ppl_before: float
    ppl_after: float

    @property
    def degradation(self) -> float:
        return (self.ppl_after - self.ppl_before) / self.ppl_before


def sweep_vision_ratio(
    model: ModelCheckpoint,
    ratios=SWEEP_RATIOS,
    rank_keep: float = 0.25,
    seed: int = 0,
    calib_count: int = CALIB_COUNT,
    heldout_count: int = HELDOUT_COUNT,
    seq_len: int = CALIB_SEQ_LEN,
    analysis_sequences: int = 32,
    eta: float | None = None,
) -> list:
    """Factor Q/K on calibration data at each vision ratio; record map error and PPL change."""
    rows = []
    for r in ratios:
        if not 0 <= r < 1:
            raise ValueError(f"vision ratio {r} outside [0, 1)")
        calib = synthetic_calibration(calib_count, seq_len, r, seed=seed)
        held = synthetic_calibration(heldout_count, seq_len, r, seed=seed + 1_000_003)
        low = apply_lowrank_qk(model, calib, rank_keep)
        summ = analyze_layers(model, low, held.sequences[:analysis_sequences], eta)
        e_layers = tuple(s.e for s in summ)
        rows.append(
            SweepRow(
                ratio=float(r),
                e=float(np.mean(e_layers)),
                e_layers=e_layers,
                density=float(np.mean([s.density for s in summ])),
                sparsity=float(np.mean([s.sparsity for s in summ])),
                ppl_before=evaluate_ppl(model, held),
                ppl_after=evaluate_ppl(low, held),
            )
        )
    return rows


TOY_TRAINING = dict(steps=600, batch=16, seq_len=32, lr=1e-2, weight_decay=0.2)


@functools.lru_cache(maxsize=8)
def toy_model(n_layers: int = 4, seed: int = 1, d: int = 32, steps: int = TOY_TRAINING["steps"]) -> ModelCheckpoint:
    """The trained toy benchmark model for a given depth and seed (cached per process)."""
    cfg = TransformerConfig(d=d, n_layers=n_layers, n_heads=1, vocab_size=64, max_seq_len=64)
    t = TOY_TRAINING
    batches = training_batches(t["batch"], t["seq_len"], seed=seed)
    return train(init_model(cfg, seed), batches, steps, lr=t["lr"], weight_decay=t["weight_decay"])


def ablation_recipes(scheme: str = "greedy", seed: int = 0) -> dict:
    """Full recipe, random higher-bit layers, and uniform low-bit quantization without factoring."""
    return {
        "full": CompressionRecipe(quant_scheme=scheme, seed=seed),
        "random_bits": CompressionRecipe(quant_scheme=scheme, seed=seed, allocation="random"),
        "quant_only": CompressionRecipe(rank_keep=None, quant_scheme=scheme, seed=seed, allocation="uniform"),
    }


def run_ablation(model: ModelCheckpoint, scheme: str = "greedy", seed: int = 0) -> dict:
    calib = default_calibration(seed)
    held = default_heldout(seed)
    return {
        name: compress_casp(model, recipe, calib, held)[1]
        for name, recipe in ablation_recipes(scheme, seed).items()
    }
