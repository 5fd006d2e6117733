"""``casp`` command line.

Every subcommand prints JSON Lines records on stdout; ``--report PATH`` also
writes them to a file. Failures exit nonzero with a stage-tagged message.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import bitalloc
from .attention import analyze_layers
from .calibration import load_calibration, save_calibration, synthetic_calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .lowrank import apply_lowrank_qk
from .model import LowRank, TransformerConfig, forward_collect, init_model, materialize
from .pipeline import (
    SCHEMES,
    SWEEP_RATIOS,
    TOY_TRAINING,
    CompressionRecipe,
    StageError,
    _tensor_inputs,
    avg_effective_bits,
    compress_casp,
    default_calibration,
    default_heldout,
    evaluate_ppl,
    sweep_vision_ratio,
    toy_model,
)
from .quantize import quantize


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _calib(args, model, seed=0):
    if getattr(args, "calib", None):
        return load_calibration(args.calib, model.config.vocab_size)
    return default_calibration(seed)


def _heldout(args, model, seed=0):
    if getattr(args, "heldout", None):
        return load_calibration(args.heldout, model.config.vocab_size)
    return default_heldout(seed)


# --------------------------------------------------------------------------- commands


def cmd_init(args):
    if args.train_steps > 0:
        cfg = TransformerConfig(d=args.d, n_layers=args.layers, n_heads=args.heads)
        if (cfg.vocab_size, cfg.max_seq_len) != (64, 64) or args.heads != 1:
            raise ValueError("trained toy models use vocab 64, max_seq_len 64 and one head")
        model = toy_model(args.layers, args.seed, args.d, args.train_steps)
    else:
        cfg = TransformerConfig(
            d=args.d, n_layers=args.layers, n_heads=args.heads, vocab_size=args.vocab, max_seq_len=args.max_seq_len
        )
        model = init_model(cfg, args.seed)
    save_checkpoint(model, args.out)
    return [{"kind": "init", "out": args.out, "layers": args.layers, "d": args.d, "seed": args.seed,
             "train_steps": args.train_steps}]


def cmd_calib(args):
    calib = synthetic_calibration(args.count, args.seq_len, args.vision_ratio, seed=args.seed)
    save_calibration(calib, args.out)
    return [{"kind": "calib", "out": args.out, "count": args.count, "seq_len": args.seq_len,
             "vision_ratio": args.vision_ratio, "seed": args.seed}]


def cmd_compress(args):
    model = load_checkpoint(args.model)
    recipe = CompressionRecipe(
        rank_keep=None if args.rank_keep <= 0 else args.rank_keep,
        quant_scheme=args.scheme,
        b_avg=args.avg_bits,
        mu=args.mu,
        allowed_bits=tuple(_ints(args.allowed)),
        calib_path=args.calib,
        seed=args.seed,
        eta=args.eta,
        group_size=args.group_size,
        vq_dim=args.vq_dim,
        allocation=args.allocation,
    )
    heldout = load_calibration(args.heldout, model.config.vocab_size) if args.heldout else None
    compressed, report = compress_casp(model, recipe, heldout=heldout)
    try:
        save_checkpoint(compressed, args.out)
    except (OSError, ValueError) as exc:
        raise StageError("save", exc) from exc
    return report.to_records()


def cmd_analyze(args):
    model = load_checkpoint(args.model)
    compressed = load_checkpoint(args.compressed)
    calib = _calib(args, model)
    rows = analyze_layers(model, compressed, calib.sequences[: args.sequences], args.eta)
    return [{"kind": "layer", **asdict(r)} for r in rows]


def cmd_lowrank(args):
    model = load_checkpoint(args.model)
    low = apply_lowrank_qk(model, _calib(args, model), args.rank_keep)
    save_checkpoint(low, args.out)
    return [{"kind": "lowrank", "out": args.out, "rank_keep": args.rank_keep,
             "layer_params": low.layer_param_counts()}]


def cmd_quantize(args):
    model = load_checkpoint(args.model)
    calib = _calib(args, model, args.seed)
    acts = _tensor_inputs(model, calib) if args.scheme == "greedy" else None
    rng = np.random.default_rng(args.seed)
    group = args.vq_dim if args.scheme == "vq" else args.group_size
    out = model
    for i, layer in enumerate(model.layers):
        new = {}
        for name, t in layer.tensors().items():
            x = None if acts is None else acts[i][name]

            def q(w, xx):
                return quantize(materialize(w), args.scheme, args.bits, group, acts=xx, seed=int(rng.integers(2**31)))

            if isinstance(t, LowRank):
                qa = q(t.a, x)
                new[name] = LowRank(qa, q(t.b, None if x is None else x @ materialize(qa)))
            else:
                new[name] = q(t, x)
        out = out.replace_layer(i, **new)
    save_checkpoint(out, args.out)
    return [{"kind": "quantize", "out": args.out, "scheme": args.scheme, "bits": args.bits,
             "avg_effective_bits": avg_effective_bits(out)}]


def cmd_allocate(args):
    model = load_checkpoint(args.model)
    pairs = forward_collect(model, _calib(args, model))
    scores = np.clip([bitalloc.block_influence(a, b) for a, b in pairs], 0.0, 2.0)
    params = model.layer_param_counts()
    plan = bitalloc.allocate_bits(scores, params, args.avg_bits, args.mu, total_params=model.original_param_count())
    plan = bitalloc.round_bits(plan, _ints(args.allowed))
    rows = [
        {"kind": "layer", "layer": i, "s_l": float(scores[i]), "p_l": int(params[i]),
         "b_cont": float(plan.bits_cont[i]), "b_int": int(plan.bits_int[i])}
        for i in range(len(params))
    ]
    head = {"kind": "plan", "avg_bits": args.avg_bits, "mu": plan.mu, "lambda": plan.lambda_,
            "objective": plan.objective_value, "average_bits_int": plan.average_bits_int}
    return [head, *rows]


def cmd_eval(args):
    model = load_checkpoint(args.model)
    held = _heldout(args, model, args.seed)
    return [{"kind": "eval", "ppl": evaluate_ppl(model, held), "avg_effective_bits": avg_effective_bits(model)}]


def cmd_sweep(args):
    model = load_checkpoint(args.model)
    rows = sweep_vision_ratio(model, _floats(args.ratios), args.rank_keep, seed=args.seed)
    out = []
    for r in rows:
        rec = asdict(r)
        rec["e_layers"] = list(r.e_layers)
        out.append({"kind": "sweep", **rec, "degradation": r.degradation})
    return out


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casp", description="Q/K low-rank + mixed-precision compression toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--report", help="also write JSON Lines records here")
        return sp

    sp = add("init", cmd_init, "write a toy model checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--heads", type=int, default=1)
    sp.add_argument("--vocab", type=int, default=64)
    sp.add_argument("--max-seq-len", type=int, default=64)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--train-steps", type=int, default=TOY_TRAINING["steps"], help="0 keeps random weights")

    sp = add("calib", cmd_calib, "write a synthetic calibration file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--seq-len", type=int, default=32)
    sp.add_argument("--vision-ratio", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("compress", cmd_compress, "run the full recipe")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--rank-keep", type=float, default=0.25, help="0 disables Q/K factoring")
    sp.add_argument("--scheme", choices=SCHEMES, default="rtn")
    sp.add_argument("--avg-bits", type=float, default=2.0)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--allowed", default="2,3")
    sp.add_argument("--calib")
    sp.add_argument("--heldout")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--group-size", type=int, default=128)
    sp.add_argument("--vq-dim", type=int, default=4)
    sp.add_argument("--allocation", choices=("optimal", "random", "uniform"), default="optimal")

    sp = add("analyze", cmd_analyze, "per-layer attention sparsity and map error")
    sp.add_argument("--model", required=True)
    sp.add_argument("--compressed", required=True)
    sp.add_argument("--calib")
    sp.add_argument("--eta", type=float)
    sp.add_argument("--sequences", type=int, default=16)

    sp = add("lowrank", cmd_lowrank, "factor Q/K with calibration whitening")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--calib")
    sp.add_argument("--rank-keep", type=float, default=0.25)

    sp = add("quantize", cmd_quantize, "quantize every layer at one bit width")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scheme", choices=("rtn", "greedy", "vq"), default="rtn")
    sp.add_argument("--bits", type=int, default=2)
    sp.add_argument("--group-size", type=int, default=128)
    sp.add_argument("--vq-dim", type=int, default=4)
    sp.add_argument("--calib")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("allocate", cmd_allocate, "per-layer bit plan")
    sp.add_argument("--model", required=True)
    sp.add_argument("--avg-bits", type=float, default=2.0)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--allowed", default="2,3")
    sp.add_argument("--calib")

    sp = add("eval", cmd_eval, "held-out perplexity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--heldout")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("sweep", cmd_sweep, "vision-ratio sweep of map error and PPL change")
    sp.add_argument("--model", required=True)
    sp.add_argument("--ratios", default=",".join(str(r) for r in SWEEP_RATIOS))
    sp.add_argument("--rank-keep", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        records = args.func(args)
    except StageError as exc:
        print(f"casp {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"casp {args.command}: [{args.command}] {exc}", file=sys.stderr)
        return 1
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
