"""
Compressing a trained toy transformer
=====================================

Train the 4-layer toy model on the synthetic language, compress it with
the full recipe, and compare against the two ablations. Then sweep the
share of image-like tokens and watch the Q/K factoring error fall.
Takes about a minute.
"""

from casp.pipeline import run_ablation, sweep_vision_ratio, toy_model

model = toy_model(4, seed=1)
for name, rep in run_ablation(model, "greedy").items():
    bits = [row.bits_int for row in rep.layers]
    print(f"{name:12s} PPL {rep.ppl_before:.3f} -> {rep.ppl:.3f}   "
          f"avg bits {rep.avg_effective_bits:.4f}   layer bits {bits}")

# %%
# Vision tokens make attention sharper, so the low-rank Q/K error drops.
for row in sweep_vision_ratio(toy_model(2, seed=1)):
    print(f"ratio {row.ratio:.2f}  sparsity {row.sparsity:.3f}  E {row.e:.3f}  "
          f"PPL degradation {row.degradation:+.4f}")
