"""Train the same model across weight formats and rounding modes.

The interesting pattern: with one or two mantissa bits, nearest rounding
silently cancels most weight updates, while stochastic rounding keeps the
expected update and recovers most of the fp32 accuracy.  Takes ~30 s.

Run: python3 demos/04_quant_sweep.py
"""

from lpxmc import SyntheticSpec, TrainConfig, generate_synthetic, quant_sweep

spec = SyntheticSpec(num_samples=768, num_features=32, num_labels=64,
                     mean_labels=1.0, min_labels=1, noise=0.3, seed=7)
dataset = generate_synthetic(spec)
base = TrainConfig(hidden=64, embed_dim=32, head_lr=0.05, encoder_lr=1e-3,
                   epochs=15, batch_size=32, seed=1)

rows = quant_sweep(dataset, base,
                   formats=["fp32", "e2m1", "e2m2", "e3m1", "e3m2", "e4m3"],
                   modes=("nearest", "stochastic"))

print(f"{'format':>8} {'rounding':>11} {'P@1':>7}")
for r in rows:
    flag = "  DIVERGED" if r["diverged"] else ""
    print(f"{r['format']:>8} {r['rounding']:>11} {r['p_at_1']:>7.3f}{flag}")
