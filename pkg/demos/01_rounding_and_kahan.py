"""Tour of the emulated float grids, stochastic rounding, and Kahan sums.

Run: python3 demos/01_rounding_and_kahan.py
"""

import numpy as np

from lpxmc import (BF16, E4M3, E5M2, KahanState, RoundingRng, kahan_add,
                   neighbors, parse_format, round_nearest, round_stochastic)

print("=== format grids ===")
for fmt in (E4M3, E5M2, parse_format("e3m2")):
    print(f"{fmt.name}: max={fmt.max_finite}, min normal=2^{fmt.min_normal_exp}, "
          f"min subnormal={fmt.min_subnormal}, {fmt.grid_values().size} grid points")

print("\n=== rounding a value that sits between grid points ===")
x = 0.3
lo, hi = neighbors(E4M3, np.float64(x))
print(f"x={x} brackets to [{lo}, {hi}]; nearest -> {round_nearest(E4M3, np.float64(x))}")

rng = RoundingRng(seed=0)
n = 200_000
draws = round_stochastic(E4M3, np.full(n, x), rng, step=0, tensor_id=0,
                         index=np.arange(n))
print(f"stochastic mean over {n} keyed draws: {draws.mean():.6f} (unbiased -> ~{x})")

print("\n=== why training in bf16 needs compensation ===")
# 4096 updates of 2^-12 onto 1.0: each one is below bf16's ulp at 1.0
plain = np.float64(1.0)
for _ in range(4096):
    plain = round_nearest(BF16, plain + 2.0 ** -12)
state = KahanState.zeros(())
state.sum = np.float32(1.0)
for _ in range(4096):
    state = kahan_add(state, np.float32(2.0 ** -12), BF16)
print(f"plain bf16 accumulation: {plain}   (every update cancelled)")
print(f"Kahan bf16 accumulation: {float(state.sum)}   (exact answer is 2.0)")
