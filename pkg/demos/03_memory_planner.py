"""Analytic peak-memory model: timelines, peaks, and the sweep over label
counts that shows where low-precision training wins.

Run: python3 demos/03_memory_planner.py
"""

from lpxmc import GIB, Recipe, TrainingShape, plan, sweep_labels

shape = TrainingShape(num_labels=2_812_281, dim=768, batch=128, seq=128, chunks=8)

print("=== peak memory, 2.8M labels, dim 768, batch 128 ===")
for recipe in Recipe:
    p = plan(shape, recipe)
    print(f"{recipe.value:>10}: peak {p.peak_gib:6.2f} GiB")

print("\n=== allocation timeline (fp8 recipe) ===")
p = plan(shape, Recipe.ELMO_FP8)
for phase, name, nbytes, live in p.timeline_rows():
    print(f"{phase:>8}  {name:<28} {nbytes / GIB:+9.3f} GiB  live {live / GIB:7.3f}")

print("\n=== how the gap grows with the label count ===")
rows = sweep_labels(shape, [1_000_000, 3_000_000, 8_623_847],
                    [Recipe.RENEE_MPT, Recipe.ELMO_FP8])
by = {(r["num_labels"], r["recipe"]): r["peak_gib"] for r in rows}
for L in (1_000_000, 3_000_000, 8_623_847):
    hi, lo = by[(L, "renee")], by[(L, "elmo_fp8")]
    print(f"L={L:>9,d}: mixed-precision {hi:7.2f} GiB vs fused low-precision "
          f"{lo:6.2f} GiB  ({hi / lo:4.1f}x)")
