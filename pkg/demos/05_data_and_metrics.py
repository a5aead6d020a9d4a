"""Synthetic long-tailed datasets and the ranking metrics used to score
extreme classifiers (P@k and its propensity-weighted variant PSP@k).

Run: python3 demos/05_data_and_metrics.py
"""

import numpy as np

from lpxmc import (SyntheticSpec, TrainConfig, dataset_precision_at_k,
                   dataset_psp_at_k, generate_synthetic,
                   propensity_from_frequencies, train)

spec = SyntheticSpec(num_samples=640, num_features=32, num_labels=32,
                     mean_labels=1.0, min_labels=1, noise=0.05,
                     zipf_exponent=1.0, seed=7)
ds = generate_synthetic(spec)
counts = ds.label_counts()
print(f"{ds.num_samples} samples, {ds.num_labels} labels; head label has "
      f"{counts.max()} positives, tail label has {counts.min()}")

cfg = TrainConfig(hidden=64, embed_dim=32, head_format="e4m3",
                  head_rounding="stochastic", head_lr=0.3, encoder_lr=3e-3,
                  epochs=10, batch_size=32, seed=1)
result = train(ds, cfg)
trainer = result.trainer

idx = trainer.eval_idx
scores = trainer.predict_scores(idx)
truths = [ds.labels[i] for i in idx]
prop = propensity_from_frequencies(counts, ds.num_samples)
print("\ntail-aware scoring on the held-out split:")
for k in (1, 3, 5):
    p = dataset_precision_at_k(scores, truths, k)
    psp = dataset_psp_at_k(scores, truths, prop, k)
    print(f"  P@{k}={p:.3f}   PSP@{k}={psp:.3f}"
          "   (PSP rewards rare-label hits more)")
