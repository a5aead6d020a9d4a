"""Low-precision training for classifiers with very large output spaces.

Building blocks: emulated small-float formats with stochastic rounding and
Kahan-compensated accumulation, a chunked classification head whose fused
backward never materializes the weight gradient, ranking metrics, an
analytic memory planner, and a desk-scale trainer tying it all together.
"""

from .formats import (FP32, BF16, FP16, E4M3, E5M2, FloatFormat, KahanState,
                      QuantizedMatrix, exponent_histogram, kahan_add,
                      neighbors, parse_format, round_nearest, round_stochastic)
from .rng import RoundingRng, tensor_tag
from .optimizers import (KahanAdamWConfig, KahanAdamWParam, SgdSrConfig,
                         kahan_adamw_step, sgd_sr_step)
from .head import (BatchInput, ChunkedHead, dropout_mask, fused_weight_update,
                   head_forward_logits, head_update, input_gradient_accumulate,
                   load_head, logit_gradient, save_head)
from .metrics import (PropensityModel, dataset_precision_at_k,
                      dataset_psp_at_k, metrics_report, precision_at_k,
                      propensity_from_frequencies, psp_at_k, top_k_indices)
from .memory import (GIB, AllocationTracker, MemoryPlan, Recipe,
                     TrainingShape, plan, sweep_labels, tracked_peak)
from .data import (SparseDataset, SyntheticSpec, generate_synthetic,
                   load_dataset, parse_dataset, save_dataset, write_dataset)
from .trainer import (DivergenceError, TrainConfig, Trainer, TrainResult,
                      gradient_histogram_probe, quant_sweep, train)

__version__ = "0.1.0"
