"""Parameter update rules.

Two regimes, matching where each tensor's memory pressure lies:

* ``sgd_sr_step``: plain SGD (no momentum state) whose single rounding of
  the updated weight onto the storage grid is stochastic, so tiny updates
  survive in expectation instead of being absorbed by nearest rounding.
  Used for the classification head.
* ``kahan_adamw_step``: standard AdamW (bias-corrected moments, decoupled
  weight decay) where the final parameter addition goes through a Kahan
  compensation buffer against the storage grid.  Used for the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import (FloatFormat, FP32, KahanState, QuantizedMatrix,
                      kahan_add, round_nearest, round_stochastic)
from .rng import RoundingRng

__all__ = ["SgdSrConfig", "sgd_sr_step", "KahanAdamWConfig", "KahanAdamWParam",
           "kahan_adamw_step"]


@dataclass
class SgdSrConfig:
    lr: float
    weight_decay: float = 0.0
    fmt: FloatFormat = field(default_factory=lambda: FP32)
    rounding: str = "stochastic"  # or "nearest"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.rounding not in ("stochastic", "nearest"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")


def _round_update(update: np.ndarray, cfg: SgdSrConfig, rng: RoundingRng,
                  step: int, tensor_id: int, index: np.ndarray) -> np.ndarray:
    if cfg.rounding == "stochastic":
        return round_stochastic(cfg.fmt, update, rng, step, tensor_id, index)
    return round_nearest(cfg.fmt, update)


def sgd_sr_step(w: QuantizedMatrix, grad: np.ndarray, cfg: SgdSrConfig,
                rng: RoundingRng, step: int, tensor_id: int = 0,
                global_index: np.ndarray | None = None) -> QuantizedMatrix:
    """One SGD step with a single rounding back onto the storage grid.

    The update w - lr*(grad + wd*w) is formed at working precision; weight
    decay is folded into the gradient so exactly one rounding happens.
    ``global_index`` keys the stochastic draws; it defaults to the flat
    index within w but callers updating a slice of a larger tensor must
    pass the enclosing tensor's flat indices to stay chunking-invariant.
    """
    grad = np.asarray(grad, dtype=np.float32)
    if grad.shape != w.values.shape:
        raise ValueError(f"shape mismatch: weights {w.values.shape}, grad {grad.shape}")
    bad = ~np.isfinite(grad)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise ValueError(f"non-finite gradient entry at index {tuple(idx)}")
    if global_index is None:
        global_index = np.arange(w.values.size, dtype=np.uint64).reshape(w.values.shape)
    g = grad if cfg.weight_decay == 0.0 else grad + np.float32(cfg.weight_decay) * w.values
    updated = w.values - np.float32(cfg.lr) * g
    w.values = _round_update(updated, cfg, rng, step, tensor_id, global_index).astype(np.float32)
    return w


@dataclass
class KahanAdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    fmt: FloatFormat = field(default_factory=lambda: FP32)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class KahanAdamWParam:
    """One parameter tensor with its compensation buffer and moments."""

    state: KahanState
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, fmt: FloatFormat) -> "KahanAdamWParam":
        vals = round_nearest(fmt, values)
        return cls(KahanState(vals, np.zeros_like(vals)),
                   np.zeros_like(vals), np.zeros_like(vals))

    @property
    def values(self) -> np.ndarray:
        return self.state.sum


def kahan_adamw_step(param: KahanAdamWParam, grad: np.ndarray,
                     cfg: KahanAdamWConfig, t: int,
                     lr: float | None = None) -> None:
    """In-place AdamW step with Kahan-compensated parameter accumulation.

    Moments are kept at working precision; only the parameter itself is
    constrained to cfg.fmt.  ``lr`` overrides cfg.lr (warmup schedules).
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    grad = np.asarray(grad, dtype=np.float32)
    if grad.shape != param.values.shape:
        raise ValueError("gradient shape mismatch")
    lr = np.float32(cfg.lr if lr is None else lr)
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    param.m[...] = b1 * param.m + (np.float32(1) - b1) * grad
    param.v[...] = b2 * param.v + (np.float32(1) - b2) * grad * grad
    if not np.all(np.isfinite(param.m)) or not np.all(np.isfinite(param.v)):
        raise ValueError("non-finite optimizer moments")
    mhat = param.m / np.float32(1.0 - cfg.beta1 ** t)
    vhat = param.v / np.float32(1.0 - cfg.beta2 ** t)
    update = -lr * (mhat / (np.sqrt(vhat) + np.float32(cfg.eps))
                    + np.float32(cfg.weight_decay) * param.values)
    new = kahan_add(param.state, update, cfg.fmt)
    param.state.sum = new.sum
    param.state.comp = new.comp
