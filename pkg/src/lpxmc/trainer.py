"""Desk-scale end-to-end training loop.

A small two-layer dense encoder (the stand-in for a transformer backbone,
which is out of scope here) feeds the chunked classification head.  The
update order is decoupled: all head chunks finish their forward, backward
and optimizer step before the encoder consumes the accumulated input
gradient.  Deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json
import os

import numpy as np

from .data import SparseDataset
from .formats import FloatFormat, exponent_histogram, parse_format, round_nearest
from .head import (BatchInput, ChunkedHead, head_update, load_head, save_head)
from .metrics import dataset_precision_at_k
from .optimizers import (KahanAdamWConfig, KahanAdamWParam, SgdSrConfig,
                         kahan_adamw_step)
from .rng import RoundingRng, tensor_tag

__all__ = ["TrainConfig", "TinyEncoder", "Trainer", "TrainResult",
           "DivergenceError", "train", "quant_sweep",
           "gradient_histogram_probe"]

_SPLIT_TAG = tensor_tag("trainer.split")

# sustained mean |logit gradient| above this for 100 steps means the head is
# saturated (the loss itself is never computed, so this is the proxy)
_DIVERGENCE_LEVEL = 0.999
_DIVERGENCE_PATIENCE = 100


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    hidden: int = 64
    embed_dim: int = 32
    head_format: str = "fp32"
    encoder_format: str = "fp32"
    head_lr: float = 0.1
    encoder_lr: float = 1e-3
    head_weight_decay: float = 0.0
    encoder_weight_decay: float = 0.01
    head_rounding: str = "stochastic"
    warmup_steps: int = 0
    epochs: int = 10
    batch_size: int = 32
    chunks: int = 1
    dropout_p: float = 0.0
    grad_clip: float | None = None  # optional global-norm clip, default off
    eval_fraction: float = 0.2
    seed: int = 0

    def head_fmt(self) -> FloatFormat:
        return parse_format(self.head_format)

    def encoder_fmt(self) -> FloatFormat:
        return parse_format(self.encoder_format)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


class TinyEncoder:
    """Two affine layers with a ReLU, parameters Kahan-accumulated."""

    def __init__(self, num_features: int, hidden: int, embed_dim: int,
                 fmt: FloatFormat, seed: int):
        g = np.random.default_rng(seed)
        def init(shape, scale):
            return g.normal(scale=scale, size=shape).astype(np.float32)
        self.params = {
            "w1": KahanAdamWParam.from_values(
                init((num_features, hidden), 1.0 / np.sqrt(num_features)), fmt),
            "b1": KahanAdamWParam.from_values(np.zeros(hidden, np.float32), fmt),
            "w2": KahanAdamWParam.from_values(
                init((hidden, embed_dim), 1.0 / np.sqrt(hidden)), fmt),
            "b2": KahanAdamWParam.from_values(np.zeros(embed_dim, np.float32), fmt),
        }

    def forward(self, x: np.ndarray):
        z = x @ self.params["w1"].values + self.params["b1"].values
        h = np.maximum(z, np.float32(0))
        emb = h @ self.params["w2"].values + self.params["b2"].values
        return emb, (x, z, h)

    def backward(self, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
        x, z, h = cache
        dw2 = h.T @ d_emb
        db2 = d_emb.sum(axis=0)
        dh = d_emb @ self.params["w2"].values.T
        dz = dh * (z > 0)
        dw1 = x.T @ dz
        db1 = dz.sum(axis=0)
        return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


@dataclass
class TrainResult:
    head: ChunkedHead
    history: list[dict]
    tracked_peak_bytes: int | None
    histograms: dict[int, dict] = field(default_factory=dict)
    diverged: bool = False
    steps_run: int = 0
    trainer: "Trainer | None" = None


class Trainer:
    """Stateful training run; supports checkpoint save/load/continue."""

    def __init__(self, dataset: SparseDataset, cfg: TrainConfig, tracker=None):
        if dataset.num_samples == 0:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.cfg = cfg
        self.tracker = tracker
        self.rng = RoundingRng(cfg.seed)
        self.head = ChunkedHead.create(
            dataset.num_labels, cfg.embed_dim, cfg.head_fmt(), seed=cfg.seed,
            num_chunks=cfg.chunks, dropout_p=cfg.dropout_p)
        self.encoder = TinyEncoder(dataset.num_features, cfg.hidden,
                                   cfg.embed_dim, cfg.encoder_fmt(),
                                   cfg.seed + 1)
        self.adamw = KahanAdamWConfig(
            lr=cfg.encoder_lr, weight_decay=cfg.encoder_weight_decay,
            fmt=cfg.encoder_fmt())
        self.global_step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self._hot_steps = 0
        self._split()

    def _split(self):
        u = self.rng.uniform(0, _SPLIT_TAG,
                             np.arange(self.dataset.num_samples, dtype=np.uint64))
        held = u < self.cfg.eval_fraction
        self.eval_idx = np.flatnonzero(held)
        self.train_idx = np.flatnonzero(~held)
        if self.train_idx.size == 0:
            raise ValueError("no training samples after the held-out split")

    def _lr_scale(self) -> float:
        # linear warmup, then constant
        if self.cfg.warmup_steps <= 0:
            return 1.0
        return min(1.0, self.global_step / self.cfg.warmup_steps)

    def _head_cfg(self, lr: float) -> SgdSrConfig:
        return SgdSrConfig(lr=lr, weight_decay=self.cfg.head_weight_decay,
                           fmt=self.cfg.head_fmt(),
                           rounding=self.cfg.head_rounding)

    def step(self, batch_idx: np.ndarray, probe=None, input_probe=None) -> float:
        """One training step; returns mean |logit gradient|."""
        self.global_step += 1
        xf = self.dataset.dense_features(batch_idx)
        emb, cache = self.encoder.forward(xf)
        if input_probe is not None:
            input_probe(self.global_step, emb)
        rows, cols = [], []
        for r, i in enumerate(batch_idx):
            ls = self.dataset.labels[i]
            rows.extend([r] * len(ls))
            cols.extend(ls.tolist())
        batch = BatchInput(emb, np.array(rows, np.int64), np.array(cols, np.int64))

        gsum = [0.0, 0]

        def stat_probe(step, chunk, G):
            gsum[0] += float(np.abs(G, dtype=np.float64).sum())
            gsum[1] += G.size
            if probe is not None:
                probe(step, chunk, G)

        scale = self._lr_scale()
        head_lr = self.cfg.head_lr * scale if self.cfg.head_lr > 0 else 0.0
        if head_lr > 0:
            d_emb = head_update(self.head, batch, self._head_cfg(head_lr),
                                self.rng, self.global_step, self.tracker,
                                stat_probe)
        else:
            # lr == 0: still need gradients for the encoder path to stay
            # well-defined, but weights must not move; use a frozen pass
            frozen = SgdSrConfig(lr=1.0, fmt=self.cfg.head_fmt(),
                                 rounding="nearest")
            before = self.head.weights.values.copy()
            d_emb = head_update(self.head, batch, frozen, self.rng,
                                self.global_step, self.tracker, stat_probe)
            self.head.weights.values[...] = before
            d_emb[...] = 0.0

        mean_g = gsum[0] / max(gsum[1], 1)
        if not np.isfinite(mean_g):
            raise DivergenceError(self.global_step, "non-finite logit gradients")
        self._hot_steps = self._hot_steps + 1 if mean_g > _DIVERGENCE_LEVEL else 0
        if self._hot_steps >= _DIVERGENCE_PATIENCE:
            raise DivergenceError(self.global_step,
                                  "logit gradients saturated (mean |g| > 0.999)")

        grads = self.encoder.backward(cache, d_emb)
        if self.cfg.grad_clip is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                               for g in grads.values()))
            if norm > self.cfg.grad_clip:
                factor = np.float32(self.cfg.grad_clip / norm)
                grads = {k: g * factor for k, g in grads.items()}
        enc_lr = self.cfg.encoder_lr * scale
        for name, g in grads.items():
            kahan_adamw_step(self.encoder.params[name], g, self.adamw,
                             self.global_step, lr=enc_lr)
        return mean_g

    def run_epoch(self, probe=None, input_probe=None):
        order = np.random.default_rng(
            (self.cfg.seed, self.epoch)).permutation(self.train_idx)
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            self.step(order[i:i + bs], probe=probe, input_probe=input_probe)
        self.epoch += 1
        record = {"epoch": self.epoch, "step": self.global_step}
        record.update(self.evaluate())
        self.history.append(record)
        return record

    def predict_scores(self, idx: np.ndarray) -> np.ndarray:
        xf = self.dataset.dense_features(idx)
        emb, _ = self.encoder.forward(xf)
        return self.head.scores(emb)

    def evaluate(self, ks=(1, 3, 5)) -> dict:
        idx = self.eval_idx if self.eval_idx.size else self.train_idx
        scores = self.predict_scores(idx)
        truths = [self.dataset.labels[i] for i in idx]
        return {f"p_at_{k}": dataset_precision_at_k(scores, truths, k)
                for k in ks if k <= self.dataset.num_labels}

    # -- checkpointing ------------------------------------------------------

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        save_head(self.head, os.path.join(directory, "head.bin"))
        enc = {}
        for name, p in self.encoder.params.items():
            enc[f"{name}.sum"] = p.state.sum
            enc[f"{name}.comp"] = p.state.comp
            enc[f"{name}.m"] = p.m
            enc[f"{name}.v"] = p.v
        np.savez(os.path.join(directory, "encoder.npz"), **enc)
        state = {"config": asdict(self.cfg), "global_step": self.global_step,
                 "epoch": self.epoch, "history": self.history}
        with open(os.path.join(directory, "state.json"), "w") as f:
            json.dump(state, f, indent=2)

    @classmethod
    def load(cls, directory: str, dataset: SparseDataset, tracker=None) -> "Trainer":
        with open(os.path.join(directory, "state.json")) as f:
            state = json.load(f)
        cfg = TrainConfig(**state["config"])
        t = cls(dataset, cfg, tracker=tracker)
        t.head = load_head(os.path.join(directory, "head.bin"),
                           num_chunks=cfg.chunks, dropout_p=cfg.dropout_p)
        enc = np.load(os.path.join(directory, "encoder.npz"))
        for name, p in t.encoder.params.items():
            p.state.sum = enc[f"{name}.sum"]
            p.state.comp = enc[f"{name}.comp"]
            p.m = enc[f"{name}.m"]
            p.v = enc[f"{name}.v"]
        t.global_step = state["global_step"]
        t.epoch = state["epoch"]
        t.history = list(state["history"])
        return t


def train(dataset: SparseDataset, cfg: TrainConfig, tracker=None,
          probe_steps=None) -> TrainResult:
    """Run cfg.epochs of training; optionally capture exponent histograms."""
    trainer = Trainer(dataset, cfg, tracker=tracker)
    probe_steps = set(probe_steps or ())
    histograms: dict[int, dict] = {}
    fmt = cfg.head_fmt()

    captured_g: dict[int, list] = {}
    captured_in: dict[int, np.ndarray] = {}
    captured_w: dict[int, np.ndarray] = {}

    def probe(step, chunk, G):
        if step in probe_steps:
            captured_g.setdefault(step, []).append(np.abs(G).ravel())

    def input_probe(step, emb):
        if step in probe_steps:
            captured_in[step] = round_nearest(fmt, emb)
            captured_w[step] = trainer.head.weights.values.copy()

    diverged = False
    try:
        for _ in range(cfg.epochs):
            trainer.run_epoch(probe=probe if probe_steps else None,
                              input_probe=input_probe if probe_steps else None)
    except DivergenceError:
        diverged = True
    for step, parts in captured_g.items():
        histograms[step] = {
            "logit_gradients": exponent_histogram(np.concatenate(parts), fmt),
            "weights": exponent_histogram(captured_w[step], fmt),
            "inputs": exponent_histogram(captured_in[step], fmt),
        }
    peak = tracker.peak_bytes() if tracker is not None else None
    return TrainResult(trainer.head, trainer.history, peak, histograms,
                       diverged, trainer.global_step, trainer)


def _final_p1(result: TrainResult) -> float:
    return result.history[-1]["p_at_1"] if result.history else 0.0


def quant_sweep(dataset: SparseDataset, base_cfg: TrainConfig,
                formats: list[str], modes=("nearest", "stochastic")) -> list[dict]:
    """Train one model per (format, rounding mode) cell; report final P@1."""
    if not formats:
        raise ValueError("empty format grid")
    rows = []
    for fmt_name in formats:
        for mode in modes:
            cfg = TrainConfig(**{**asdict(base_cfg),
                                 "head_format": fmt_name,
                                 "head_rounding": mode})
            result = train(dataset, cfg)
            rows.append({"format": fmt_name, "rounding": mode,
                         "p_at_1": _final_p1(result),
                         "diverged": result.diverged})
    return rows


def gradient_histogram_probe(dataset: SparseDataset, cfg: TrainConfig,
                             steps, fmt: FloatFormat | None = None) -> dict[int, dict]:
    """Exponent histograms of logit gradients, weights and inputs at steps."""
    result = train(dataset, cfg, probe_steps=steps)
    return result.histograms
