"""Analytic memory accounting and a live allocation tracker.

The planner reproduces, from closed-form byte counts, the allocation
timeline of one training round for three recipes:

* ``renee``: fp16/fp32 mixed-precision baseline — fp32 master classifier
  weights plus fp32 momentum, a persistent logit-gradient buffer, an
  ephemeral fp16 copy of the weights during forward, and both fp16 and
  upcast fp32 classifier gradients during backward.
* ``elmo_bf16`` / ``elmo_fp8``: pure low-precision training — weights at
  2 or 1 bytes, no momentum, per-chunk logits only, and no materialized
  classifier gradient or weight copy at all.

Encoder-side costs are anchored at a BERT-base / batch 128 / seq 128
reference point (encoder+optimizer 1.2 GiB, activations 4.6 GiB in bf16
or 3.0 GiB under the fp8 recipe plus 0.5 GiB fp8 scratch) and scaled
linearly in parameter count and batch*seq.  GiB means 2^30 bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math
import threading

__all__ = ["Recipe", "TrainingShape", "MemoryPlan", "PlannedAllocation",
           "plan", "sweep_labels", "AllocationTracker", "tracked_peak", "GIB"]

GIB = 2 ** 30

# reference-point constants (BERT-base encoder, batch 128, seq 128)
_REF_ENCODER_PARAMS = 110_000_000
_REF_BATCH_SEQ = 128 * 128
_ENC_OPT_GIB = 1.2
_ACT_BF16_GIB = 4.6
_ACT_FP8_GIB = 3.0
_FP8_SCRATCH_GIB = 0.5

PHASES = ("init", "forward", "backward", "step")


class Recipe(str, Enum):
    RENEE_MPT = "renee"
    ELMO_BF16 = "elmo_bf16"
    ELMO_FP8 = "elmo_fp8"

    @classmethod
    def parse(cls, name: str) -> "Recipe":
        key = name.strip().lower()
        aliases = {"renee": cls.RENEE_MPT, "renee_mpt": cls.RENEE_MPT,
                   "elmo_bf16": cls.ELMO_BF16, "bf16": cls.ELMO_BF16,
                   "elmo_fp8": cls.ELMO_FP8, "fp8": cls.ELMO_FP8}
        if key not in aliases:
            raise ValueError(f"unknown recipe {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class TrainingShape:
    num_labels: int
    dim: int = 768
    batch: int = 128
    seq: int = 128
    chunks: int = 8
    encoder_params: int = _REF_ENCODER_PARAMS

    def __post_init__(self):
        if self.num_labels < 0:
            raise ValueError("num_labels must be non-negative")
        for name in ("dim", "batch", "seq", "chunks", "encoder_params"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def chunk_labels(self) -> int:
        return math.ceil(self.num_labels / self.chunks)


@dataclass(frozen=True)
class PlannedAllocation:
    name: str
    bytes: int
    precision: str
    alloc_phase: str  # phase where it appears
    free_phase: str | None  # None = persistent for the whole round


@dataclass
class MemoryPlan:
    recipe: Recipe
    allocations: list[PlannedAllocation]
    # live byte total at the end of each phase, in PHASES order
    live_by_phase: dict[str, int] = field(default_factory=dict)
    peak_bytes: int = 0

    def __post_init__(self):
        live = 0
        for phase in PHASES:
            for a in self.allocations:
                if a.alloc_phase == phase:
                    live += a.bytes
            self.live_by_phase[phase] = live
            self.peak_bytes = max(self.peak_bytes, live)
            for a in self.allocations:
                if a.free_phase == phase:
                    live -= a.bytes

    @property
    def peak_gib(self) -> float:
        return self.peak_bytes / GIB

    @property
    def init_bytes(self) -> int:
        return self.live_by_phase["init"]

    def component(self, name: str) -> int:
        """Byte size of a named allocation (0 if absent)."""
        return sum(a.bytes for a in self.allocations if a.name == name)

    def timeline_rows(self) -> list[tuple[str, str, int, int]]:
        """(phase, allocation, bytes, live_total) rows in event order."""
        rows = []
        live = 0
        for phase in PHASES:
            for a in self.allocations:
                if a.alloc_phase == phase:
                    live += a.bytes
                    rows.append((phase, a.name, a.bytes, live))
            for a in self.allocations:
                if a.free_phase == phase:
                    live -= a.bytes
                    rows.append((phase, f"free:{a.name}", -a.bytes, live))
        return rows


def _encoder_allocs(shape: TrainingShape, recipe: Recipe) -> list[PlannedAllocation]:
    pscale = shape.encoder_params / _REF_ENCODER_PARAMS
    ascale = (shape.batch * shape.seq) / _REF_BATCH_SEQ
    out = [PlannedAllocation("encoder_and_optimizer",
                             round(_ENC_OPT_GIB * pscale * GIB), "mixed",
                             "init", None)]
    act = _ACT_FP8_GIB if recipe is Recipe.ELMO_FP8 else _ACT_BF16_GIB
    out.append(PlannedAllocation("encoder_activations",
                                 round(act * ascale * GIB),
                                 "fp8" if recipe is Recipe.ELMO_FP8 else "bf16",
                                 "forward", "backward"))
    if recipe is Recipe.ELMO_FP8:
        out.append(PlannedAllocation("fp8_encoder_scratch",
                                     round(_FP8_SCRATCH_GIB * ascale * GIB),
                                     "fp8", "forward", "backward"))
    return out


def plan(shape: TrainingShape, recipe: Recipe) -> MemoryPlan:
    """Full allocation timeline for one training round."""
    L, m, b = shape.num_labels, shape.dim, shape.batch
    allocs = _encoder_allocs(shape, recipe)
    if recipe is Recipe.RENEE_MPT:
        allocs += [
            PlannedAllocation("classifier_weights", L * m * 4, "fp32", "init", None),
            PlannedAllocation("classifier_momentum", L * m * 4, "fp32", "init", None),
            PlannedAllocation("logit_gradient_buffer", L * b * 2, "fp16", "init", None),
            PlannedAllocation("weight_copy", L * m * 2, "fp16", "forward", "step"),
            PlannedAllocation("classifier_gradient", L * m * 2, "fp16", "backward", "step"),
            PlannedAllocation("classifier_gradient_fp32", L * m * 4, "fp32", "backward", "step"),
        ]
    else:
        wbytes = 2 if recipe is Recipe.ELMO_BF16 else 1
        allocs += [
            PlannedAllocation("classifier_weights", L * m * wbytes,
                              "bf16" if wbytes == 2 else "fp8", "init", None),
            PlannedAllocation("chunk_logits", shape.chunk_labels * b * 2 if L else 0,
                              "bf16", "init", None),
            PlannedAllocation("input_grad_accumulator", b * m * 4, "fp32",
                              "backward", "step"),
            PlannedAllocation("fused_block_scratch", 64 * 64 * 4, "fp32",
                              "backward", "step"),
        ]
    allocs = [a for a in allocs if a.bytes > 0]
    return MemoryPlan(recipe, allocs)


def sweep_labels(shape: TrainingShape, label_counts: list[int],
                 recipes: list[Recipe]) -> list[dict]:
    """Peak bytes per (label count, recipe)."""
    rows = []
    for L in label_counts:
        resized = TrainingShape(L, shape.dim, shape.batch, shape.seq,
                                shape.chunks, shape.encoder_params)
        for r in recipes:
            p = plan(resized, r)
            rows.append({"num_labels": L, "recipe": r.value,
                         "peak_bytes": p.peak_bytes, "peak_gib": p.peak_gib})
    return rows


class AllocationTracker:
    """Process-wide counter of tagged live allocations.

    Byte sizes are nominal for the emulated precision (e.g. a bf16 logits
    buffer registers 2 bytes per entry even though the working array is
    float32).  Thread-safe; used to validate the analytic plan against the
    actual trainer at desk scale.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with getattr(self, "_lock", threading.Lock()):
            self._live = {}
            self._next = 0
            self._total = 0
            self._peak = 0
            self._tag_live = {}
            self._tag_peak = {}
            self._events = []
            self.enabled = True

    def alloc(self, name: str, tag: str, nbytes: int) -> int:
        with self._lock:
            handle = self._next
            self._next += 1
            self._live[handle] = (name, tag, int(nbytes))
            self._events.append((name, tag, int(nbytes)))
            self._total += nbytes
            self._peak = max(self._peak, self._total)
            self._tag_live[tag] = self._tag_live.get(tag, 0) + nbytes
            self._tag_peak[tag] = max(self._tag_peak.get(tag, 0),
                                      self._tag_live[tag])
            return handle

    def free(self, handle: int):
        with self._lock:
            name, tag, nbytes = self._live.pop(handle)
            self._total -= nbytes
            self._tag_live[tag] -= nbytes

    def peak_bytes(self, tag: str | None = None) -> int:
        with self._lock:
            return self._peak if tag is None else self._tag_peak.get(tag, 0)

    def live_bytes(self) -> int:
        with self._lock:
            return self._total

    def max_allocation(self, tag: str) -> int:
        """Largest single allocation ever registered under a tag."""
        with self._lock:
            return max((n for (_, t, n) in self._events if t == tag), default=0)


def tracked_peak(tracker: AllocationTracker | None, tag: str | None = None) -> int:
    """Observed peak of tagged allocations; errors if tracking is disabled."""
    if tracker is None or not getattr(tracker, "enabled", False):
        raise ValueError("allocation tracking was not enabled for this run")
    return tracker.peak_bytes(tag)
