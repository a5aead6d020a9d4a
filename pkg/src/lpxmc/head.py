"""Chunked extreme-classification head.

The label dimension is partitioned into k contiguous chunks that are
processed strictly in order: forward logits, logit gradient, input-gradient
accumulation, then a fused gradient+SGD update that never materializes a
weight-gradient matrix larger than one (block_m x block_n) scratch block.

The scalar loss is never computed.  The backward pass starts directly from
the per-entry binary cross-entropy gradient sigmoid(logit) - Y ("logit
gradient"); gradients correspond to the *sum* of per-element BCE over the
batch (no 1/batch factor).

Chunk-count invariance: every matrix product is executed at a fixed
canonical row granularity (``N_CELLS`` slices of [0, L) that nest with any
chunk count dividing N_CELLS), and all stochastic rounding / dropout draws
are keyed by global flat element index.  Training is therefore
bit-identical for k in {1, 2, 4, 8, ...} under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import io
import struct

import numpy as np

from .formats import FloatFormat, QuantizedMatrix, parse_format, round_nearest
from .optimizers import SgdSrConfig, sgd_sr_step
from .rng import RoundingRng, tensor_tag

__all__ = [
    "ChunkedHead", "BatchInput", "partition", "canonical_pieces",
    "head_forward_logits", "logit_gradient", "input_gradient_accumulate",
    "fused_weight_update", "head_update", "dropout_mask",
    "save_head", "load_head", "encode_grid_bits", "decode_grid_bits",
    "HEAD_WEIGHTS_TAG", "DROPOUT_TAG", "N_CELLS",
]

N_CELLS = 64  # canonical row-slice count; chunk counts dividing this nest exactly

HEAD_WEIGHTS_TAG = tensor_tag("head.weights")
DROPOUT_TAG = tensor_tag("head.dropout")

# sigmoid outputs are clipped so logit-gradient entries stay strictly
# inside (-1, 1) even for saturated logits
_SIG_LO = np.float32(2.0 ** -24)
_SIG_HI = np.float32(1.0) - np.float32(2.0 ** -24)


def partition(total: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ranges of floor/ceil(total/parts) rows; nests for divisors."""
    if parts < 1:
        raise ValueError("need at least one part")
    bounds = [(i * total) // parts for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts)
            if bounds[i + 1] > bounds[i]]


def canonical_pieces(start: int, stop: int, total: int) -> list[tuple[int, int]]:
    """Split [start, stop) at the canonical N_CELLS boundaries of [0, total)."""
    cuts = sorted({start, stop}
                  | {b for b, _ in partition(total, min(N_CELLS, max(total, 1)))
                     if start < b < stop})
    cuts = [c for c in cuts if start <= c <= stop]
    return [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]


@dataclass
class ChunkedHead:
    """Classifier weights partitioned into contiguous label chunks."""

    weights: QuantizedMatrix  # (L, m)
    num_chunks: int = 1
    dropout_p: float = 0.0
    block_m: int = 64
    block_n: int = 64
    tensor_id: int = HEAD_WEIGHTS_TAG

    def __post_init__(self):
        if self.num_chunks < 1:
            raise ValueError("num_chunks must be >= 1")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")

    @classmethod
    def create(cls, num_labels: int, dim: int, fmt: FloatFormat, seed: int = 0,
               num_chunks: int = 1, dropout_p: float = 0.0,
               init_scale: float = 0.02) -> "ChunkedHead":
        w = np.random.default_rng(seed).normal(
            scale=init_scale, size=(num_labels, dim)).astype(np.float32)
        return cls(QuantizedMatrix.quantize(w, fmt), num_chunks, dropout_p)

    @property
    def num_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def fmt(self) -> FloatFormat:
        return self.weights.fmt

    def chunks(self) -> list[tuple[int, int]]:
        return partition(self.num_labels, self.num_chunks)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Inference logits (batch, L); dropout disabled."""
        Xq = round_nearest(self.fmt, np.asarray(X, dtype=np.float32))
        return Xq @ self.weights.values.T


@dataclass
class BatchInput:
    """Batch embeddings plus sparse positive labels as (sample, label) pairs."""

    X: np.ndarray  # (b, m) float32
    sample_idx: np.ndarray  # positives, sorted by (sample, label)
    label_idx: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.sample_idx = np.asarray(self.sample_idx, dtype=np.int64)
        self.label_idx = np.asarray(self.label_idx, dtype=np.int64)

    @classmethod
    def from_label_lists(cls, X: np.ndarray, labels: list[list[int]]) -> "BatchInput":
        rows, cols = [], []
        for i, ls in enumerate(labels):
            for l in ls:
                rows.append(i)
                cols.append(l)
        return cls(X, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))


def dropout_mask(rng: RoundingRng, step: int, p: float,
                 row_range: tuple[int, int], num_cols: int) -> np.ndarray:
    """Keep/drop mask for a row slice of the weight matrix.

    Entries are pure functions of (seed, step, global row, col): forward and
    the fused backward of one step regenerate the identical mask, so no mask
    tensor (or weight copy) is ever persisted.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError("dropout probability must lie in [0, 1)")
    start, stop = row_range
    rows = np.arange(start, stop, dtype=np.uint64)[:, None]
    flat = rows * np.uint64(num_cols) + np.arange(num_cols, dtype=np.uint64)[None, :]
    u = rng.uniform(step, DROPOUT_TAG, flat)
    return (u >= p).astype(np.float32)


def _effective_weights(head: ChunkedHead, start: int, stop: int,
                       rng: RoundingRng, step: int) -> np.ndarray:
    w = head.weights.values[start:stop]
    if head.dropout_p == 0.0:
        return w
    mask = dropout_mask(rng, step, head.dropout_p, (start, stop), head.dim)
    return w * (mask / np.float32(1.0 - head.dropout_p))


def head_forward_logits(head: ChunkedHead, chunk: tuple[int, int],
                        Xq: np.ndarray, rng: RoundingRng, step: int) -> np.ndarray:
    """Logits of one chunk, shape (chunk labels, batch).

    Xq must already be snapped to the head's format grid (done once per
    step); accumulation happens at working precision.
    """
    start, stop = chunk
    if Xq.shape[1] != head.dim:
        raise ValueError(f"input dim {Xq.shape[1]} != head dim {head.dim}")
    logits = np.empty((stop - start, Xq.shape[0]), dtype=np.float32)
    for s, e in canonical_pieces(start, stop, head.num_labels):
        w_eff = _effective_weights(head, s, e, rng, step)
        logits[s - start:e - start] = w_eff @ Xq.T
    return logits


def logit_gradient(logits: np.ndarray, sample_idx: np.ndarray,
                   label_idx: np.ndarray, chunk: tuple[int, int]) -> np.ndarray:
    """sigmoid(logit) at negatives, sigmoid(logit) - 1 at positives.

    This is the exact gradient of summed BCE-with-logits, so no scalar loss
    is ever formed.  Labels must already be filtered to the chunk range.
    """
    start, stop = chunk
    label_idx = np.asarray(label_idx, dtype=np.int64)
    if label_idx.size and (label_idx.min() < start or label_idx.max() >= stop):
        raise ValueError(f"label outside chunk range [{start}, {stop})")
    with np.errstate(over="ignore"):  # saturated logits clip below anyway
        g = np.clip(1.0 / (1.0 + np.exp(-logits.astype(np.float32))), _SIG_LO, _SIG_HI)
    g = g.astype(np.float32)
    g[label_idx - start, sample_idx] -= np.float32(1.0)
    return g


def input_gradient_accumulate(acc: np.ndarray, G: np.ndarray, head: ChunkedHead,
                              chunk: tuple[int, int], rng: RoundingRng,
                              step: int) -> np.ndarray:
    """acc += G^T @ W_chunk at working precision, in canonical cell order."""
    start, stop = chunk
    if acc.shape != (G.shape[1], head.dim):
        raise ValueError("accumulator shape mismatch")
    for s, e in canonical_pieces(start, stop, head.num_labels):
        w_eff = _effective_weights(head, s, e, rng, step)
        acc += G[s - start:e - start].T @ w_eff
    return acc


def fused_weight_update(head: ChunkedHead, G: np.ndarray, Xq: np.ndarray,
                        cfg: SgdSrConfig, rng: RoundingRng, step: int,
                        chunk: tuple[int, int], tracker=None) -> None:
    """Gradient + SGD + rounding per block, in place, no resident gradient.

    Per (block_m x block_n) block the weight gradient G @ Xq is formed in a
    bounded scratch region, the weight block is updated at working precision
    and rounded back onto the grid, then scratch is reused for the next
    block.  Nothing proportional to chunk_labels x m is ever allocated.
    """
    start, stop = chunk
    m = head.dim
    keep = np.float32(1.0 - head.dropout_p)
    handle = None
    if tracker is not None:
        handle = tracker.alloc("fused_block_scratch", "scratch",
                               head.block_m * head.block_n * 4)
    try:
        for s, e in canonical_pieces(start, stop, head.num_labels):
            for r0 in range(s, e, head.block_m):
                r1 = min(r0 + head.block_m, e)
                g_rows = G[r0 - start:r1 - start]
                for c0 in range(0, m, head.block_n):
                    c1 = min(c0 + head.block_n, m)
                    scratch = g_rows @ Xq[:, c0:c1]  # (block_m, block_n)
                    if not np.all(np.isfinite(scratch)):
                        raise ValueError("non-finite values in fused scratch block")
                    if head.dropout_p > 0.0:
                        mask = dropout_mask(rng, step, head.dropout_p,
                                            (r0, r1), m)[:, c0:c1]
                        scratch *= mask / keep
                    w_block = head.weights.values[r0:r1, c0:c1]
                    idx = (np.arange(r0, r1, dtype=np.uint64)[:, None] * np.uint64(m)
                           + np.arange(c0, c1, dtype=np.uint64)[None, :])
                    new = sgd_sr_step(QuantizedMatrix(w_block, head.fmt), scratch,
                                      cfg, rng, step, head.tensor_id, idx)
                    head.weights.values[r0:r1, c0:c1] = new.values
    finally:
        if handle is not None:
            tracker.free(handle)


def head_update(head: ChunkedHead, batch: BatchInput, cfg: SgdSrConfig,
                rng: RoundingRng, step: int, tracker=None,
                probe=None) -> np.ndarray:
    """One full head step over all chunks; returns the input gradient (b, m).

    Per chunk, strictly in order: forward -> logit gradient -> input-gradient
    accumulation -> fused weight update.  The encoder's backward/update from
    the returned input gradient is the caller's responsibility and happens
    only after every chunk is done.
    """
    b = batch.X.shape[0]
    Xq = round_nearest(head.fmt, batch.X)  # single cast, reused by fwd + bwd
    acc = np.zeros((b, head.dim), dtype=np.float32)
    acc_handle = logits_bytes = None
    if tracker is not None:
        acc_handle = tracker.alloc("input_grad_accumulator", "accumulator",
                                   acc.size * 4)
        logits_bytes = 2  # logits are 16-bit in the modeled layout
    order = np.lexsort((batch.label_idx, batch.sample_idx))
    srt_samples = batch.sample_idx[order]
    srt_labels = batch.label_idx[order]
    try:
        for chunk in head.chunks():
            start, stop = chunk
            in_chunk = (srt_labels >= start) & (srt_labels < stop)
            lhandle = None
            if tracker is not None:
                lhandle = tracker.alloc("chunk_logits", "logits",
                                        (stop - start) * b * logits_bytes)
            try:
                logits = head_forward_logits(head, chunk, Xq, rng, step)
                G = logit_gradient(logits, srt_samples[in_chunk],
                                   srt_labels[in_chunk], chunk)
                del logits
                if probe is not None:
                    probe(step, chunk, G)
                input_gradient_accumulate(acc, G, head, chunk, rng, step)
                fused_weight_update(head, G, Xq, cfg, rng, step, chunk, tracker)
            finally:
                if lhandle is not None:
                    tracker.free(lhandle)
    finally:
        if acc_handle is not None:
            tracker.free(acc_handle)
    return acc


# ---------------------------------------------------------------------------
# checkpoint format: bit-faithful storage of grid values

_MAGIC = b"LPXH"
_VERSION = 1


def _storage_dtype(fmt: FloatFormat):
    bits = fmt.storage_bits
    if bits <= 8:
        return np.uint8
    if bits <= 16:
        return np.uint16
    return np.uint32


def encode_grid_bits(values: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Pack on-grid float32 values into the format's sign/exp/mantissa bits."""
    v = np.asarray(values, dtype=np.float64)
    sign = (v < 0) | ((v == 0) & (np.copysign(1.0, v) < 0))
    mag = np.abs(v)
    mant, e = np.frexp(mag)
    exp = e - 1  # mag = mant*2^(exp+1), mant in [0.5, 1)
    normal = mag >= np.ldexp(1.0, fmt.min_normal_exp)
    exp_field = np.where(normal, exp + fmt.bias, 0).astype(np.int64)
    frac = np.where(
        normal,
        np.ldexp(mag, -(exp.astype(np.int64)) + fmt.man_bits) - (1 << fmt.man_bits),
        np.ldexp(mag, -fmt.min_exp),
    )
    frac_i = np.rint(frac).astype(np.int64)
    if not np.array_equal(frac_i.astype(np.float64), frac):
        raise ValueError("value not on the format grid")
    if np.any(frac_i < 0) or np.any(frac_i >= max(1 << fmt.man_bits, 1)):
        raise ValueError("value not on the format grid")
    bits = (sign.astype(np.int64) << (fmt.exp_bits + fmt.man_bits)) \
        | (exp_field << fmt.man_bits) | frac_i
    return bits.astype(_storage_dtype(fmt))


def decode_grid_bits(bits: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Inverse of :func:`encode_grid_bits`."""
    b = np.asarray(bits).astype(np.int64)
    man_mask = (1 << fmt.man_bits) - 1
    frac = b & man_mask
    exp_field = (b >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    sign = (b >> (fmt.exp_bits + fmt.man_bits)) & 1
    normal = exp_field > 0
    mag = np.where(
        normal,
        np.ldexp((1 << fmt.man_bits) + frac.astype(np.float64),
                 exp_field - fmt.bias - fmt.man_bits),
        np.ldexp(frac.astype(np.float64), fmt.min_exp),
    )
    return (np.where(sign == 1, -mag, mag)).astype(np.float32)


def save_head(head: ChunkedHead, fp) -> None:
    """Write header + row-major payload of format bit patterns."""
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "wb")
        close = True
    try:
        tag = head.fmt.name.encode("ascii")
        fp.write(_MAGIC)
        fp.write(struct.pack("<IQQB", _VERSION, head.num_labels, head.dim, len(tag)))
        fp.write(tag)
        fp.write(encode_grid_bits(head.weights.values, head.fmt).tobytes())
    finally:
        if close:
            fp.close()


def load_head(fp, num_chunks: int = 1, dropout_p: float = 0.0) -> ChunkedHead:
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "rb")
        close = True
    try:
        if fp.read(4) != _MAGIC:
            raise ValueError("not a head checkpoint (bad magic)")
        version, L, m, taglen = struct.unpack("<IQQB", fp.read(21))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        fmt = parse_format(fp.read(taglen).decode("ascii"))
        raw = np.frombuffer(fp.read(), dtype=_storage_dtype(fmt), count=L * m)
        values = decode_grid_bits(raw, fmt).reshape(L, m)
        return ChunkedHead(QuantizedMatrix(values, fmt), num_chunks, dropout_p)
    finally:
        if close:
            fp.close()
