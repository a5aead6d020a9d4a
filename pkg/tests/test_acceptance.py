"""Acceptance gate: eleven end-to-end checks, one printed PASS line each.

Run with `pytest -v -s tests/test_acceptance.py` to see the lines as they
complete; each test is independent and states its tolerance inline.
"""

import sys
import time

import numpy as np
import pytest

from lpxmc.data import generate_synthetic
from lpxmc.formats import BF16, E4M3, E5M2, FP32, KahanState, kahan_add, \
    neighbors, parse_format, round_nearest, round_stochastic
from lpxmc.head import ChunkedHead, fused_weight_update, head_forward_logits, \
    head_update, input_gradient_accumulate, logit_gradient
from lpxmc.formats import QuantizedMatrix
from lpxmc.memory import AllocationTracker, Recipe, TrainingShape, plan, \
    sweep_labels
from lpxmc.metrics import PropensityModel, precision_at_k, psp_at_k
from lpxmc.optimizers import SgdSrConfig
from lpxmc.rng import RoundingRng
from lpxmc.trainer import TrainConfig, train, quant_sweep

from conftest import EASY_CFG, EASY_SPEC, HARD_CFG, HARD_SPEC
from test_head import _bce_sum_loss, _random_batch, _reference_materialized_update


def _report(num: int, title: str, detail: str, t0: float):
    dt = time.monotonic() - t0
    print(f"\nACCEPTANCE {num:>2} PASS  {title}: {detail}  [{dt:.1f}s]",
          file=sys.stderr)


def test_acceptance_01_memory_accounting():
    t0 = time.monotonic()
    shape = TrainingShape(num_labels=2_812_281, dim=768, batch=128, seq=128,
                          chunks=8)
    peaks = {r: plan(shape, r).peak_gib for r in Recipe}
    assert peaks[Recipe.RENEE_MPT] == pytest.approx(39.7, rel=0.05)
    assert peaks[Recipe.ELMO_BF16] == pytest.approx(10.39, rel=0.05)
    assert peaks[Recipe.ELMO_FP8] == pytest.approx(6.6, rel=0.05)
    renee = plan(shape, Recipe.RENEE_MPT)
    assert renee.component("classifier_weights") == shape.num_labels * shape.dim * 4
    assert renee.component("classifier_weights") / 2**30 == pytest.approx(8.04, abs=0.01)
    fp8 = plan(shape, Recipe.ELMO_FP8)
    assert fp8.component("chunk_logits") == shape.chunk_labels * shape.batch * 2
    assert fp8.component("chunk_logits") / 2**20 == pytest.approx(86, abs=1)
    assert time.monotonic() - t0 < 1.0
    _report(1, "memory accounting",
            f"peaks GiB renee={peaks[Recipe.RENEE_MPT]:.2f} (39.7±5%) "
            f"bf16={peaks[Recipe.ELMO_BF16]:.2f} (10.39±5%) "
            f"fp8={peaks[Recipe.ELMO_FP8]:.2f} (6.6±5%); components exact", t0)


def test_acceptance_02_memory_sweep_ratios():
    t0 = time.monotonic()
    shape = TrainingShape(num_labels=1, dim=768, batch=128, seq=128, chunks=8)
    rows = sweep_labels(shape, [3_000_000, 8_623_847],
                        [Recipe.RENEE_MPT, Recipe.ELMO_FP8])
    by = {(r["num_labels"], r["recipe"]): r["peak_bytes"] for r in rows}
    r3 = by[(3_000_000, "renee")] / by[(3_000_000, "elmo_fp8")]
    r8 = by[(8_623_847, "renee")] / by[(8_623_847, "elmo_fp8")]
    assert r3 == pytest.approx(6, rel=0.15)
    assert r8 == pytest.approx(11, rel=0.15)
    assert time.monotonic() - t0 < 1.0
    _report(2, "memory sweep ratios",
            f"renee/elmo_fp8 = {r3:.2f} at 3M (≈6±15%), {r8:.2f} at 8.6M (≈11±15%)", t0)


def test_acceptance_03_sr_unbiasedness():
    t0 = time.monotonic()
    n = 1_000_000
    idx = np.arange(n)
    worst = 0.0
    for fi, fmt in enumerate((BF16, E4M3, E5M2)):
        rng_np = np.random.default_rng(100 + fi)
        # magnitudes spread across the normal range, both signs
        exps = rng_np.uniform(fmt.min_normal_exp, fmt.max_exp - 1, size=100)
        vals = np.sign(rng_np.normal(size=100)) * 2.0 ** exps * rng_np.uniform(1, 2, size=100)
        vals = np.clip(vals, -fmt.max_finite, fmt.max_finite)
        key_rng = RoundingRng(17)
        for vi, x in enumerate(vals):
            lo, hi = neighbors(fmt, np.float64(x))
            lo, hi = float(lo), float(hi)
            if lo == hi:  # already on the grid: zero variance
                continue
            draws = round_stochastic(fmt, np.full(n, x), key_rng,
                                     step=vi, tensor_id=fi, index=idx)
            mean = draws.mean(dtype=np.float64)
            p = (x - lo) / (hi - lo)
            sigma = np.sqrt(p * (1 - p)) * (hi - lo) / np.sqrt(n)
            dev = abs(mean - x) / sigma
            worst = max(worst, dev)
            assert dev < 4.0, (fmt.name, x, dev)
    _report(3, "SR unbiasedness",
            f"100 values x 1e6 draws per format in {{bf16,e4m3,e5m2}}; "
            f"worst deviation {worst:.2f}σ < 4σ", t0)


def test_acceptance_04_kahan_rescue():
    t0 = time.monotonic()
    # plain bf16 accumulation: every +2^-12 onto 1.0 rounds back to 1.0
    plain = np.float64(1.0)
    for _ in range(4096):
        plain = round_nearest(BF16, plain + 2.0 ** -12)
    assert plain == 1.0
    state = KahanState.zeros(())
    state.sum = np.float32(1.0)
    for _ in range(4096):
        state = kahan_add(state, np.float32(2.0 ** -12), BF16)
    assert float(state.sum) == 2.0  # exact-rational result: 1 + 4096*2^-12
    _report(4, "Kahan rescue",
            "1.0 + 4096x2^-12 in bf16: plain=1.0 (stalls), Kahan=2.0 (exact)", t0)


def test_acceptance_05_skip_loss_gradients():
    t0 = time.monotonic()
    rng = np.random.default_rng(31)
    for trial in range(20):
        L = int(rng.integers(2, 17))
        d = int(rng.integers(2, 9))
        b = int(rng.integers(1, 5))
        head = ChunkedHead.create(L, d, FP32, seed=trial)
        W = head.weights.values
        X = rng.normal(size=(b, d)).astype(np.float32)
        n_pos = int(rng.integers(1, b * 2 + 1))
        pos = set(zip(rng.integers(0, b, n_pos).tolist(),
                      rng.integers(0, L, n_pos).tolist()))
        sample_idx = np.array([s for s, _ in sorted(pos)], np.int64)
        label_idx = np.array([l for _, l in sorted(pos)], np.int64)
        key_rng = RoundingRng(0)
        logits = head_forward_logits(head, (0, L), X, key_rng, step=0)
        G = logit_gradient(logits, sample_idx, label_idx, (0, L))
        grad_W = G.astype(np.float64) @ X.astype(np.float64)
        acc = np.zeros((b, d), np.float32)
        input_gradient_accumulate(acc, G, head, (0, L), key_rng, step=0)
        eps = 1e-4
        fd_W = np.zeros_like(W, np.float64)
        for i in range(L):
            for j in range(d):
                Wp, Wm = W.copy(), W.copy()
                Wp[i, j] += eps
                Wm[i, j] -= eps
                fd_W[i, j] = (_bce_sum_loss(Wp, X, pos)
                              - _bce_sum_loss(Wm, X, pos)) / (2 * eps)
        assert np.allclose(grad_W, fd_W, rtol=1e-4, atol=1e-4)
        fd_X = np.zeros((b, d), np.float64)
        for i in range(b):
            for j in range(d):
                Xp, Xm = X.copy(), X.copy()
                Xp[i, j] += eps
                Xm[i, j] -= eps
                fd_X[i, j] = (_bce_sum_loss(W, Xp, pos)
                              - _bce_sum_loss(W, Xm, pos)) / (2 * eps)
        assert np.allclose(acc.astype(np.float64), fd_X, rtol=1e-4, atol=1e-4)
    _report(5, "skip-loss gradients",
            "20 random instances (L≤16,m≤8,b≤4): weight + input gradients "
            "match central differences at 1e-4", t0)


def test_acceptance_06_fused_equals_reference():
    t0 = time.monotonic()
    count = 0
    for fmt_name in ("fp32", "bf16", "e4m3"):
        fmt = parse_format(fmt_name)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            L = int(rng.integers(4, 40))
            d = int(rng.integers(2, 12))
            b = int(rng.integers(1, 6))
            batch = _random_batch(rng, L, d, b)
            h1 = ChunkedHead.create(L, d, fmt, seed=seed)
            h2 = ChunkedHead.create(L, d, fmt, seed=seed)
            cfg = SgdSrConfig(lr=0.05, fmt=fmt, rounding="stochastic")
            Xq = QuantizedMatrix.quantize(batch.X, fmt).values
            k1, k2 = RoundingRng(99), RoundingRng(99)
            logits = head_forward_logits(h1, (0, L), Xq, k1, step=1)
            G = logit_gradient(logits, batch.sample_idx, batch.label_idx, (0, L))
            fused_weight_update(h1, G, Xq, cfg, k1, step=1, chunk=(0, L))
            _reference_materialized_update(h2, G, Xq, cfg, k2, step=1, chunk=(0, L))
            assert np.array_equal(h1.weights.values, h2.weights.values), (fmt_name, seed)
            count += 1
    _report(6, "fused ≡ materialized",
            f"bit-identical weights across {count} (format, seed) cases", t0)


def test_acceptance_07_chunking_invariance():
    t0 = time.monotonic()
    ds = generate_synthetic(EASY_SPEC)
    cfg = TrainConfig(hidden=32, embed_dim=16, head_format="e4m3",
                      head_rounding="stochastic", head_lr=0.1,
                      encoder_lr=1e-3, epochs=2, batch_size=32, seed=5)
    finals = {}
    for k in (1, 2, 4, 8):
        cfg_k = TrainConfig(**{**cfg.__dict__, "chunks": k})
        r = train(ds, cfg_k)
        finals[k] = r.head.weights.values.copy()
    for k in (2, 4, 8):
        assert np.array_equal(finals[1], finals[k]), k
    _report(7, "chunking invariance",
            "full runs with k∈{1,2,4,8}: final checkpoints bit-identical", t0)


def test_acceptance_08_quant_sweep_ordering():
    t0 = time.monotonic()
    ds = generate_synthetic(HARD_SPEC)
    rows = quant_sweep(ds, HARD_CFG,
                       formats=["fp32", "e2m1", "e2m2", "e3m1", "e3m2", "e4m3"],
                       modes=("nearest", "stochastic"))
    p = {(r["format"], r["rounding"]): r["p_at_1"] for r in rows}
    # (a) E=2 below E=3 at equal mantissa width, both rounding modes
    for mode in ("nearest", "stochastic"):
        assert p[("e2m1", mode)] < p[("e3m1", mode)]
        assert p[("e2m2", mode)] < p[("e3m2", mode)]
    # (b) SR strictly beats RTN at M <= 2
    for fmt in ("e2m1", "e2m2", "e3m1", "e3m2"):
        assert p[(fmt, "stochastic")] > p[(fmt, "nearest")]
    # (c) e4m3+SR within 2 absolute P@1 points of fp32
    gap = p[("fp32", "nearest")] - p[("e4m3", "stochastic")]
    assert gap <= 0.02
    _report(8, "quantization-sweep ordering",
            f"E2<E3 at equal M; SR>RTN at M≤2; fp32−e4m3SR gap {gap:+.3f} ≤ 0.02", t0)


def test_acceptance_09_learnability():
    t0 = time.monotonic()
    ds = generate_synthetic(EASY_SPEC)
    assert EASY_CFG.epochs <= 30
    fp32 = train(ds, EASY_CFG)
    p1_fp32 = fp32.history[-1]["p_at_1"]
    assert p1_fp32 >= 0.95
    cfg8 = TrainConfig(**{**EASY_CFG.__dict__, "head_format": "e4m3",
                          "head_rounding": "stochastic"})
    low = train(ds, cfg8)
    p1_low = low.history[-1]["p_at_1"]
    assert p1_low >= 0.90
    _report(9, "learnability",
            f"{EASY_CFG.epochs} epochs: fp32 P@1={p1_fp32:.3f} (≥0.95), "
            f"e4m3+SR P@1={p1_low:.3f} (≥0.90)", t0)


def test_acceptance_10_metric_oracle():
    t0 = time.monotonic()

    def brute_top_k(scores, k):
        return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]

    rng = np.random.default_rng(0)
    for _ in range(1000):
        L = int(rng.integers(3, 30))
        k = int(rng.integers(1, min(L, 6)))
        scores = rng.normal(size=L)
        if rng.random() < 0.3:
            scores = np.round(scores, 1)  # force ties
        truth = set(rng.choice(L, size=int(rng.integers(1, 4)), replace=False).tolist())
        props = rng.uniform(0.05, 1.0, size=L)
        top = brute_top_k(scores, k)
        assert precision_at_k(scores, truth, k) == sum(
            1 for i in top if i in truth) / k
        assert psp_at_k(scores, truth, PropensityModel(props), k) == pytest.approx(
            sum(1 / props[i] for i in top if i in truth) / k, rel=1e-12)
        uniform = PropensityModel.uniform(L)
        assert psp_at_k(scores, truth, uniform, k) == pytest.approx(
            precision_at_k(scores, truth, k))
    _report(10, "metric oracle",
            "P@k / PSP@k equal brute force on 1000 instances; "
            "PSP=P under unit propensities", t0)


def test_acceptance_11_memory_discipline():
    t0 = time.monotonic()
    ds = generate_synthetic(EASY_SPEC)
    base = dict(hidden=32, embed_dim=16, head_format="e4m3",
                head_rounding="stochastic", head_lr=0.1, encoder_lr=1e-3,
                epochs=1, batch_size=32, seed=5)
    peaks = {}
    for k in (1, 8):
        tracker = AllocationTracker()
        cfg = TrainConfig(**base, chunks=k)
        train(ds, cfg, tracker=tracker)
        if k == 8:
            chunk_labels = -(-ds.num_labels // k)
            limit = chunk_labels * cfg.embed_dim * 2
            assert tracker.max_allocation("classifier_grad") < limit
            # the only weight-side scratch is the fixed fused block
            assert tracker.max_allocation("scratch") <= 64 * 64 * 4
        peaks[k] = tracker.peak_bytes("logits")
    ratio = peaks[1] / peaks[8]
    assert ratio == pytest.approx(8, rel=0.01)
    _report(11, "memory discipline",
            f"no classifier-gradient allocation ≥ chunk×m×2 during training; "
            f"logit scratch peak ratio k=1:k=8 = {ratio:.2f} (≈8)", t0)
