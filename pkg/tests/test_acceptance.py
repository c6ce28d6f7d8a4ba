"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed with output
capture disabled) or directly with ``python3 tests/test_acceptance.py``.
"""

import itertools
import time

import numpy as np
import pytest

from bcqtune import bcq, qfile
from bcqtune import toymodel as tm
from bcqtune.alphatune import TrainConfig, evaluate, train
from bcqtune.bcq import ROW, QuantConfig
from bcqtune.gradcheck import check_layer, check_model_alphas
from bcqtune.qlinear import QuantLinear
from bcqtune.tasks import make_reversal, reversal_vocab

H = 1024

# Printed storage table (MB) for h=1024: (layer, g) -> values at q = 1, 2, 3.
TABLE1 = {
    ("att_qkv", H): (0.41, 0.81, 1.22),
    ("att_output", H): (0.14, 0.27, 0.41),
    ("ffn_h_4h", H): (0.54, 1.08, 1.62),
    ("ffn_4h_h", 4 * H): (0.52, 1.06, 1.56),
    ("ffn_4h_h", H): (0.54, 1.08, 1.62),
    ("ffn_4h_h", H // 2): (0.56, 1.11, 1.67),
}


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail, start):
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\n[criterion {n}] {status}  {title}: {detail} ({time.perf_counter() - start:.2f} s)")
        return ok
    return emit


# -- 1 -------------------------------------------------------------------------------------------

def test_criterion_1_storage_table(report):
    start = time.perf_counter()
    misses = []
    worst = 0.0
    for (name, g), printed in TABLE1.items():
        for q, expected in zip((1, 2, 3), printed):
            h_out, h_in = tm.layer_shapes(H)[name]
            got = qfile.layer_size(name, h_out, h_in, q, g).total_mb
            worst = max(worst, abs(got - expected))
            if abs(got - expected) > 0.01 + 1e-12:
                misses.append(f"{name} g={g} q={q}: {got:.4f} vs {expected}")
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 1.0
    detail = f"18 cells, worst |diff| {worst:.4f} MB" + (f"; off by > 0.01: {'; '.join(misses)}" if misses else "")
    assert report(1, "storage table at h=1024 within 0.01 MB", ok, detail, start), detail


# -- 2 -------------------------------------------------------------------------------------------

def test_criterion_2_trainable_counts(report):
    start = time.perf_counter()
    cases = [
        ("medium row-wise alpha_1", H, 24, ROW, (1,), 221_184),
        ("large row-wise alpha_1", 1280, 36, ROW, (1,), 414_720),
        ("medium g=1024 alpha_1", H, 24, 1024, (1,), 294_912),
        ("medium row-wise all planes", H, 24, ROW, (1, 2, 3), 663_552),
    ]
    got = {label: tm.count_trainable_geometry(h, n, g, planes) for label, h, n, g, planes, _ in cases}
    bad = [f"{label}: {got[label]} != {want}" for label, *_, want in cases if got[label] != want]
    ok = not bad and time.perf_counter() - start < 1.0
    detail = ", ".join(f"{v:,}" for v in got.values()) + ("; " + "; ".join(bad) if bad else "")
    assert report(2, "trainable parameter counts", ok, detail, start), detail


# -- 3 -------------------------------------------------------------------------------------------

def exhaustive_onebit_mse(w):
    g = len(w)
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=g)))
    alphas = signs @ w / g
    errs = np.mean((w[None, :] - alphas[:, None] * signs) ** 2, axis=1)
    return errs.min()


def test_criterion_3_onebit_optimality(report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        g = int(rng.integers(1, 13))
        w = rng.standard_normal(g) * rng.uniform(0.1, 10)
        alpha, b = bcq.quantize_group_onebit(w)
        ours = np.mean((w - alpha * b) ** 2)
        worst = max(worst, ours - exhaustive_onebit_mse(w))
    ok = worst <= 1e-12 and time.perf_counter() - start < 10
    assert report(3, "one-bit closed form vs exhaustive search", ok,
                  f"200 groups, max MSE excess {worst:.2e}", start), worst


# -- 4 -------------------------------------------------------------------------------------------

def test_criterion_4_greedy_alternating_ordering(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    violations = []
    margins = []
    for trial in range(100):
        w = rng.standard_normal((16, 16))
        greedy = [bcq.mse(bcq.dequantize(bcq.quantize_greedy(w, QuantConfig(q=q))), w) for q in (1, 2, 3)]
        if not greedy[0] >= greedy[1] >= greedy[2]:
            violations.append(f"trial {trial}: greedy not monotone in q {greedy}")
        for q in (2, 3):
            history = []
            alt = bcq.refine_alternating(bcq.quantize_greedy(w, QuantConfig(q=q)), w, 15, history)
            alt_mse = bcq.mse(bcq.dequantize(alt), w)
            margins.append(greedy[q - 1] - alt_mse)
            if alt_mse > greedy[q - 1]:
                violations.append(f"trial {trial} q={q}: alternating {alt_mse} > greedy {greedy[q - 1]}")
            if np.any(np.diff(history) > 0):
                violations.append(f"trial {trial} q={q}: alternating MSE increased during iterations")
    ok = not violations and time.perf_counter() - start < 30
    detail = (f"100 matrices x q in {{2,3}}, mean alternating gain {np.mean(margins):.4f}"
              + ("; " + "; ".join(violations[:3]) if violations else ""))
    assert report(4, "greedy/alternating MSE ordering", ok, detail, start), detail


# -- 5 -------------------------------------------------------------------------------------------

def test_criterion_5_gradient_exactness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    layer_worst = 0.0
    for trial in range(50):
        h_out = int(rng.integers(1, 17))
        h_in = 2 * int(rng.integers(1, 9))
        q = int(rng.integers(1, 4))
        g = ROW if trial % 2 == 0 else h_in // 2
        w = rng.standard_normal((h_out, h_in))
        layer = QuantLinear(bcq.quantize(w, QuantConfig(q=q, g=g)), rng.standard_normal(h_out))
        probes = check_layer(layer, rng)
        layer_worst = max(layer_worst, max(p.rel_error for p in probes))

    cfg = tm.ModelConfig(vocab=13, h=8, n_layers=2, n_ctx=8)
    model = tm.quantize_model(tm.init_dense(cfg, 5), QuantConfig(q=3, g=4), trainable_planes=(1, 2, 3))
    tokens = rng.integers(0, 13, size=(2, 7))
    targets = rng.integers(0, 13, size=(2, 7))
    model_probes = check_model_alphas(model, tokens, targets, rng)
    model_worst = max(p.rel_error for p in model_probes)
    ok = layer_worst < 1e-5 and model_worst < 1e-4 and time.perf_counter() - start < 120
    detail = (f"50 layers worst rel err {layer_worst:.2e} (tol 1e-5); "
              f"toy model {len(model_probes)} alphas worst {model_worst:.2e} (tol 1e-4)")
    assert report(5, "analytic gradients vs central differences", ok, detail, start), detail


# -- 6 -------------------------------------------------------------------------------------------

def test_criterion_6_kernel_equivalence(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    lut_worst = dense_worst = 0.0
    for trial in range(100):
        mu = (4, 8)[trial % 2]
        h_in = 8 * int(rng.integers(1, 13))
        h_out = int(rng.integers(1, 17))
        q = int(rng.integers(1, 4))
        g = ROW if trial % 3 else 8
        layer = QuantLinear(bcq.quantize(rng.standard_normal((h_out, h_in)), QuantConfig(q=q, g=g)),
                            rng.standard_normal(h_out))
        x = rng.standard_normal((int(rng.integers(1, 5)), h_in)) * 10 ** rng.uniform(-2, 2)
        ref = layer.forward(x)
        scale = np.abs(ref).max()
        lut_worst = max(lut_worst, np.abs(layer.forward_lut(x, mu) - ref).max() / scale)
        dense = x @ bcq.dequantize(layer.weights).T + layer.bias
        dense_worst = max(dense_worst, np.abs(ref - dense).max() / scale)
    ok = lut_worst <= 1e-9 and dense_worst <= 1e-10 and time.perf_counter() - start < 30
    detail = f"100 cases, LUT rel diff {lut_worst:.1e} (tol 1e-9), dense oracle {dense_worst:.1e} (tol 1e-10)"
    assert report(6, "LUT and factored kernels vs dense oracle", ok, detail, start), detail


# -- 7 -------------------------------------------------------------------------------------------

EFFICACY = dict(h=32, n_layers=2, k=6, n_train=2000, n_valid=500, lr=1e-2, epochs=5, batch_size=16)


def efficacy_run(seed=0):
    e = EFFICACY
    cfg = tm.ModelConfig(vocab=reversal_vocab(), h=e["h"], n_layers=e["n_layers"], n_ctx=2 * e["k"])
    base = tm.quantize_model(tm.init_dense(cfg, seed), QuantConfig(q=3))
    train_data = make_reversal(e["n_train"], k=e["k"], seed=seed + 1)
    valid_data = make_reversal(e["n_valid"], k=e["k"], seed=seed + 2)
    before = evaluate(base, valid_data)
    tuned, _ = train(base.copy(), train_data,
                     TrainConfig(lr=e["lr"], epochs=e["epochs"], batch_size=e["batch_size"], seed=seed))
    return before, evaluate(tuned, valid_data), tuned


def test_criterion_7_alpha_tuning_efficacy(report):
    start = time.perf_counter()
    (loss0, acc0), (loss1, acc1), tuned = efficacy_run()
    _, _, again = efficacy_run()
    same = all(np.array_equal(a, b) for (_, _, a), (_, _, b) in zip(tuned.trainable_slots(), again.trainable_slots()))
    gain = 100 * (acc1 - acc0)
    ok = loss1 < loss0 and gain >= 20 and same and time.perf_counter() - start < 300
    detail = (f"valid loss {loss0:.3f} -> {loss1:.3f}, token acc {100 * acc0:.1f}% -> {100 * acc1:.1f}% "
              f"(+{gain:.1f} pp), rerun identical: {same}")
    assert report(7, "alpha_1-only training beats the untrained quantized model", ok, detail, start), detail


# -- 8 -------------------------------------------------------------------------------------------

def test_criterion_8_deployment_shape(report, tmp_path):
    start = time.perf_counter()
    base = qfile.model_file_size(qfile.GPT2_MEDIUM, 3, ROW)
    ckpt = qfile.checkpoint_file_size(qfile.GPT2_MEDIUM, ROW, (1,))
    medium_ok = base + 3 * ckpt < 3 * base and ckpt <= 0.003 * base

    cfg = tm.ModelConfig(vocab=reversal_vocab(), h=32, n_layers=2, n_ctx=12)
    model = tm.quantize_model(tm.init_dense(cfg, 8), QuantConfig(q=3))
    qfile.save_model(tmp_path / "base.bcq", model)
    base_model = qfile.load_model(tmp_path / "base.bcq")
    toy_ckpts = 0
    for task in range(3):
        tuned, _ = train(base_model.copy(), make_reversal(32, seed=task), TrainConfig(lr=1e-2, epochs=1, seed=task))
        qfile.save_checkpoint(tmp_path / f"task{task}.ckpt", tuned)
        toy_ckpts += (tmp_path / f"task{task}.ckpt").stat().st_size
        qfile.save_model(tmp_path / f"full{task}.bcq", tuned)
    toy_base = (tmp_path / "base.bcq").stat().st_size
    toy_full = sum((tmp_path / f"full{t}.bcq").stat().st_size for t in range(3))
    toy_ok = toy_base + toy_ckpts < toy_full and toy_base == qfile.model_file_size(cfg, 3, ROW)
    ok = medium_ok and toy_ok and time.perf_counter() - start < 60
    detail = (f"medium: base {base / qfile.MB:.1f} MB + 3 x {ckpt / qfile.MB:.2f} MB < 3 x base; "
              f"checkpoint {100 * ckpt / base:.3f}% of base (limit 0.3%); "
              f"toy files: {toy_base + toy_ckpts:,} B vs {toy_full:,} B")
    assert report(8, "one base plus task checkpoints beats separate models", ok, detail, start), detail


# -- 9 -------------------------------------------------------------------------------------------

def test_criterion_9_freeze_and_determinism(report, tmp_path):
    start = time.perf_counter()
    cfg = tm.ModelConfig(vocab=reversal_vocab(), h=16, n_layers=2, n_ctx=12)
    dense = tm.init_dense(cfg, 9)
    qfile.save_dense(tmp_path / "dense.bin", dense)
    qfile.save_model(tmp_path / "base.bcq", tm.quantize_model(dense, QuantConfig(q=3)))
    base = qfile.load_model(tmp_path / "base.bcq")
    data = make_reversal(64, seed=9)

    frozen_before = tm.frozen_digest(base)
    blobs = []
    frozen_ok = True
    for _ in range(2):
        tuned, _ = train(base.copy(), data, TrainConfig(lr=1e-2, epochs=2, seed=3))
        frozen_ok &= tm.frozen_digest(tuned) == frozen_before
        blobs.append(qfile.serialize_checkpoint(tuned))
    ckpt_ok = blobs[0] == blobs[1]

    qfile.save_model(tmp_path / "again.bcq", base)
    qfile.save_dense(tmp_path / "dense2.bin", qfile.load_dense(tmp_path / "dense.bin"))
    (tmp_path / "t.ckpt").write_bytes(blobs[0])
    qfile.save_checkpoint(tmp_path / "t2.ckpt", qfile.apply_checkpoint(base.copy(), tmp_path / "t.ckpt"))
    roundtrip_ok = ((tmp_path / "again.bcq").read_bytes() == (tmp_path / "base.bcq").read_bytes()
                    and (tmp_path / "dense2.bin").read_bytes() == (tmp_path / "dense.bin").read_bytes()
                    and (tmp_path / "t2.ckpt").read_bytes() == blobs[0])
    ok = frozen_ok and ckpt_ok and roundtrip_ok and time.perf_counter() - start < 60
    detail = (f"frozen hash unchanged: {frozen_ok}; same-seed checkpoints identical: {ckpt_ok}; "
              f"model/dense/checkpoint round trips byte-identical: {roundtrip_ok}")
    assert report(9, "freeze contract and determinism", ok, detail, start), detail


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
