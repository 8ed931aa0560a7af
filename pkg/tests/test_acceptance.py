"""Acceptance suite: one verdict line per criterion, tolerances pinned.

Criterion 7 trains and cross-validates three models on the default
200-clip synthetic dataset with the desk profile; it dominates the runtime.
"""

import hashlib
import itertools
import math
import time

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import check_layer
from lanerisk.architectures import ModelSpec
from lanerisk.cli import DESK_PROFILE, main
from lanerisk.datapipe import (
    DEFAULT_ALPHA,
    AnnotationSet,
    Clip,
    Dataset,
    SegmentationRecord,
    build_labels,
    overlay_clip,
    overlay_masks,
    subsample_indices,
)
from lanerisk.evaluation import auc, cross_validate
from lanerisk.layers import Conv2D, Dense, Dropout, MaxPool2D
from lanerisk.lstm import GATES, LSTMCell, lstm_step
from lanerisk.synthgen import SceneParams, generate, render_clip
from lanerisk.training import TrainConfig, train
from toys import dense_softmax, separable_samples

FD_TOL = 1e-4
FD_INSTANCES = 20
GOLDEN_OVERLAY_SHA256 = "ae5ab62c3af30fcbda1ccb6e07dcd58ef6045734ebeaa09cad917c81e75b96e1"


# -- 1 ------------------------------------------------------------------------


def _conv_case(rng):
    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = str(rng.choice(["same", "valid"]))
    layer = Conv2D(int(rng.integers(1, 4)), int(rng.integers(1, 4)), k, stride, padding, rng=rng)
    layer.params["b"][:] = rng.normal(size=layer.params["b"].shape)
    x = rng.normal(size=(2, int(rng.integers(k, 7)), int(rng.integers(k, 7)), layer.in_channels))
    return layer, x, False


def _dense_case(rng):
    act = str(rng.choice(["sigmoid", "tanh", "linear", "softmax"]))
    layer = Dense(int(rng.integers(1, 6)), int(rng.integers(1, 6)), act, rng=rng)
    layer.params["b"][:] = rng.normal(size=layer.params["b"].shape)
    return layer, rng.normal(size=(3, layer.params["W"].shape[0])), False


def _dropout_case(rng):
    return Dropout(0.0, rng=rng), rng.normal(size=(3, int(rng.integers(1, 8)))), True


def _pool_case(rng):
    h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    return MaxPool2D(), rng.normal(size=(2, h, w, int(rng.integers(1, 4)))), False


def _lstm_case(rng):
    q = int(rng.integers(1, 11))
    d, h = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cell = LSTMCell(d, h, q=q, rng=rng)
    for gate in GATES:
        cell.params[f"{gate}.b"][:] = rng.normal(size=h)
    return cell, rng.normal(size=(2, q, d)), False


def test_criterion_1_gradients():
    cases = {"Conv2D": _conv_case, "Dense": _dense_case, "Dropout(p=0)": _dropout_case,
             "MaxPool": _pool_case, "LSTM": _lstm_case}
    start = time.perf_counter()
    worst = {}
    for name, make in cases.items():
        worst[name] = 0.0
        for seed in range(FD_INSTANCES):
            rng = np.random.default_rng([1, seed])
            layer, x, training = make(rng)
            errs = check_layer(layer, x, rng, training=training)
            if name == "LSTM":
                assert len(errs) == 13  # input plus all 12 parameter tensors
            worst[name] = max(worst[name], max(errs.values()))
    elapsed = time.perf_counter() - start
    ok = all(v < FD_TOL for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("1", ok, f"max rel err over {FD_INSTANCES} instances each: {detail}; {elapsed:.1f}s (< 60s)")
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_lstm_analytic_cases():
    cell = LSTMCell(4, 3)
    h, c, gates = cell.step(np.random.default_rng(0).normal(size=(1, 4)), np.zeros((1, 3)), np.zeros((1, 3)))
    zero_ok = not h.any() and not c.any() and all(np.all(g == 0.5) for g in gates[:3])

    cell = LSTMCell(1, 1)
    for gate in GATES:
        cell.params[f"{gate}.W"][:] = 1.0
        cell.params[f"{gate}.U"][:] = 1.0
    h1, c1 = lstm_step(cell, [1.0], [0.0], [1.0])
    s = 1.0 / (1.0 + math.exp(-1.0))
    want_c = s + s * math.tanh(1.0)
    want_h = s * math.tanh(want_c)
    scalar_ok = abs(c1[0] - want_c) <= 1e-6 and abs(h1[0] - want_h) <= 1e-6
    ok = zero_ok and scalar_ok
    record("2", ok, f"zero case exact; scalar case c={c1[0]:.6f} h={h1[0]:.6f} "
           f"(hand evaluation {want_c:.6f}, {want_h:.6f}; tol 1e-6)")
    assert ok


# -- 3 ------------------------------------------------------------------------


def _pair_count(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    hits = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return hits / (len(pos) * len(neg))


def test_criterion_3_auc_oracle():
    rng = np.random.default_rng(3)
    worst, invariant = 0.0, True
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, int(rng.integers(2, 40)), size=n) / 7.0
        a = auc(scores, labels)
        worst = max(worst, abs(a - _pair_count(scores.tolist(), labels.tolist())))
        for f in (np.exp, lambda v: 5 * v + 1, np.tanh, lambda v: v**3):
            invariant &= auc(f(scores), labels) == a
    ok = worst <= 1e-12 and invariant
    record("3", ok, f"max |AUC - pair count| {worst:.1e} (<= 1e-12) on 100 tied instances; "
           f"monotone invariance exact: {invariant}")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_labels():
    rng = np.random.default_rng(4)
    ids = [f"c{i:04d}" for i in range(860)]
    sim = generate_ratings(rng, 10, 860)
    labels = build_labels(AnnotationSet(ids, [f"a{i}" for i in range(10)], sim))
    n_pos = int(labels.is_risky.sum())

    base = rng.integers(1, 6, size=200).astype(float)
    ids2 = [f"c{i:03d}" for i in range(200)]
    a = build_labels(AnnotationSet(ids2, ["x"], base[None]))
    b = build_labels(AnnotationSet(ids2, ["y"], (3.0 * base - 2.0)[None]))
    rank = lambda lab: sorted(range(200), key=lambda j: (-round(lab.scores[j], 9), j))
    same = rank(a) == rank(b) and np.array_equal(a.is_risky, b.is_risky)
    ok = n_pos == 43 and same
    record("4", ok, f"860 clips -> {n_pos} positives / {860 - n_pos} negatives (want 43/817); "
           f"affine annotators rank identically: {same}")
    assert ok


def generate_ratings(rng, n_ann, n):
    latent = rng.uniform(0, 1, size=n)
    bias = rng.uniform(-0.5, 0.5, size=(n_ann, 1))
    scale = rng.uniform(0.5, 1.5, size=(n_ann, 1))
    raw = 1 + 4 * (scale * latent + bias + rng.normal(0, 0.1, size=(n_ann, n)))
    return np.clip(np.floor(raw + 0.5), 1, 5)


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_subsampling():
    example = subsample_indices(300, 5)
    sweep_ok = all(
        (idx := subsample_indices(n, t))[0] == 0 and idx[-1] == n - 1
        for n in range(2, 400, 3)
        for t in range(2, min(n, 120) + 1, 3)
    )
    ok = example == [0, 75, 150, 224, 299] and sweep_ok
    record("5", ok, f"N=300 T=5 -> {example}; endpoints kept across the (N, T) sweep: {sweep_ok}")
    assert ok


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_compositing():
    frame = np.full((2, 2, 3), 100, dtype=np.uint8)
    px = overlay_masks(frame, [SegmentationRecord(0, "car", (0, 0, 1, 1))])[0, 0].tolist()
    params = SceneParams(n_clips=1, seed=7)
    digests = set()
    for _ in range(2):
        frames, records, _ = render_clip(params, 0, "closing")
        out = overlay_clip(Clip("golden", frames, records=records))[30]
        digests.add(hashlib.sha256(out.tobytes()).hexdigest())
    golden_ok = digests == {GOLDEN_OVERLAY_SHA256}
    ok = px == [30, 209, 209] and DEFAULT_ALPHA == 0.7 and golden_ok
    record("6", ok, f"(100,100,100)+cyan -> {tuple(px)}; default alpha {DEFAULT_ALPHA}; "
           f"golden frame digest stable: {golden_ok}")
    assert ok


# -- 7 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_comparison(tmp_path_factory):
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("desk") / "ds"
    generate(SceneParams(), root)
    ds = Dataset(root)
    res = (DESK_PROFILE["resolution"],) * 2
    cfg = TrainConfig(
        batch_size=DESK_PROFILE["batch"], epochs=DESK_PROFILE["epochs"], lr=DESK_PROFILE["lr"],
        decay=DESK_PROFILE["decay"], match_steps=DESK_PROFILE["match_steps"], seed=0,
    )
    rows = {}
    for key, spec in {
        "lstm_raw": ModelSpec("cnn-lstm", "raw", 10, res),
        "lstm_masked": ModelSpec("cnn-lstm", "masked", 10, res),
        "fbf": ModelSpec("fbf-cnn", "raw", 1, res),
    }.items():
        rows[key] = cross_validate(spec, ds, k=10, t_sweep=(10,), config=cfg)
    return rows, time.perf_counter() - start


def test_criterion_7a_cnn_lstm_auc(desk_comparison):
    rows, _ = desk_comparison
    a = rows["lstm_raw"].auc
    record("7a", a >= 0.85, f"CNN+LSTM 10-fold mean AUC {a:.3f} (>= 0.85)")
    assert a >= 0.85


def test_criterion_7b_lstm_beats_fbf(desk_comparison):
    rows, _ = desk_comparison
    a, f = rows["lstm_raw"].auc, rows["fbf"].auc
    frame = np.mean([r.frame_auc for r in rows["fbf"].folds])
    ok = a - f >= 0.05
    record("7b", ok, f"CNN+LSTM {a:.3f} - FbF CNN {f:.3f} = {a - f:+.3f} (>= 0.05); "
           f"FbF per-frame AUC {frame:.3f}")
    assert ok


def test_criterion_7c_masked_not_worse(desk_comparison):
    rows, _ = desk_comparison
    m, a = rows["lstm_masked"].auc, rows["lstm_raw"].auc
    ok = m >= a - 0.02
    record("7c", ok, f"SMT+CNN+LSTM {m:.3f} vs CNN+LSTM {a:.3f} (masked >= raw - 0.02)")
    assert ok


def test_criterion_7_runtime(desk_comparison):
    _, elapsed = desk_comparison
    ok = elapsed <= 30 * 60
    record("7t", ok, f"desk comparison wall time {elapsed / 60:.1f} min on this machine (<= 30 min)")
    assert ok


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_crossval_determinism(tmp_path):
    ds = tmp_path / "ds"
    assert main(["synth", "--out", str(ds), "--n-clips", "40", "--size", "16", "--frames", "8",
                 "--seed", "8"]) == 0
    args = ["crossval", "--dataset", str(ds), "--desk", "--k", "2", "--epochs", "2",
            "--t-sweep", "3,5", "--resolution", "8", "--arch", "cnn-lstm,fbf-cnn", "--seed", "13"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.csv").read_bytes()
    b = (tmp_path / "b" / "report.csv").read_bytes()
    ok = a == b
    record("8", ok, f"two seeded crossval runs give byte-identical report.csv: {ok}")
    assert ok


# -- 9 ------------------------------------------------------------------------


def test_criterion_9_training_sanity():
    samples = separable_samples(n=40, seed=9)
    model = dense_softmax(seed=9)
    cfg = TrainConfig(epochs=200, lr=1e-4 * 10, seed=9)
    _, hist = train(model, samples, cfg)
    window = 20
    avgs = [float(np.mean(hist.train_loss[i : i + window])) for i in range(0, 200, window)]
    monotone = all(b < a for a, b in zip(avgs, avgs[1:]))
    val_acc = hist.records[-1].val_accuracy
    ok = monotone and val_acc == 1.0
    record("9", ok, f"{window}-epoch window means of train loss strictly falling: {monotone} "
           f"({avgs[0]:.3f} -> {avgs[-1]:.3f}); final val accuracy {val_acc}")
    assert ok
