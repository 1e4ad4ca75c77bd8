"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, printed in the terminal summary.

Criteria 1, 2, 6, 7 and 8 need the MNIST files and run the full pipeline twice
through the CLI (roughly half an hour on one CPU core). Set CNNINTE_ACCEPT_RUNS
to a directory holding finished runs `a/` and `b/` to reuse them.
"""
import math
import os
import struct
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cnninte import cli, cnn, interpret, nn, store
from cnninte import forest as F
from cnninte.clustering import kmeans
from cnninte.dataset import images_to_idx, labels_to_idx, parse_idx_images, parse_idx_labels
from cnninte.errors import DataError
from cnninte.meta import build_meta_train, meta_predict

import fig5
from conftest import ACCEPTANCE_LINES, mnist_dir
from gradcheck import RTOL, numeric_grad, rel_error, separated_values
from oracles import best_depth2_accuracy, best_partition_inertia, survivors


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _metric(text, key):
    for line in reversed(text.splitlines()):
        for part in line.split():
            k, _, v = part.partition("=")
            if k == key:
                return float(v)
    raise KeyError(key)


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """Two full pipeline runs with seed 0; returns their output directories."""
    if mnist_dir() is None:
        pytest.skip("MNIST files not available")
    reuse = os.environ.get("CNNINTE_ACCEPT_RUNS")
    if reuse:
        return [Path(reuse) / "a", Path(reuse) / "b"]
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"full_{name}")
        assert cli.main(["pipeline", "--data-dir", str(mnist_dir()), "--out", str(out), "--seed", "0"]) == 0
        outs.append(out)
    return outs


@pytest.fixture(scope="session")
def full_artifacts(full_runs):
    a = full_runs[0]
    ens = store.load_ensemble(a / "ensemble")
    meta_test = store.load_meta((a / "ensemble" / "meta_test.bin").read_bytes())
    act = store.load_activations((a / "activations.bin").read_bytes())
    return ens, meta_test, act


# --- 1 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_1_cnn_accuracy(full_runs, mnist):
    full = _metric((full_runs[0] / "metrics.txt").read_text(), "cnn_test_accuracy")
    train, test = mnist
    t0 = time.perf_counter()
    model = cnn.train(replace(cnn.CnnConfig(), steps=400), train.head(10_000))
    reduced = cnn.evaluate(model, test)
    elapsed = time.perf_counter() - t0
    ok = full >= 0.90 and reduced >= 0.85 and elapsed < 300
    record(1, ok, f"full={full:.4f} (>=0.90)  reduced={reduced:.4f} (>=0.85) in {elapsed:.0f}s (<300s)")


# --- 2 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_2_meta_fidelity(full_runs):
    text = (full_runs[0] / "metrics.txt").read_text()
    c, m = _metric(text, "cnn_test_accuracy"), _metric(text, "meta_test_accuracy")
    record(2, abs(m - c) <= 0.03, f"cnn={c:.4f} meta={m:.4f} gap={abs(m - c):.4f} (<=0.03)")


# --- 3 ----------------------------------------------------------------------------

def test_criterion_3_fig5_oracle():
    fm, acts = fig5.fixture()
    got = build_meta_train(fm, acts, fig5.LABELS).features.T.tolist()
    record(3, got == fig5.EXPECTED, f"rows per factor {got}")


# --- 4 ----------------------------------------------------------------------------

def _layer_errors(seed):
    rng = np.random.default_rng(1000 + seed)
    errs = {}
    n, h, w = rng.integers(1, 3), rng.integers(2, 6), rng.integers(2, 6)
    cin, cout, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
    x = rng.normal(size=(n, h, w, cin))
    p = nn.LayerParams(rng.normal(size=(k, k, cin, cout)), rng.normal(size=cout))
    up = rng.normal(size=(n, h, w, cout))
    gx, gw, gb = nn.conv2d_backward(up, x, p)
    errs["conv_x"] = rel_error(gx, numeric_grad(lambda v: np.sum(nn.conv2d_forward(v, p) * up), x))
    errs["conv_w"] = rel_error(gw, numeric_grad(
        lambda v: np.sum(nn.conv2d_forward(x, nn.LayerParams(v, p.biases)) * up), p.weights.copy()))
    errs["conv_b"] = rel_error(gb, numeric_grad(
        lambda v: np.sum(nn.conv2d_forward(x, nn.LayerParams(p.weights, v)) * up), p.biases.copy()))

    xp = separated_values(rng, (n, 2 * h, 2 * w, cin))
    out, arg = nn.maxpool_forward(xp)
    upp = rng.normal(size=out.shape)
    errs["pool"] = rel_error(nn.maxpool_backward(upp, arg),
                             numeric_grad(lambda v: np.sum(nn.maxpool_forward(v)[0] * upp), xp))

    a, b = rng.integers(1, 5), rng.integers(1, 7)
    xf = rng.normal(size=(n, a))
    pf = nn.LayerParams(rng.normal(size=(a, b)), rng.normal(size=b))
    upf = rng.normal(size=(n, b))
    fx, fw, fb = nn.fc_backward(upf, xf, pf)
    errs["fc_x"] = rel_error(fx, numeric_grad(lambda v: np.sum(nn.fc_forward(v, pf) * upf), xf))
    errs["fc_w"] = rel_error(fw, numeric_grad(
        lambda v: np.sum(nn.fc_forward(xf, nn.LayerParams(v, pf.biases)) * upf), pf.weights.copy()))
    errs["fc_b"] = rel_error(fb, numeric_grad(
        lambda v: np.sum(nn.fc_forward(xf, nn.LayerParams(pf.weights, v)) * upf), pf.biases.copy()))

    xr = separated_values(rng, (n, a, b))
    upr = rng.normal(size=xr.shape)
    errs["relu"] = rel_error(nn.relu_backward(upr, xr), numeric_grad(lambda v: np.sum(nn.relu(v) * upr), xr))

    mask = nn.DropoutMask.create((n, b), 0.5, seed=seed)
    xd = rng.normal(size=(n, b))
    upd = rng.normal(size=(n, b))
    errs["dropout"] = rel_error(upd * mask.mask, numeric_grad(
        lambda v: np.sum(nn.dropout_apply(v, mask, training=True) * upd), xd))

    logits = rng.normal(scale=2, size=(n + 2, 10))
    labels = rng.integers(0, 10, n + 2)
    errs["softmax_ce"] = rel_error(nn.softmax_cross_entropy(logits, labels)[1],
                                   numeric_grad(lambda v: nn.softmax_cross_entropy(v, labels)[0], logits))
    return errs


def test_criterion_4_gradient_suite():
    worst = {}
    for seed in range(50):
        for name, e in _layer_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    top = max(worst.values())
    record(4, top < RTOL, f"50 seeds, max relative error {top:.2e} (<1e-4); worst per layer "
           + " ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items())))


# --- 5 ----------------------------------------------------------------------------

def test_criterion_5_clustering():
    monotone = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(int(rng.integers(20, 80)), int(rng.integers(1, 6))))
        hist = np.array(kmeans(pts, int(rng.integers(2, 8)), seed=seed).inertia_history)
        monotone += bool(np.all(np.diff(hist) <= 1e-12 * hist[0]))
    agree = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        centres = rng.uniform(-20, 20, size=(3, 2))
        while min(np.linalg.norm(centres[i] - centres[j]) for i in range(3) for j in range(i)) < 8:
            centres = rng.uniform(-20, 20, size=(3, 2))
        pts = np.vstack([c + rng.normal(scale=0.7, size=(4, 2)) for c in centres])
        best, _ = best_partition_inertia(pts, 3)
        agree += math.isclose(kmeans(pts, 3, seed=seed).inertia, best, rel_tol=1e-9, abs_tol=1e-9)
    record(5, monotone == 100 and agree >= 95, f"monotone {monotone}/100, brute-force agreement {agree}/100 (>=95)")


# --- 6 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_tree_forest(full_artifacts):
    ens, _, _ = full_artifacts
    depth_ok = ens.meta_learner.height() <= 5
    node_counts = [t.n_nodes for rf in ens.base_models for t in rf.trees]
    nodes_ok = max(node_counts) <= 2000
    # caps on random data too
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 10, (400, 8)), rng.integers(0, 10, 400)
        depth_ok &= F.tree_fit(x, y, max_depth=5).height() <= 5
        nodes_ok &= all(t.n_nodes <= 25 for t in F.forest_fit(x, y, n_trees=3, max_nodes=25, seed=seed).trees)
    equal = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 3, (30, 3)), rng.integers(0, 3, 30)
        t = F.tree_fit(x, y, max_depth=2, n_classes=3)
        equal += math.isclose(np.mean(F.tree_predict_batch(t, x) == y), best_depth2_accuracy(x, y, 3))
    th = ens.meta_learner.thresholds()
    half = bool(np.all(th - np.floor(th) == 0.5) and th.min() >= 0.5 and th.max() <= 8.5)
    ok = depth_ok and nodes_ok and equal == 20 and half
    record(6, ok, f"depth cap ok={depth_ok}, node cap ok={nodes_ok} (max forest tree {max(node_counts)} nodes), "
           f"depth-2 exhaustive equality {equal}/20, half-integer thresholds={half} {sorted(set(th.tolist()))}")


# --- 7 ----------------------------------------------------------------------------

def _check_trace(tr, meta_train):
    feats, labels = meta_train.features, meta_train.labels
    if len(tr.columns) != 9 or tr.true_class in [c.hypothesis for c in tr.columns]:
        return False
    scans = [np.array(survivors(feats, tr.path, d), dtype=np.int64) for d in range(1, len(tr.path) + 1)]
    for col in tr.columns:
        if not 1 <= len(col.steps) <= 5:
            return False
        prev = None
        for s in col.steps:
            scan = scans[s.depth - 1]
            if not (np.array_equal(s.surviving_true, scan[labels[scan] == tr.true_class])
                    and np.array_equal(s.surviving_hypo, scan[labels[scan] == col.hypothesis])):
                return False
            cur = (set(s.surviving_true.tolist()), set(s.surviving_hypo.tolist()))
            if prev and not (cur[0] <= prev[0] and cur[1] <= prev[1]):
                return False
            prev = cur
        last = col.steps[-1]
        if col.verdict == interpret.SEPARATED:
            if last.n_hypo != 0 or last.n_true == 0 or any(s.n_hypo == 0 for s in col.steps[:-1]):
                return False
        elif not col.true_exhausted and (last.n_hypo == 0 or len(col.steps) != len(tr.path)):
            return False
    return True


@pytest.mark.slow
def test_criterion_7_trace_soundness(full_artifacts):
    ens, meta_test, act = full_artifacts
    rng = np.random.default_rng(7)
    picks = rng.choice(len(meta_test), 100, replace=False)
    sound = sum(_check_trace(interpret.trace(ens, meta_test, ens.meta_train, act, int(i)), ens.meta_train)
                for i in picks)
    pred = meta_predict(ens, meta_test)
    right = rng.choice(np.flatnonzero(pred == meta_test.labels), 20, replace=False)
    wrong = rng.choice(np.flatnonzero(pred != meta_test.labels), 20, replace=False)

    def mean_sep(idx):
        return float(np.mean([interpret.trace(ens, meta_test, ens.meta_train, act, int(i)).separated_count()
                              for i in idx]))

    sep_right, sep_wrong = mean_sep(right), mean_sep(wrong)
    ok = sound == 100 and sep_right > sep_wrong
    record(7, ok, f"sound traces {sound}/100; mean SEPARATED columns: correct {sep_right:.2f} "
           f"vs misclassified {sep_wrong:.2f} (20 each)")


# --- 8 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(full_runs):
    a, b = full_runs
    same_model = (a / "model.bin").read_bytes() == (b / "model.bin").read_bytes()
    ma, mb = (a / "metrics.txt").read_text(), (b / "metrics.txt").read_text()
    same_meta = _metric(ma, "meta_test_accuracy") == _metric(mb, "meta_test_accuracy")
    svgs = sorted(p.name for p in (a / "interp").glob("*.svg"))
    same_svg = bool(svgs) and svgs == sorted(p.name for p in (b / "interp").glob("*.svg")) and all(
        (a / "interp" / s).read_bytes() == (b / "interp" / s).read_bytes() for s in svgs)
    record(8, same_model and same_meta and same_svg,
           f"model bytes equal={same_model}, meta accuracy equal={same_meta}, {len(svgs)} SVGs byte-equal={same_svg}")


# --- 9 ----------------------------------------------------------------------------

def _fuzzed_headers(rng, n=20):
    good = images_to_idx(rng.random((3, 28, 28)).astype(np.float32))
    blobs = []
    for i in range(n):
        kind = i % 5
        b = bytearray(good)
        if kind == 0:  # truncated inside the header
            b = b[:int(rng.integers(0, 16))]
        elif kind == 1:  # corrupt magic
            b[int(rng.integers(0, 4))] ^= int(rng.integers(1, 256))
        elif kind == 2:  # inflated dimension
            struct.pack_into(">I", b, 4 + 4 * int(rng.integers(0, 3)), int(rng.integers(1000, 2**31)))
        elif kind == 3:  # payload cut short
            b = b[:len(b) - int(rng.integers(1, 2000))]
        else:  # trailing garbage
            b += bytes(int(rng.integers(1, 50)))
        blobs.append(bytes(b))
    return blobs


def test_criterion_9_idx_parser():
    rng = np.random.default_rng(9)
    roundtrips = 0
    for _ in range(1000):
        n = int(rng.integers(0, 5))
        raw = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
        imgs = parse_idx_images(images_to_idx(raw.astype(np.float32) / 255))
        labels = rng.integers(0, 10, n)
        roundtrips += bool(np.array_equal(np.round(imgs * 255).astype(np.uint8), raw)
                           and np.array_equal(parse_idx_labels(labels_to_idx(labels)), labels))
    typed = 0
    for blob in _fuzzed_headers(rng):
        try:
            parse_idx_images(blob)
        except DataError:
            typed += 1
        except Exception:
            pass
    record(9, roundtrips == 1000 and typed == 20, f"round-trips {roundtrips}/1000, typed rejections {typed}/20")
