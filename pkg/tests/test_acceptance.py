"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from kpmatch import evalkit, gradsuite, kpm, ops, trainkit
from kpmatch.config import RunConfig
from kpmatch.tensor import Tensor


# ---------------------------------------------------------------- loop oracles

def kron_oracle(x, y):
    c, h, w = x.shape
    out = np.zeros((h, w, h, w))
    for i in range(h):
        for j in range(w):
            for p in range(h):
                for q in range(w):
                    s = 0.0
                    for ch in range(c):
                        s += x[ch, i, j] * y[ch, p, q]
                    out[i, j, p, q] = s
    return out


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv_oracle(x, w, bias, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                s = bias[o]
                for ci in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            s += w[o, ci, a, b] * xp[ci, i * stride + a, j * stride + b]
                out[o, i, j] = s
    return out


def gap_oracle(x):
    c, h, w = x.shape
    out = np.zeros(c)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch] += x[ch, i, j]
    return out / (h * w)


# ---------------------------------------------------------------- criteria 1-5, 7

def test_criterion_1_oracle_equivalence(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"kron": 0.0, "matmul": 0.0, "conv2d": 0.0, "gap": 0.0}
    for _ in range(50):
        c, h, w = rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 7)
        x, y = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
        fast = kpm.kron_similarity(Tensor(x), Tensor(y)).data
        worst["kron"] = max(worst["kron"], np.max(np.abs(fast - kron_oracle(x, y))),
                            np.max(np.abs(fast - kpm.kron_similarity_loops(x, y))))
        a, b = rng.normal(size=(rng.integers(1, 7), c)), rng.normal(size=(c, rng.integers(1, 7)))
        worst["matmul"] = max(worst["matmul"], np.max(np.abs(ops.matmul(Tensor(a), Tensor(b)).data - matmul_oracle(a, b))))
        k = int(rng.choice([1, 3]))  # conv2d takes odd square kernels
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        if h + 2 * pad >= k and w + 2 * pad >= k:
            wt = rng.normal(size=(int(rng.integers(1, 4)), c, k, k))
            bias = rng.normal(size=wt.shape[0])
            got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride=stride, pad=pad).data
            worst["conv2d"] = max(worst["conv2d"], np.max(np.abs(got - conv_oracle(x, wt, bias, stride, pad))))
        worst["gap"] = max(worst["gap"], np.max(np.abs(ops.global_average_pool(Tensor(x)).data - gap_oracle(x))))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(1, "oracle equivalence (max-abs 1e-12, < 10 s)", ok, detail)


def test_criterion_2_matching_invariants(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_row, hull_ok, entropy_ok = 0.0, True, True
    for _ in range(100):
        c, h, w = rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 7)
        x, y = Tensor(rng.normal(size=(c, h, w)) * rng.uniform(0.2, 3)), Tensor(rng.normal(size=(c, h, w)))
        k = kpm.kron_similarity(x, y)
        km = kpm.normalize_matching(k, 0.05)
        rows = km.normalized.data.reshape(h * w, h * w)
        worst_row = max(worst_row, np.max(np.abs(rows.sum(axis=1) - 1.0)))
        hull_ok &= bool((rows >= 0).all())
        warped = kpm.soft_warp(y, km).data.reshape(c, -1)
        yf = y.data.reshape(c, -1)
        # every warped vector lies in the convex hull: equal to rows @ y with stochastic rows, inside the bounding box
        hull_ok &= bool(np.allclose(warped, yf @ rows.T, atol=1e-12))
        hull_ok &= bool((warped >= yf.min(axis=1, keepdims=True) - 1e-12).all()
                        and (warped <= yf.max(axis=1, keepdims=True) + 1e-12).all())
        ents = [kpm.match_entropy(kpm.normalize_matching(k, tau)) for tau in (0.05, 0.5, 1.0)]
        entropy_ok &= all(bool((b >= a - 1e-12).all()) for a, b in zip(ents, ents[1:]))
    elapsed = time.perf_counter() - start
    ok = worst_row <= 1e-9 and hull_ok and entropy_ok and elapsed < 30
    verdict(2, "matching invariants on 100 instances (< 30 s)", ok,
            f"row-sum error {worst_row:.1e}, convex hull {hull_ok}, entropy monotone {entropy_ok}; {elapsed:.1f}s")


def test_criterion_3_permutation_recovery(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    c, h, w = 16, 8, 4  # M = 32
    m = h * w
    exact, worst = True, 0.0
    for _ in range(20):
        while True:
            feats = rng.normal(size=(c, m))
            feats = 2.0 * feats / np.linalg.norm(feats, axis=0)
            gram = feats.T @ feats
            margin = np.min(np.diag(gram) - np.max(gram - np.diag(np.full(m, np.inf)), axis=1))
            if margin > 0.5:
                break
        perm = rng.permutation(m)
        x = feats.reshape(c, h, w)
        y = feats[:, perm].reshape(c, h, w)  # y_j = x_perm[j]
        km = kpm.normalize_matching(kpm.kron_similarity(Tensor(x), Tensor(y)), 0.01)
        rows = km.normalized.data.reshape(m, m)
        exact &= bool(np.array_equal(np.argmax(rows, axis=1), np.argsort(perm)))
        worst = max(worst, np.max(np.abs(x - kpm.soft_warp(Tensor(y), km).data)))
    elapsed = time.perf_counter() - start
    ok = exact and worst <= 1e-3 and elapsed < 10
    verdict(3, "permutation recovery, 20 permutations at M=32, tau 0.01", ok,
            f"argmax exact {exact}, max |X - warp(Y)| {worst:.1e}; {elapsed:.1f}s")


def test_criterion_4_gradient_suite(verdict):
    start = time.perf_counter()
    reports = gradsuite.run_all(seed=0)
    elapsed = time.perf_counter() - start
    failed = [n for n, r in reports.items() if not r.passed]
    worst = max(r.max_rel_error for r in reports.values())
    ok = not failed and elapsed < 120 and reports["pair_loss"].n_checked == gradsuite.PAIR_LOSS_SAMPLES
    verdict(4, "gradient suite at h 1e-4, rel tol 1e-4 (< 2 min)", ok,
            f"{len(reports) - len(failed)}/{len(reports)} suites pass, worst rel error {worst:.1e}"
            f"{', failed ' + ', '.join(failed) if failed else ''}; {elapsed:.1f}s")


def exhaustive_metrics(scores, qids, gids):
    aps, top = [], {1: [], 5: [], 10: []}
    for q in range(len(qids)):
        rel = [g for g in range(len(gids)) if gids[g] == qids[q]]
        if not rel:
            continue
        ranks = sorted(1 + sum(1 for o in range(len(gids))
                               if scores[q, o] > scores[q, g] or (scores[q, o] == scores[q, g] and o < g)) for g in rel)
        aps.append(sum(Fraction(n + 1, r) for n, r in enumerate(ranks)) / len(ranks))
        for k in top:
            top[k].append(int(ranks[0] <= k))
    return float(sum(aps) / len(aps)), {k: float(Fraction(sum(v), len(v))) for k, v in top.items()}


def test_criterion_5_metric_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(20):
        nq, ng = int(rng.integers(1, 11)), int(rng.integers(1, 31))
        qids, gids = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
        gids[rng.integers(0, ng)] = qids[0]  # at least one query is usable
        scores = np.round(rng.uniform(size=(nq, ng)), 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lists = evalkit.rank(scores, qids, gids)
            got = (evalkit.mean_ap(lists), evalkit.cmc(lists, (1, 5, 10)))
        mismatches += got != exhaustive_metrics(scores, qids, gids)
    ap = evalkit.average_precision([1, 0, 1])
    ok = mismatches == 0 and ap == 5 / 6
    verdict(5, "mAP/CMC equal the exhaustive oracle; AP([1,0,1]) = 5/6", ok,
            f"{20 - mismatches}/20 instances exact, AP([1,0,1]) = {ap!r}")


def test_criterion_7_performance(verdict):
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(256, 32, 16)), rng.normal(size=(256, 32, 16))
    t0 = time.perf_counter()
    slow = kpm.kron_similarity_loops(x, y)
    t_loop = time.perf_counter() - t0
    t0 = time.perf_counter()
    fast = kpm.kron_similarity(Tensor(x), Tensor(y)).data
    t_fast = time.perf_counter() - t0
    diff = np.max(np.abs(fast - slow))
    ok = t_loop >= 2 * t_fast and diff <= 1e-12
    verdict(7, "batched kron_similarity >= 2x loop oracle at C=256, 32x16", ok,
            f"speed-up {t_loop / t_fast:.0f}x, max diff {diff:.1e}")


# ---------------------------------------------------------------- training criteria

@pytest.fixture(scope="session")
def synthetic_profile(tmp_path_factory):
    """The desk profile dataset: 200 identities x 8 samples, seed 0."""
    root = tmp_path_factory.mktemp("profile")
    start = time.perf_counter()
    ds = trainkit.synth_dataset(200, 8, seed=0, out=root / "data")
    ds.images()
    return ds, time.perf_counter() - start


DESK = dict(epochs=30, drop_epoch=20)
VARIANTS = {
    "full": {},
    "nowarp": dict(matching="nowarp", attention=False),
    "baseline": dict(matching="none", attention=False, hourglass=False),
}


def test_criterion_6_desk_training(synthetic_profile, tmp_path, verdict):
    ds, synth_time = synthetic_profile
    start = time.perf_counter()
    acc, best = {}, {}
    for name, kw in VARIANTS.items():
        cfg = RunConfig(dataset=str(ds.root), out=str(tmp_path / name), **DESK, **kw)
        result = trainkit.train(cfg, dataset=ds)
        acc[name] = trainkit.heldout_accuracy(result.params, cfg, ds, pairs=600)
        best[name] = max(r["val_accuracy"] for r in result.metrics)
    elapsed = time.perf_counter() - start + synth_time
    parts = {
        "full >= 0.95": acc["full"] >= 0.95,
        "nowarp <= full - 0.05": acc["nowarp"] <= acc["full"] - 0.05,
        "baseline < full": acc["baseline"] < acc["full"],
        "runtime <= 15 min": elapsed <= 15 * 60,
    }
    detail = (", ".join(f"{n} {acc[n]:.3f} (best epoch {best[n]:.3f})" for n in VARIANTS)
              + f"; {elapsed / 60:.1f} min; " + ", ".join(f"{k}: {'yes' if v else 'no'}" for k, v in parts.items()))
    verdict(6, "desk-scale training, 600 held-out pairs after 30 epochs", all(parts.values()), detail)


def test_criterion_8_reproducibility(synthetic_profile, tmp_path, verdict):
    ds, _ = synthetic_profile
    outputs = []
    for run in ("a", "b"):
        cfg = RunConfig(dataset=str(ds.root), out=str(tmp_path / run), epochs=2, steps_per_epoch=5, seed=11)
        result = trainkit.train(cfg, dataset=trainkit.Dataset.load(ds.root))
        outputs.append((result.metrics_path.read_bytes(), result.checkpoint.read_bytes()))
    same_metrics = outputs[0][0] == outputs[1][0]
    same_ckpt = outputs[0][1] == outputs[1][1]
    verdict(8, "two identical train runs give byte-identical metrics and checkpoints", same_metrics and same_ckpt,
            f"metrics identical {same_metrics}, checkpoint identical {same_ckpt}")
