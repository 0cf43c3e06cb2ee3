"""Acceptance criteria 1-11; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from jadnet import attacks as atk
from jadnet import cli
from jadnet.attacks import AdaptiveConfig, AttackConfig
from jadnet.detect import ATTACK_STREAM, auroc, auroc_bruteforce, corruption_study, run_experiment
from jadnet.netcore import Activation, Layer, Network, init_mlp, input_gradient, loss_value
from jadnet.objectives import composite
from jadnet.sanitize import BASE_CHROMA, BASE_LUMA, jpeg_roundtrip, quality_to_tables, reconstruction_mse
from jadnet.spectral import certify_beta, min_sigma, spectral_penalty
from jadnet.training import TrainConfig, accuracy, synth_dataset, train

from conftest import central_fd, rel_err
from test_objectives import linear_sanitizer, smooth_point


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def lapack_gain(W):
    return 0.0 if W.shape[0] < W.shape[1] else np.linalg.svd(W, compute_uv=False)[-1]


def traces(net, x):
    out, z = [], x
    for layer in net.layers:
        z = layer.activation(layer.W @ z + layer.b)
        out.append(z)
    return out


def near_kink(net, x, h=1e-5):
    z = x
    for layer in net.layers:
        u = layer.W @ z + layer.b
        if np.abs(u).min() < h:
            return True
        z = layer.activation(u)
    return False


def test_criterion_01_layerwise_bound(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, bad = np.inf, 0
    for _ in range(200):
        n = int(rng.integers(2, 6))
        dims = rng.integers(2, 65, n + 1)
        alpha = float(rng.choice([0.01, 0.1]))
        layers = [Layer(rng.standard_normal((dims[i + 1], dims[i])) * rng.uniform(0.2, 3),
                        rng.standard_normal(dims[i + 1]), Activation.leaky(alpha)) for i in range(n)]
        net = Network(layers)
        beta = np.prod([alpha * lapack_gain(l.W) for l in layers[1:]])
        assert certify_beta(net).beta == pytest.approx(beta, rel=1e-9, abs=1e-300)
        for _ in range(5):
            x, xp = rng.standard_normal((2, dims[0]))
            za, zb = traces(net, x), traces(net, xp)
            d = [np.linalg.norm(a - b) for a, b in zip(za, zb)]
            assert d[0] > 0
            for i in range(1, n):
                lower = alpha * lapack_gain(layers[i].W) * d[i - 1]
                bad += d[i] < lower * (1 - 1e-9)
                if lower > 0:
                    worst = min(worst, d[i] / lower)
            bad += d[-1] < beta * d[0] * (1 - 1e-9)
    elapsed = time.perf_counter() - start
    ok = report(1, bad == 0 and elapsed < 60,
                f"200 nets x 5 pairs, violations {bad}, tightest layer slack {worst:.6g}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_constructive(report):
    rng = np.random.default_rng(102)
    dim, alpha = 16, 0.1
    q = [np.linalg.qr(rng.standard_normal((dim, dim)))[0] for _ in range(4)]
    scales = [1.0, 15.0, 12.0, 20.0]
    layers = [Layer(s * m, 0.1 * rng.standard_normal(dim), Activation.leaky(alpha)) for s, m in zip(scales, q)]
    net = Network(layers)
    beta = certify_beta(net).beta
    worst = np.inf
    for _ in range(1000):
        x, xp = rng.standard_normal((2, dim)) * rng.uniform(1e-3, 10)
        d = [np.linalg.norm(a - b) for a, b in zip(traces(net, x), traces(net, xp))]
        worst = min(worst, d[-1] / d[0] / beta)
    ok = report(2, beta > 1 and worst >= 1 - 1e-9,
                f"beta {beta:.6g} (expected {0.1**3 * 15 * 12 * 20:.6g}), min measured ratio / beta {worst:.6g} over 1000 pairs")
    assert ok and beta == pytest.approx(3.6, rel=1e-12)


def random_instance(rng, head_dims=3):
    dims = [int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(3, 9)), head_dims]
    layers = [Layer(rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]), 0.1 * rng.standard_normal(dims[i + 1]),
                    Activation.leaky(0.1) if i < 2 else Activation()) for i in range(3)]
    return Network(layers)


def test_criterion_03_gradients(report):
    rng = np.random.default_rng(103)
    errs = {"ce": [], "penalty": [], "composite": []}
    while len(errs["ce"]) < 100:
        net = random_instance(rng)
        x = rng.random(net.in_dim)
        if near_kink(net, x):
            continue
        y = int(rng.integers(3))
        g = input_gradient(net, x, "cross_entropy", y)
        errs["ce"].append(rel_err(g, central_fd(lambda z: loss_value(net, z, "cross_entropy", [y]), x)))
    while len(errs["penalty"]) < 100:
        net = random_instance(rng)
        lam = float(rng.uniform(0.01, 1))
        _, grads = spectral_penalty(net, lam)
        fds = []
        for i, layer in enumerate(net.layers):
            def f(W, i=i):
                old = net.layers[i].W
                net.layers[i].W = W
                try:
                    return spectral_penalty(net, lam)[0]
                finally:
                    net.layers[i].W = old
            fds.append(central_fd(f, layer.W.copy()))
        errs["penalty"].append(rel_err(np.concatenate([g.ravel() for g in grads]),
                                       np.concatenate([g.ravel() for g in fds])))
    while len(errs["composite"]) < 100:
        net = random_instance(rng)
        san = linear_sanitizer(rng, net.in_dim)
        x = rng.random(net.in_dim)
        if not smooth_point(net, x, san):
            continue
        y, lam = [int(rng.integers(3))], float(rng.uniform(0.1, 2))
        _, g = composite(net, x, (y, san), lam=lam, last=net.n)
        fd = central_fd(lambda z: composite(net, z, (y, san), lam=lam, last=net.n)[0], x)
        errs["composite"].append(rel_err(g, fd))
    worst = {k: max(v) for k, v in errs.items()}
    ok = report(3, all(w < 1e-5 for w in worst.values()),
                "max rel err over 100 instances each: " + ", ".join(f"{k} {w:.2e}" for k, w in worst.items()))
    assert ok


def test_criterion_04_sigma_min_gradient(report):
    rng = np.random.default_rng(104)
    worst, done = 0.0, 0
    while done < 100:
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, m + 1))
        W = rng.standard_normal((m, n))
        s = np.linalg.svd(W, compute_uv=False)
        if s[-2] - s[-1] <= 1e-3:
            continue
        net = Network([Layer(np.ones((n, 1)), np.zeros(n), Activation.leaky(0.1)), Layer(W, np.zeros(m))])
        # the penalty is -log sigma_min at lam = 1, so its gradient is the negated closed form
        closed = -spectral_penalty(net, 1.0)[1][1]
        fd = central_fd(lambda A: np.log(np.linalg.svd(A, compute_uv=False)[-1]), W.copy())
        worst = max(worst, rel_err(closed, fd))
        done += 1
    ok = report(4, worst < 1e-5, f"max rel err {worst:.2e} over 100 matrices with gap > 1e-3")
    assert ok


def test_criterion_05_training_effect(report):
    data = synth_dataset(512, 16, seed=0)
    test = synth_dataset(256, 16, seed=cli.TEST_STREAM)
    wins, acc_d, acc_a, sig = 0, [], [], []
    for s in range(5):
        net = init_mlp([256, 128, 64, 2], seed=s, hidden=Activation.leaky(0.01))
        d, _ = train(net, data, TrainConfig(seed=s))
        a, _ = train(net, data, TrainConfig.amplified(seed=s))
        wins += min_sigma(a) > min_sigma(d)
        sig.append((min_sigma(d), min_sigma(a)))
        acc_d.append(accuracy(d, test))
        acc_a.append(accuracy(a, test))
    gap = 100 * abs(np.mean(acc_a) - np.mean(acc_d))
    ok = report(5, wins >= 4 and gap <= 2,
                f"amplified sigma_min larger in {wins}/5 pairs (mean {np.mean([p[1] for p in sig]):.3f} vs "
                f"{np.mean([p[0] for p in sig]):.3f}); test accuracy {np.mean(acc_a):.4f} vs {np.mean(acc_d):.4f}")
    assert ok


def test_criterion_06_specificity(desk, report):
    start = time.perf_counter()
    cfg = AttackConfig(seed=desk.cfg["seed"] ^ ATTACK_STREAM)
    rows = {r.kind: r for r in corruption_study(desk.net, desk.x, desk.y, cfg, seed=desk.cfg["seed"],
                                                kinds=["uniform_linf", "gaussian_l2"])}
    elapsed = time.perf_counter() - start
    pgd, uni, gau = rows["pgd"], rows["uniform_linf"], rows["gaussian_l2"]
    ok = (pgd.amp_success_rate >= 0.9 and all(r.amp_success_rate <= 0.3 and r.mean_ratio < 1 for r in (uni, gau))
          and elapsed < 300)
    report(6, ok, f"pgd fraction {pgd.amp_success_rate:.3f} (n={pgd.n}); uniform fraction {uni.amp_success_rate:.3f} "
                  f"mean {uni.mean_ratio:.3f}; gaussian fraction {gau.amp_success_rate:.3f} mean {gau.mean_ratio:.3f}; "
                  f"{elapsed:.1f}s")
    assert ok


def test_criterion_07_detector(desk, report):
    reps = {r.attack: r for r in run_experiment(desk.net, desk.x, desk.y, cli.eval_attacks(desk.cfg),
                                                cli.detector_config(desk.cfg))}
    legs = []
    for name in ("pgd", "bim", "pgd_l2"):
        r = reps[name]
        good = r.auroc is not None and r.auroc >= 0.9 and r.baseline_auroc <= r.auroc - 0.15
        legs.append(good)
    detail = "; ".join(f"{n} auroc {reps[n].auroc:.3f} baseline {reps[n].baseline_auroc:.3f} asr {reps[n].asr:.3f}"
                       for n in ("pgd", "bim", "pgd_l2"))
    ok = report(7, all(legs), detail)
    assert ok


def test_criterion_08_adaptive(desk, report):
    dcfg = cli.detector_config(desk.cfg)
    seed = desk.cfg["seed"] ^ ATTACK_STREAM
    static = run_experiment(desk.net, desk.x, desk.y, [cli.static_attack("pgd", AttackConfig(seed=seed))], dcfg)[0]
    cells = {lam: cli.adaptive_cell(desk.net, desk.x, desk.y, dcfg, "classical", 8 / 255, lam, 1, 200, (30, 80), seed)
             for lam in (0.0, 1.0)}
    n_adv, asr1, au1, _ = cells[1.0]
    asr0 = cells[0.0][1]
    tradeoff = asr1 < asr0
    drop_ok = au1 is not None and static.auroc - au1 <= 0.1
    au_text = f"{au1:.3f}" if au1 is not None else "undefined (no successful adversarials)"
    ok = report(8, tradeoff and drop_ok,
                f"static pgd auroc {static.auroc:.3f}; lambda=1 auroc {au_text}; asr lambda=0 {asr0:.3f}, "
                f"lambda=1 {asr1:.3f}")
    assert ok


def test_criterion_09_oracles(report):
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(500):
        n, m = rng.integers(1, 51, 2)
        neg, pos = rng.integers(0, 10, n) / 3, rng.integers(0, 10, m) / 3
        worst = max(worst, abs(auroc(neg, pos) - auroc_bruteforce(neg, pos)))
    net = init_mlp([64, 16, 3], seed=9, hidden=Activation.leaky(0.01))
    x, y = rng.random((10, 8, 8, 1)), rng.integers(0, 3, 10)
    base = AttackConfig(steps=20, seed=5)
    eot_same = np.array_equal(atk.eot_adaptive(net, x, y, AdaptiveConfig(base=base, lam=0.0, T=2)), atk.pgd(net, x, y, base))
    bim_same = np.array_equal(atk.bim(net, x, y, AttackConfig(kind="bim", steps=20, seed=5)),
                              atk.pgd(net, x, y, AttackConfig(steps=20, seed=5, rand_init=False)))
    ok = report(9, worst <= 1e-12 and eot_same and bim_same,
                f"auroc max diff {worst:.1e} over 500 instances; eot(lambda=0) == pgd: {eot_same}; bim == pgd(no init): {bim_same}")
    assert ok


def test_criterion_10_jpeg(report):
    rng = np.random.default_rng(110)
    gray_exact = all(np.array_equal(jpeg_roundtrip(np.full((16, 16, c), 128 / 255), q), np.full((16, 16, c), 128 / 255))
                     for q in range(1, 101) for c in (1, 3))
    tables = [quality_to_tables(q) for q in range(1, 101)]
    monotone = all((b.luma <= a.luma).all() and (b.chroma <= a.chroma).all() for a, b in zip(tables, tables[1:]))
    imgs = rng.random((10, 16, 16, 3))
    mse = [reconstruction_mse(imgs, q) for q in (10, 30, 50, 70, 90)]
    mse_ok = all(b <= a for a, b in zip(mse, mse[1:]))
    base_ok = np.array_equal(tables[49].luma, BASE_LUMA) and np.array_equal(tables[49].chroma, BASE_CHROMA)
    ok = report(10, gray_exact and monotone and mse_ok and base_ok,
                f"mid-gray exact {gray_exact}; tables monotone {monotone}; mse non-increasing over q=10,30,50,70,90 {mse_ok}; "
                f"q=50 base {base_ok}")
    assert ok


def test_criterion_11_determinism(tmp_path, report):
    files = {"train": ["history.csv", "model.jadn"], "certify": ["spectral.csv"], "attack": ["attacks.csv", "adv.f64"],
             "amp": ["amp.csv"], "eval": ["results.csv", "scores.csv", "baseline.csv"],
             "adaptive": ["adaptive_results.csv"], "corrupt-study": ["corruption.csv"]}
    text = "data.contrast = 0.1\ndetect.softmax_head = true\nadaptive.lambda = 0, 1\nadaptive.T = 1, 2\n"
    runs = []
    for sub in ("a", "b"):
        cfg = tmp_path / f"{sub}.cfg"
        cfg.write_text(text + f"out.dir = {tmp_path / 'out'}\n")
        for cmd in files:
            assert cli.main([cmd, "-c", str(cfg)]) == 0
        runs.append({f: (tmp_path / "out" / f).read_bytes() for fs in files.values() for f in fs})
    same = [f for f in runs[0] if runs[0][f] == runs[1][f]]
    ok = report(11, len(same) == len(runs[0]), f"{len(same)}/{len(runs[0])} artifacts byte-identical across two runs")
    assert ok
