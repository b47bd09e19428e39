"""Acceptance gate: twelve numbered end-to-end criteria.

Each test prints one "AC<n> ...: PASS/FAIL" line (visible even under
output capture) and then asserts. Heavy shared artifacts (the theorem
sweep grid, the trained quality runs) are module-scoped fixtures, so the
whole gate runs in one pytest invocation.
"""

import time

import numpy as np
import pytest

from sgdnet.operators import (
    ComponentOperator, ForwardModel, apply, adjoint, bp_init, fbp_init,
    make_radon_model, make_conv_model, add_awgn_to_input_snr,
)
from sgdnet.unfolding import PriorNet, UnfoldConfig, sgdnet_forward, ured_forward
from sgdnet.training import (
    Dataset, TrainConfig, train_unfolded, pretrain_artifact_removal,
    full_objective_gradient,
)
from sgdnet.baselines import TVConfig, REDConfig, tv_apgm, red_fixed_point
from sgdnet.metrics import snr_db, ssim
from sgdnet.phantoms import make_phantom, make_phantoms
from sgdnet.theory import (
    standard_problem, theorem1_sweep, evaluate_sweep,
    check_phi_unbiasedness, check_variance_scaling,
)
from sgdnet.cli import bench_timings


def _report(capsys, label, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    with capsys.disabled():
        suffix = f"  [{detail}]" if detail else ""
        print(f"\n{label}: {tag}{suffix}", flush=True)
    assert ok, f"{label}{': ' + detail if detail else ''}"


# ---- 1: adjoint identities ---------------------------------------------------


def _mat_model(size, n_comp, rows, seed):
    rng = np.random.default_rng(seed)
    comps = [ComponentOperator(
        "explicit-matrix", (size, size),
        matrix=rng.standard_normal((rows, size * size)))
        for _ in range(n_comp)]
    return ForwardModel(comps, (size, size))


def test_ac1_adjoint_identities(capsys):
    t0 = time.perf_counter()
    models = [
        make_radon_model(16, 6),
        make_radon_model(32, 5),
        make_conv_model(16, 4, seed=0),
        make_conv_model(32, 4, seed=1),
        _mat_model(16, 3, rows=40, seed=2),
        _mat_model(32, 3, rows=70, seed=3),
    ]
    rng = np.random.default_rng(2024)
    worst = 0.0
    trials = 0
    while trials < 100:
        model = models[trials % len(models)]
        x = rng.standard_normal(model.image_shape)
        ax = apply(model, x)
        y = [rng.standard_normal(b.shape) for b in ax.blocks]
        lhs = sum(float(np.sum(a * b)) for a, b in zip(ax.blocks, y))
        rhs = float(np.sum(x * adjoint(model, y)))
        y_norm = float(np.sqrt(sum(float(np.sum(b * b)) for b in y)))
        bound = 1e-10 * max(ax.norm() * y_norm, 1e-300)
        worst = max(worst, abs(lhs - rhs) / bound)
        assert abs(lhs - rhs) <= bound
        trials += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 10.0
    _report(capsys, "AC1 adjoint identities (radon/conv/matrix, 100 trials)",
            ok, f"worst ratio {worst:.3f} of bound, {elapsed:.1f}s")


# ---- 2: gradient fidelity through the unrolled network -----------------------


def test_ac2_training_loss_gradient_matches_fd(capsys):
    t0 = time.perf_counter()
    model = make_conv_model(8, 5, seed=4)
    truths = make_phantoms(8, 2, seed=6)
    ds = Dataset.from_truths(truths, model, snr_db=35.0, noise_seed=1,
                             init="bp-mean")
    cfg = UnfoldConfig(q_steps=3, gamma=0.08, mode="full-batch")
    net = PriorNet.init_random(seed=8, tau=0.7, weight_scale=0.5)

    def loss_at(theta, tau):
        trial = PriorNet(theta=theta, tau=float(tau))
        total = 0.0
        for j in range(ds.m):
            out = ured_forward(ds.inits[j], ds.measurements[j], model,
                               trial, cfg)
            total += float(np.sum((out.final - ds.truths[j]) ** 2))
        return total / ds.m

    _, g_theta, g_tau = full_objective_gradient(ds, model, net, cfg)

    # every parameter block is probed at a handful of seeded coordinates
    offsets = {}
    pos = 0
    for name, shape in (("w1", (16, 1, 3, 3)), ("b1", (16,)), ("a1", ()),
                        ("w2", (16, 16, 3, 3)), ("b2", (16,)), ("a2", ()),
                        ("w3", (1, 16, 3, 3)), ("b3", (1,))):
        n = int(np.prod(shape, dtype=np.int64))
        offsets[name] = (pos, n)
        pos += n
    pick = np.random.default_rng(0)
    step = 1e-6
    max_rel = 0.0
    for name, (lo, n) in offsets.items():
        coords = lo + (np.sort(pick.choice(n, min(n, 6), replace=False))
                       if n > 6 else np.arange(n))
        fd = np.zeros(len(coords))
        for k, i in enumerate(coords):
            tp = net.theta.copy()
            tp[i] += step
            tm = net.theta.copy()
            tm[i] -= step
            fd[k] = (loss_at(tp, net.tau) - loss_at(tm, net.tau)) / (2 * step)
        ad = g_theta[coords]
        scale = max(float(np.max(np.abs(ad))), float(np.max(np.abs(fd))),
                    1e-12)
        max_rel = max(max_rel, float(np.max(np.abs(ad - fd))) / scale)
    fd_tau = (loss_at(net.theta, net.tau + step)
              - loss_at(net.theta, net.tau - step)) / (2 * step)
    scale = max(abs(g_tau), abs(fd_tau), 1e-12)
    max_rel = max(max_rel, abs(g_tau - fd_tau) / scale)
    elapsed = time.perf_counter() - t0
    ok = max_rel <= 1e-5 and elapsed < 60.0
    _report(capsys, "AC2 unrolled loss gradient vs finite differences",
            ok, f"max rel err {max_rel:.2e}, {elapsed:.1f}s")


# ---- 3: full-batch forward equals the batch variant bitwise ------------------


def test_ac3_batch_equivalence_bitwise(capsys):
    rng = np.random.default_rng(33)
    all_equal = True
    for trial in range(20):
        size = int(rng.integers(6, 11))
        n_comp = int(rng.integers(2, 6))
        model = make_conv_model(size, n_comp, seed=int(rng.integers(10_000)))
        truth = make_phantom(size, seed=int(rng.integers(10_000)))
        y = apply(model, truth)
        x0 = bp_init(y, model) / n_comp
        net = PriorNet.init_random(seed=int(rng.integers(10_000)),
                                   tau=float(rng.uniform(0.1, 3.0)),
                                   weight_scale=float(rng.uniform(0.2, 1.0)))
        cfg = UnfoldConfig(q_steps=int(rng.integers(0, 9)),
                           gamma=float(rng.uniform(1e-3, 0.2)),
                           mode="full-batch")
        a = sgdnet_forward(x0, y, model, net, cfg)
        b = ured_forward(x0, y, model, net, cfg)
        if not (a.final == b.final).all():
            all_equal = False
    _report(capsys, "AC3 full-batch forward == batch variant, 20 configs",
            all_equal, "bit-for-bit")


# ---- 4 and 5: estimator unbiasedness and variance law ------------------------


@pytest.fixture(scope="module")
def estimator_problem():
    problem = standard_problem()
    model, dataset = problem.build()
    y = dataset.measurements[0]
    probes = [dataset.inits[0], dataset.truths[0]]
    rng = np.random.default_rng(55)
    for _ in range(3):
        probes.append(rng.standard_normal(model.image_shape))
    return model, y, probes


def test_ac4_minibatch_unbiasedness_enumerated(capsys, estimator_problem):
    model, y, probes = estimator_problem
    report = check_phi_unbiasedness(model, y, probes, tol=1e-12)
    ok = report.passed and model.n_components == 20
    _report(capsys, "AC4 B=1 enumeration reproduces the full gradient",
            ok, f"max deviation {report.max_deviation:.2e} over 5 probes")


def test_ac5_variance_scaling_three_se(capsys, estimator_problem):
    t0 = time.perf_counter()
    model, y, probes = estimator_problem
    report = check_variance_scaling(model, y, probes[:2],
                                    b_list=[1, 2, 5, 10], n_draws=10_000,
                                    seed=17, n_se=3.0)
    elapsed = time.perf_counter() - t0
    worst = max(abs(r["mc"] - r["expected"]) / r["se"]
                for r in report.variance_rows)
    ok = report.passed and elapsed < 120.0
    _report(capsys, "AC5 Monte-Carlo variance matches sigma^2/B (3 SE)",
            ok, f"worst {worst:.2f} SE, {elapsed:.1f}s")


# ---- 6 and 7: convergence trends of the training sweep -----------------------


@pytest.fixture(scope="module")
def sweep_verdict():
    traces = theorem1_sweep(standard_problem(), b_list=[1, 5, 20],
                            k_list=[250, 4000], seeds=range(5), root_seed=0)
    return evaluate_sweep(traces)


def test_ac6_gradient_norm_min_improves_with_k(capsys, sweep_verdict):
    rows = [c for c in sweep_verdict["checks"] if c["kind"] == "min-vs-k"]
    ok = len(rows) == 3 and all(c["passed"] for c in rows)
    detail = "; ".join(f"{c['name'].split(' at ')[-1]}: "
                       f"{c['values'][0]:.3f} -> {c['values'][1]:.3f}"
                       for c in rows)
    _report(capsys, "AC6 min grad norm at K=4000 <= K=250 for each B",
            ok, detail)


def test_ac7_error_floor_non_increasing_in_b(capsys, sweep_verdict):
    rows = [c for c in sweep_verdict["checks"] if c["kind"] == "floor-vs-b"]
    ok = len(rows) == 2 and all(c["passed"] for c in rows)
    detail = "; ".join(f"{c['values'][0]:.2f} vs {c['values'][1]:.2f}"
                       for c in rows)
    _report(capsys, "AC7 tail floors non-increasing in B (20% slack)",
            ok, detail)


# ---- 8, 9, 10: reconstruction quality and cost on the 60-view problem --------
#
# Frozen protocol: 32x32 parallel-beam, 60 views, input SNR 25 dB, FBP
# initialization, 200 training / 30 test phantoms. Networks warm-start
# from an artifact-removal pretrain, then train end to end with ADAM at
# a constant rate; gamma 5e-3 and initial tau 4 throughout. Six runs:
# Q in {2, 4, 8} x {B=10 stochastic, full batch}.

QUALITY = {
    "size": 32, "views": 60, "snr_in": 25.0,
    "train_seed": 800, "train_count": 200, "train_noise_seed": 801,
    "test_seed": 900, "test_count": 30, "test_noise_base": 1000,
    "net_seed": 5, "tau0": 4.0, "weight_scale": 0.3,
    "gamma": 5e-3, "b_small": 10,
    "pretrain_epochs": 40, "epochs": 40, "eta": 1e-3,
    "pretrain_seed": 2, "unfold_seed": 0, "train_cfg_seed": 3,
    "test_draw_base": 4000,
    "tv_grid": (0.02, 0.05, 0.1), "tv_iters": 200,
}


@pytest.fixture(scope="module")
def quality_runs():
    q = QUALITY
    model = make_radon_model(q["size"], q["views"])
    truths = make_phantoms(q["size"], q["train_count"], seed=q["train_seed"])
    ds = Dataset.from_truths(truths, model, snr_db=q["snr_in"],
                             noise_seed=q["train_noise_seed"], init="fbp")
    test_truths = make_phantoms(q["size"], q["test_count"],
                                seed=q["test_seed"])
    sets = []
    for j, x in enumerate(test_truths):
        y = add_awgn_to_input_snr(
            apply(model, x), q["snr_in"],
            np.random.default_rng(q["test_noise_base"] + j))
        sets.append((x, y, fbp_init(y, model)))

    fbp_mean = float(np.mean([snr_db(x0, x) for x, _, x0 in sets]))
    tv_mean = max(
        float(np.mean([snr_db(
            tv_apgm(y, model, TVConfig(tau_tv=tau_tv,
                                       outer_iters=q["tv_iters"])).image, x)
            for x, y, _ in sets]))
        for tau_tv in q["tv_grid"])

    net0 = PriorNet.init_random(seed=q["net_seed"], tau=q["tau0"],
                                weight_scale=q["weight_scale"])
    pre_cfg = TrainConfig(epochs=q["pretrain_epochs"],
                          schedule={"kind": "constant", "eta": q["eta"]},
                          optimizer="adam", seed=q["pretrain_seed"])
    warm_theta = pretrain_artifact_removal(ds, net0, pre_cfg)[0].net.theta

    def test_mean(net, cfg):
        vals = []
        for j, (x, y, x0) in enumerate(sets):
            out = sgdnet_forward(
                x0, y, model, net, cfg,
                rng=np.random.default_rng(q["test_draw_base"] + j))
            vals.append(snr_db(out.final, x))
        return float(np.mean(vals))

    snr = {}
    walls = {}
    for q_steps in (2, 4, 8):
        for label, b, mode in (("B10", q["b_small"], "stochastic"),
                               ("full", q["views"], "full-batch")):
            ucfg = UnfoldConfig(q_steps=q_steps, gamma=q["gamma"],
                                minibatch=b, mode=mode,
                                seed=q["unfold_seed"])
            net = PriorNet(theta=warm_theta.copy(), tau=q["tau0"])
            tcfg = TrainConfig(epochs=q["epochs"],
                               schedule={"kind": "constant", "eta": q["eta"]},
                               optimizer="adam", seed=q["train_cfg_seed"])
            t0 = time.perf_counter()
            ckpt, _ = train_unfolded(ds, model, net, ucfg, tcfg)
            walls[(q_steps, label)] = time.perf_counter() - t0
            snr[(q_steps, label)] = test_mean(ckpt.net, ucfg)
    return {"fbp": fbp_mean, "tv": tv_mean, "snr": snr, "walls": walls}


def test_ac8_quality_parity_with_batch_variant(capsys, quality_runs):
    r = quality_runs
    sgd, ured = r["snr"][(8, "B10")], r["snr"][(8, "full")]
    gap = abs(sgd - ured)
    over_fbp = min(sgd, ured) - r["fbp"]
    over_tv = min(sgd, ured) - r["tv"]
    slowest = max(r["walls"].values())
    ok = (gap <= 0.5 and over_fbp >= 3.0 and over_tv >= 0.0
          and slowest < 1800.0)
    _report(capsys, "AC8 B=10 quality parity vs full batch and baselines",
            ok, f"B10 {sgd:.2f} dB, full {ured:.2f} dB, gap {gap:.2f}; "
                f"FBP {r['fbp']:.2f}, TV {r['tv']:.2f}; "
                f"slowest run {slowest:.0f}s")


def test_ac9_snr_non_decreasing_in_steps(capsys, quality_runs):
    r = quality_runs
    ok = True
    parts = []
    for label in ("B10", "full"):
        vals = [r["snr"][(qs, label)] for qs in (2, 4, 8)]
        steps = [vals[1] - vals[0], vals[2] - vals[1]]
        ok = ok and all(s >= -0.2 for s in steps)
        parts.append(f"{label}: " + " -> ".join(f"{v:.2f}" for v in vals))
    _report(capsys, "AC9 test SNR non-decreasing in Q (0.2 dB slack)",
            ok, "; ".join(parts))


def test_ac10_cost_scaling(capsys):
    rows = bench_timings([8, 10, 16, 32, 60], repeats=3)
    by_b = {r["b"]: r for r in rows}
    epoch_ratio = by_b[10]["epoch_mean_s"] / by_b[60]["epoch_mean_s"]
    r16 = by_b[16]["forward_mean_s"] / by_b[8]["forward_mean_s"]
    r32 = by_b[32]["forward_mean_s"] / by_b[16]["forward_mean_s"]
    ok = (epoch_ratio <= 0.6 and 1.5 <= r16 <= 2.5 and 1.5 <= r32 <= 2.5)
    _report(capsys, "AC10 cost scaling (epoch B10/B60, forward doublings)",
            ok, f"epoch ratio {epoch_ratio:.2f}; "
                f"fwd 16/8 {r16:.2f}, 32/16 {r32:.2f}")


# ---- 11: metric correctness --------------------------------------------------


def test_ac11_metric_correctness(capsys):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((12, 12))
    xhat = x + 0.1 * rng.standard_normal((12, 12))
    base = snr_db(xhat, x)
    worst = 0.0
    for _ in range(20):
        a = float(rng.uniform(-3.0, 3.0))
        if abs(a) < 0.1:
            a = 0.5
        b = float(rng.uniform(-2.0, 2.0))
        worst = max(worst, abs(snr_db(a * xhat + b, x) - base))
    example = snr_db(np.array([1.0, 2.0, 2.0]), np.array([1.0, 2.0, 3.0]))
    example_err = abs(example - 10.0 * np.log10(28.0))
    img = make_phantom(16, seed=2)
    self_err = abs(ssim(img, img, dynamic_range=1.0) - 1.0)
    ok = worst <= 1e-9 and example_err <= 1e-9 and self_err <= 1e-12
    _report(capsys, "AC11 metric correctness (affine SNR, SSIM)",
            ok, f"affine dev {worst:.1e}, example err {example_err:.1e}, "
                f"ssim(x,x)-1 {self_err:.1e}")


# ---- 12: classical baselines hit their closed forms --------------------------


def test_ac12_baseline_sanity(capsys):
    rng = np.random.default_rng(21)
    mats = [rng.standard_normal((6, 9)) for _ in range(2)]
    model = ForwardModel(
        [ComponentOperator("explicit-matrix", (3, 3), matrix=m)
         for m in mats], (3, 3))
    truth = rng.standard_normal((3, 3))
    y = apply(model, truth)

    tv = tv_apgm(y, model, TVConfig(tau_tv=0.0, outer_iters=4000))
    stacked = np.vstack(mats)
    target = np.concatenate([b for b in y.blocks])
    ls = np.linalg.lstsq(stacked, target, rcond=None)[0].reshape(3, 3)
    tv_err = float(np.max(np.abs(tv.image - ls)))

    a1 = rng.standard_normal((12, 9)) + 3.0 * np.eye(12, 9)
    model1 = ForwardModel(
        [ComponentOperator("explicit-matrix", (3, 3), matrix=a1)], (3, 3))
    y1 = apply(model1, truth)
    tau = 0.5
    tik = np.linalg.solve(a1.T @ a1 + tau * np.eye(9),
                          a1.T @ y1.blocks[0]).reshape(3, 3)
    red = red_fixed_point(y1, model1,
                          REDConfig(tau_red=tau, iterations=2000,
                                    denoiser=PriorNet.identity_r(tau=tau)))
    red_err = float(np.max(np.abs(red.image - tik)))
    ok = tv_err <= 1e-5 and red_err <= 1e-5
    _report(capsys, "AC12 baselines match least-squares / Tikhonov",
            ok, f"tv err {tv_err:.1e}, red err {red_err:.1e}")
