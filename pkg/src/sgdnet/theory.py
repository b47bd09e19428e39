"""Empirical checks of the convergence analysis behind stochastic
unfolded training.

Three assumption probes (exact enumeration plus Monte Carlo):
- the minibatch data gradient is unbiased, with per-draw variance sigma^2
  enumerated exactly over components;
- Monte-Carlo variance of the B-sample average matches sigma^2 / B (exact
  equality for i.i.d. with-replacement draws, verified to 3 standard
  errors);
- the per-sample training gradient is unbiased for the batch objective
  gradient, with its enumerated variance reported as the eps^2 estimate.

The theorem sweep trains the small standard problem over a grid of
(batch size B, iteration budget K, seed) with the inverse-sqrt step rule,
recording full-batch squared gradient norms. The analysis predicts the
min-over-iterations norm to fall with K and the late-run floor to fall
with B; those qualitative trends are what the sweep summarizes. Lipschitz
constants are not estimated (unreliable for nonconvex nets), so no
constant-level inequality is checked.
"""

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .operators import full_gradient, minibatch_gradient, model_from_config
from .phantoms import make_phantoms
from .training import (Dataset, DivergenceError, TrainConfig,
                       _unfold_sample_grads, full_objective_gradient,
                       train_unfolded)
from .unfolding import PriorNet, UnfoldConfig

__all__ = [
    "ToleranceFailure", "AssumptionReport", "Theorem1Trace", "SweepProblem",
    "component_gradients", "check_phi_unbiasedness", "check_variance_scaling",
    "check_training_gradient_unbiasedness", "standard_problem",
    "theorem1_sweep", "summary_rows", "write_sweep_csvs", "seed_mean",
]


class ToleranceFailure(RuntimeError):
    """A hard empirical tolerance was violated."""


@dataclass
class AssumptionReport:
    """Outcome of one assumption check. Fields that a given check does not
    produce stay None."""

    check: str
    max_deviation: float | None = None
    sigma_sq: list | None = None          # per probe point
    variance_rows: list | None = None     # dicts: probe, b, mc, expected, se
    epsilon_sq: float | None = None
    tolerances: dict = field(default_factory=dict)
    passed: bool = True

    def __post_init__(self):
        if self.max_deviation is not None and self.max_deviation < 0:
            raise ValueError("deviations are non-negative by construction")

    def require(self):
        if not self.passed:
            raise ToleranceFailure(f"{self.check} failed its tolerance")
        return self


def component_gradients(x, y, model):
    """All I single-component gradients at x, ascending order."""
    return [minibatch_gradient(x, y, model, [i])
            for i in range(model.n_components)]


def _enumerated_sigma_sq(phis, full):
    dev = [float(np.sum((p - full) ** 2)) for p in phis]
    return float(np.mean(dev))


def check_phi_unbiasedness(model, y, probes, tol=1e-12):
    """Enumerate every B=1 draw: the mean of the single-component gradients
    must equal the full gradient."""
    worst = 0.0
    sigmas = []
    for x in probes:
        full = full_gradient(x, y, model)
        phis = component_gradients(x, y, model)
        acc = np.zeros(model.image_shape)
        for p in phis:
            acc += p
        mean = acc / len(phis)
        worst = max(worst, float(np.max(np.abs(mean - full))))
        sigmas.append(_enumerated_sigma_sq(phis, full))
    return AssumptionReport(check="phi-unbiasedness", max_deviation=worst,
                            sigma_sq=sigmas, tolerances={"max_deviation": tol},
                            passed=worst <= tol)


def check_variance_scaling(model, y, probes, b_list, n_draws=10000, seed=0,
                           n_se=3.0):
    """Monte-Carlo E||g_hat - g||^2 against the exact sigma^2 / B law.

    Draw index multisets i.i.d. uniform with replacement; with those
    semantics the equality is exact, so the MC estimate must sit within
    n_se standard errors of sigma^2 / B for every probe and B."""
    if n_draws < 10000:
        raise ValueError("need at least 1e4 draws for a stable check")
    i_count = model.n_components
    rows = []
    sigmas = []
    all_ok = True
    for pi, x in enumerate(probes):
        full = full_gradient(x, y, model)
        phis = component_gradients(x, y, model)
        sigma_sq = _enumerated_sigma_sq(phis, full)
        sigmas.append(sigma_sq)
        phi_mat = np.stack([p.ravel() for p in phis])       # (I, n)
        full_flat = full.ravel()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), pi]))
        for b in b_list:
            idx = rng.integers(0, i_count, size=(int(n_draws), int(b)))
            counts = np.zeros((int(n_draws), i_count))
            np.add.at(counts, (np.arange(int(n_draws))[:, None], idx), 1.0)
            means = (counts @ phi_mat) / float(b)
            vals = np.sum((means - full_flat) ** 2, axis=1)
            mc = float(np.mean(vals))
            se = float(np.std(vals, ddof=1) / np.sqrt(vals.size))
            expected = sigma_sq / float(b)
            ok = abs(mc - expected) <= n_se * se
            all_ok = all_ok and ok
            rows.append({"probe": pi, "b": int(b), "mc": mc,
                         "expected": expected, "se": se, "within": ok})
    return AssumptionReport(check="variance-scaling", sigma_sq=sigmas,
                            variance_rows=rows,
                            tolerances={"n_se": n_se}, passed=all_ok)


def check_training_gradient_unbiasedness(dataset, model, net, unfold_cfg,
                                         tol=1e-12):
    """Mean over samples j of the per-sample training gradient against the
    batch objective gradient, plus the enumerated spread as eps^2. Uses the
    deterministic full-batch unrolled pass so the only randomness source
    (sample choice) is enumerated exhaustively."""
    if unfold_cfg.mode != "full-batch":
        raise ValueError("unbiasedness enumeration needs full-batch mode")
    sample_fn = _unfold_sample_grads(dataset, model, unfold_cfg)
    m = dataset.m
    per_sample = []
    for j in range(m):
        _, g_theta, g_tau = sample_fn(net, j, 0, 0, 0)
        per_sample.append(np.concatenate([g_theta, [g_tau]]))
    _, g_theta_full, g_tau_full = full_objective_gradient(
        dataset, model, net, unfold_cfg)
    full = np.concatenate([g_theta_full, [g_tau_full]])
    acc = np.zeros_like(full)
    for g in per_sample:
        acc += g
    mean = acc / m
    worst = float(np.max(np.abs(mean - full)))
    eps_sq = float(np.mean([np.sum((g - full) ** 2) for g in per_sample]))
    return AssumptionReport(check="training-gradient-unbiasedness",
                            max_deviation=worst, epsilon_sq=eps_sq,
                            tolerances={"max_deviation": tol},
                            passed=worst <= tol)


# ---- theorem sweep --------------------------------------------------------


@dataclass
class Theorem1Trace:
    """One training run of the sweep: sampled full-batch squared gradient
    norms along the trajectory plus derived summaries."""

    b: int
    k_nominal: int
    k_actual: int
    seed: int
    schedule: dict
    samples: list                  # (iteration, grad_norm_sq) pairs
    wallclock_s: float
    diverged: bool = False

    def min_so_far(self):
        vals = np.array([v for _, v in self.samples], dtype=np.float64)
        return np.minimum.accumulate(vals)

    @property
    def min_grad_norm_sq(self):
        if not self.samples:
            return float("nan")
        return float(min(v for _, v in self.samples))

    @property
    def tail_floor(self):
        """Mean of the last 10% of samples (at least one)."""
        if not self.samples:
            return float("nan")
        vals = [v for _, v in self.samples]
        tail = max(1, int(np.ceil(0.1 * len(vals))))
        return float(np.mean(vals[-tail:]))


@dataclass
class SweepProblem:
    """Desk-scale training problem used by the theorem sweep. The defaults
    are the frozen standard problem; every run of the sweep reconstructs
    model, data and the initial network deterministically from these
    fields."""

    image_size: int = 16
    n_components: int = 20
    model: dict = field(default_factory=lambda: {"kind": "conv"})
    model_seed: int = 2024
    q_steps: int = 4
    gamma: float = 0.1
    tau0: float = 0.4
    m_samples: int = 4
    data_seed: int = 77
    snr_db: float | None = 30.0
    init: str = "bp-mean"
    net_scale: float = 0.25
    lipschitz: float = 160.0
    trace_points: int = 80

    def build(self):
        cfg = dict(self.model)
        cfg.setdefault("size", self.image_size)
        cfg.setdefault("components", self.n_components)
        cfg.setdefault("seed", self.model_seed)
        model = model_from_config(cfg)
        truths = make_phantoms(self.image_size, self.m_samples,
                               self.data_seed)
        dataset = Dataset.from_truths(truths, model, snr_db=self.snr_db,
                                      noise_seed=self.data_seed + 1,
                                      init=self.init)
        return model, dataset


def standard_problem():
    """The frozen 16x16, I=20, Q=4, M=4 configuration used by the sweep
    acceptance checks."""
    return SweepProblem()


def _problem_net(problem, seed):
    """Initial network for a sweep run: fixed per seed index so that runs
    with different (B, K) but the same seed start from the same theta."""
    net = PriorNet.init_random(
        seed=np.random.SeedSequence([int(seed), 313]),
        weight_scale=problem.net_scale)
    net.tau = problem.tau0
    return net


def run_single(problem, b, k_nominal, seed, root_seed=0):
    """One sweep run. B = "full" selects the deterministic full-batch mode.
    Returns a Theorem1Trace; divergence is flagged, not raised."""
    model, dataset = problem.build()
    net = _problem_net(problem, seed)
    full_batch = isinstance(b, str) and b == "full"
    b_val = problem.n_components if full_batch else int(b)
    unfold_cfg = UnfoldConfig(
        q_steps=problem.q_steps, gamma=problem.gamma,
        minibatch=b_val, mode="full-batch" if full_batch else "stochastic")
    m = dataset.m
    epochs = max(1, int(round(float(k_nominal) / m)))
    k_actual = epochs * m
    schedule = {"kind": "inverse-sqrt", "lipschitz": problem.lipschitz}
    run_ss = np.random.SeedSequence(
        [int(root_seed), 0 if full_batch else b_val, int(k_nominal),
         int(seed)])
    train_cfg = TrainConfig(
        epochs=epochs, schedule=schedule,
        seed=int(run_ss.generate_state(1)[0]),
        grad_trace_period=max(1, k_actual // problem.trace_points))
    t0 = time.perf_counter()
    diverged = False
    try:
        _, trace = train_unfolded(dataset, model, net, unfold_cfg, train_cfg)
    except DivergenceError as err:
        trace = err.trace
        diverged = True
    wall = time.perf_counter() - t0
    samples = [(row["iteration"], row["grad_norm_sq_full"])
               for row in trace.rows
               if row.get("grad_norm_sq_full") is not None]
    return Theorem1Trace(b=b_val, k_nominal=int(k_nominal),
                         k_actual=k_actual, seed=int(seed),
                         schedule=schedule, samples=samples,
                         wallclock_s=wall, diverged=diverged)


def _sweep_worker(payload):
    problem = SweepProblem(**payload["problem"])
    trace = run_single(problem, payload["b"], payload["k"], payload["seed"],
                       payload["root_seed"])
    return asdict(trace)


def theorem1_sweep(problem, b_list, k_list, seeds, root_seed=0, out_dir=None,
                   jobs=1):
    """Grid of independent runs over (B, K, seed). Each run derives its
    randomness from (root_seed, B, K, seed) only, so results do not depend
    on execution order or the number of workers."""
    grid = [{"problem": asdict(problem), "b": b, "k": int(k),
             "seed": int(s), "root_seed": int(root_seed)}
            for b in b_list for k in k_list for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
            dicts = list(pool.map(_sweep_worker, grid))
        traces = [Theorem1Trace(**d) for d in dicts]
        for t in traces:
            t.samples = [tuple(s) for s in t.samples]
    else:
        traces = [run_single(problem, g["b"], g["k"], g["seed"], root_seed)
                  for g in grid]
    if out_dir is not None:
        write_sweep_csvs(traces, out_dir)
    return traces


def summary_rows(traces):
    rows = []
    for t in traces:
        rows.append({"b": t.b, "k": t.k_nominal, "seed": t.seed,
                     "min_grad_norm_sq": t.min_grad_norm_sq,
                     "tail_floor": t.tail_floor,
                     "wallclock_s": t.wallclock_s,
                     "diverged": int(t.diverged)})
    return rows


def write_sweep_csvs(traces, out_dir):
    """One CSV per run (iteration, grad_norm_sq) plus summary.csv."""
    os.makedirs(out_dir, exist_ok=True)
    for t in traces:
        path = os.path.join(
            out_dir, f"run_B{t.b}_K{t.k_nominal}_s{t.seed}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "grad_norm_sq"])
            for k, v in t.samples:
                w.writerow([k, repr(float(v))])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["b", "k", "seed",
                                           "min_grad_norm_sq", "tail_floor",
                                           "wallclock_s", "diverged"])
        w.writeheader()
        for row in summary_rows(traces):
            w.writerow(row)


def seed_mean(traces, b, k, key):
    """Average of one summary quantity over the non-diverged seeds of a
    (B, K) cell. key is "min_grad_norm_sq" or "tail_floor"."""
    vals = [getattr(t, key) for t in traces
            if t.b == b and t.k_nominal == k and not t.diverged]
    if not vals:
        raise ValueError(f"no completed runs for B={b}, K={k}")
    return float(np.mean(vals))


def evaluate_sweep(traces, floor_tol=0.2, floor_pass_fraction=0.8):
    """Qualitative trend verdict on a finished sweep grid.

    Hard checks: for every B present, the seed-averaged min-over-k at the
    largest K must not exceed the one at the smallest K. Soft checks: at
    the largest K, seed-averaged tail floors across ascending B must be
    non-increasing within floor_tol per comparison, with at least
    floor_pass_fraction of the comparisons passing."""
    bs = sorted({t.b for t in traces})
    ks = sorted({t.k_nominal for t in traces})
    checks = []
    if len(ks) >= 2:
        for b in bs:
            lo = seed_mean(traces, b, ks[0], "min_grad_norm_sq")
            hi = seed_mean(traces, b, ks[-1], "min_grad_norm_sq")
            checks.append({"name": f"min-over-k K={ks[-1]} <= K={ks[0]} "
                                   f"at B={b}",
                           "kind": "min-vs-k", "passed": hi <= lo,
                           "values": [lo, hi]})
    floor_checks = []
    if len(bs) >= 2:
        k = ks[-1]
        floors = [seed_mean(traces, b, k, "tail_floor") for b in bs]
        for i in range(1, len(bs)):
            ok = floors[i] <= (1.0 + floor_tol) * floors[i - 1]
            floor_checks.append({"name": f"floor B={bs[i]} <= "
                                         f"(1+{floor_tol})*floor B="
                                         f"{bs[i - 1]} at K={k}",
                                 "kind": "floor-vs-b", "passed": ok,
                                 "values": [floors[i - 1], floors[i]]})
    checks.extend(floor_checks)
    hard_ok = all(c["passed"] for c in checks if c["kind"] == "min-vs-k")
    if floor_checks:
        frac = sum(c["passed"] for c in floor_checks) / len(floor_checks)
        soft_ok = frac >= floor_pass_fraction
    else:
        soft_ok = True
    return {"schema_version": 1, "checks": checks,
            "passed": bool(hard_ok and soft_ok)}
