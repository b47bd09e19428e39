"""End-to-end supervised training of the unrolled networks.

The training iteration follows the analyzed scheme: at step k, draw a
sample index j_k uniformly, draw the per-step component indices for the
unrolled forward pass from a dedicated stream, backpropagate the squared
error against the ground truth, and update (theta, tau) with the scheduled
step size. Plain SGD is the default; ADAM and gradient clipping are
optional flags with no claims attached.

Reproducibility contract: the sample-index stream is owned by a
checkpointed generator, while the per-iteration component-index streams
are derived statelessly from (seed, iteration, slot), so restoring a
checkpoint and continuing reproduces the uninterrupted run bit-for-bit.
"""

import csv
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import tensorio
from .autodiff import Tape, backward
from .operators import add_awgn_to_input_snr, apply, bp_init, fbp_init
from .unfolding import (BLOCK_SHAPES, PriorNet, UnfoldConfig,
                        _r_theta_nodes, sgdnet_forward, ured_forward)

__all__ = [
    "TrainConfig", "Dataset", "Checkpoint", "TrainTrace",
    "DivergenceError", "CheckpointError",
    "mse_loss", "sgd_update", "train_unfolded", "pretrain_artifact_removal",
    "full_objective_gradient", "save_checkpoint", "load_checkpoint",
]

# Stream tags keep the stateless per-iteration index draws disjoint from
# anything else derived from the same root seed.
_PHI_STREAM_TAG = 101


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient. Carries
    the last good checkpoint and the trace recorded so far."""

    def __init__(self, message, checkpoint=None, trace=None, last_loss=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace
        self.last_loss = last_loss


class CheckpointError(RuntimeError):
    """Checkpoint file is inconsistent with the current network layout."""


@dataclass
class TrainConfig:
    """Loop knobs. schedule is one of
    {"kind": "constant", "eta": e},
    {"kind": "inverse-sqrt", "lipschitz": L}   (eta = 1/(L*sqrt(K_total))),
    {"kind": "step-decay", "eta": e, "factor": f, "period": p}."""

    epochs: int
    schedule: dict
    loss: str = "mse"
    seed: int = 0
    snapshot_period: int | None = None
    grad_trace_period: int | None = None
    optimizer: str = "sgd"
    clip_norm: float | None = None
    image_minibatch: int = 1
    freeze_theta: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss: {self.loss}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unsupported optimizer: {self.optimizer}")
        if self.image_minibatch < 1:
            raise ValueError("image_minibatch must be >= 1")
        if self.seed is None or int(self.seed) < 0:
            raise ValueError("seed must be a non-negative integer")
        kind = self.schedule.get("kind")
        if kind == "constant":
            if float(self.schedule["eta"]) <= 0:
                raise ValueError("schedule rate must be positive")
        elif kind == "inverse-sqrt":
            if float(self.schedule["lipschitz"]) <= 0:
                raise ValueError("schedule rate must be positive")
        elif kind == "step-decay":
            if float(self.schedule["eta"]) <= 0 or \
                    float(self.schedule.get("factor", 0.5)) <= 0 or \
                    int(self.schedule.get("period", 1)) < 1:
                raise ValueError("bad step-decay parameters")
        else:
            raise ValueError(f"unknown schedule kind: {kind}")


def eta_at(schedule, k, total_k):
    """Step size at iteration k of a run with total_k iterations. The
    inverse-sqrt choice is constant within a run but scales as 1/sqrt(K)
    with the run length."""
    kind = schedule["kind"]
    if kind == "constant":
        return float(schedule["eta"])
    if kind == "inverse-sqrt":
        return 1.0 / (float(schedule["lipschitz"]) * np.sqrt(max(total_k, 1)))
    factor = float(schedule.get("factor", 0.5))
    period = int(schedule.get("period", 1))
    return float(schedule["eta"]) * factor ** (k // period)


@dataclass
class Dataset:
    """M supervised pairs plus precomputed initializations."""

    truths: list
    measurements: list
    inits: list

    def __post_init__(self):
        if not (len(self.truths) == len(self.measurements) == len(self.inits)):
            raise ValueError("dataset lists must have equal length")
        if len(self.truths) < 1:
            raise ValueError("dataset needs at least one sample")
        shape = np.asarray(self.truths[0]).shape
        for x, x0 in zip(self.truths, self.inits):
            if np.asarray(x).shape != shape or np.asarray(x0).shape != shape:
                raise ValueError("inconsistent image shapes in dataset")

    @property
    def m(self):
        return len(self.truths)

    @classmethod
    def from_truths(cls, truths, model, snr_db=None, noise_seed=0,
                    init="bp"):
        """Synthesize measurements (optionally noisy at the given input SNR)
        and initializations. init is "bp" (plain adjoint), "bp-mean"
        (adjoint / component count, better scaled for many components),
        or "fbp" (radon models)."""
        measurements = []
        inits = []
        for j, x in enumerate(truths):
            y = apply(model, np.asarray(x, dtype=np.float64))
            if snr_db is not None and np.isfinite(snr_db):
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(noise_seed), j]))
                y = add_awgn_to_input_snr(y, float(snr_db), rng)
            if init == "bp":
                x0 = bp_init(y, model)
            elif init == "bp-mean":
                x0 = bp_init(y, model) / model.n_components
            elif init == "fbp":
                x0 = fbp_init(y, model)
            else:
                raise ValueError(f"unknown init kind: {init}")
            measurements.append(y)
            inits.append(x0)
        return cls(list(truths), measurements, inits)


@dataclass
class Checkpoint:
    """Complete training state: restoring it and continuing reproduces the
    uninterrupted run bit-for-bit in single-threaded mode."""

    net: PriorNet
    epoch: int
    iteration: int
    rng_state: dict
    schedule_position: int
    metrics: dict
    optimizer_state: dict | None = None


class TrainTrace:
    """Per-iteration log: iteration, epoch, loss, eta, optional full-batch
    squared gradient norm, wallclock milliseconds."""

    COLUMNS = ("iteration", "epoch", "loss", "eta", "grad_norm_sq_full",
               "wallclock_ms")

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def append(self, **row):
        self.rows.append({c: row.get(c) for c in self.COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else repr(r[c])
                            if isinstance(r[c], float) else r[c]
                            for c in self.COLUMNS])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for rec in reader:
                row = {}
                for c in cls.COLUMNS:
                    v = rec.get(c, "")
                    if v == "" or v is None:
                        row[c] = None
                    elif c in ("iteration", "epoch"):
                        row[c] = int(v)
                    else:
                        row[c] = float(v)
                rows.append(row)
        return cls(rows)


def mse_loss(prediction, target):
    """Unnormalized sum of squared errors."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = p - t
    return float(np.sum(d * d))


def sgd_update(theta, tau, grads, eta):
    """Plain gradient step on (theta, tau). grads is {"theta": vec,
    "tau": scalar}. Aborts on non-finite gradients."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    g_theta = np.asarray(grads["theta"], dtype=np.float64)
    g_tau = float(grads["tau"])
    if not (np.all(np.isfinite(g_theta)) and np.isfinite(g_tau)):
        raise DivergenceError("non-finite gradients in update")
    return theta - eta * g_theta, tau - eta * g_tau


def _phi_rng(seed, k, slot):
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _PHI_STREAM_TAG, int(k), int(slot)]))


def _unfold_sample_grads(dataset, model, unfold_cfg):
    """Per-sample loss/gradient closure for end-to-end training."""

    def fn(net, j, k, slot, seed):
        rng = _phi_rng(seed, k, slot) if unfold_cfg.mode == "stochastic" \
            else None
        out = sgdnet_forward(dataset.inits[j], dataset.measurements[j],
                             model, net, unfold_cfg, rng=rng)
        tape = out.tape
        loss = tape.sum_squares(
            tape.sub(out.x_node, tape.constant(dataset.truths[j])))
        backward(tape, loss)
        g_theta = PriorNet.pack_blocks(
            {name: out.leaves[name].grad for name, _ in BLOCK_SHAPES})
        return float(loss.value), g_theta, float(out.leaves["tau"].grad)

    return fn


def _pretrain_sample_grads(dataset):
    """Per-sample loss/gradient closure for warm-up pretraining of R:
    minimize ||(x0 - R(x0)) - x||^2. tau does not enter the graph."""

    def fn(net, j, k, slot, seed):
        tape = Tape()
        leaves = net.leaves_on(tape)
        x0 = tape.constant(np.asarray(dataset.inits[j], dtype=np.float64))
        pred = tape.sub(x0, _r_theta_nodes(tape, x0, leaves))
        loss = tape.sum_squares(
            tape.sub(pred, tape.constant(dataset.truths[j])))
        backward(tape, loss)
        g_theta = PriorNet.pack_blocks(
            {name: leaves[name].grad for name, _ in BLOCK_SHAPES})
        return float(loss.value), g_theta, float(leaves["tau"].grad)

    return fn


def full_objective_gradient(dataset, model, net, unfold_cfg):
    """Exact batch objective (mean over samples of the squared error after
    a full-batch unrolled pass) and its gradient in (theta, tau)."""
    cfg = replace(unfold_cfg, mode="full-batch")
    m = dataset.m
    total = 0.0
    g_theta = np.zeros(net.n_params)
    g_tau = 0.0
    for j in range(m):
        out = ured_forward(dataset.inits[j], dataset.measurements[j], model,
                           net, cfg)
        tape = out.tape
        loss = tape.sum_squares(
            tape.sub(out.x_node, tape.constant(dataset.truths[j])))
        backward(tape, loss)
        total += float(loss.value)
        g_theta += PriorNet.pack_blocks(
            {name: out.leaves[name].grad for name, _ in BLOCK_SHAPES})
        g_tau += float(out.leaves["tau"].grad)
    return total / m, g_theta / m, g_tau / m


def _pretrain_full_gradient(dataset):
    fn = _pretrain_sample_grads(dataset)

    def full(net):
        m = dataset.m
        total, g_theta, g_tau = 0.0, np.zeros(net.n_params), 0.0
        for j in range(m):
            l, gt, ga = fn(net, j, 0, 0, 0)
            total += l
            g_theta += gt
            g_tau += ga
        return total / m, g_theta / m, g_tau / m

    return full


def _make_checkpoint(net, epoch, iteration, rng, metrics, opt_state):
    state = None
    if opt_state is not None:
        state = {"t": opt_state["t"], "m": opt_state["m"].copy(),
                 "v": opt_state["v"].copy()}
    return Checkpoint(net=net.copy(), epoch=epoch, iteration=iteration,
                      rng_state=dict(rng.bit_generator.state),
                      schedule_position=iteration, metrics=dict(metrics),
                      optimizer_state=state)


def _apply_update(net, g_theta, g_tau, eta, cfg, opt_state):
    if cfg.freeze_theta:
        g_theta = np.zeros_like(g_theta)
    if cfg.clip_norm is not None:
        norm = float(np.sqrt(np.sum(g_theta ** 2) + g_tau ** 2))
        if norm > cfg.clip_norm:
            s = cfg.clip_norm / norm
            g_theta = g_theta * s
            g_tau = g_tau * s
    if cfg.optimizer == "sgd":
        theta, tau = sgd_update(net.theta, net.tau,
                                {"theta": g_theta, "tau": g_tau}, eta)
    else:
        g_all = np.concatenate([g_theta, [g_tau]])
        if not np.all(np.isfinite(g_all)):
            raise DivergenceError("non-finite gradients in update")
        b1, b2, eps = 0.9, 0.999, 1e-8
        opt_state["t"] += 1
        t = opt_state["t"]
        opt_state["m"] = b1 * opt_state["m"] + (1 - b1) * g_all
        opt_state["v"] = b2 * opt_state["v"] + (1 - b2) * g_all * g_all
        m_hat = opt_state["m"] / (1 - b1 ** t)
        v_hat = opt_state["v"] / (1 - b2 ** t)
        step = eta * m_hat / (np.sqrt(v_hat) + eps)
        cur = np.concatenate([net.theta, [net.tau]])
        new = cur - step
        theta, tau = new[:-1], float(new[-1])
    return theta, tau


def _run_training(dataset, net, train_cfg, sample_grad_fn, full_grad_fn,
                  resume_from=None, snapshot_dir=None, snapshot_meta=None):
    m_data = dataset.m
    iters_per_epoch = max(1, m_data // train_cfg.image_minibatch)
    total_k = train_cfg.epochs * iters_per_epoch

    if resume_from is not None:
        net = resume_from.net.copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        k0 = resume_from.iteration
        metrics = dict(resume_from.metrics)
        opt_state = None
        if resume_from.optimizer_state is not None:
            opt_state = {"t": resume_from.optimizer_state["t"],
                         "m": np.array(resume_from.optimizer_state["m"]),
                         "v": np.array(resume_from.optimizer_state["v"])}
    else:
        net = net.copy()
        rng = np.random.default_rng(train_cfg.seed)
        k0 = 0
        metrics = {}
        opt_state = None
    if train_cfg.optimizer == "adam" and opt_state is None:
        opt_state = {"t": 0, "m": np.zeros(net.n_params + 1),
                     "v": np.zeros(net.n_params + 1)}

    trace = TrainTrace()
    last_good = _make_checkpoint(net, k0 // iters_per_epoch, k0, rng,
                                 metrics, opt_state)
    for k in range(k0, total_k):
        t_start = time.perf_counter()
        epoch = k // iters_per_epoch
        js = rng.integers(0, m_data, size=train_cfg.image_minibatch)
        losses, g_thetas, g_taus = [], [], []
        for slot, j in enumerate(js):
            l, gt, ga = sample_grad_fn(net, int(j), k, slot, train_cfg.seed)
            losses.append(l)
            g_thetas.append(gt)
            g_taus.append(ga)
        loss = float(np.mean(losses))
        g_theta = np.mean(g_thetas, axis=0)
        g_tau = float(np.mean(g_taus))
        if not np.isfinite(loss) or not np.all(np.isfinite(g_theta)) \
                or not np.isfinite(g_tau):
            last = trace.rows[-1]["loss"] if trace.rows else None
            raise DivergenceError(
                f"training diverged at iteration {k} "
                f"(last finite loss: {last})",
                checkpoint=last_good, trace=trace, last_loss=last)

        grad_sq = None
        if train_cfg.grad_trace_period and k % train_cfg.grad_trace_period == 0:
            _, gf_theta, gf_tau = full_grad_fn(net)
            grad_sq = float(np.sum(gf_theta ** 2) + gf_tau ** 2)

        eta = eta_at(train_cfg.schedule, k, total_k)
        theta_new, tau_new = _apply_update(net, g_theta, g_tau, eta,
                                           train_cfg, opt_state)
        net.set_theta(theta_new)
        net.tau = float(tau_new)
        if net.tau < 0 and not metrics.get("tau_went_negative"):
            metrics["tau_went_negative"] = True
            warnings.warn("tau went negative during training")
        metrics["last_loss"] = loss

        trace.append(iteration=k, epoch=epoch, loss=loss, eta=eta,
                     grad_norm_sq_full=grad_sq,
                     wallclock_ms=(time.perf_counter() - t_start) * 1e3)
        last_good = _make_checkpoint(net, epoch, k + 1, rng, metrics,
                                     opt_state)
        end_of_epoch = (k + 1) % iters_per_epoch == 0
        if snapshot_dir is not None and train_cfg.snapshot_period and \
                end_of_epoch and (epoch + 1) % train_cfg.snapshot_period == 0:
            save_checkpoint(f"{snapshot_dir}/snapshot_epoch{epoch + 1:04d}",
                            last_good, extra=snapshot_meta)

    final = _make_checkpoint(net, train_cfg.epochs, total_k, rng, metrics,
                             opt_state)
    return final, trace


def train_unfolded(dataset, model, net, unfold_cfg, train_cfg,
                   resume_from=None, snapshot_dir=None):
    """End-to-end training. Returns (Checkpoint, TrainTrace). Pass a
    checkpoint as resume_from (with the same configs) to continue a run;
    the concatenated traces match the uninterrupted run bit-for-bit apart
    from wallclock columns."""
    sample_fn = _unfold_sample_grads(dataset, model, unfold_cfg)

    def full_fn(current):
        return full_objective_gradient(dataset, model, current, unfold_cfg)

    meta = {"unfold": {"q_steps": unfold_cfg.q_steps,
                       "gamma": unfold_cfg.gamma,
                       "minibatch": unfold_cfg.minibatch,
                       "mode": unfold_cfg.mode,
                       "seed": unfold_cfg.seed},
            "train_seed": train_cfg.seed}
    return _run_training(dataset, net, train_cfg, sample_fn, full_fn,
                         resume_from=resume_from, snapshot_dir=snapshot_dir,
                         snapshot_meta=meta)


def pretrain_artifact_removal(dataset, net, train_cfg, resume_from=None,
                              snapshot_dir=None):
    """Warm-up: train R alone so that x0 - R(x0) approximates the truth.
    The resulting theta initializes every unfolded step."""
    sample_fn = _pretrain_sample_grads(dataset)
    full_fn = _pretrain_full_gradient(dataset)
    return _run_training(dataset, net, train_cfg, sample_fn, full_fn,
                         resume_from=resume_from, snapshot_dir=snapshot_dir,
                         snapshot_meta={"pretrain": True,
                                        "train_seed": train_cfg.seed})


# ---- checkpoint files ---------------------------------------------------------


def save_checkpoint(prefix, checkpoint, extra=None):
    """Flat theta tensor file plus JSON metadata; optional ADAM state file."""
    prefix = str(prefix)
    tensorio.save_tensor(prefix + ".theta.f64", checkpoint.net.theta)
    meta = {
        "schema_version": 1,
        "layer_spec_hash": PriorNet.layer_spec_hash(),
        "tau": checkpoint.net.tau,
        "epoch": checkpoint.epoch,
        "iteration": checkpoint.iteration,
        "schedule_position": checkpoint.schedule_position,
        "rng_state": checkpoint.rng_state,
        "metrics": checkpoint.metrics,
        "optimizer_state": None,
    }
    if checkpoint.optimizer_state is not None:
        tensorio.save_tensor(
            prefix + ".opt.f64",
            np.concatenate([checkpoint.optimizer_state["m"],
                            checkpoint.optimizer_state["v"]]))
        meta["optimizer_state"] = {"t": checkpoint.optimizer_state["t"],
                                   "file": prefix + ".opt.f64"}
    if extra:
        meta.update(extra)
    tensorio.save_json(prefix + ".json", meta)


def load_checkpoint(prefix):
    """Returns (Checkpoint, metadata dict). Rejects checkpoints whose layer
    spec hash does not match this code."""
    prefix = str(prefix)
    meta = tensorio.load_json(prefix + ".json")
    if meta.get("schema_version") != 1:
        raise CheckpointError("unsupported checkpoint schema_version")
    if meta.get("layer_spec_hash") != PriorNet.layer_spec_hash():
        raise CheckpointError("checkpoint layer spec does not match this "
                              "network implementation")
    theta = tensorio.load_tensor(prefix + ".theta.f64")
    net = PriorNet(theta=theta, tau=float(meta["tau"]))
    opt_state = None
    if meta.get("optimizer_state"):
        packed = tensorio.load_tensor(meta["optimizer_state"]["file"])
        half = packed.size // 2
        opt_state = {"t": int(meta["optimizer_state"]["t"]),
                     "m": packed[:half], "v": packed[half:]}
    ckpt = Checkpoint(net=net, epoch=int(meta["epoch"]),
                      iteration=int(meta["iteration"]),
                      rng_state=meta["rng_state"],
                      schedule_position=int(meta["schedule_position"]),
                      metrics=meta.get("metrics", {}),
                      optimizer_state=opt_state)
    return ckpt, meta
