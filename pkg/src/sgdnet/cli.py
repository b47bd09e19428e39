"""Command line front end.

Subcommands: gen-data (synthesize phantoms, measurements, inits), train /
pretrain (checkpoint + trace CSV), reconstruct (tensor outputs + metric
CSV for any method), theory (assumption checks and the theorem sweep), and
bench (wall-clock scaling with minibatch size).

Exit codes: 0 success, 2 bad arguments or config, 3 I/O failure,
4 training divergence, 5 checkpoint/method mismatch, 6 empirical tolerance
failure. Every command is deterministic given (config, seed, input files)
in single-job mode, modulo wallclock columns.
"""

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import tensorio
from .baselines import (REDConfig, TVConfig, red_fixed_point,
                        train_denoiser, tv_apgm)
from .configs import (ConfigError, THEORY_SCHEMA, load_config,
                      train_config_from, unfold_config_from)
from .metrics import MetricReport, snr_db, ssim, write_metrics_csv
from .operators import bp_init, fbp_init, model_from_config
from .phantoms import make_phantoms
from .theory import (SweepProblem, ToleranceFailure,
                     check_phi_unbiasedness,
                     check_training_gradient_unbiasedness,
                     check_variance_scaling, evaluate_sweep, theorem1_sweep,
                     write_sweep_csvs, _problem_net)
from .training import (CheckpointError, Dataset, DivergenceError,
                       TrainConfig, load_checkpoint,
                       pretrain_artifact_removal, save_checkpoint,
                       train_unfolded)
from .unfolding import PriorNet, UnfoldConfig, sgdnet_forward, ured_forward

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CKPT = 5
EXIT_TOLERANCE = 6


class DataError(RuntimeError):
    """Dataset or artifact files missing or malformed."""


class MethodError(RuntimeError):
    """Reconstruction method incompatible with the given inputs."""


def _jobs_cap(requested):
    cap = os.environ.get("UNFOLD_SGD_THREADS")
    jobs = max(1, int(requested))
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return jobs


def _parse_snr(text):
    if text is None:
        return None
    if str(text).lower() in ("inf", "+inf", "none"):
        return float("inf")
    return float(text)


def _parse_b(text):
    return "full" if str(text).lower() == "full" else int(text)


# ---- dataset files ----------------------------------------------------------


def _write_dataset(out_dir, model_cfg, truths, dataset, snr_db_value, seed,
                   noise_seed, init_kind):
    os.makedirs(out_dir, exist_ok=True)
    images = []
    for j, (x, y, x0) in enumerate(zip(dataset.truths, dataset.measurements,
                                       dataset.inits)):
        tname = f"truth_{j:04d}.f64"
        iname = f"init_{j:04d}.f64"
        mdir = f"meas_{j:04d}"
        tensorio.save_tensor(os.path.join(out_dir, tname), x)
        tensorio.save_tensor(os.path.join(out_dir, iname), x0)
        tensorio.save_measurement_set(os.path.join(out_dir, mdir), y)
        images.append({
            "id": j,
            "truth": tname,
            "truth_sha256": tensorio.file_sha256(os.path.join(out_dir,
                                                              tname)),
            "init": iname,
            "init_sha256": tensorio.file_sha256(os.path.join(out_dir,
                                                             iname)),
            "measurements": mdir,
        })
    manifest = {
        "schema_version": 1,
        "model": model_cfg,
        "count": len(images),
        "snr_db": tensorio._encode_optional_float(snr_db_value),
        "seed": seed,
        "noise_seed": noise_seed,
        "init": init_kind,
        "images": images,
    }
    tensorio.save_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_dataset(data_dir):
    """(model, Dataset, manifest) from a gen-data output directory."""
    try:
        manifest = tensorio.load_json(os.path.join(data_dir,
                                                   "manifest.json"))
        if manifest.get("schema_version") != 1:
            raise DataError(f"unsupported dataset schema in {data_dir}")
        model = model_from_config(manifest["model"])
        truths, msets, inits = [], [], []
        for entry in manifest["images"]:
            truths.append(tensorio.load_tensor(
                os.path.join(data_dir, entry["truth"])))
            inits.append(tensorio.load_tensor(
                os.path.join(data_dir, entry["init"])))
            msets.append(tensorio.load_measurement_set(
                os.path.join(data_dir, entry["measurements"])))
        return model, Dataset(truths, msets, inits), manifest
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot load dataset {data_dir}: {err}") from err


def _cmd_gen_data(args):
    snr = _parse_snr(args.snr_db)
    model_cfg = {"kind": args.kind, "size": args.size,
                 "components": args.components, "seed": args.seed}
    if args.detectors is not None:
        if args.kind != "radon":
            raise ConfigError("--detectors only applies to radon models")
        model_cfg["detectors"] = args.detectors
    model = model_from_config(model_cfg)
    init_kind = args.init or ("fbp" if args.kind == "radon" else "bp-mean")
    truths = make_phantoms(args.size, args.count, args.seed)
    noise_seed = args.seed + 1
    dataset = Dataset.from_truths(truths, model, snr_db=snr,
                                  noise_seed=noise_seed, init=init_kind)
    _write_dataset(args.out, model_cfg, truths, dataset, snr, args.seed,
                   noise_seed, init_kind)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


# ---- training commands --------------------------------------------------------


def _initial_net(cfg, tcfg):
    unfold = cfg["unfold"]
    warm = cfg.get("paths", {}).get("warm_start")
    if warm:
        ckpt, _ = load_checkpoint(warm)
        net = ckpt.net
    else:
        net = PriorNet.init_random(
            seed=np.random.SeedSequence([int(tcfg.seed), 555]))
    if "tau0" in unfold:
        net.tau = float(unfold["tau0"])
    return net


def _check_problem_matches(cfg, manifest):
    prob = cfg["problem"]
    mcfg = manifest["model"]
    for key in ("kind", "size", "components"):
        if prob[key] != mcfg[key]:
            raise ConfigError(
                f"config problem.{key}={prob[key]} does not match dataset "
                f"({mcfg[key]})")


def _cmd_train(args):
    cfg = load_config(args.config)
    data_dir = cfg.get("paths", {}).get("data")
    if not data_dir:
        raise ConfigError("train needs paths.data in the config")
    model, dataset, manifest = load_dataset(data_dir)
    _check_problem_matches(cfg, manifest)
    ucfg = unfold_config_from(cfg["unfold"], model.n_components)
    tcfg = train_config_from(cfg["train"])
    net = _initial_net(cfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    resume = None
    if args.resume:
        resume, _ = load_checkpoint(args.resume)
    try:
        ckpt, trace = train_unfolded(dataset, model, net, ucfg, tcfg,
                                     resume_from=resume,
                                     snapshot_dir=args.out)
    except DivergenceError as err:
        if err.checkpoint is not None:
            save_checkpoint(os.path.join(args.out, "diverged"),
                            err.checkpoint)
        if err.trace is not None:
            err.trace.to_csv(os.path.join(args.out, "trace.csv"))
        raise
    save_checkpoint(os.path.join(args.out, "checkpoint"), ckpt,
                    extra={"trained": "unfolded",
                           "unfold": cfg["unfold"],
                           "train": cfg["train"]})
    trace.to_csv(os.path.join(args.out, "trace.csv"))
    print(f"checkpoint written to {args.out} "
          f"(final loss {trace.rows[-1]['loss']:.6g})"
          if trace.rows else f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args):
    cfg = load_config(args.config)
    data_dir = cfg.get("paths", {}).get("data")
    if not data_dir:
        raise ConfigError("pretrain needs paths.data in the config")
    model, dataset, manifest = load_dataset(data_dir)
    _check_problem_matches(cfg, manifest)
    tcfg = train_config_from(cfg["train"])
    net = _initial_net(cfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    resume = None
    if args.resume:
        resume, _ = load_checkpoint(args.resume)
    ckpt, trace = pretrain_artifact_removal(dataset, net, tcfg,
                                            resume_from=resume,
                                            snapshot_dir=args.out)
    save_checkpoint(os.path.join(args.out, "checkpoint"), ckpt,
                    extra={"trained": "pretrain", "train": cfg["train"]})
    trace.to_csv(os.path.join(args.out, "trace.csv"))
    print(f"pretrain checkpoint written to {args.out}")
    return EXIT_OK


# ---- reconstruction -----------------------------------------------------------


def _unfold_cfg_for_reconstruct(args, meta, model):
    unfold_meta = meta.get("unfold") or {}
    q_steps = args.q_steps if args.q_steps is not None \
        else int(unfold_meta.get("q_steps", 8))
    gamma = args.gamma if args.gamma is not None \
        else float(unfold_meta.get("gamma", 5e-3))
    return q_steps, gamma


def _reconstruct_one(method, x0, y, model, args, net, meta, image_seed):
    if method == "bp":
        return bp_init(y, model)
    if method == "fbp":
        try:
            return fbp_init(y, model)
        except ValueError as err:
            raise MethodError(str(err)) from err
    if method == "tv":
        cfg = TVConfig(tau_tv=args.tau_tv, outer_iters=args.tv_iters)
        return tv_apgm(y, model, cfg).image
    if method == "red":
        cfg = REDConfig(tau_red=args.red_tau, iterations=args.red_iters,
                        denoiser=net)
        return red_fixed_point(y, model, cfg, x0=x0).image
    q_steps, gamma = _unfold_cfg_for_reconstruct(args, meta, model)
    if method == "ured":
        ucfg = UnfoldConfig(q_steps=q_steps, gamma=gamma,
                            minibatch=model.n_components, mode="full-batch")
        return ured_forward(x0, y, model, net, ucfg).final
    # sgdnet
    test_b = _parse_b(args.test_b) if args.test_b is not None else "full"
    if test_b == "full":
        minibatch = model.n_components
        mode = args.mode or "full-batch"
    else:
        minibatch = test_b
        mode = args.mode or "stochastic"
    ucfg = UnfoldConfig(q_steps=q_steps, gamma=gamma, minibatch=minibatch,
                        mode=mode, seed=image_seed)
    return sgdnet_forward(x0, y, model, net, ucfg).final


def _cmd_reconstruct(args):
    method = args.method
    model, dataset, manifest = load_dataset(args.input)
    net, meta = None, {}
    if method in ("sgdnet", "ured", "red"):
        if not args.ckpt:
            raise MethodError(f"method {method} needs --ckpt")
        ckpt, meta = load_checkpoint(args.ckpt)
        net = ckpt.net
    elif args.ckpt:
        raise MethodError(f"method {method} does not take a checkpoint")
    os.makedirs(args.out, exist_ok=True)
    entries = []
    estimates = []
    for j in range(dataset.m):
        xhat = _reconstruct_one(method, dataset.inits[j],
                                dataset.measurements[j], model, args, net,
                                meta, args.seed + j)
        estimates.append(xhat)
        tensorio.save_tensor(os.path.join(args.out, f"recon_{j:04d}.f64"),
                             xhat)
        entries.append({"image_id": j, "method": method,
                        "snr_db": snr_db(xhat, dataset.truths[j]),
                        "ssim": ssim(xhat, dataset.truths[j],
                                     dynamic_range=1.0)})
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), entries)
    report = MetricReport.from_pairs(estimates, dataset.truths)
    tensorio.save_json(os.path.join(args.out, "summary.json"),
                       {"schema_version": 1, "method": method,
                        "count": dataset.m, **report.aggregates})
    print(f"{method}: mean SNR {report.aggregates['snr_mean']:.2f} dB, "
          f"mean SSIM {report.aggregates['ssim_mean']:.4f}")
    return EXIT_OK


# ---- theory -------------------------------------------------------------------


def _theory_probes(problem, dataset, count=5):
    rng = np.random.default_rng(
        np.random.SeedSequence([problem.data_seed, 909]))
    probes = [dataset.inits[0], dataset.truths[0]]
    while len(probes) < count:
        probes.append(rng.standard_normal(dataset.truths[0].shape))
    return probes[:count]


def _cmd_theory(args):
    cfg = load_config(args.config, THEORY_SCHEMA) if args.config else {}
    problem = SweepProblem(**cfg.get("problem", {}))
    out = args.out or cfg.get("out")
    if args.check == "theorem1":
        traces = theorem1_sweep(problem,
                                cfg.get("b_list", [1, 5, 20]),
                                cfg.get("k_list", [250, 4000]),
                                cfg.get("seeds", [0, 1, 2, 3, 4]),
                                root_seed=cfg.get("root_seed", 0),
                                out_dir=out, jobs=_jobs_cap(args.jobs))
        verdict = evaluate_sweep(traces)
        if out:
            tensorio.save_json(os.path.join(out, "verdict.json"), verdict)
        for check in verdict["checks"]:
            print(("pass" if check["passed"] else "FAIL"),
                  check["name"], sep="  ")
        if not verdict["passed"]:
            raise ToleranceFailure("theorem sweep trends violated")
        return EXIT_OK
    model, dataset = problem.build()
    if args.check == "unbiasedness":
        report = check_phi_unbiasedness(model, dataset.measurements[0],
                                        _theory_probes(problem, dataset))
    elif args.check == "variance":
        report = check_variance_scaling(model, dataset.measurements[0],
                                        _theory_probes(problem, dataset, 2),
                                        cfg.get("b_list", [1, 2, 5, 10]),
                                        n_draws=cfg.get("n_draws", 10000),
                                        seed=cfg.get("root_seed", 0))
    elif args.check == "assumption3":
        net = _problem_net(problem, cfg.get("root_seed", 0))
        ucfg = UnfoldConfig(q_steps=problem.q_steps, gamma=problem.gamma,
                            minibatch=model.n_components, mode="full-batch")
        report = check_training_gradient_unbiasedness(dataset, model, net,
                                                      ucfg)
    else:
        raise ConfigError(f"unknown theory check: {args.check}")
    payload = {"schema_version": 1, "check": report.check,
               "max_deviation": report.max_deviation,
               "sigma_sq": report.sigma_sq,
               "variance_rows": report.variance_rows,
               "epsilon_sq": report.epsilon_sq,
               "tolerances": report.tolerances,
               "passed": report.passed}
    if out:
        os.makedirs(out, exist_ok=True)
        tensorio.save_json(os.path.join(out, "report.json"), payload)
    print(f"{report.check}: {'pass' if report.passed else 'FAIL'}")
    report.require()
    return EXIT_OK


# ---- bench --------------------------------------------------------------------


def bench_timings(b_list, repeats, size=32, components=60, q_steps=8,
                  gamma=5e-3, m_samples=4, seed=0, detectors=None):
    """Wall-clock of one unfolded forward pass and one training epoch per
    minibatch size. Returns rows sorted by effective B.

    detectors defaults to 32 * size: detector-rich views make the
    per-component cost dominate the fixed per-step network cost, which is
    the regime the cost-scaling claims are about. Each (B, kind) cell is
    preceded by one untimed warm-up evaluation."""
    if detectors is None:
        detectors = 32 * size
    model = model_from_config({"kind": "radon", "size": size,
                               "components": components,
                               "detectors": int(detectors), "seed": seed})
    truths = make_phantoms(size, m_samples, seed + 1)
    dataset = Dataset.from_truths(truths, model, init="fbp")
    net = PriorNet.init_random(seed=seed, weight_scale=0.25)
    rows = []
    for b in b_list:
        full = (b == "full")
        minibatch = components if full else int(b)
        mode = "full-batch" if full else "stochastic"
        ucfg = UnfoldConfig(q_steps=q_steps, gamma=gamma,
                            minibatch=minibatch, mode=mode, seed=seed)
        fwd = []
        for rep in range(int(repeats) + 1):
            t0 = time.perf_counter()
            sgdnet_forward(dataset.inits[0], dataset.measurements[0], model,
                           net, ucfg)
            if rep > 0:
                fwd.append(time.perf_counter() - t0)
        tcfg = TrainConfig(epochs=1,
                           schedule={"kind": "constant", "eta": 1e-9},
                           seed=seed)
        epoch = []
        for rep in range(int(repeats) + 1):
            t0 = time.perf_counter()
            train_unfolded(dataset, model, net.copy(), ucfg, tcfg)
            if rep > 0:
                epoch.append(time.perf_counter() - t0)
        rows.append({"b": minibatch, "mode": mode,
                     "forward_mean_s": float(np.mean(fwd)),
                     "forward_std_s": float(np.std(fwd)),
                     "epoch_mean_s": float(np.mean(epoch)),
                     "epoch_std_s": float(np.std(epoch)),
                     "repeats": int(repeats)})
    rows.sort(key=lambda r: r["b"])
    return rows


def _cmd_bench(args):
    b_list = [_parse_b(tok) for tok in args.minibatch_sizes.split(",")]
    rows = bench_timings(b_list, args.repeats, size=args.size,
                         components=args.components, q_steps=args.q_steps,
                         seed=args.seed, detectors=args.detectors)
    lines = [",".join(["b", "mode", "forward_mean_s", "forward_std_s",
                       "epoch_mean_s", "epoch_std_s", "repeats"])]
    for r in rows:
        lines.append(",".join([str(r["b"]), r["mode"],
                               repr(r["forward_mean_s"]),
                               repr(r["forward_std_s"]),
                               repr(r["epoch_mean_s"]),
                               repr(r["epoch_std_s"]),
                               str(r["repeats"])]))
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sgdnet",
                                description="Unfolded stochastic-gradient "
                                            "reconstruction experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset")
    g.add_argument("--kind", choices=["radon", "conv"], required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--components", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--snr-db", default="inf")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--detectors", type=int, default=None)
    g.add_argument("--init", choices=["bp", "bp-mean", "fbp"], default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    for name, fn in (("train", _cmd_train), ("pretrain", _cmd_pretrain)):
        t = sub.add_parser(name, help=f"{name} from a JSON config")
        t.add_argument("--config", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--resume", default=None,
                       help="checkpoint prefix to continue from")
        t.set_defaults(func=fn)

    r = sub.add_parser("reconstruct", help="run a reconstruction method")
    r.add_argument("--method", required=True,
                   choices=["sgdnet", "ured", "tv", "red", "fbp", "bp"])
    r.add_argument("--input", required=True, help="dataset directory")
    r.add_argument("--out", required=True)
    r.add_argument("--ckpt", default=None, help="checkpoint prefix")
    r.add_argument("--test-B", dest="test_b", default=None,
                   help="minibatch size at evaluation; int or 'full'")
    r.add_argument("--mode", choices=["stochastic", "full-batch"],
                   default=None)
    r.add_argument("--q-steps", type=int, default=None)
    r.add_argument("--gamma", type=float, default=None)
    r.add_argument("--tau-tv", type=float, default=0.1)
    r.add_argument("--tv-iters", type=int, default=120)
    r.add_argument("--red-tau", type=float, default=1.0)
    r.add_argument("--red-iters", type=int, default=240)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=_cmd_reconstruct)

    th = sub.add_parser("theory", help="assumption checks / theorem sweep")
    th.add_argument("--check", required=True,
                    choices=["unbiasedness", "variance", "assumption3",
                             "theorem1"])
    th.add_argument("--config", default=None)
    th.add_argument("--out", default=None)
    th.add_argument("--jobs", type=int, default=1)
    th.set_defaults(func=_cmd_theory)

    b = sub.add_parser("bench", help="wall-clock scaling with B")
    b.add_argument("--minibatch-sizes", required=True,
                   help="comma list, ints or 'full'")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--size", type=int, default=32)
    b.add_argument("--components", type=int, default=60)
    b.add_argument("--q-steps", type=int, default=8)
    b.add_argument("--detectors", type=int, default=None,
                   help="bins per view (default 32*size)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, MethodError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CKPT
    except ToleranceFailure as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TOLERANCE
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
