"""Command-line front end.

Commands: simulate, train, snl, pmmh, compare, oracle.  Every command
takes an optional JSON config file plus flag overrides; flags win.  Each
artifact directory receives a ``run_manifest.json`` with the fully
resolved configuration, the package version, and the seed, which is
sufficient to re-run the command bitwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, arnet, diagnostics, simulators, smc, snl, surrogate
from .rng import stream_key, substream

DEFAULT_CONTEXTS = {
    "sir": {"n_pop": 50, "max_days": 500},
    "sir-household": {"max_days": 60, "h": 100},
    "seiar": {"n_pop": 350},
    "predprey": {"k_cap": 800, "r": 0.9, "y0_obs": [225, 225]},
}

SEIAR_DATA_THETA = {"r0": 2.2, "inv_sigma": 1.0, "inv_gamma": 1.0, "kappa": 0.7, "q": 0.9}
PREDPREY_DATA_THETA = {"b": 0.26, "d1": 0.1, "d2": 0.01, "p1": 0.13, "p2": 0.05}


def _set_threads(n):
    n = str(n)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)


def load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def write_manifest(out_dir, command, config):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


class UsageError(SystemExit):
    def __init__(self, message):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _resolve(config, args, keys):
    """Merge config-file values with flag overrides (flags win)."""
    out = dict(config)
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            out[key] = val
    return out


def _require_model(model):
    if model not in surrogate.MODEL_CONFIGS or model == "markov":
        raise UsageError(f"model must be one of sir, sir-household, seiar, predprey (got {model!r})")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    config = _resolve(load_config(args.config), args,
                      ["model", "seed", "n", "h", "r", "count", "theta", "out"])
    model = config.get("model")
    _require_model(model)
    seed = int(config.get("seed", 0))
    count = int(config.get("count", 1))
    out = config.get("out")
    if not out:
        raise UsageError("simulate: missing output path (--out)")
    theta = config.get("theta")
    if isinstance(theta, str):
        theta = json.loads(theta)
    context = dict(DEFAULT_CONTEXTS[model])
    if config.get("n"):
        context["n_pop"] = int(config["n"])
    if config.get("r"):
        context["r"] = float(config["r"])
    if config.get("h"):
        context["h"] = int(config["h"])

    rng = substream(seed, "simulate", model)
    prior = simulators.PRIORS[model]()
    episodes = []
    if model == "sir-household":
        for i in range(count):
            th = theta or {k: prior[k].sample(rng) for k in prior}
            episodes.extend(simulators.make_household_dataset(
                context["h"], th, seed=stream_key(seed, "households", i)))
    elif model == "predprey":
        th = theta or dict(PREDPREY_DATA_THETA)
        for i in range(count):
            episodes.append(simulators.generate_predprey_observation(
                th, context["k_cap"], context["r"], (250, 250),
                stream_key(seed, "pp", i)))
    else:
        if theta is None and model == "seiar":
            theta = dict(SEIAR_DATA_THETA)
        for i in range(count):
            th = theta or {k: prior[k].sample(rng) for k in prior}
            episodes.append(snl.simulate_training_episode(
                model, th, stream_key(seed, "episode", i), context))
    simulators.write_episodes(out, episodes)
    out_dir = os.path.dirname(os.path.abspath(out))
    write_manifest(out_dir, "simulate", config)
    print(f"wrote {len(episodes)} episodes to {out}")
    return 0


def _arch_from_config(model, config):
    cfg = surrogate.MODEL_CONFIGS[model]
    arch_over = config.get("arch", {})
    return surrogate.default_arch(cfg, **arch_over)


def cmd_train(args):
    config = _resolve(load_config(args.config), args, ["model", "seed", "data", "out"])
    model = config.get("model")
    _require_model(model)
    if not config.get("data") or not config.get("out"):
        raise UsageError("train: need --data episodes file and --out directory")
    episodes = simulators.read_episodes(config["data"])
    cfg = surrogate.MODEL_CONFIGS[model]
    spec = _arch_from_config(model, config)
    tc = surrogate.TrainConfig(
        seed=int(config.get("seed", 0)),
        batch_size=int(config.get("batch_size", surrogate.BATCH_SIZES.get(model, 512))),
        **{k: config[k] for k in ("learning_rate", "weight_decay", "patience",
                                  "max_epochs", "val_fraction", "lr_decay",
                                  "lr_patience") if k in config},
    )
    os.makedirs(config["out"], exist_ok=True)
    weights, rows = surrogate.train(
        episodes, cfg, spec, tc, log_path=os.path.join(config["out"], "training.csv"))
    arnet.save_checkpoint(os.path.join(config["out"], "weights.npz"), spec, weights)
    write_manifest(config["out"], "train", config)
    best = min(r["val_nll"] for r in rows)
    print(f"trained {len(rows)} epochs, best validation nll {best:.4f}")
    return 0


def cmd_snl(args):
    config = _resolve(load_config(args.config), args, ["model", "seed", "data", "out"])
    model = config.get("model")
    _require_model(model)
    if not config.get("data") or not config.get("out"):
        raise UsageError("snl: need --data observed episodes and --out archive directory")
    observed = simulators.read_episodes(config["data"])
    spec = _arch_from_config(model, config)
    tc = surrogate.TrainConfig(
        seed=int(config.get("seed", 0)),
        batch_size=int(config.get("batch_size", surrogate.BATCH_SIZES.get(model, 512))),
        **{k: config[k] for k in ("learning_rate", "weight_decay", "patience",
                                  "max_epochs", "val_fraction", "lr_decay",
                                  "lr_patience") if k in config},
    )
    sc = snl.SnlConfig(
        seed=int(config.get("seed", 0)),
        **{k: int(config[k]) for k in ("rounds", "keep_rounds", "prior_draws",
                                       "sims_per_round", "mcmc_draws", "warmup",
                                       "train_window")
           if k in config},
    )
    context = dict(DEFAULT_CONTEXTS[model])
    context.update(config.get("context", {}))
    if model == "predprey" and "y0_obs" not in config.get("context", {}):
        context["y0_obs"] = np.asarray(observed[0].y0).tolist()
    write_manifest(config["out"], "snl", config)

    def progress(rec):
        print(f"round {rec['round']}: {rec['status']} ({rec['seconds']:.0f}s)")

    result = snl.run_snl(model, observed, spec, tc, sc, config["out"],
                         context=context, progress=progress)
    summary = diagnostics.summarize(result.posterior, result.param_names)
    with open(os.path.join(config["out"], "summary.json"), "w") as fh:
        json.dump({
            "summary": {k: {"mean": v[0], "sd": v[1]} for k, v in summary.items()},
            "n_simulated": result.n_simulated,
            "seconds": result.seconds,
            "round_status": result.round_status,
        }, fh, indent=2)
    failed = [s for s in result.round_status if s != "ok"]
    print(f"snl finished: {result.n_simulated} simulations, "
          f"{len(failed)} failed rounds, posterior {result.posterior.shape}")
    return 0 if not failed else 1


def cmd_pmmh(args):
    config = _resolve(load_config(args.config), args,
                      ["model", "seed", "data", "out", "steps", "particles"])
    model = config.get("model")
    if model not in ("sir", "sir-household"):
        raise UsageError("pmmh: exact filtering is implemented for sir and sir-household")
    if not config.get("data") or not config.get("out"):
        raise UsageError("pmmh: need --data observed episodes and --out directory")
    observed = simulators.read_episodes(config["data"])
    seed = int(config.get("seed", 0))
    n_particles = int(config.get("particles", 200))
    n_steps = int(config.get("steps", 30000))
    prior = simulators.PRIORS[model]()

    def loglik(theta, pf_seed):
        total = 0.0
        for j, ep in enumerate(observed):
            n_pop = int(ep.meta.get("household", ep.meta.get("N")))
            if ep.f0 == 1:
                total += -np.log(theta["r0"] + 1.0)
                continue
            total += smc.sir_pf_loglik(ep.y, n_pop, theta, n_particles,
                                       (pf_seed + 0x9E3779B97F4A7C15 * (j + 1)) & ((1 << 64) - 1))
            if not np.isfinite(total):
                return -np.inf
        return total

    # a prior draw can sit where the particle filter estimates zero
    # likelihood; redraw the starting point until the chain can start
    rng_init = substream(seed, "pmmh-init")
    result = None
    for attempt in range(100):
        theta0 = {k: prior[k].sample(rng_init) for k in prior}
        try:
            result = smc.pmmh(loglik, prior, theta0, n_steps, seed=seed)
            break
        except ValueError as exc:
            if "zero posterior density" not in str(exc):
                raise
    if result is None:
        raise UsageError("pmmh: no finite-likelihood starting point found")
    os.makedirs(config["out"], exist_ok=True)
    smc.write_chain_csv(os.path.join(config["out"], "chain.csv"),
                        result.samples, result.param_names, result.logliks)
    with open(os.path.join(config["out"], "summary.json"), "w") as fh:
        summary = diagnostics.summarize(result.samples, result.param_names)
        json.dump({
            "summary": {k: {"mean": v[0], "sd": v[1]} for k, v in summary.items()},
            "accept_rate": result.accept_rate,
            "seconds": result.seconds,
        }, fh, indent=2)
    write_manifest(config["out"], "pmmh", config)
    print(f"pmmh finished: accept rate {result.accept_rate:.3f}, {result.seconds:.0f}s")
    return 0


def cmd_compare(args):
    config = _resolve(load_config(args.config), args,
                      ["model", "snl_archive", "pmmh_chain", "out"])
    model = config.get("model")
    _require_model(model)
    for key in ("snl_archive", "pmmh_chain", "out"):
        if not config.get(key):
            raise UsageError(f"compare: missing --{key.replace('_', '-')}")
    snl_names, snl_samples = smc.read_chain_csv(
        os.path.join(config["snl_archive"], "posterior.csv"))
    pmmh_names, pmmh_data = smc.read_chain_csv(config["pmmh_chain"])
    param_names = [n for n in pmmh_names if n != "loglik"]
    if set(snl_names) != set(param_names):
        raise UsageError(f"parameter mismatch: {snl_names} vs {param_names}")
    pmmh_samples = pmmh_data[:, [pmmh_names.index(n) for n in param_names]]
    snl_samples = snl_samples[:, [snl_names.index(n) for n in param_names]]

    prior = simulators.PRIORS[model]()
    prior_sd = {k: prior[k].moments()[1] for k in param_names}
    s_snl = diagnostics.summarize(snl_samples, param_names)
    s_pmmh = diagnostics.summarize(pmmh_samples, param_names)
    m = diagnostics.m_metric(s_snl, s_pmmh, prior_sd)
    s = diagnostics.s_metric(s_snl, s_pmmh)

    os.makedirs(config["out"], exist_ok=True)
    with open(os.path.join(config["out"], "metrics.csv"), "w") as fh:
        fh.write("parameter,M,S,mean_snl,sd_snl,mean_pmmh,sd_pmmh,ess_snl,ess_pmmh\n")
        for name in param_names:
            j = param_names.index(name)
            e_snl = diagnostics.ess(snl_samples[:, j]).ess
            e_pmmh = diagnostics.ess(pmmh_samples[:, j]).ess
            fh.write(f"{name},{m[name]:.6g},{s[name]:.6g},"
                     f"{s_snl[name][0]:.6g},{s_snl[name][1]:.6g},"
                     f"{s_pmmh[name][0]:.6g},{s_pmmh[name][1]:.6g},"
                     f"{e_snl:.6g},{e_pmmh:.6g}\n")
    with open(os.path.join(config["out"], "metrics.json"), "w") as fh:
        json.dump({"M": m, "S": s}, fh, indent=2)
    # tidy samples for the plotting component
    with open(os.path.join(config["out"], "samples.csv"), "w") as fh:
        fh.write("source,parameter,value\n")
        for name in param_names:
            j = param_names.index(name)
            for v in snl_samples[:, j]:
                fh.write(f"snl,{name},{v:.8g}\n")
            for v in pmmh_samples[:, j]:
                fh.write(f"pmmh,{name},{v:.8g}\n")
    write_manifest(config["out"], "compare", config)
    for name in param_names:
        print(f"{name}: M = {m[name]:+.4f}  S = {s[name]:+.4f}")
    return 0


def cmd_oracle(args):
    """Run the exact small-model oracles as a quick self check."""
    seed = int(args.seed or 0)
    rng = substream(seed, "oracle")
    worst = 0.0
    for _ in range(100):
        hmm = diagnostics.random_hmm(rng)
        n = int(rng.integers(4, 9))
        m = min(int(rng.integers(1, 5)), n - 2)
        y = hmm.sample(n, rng)
        i = int(rng.integers(m + 2, n + 1))
        lhs, cov = diagnostics.lemma1_check(hmm, y, m, i)
        worst = max(worst, abs(lhs - cov))
    print(f"finite-memory identity: worst |lhs - cov| = {worst:.3e}")
    theta = {"r0": 2.0, "inv_gamma": 1.5}
    fs = diagnostics.sir_final_size_distribution(3, theta)
    print(f"final-size pmf sum (N=3): {fs.sum():.12f}")
    fs2 = diagnostics.sir_final_size_distribution(2, theta)
    print(f"extinction probability (N=2): {fs2[0]:.12f} "
          f"(analytic {1.0 / (theta['r0'] + 1.0):.12f})")
    return 0 if worst < 1e-10 else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nlar",
        description="Autoregressive surrogate likelihoods for integer time series",
    )
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("NLAR_THREADS", 0)) or None)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--model", choices=["sir", "sir-household", "seiar", "predprey"])
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="write episode files")
    common(p)
    p.add_argument("--n", type=int, help="population size")
    p.add_argument("--h", type=int, help="number of households")
    p.add_argument("--r", type=float, help="detection probability")
    p.add_argument("--count", type=int, help="number of datasets/episodes")
    p.add_argument("--theta", help="JSON dict of fixed parameters")
    p.add_argument("--out", help="output ND-JSON path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="fit the surrogate on an episode file")
    common(p)
    p.add_argument("--data", help="episodes ND-JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("snl", help="run sequential neural likelihood")
    common(p)
    p.add_argument("--data", help="observed episodes ND-JSON")
    p.add_argument("--out", help="archive directory (resumable)")
    p.set_defaults(fn=cmd_snl)

    p = sub.add_parser("pmmh", help="particle-marginal MCMC reference run")
    common(p)
    p.add_argument("--data", help="observed episodes ND-JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--particles", type=int)
    p.set_defaults(fn=cmd_pmmh)

    p = sub.add_parser("compare", help="M/S/ESS metrics between SNL and PMMH")
    common(p)
    p.add_argument("--snl-archive", dest="snl_archive")
    p.add_argument("--pmmh-chain", dest="pmmh_chain")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("oracle", help="run the exact-model self checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        _set_threads(args.threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
