"""Sequential neural likelihood with a round-ensemble posterior.

Each round simulates episodes at proposal parameters (prior draws in
round 1, subsampled posterior draws afterwards), retrains the surrogate
on the cumulative pool warm-started from the previous weights, and runs
NUTS on the surrogate posterior.  The returned posterior pools the
chains of the final kept rounds with equal weight, which hedges against
round-to-round training noise.

State is persisted to a directory archive (episode pool, per-round
weights and chains, JSON manifest) and a killed run restarted on the
same archive reproduces the remaining rounds bitwise, because every
random decision draws from a substream named by (seed, round, purpose).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import arnet, diagnostics, mcmc, simulators, smc, surrogate
from .rng import substream
from .simulators import PRIORS, read_episodes, write_episodes
from .surrogate import MODEL_CONFIGS, TrainingDiverged

DIVERGENCE_FLAG_FRACTION = 0.25
MAX_SIM_ATTEMPTS = 1000


@dataclass
class SnlConfig:
    rounds: int = 10
    keep_rounds: int = 5
    prior_draws: int = 10000
    sims_per_round: int = 5000
    mcmc_draws: int = 5000
    warmup: int = 200
    seed: int = 0
    # train each round on at most this many of the most recent episodes
    # (0 = use the whole pool); a window drops the oldest, prior-heavy
    # draws once proposal rounds accumulate, concentrating capacity on
    # the posterior region
    train_window: int = 0

    def __post_init__(self):
        if self.keep_rounds >= self.rounds:
            raise ValueError("keep_rounds must be smaller than rounds")
        if self.train_window < 0:
            raise ValueError("train_window must be nonnegative")

    @property
    def budget(self):
        return self.prior_draws + (self.rounds - 1) * self.sims_per_round


# ---------------------------------------------------------------------------
# proposals and simulation
# ---------------------------------------------------------------------------


def make_proposal(chain_samples, n, prior, rng, inflate=False):
    """Subsample a round's chain (without replacement) into proposal θs.

    ``inflate`` doubles the spread around the chain mean, rejecting
    points that leave the prior support; used for weakly identified
    targets where the next round must cover the posterior tails.
    """
    chain_samples = np.asarray(chain_samples, dtype=np.float64)
    if len(chain_samples) == 0:
        raise ValueError("make_proposal: empty chain")
    if inflate:
        chain_samples = mcmc.inflate_proposals(chain_samples, prior, rng)
    if n <= len(chain_samples):
        idx = rng.choice(len(chain_samples), size=n, replace=False)
    else:
        idx = rng.choice(len(chain_samples), size=n, replace=True)
    return chain_samples[idx]


def simulate_training_episode(model, theta, seed, context=None):
    """One training episode for the surrogate's target conditional law.

    Outbreak models condition on the outbreak progressing past the first
    case (the analytic never-grew probability covers the rest), so
    episodes with no secondary cases are rejected and resimulated.
    """
    context = context or {}
    if model == "sir":
        n_pop = context.get("n_pop", 50)
        max_days = context.get("max_days", 10 * n_pop)
        for attempt in range(MAX_SIM_ATTEMPTS):
            rng = substream(seed, "episode", attempt)
            sub = int(rng.integers(1 << 62))
            ep = simulators.simulate_sir_episode(theta, n_pop, max_days, sub)
            if ep.f0 == 0:
                return ep
        raise RuntimeError("sir episode rejection did not terminate")
    if model == "sir-household":
        for attempt in range(MAX_SIM_ATTEMPTS):
            rng = substream(seed, "episode", attempt)
            size = int(rng.choice(surrogate.HOUSEHOLD_SIZES))
            sub = int(rng.integers(1 << 62))
            ep = simulators.simulate_sir_episode(
                theta, size, context.get("max_days", 60), sub,
                model_name="sir-household", meta_extra={"household": size},
            )
            if ep.f0 == 0:
                return ep
        raise RuntimeError("household episode rejection did not terminate")
    if model == "seiar":
        rng = substream(seed, "episode")
        return simulators.simulate_seiar_episode(
            theta, context.get("n_pop", 350), int(rng.integers(1 << 62))
        )
    if model == "predprey":
        rng = substream(seed, "episode")
        return simulators.simulate_predprey_episode(
            theta,
            context.get("k_cap", 800),
            context.get("r", 0.9),
            np.asarray(context["y0_obs"]),
            int(rng.integers(1 << 62)),
        )
    raise ValueError(f"unknown model {model!r}")


def simulate_round(model, thetas, param_names, seed, round_idx, context=None):
    episodes = []
    for j, th in enumerate(thetas):
        theta = dict(zip(param_names, np.asarray(th, dtype=np.float64)))
        key = int(substream(seed, "snl", round_idx, "sim", j).integers(1 << 62))
        episodes.append(simulate_training_episode(model, theta, key, context))
    return episodes


# ---------------------------------------------------------------------------
# posterior target
# ---------------------------------------------------------------------------


def prior_grad_logpdf(prior, names, x, h=1e-6):
    """Componentwise log-prior derivative by central differences."""
    g = np.zeros(len(names))
    for j, name in enumerate(names):
        g[j] = (prior[name].logpdf(x[j] + h) - prior[name].logpdf(x[j] - h)) / (2 * h)
    return g


def surrogate_posterior_fn(weights, observed_episodes, cfg, spec, prior):
    names = list(prior.keys())
    lik = surrogate.dataset_loglik_fn(weights, observed_episodes, cfg, spec)

    def fn(x):
        lp = sum(prior[k].logpdf(xi) for k, xi in zip(names, x))
        if not np.isfinite(lp):
            return -np.inf, np.zeros(len(x))
        ll, g = lik(x)
        return ll + lp, g + prior_grad_logpdf(prior, names, x)

    return fn


# ---------------------------------------------------------------------------
# archive
# ---------------------------------------------------------------------------


class RoundArchive:
    """Directory-backed persistence of one SNL run."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)

    def _p(self, name):
        return os.path.join(self.path, name)

    def read_manifest(self):
        if not os.path.exists(self._p("manifest.json")):
            return None
        with open(self._p("manifest.json")) as fh:
            return json.load(fh)

    def write_manifest(self, manifest):
        tmp = self._p("manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2)
        os.replace(tmp, self._p("manifest.json"))

    def pool_path(self):
        return self._p("pool.ndjson")

    def append_pool(self, episodes):
        write_episodes(self.pool_path(), episodes, append=True)

    def read_pool(self):
        if not os.path.exists(self.pool_path()):
            return []
        return read_episodes(self.pool_path())

    def save_weights(self, round_idx, weights, spec):
        arnet.save_checkpoint(self._p(f"round_{round_idx:02d}_weights.npz"), spec, weights)

    def load_weights(self, round_idx):
        spec, weights = arnet.load_checkpoint(self._p(f"round_{round_idx:02d}_weights.npz"))
        return weights, spec

    def save_chain(self, round_idx, samples, names):
        smc.write_chain_csv(self._p(f"round_{round_idx:02d}_chain.csv"), samples, names)

    def load_chain(self, round_idx):
        _, data = smc.read_chain_csv(self._p(f"round_{round_idx:02d}_chain.csv"))
        return data

    def save_posterior(self, samples, names):
        smc.write_chain_csv(self._p("posterior.csv"), samples, names)


@dataclass
class SnlResult:
    posterior: np.ndarray     # pooled (keep_rounds * mcmc_draws, P)
    param_names: tuple
    archive: RoundArchive
    round_status: list
    seconds: float
    n_simulated: int


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def run_snl(model, observed_episodes, spec, train_cfg, snl_cfg: SnlConfig,
            archive_path, context=None, progress=None):
    """Run (or resume) SNL and return the pooled posterior.

    ``observed_episodes`` is the dataset whose posterior is sought (a
    list of episodes; a single series is a one-element list).  The
    archive directory is created if needed; if it contains a manifest
    for the same seed and config, completed rounds are reused.
    """
    cfg = MODEL_CONFIGS[model]
    prior = PRIORS[model]()
    names = list(prior.keys())
    archive = RoundArchive(archive_path)
    tv = mcmc.transforms_from_prior(prior)
    t_start = time.time()

    config_snapshot = {
        "model": model, "snl": asdict(snl_cfg), "train": asdict(train_cfg),
        "arch": asdict(spec), "param_names": names, "context": _json_safe(context or {}),
    }
    manifest = archive.read_manifest()
    if manifest is not None and manifest.get("config") != config_snapshot:
        raise ValueError("archive holds a run with a different configuration")
    if manifest is None:
        manifest = {"config": config_snapshot, "rounds": [], "n_simulated": 0}
        archive.write_manifest(manifest)

    pool = archive.read_pool()
    weights = None
    last_good_chain = None
    last_good_round = None
    # replay completed rounds from the archive
    for rec in manifest["rounds"]:
        if rec["status"] in ("ok", "flagged-chain"):
            weights, _ = archive.load_weights(rec["round"])
        if rec["status"] == "ok":
            last_good_chain = archive.load_chain(rec["round"])
            last_good_round = rec["round"]
    start_round = len(manifest["rounds"])

    for round_idx in range(start_round, snl_cfg.rounds):
        rec = {"round": round_idx, "status": "ok"}
        t_round = time.time()
        # 1. proposals
        if round_idx == 0:
            rng_prop = substream(snl_cfg.seed, "snl", round_idx, "proposal")
            thetas = np.array([
                [prior[k].sample(rng_prop) for k in names]
                for _ in range(snl_cfg.prior_draws)
            ])
        else:
            if last_good_chain is None:
                raise RuntimeError("no usable chain to propose from")
            rng_prop = substream(snl_cfg.seed, "snl", round_idx, "proposal")
            thetas = make_proposal(
                last_good_chain[:, : len(names)], snl_cfg.sims_per_round, prior,
                rng_prop, inflate=(model == "sir-household"),
            )
        # 2. simulate and grow the pool
        new_eps = simulate_round(model, thetas, names, snl_cfg.seed, round_idx, context)
        archive.append_pool(new_eps)
        pool.extend(new_eps)
        manifest["n_simulated"] += len(new_eps)
        rec["n_simulated"] = len(new_eps)
        # 3. retrain, warm-started
        try:
            tc = _round_train_cfg(train_cfg, snl_cfg.seed, round_idx)
            train_pool = pool
            if snl_cfg.train_window and len(pool) > snl_cfg.train_window:
                train_pool = pool[-snl_cfg.train_window:]
            new_weights, log_rows = surrogate.train(
                train_pool, cfg, spec, tc, initial_weights=weights,
                log_path=archive._p(f"round_{round_idx:02d}_train.csv"),
            )
            weights = new_weights
            rec["val_nll"] = log_rows[-1]["val_nll"] if log_rows else None
        except TrainingDiverged as exc:
            rec["status"] = "failed-training"
            rec["error"] = str(exc)
            if weights is None:
                raise
        if rec["status"] != "failed-training":
            archive.save_weights(round_idx, weights, spec)
            # 4. sample the surrogate posterior
            target = surrogate_posterior_fn(weights, observed_episodes, cfg, spec, prior)
            x0 = _chain_init(last_good_chain, names, prior, snl_cfg.seed, round_idx)
            res = mcmc.nuts_sample(
                target, x0, snl_cfg.mcmc_draws,
                rng=substream(snl_cfg.seed, "snl", round_idx, "nuts"),
                n_warmup=snl_cfg.warmup, transform=tv,
            )
            rec["divergence_fraction"] = res.divergence_fraction
            rec["accept_stat"] = res.accept_stat
            if res.divergence_fraction > DIVERGENCE_FLAG_FRACTION:
                rec["status"] = "flagged-chain"
            else:
                archive.save_chain(round_idx, res.samples, names)
                last_good_chain = res.samples
                last_good_round = round_idx
        rec["seconds"] = time.time() - t_round
        manifest["rounds"].append(rec)
        archive.write_manifest(manifest)
        if progress:
            progress(rec)

    # pool the final keep_rounds successful chains
    ok_rounds = [r["round"] for r in manifest["rounds"] if r["status"] == "ok"]
    kept = ok_rounds[-snl_cfg.keep_rounds:]
    if not kept:
        raise RuntimeError("snl: no successful rounds to pool")
    pooled = np.concatenate([archive.load_chain(r)[:, : len(names)] for r in kept], axis=0)
    archive.save_posterior(pooled, names)
    manifest["kept_rounds"] = kept
    archive.write_manifest(manifest)
    return SnlResult(
        posterior=pooled, param_names=tuple(names), archive=archive,
        round_status=[r["status"] for r in manifest["rounds"]],
        seconds=time.time() - t_start, n_simulated=manifest["n_simulated"],
    )


def _round_train_cfg(train_cfg, seed, round_idx):
    d = asdict(train_cfg)
    d["seed"] = int(substream(seed, "snl", round_idx, "train-seed").integers(1 << 31))
    return surrogate.TrainConfig(**d)


def _chain_init(last_chain, names, prior, seed, round_idx):
    if last_chain is not None:
        return np.median(last_chain[:, : len(names)], axis=0)
    rng = substream(seed, "snl", round_idx, "init")
    return np.array([prior[k].sample(rng) for k in names])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def snl_summary(result: SnlResult):
    return diagnostics.summarize(result.posterior, result.param_names)
