"""Particle filtering and particle-marginal Metropolis-Hastings.

The bootstrap filter propagates particles through the exact jump-process
dynamics and weights them by the observation density; for outbreak data
observed as exact daily cumulative counts the weights are match
indicators, which is handled by a compiled kernel.  PMMH runs a Gaussian
random walk in unconstrained space on top of the unbiased filter
log-likelihood estimate, with the prior and transform Jacobians folded
into the acceptance ratio.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mcmc import TransformVector, transforms_from_prior
from .rng import stream_key, substream


def sir_pf_loglik(y, n_pop, theta, n_particles, seed):
    """Unbiased SIR log-likelihood estimate for daily cumulative counts.

    ``y`` is the series after the first case (y0 = 1 implicit), theta in
    the (r0, inv_gamma) parameterisation.  The final observation is
    treated as the outbreak's final size (likelihood of a completed
    outbreak).
    """
    gamma = 1.0 / theta["inv_gamma"]
    beta = theta["r0"] * gamma
    return float(_kernels.sir_pf_loglik(
        np.asarray(y, dtype=np.int64), int(n_pop), beta, gamma,
        int(n_particles), np.uint64(seed),
    ))


def bootstrap_loglik(propagate, logweight, n_particles, n_steps, rng):
    """Generic bootstrap filter with systematic resampling.

    propagate(particles, step, rng) -> particles advances every particle
    one observation interval; logweight(particles, step) -> (P,) array
    scores them against observation ``step``.  Returns (loglik,
    died_at): loglik is -inf and died_at the step index if all weights
    vanish, otherwise died_at is None.
    """
    particles = propagate(None, -1, rng)  # step -1 initialises
    loglik = 0.0
    for step in range(n_steps):
        particles = propagate(particles, step, rng)
        lw = np.asarray(logweight(particles, step), dtype=np.float64)
        lw_max = np.max(lw)
        if not np.isfinite(lw_max):
            return -np.inf, step
        w = np.exp(lw - lw_max)
        wsum = float(np.sum(w))
        loglik += lw_max + np.log(wsum / n_particles)
        idx = systematic_resample(w / wsum, rng)
        particles = particles[idx]
    return loglik, None


def systematic_resample(weights, rng):
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions).clip(0, n - 1)


@dataclass
class PmmhResult:
    samples: np.ndarray       # (n, P) constrained space
    logliks: np.ndarray
    accepted: np.ndarray
    accept_rate: float
    seconds: float
    param_names: tuple


def pmmh(loglik_fn, prior, theta0, n_steps, seed=0, step_scale=None,
         adapt_until=None, target_accept=0.25, thin=1):
    """Particle-marginal MH over a dict-of-scalars prior.

    loglik_fn(theta_dict, seed) must return an unbiased log-likelihood
    estimate with fresh auxiliary randomness per call.  The walk runs in
    unconstrained space; during the optional adaptation window the
    global step scale follows a Robbins-Monro recursion toward the
    target acceptance rate.
    """
    names = tuple(prior.keys())
    tv = transforms_from_prior(prior)
    rng = substream(seed, "pmmh")
    x = np.array([theta0[k] for k in names], dtype=np.float64)
    z = tv.inverse(x)
    dim = len(z)
    scale = float(step_scale) if step_scale is not None else 0.5 / np.sqrt(dim)
    adapt_until = adapt_until if adapt_until is not None else n_steps // 4

    def logpost(z_vec, call_idx):
        x_vec = tv.forward(z_vec)
        theta = dict(zip(names, x_vec))
        lp = sum(prior[k].logpdf(theta[k]) for k in names)
        if not np.isfinite(lp):
            return -np.inf, -np.inf
        ll = loglik_fn(theta, stream_key(seed, "pmmh-pf", call_idx))
        return ll + lp + tv.log_jacobian(z_vec), ll

    t0 = time.time()
    cur_post, cur_ll = logpost(z, 0)
    if not np.isfinite(cur_post):
        raise ValueError("pmmh: initial point has zero posterior density")
    n_keep = n_steps // thin
    samples = np.empty((n_keep, dim))
    logliks = np.empty(n_keep)
    accepted = np.zeros(n_steps, dtype=bool)
    kept = 0
    for it in range(n_steps):
        z_prop = z + scale * rng.standard_normal(dim)
        prop_post, prop_ll = logpost(z_prop, it + 1)
        acc = np.log(rng.uniform()) < prop_post - cur_post
        if acc:
            z, cur_post, cur_ll = z_prop, prop_post, prop_ll
        accepted[it] = acc
        if it < adapt_until:
            scale *= np.exp(((1.0 if acc else 0.0) - target_accept) / np.sqrt(it + 1.0))
        if (it + 1) % thin == 0 and kept < n_keep:
            samples[kept] = tv.forward(z)
            logliks[kept] = cur_ll
            kept += 1
    return PmmhResult(
        samples=samples[:kept], logliks=logliks[:kept], accepted=accepted,
        accept_rate=float(np.mean(accepted)), seconds=time.time() - t0,
        param_names=names,
    )


def write_chain_csv(path, samples, param_names, logliks=None, accepted=None):
    cols = list(param_names)
    if logliks is not None:
        cols.append("loglik")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i, row in enumerate(np.atleast_2d(samples)):
            # 17 significant digits round-trip float64 exactly, which the
            # resume path relies on when it reloads a chain from disk
            vals = [f"{v:.17g}" for v in row]
            if logliks is not None:
                vals.append(f"{logliks[i]:.17g}")
            fh.write(",".join(vals) + "\n")


def read_chain_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data
