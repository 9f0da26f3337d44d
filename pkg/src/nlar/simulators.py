"""Stochastic process models, exact simulation, observation processes, priors.

Three continuous-time Markov chains are implemented: the SIR and SEIAR
epidemic models (observed as daily cumulative case counts with an
end-of-series indicator) and a predator-prey model (observed as
binomially thinned counts every two time units).  A generic python
Gillespie simulator serves as the reference implementation and oracle;
dataset generation and particle filtering use the compiled kernels in
:mod:`nlar._kernels`, which implement the same algorithm.

Parameter vectors are dicts keyed by the inference parameterisation
(e.g. R0 and 1/gamma for SIR); reparameterisation helpers convert to the
natural rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels
from .rng import stream_key, substream


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeSeries:
    """One observed realisation.

    ``y`` has shape (tau, d) (d=1 for the outbreak models); ``f`` marks
    the day the final size is first reached (empty/absent when the
    outbreak indicator does not apply or the series was truncated).
    ``f0`` is 1 when the outbreak never progressed past the initial case.
    """

    model: str
    theta: dict
    y: np.ndarray
    y0: np.ndarray
    tau: int
    f: np.ndarray | None = None
    f0: int = 0
    completed: bool = True
    meta: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def d(self):
        return 1 if self.y.ndim == 1 else self.y.shape[1]


def episode_to_json(ep: EpisodeSeries) -> str:
    rec = {
        "model": ep.model,
        "theta": {k: float(v) for k, v in ep.theta.items()},
        "y": ep.y.tolist(),
        "y0": np.asarray(ep.y0).tolist(),
        "tau": int(ep.tau),
        "f": None if ep.f is None else ep.f.tolist(),
        "f0": int(ep.f0),
        "completed": bool(ep.completed),
        "meta": ep.meta,
        "seed": ep.seed,
    }
    return json.dumps(rec)


def episode_from_json(line: str) -> EpisodeSeries:
    rec = json.loads(line)
    return EpisodeSeries(
        model=rec["model"],
        theta=rec["theta"],
        y=np.asarray(rec["y"], dtype=np.int64),
        y0=np.asarray(rec["y0"], dtype=np.int64),
        tau=rec["tau"],
        f=None if rec["f"] is None else np.asarray(rec["f"], dtype=np.int64),
        f0=rec.get("f0", 0),
        completed=rec.get("completed", True),
        meta=rec.get("meta", {}),
        seed=rec.get("seed"),
    )


def write_episodes(path, episodes, append=False):
    with open(path, "a" if append else "w") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")


def read_episodes(path):
    with open(path) as fh:
        return [episode_from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# generic Gillespie
# ---------------------------------------------------------------------------


class CtmcModel:
    """A CTMC given by a rate function and per-event stoichiometry."""

    def __init__(self, rate_fn, stoichiometry):
        self.rate_fn = rate_fn
        self.stoichiometry = np.asarray(stoichiometry, dtype=np.int64)

    def rates(self, state, theta):
        r = np.asarray(self.rate_fn(state, theta), dtype=np.float64)
        if np.any(r < 0):
            raise ValueError(f"negative rate {r} at state {state}")
        return r


def gillespie(model: CtmcModel, theta, x0, horizon, rng):
    """Exact simulation: returns (event_times, states_after_event).

    Terminates at the horizon or at absorption (all rates zero).  The
    initial state is not included in the returned arrays.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    state = np.asarray(x0, dtype=np.int64).copy()
    t = 0.0
    times, states = [], []
    while True:
        rates = model.rates(state, theta)
        total = rates.sum()
        if total == 0.0:
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        event = rng.choice(len(rates), p=rates / total)
        state = state + model.stoichiometry[event]
        times.append(t)
        states.append(state.copy())
    return np.asarray(times), (np.asarray(states) if states else np.zeros((0, len(state)), dtype=np.int64))


def state_at(times, states, x0, t):
    """Left-limit state at time t (events exactly at t excluded)."""
    idx = np.searchsorted(times, t, side="left")
    return np.asarray(x0, dtype=np.int64) if idx == 0 else states[idx - 1]


# ---------------------------------------------------------------------------
# model definitions (rates in the natural parameterisation)
# ---------------------------------------------------------------------------


def sir_model(n_pop):
    def rates(state, theta):
        s, i = state[0], state[1]
        beta, gamma = theta["beta"], theta["gamma"]
        inf = beta * s * i / (n_pop - 1.0) if n_pop > 1 else 0.0
        return [inf, gamma * i]

    # state (S, I); infection and removal
    return CtmcModel(rates, [[-1, 1], [0, -1]])


def seiar_model(n_pop):
    def rates(state, theta):
        z1, z2, z3, z4, z5 = state
        bp, bs, sg, gm, q = (theta[k] for k in ("beta_p", "beta_s", "sigma", "gamma", "q"))
        return [
            (n_pop - z1) * (bp * (z2 - z3) + bs * (z3 - z4)) / n_pop,
            q * sg * (z1 - z2 - z5),
            gm * (z2 - z3),
            gm * (z3 - z4),
            (1.0 - q) * sg * (z1 - z2 - z5),
        ]

    eye = np.eye(5, dtype=np.int64)
    return CtmcModel(rates, eye)


def predprey_model(k_cap):
    def rates(state, theta):
        p, q = state
        return [
            theta["d1"] * p,
            2.0 * theta["b"] * q * (k_cap - p - q) / k_cap,
            2.0 * theta["p2"] * p * q / k_cap + theta["d2"] * q,
            2.0 * theta["p1"] * p * q / k_cap,
        ]

    return CtmcModel(rates, [[-1, 0], [0, 1], [0, -1], [1, -1]])


def sir_natural(theta):
    """(R0, 1/gamma) -> (beta, gamma)."""
    gamma = 1.0 / theta["inv_gamma"]
    return {"beta": theta["r0"] * gamma, "gamma": gamma}


def sir_inference_params(natural):
    return {"r0": natural["beta"] / natural["gamma"], "inv_gamma": 1.0 / natural["gamma"]}


def seiar_natural(theta):
    """(R0, 1/sigma, 1/gamma, kappa, q) -> rates."""
    gamma = 1.0 / theta["inv_gamma"]
    sigma = 1.0 / theta["inv_sigma"]
    total_beta = theta["r0"] * theta["q"] * gamma
    return {
        "beta_p": theta["kappa"] * total_beta,
        "beta_s": (1.0 - theta["kappa"]) * total_beta,
        "sigma": sigma,
        "gamma": gamma,
        "q": theta["q"],
    }


def seiar_inference_params(nat):
    total = nat["beta_p"] + nat["beta_s"]
    return {
        "r0": total / (nat["q"] * nat["gamma"]),
        "inv_sigma": 1.0 / nat["sigma"],
        "inv_gamma": 1.0 / nat["gamma"],
        "kappa": nat["beta_p"] / total,
        "q": nat["q"],
    }


# ---------------------------------------------------------------------------
# observation processes
# ---------------------------------------------------------------------------


def _outbreak_episode(model_name, y_daily, n_days, final_size, completed, theta, meta, seed):
    """Shared post-processing of daily cumulative counts into an episode."""
    if completed and final_size == 1:
        return EpisodeSeries(
            model=model_name, theta=theta, y=np.zeros(0, dtype=np.int64),
            y0=np.asarray(1), tau=0, f=np.zeros(0, dtype=np.int64), f0=1,
            completed=True, meta=meta, seed=seed,
        )
    if completed:
        # the kernel fills post-absorption days with the final count, so
        # search the full daily record: the final size may first be seen
        # on the day after the last pre-absorption observation
        y = y_daily
        tau = int(np.argmax(y == final_size)) + 1
        y = y[:tau]
        f = np.zeros(tau, dtype=np.int64)
        f[tau - 1] = 1
    else:
        y = y_daily[:n_days]
        tau = len(y)
        f = np.zeros(tau, dtype=np.int64)
    return EpisodeSeries(
        model=model_name, theta=theta, y=y.astype(np.int64), y0=np.asarray(1),
        tau=tau, f=f, f0=0, completed=completed, meta=meta, seed=seed,
    )


def simulate_sir_episode(theta, n_pop, max_days, seed, model_name="sir", meta_extra=None):
    nat = sir_natural(theta)
    y, n_days, fsize, completed = _kernels.sir_daily(
        n_pop, nat["beta"], nat["gamma"], max_days, np.uint64(seed)
    )
    meta = {"N": int(n_pop)}
    meta.update(meta_extra or {})
    return _outbreak_episode(model_name, y, n_days, fsize, completed, theta, meta, int(seed))


SEIAR_MAX_DAYS = {350: 70, 500: 80, 1000: 100, 2000: 110}


def seiar_max_days(n_pop):
    return SEIAR_MAX_DAYS.get(int(n_pop), int(np.ceil(0.05 * n_pop + 55)))


def simulate_seiar_episode(theta, n_pop, seed, max_days=None):
    nat = seiar_natural(theta)
    max_days = max_days or seiar_max_days(n_pop)
    y, n_days, fsize, completed = _kernels.seiar_daily(
        n_pop, nat["beta_p"], nat["beta_s"], nat["sigma"], nat["gamma"], nat["q"],
        max_days, np.uint64(seed),
    )
    return _outbreak_episode("seiar", y, n_days, fsize, completed, theta, {"N": int(n_pop)}, int(seed))


def observe_sir(times, states, n_pop, max_days, theta=None, meta=None):
    """Daily cumulative counts from a generic-Gillespie SIR path."""
    x0 = (n_pop - 1, 1)
    absorbed = len(states) > 0 and states[-1][1] == 0
    final = n_pop - (states[-1][0] if len(states) else n_pop - 1)
    y = np.empty(max_days, dtype=np.int64)
    for day in range(1, max_days + 1):
        s_day = state_at(times, states, x0, float(day))
        y[day - 1] = n_pop - s_day[0]
    return _outbreak_episode(
        "sir", y, max_days, int(final), absorbed, theta or {}, meta or {"N": n_pop}, None
    )


def predprey_initial_state(y0, r, rng):
    """Flat-prior posterior draw of the true initial counts given y0."""
    y0 = np.asarray(y0, dtype=np.int64)
    if r >= 1.0:
        return y0.copy()
    extra = rng.negative_binomial(y0 + 1, r)
    return y0 + extra


def observe_predprey(true_states, r, rng):
    """Binomial(truth, r) thinning, independently per species and step."""
    if not (0.0 < r <= 1.0):
        raise ValueError("detection probability must be in (0, 1]")
    if r >= 1.0:
        return true_states.copy()
    return rng.binomial(true_states, r)


def simulate_predprey_episode(theta, k_cap, r, y0_obs, seed, n_obs=100, dt=2.0):
    """One predator-prey training episode anchored at the observed y0."""
    rng = substream(seed, "predprey-obs")
    init = predprey_initial_state(np.asarray(y0_obs), r, rng)
    path = _kernels.predprey_path(
        k_cap, theta["b"], theta["d1"], theta["d2"], theta["p1"], theta["p2"],
        int(init[0]), int(init[1]), n_obs, dt, np.uint64(stream_key(seed, "predprey-path")),
    )
    y = observe_predprey(path[1:], r, rng)
    return EpisodeSeries(
        model="predprey", theta=theta, y=y.astype(np.int64),
        y0=np.asarray(y0_obs, dtype=np.int64), tau=n_obs, f=None,
        completed=True, meta={"K": int(k_cap), "r": float(r)}, seed=int(seed),
    )


def generate_predprey_observation(theta, k_cap, r, init_state, seed, n_obs=100, dt=2.0):
    """Ground-truth data: simulate from a known initial state and thin."""
    path = _kernels.predprey_path(
        k_cap, theta["b"], theta["d1"], theta["d2"], theta["p1"], theta["p2"],
        int(init_state[0]), int(init_state[1]), n_obs, dt,
        np.uint64(stream_key(seed, "predprey-truth")),
    )
    rng = substream(seed, "predprey-truth-obs")
    y_all = observe_predprey(path, r, rng)
    return EpisodeSeries(
        model="predprey", theta=theta, y=y_all[1:].astype(np.int64),
        y0=y_all[0].astype(np.int64), tau=n_obs, f=None, completed=True,
        meta={"K": int(k_cap), "r": float(r)}, seed=int(seed),
    )


def make_household_dataset(h, theta, seed, condition_nf=False, sizes=None):
    """Independent household outbreaks with sizes uniform on {2..7}.

    With ``condition_nf`` the simulation is repeated until the final
    size exceeds 1 (used for training data, where the N_F = 1 and
    size-2 likelihood terms are analytic); household size 2 is excluded
    from training draws for the same reason (pass ``sizes`` explicitly).
    """
    rng = substream(seed, "household-sizes")
    sizes = sizes if sizes is not None else rng.integers(2, 8, size=h)
    episodes = []
    for j in range(h):
        size = int(sizes[j]) if np.ndim(sizes) else int(sizes)
        attempt = 0
        while True:
            ep = simulate_sir_episode(
                theta, size, max_days=60, seed=stream_key(seed, "household", j, attempt),
                model_name="sir-household", meta_extra={"household": size},
            )
            if not condition_nf or ep.f0 == 0:
                break
            attempt += 1
        episodes.append(ep)
    return episodes


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


class TruncatedPrior:
    """A scipy continuous distribution truncated to [lo, hi].

    The log-density includes the truncation normaliser; sampling is by
    inverse CDF so it is deterministic given the generator state.
    """

    def __init__(self, dist, lo=-np.inf, hi=np.inf):
        self.dist = dist
        self.lo, self.hi = lo, hi
        self._cdf_lo = dist.cdf(lo)
        self._cdf_hi = dist.cdf(hi)
        self._log_norm = np.log(self._cdf_hi - self._cdf_lo)

    @property
    def support(self):
        a, b = self.dist.support()
        return max(a, self.lo), min(b, self.hi)

    def sample(self, rng):
        u = rng.uniform(self._cdf_lo, self._cdf_hi)
        return float(self.dist.ppf(u))

    def logpdf(self, x):
        a, b = self.support
        if x < a or x > b:
            return -np.inf
        return float(self.dist.logpdf(x) - self._log_norm)

    def moments(self):
        """Mean and std by quadrature over the truncated support."""
        from scipy.integrate import quad

        a, b = self.support
        lo = a if np.isfinite(a) else self.dist.ppf(1e-12)
        hi = b if np.isfinite(b) else self.dist.isf(1e-12)
        norm = np.exp(self._log_norm)
        mean = quad(lambda x: x * self.dist.pdf(x), lo, hi, limit=200)[0] / norm
        second = quad(lambda x: x * x * self.dist.pdf(x), lo, hi, limit=200)[0] / norm
        return mean, float(np.sqrt(second - mean**2))


def sir_prior():
    return {
        "r0": TruncatedPrior(stats.uniform(0.1, 9.9)),
        "inv_gamma": TruncatedPrior(stats.gamma(10.0, scale=0.5), lo=1.0),
    }


def seiar_prior():
    return {
        "r0": TruncatedPrior(stats.uniform(0.1, 7.9)),
        "inv_sigma": TruncatedPrior(stats.gamma(10.0, scale=0.1), lo=0.1),
        "inv_gamma": TruncatedPrior(stats.gamma(10.0, scale=0.1), lo=0.5),
        "kappa": TruncatedPrior(stats.uniform(0.0, 1.0)),
        "q": TruncatedPrior(stats.uniform(0.5, 0.5)),
    }


def predprey_prior():
    return {
        "b": TruncatedPrior(stats.lognorm(s=0.25, scale=0.25), hi=1.0),
        "d1": TruncatedPrior(stats.lognorm(s=0.5, scale=0.1), hi=1.0),
        "d2": TruncatedPrior(stats.lognorm(s=0.5, scale=0.01), hi=1.0),
        "p1": TruncatedPrior(stats.expon(scale=10.0), lo=0.01),
        "p2": TruncatedPrior(stats.expon(scale=20.0)),
    }


PRIORS = {
    "sir": sir_prior,
    "sir-household": sir_prior,
    "seiar": seiar_prior,
    "predprey": predprey_prior,
}


def prior_sample(model, rng):
    return {name: dist.sample(rng) for name, dist in PRIORS[model]().items()}


def prior_logpdf(model, theta):
    return sum(dist.logpdf(theta[name]) for name, dist in PRIORS[model]().items())
