"""Posterior comparison metrics, ESS, and small exact oracles.

Two samplers targeting the same posterior are compared per parameter by
M (difference of means in units of the prior standard deviation) and
S (ratio of standard deviations minus one).  Chain efficiency is
summarised by an initial-monotone-sequence effective sample size.

The exact oracles operate on small discrete models: a uniformization
filter gives the exact likelihood of daily outbreak counts when the
state space is small enough to enumerate, and ``lemma1_check`` verifies
by brute-force enumeration the identity tying the finite-memory
conditional p(y_i | y_{i-m:i-1}) to the full conditional through a
covariance of past and present latent states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIFORMIZATION_TOL = 1e-12
MAX_FILTER_STATES = 10_000


# ---------------------------------------------------------------------------
# posterior comparison
# ---------------------------------------------------------------------------


def summarize(samples, names):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return {
        name: (float(samples[:, j].mean()), float(samples[:, j].std(ddof=1)))
        for j, name in enumerate(names)
    }


def _check_names(a, b):
    if set(a) != set(b):
        raise ValueError(f"parameter name mismatch: {sorted(a)} vs {sorted(b)}")


def m_metric(summary_a, summary_b, prior_sd):
    """(mean_a - mean_b) / prior_sd, per parameter."""
    _check_names(summary_a, summary_b)
    out = {}
    for name in summary_a:
        sd = prior_sd[name]
        if sd <= 0:
            raise ValueError(f"nonpositive prior sd for {name}")
        out[name] = (summary_a[name][0] - summary_b[name][0]) / sd
    return out


def s_metric(summary_a, summary_b):
    """sd_a / sd_b - 1, per parameter."""
    _check_names(summary_a, summary_b)
    out = {}
    for name in summary_a:
        sd_b = summary_b[name][1]
        if sd_b <= 0:
            raise ValueError(f"nonpositive reference sd for {name}")
        out[name] = summary_a[name][1] / sd_b - 1.0
    return out


# ---------------------------------------------------------------------------
# effective sample size
# ---------------------------------------------------------------------------


@dataclass
class EssEstimate:
    ess: float
    tau: float  # integrated autocorrelation time
    constant: bool = False

    def __float__(self):
        return self.ess


def ess(chain) -> EssEstimate:
    """Initial-monotone-sequence ESS estimate for a scalar chain.

    Autocovariances are summed in adjacent pairs; the sum stops at the
    first nonpositive pair and the pair sequence is forced nonincreasing
    before summation.  A constant chain has no information and is
    reported as ESS 1 with the ``constant`` flag set.
    """
    x = np.asarray(chain, dtype=np.float64)
    n = len(x)
    if n < 10:
        raise ValueError("ess: need at least 10 samples")
    x = x - x.mean()
    var0 = float(np.dot(x, x)) / n
    if var0 == 0.0:
        return EssEstimate(ess=1.0, tau=float(n), constant=True)
    # FFT autocovariances at all lags
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real / n
    rho = acov / acov[0]
    pair_sums = []
    k = 0
    while 2 * k + 1 < n:
        g = rho[2 * k] + rho[2 * k + 1]
        if g <= 0:
            break
        pair_sums.append(g)
        k += 1
    if not pair_sums:
        return EssEstimate(ess=float(n), tau=1.0)
    pair_sums = np.minimum.accumulate(pair_sums)
    tau = max(1.0, 2.0 * float(np.sum(pair_sums)) - 1.0)
    return EssEstimate(ess=min(float(n), n / tau), tau=tau)


def ess_per_second(chain, seconds):
    if seconds <= 0:
        raise ValueError("ess_per_second: need positive runtime")
    return ess(chain).ess / seconds


# ---------------------------------------------------------------------------
# exact small-state-space likelihood
# ---------------------------------------------------------------------------


def uniformized_transition(q_matrix, t=1.0, tol=UNIFORMIZATION_TOL):
    """exp(Qt) for a generator matrix by uniformization.

    P = sum_k Poisson(k; Lambda t) * (I + Q/Lambda)^k, truncated when
    the remaining Poisson tail mass is below ``tol``.
    """
    q_matrix = np.asarray(q_matrix, dtype=np.float64)
    lam = float(np.max(-np.diag(q_matrix)))
    if lam == 0.0:
        return np.eye(len(q_matrix))
    stoch = np.eye(len(q_matrix)) + q_matrix / lam
    mu = lam * t
    log_term = -mu  # log Poisson(0)
    out = np.exp(log_term) * np.eye(len(q_matrix))
    power = np.eye(len(q_matrix))
    accum = np.exp(log_term)
    k = 0
    while accum < 1.0 - tol:
        k += 1
        power = power @ stoch
        log_term += np.log(mu / k)
        w = np.exp(log_term)
        out += w * power
        accum += w
        if k > 100000:
            raise RuntimeError("uniformization failed to converge")
    return out


def _sir_states(n_pop):
    states = []
    for s in range(n_pop):
        for i in range(n_pop - s + 1):
            states.append((s, i))
    return states


def _sir_generator(n_pop, beta, gamma):
    states = _sir_states(n_pop)
    index = {st: j for j, st in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for (s, i), j in index.items():
        if i > 0 and s > 0 and n_pop > 1:
            rate = beta * s * i / (n_pop - 1.0)
            q[j, index[(s - 1, i + 1)]] += rate
            q[j, j] -= rate
        if i > 0:
            q[j, index[(s, i - 1)]] += gamma * i
            q[j, j] -= gamma * i
    return states, index, q


def exact_ctmc_filter(model, episode, theta):
    """Exact log-likelihood of an outbreak episode by dense filtering.

    Supports the SIR observation process: daily cumulative counts
    starting from one case, recorded until the final size is first
    observed (completed episodes multiply in the probability that no
    further infection ever occurs).  Raises if the state space exceeds
    the enumeration budget.
    """
    if model not in ("sir", "sir-household"):
        raise ValueError(f"no exact filter for model {model!r}")
    n_pop = int(episode.meta.get("household", episode.meta.get("N")))
    if n_pop * n_pop > MAX_FILTER_STATES:
        raise ValueError(f"state space too large for N={n_pop}")
    gamma = 1.0 / theta["inv_gamma"]
    beta = theta["r0"] * gamma
    states, index, q = _sir_generator(n_pop, beta, gamma)
    if episode.f0 == 1:
        # the outbreak never grew: the initial case recovered first
        return float(-np.log(theta["r0"] + 1.0))
    p_day = uniformized_transition(q, 1.0)
    v = np.zeros(len(states))
    v[index[(n_pop - 1, 1)]] = 1.0
    loglik = 0.0
    counts = np.array([n_pop - s for s, _ in states])
    for day in range(episode.tau):
        v = v @ p_day
        v = np.where(counts == episode.y[day], v, 0.0)
        mass = float(v.sum())
        if mass <= 0:
            return -np.inf
        loglik += np.log(mass)
        v = v / mass
    if episode.completed:
        end = np.array([
            (gamma / (gamma + beta * s / (n_pop - 1.0))) ** i if n_pop > 1 else 1.0
            for s, i in states
        ])
        loglik += np.log(float(np.dot(v, end)))
    return float(loglik)


def sir_final_size_distribution(n_pop, theta):
    """Exact final-size pmf over {1, ..., N} from the embedded jump chain."""
    gamma = 1.0 / theta["inv_gamma"]
    beta = theta["r0"] * gamma
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def absorb(s, i):
        # probability vector over final sizes starting from (S, I)
        out = np.zeros(n_pop + 1)
        if i == 0:
            out[n_pop - s] = 1.0
            return out
        inf_rate = beta * s / (n_pop - 1.0) if n_pop > 1 else 0.0
        p_inf = inf_rate / (inf_rate + gamma)
        if s > 0 and p_inf > 0:
            out += p_inf * absorb(s - 1, i + 1)
        out += (1.0 - p_inf) * absorb(s, i - 1)
        return out

    return absorb(n_pop - 1, 1)[1:]


# ---------------------------------------------------------------------------
# finite-memory conditional identity
# ---------------------------------------------------------------------------


@dataclass
class Hmm:
    """Finite HMM: y_t emitted from x_t, x_t Markov with initial pi."""

    pi: np.ndarray       # (K,)
    trans: np.ndarray    # (K, K) rows sum to 1
    emit: np.ndarray     # (K, L) rows sum to 1

    def sample(self, n, rng):
        x = rng.choice(len(self.pi), p=self.pi)
        ys = np.empty(n, dtype=np.int64)
        for t in range(n):
            ys[t] = rng.choice(self.emit.shape[1], p=self.emit[x])
            if t + 1 < n:
                x = rng.choice(len(self.pi), p=self.trans[x])
        return ys


def _forward(hmm: Hmm, y):
    """alpha[t, k] = p(y_{1:t+1}, x_{t+1} = k) (0-based times)."""
    alphas = np.empty((len(y), len(hmm.pi)))
    a = hmm.pi * hmm.emit[:, y[0]]
    alphas[0] = a
    for t in range(1, len(y)):
        a = (a @ hmm.trans) * hmm.emit[:, y[t]]
        alphas[t] = a
    return alphas


def lemma1_check(hmm: Hmm, y, m, i):
    """Both sides of the finite-memory conditional identity, enumerated.

    Uses 1-based time indices as in the statement: requires
    m + 1 < i <= len(y).  Returns (ratio_minus_one, covariance) where
    ratio = p(y_i | y_{1:i-1}) / p(y_i | y_{i-m:i-1}) and the covariance
    is over the joint law of (x_i, x_{i-m-1}) given the window
    y_{i-m:i-1}, of the normalised present-emission and past-likelihood
    ratios.
    """
    y = np.asarray(y, dtype=np.int64)
    if not (m + 1 < i <= len(y)):
        raise ValueError("need m + 1 < i <= len(y)")
    k_states = len(hmm.pi)
    if k_states * hmm.emit.shape[1] * len(y) > 1_000_000:
        raise ValueError("enumeration too large")
    t_anchor = i - m - 2  # 0-based index of time i-m-1
    # unconditional marginal of x_{i-m-1}
    p_anchor = hmm.pi.copy()
    for _ in range(t_anchor):
        p_anchor = p_anchor @ hmm.trans
    # window propagator: G[a, b] = p(y_{i-m:i-1}, x_i = b | x_{i-m-1} = a)
    g = np.eye(k_states)
    for t in range(i - m - 1, i - 1):  # 0-based times i-m-1 .. i-2 emit y_{i-m..i-1}
        g = g @ (hmm.trans * hmm.emit[:, y[t]][None, :])
    g = g @ hmm.trans
    joint = p_anchor[:, None] * g  # p(x_{i-m-1}, y_window, x_i)
    p_window = float(joint.sum())
    tilde = joint / p_window  # p(x_{i-m-1}, x_i | y_window)
    # denominator conditional p(y_i | y_{i-m:i-1})
    p_yi_window = float((tilde.sum(axis=0) * hmm.emit[:, y[i - 1]]).sum())
    # full-history conditional from the forward recursion
    alphas = _forward(hmm, y[:i])
    p_full = float(alphas[i - 1].sum()) / float(alphas[i - 2].sum())
    ratio_minus_one = p_full / p_yi_window - 1.0
    # A over x_i, B over x_{i-m-1}
    a_vec = hmm.emit[:, y[i - 1]] / p_yi_window
    if t_anchor >= 0:
        past = y[: t_anchor + 1]
        alphas_past = _forward(hmm, past)
        lik_past = alphas_past[-1] / p_anchor  # p(y_{1:i-m-1} | x_{i-m-1})
    else:
        lik_past = np.ones(k_states)
    marg_anchor = tilde.sum(axis=1)
    denom_b = float(np.dot(marg_anchor, lik_past))
    b_vec = lik_past / denom_b
    mean_a = float(np.dot(tilde.sum(axis=0), a_vec))
    mean_b = float(np.dot(marg_anchor, b_vec))
    e_ab = float(np.sum(tilde * np.outer(b_vec, a_vec)))
    covariance = e_ab - mean_a * mean_b
    return ratio_minus_one, covariance


def random_hmm(rng, max_states=6, max_symbols=6):
    k = int(rng.integers(2, max_states + 1))
    ell = int(rng.integers(2, max_symbols + 1))
    pi = rng.dirichlet(np.ones(k))
    trans = rng.dirichlet(np.ones(k), size=k)
    emit = rng.dirichlet(np.ones(ell), size=k)
    return Hmm(pi=pi, trans=trans, emit=emit)
