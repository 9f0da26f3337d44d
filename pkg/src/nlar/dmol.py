"""Discretised (optionally truncated) mixtures of logistic distributions.

A Logistic(mu, s) variable X is discretised by floor, so
P(floor(X) = n) = F(n+1) - F(n) with F the logistic CDF.  Truncating to
[a, b] multiplies the pmf by C = 1 / (F(b) - F(a)); under floor
discretisation the truncated support is the integers {a, ..., b-1} (note
the off-by-one: b itself is excluded).

Everything is computed in log space via the identity

    F(beta') - F(alpha') = sigmoid(beta') * sigmoid(-alpha') * (1 - e^{alpha'-beta'})

with alpha' = (a-mu)/s, beta' = (b-mu)/s, which never overflows for
s in [1e-6, 1e6] and |n-mu| up to 1e6.  All functions accept either
plain numpy arrays or tape variables from :mod:`nlar.diffcore`, so the
same code serves training and the brute-force oracles.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc

EPS_SCALE = 1e-6  # lower bound added to every scale parameter


def log_cdf_diff(alpha, beta):
    """log(F(beta) - F(alpha)) for standardised bounds beta > alpha."""
    return dc.log_sigmoid(beta) + dc.log_sigmoid(dc.neg(alpha)) + dc.log1mexp(dc.sub(beta, alpha))


def logistic_cdf(x, mu, s):
    """Logistic CDF; raises if any scale is nonpositive."""
    if np.any(dc._val(s) <= 0):
        raise ValueError("logistic_cdf: scale must be positive")
    return dc.sigmoid(dc.div(dc.sub(x, mu), s))


def discretized_logpmf(n, mu, s):
    """log P(floor(X) = n) for X ~ Logistic(mu, s)."""
    if np.any(dc._val(s) <= 0):
        raise ValueError("discretized_logpmf: scale must be positive")
    inv_s = dc.div(1.0, s)
    alpha = dc.mul(dc.sub(n, mu), inv_s)
    return log_cdf_diff(alpha, dc.add(alpha, inv_s))


def log_truncation_factor(a, b, mu, s):
    """log C with C = 1 / (F(b) - F(a)); support is {a, ..., b-1}."""
    inv_s = dc.div(1.0, s)
    alpha = dc.mul(dc.sub(a, mu), inv_s)
    beta = dc.mul(dc.sub(b, mu), inv_s)
    return dc.neg(log_cdf_diff(alpha, beta))


def truncation_factor(a, b, mu, s):
    """C = 1 / (F(b) - F(a)).  Raises on degenerate truncation."""
    if np.any(np.asarray(b) <= np.asarray(a)):
        raise ValueError("truncation_factor: need b > a")
    if np.any(dc._val(s) <= 0):
        raise ValueError("truncation_factor: scale must be positive")
    log_c = log_truncation_factor(a, b, mu, s)
    log_c_val = dc._val(log_c)
    if not np.all(np.isfinite(log_c_val)) or np.any(log_c_val > 700.0):
        raise FloatingPointError("truncation_factor: F(b) - F(a) underflowed")
    return dc.exp(log_c)


def mixture_logpmf(n, mu, s, log_w, trunc_a=None, trunc_b=None):
    """log-pmf of a DMoL at integer n.

    mu, s, log_w carry the mixture axis last; n and the optional
    truncation bounds broadcast against the leading axes.  log_w must be
    normalised (e.g. via log_softmax).
    """
    n_b = dc.reshape(n, np.shape(dc._val(n)) + (1,)) if np.ndim(dc._val(n)) == np.ndim(dc._val(mu)) - 1 else n
    comp = discretized_logpmf(n_b, mu, s)
    if trunc_a is not None:
        a_b = _expand_like(trunc_a, mu)
        b_b = _expand_like(trunc_b, mu)
        comp = dc.add(comp, log_truncation_factor(a_b, b_b, mu, s))
    return dc.logsumexp(dc.add(log_w, comp), axis=-1)


def _expand_like(x, ref):
    xv = dc._val(x)
    if np.ndim(xv) == np.ndim(dc._val(ref)) - 1:
        return dc.reshape(x, np.shape(xv) + (1,))
    return x


def params_from_output(o, y_prev, head, c, population=None, scale=60.0):
    """Map network outputs to DMoL parameters for one feature block.

    o: (..., 3c) raw outputs; y_prev: (...) previous observation.
    Heads:
      * ``default``:   mu = y_prev + o_mu, s = softplus(o_s) + eps
      * ``outbreak``:  mu = o_mu*N + (1-o_mu)*y_prev,
                       s = (N - y_prev)*softplus(o_s) + eps,
                       truncated to support {y_prev, ..., N}
      * ``scaled``:    mu = y_prev + scale*o_mu, s = scale*softplus(o_s) + eps
    Returns (mu, s, log_w, trunc_a, trunc_b); truncation entries are None
    for untruncated heads.
    """
    o_mu = dc.slice_axis(o, -1, 0, c)
    o_s = dc.slice_axis(o, -1, c, 2 * c)
    o_w = dc.slice_axis(o, -1, 2 * c, 3 * c)
    prev = _expand_like(y_prev, o_mu)
    log_w = dc.log_softmax(o_w, axis=-1)
    if head == "default":
        mu = dc.add(prev, o_mu)
        s = dc.add(dc.softplus(o_s), EPS_SCALE)
        return mu, s, log_w, None, None
    if head == "outbreak":
        if population is None:
            raise ValueError("outbreak head needs population size")
        n_pop = np.asarray(population, dtype=np.float64)
        pop_b = _expand_like(n_pop, o_mu) if n_pop.ndim == np.ndim(dc._val(o_mu)) - 1 else n_pop
        mu = dc.add(dc.mul(o_mu, pop_b), dc.mul(dc.sub(1.0, o_mu), prev))
        s = dc.add(dc.mul(dc.sub(pop_b, prev), dc.softplus(o_s)), EPS_SCALE)
        # floor-discretised support {y_prev, ..., N}  =>  bounds [y_prev, N+1)
        prev_v = dc._val(y_prev)
        trunc_b = np.broadcast_to(n_pop + 1.0, np.broadcast_shapes(prev_v.shape, n_pop.shape))
        return mu, s, log_w, prev_v, trunc_b
    if head == "scaled":
        mu = dc.add(prev, dc.mul(scale, o_mu))
        s = dc.add(dc.mul(scale, dc.softplus(o_s)), EPS_SCALE)
        return mu, s, log_w, None, None
    raise ValueError(f"unknown head {head!r}")
