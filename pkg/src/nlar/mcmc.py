"""Gradient-based MCMC in unconstrained space.

The sampler is the multinomial no-U-turn variant of Hamiltonian Monte
Carlo: trajectories are doubled until the termination criterion fires,
and the next state is drawn from the whole trajectory with weights
proportional to the canonical density.  Step size is adapted by dual
averaging to a target acceptance statistic, and a diagonal mass matrix
is estimated from a warmup window.

Constrained parameters are handled by smooth bijections with analytic
log-Jacobians, so the target density seen by the sampler is
log pi(x(z)) + log |dx/dz|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import substream

MAX_TREE_DEPTH = 10
DELTA_MAX = 1000.0  # divergence threshold on energy error


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


class Identity:
    lo, hi = -np.inf, np.inf

    def forward(self, z):  # unconstrained -> constrained
        return z

    def inverse(self, x):
        return x

    def log_jacobian(self, z):
        return 0.0

    def d_log_jacobian(self, z):
        return 0.0


class LogShift:
    """x = a + exp(z), for supports (a, inf)."""

    def __init__(self, a=0.0):
        self.a = float(a)
        self.lo, self.hi = float(a), np.inf

    def forward(self, z):
        return self.a + np.exp(z)

    def inverse(self, x):
        if np.any(np.asarray(x) <= self.a):
            raise ValueError(f"value outside support ({self.a}, inf)")
        return np.log(x - self.a)

    def log_jacobian(self, z):
        return z

    def d_log_jacobian(self, z):
        return 1.0


class LogitAffine:
    """x = a + (b - a) sigmoid(z), for supports (a, b)."""

    def __init__(self, a, b):
        self.a, self.b = float(a), float(b)
        self.lo, self.hi = float(a), float(b)

    def forward(self, z):
        return self.a + (self.b - self.a) / (1.0 + np.exp(-z))

    def inverse(self, x):
        if np.any(np.asarray(x) <= self.a) or np.any(np.asarray(x) >= self.b):
            raise ValueError(f"value outside support ({self.a}, {self.b})")
        p = (x - self.a) / (self.b - self.a)
        return np.log(p) - np.log1p(-p)

    def log_jacobian(self, z):
        return np.log(self.b - self.a) - z - 2.0 * np.log1p(np.exp(-z))

    def d_log_jacobian(self, z):
        return -1.0 + 2.0 / (1.0 + np.exp(z))


class TransformVector:
    """Componentwise stack of scalar transforms."""

    def __init__(self, transforms):
        self.transforms = list(transforms)

    def __len__(self):
        return len(self.transforms)

    def forward(self, z):
        return np.array([t.forward(zi) for t, zi in zip(self.transforms, z)])

    def inverse(self, x):
        return np.array([t.inverse(xi) for t, xi in zip(self.transforms, x)])

    def log_jacobian(self, z):
        return float(sum(t.log_jacobian(zi) for t, zi in zip(self.transforms, z)))

    def d_log_jacobian(self, z):
        return np.array([t.d_log_jacobian(zi) for t, zi in zip(self.transforms, z)])


def transforms_from_prior(prior):
    """Transform stack matching the supports of a dict of scalar priors."""
    out = []
    for comp in prior.values():
        lo, hi = comp.support
        if np.isfinite(lo) and np.isfinite(hi):
            out.append(LogitAffine(lo, hi))
        elif np.isfinite(lo):
            out.append(LogShift(lo))
        else:
            out.append(Identity())
    return TransformVector(out)


def make_unconstrained_target(logpost_and_grad, tv: TransformVector):
    """Wrap a constrained-space (value, grad) callable for the sampler."""

    def fn(z):
        x = tv.forward(z)
        v, g = logpost_and_grad(x)
        # chain rule: dx/dz is diagonal with entries exp(log_jac components)
        dxdz = np.array([
            np.exp(t.log_jacobian(zi)) if not isinstance(t, Identity) else 1.0
            for t, zi in zip(tv.transforms, z)
        ])
        return v + tv.log_jacobian(z), g * dxdz + tv.d_log_jacobian(z)

    return fn


# ---------------------------------------------------------------------------
# NUTS
# ---------------------------------------------------------------------------


@dataclass
class NutsResult:
    samples: np.ndarray        # (n, dim), constrained space if tv given
    samples_unconstrained: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    accept_stat: float
    divergence_fraction: float
    tree_depths: np.ndarray
    n_grad_evals: int


class _Target:
    def __init__(self, fn):
        self.fn = fn
        self.n_evals = 0

    def __call__(self, z):
        self.n_evals += 1
        v, g = self.fn(z)
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(v):
            return -np.inf, np.zeros_like(g)
        return float(v), g


def _leapfrog(target, z, r, grad, eps, inv_mass):
    r1 = r + 0.5 * eps * grad
    z1 = z + eps * inv_mass * r1
    v1, g1 = target(z1)
    r1 = r1 + 0.5 * eps * g1
    return z1, r1, v1, g1


def _find_initial_step(target, z0, inv_mass, rng):
    eps = 1.0
    v0, g0 = target(z0)
    r0 = rng.standard_normal(len(z0)) / np.sqrt(inv_mass)
    h0 = v0 - 0.5 * float(np.sum(inv_mass * r0 * r0))
    z1, r1, v1, _ = _leapfrog(target, z0, r0, g0, eps, inv_mass)
    h1 = v1 - 0.5 * float(np.sum(inv_mass * r1 * r1))
    diff = h1 - h0
    direction = 1.0 if diff > np.log(0.5) else -1.0
    for _ in range(60):
        eps *= 2.0**direction
        z1, r1, v1, _ = _leapfrog(target, z0, r0, g0, eps, inv_mass)
        h1 = v1 - 0.5 * float(np.sum(inv_mass * r1 * r1))
        if not np.isfinite(h1):
            h1 = -np.inf
        if direction * (h1 - h0) <= direction * np.log(0.5):
            break
    return eps


class _Tree:
    __slots__ = (
        "z_minus", "r_minus", "g_minus", "z_plus", "r_plus", "g_plus",
        "z_prop", "g_prop", "v_prop", "log_weight", "sum_accept", "n_accept",
        "diverged", "turned",
    )


def _build_tree(target, z, r, grad, direction, depth, eps, inv_mass, h0, rng):
    if depth == 0:
        z1, r1, v1, g1 = _leapfrog(target, z, r, grad, direction * eps, inv_mass)
        h1 = v1 - 0.5 * float(np.sum(inv_mass * r1 * r1))
        if not np.isfinite(h1):
            h1 = -np.inf
        t = _Tree()
        t.z_minus = t.z_plus = t.z_prop = z1
        t.r_minus = t.r_plus = r1
        t.g_minus = t.g_plus = t.g_prop = g1
        t.v_prop = v1
        t.log_weight = h1 - h0
        t.sum_accept = min(1.0, np.exp(h1 - h0))
        t.n_accept = 1
        t.diverged = (h0 - h1) > DELTA_MAX
        t.turned = False
        return t
    first = _build_tree(target, z, r, grad, direction, depth - 1, eps, inv_mass, h0, rng)
    if first.diverged or first.turned:
        return first
    if direction == 1:
        second = _build_tree(
            target, first.z_plus, first.r_plus, first.g_plus, direction,
            depth - 1, eps, inv_mass, h0, rng,
        )
        first.z_plus, first.r_plus, first.g_plus = second.z_plus, second.r_plus, second.g_plus
    else:
        second = _build_tree(
            target, first.z_minus, first.r_minus, first.g_minus, direction,
            depth - 1, eps, inv_mass, h0, rng,
        )
        first.z_minus, first.r_minus, first.g_minus = second.z_minus, second.r_minus, second.g_minus
    total = np.logaddexp(first.log_weight, second.log_weight)
    if np.isfinite(second.log_weight) and np.log(rng.uniform()) < second.log_weight - total:
        first.z_prop, first.g_prop, first.v_prop = second.z_prop, second.g_prop, second.v_prop
    first.log_weight = total
    first.sum_accept += second.sum_accept
    first.n_accept += second.n_accept
    first.diverged = second.diverged
    dz = first.z_plus - first.z_minus
    first.turned = second.turned or (
        float(np.dot(dz, inv_mass * first.r_minus)) < 0
        or float(np.dot(dz, inv_mass * first.r_plus)) < 0
    )
    return first


def _nuts_step(target, z, v, grad, eps, inv_mass, rng):
    r = rng.standard_normal(len(z)) / np.sqrt(inv_mass)
    h0 = v - 0.5 * float(np.sum(inv_mass * r * r))
    z_minus = z_plus = z_prop = z
    r_minus = r_plus = r
    g_minus = g_plus = g_prop = grad
    v_prop = v
    log_weight = 0.0  # weight of the initial point relative to itself
    sum_accept, n_accept = 0.0, 0
    diverged = False
    depth = 0
    while depth < MAX_TREE_DEPTH:
        direction = 1 if rng.uniform() < 0.5 else -1
        if direction == 1:
            tree = _build_tree(target, z_plus, r_plus, g_plus, 1, depth, eps, inv_mass, h0, rng)
        else:
            tree = _build_tree(target, z_minus, r_minus, g_minus, -1, depth, eps, inv_mass, h0, rng)
        sum_accept += tree.sum_accept
        n_accept += tree.n_accept
        if tree.diverged:
            diverged = True
            break
        if tree.turned:
            break
        # biased progressive sampling: new subtree vs whole current tree
        if np.isfinite(tree.log_weight) and np.log(rng.uniform()) < tree.log_weight - log_weight:
            z_prop, g_prop, v_prop = tree.z_prop, tree.g_prop, tree.v_prop
        log_weight = np.logaddexp(log_weight, tree.log_weight)
        if direction == 1:
            z_plus, r_plus, g_plus = tree.z_plus, tree.r_plus, tree.g_plus
        else:
            z_minus, r_minus, g_minus = tree.z_minus, tree.r_minus, tree.g_minus
        dz = z_plus - z_minus
        if (
            float(np.dot(dz, inv_mass * r_minus)) < 0
            or float(np.dot(dz, inv_mass * r_plus)) < 0
        ):
            depth += 1
            break
        depth += 1
    accept_stat = sum_accept / max(1, n_accept)
    return z_prop, v_prop, g_prop, accept_stat, depth, diverged


def nuts_sample(logpost_and_grad, z0, n_samples, rng=None, seed=0, n_warmup=200,
                target_accept=0.8, transform: TransformVector | None = None,
                progress=None):
    """Draw from a log density given a (value, gradient) callable.

    ``logpost_and_grad`` acts on constrained space if ``transform`` is
    given (the sampler then works in unconstrained coordinates and the
    returned samples are mapped back), otherwise directly on z.
    Warmup adapts the step size by dual averaging and estimates a
    diagonal mass matrix from the second half of the warmup draws;
    warmup draws are discarded.
    """
    rng = rng if rng is not None else substream(seed, "nuts")
    z0 = np.asarray(z0, dtype=np.float64)
    if transform is not None:
        raw = logpost_and_grad
        z0 = transform.inverse(z0)
        target_fn = make_unconstrained_target(raw, transform)
    else:
        target_fn = logpost_and_grad
    target = _Target(target_fn)
    dim = len(z0)
    inv_mass = np.ones(dim)

    def adapt_run(z, inv_mass, n_adapt, n_keep):
        eps = _find_initial_step(target, z, inv_mass, rng)
        mu = np.log(10.0 * eps)
        log_eps_bar, h_bar = 0.0, 0.0
        gamma_da, t0_da, kappa_da = 0.05, 10.0, 0.75
        v, g = target(z)
        draws = np.empty((n_adapt + n_keep, dim))
        stats = np.empty(n_adapt + n_keep)
        depths = np.empty(n_adapt + n_keep, dtype=np.int64)
        divs = np.zeros(n_adapt + n_keep, dtype=bool)
        for it in range(n_adapt + n_keep):
            z, v, g, astat, depth, div = _nuts_step(target, z, v, g, eps, inv_mass, rng)
            draws[it] = z
            stats[it] = astat
            depths[it] = depth
            divs[it] = div
            if it < n_adapt:
                frac = 1.0 / (it + 1 + t0_da)
                h_bar = (1 - frac) * h_bar + frac * (target_accept - astat)
                log_eps = mu - np.sqrt(it + 1.0) / gamma_da * h_bar
                eta = (it + 1.0) ** (-kappa_da)
                log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
                eps = np.exp(log_eps)
            elif it == n_adapt:
                eps = np.exp(log_eps_bar)
        return z, np.exp(log_eps_bar), draws, stats, depths, divs

    # phase 1: adapt step size with unit mass, estimate mass from the draws
    half = max(50, n_warmup // 2)
    z, eps, draws, _, _, _ = adapt_run(z0, inv_mass, n_warmup - half, half)
    var = np.var(draws[-half:], axis=0, ddof=1)
    inv_mass = np.where(var > 1e-12, var, 1.0)
    # phase 2: re-adapt step size under the new metric, then sample
    z, eps, draws, stats, depths, divs = adapt_run(z, inv_mass, n_warmup, n_samples)
    keep = slice(n_warmup, None)
    zs = draws[keep]
    xs = np.array([transform.forward(zz) for zz in zs]) if transform is not None else zs
    return NutsResult(
        samples=xs,
        samples_unconstrained=zs,
        step_size=float(eps),
        inv_mass=inv_mass,
        accept_stat=float(np.mean(stats[keep])),
        divergence_fraction=float(np.mean(divs[keep])),
        tree_depths=depths[keep],
        n_grad_evals=target.n_evals,
    )


def inflate_proposals(samples, prior, rng, factor=2.0):
    """Double the spread of pooled posterior draws around their mean.

    Inflated points falling outside the prior support are redrawn by
    rejection from the inflation step (the original point is kept if
    200 attempts all land outside).
    """
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    out = np.empty_like(samples)
    scale = np.sqrt(factor)
    los = np.array([c.support[0] for c in prior.values()])
    his = np.array([c.support[1] for c in prior.values()])
    for i, x in enumerate(samples):
        y = mean + scale * (x - mean)
        tries = 0
        while (np.any(y <= los) or np.any(y >= his)) and tries < 200:
            base = samples[rng.integers(len(samples))]
            y = mean + scale * (base - mean)
            tries += 1
        out[i] = x if (np.any(y <= los) or np.any(y >= his)) else y
    return out
