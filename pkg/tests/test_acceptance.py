"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line (bypassing capture) so the
suite's verdict is readable from the test log, then asserts.  The heavy
posterior-comparison runs use reduced but honest budgets; tolerances are
pinned in-line next to each check.
"""

import time

import numpy as np
import pytest

from nlar import arnet, diagnostics, dmol, mcmc, simulators, smc, snl, surrogate
from nlar import diffcore as dc
from nlar.rng import stream_key, substream
from nlar.simulators import EpisodeSeries


def _report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)


# ---------------------------------------------------------------------------
# A5: structural invariants of the network and the discretised likelihood
# ---------------------------------------------------------------------------


def _random_small_spec(rng, d):
    return arnet.ArchSpec(
        kernel_length=int(rng.integers(2, 4)),
        residual_blocks=int(rng.integers(0, 3)),
        hidden_per_feature=int(rng.integers(2, 5)),
        feature_count=d,
        mixture_components=int(rng.integers(1, 3)),
        context_hidden=4,
        context_dim=3,
        context_inputs=2,
        extra_channels=int(rng.integers(0, 2)),
    )


def test_a5_structural_invariants(capsys):
    rng = substream(0, "a5")
    # causality and receptive field, bitwise over random configurations
    causal_violations = 0
    for _ in range(10):
        d = int(rng.integers(1, 3))
        spec = _random_small_spec(rng, d)
        w = arnet.init_weights(spec, rng)
        m = spec.receptive_field
        length = m + 6
        x = rng.standard_normal((1, length, d))
        enc = rng.standard_normal((1, 2))
        base = arnet.forward(x, enc, w, spec)
        t = m + 2
        # future perturbation: outputs at positions <= t unchanged bitwise
        x2 = x.copy()
        x2[0, t + 1 :] += rng.standard_normal((length - t - 1, d))
        out2 = arnet.forward(x2, enc, w, spec)
        if not np.array_equal(base[:, : t + 1], out2[:, : t + 1]):
            causal_violations += 1
        # current-step perturbation: main channels at t never read x[t]
        x3 = x.copy()
        x3[0, t] += 1.0
        out3 = arnet.forward(x3, enc, w, spec)
        main = spec.feature_count * 3 * spec.mixture_components
        first_block = 3 * spec.mixture_components
        if not np.array_equal(base[0, t, :first_block], out3[0, t, :first_block]):
            causal_violations += 1
        # beyond the receptive field: output at t unchanged bitwise
        x4 = x.copy()
        x4[0, t - m - 1] += 2.0
        out4 = arnet.forward(x4, enc, w, spec)
        if not np.array_equal(base[0, t, :main], out4[0, t, :main]):
            causal_violations += 1

    # d = 1 mask reduction identity
    spec1 = arnet.ArchSpec(feature_count=1, hidden_per_feature=4,
                           mixture_components=2, extra_channels=1)
    masks = arnet.build_masks(spec1)
    d1_ok = (
        np.array_equal(masks["first"], np.ones((1, 4)))
        and np.array_equal(masks["hidden"], np.ones((4, 4)))
        and np.array_equal(masks["final"][:, :6], np.zeros((4, 6)))
        and np.array_equal(masks["final"][:, 6:], np.ones((4, 1)))
    )

    # DMoL normalization
    worst_norm = 0.0
    for _ in range(20):
        mu = rng.uniform(-5, 25)
        s = rng.uniform(0.05, 8.0)
        ks = np.arange(int(mu - 60 * s - 40), int(mu + 60 * s + 40))
        total = np.exp(dmol.discretized_logpmf(ks, mu, s)).sum()
        worst_norm = max(worst_norm, abs(total - 1.0))
        a, b = int(mu - 3), int(mu + 5)
        lt = dmol.mixture_logpmf(
            np.arange(a, b), np.full(b - a, mu), np.full(b - a, s),
            np.zeros(b - a), trunc_a=np.full(b - a, a), trunc_b=np.full(b - a, b),
        )
        worst_norm = max(worst_norm, abs(np.exp(lt).sum() - 1.0))

    # autodiff vs central differences across 50 random configurations
    worst_grad = 0.0
    for i in range(50):
        name = ("markov", "sir", "predprey")[i % 3]
        cfg = surrogate.MODEL_CONFIGS[name]
        spec = _random_small_spec(rng, cfg.d)
        spec = arnet.ArchSpec(**{**spec.__dict__,
                                 "context_inputs": cfg.enc_width,
                                 "extra_channels": 1 if cfg.has_f else 0})
        w = arnet.init_weights(spec, rng)
        if name == "markov":
            ep = EpisodeSeries(model=name, theta={}, y=rng.integers(3, 9, size=5),
                               y0=np.asarray(5), tau=5)
        elif name == "sir":
            ep = EpisodeSeries(model=name, theta={"r0": 2.0, "inv_gamma": 1.5},
                               y=np.array([2, 3, 5]), y0=np.asarray(1), tau=3,
                               f=np.array([0, 0, 1]), f0=0, completed=True,
                               meta={"N": 10})
        else:
            y = np.cumsum(rng.integers(0, 3, size=(4, 2)), axis=0) + 50
            ep = EpisodeSeries(model=name, theta=dict(zip(cfg.param_names, np.full(5, 0.1))),
                               y=y, y0=np.asarray([50, 50]), tau=4)
        batch = surrogate.prepare_batch([ep], cfg)
        keys = list(w.keys())

        def f(*tensors):
            wd = dict(zip(keys, tensors))
            return dc.sum_(surrogate.batch_loglik(wd, batch.theta, batch, cfg, spec))

        # two-step sweep: the optimal difference step depends on the local
        # curvature, and either roundoff or truncation can dominate
        err = min(dc.gradient_check(f, [w[k] for k in keys], step=h,
                                    scale_floor=1.0)
                  for h in (1e-4, 1e-5))
        worst_grad = max(worst_grad, err)

    ok = (causal_violations == 0 and d1_ok
          and worst_norm < 1e-9 and worst_grad < 1e-5)
    _report(capsys, "A5", ok,
            f"causality violations {causal_violations}, d1 masks {'ok' if d1_ok else 'BAD'}, "
            f"pmf norm err {worst_norm:.1e}, grad err {worst_grad:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# A3: finite-memory conditional identity on enumerable hidden Markov models
# ---------------------------------------------------------------------------


def test_a3_finite_memory_identity(capsys):
    t0 = time.time()
    rng = substream(1, "a3")
    worst = 0.0
    for _ in range(100):
        hmm = diagnostics.random_hmm(rng, max_states=6, max_symbols=6)
        n = int(rng.integers(4, 9))
        m = min(int(rng.integers(1, 5)), n - 2)
        y = hmm.sample(n, rng)
        i = int(rng.integers(m + 2, n + 1))
        lhs, cov = diagnostics.lemma1_check(hmm, y, m, i)
        worst = max(worst, abs(lhs - cov))
    elapsed = time.time() - t0
    ok = worst < 1e-10 and elapsed <= 60
    _report(capsys, "A3", ok,
            f"worst |ratio-1 - cov| = {worst:.2e} over 100 HMMs in {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# A6: sampler calibration on targets with known posteriors
# ---------------------------------------------------------------------------


def test_a6_sampler_calibration(capsys):
    rho = 0.9
    prec = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))

    def lp(z):
        return -0.5 * float(z @ prec @ z), -prec @ z

    res = mcmc.nuts_sample(lp, np.array([1.0, -1.0]), 5000, seed=0, n_warmup=500)
    mean_err = np.abs(res.samples.mean(axis=0)).max()
    cov = np.cov(res.samples.T)
    cov_err = max(abs(cov[0, 0] - 1.0), abs(cov[1, 1] - 1.0),
                  abs(cov[0, 1] - rho) / rho)

    rng = substream(2, "a6")
    n_obs, tau2 = 50, 100.0
    y = 1.3 + rng.standard_normal(n_obs)
    post_var = 1.0 / (n_obs + 1.0 / tau2)
    post_mean = post_var * y.sum()
    from scipy import stats
    prior = {"mu": simulators.TruncatedPrior(stats.norm(0.0, 10.0))}

    def loglik(theta, seed):
        return float(-0.5 * np.sum((y - theta["mu"]) ** 2))

    pm = smc.pmmh(loglik, prior, {"mu": 0.0}, n_steps=8000, seed=3)
    chain = pm.samples[:, 0]
    mc_se = chain.std() / np.sqrt(diagnostics.ess(chain).ess)
    pmmh_err = abs(chain.mean() - post_mean)

    ok = mean_err < 0.05 and cov_err < 0.10 and pmmh_err < 3 * mc_se
    _report(capsys, "A6", ok,
            f"NUTS mean err {mean_err:.3f} (<0.05), cov err {cov_err:.3f} (<0.10); "
            f"PMMH mean err {pmmh_err:.4f} vs 3 MC SE {3 * mc_se:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# A2: analytic likelihood cross-checks
# ---------------------------------------------------------------------------


def test_a2_analytic_crosschecks(capsys):
    theta = {"r0": 2.0, "inv_gamma": 1.5}
    # (a) extinction probability against direct stochastic simulation
    n_runs = 100_000
    extinct = sum(
        simulators.simulate_sir_episode(theta, 10, 100, seed=stream_key(4, "a2", s)).f0
        for s in range(n_runs)
    )
    p_hat = extinct / n_runs
    p = 1.0 / (theta["r0"] + 1.0)
    se = np.sqrt(p * (1 - p) / n_runs)
    ext_err = abs(p_hat - p)

    # (b) size-2 household likelihood: closed form vs exact filter vs PF
    worst_exact = 0.0
    worst_pf_sigma = 0.0
    for tau in (1, 3, 6):
        y = np.concatenate([np.ones(tau - 1, dtype=np.int64), [2]])
        ep = EpisodeSeries(
            model="sir-household", theta=theta, y=y, y0=np.asarray(1), tau=tau,
            f=np.eye(tau, dtype=np.int64)[-1], f0=0, completed=True,
            meta={"household": 2},
        )
        closed = float(dc._val(surrogate.outbreak_analytic_terms(
            np.array([theta["r0"], theta["inv_gamma"]]), ep,
            surrogate.MODEL_CONFIGS["sir-household"])))
        exact = diagnostics.exact_ctmc_filter("sir-household", ep, theta)
        worst_exact = max(worst_exact, abs(closed - exact))
        reps = 50
        lw = np.array([
            smc.sir_pf_loglik(ep.y, 2, theta, 2000, stream_key(5, "a2pf", tau, r))
            for r in range(reps)
        ])
        ratios = np.exp(lw - exact)
        se_mc = ratios.std(ddof=1) / np.sqrt(reps)
        worst_pf_sigma = max(worst_pf_sigma, abs(ratios.mean() - 1.0) / max(se_mc, 1e-12))

    ok = ext_err < 3 * se and worst_exact < 1e-10 and worst_pf_sigma < 3.0
    _report(capsys, "A2", ok,
            f"extinction err {ext_err:.5f} vs 3SE {3 * se:.5f}; "
            f"size-2 closed-vs-exact {worst_exact:.1e} (<1e-10); "
            f"PF deviation {worst_pf_sigma:.2f} sigma (<3)")
    assert ok


# ---------------------------------------------------------------------------
# A4: training fidelity on an order-1 integer Markov chain
# ---------------------------------------------------------------------------


def _a4_true_params(y_prev):
    w2 = 1.0 / (1.0 + np.exp(-(12.0 - y_prev) / 3.0))
    return [(1.0 - w2, y_prev - 1.0, 0.8), (w2, y_prev + 2.0, 1.2)]


def _a4_true_pmf(y_prev, ks):
    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    pmf = np.zeros(len(ks))
    for w, mu, s in _a4_true_params(y_prev):
        pmf += w * (sig((ks + 1 - mu) / s) - sig((ks - mu) / s))
    return pmf


def _a4_sample_next(y_prev, rng):
    comps = _a4_true_params(y_prev)
    u = rng.uniform()
    w, mu, s = comps[0] if u < comps[0][0] else comps[1]
    v = rng.uniform()
    return int(np.floor(mu + s * np.log(v / (1.0 - v))))


def _a4_episode(seed, length=20):
    rng = substream(seed, "a4-ep")
    y0 = 10
    y = np.empty(length, dtype=np.int64)
    prev = y0
    for t in range(length):
        prev = _a4_sample_next(prev, rng)
        y[t] = prev
    return EpisodeSeries(model="markov", theta={}, y=y, y0=np.asarray(y0), tau=length)


def test_a4_training_fidelity(capsys):
    t0 = time.time()
    cfg = surrogate.MODEL_CONFIGS["markov"]
    spec = surrogate.default_arch(cfg)
    episodes = [_a4_episode(s) for s in range(30_000)]
    tc = surrogate.TrainConfig(batch_size=512, max_epochs=25, patience=5, seed=0)
    weights, rows = surrogate.train(episodes, cfg, spec, tc)

    # learned one-step conditional at fresh contexts, against the truth
    rng = substream(6, "a4-ctx")
    contexts = []
    for s in range(150):
        ep = _a4_episode(100_000 + s)
        t = int(rng.integers(2, ep.tau))
        contexts.append((ep.y[:t], ep.y[t - 1]))
    offsets = np.arange(-6, 10)
    prefix_eps, cand_eps = [], []
    for prefix, y_prev in contexts:
        prefix_eps.append(EpisodeSeries(model="markov", theta={}, y=prefix,
                                        y0=np.asarray(10), tau=len(prefix)))
        for off in offsets:
            y_ext = np.concatenate([prefix, [y_prev + off]])
            cand_eps.append(EpisodeSeries(model="markov", theta={}, y=y_ext,
                                          y0=np.asarray(10), tau=len(y_ext)))
    masks = arnet.build_masks(spec)
    pb = surrogate.prepare_batch(prefix_eps, cfg)
    ll_prefix = surrogate.batch_loglik(weights, pb.theta, pb, cfg, spec, masks)
    cb = surrogate.prepare_batch(cand_eps, cfg)
    ll_cand = surrogate.batch_loglik(weights, cb.theta, cb, cfg, spec, masks)
    ll_cand = ll_cand.reshape(len(contexts), len(offsets))

    tvs = []
    for i, (prefix, y_prev) in enumerate(contexts):
        ks = y_prev + offsets
        p_hat = np.exp(ll_cand[i] - ll_prefix[i])
        p_true = _a4_true_pmf(float(y_prev), ks.astype(np.float64))
        leak = max(0.0, 1.0 - p_hat.sum()) + max(0.0, 1.0 - p_true.sum())
        tvs.append(0.5 * (np.abs(p_hat - p_true).sum() + leak))
    avg_tv = float(np.mean(tvs))
    elapsed = time.time() - t0
    ok = avg_tv < 0.03 and elapsed <= 1200
    _report(capsys, "A4", ok,
            f"avg total variation {avg_tv:.4f} (<0.03) over 150 contexts, "
            f"{len(rows)} epochs, {elapsed:.0f}s (<=1200)")
    assert ok


# ---------------------------------------------------------------------------
# A1: single-outbreak posterior, surrogate SNL vs particle-marginal MCMC
# ---------------------------------------------------------------------------


def test_a1_sir_posterior_comparison(capsys, tmp_path):
    t0 = time.time()
    n_pop = 50
    prior = simulators.sir_prior()
    rng = substream(42, "a1-truth")
    theta_star = {k: prior[k].sample(rng) for k in prior}
    obs = next(
        e for s in range(200)
        if (e := simulators.simulate_sir_episode(
            theta_star, n_pop, 500, seed=stream_key(42, "a1-obs", s))).f0 == 0
    )

    # reference: particle-marginal MH with a 200-particle bootstrap filter
    def loglik(theta, pf_seed):
        return smc.sir_pf_loglik(obs.y, n_pop, theta, 200, pf_seed)

    rng_init = substream(42, "a1-init")
    pm = None
    for _ in range(50):
        theta0 = {k: prior[k].sample(rng_init) for k in prior}
        try:
            pm = smc.pmmh(loglik, prior, theta0, n_steps=30_000, seed=7)
            break
        except ValueError:
            continue
    assert pm is not None

    # surrogate SNL at the reduced budget: 20,000 simulations over 6 rounds
    spec = surrogate.default_arch(surrogate.MODEL_CONFIGS["sir"])
    tc = surrogate.TrainConfig(batch_size=512, max_epochs=100, patience=12,
                               seed=0, lr_decay=0.5, lr_patience=4)
    sc = snl.SnlConfig(rounds=6, keep_rounds=3, prior_draws=5000,
                       sims_per_round=3000, mcmc_draws=2500, warmup=200, seed=0,
                       train_window=15000)
    result = snl.run_snl("sir", [obs], spec, tc, sc, str(tmp_path / "a1"),
                         context={"n_pop": n_pop, "max_days": 500})

    names = list(prior.keys())
    s_snl = diagnostics.summarize(result.posterior, names)
    s_pmmh = diagnostics.summarize(pm.samples, names)
    prior_sd = {k: prior[k].moments()[1] for k in names}
    m = diagnostics.m_metric(s_snl, s_pmmh, prior_sd)
    s = diagnostics.s_metric(s_snl, s_pmmh)
    elapsed = time.time() - t0
    ok = (all(abs(v) <= 0.10 for v in m.values())
          and all(abs(v) <= 0.25 for v in s.values())
          and elapsed <= 7200)
    detail = ", ".join(
        f"{k}: M={m[k]:+.3f} S={s[k]:+.3f}" for k in names
    )
    _report(capsys, "A1", ok,
            f"{detail} (|M|<=0.10, |S|<=0.25); truth r0={theta_star['r0']:.2f} "
            f"inv_gamma={theta_star['inv_gamma']:.2f}, final size {obs.y[-1]}, "
            f"pmmh accept {pm.accept_rate:.2f}, {elapsed:.0f}s (<=7200)")
    assert ok


# ---------------------------------------------------------------------------
# A7: smoke runs of the larger models at a quarter simulation budget
# ---------------------------------------------------------------------------


def test_a7_seiar_smoke(capsys, tmp_path):
    theta_star = {"r0": 2.2, "inv_sigma": 1.0, "inv_gamma": 1.0,
                  "kappa": 0.7, "q": 0.9}
    obs = next(
        e for s in range(100)
        if len((e := simulators.simulate_seiar_episode(
            theta_star, 350, stream_key(8, "a7-obs", s))).y) >= 10
    )
    spec = surrogate.default_arch(surrogate.MODEL_CONFIGS["seiar"])
    tc = surrogate.TrainConfig(batch_size=256, max_epochs=25, patience=4, seed=0)
    sc = snl.SnlConfig(rounds=6, keep_rounds=3, prior_draws=4000,
                       sims_per_round=1950, mcmc_draws=800, warmup=150, seed=0)
    result = snl.run_snl("seiar", [obs], spec, tc, sc, str(tmp_path / "a7se"),
                         context={"n_pop": 350})
    r0 = result.posterior[:, result.param_names.index("r0")]
    lo, hi = np.quantile(r0, [0.025, 0.975])
    covered = lo <= theta_star["r0"] <= hi
    n_ok = sum(s == "ok" for s in result.round_status)
    ok = (covered and n_ok >= sc.keep_rounds
          and result.n_simulated == sc.budget)
    _report(capsys, "A7-seiar", ok,
            f"rounds ok {n_ok}/{sc.rounds}, r0 95% interval [{lo:.2f}, {hi:.2f}] "
            f"covers 2.2: {covered}, {result.n_simulated} sims")
    assert ok


def test_a7_predprey_smoke(capsys, tmp_path):
    theta_star = {"b": 0.26, "d1": 0.1, "d2": 0.01, "p1": 0.13, "p2": 0.05}
    obs = simulators.generate_predprey_observation(
        theta_star, 800, 0.9, (250, 250), stream_key(9, "a7-pp"))
    spec = surrogate.default_arch(surrogate.MODEL_CONFIGS["predprey"])
    tc = surrogate.TrainConfig(batch_size=512, max_epochs=25, patience=4, seed=0)
    sc = snl.SnlConfig(rounds=6, keep_rounds=3, prior_draws=4000,
                       sims_per_round=1950, mcmc_draws=800, warmup=150, seed=0)
    result = snl.run_snl("predprey", [obs], spec, tc, sc, str(tmp_path / "a7pp"),
                         context={"k_cap": 800, "r": 0.9,
                                  "y0_obs": np.asarray(obs.y0).tolist()})
    prior = simulators.predprey_prior()
    inside = all(
        np.all(result.posterior[:, j] >= prior[k].support[0])
        and np.all(result.posterior[:, j] <= prior[k].support[1])
        for j, k in enumerate(result.param_names)
    )
    n_ok = sum(s == "ok" for s in result.round_status)
    ok = n_ok >= sc.keep_rounds and inside and result.n_simulated == sc.budget
    _report(capsys, "A7-predprey", ok,
            f"rounds ok {n_ok}/{sc.rounds}, samples in prior support: {inside}, "
            f"{result.n_simulated} sims")
    assert ok
