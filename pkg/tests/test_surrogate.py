import numpy as np
import pytest

from nlar import arnet
from nlar import diffcore as dc
from nlar import simulators, surrogate
from nlar.rng import substream
from nlar.simulators import EpisodeSeries

THETA = {"r0": 2.0, "inv_gamma": 1.5}


def tiny_spec(model):
    cfg = surrogate.MODEL_CONFIGS[model]
    return cfg, surrogate.default_arch(cfg, hidden=12, residual_blocks=1,
                                       kernel_length=3, mixture_components=2)


def sir_episode(seed=11, n_pop=20):
    return simulators.simulate_sir_episode(THETA, n_pop, 100, seed=seed)


def test_encode_theta_natural_params():
    cfg = surrogate.MODEL_CONFIGS["sir"]
    theta = np.array([[2.0, 1.5]])
    enc = surrogate.encode_theta(cfg, theta)
    gamma = 1.0 / 1.5
    np.testing.assert_allclose(enc, [[2.0 * gamma, gamma]], rtol=1e-12)


def test_encode_theta_household_onehot():
    cfg = surrogate.MODEL_CONFIGS["sir-household"]
    theta = np.array([[2.0, 1.5]])
    onehot = np.zeros((3, 5))
    onehot[:, 2] = 1.0
    enc = surrogate.encode_theta(cfg, theta, onehot)
    assert dc._val(enc).shape == (3, 7)
    np.testing.assert_array_equal(dc._val(enc)[:, 2:], onehot)


def test_household_onehot_mapping():
    v = surrogate.household_onehot(5)
    np.testing.assert_array_equal(v, [0, 0, 1, 0, 0])
    with pytest.raises(ValueError):
        surrogate.household_onehot(2)


def test_padding_never_changes_loglik():
    cfg, spec = tiny_spec("sir")
    w = arnet.init_weights(spec, substream(0, "pad"))
    eps = []
    for s in range(60):
        ep = sir_episode(seed=s)
        if ep.f0 == 0:
            eps.append(ep)
        if len(eps) == 2:
            break
    short = surrogate.prepare_batch([eps[0]], cfg)
    padded = surrogate.prepare_batch([eps[0]], cfg, pad_to=short.x.shape[1] + 17)
    a = surrogate.batch_loglik(w, short.theta, short, cfg, spec)
    b = surrogate.batch_loglik(w, padded.theta, padded, cfg, spec)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_batch_matches_single_episode():
    cfg, spec = tiny_spec("sir")
    w = arnet.init_weights(spec, substream(1, "single"))
    eps = [e for e in (sir_episode(seed=s) for s in range(40)) if e.f0 == 0][:3]
    batch = surrogate.prepare_batch(eps, cfg)
    joint = surrogate.batch_loglik(w, batch.theta, batch, cfg, spec)
    for j, ep in enumerate(eps):
        single = surrogate.prepare_batch([ep], cfg)
        one = surrogate.batch_loglik(w, single.theta, single, cfg, spec)
        np.testing.assert_allclose(joint[j], one[0], rtol=1e-10)


def test_loglik_gradient_matches_fd():
    cfg, spec = tiny_spec("sir")
    w = arnet.init_weights(spec, substream(2, "grad"))
    ep = next(e for e in (sir_episode(seed=s) for s in range(40)) if e.f0 == 0)
    fn = surrogate.dataset_loglik_fn(w, [ep], cfg, spec)
    x = np.array([2.0, 1.5])
    _, g = fn(x)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (fn(x + e)[0] - fn(x - e)[0]) / (2 * h)
        assert abs(g[j] - fd) / (abs(g[j]) + abs(fd) + 1e-12) < 1e-6


def test_analytic_never_grew_term():
    cfg, _ = tiny_spec("sir")
    ep = EpisodeSeries(model="sir", theta=THETA, y=np.zeros(0, dtype=np.int64),
                       y0=np.asarray(1), tau=0, f=np.zeros(0, dtype=np.int64),
                       f0=1, completed=True, meta={"N": 20})
    term = surrogate.outbreak_analytic_terms(np.array([2.0, 1.5]), ep, cfg)
    assert abs(float(dc._val(term)) - np.log(1.0 / 3.0)) < 1e-12


def test_analytic_grew_term():
    cfg, _ = tiny_spec("sir")
    ep = next(e for e in (sir_episode(seed=s) for s in range(40)) if e.f0 == 0)
    term = surrogate.outbreak_analytic_terms(np.array([2.0, 1.5]), ep, cfg)
    assert abs(float(dc._val(term)) - np.log(2.0 / 3.0)) < 1e-12


def test_size2_household_closed_form():
    # survival for tau - 1 days times the one-day infection probability
    theta = np.array([2.0, 1.5])
    u = 3.0 / 1.5
    for tau in (1, 2, 5):
        got = float(dc._val(surrogate.sir_size2_loglik(theta, tau)))
        want = -(tau - 1) * u + np.log1p(-np.exp(-u))
        assert abs(got - want) < 1e-12


def test_size2_probabilities_sum_to_one():
    # sum over tau of p(y, N_F = 2 | N_F > 1) equals 1
    theta = np.array([2.0, 1.5])
    total = sum(
        np.exp(float(dc._val(surrogate.sir_size2_loglik(theta, tau))))
        for tau in range(1, 400)
    )
    assert abs(total - 1.0) < 1e-10


def test_episode_uses_network_rules():
    cfg_h = surrogate.MODEL_CONFIGS["sir-household"]
    never_grew = EpisodeSeries(model="sir-household", theta=THETA,
                               y=np.zeros(0, dtype=np.int64), y0=np.asarray(1),
                               tau=0, f0=1, meta={"household": 4})
    size2 = EpisodeSeries(model="sir-household", theta=THETA,
                          y=np.array([2]), y0=np.asarray(1), tau=1, f0=0,
                          f=np.array([1]), meta={"household": 2})
    grown = EpisodeSeries(model="sir-household", theta=THETA,
                          y=np.array([2, 3]), y0=np.asarray(1), tau=2, f0=0,
                          f=np.array([0, 1]), meta={"household": 3})
    assert not surrogate.episode_uses_network(never_grew, cfg_h)
    assert not surrogate.episode_uses_network(size2, cfg_h)
    assert surrogate.episode_uses_network(grown, cfg_h)


def test_f_mask_skips_deterministic_steps():
    cfg = surrogate.MODEL_CONFIGS["sir"]
    ep = EpisodeSeries(model="sir", theta=THETA, y=np.array([2, 2, 3, 20]),
                       y0=np.asarray(1), tau=4, f=np.array([0, 0, 0, 1]),
                       f0=0, completed=True, meta={"N": 20})
    batch = surrogate.prepare_batch([ep], cfg)
    # step 2 repeats the count and step 4 hits the population cap: the
    # end-of-series term is deterministic there and must be masked out
    np.testing.assert_array_equal(batch.f_valid[0], [1, 0, 1, 0])
    np.testing.assert_array_equal(batch.y_valid[0], [1, 1, 1, 1])


def test_truncated_episode_masks_terminal_plateau():
    cfg = surrogate.MODEL_CONFIGS["sir"]
    ep = EpisodeSeries(model="sir", theta=THETA, y=np.array([2, 3, 3]),
                       y0=np.asarray(1), tau=3, f=np.zeros(3, dtype=np.int64),
                       f0=0, completed=False, meta={"N": 20})
    batch = surrogate.prepare_batch([ep], cfg)
    # the final count never moved on from 3; whether the outbreak ended
    # is unobserved so those f-terms carry no information
    np.testing.assert_array_equal(batch.f_valid[0], [1, 0, 0])


def test_training_reduces_validation_nll():
    cfg, spec = tiny_spec("markov")
    rng = substream(5, "mk")

    def mk():
        y = np.cumsum(rng.integers(0, 3, size=15)) + 5
        return EpisodeSeries(model="markov", theta={}, y=y.astype(np.int64),
                             y0=np.asarray(5), tau=15)

    eps = [mk() for _ in range(200)]
    tc = surrogate.TrainConfig(batch_size=64, max_epochs=10, patience=10, seed=0)
    _, rows = surrogate.train(eps, cfg, spec, tc)
    assert rows[-1]["val_nll"] < rows[0]["val_nll"]


def test_training_log_csv(tmp_path):
    cfg, spec = tiny_spec("markov")
    rng = substream(6, "mk2")
    eps = [EpisodeSeries(model="markov", theta={},
                         y=(np.cumsum(rng.integers(0, 3, size=10)) + 3).astype(np.int64),
                         y0=np.asarray(3), tau=10) for _ in range(80)]
    tc = surrogate.TrainConfig(batch_size=32, max_epochs=3, patience=10, seed=0)
    log = tmp_path / "train.csv"
    surrogate.train(eps, cfg, spec, tc, log_path=log)
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_nll,val_nll,seconds"
    assert len(lines) == 4


def test_plateau_schedule_lowers_learning_rate():
    cfg, spec = tiny_spec("markov")
    rng = substream(7, "mk3")
    eps = [EpisodeSeries(model="markov", theta={},
                         y=(np.cumsum(rng.integers(0, 3, size=10)) + 3).astype(np.int64),
                         y0=np.asarray(3), tau=10) for _ in range(80)]
    tc = surrogate.TrainConfig(batch_size=32, max_epochs=25, patience=25, seed=0,
                               lr_decay=0.5, lr_patience=1)
    _, rows = surrogate.train(eps, cfg, spec, tc)
    lrs = [r["lr"] for r in rows]
    assert lrs[0] == tc.learning_rate
    assert min(lrs) < tc.learning_rate
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_fixed_rate_by_default():
    cfg, spec = tiny_spec("markov")
    rng = substream(8, "mk4")
    eps = [EpisodeSeries(model="markov", theta={},
                         y=(np.cumsum(rng.integers(0, 3, size=10)) + 3).astype(np.int64),
                         y0=np.asarray(3), tau=10) for _ in range(80)]
    tc = surrogate.TrainConfig(batch_size=32, max_epochs=8, patience=8, seed=0)
    _, rows = surrogate.train(eps, cfg, spec, tc)
    assert all(r["lr"] == tc.learning_rate for r in rows)


def test_train_rejects_empty():
    cfg, spec = tiny_spec("sir")
    tc = surrogate.TrainConfig()
    with pytest.raises(ValueError):
        surrogate.train([], cfg, spec, tc)


def test_seiar_f0_position_zero():
    cfg = surrogate.MODEL_CONFIGS["seiar"]
    theta = {"r0": 2.2, "inv_sigma": 1.0, "inv_gamma": 1.0, "kappa": 0.7, "q": 0.9}
    ep = simulators.EpisodeSeries(model="seiar", theta=theta,
                                  y=np.array([2, 4]), y0=np.asarray(1), tau=2,
                                  f=np.array([0, 1]), f0=0, completed=True,
                                  meta={"N": 350})
    batch = surrogate.prepare_batch([ep], cfg)
    # the sequence gains a leading slot for y0 whose f-term is always live
    assert batch.x.shape[1] == 3
    assert batch.y_valid[0, 0] == 0
    assert batch.f_valid[0, 0] == 1
    assert batch.f_target[0, 0] == 0
