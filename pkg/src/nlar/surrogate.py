"""Surrogate log-likelihood: network + DMoL heads + analytic terms + training.

An episode's surrogate log-likelihood is the masked sum over steps (and
features) of discretised-logistic-mixture conditionals, plus a Bernoulli
term per step for the outbreak end-of-series channel, plus analytic
terms that bypass the network (the probability that an outbreak never
progresses past the first case, and the whole likelihood of size-2
household outbreaks).

Sequence layout: the network input at position t is the rescaled
observation for step t (steps start at 1 for SIR/predator-prey; the
SEIAR input additionally includes the known y0 at position 0 so that the
end-of-series probability q(f_0 | y_0, theta) comes out of the f-channel
at position 0).  Masked steps contribute exactly zero, so padding an
episode never changes its log-likelihood.

Training is decoupled-weight-decay Adam on the mean per-episode negative
log-likelihood with early stopping on a held-out validation split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import arnet, dmol
from . import diffcore as dc
from .arnet import ArchSpec
from .rng import substream

HOUSEHOLD_SIZES = (3, 4, 5, 6, 7)  # size 2 is analytic and never enters the network


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch_index, episode_ids):
        self.epoch, self.batch_index, self.episode_ids = epoch, batch_index, episode_ids
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; episodes {episode_ids[:8]}"
        )


@dataclass(frozen=True)
class ModelConfig:
    """Network-facing description of one observation model."""

    name: str
    d: int
    head: str  # dmol head: default / outbreak / scaled
    has_f: bool
    net_f0: bool  # f-channel also evaluated at position 0 (SEIAR)
    param_names: tuple
    enc_width: int
    onehot_width: int = 0


MODEL_CONFIGS = {
    "sir": ModelConfig("sir", 1, "outbreak", True, False, ("r0", "inv_gamma"), 2),
    "sir-household": ModelConfig(
        "sir-household", 1, "outbreak", True, False, ("r0", "inv_gamma"), 2 + 5, onehot_width=5
    ),
    "seiar": ModelConfig(
        "seiar", 1, "outbreak", True, True, ("r0", "inv_sigma", "inv_gamma", "kappa", "q"), 5
    ),
    "predprey": ModelConfig(
        "predprey", 2, "scaled", False, False, ("b", "d1", "d2", "p1", "p2"), 5
    ),
    # generic univariate integer series with the untruncated default head,
    # used by the training-fidelity checks on synthetic Markov chains
    "markov": ModelConfig("markov", 1, "default", False, False, (), 1),
}

PREDPREY_SCALE = 60.0


def default_arch(cfg: ModelConfig, hidden=32, residual_blocks=2, kernel_length=5,
                 mixture_components=5, context_hidden=64, context_dim=12) -> ArchSpec:
    per_feature = max(1, hidden // cfg.d)
    return ArchSpec(
        kernel_length=kernel_length,
        residual_blocks=residual_blocks,
        hidden_per_feature=per_feature,
        feature_count=cfg.d,
        mixture_components=mixture_components,
        context_hidden=context_hidden,
        context_dim=context_dim,
        context_inputs=cfg.enc_width,
        extra_channels=1 if cfg.has_f else 0,
    )


def encode_theta(cfg: ModelConfig, theta, onehot=None):
    """Map (batch, P) inference parameters to the network conditioning input.

    SIR conditions on the natural rates (beta, gamma); the household
    variant appends a one-hot encoding of the household size.  The other
    models pass theta through unchanged.
    """
    if cfg.name in ("sir", "sir-household"):
        r0 = dc.slice_axis(theta, -1, 0, 1)
        inv_gamma = dc.slice_axis(theta, -1, 1, 2)
        gamma = dc.div(1.0, inv_gamma)
        beta = dc.mul(r0, gamma)
        enc = dc.concat([beta, gamma], -1)
    elif cfg.name == "markov":
        b = dc._val(theta).shape[0] if np.ndim(dc._val(theta)) else 1
        return np.ones((b, 1))
    else:
        enc = theta
    if onehot is not None:
        b = onehot.shape[0]
        if dc._val(enc).shape[0] != b:
            enc = dc.add(enc, np.zeros((b, 1)))  # broadcast shared theta across episodes
        enc = dc.concat([enc, onehot], -1)
    return enc


def household_onehot(size):
    v = np.zeros(len(HOUSEHOLD_SIZES))
    v[HOUSEHOLD_SIZES.index(int(size))] = 1.0
    return v


# ---------------------------------------------------------------------------
# batch preparation
# ---------------------------------------------------------------------------


@dataclass
class PaddedBatch:
    x: np.ndarray          # (B, L, d) rescaled network input
    prev: np.ndarray       # (B, L, d) previous raw counts
    target: np.ndarray     # (B, L, d) raw counts to score
    y_valid: np.ndarray    # (B, L)
    f_target: np.ndarray   # (B, L)
    f_valid: np.ndarray    # (B, L)
    population: np.ndarray  # (B,)
    theta: np.ndarray      # (B, P)
    onehot: np.ndarray | None
    episode_ids: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        # trim trailing all-padding steps: causal outputs at kept positions
        # never depend on dropped later inputs
        used = (self.y_valid[idx] + self.f_valid[idx]).any(axis=0)
        lmax = int(used.nonzero()[0].max()) + 1 if used.any() else 1
        return PaddedBatch(
            x=self.x[idx, :lmax], prev=self.prev[idx, :lmax], target=self.target[idx, :lmax],
            y_valid=self.y_valid[idx, :lmax], f_target=self.f_target[idx, :lmax],
            f_valid=self.f_valid[idx, :lmax], population=self.population[idx],
            theta=self.theta[idx], onehot=None if self.onehot is None else self.onehot[idx],
            episode_ids=[self.episode_ids[i] for i in idx],
        )


def _episode_scale(cfg: ModelConfig, episode):
    if cfg.name in ("sir", "sir-household", "seiar"):
        return float(episode.meta["N"] if "household" not in episode.meta else episode.meta["household"])
    if cfg.name == "predprey":
        return PREDPREY_SCALE
    return 1.0


def _episode_rows(cfg: ModelConfig, episode):
    """Per-episode (x, prev, target, y_valid, f_target, f_valid) rows."""
    y = np.atleast_2d(episode.y.astype(np.float64).T).T  # (tau, d)
    if cfg.d == 1 and y.ndim == 2 and y.shape[1] != 1:
        y = y.reshape(-1, 1)
    y0 = np.asarray(episode.y0, dtype=np.float64).reshape(1, -1)
    scale = _episode_scale(cfg, episode)
    pop = scale if cfg.head == "outbreak" else 0.0
    if cfg.net_f0:
        seq = np.concatenate([y0, y], axis=0)  # positions 0..tau
        prev = np.concatenate([y0, seq[:-1]], axis=0)
        target = seq
        y_valid = np.ones(len(seq))
        y_valid[0] = 0.0
    else:
        seq = y  # positions 0..tau-1 are steps 1..tau
        prev = np.concatenate([y0, y[:-1]], axis=0)
        target = seq
        y_valid = np.ones(len(seq))
    x = seq / scale
    f_target = np.zeros(len(seq))
    f_valid = np.zeros(len(seq))
    if cfg.has_f:
        f = episode.f if episode.f is not None else np.zeros(episode.tau, dtype=np.int64)
        if cfg.net_f0:
            f_full = np.concatenate([[episode.f0], f]).astype(np.float64)
        else:
            f_full = f.astype(np.float64)
        f_target[: len(f_full)] = f_full
        col = target[:, 0]
        pcol = prev[:, 0]
        valid = np.ones(len(seq))
        if cfg.net_f0:
            valid[1:] = (col[1:] != pcol[1:]) & (col[1:] != pop)
            valid[0] = 1.0
        else:
            valid = ((col != pcol) & (col != pop)).astype(np.float64)
        if not episode.completed:
            # final size unknown: drop f-terms on the terminal plateau
            last = col[-1]
            valid = valid * (col != last)
        f_valid = valid.astype(np.float64)
    return x, prev, target, y_valid, f_target, f_valid, pop


def prepare_batch(episodes, cfg: ModelConfig, pad_to=None):
    rows = [_episode_rows(cfg, ep) for ep in episodes]
    lmax = pad_to or max((r[0].shape[0] for r in rows), default=1)
    lmax = max(lmax, 1)
    b = len(episodes)
    d = cfg.d
    batch = PaddedBatch(
        x=np.zeros((b, lmax, d)), prev=np.zeros((b, lmax, d)), target=np.zeros((b, lmax, d)),
        y_valid=np.zeros((b, lmax)), f_target=np.zeros((b, lmax)), f_valid=np.zeros((b, lmax)),
        population=np.zeros(b), theta=np.zeros((b, max(1, len(cfg.param_names)))),
        onehot=np.zeros((b, cfg.onehot_width)) if cfg.onehot_width else None,
        episode_ids=list(range(b)),
    )
    for i, (ep, (x, prev, target, yv, ft, fv, pop)) in enumerate(zip(episodes, rows)):
        n = x.shape[0]
        batch.x[i, :n] = x
        batch.prev[i, :n] = prev
        # padded prev must stay inside the truncated support
        batch.prev[i, n:] = prev[-1] if n else 0.0
        batch.target[i, :n] = target
        batch.target[i, n:] = prev[-1] if n else 0.0
        batch.y_valid[i, :n] = yv
        batch.f_target[i, :n] = ft
        batch.f_valid[i, :n] = fv
        batch.population[i] = pop
        for j, name in enumerate(cfg.param_names):
            batch.theta[i, j] = ep.theta[name]
        if cfg.onehot_width:
            batch.onehot[i] = household_onehot(ep.meta["household"])
    return batch


# ---------------------------------------------------------------------------
# log-likelihood
# ---------------------------------------------------------------------------


def batch_loglik(weights, theta, batch: PaddedBatch, cfg: ModelConfig, spec: ArchSpec, masks=None):
    """Per-episode network log-likelihood, shape (B,).

    ``theta`` may be a tape Var (shape (1, P) shared or (B, P)) for
    gradients with respect to the parameters, or a plain array.
    Analytic bypass terms are NOT included here.
    """
    b, length, d = batch.x.shape
    c = spec.mixture_components
    onehot = batch.onehot
    enc = encode_theta(cfg, theta, onehot)
    if dc._val(enc).shape[0] == 1 and b > 1:
        enc = dc.add(enc, np.zeros((b, 1)))
    o = arnet.forward(batch.x, enc, weights, spec, masks)
    main = dc.slice_axis(o, -1, 0, d * 3 * c)
    main = dc.reshape(main, (b, length, d, 3 * c))
    mu, s, log_w, ta, tb = dmol.params_from_output(
        main, batch.prev, cfg.head, c,
        population=batch.population.reshape(b, 1, 1) if cfg.head == "outbreak" else None,
        scale=PREDPREY_SCALE,
    )
    ll = dmol.mixture_logpmf(batch.target, mu, s, log_w, ta, tb)  # (B, L, d)
    ll = dc.mul(ll, batch.y_valid.reshape(b, length, 1))
    total = dc.sum_(ll, axis=(1, 2))
    if cfg.has_f:
        o_f = dc.slice_axis(o, -1, spec.output_width - 1, spec.output_width)
        o_f = dc.reshape(o_f, (b, length))
        ll_f = dc.add(
            dc.mul(batch.f_target, dc.log_sigmoid(o_f)),
            dc.mul(1.0 - batch.f_target, dc.log_sigmoid(dc.neg(o_f))),
        )
        total = dc.add(total, dc.sum_(dc.mul(ll_f, batch.f_valid), axis=1))
    return total


def outbreak_analytic_terms(theta, episode, cfg: ModelConfig):
    """Analytic log-likelihood contributions that bypass the network.

    theta is a (P,)-shaped Var or array in the inference
    parameterisation.  For SIR models: log p(f0 | theta) with
    p(f0) = (f0 + (1-f0) R0) / (R0 + 1), and the full closed form for
    size-2 households.  SEIAR evaluates f0 inside the network, so no
    term is added.
    """
    if cfg.name not in ("sir", "sir-household"):
        return 0.0
    r0 = dc.slice_axis(theta, 0, 0, 1) if isinstance(theta, dc.Var) else np.asarray(theta)[0:1]
    log_r0p1 = dc.log(dc.add(r0, 1.0))
    if episode.f0 == 1:
        term = dc.neg(log_r0p1)
    else:
        term = dc.sub(dc.log(r0), log_r0p1)
    if cfg.name == "sir-household" and episode.meta.get("household") == 2 and episode.f0 == 0:
        term = dc.add(term, sir_size2_loglik(theta, episode.tau))
    return dc.sum_(term)


def sir_size2_loglik(theta, tau):
    """log p(y_{1:tau}, N_F=2 | theta, N_F > 1) for a household of two.

    Both individuals end up infected; given that, the infection time is
    Exponential(beta + gamma), so the final size is first observed on
    day tau with probability e^{-(tau-1)(beta+gamma)} (1 - e^{-(beta+gamma)}).
    """
    r0 = dc.slice_axis(theta, 0, 0, 1) if isinstance(theta, dc.Var) else np.asarray(theta)[0:1]
    inv_gamma = dc.slice_axis(theta, 0, 1, 2) if isinstance(theta, dc.Var) else np.asarray(theta)[1:2]
    u = dc.div(dc.add(r0, 1.0), inv_gamma)  # beta + gamma
    return dc.sum_(dc.add(dc.mul(-(tau - 1.0), u), dc.log1mexp(u)))


def episode_uses_network(episode, cfg: ModelConfig):
    if cfg.name in ("sir", "sir-household") and episode.f0 == 1:
        return False
    if cfg.name == "sir-household" and episode.meta.get("household") == 2:
        return False
    return True


def loglik_episode(weights, theta, episode, cfg: ModelConfig, spec: ArchSpec, masks=None):
    """Full surrogate log-likelihood of one episode (network + analytic)."""
    if isinstance(theta, dict):
        theta = np.array([theta[k] for k in cfg.param_names])
    total = outbreak_analytic_terms(theta, episode, cfg)
    if episode_uses_network(episode, cfg):
        if episode.d != cfg.d:
            raise ValueError(f"episode dimension {episode.d} != model dimension {cfg.d}")
        batch = prepare_batch([episode], cfg)
        theta_row = dc.reshape(theta, (1, -1)) if isinstance(theta, dc.Var) else np.asarray(theta).reshape(1, -1)
        net = batch_loglik(weights, theta_row, batch, cfg, spec, masks)
        total = dc.add(total, dc.sum_(net))
    return total


def dataset_loglik_fn(weights, episodes, cfg: ModelConfig, spec: ArchSpec):
    """Value-and-gradient closure for MCMC over shared theta.

    Returns f(theta_vec) -> (loglik, grad) where the log-likelihood sums
    the analytic terms and the batched network terms over all episodes.
    """
    masks = arnet.build_masks(spec)
    net_eps = [ep for ep in episodes if episode_uses_network(ep, cfg)]
    other_eps = [ep for ep in episodes if not episode_uses_network(ep, cfg)]
    batch = prepare_batch(net_eps, cfg) if net_eps else None

    def fn(theta_vec):
        tape = dc.Tape()
        th = tape.input(np.asarray(theta_vec, dtype=np.float64))
        total = None
        if batch is not None:
            net = batch_loglik(weights, dc.reshape(th, (1, -1)), batch, cfg, spec, masks)
            total = dc.sum_(net)
        for ep in other_eps:
            term = outbreak_analytic_terms(th, ep, cfg)
            total = term if total is None else dc.add(total, term)
        if net_eps and cfg.name in ("sir", "sir-household"):
            # per-network-episode f0 term (episodes are conditioned on N_F > 1)
            for ep in net_eps:
                total = dc.add(total, outbreak_analytic_terms(th, ep, cfg))
        value = float(dc._val(total))
        grads = dc.backward(tape, total)
        g = grads[th]
        tape.release()
        return value, g

    return fn


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-5
    batch_size: int = 512
    patience: int = 30
    max_epochs: int = 300
    val_fraction: float = 0.1
    seed: int = 0
    # reduce-on-plateau schedule: after lr_patience epochs without a new
    # best validation NLL the learning rate is multiplied by lr_decay
    # (1.0 disables the schedule); lr_patience should be below patience
    # or the run stops before the first decay
    lr_decay: float = 1.0
    lr_patience: int = 5


BATCH_SIZES = {"sir-household": 1024, "seiar": 256, "predprey": 512}


def train(episodes, cfg: ModelConfig, spec: ArchSpec, train_cfg: TrainConfig,
          initial_weights=None, log_path=None):
    """Fit the surrogate by Adam with decoupled weight decay.

    Early stopping on validation NLL with the configured patience; the
    returned weights are the best-validation snapshot (ties broken by
    the earliest epoch).  Raises TrainingDiverged on a non-finite loss.
    """
    episodes = [ep for ep in episodes if episode_uses_network(ep, cfg)]
    if not episodes:
        raise ValueError("no trainable episodes")
    masks = arnet.build_masks(spec)
    rng = substream(train_cfg.seed, "train")
    if initial_weights is None:
        weights = arnet.init_weights(spec, rng)
    else:
        weights = {k: v.copy() for k, v in initial_weights.items()}
    full = prepare_batch(episodes, cfg)
    perm = rng.permutation(len(episodes))
    n_val = max(1, int(round(train_cfg.val_fraction * len(episodes))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    val_batch = full.subset(val_idx)

    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.items()}
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    best_val = np.inf
    best_weights = {k: w.copy() for k, w in weights.items()}
    log_rows = []
    bad_epochs = 0
    lr = train_cfg.learning_rate
    epochs_since_decay = 0
    t0 = time.time()
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(train_idx)
        train_nll_accum, train_count = 0.0, 0
        for bi in range(0, len(order), train_cfg.batch_size):
            idx = order[bi : bi + train_cfg.batch_size]
            sub = full.subset(idx)
            tape = dc.Tape()
            w_vars = {k: tape.input(w) for k, w in weights.items()}
            ll = batch_loglik(w_vars, sub.theta, sub, cfg, spec, masks)
            loss = dc.div(dc.neg(dc.sum_(ll)), float(len(idx)))
            loss_val = float(dc._val(loss))
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, bi // train_cfg.batch_size, sub.episode_ids)
            grad_table = dc.backward(tape, loss)
            grads = {k: grad_table[w_vars[k]] for k in weights}
            # the tape holds every intermediate activation of this batch
            tape.release()
            del grad_table, w_vars, tape, loss, ll
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for k in weights:
                g = grads[k]
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v2[k] = beta2 * v2[k] + (1 - beta2) * g * g
                update = (m[k] / corr1) / (np.sqrt(v2[k] / corr2) + adam_eps)
                weights[k] = weights[k] - lr * update - lr * train_cfg.weight_decay * weights[k]
            train_nll_accum += loss_val * len(idx)
            train_count += len(idx)
        val_nll = evaluate_nll(weights, val_batch, cfg, spec, masks)
        log_rows.append({
            "epoch": epoch,
            "train_nll": train_nll_accum / max(1, train_count),
            "val_nll": val_nll,
            "seconds": time.time() - t0,
            "lr": lr,
        })
        if val_nll < best_val:
            best_val = val_nll
            best_weights = {k: w.copy() for k, w in weights.items()}
            bad_epochs = 0
            epochs_since_decay = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break
            epochs_since_decay += 1
            if train_cfg.lr_decay < 1.0 and epochs_since_decay >= train_cfg.lr_patience:
                lr *= train_cfg.lr_decay
                epochs_since_decay = 0
    if log_path is not None:
        write_training_log(log_path, log_rows)
    return best_weights, log_rows


def evaluate_nll(weights, batch: PaddedBatch, cfg, spec, masks=None, chunk=256):
    total, n = 0.0, len(batch)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        sub = batch.subset(idx)
        ll = batch_loglik(weights, sub.theta, sub, cfg, spec, masks)
        total += -float(np.sum(dc._val(ll)))
    return total / max(1, n)


def write_training_log(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,train_nll,val_nll,seconds\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['train_nll']:.6f},{r['val_nll']:.6f},{r['seconds']:.3f}\n")
