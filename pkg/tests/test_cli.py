import json
import os

import numpy as np
import pytest

from nlar import cli, simulators, smc


def run(argv):
    return cli.main(argv)


def test_simulate_writes_episodes_and_manifest(tmp_path):
    out = tmp_path / "eps.ndjson"
    rc = run(["simulate", "--model", "sir", "--seed", "3", "--n", "10",
              "--count", "5", "--out", str(out)])
    assert rc == 0
    eps = simulators.read_episodes(str(out))
    assert len(eps) == 5
    assert all(ep.model == "sir" for ep in eps)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["config"]["seed"] == 3


def test_simulate_is_seed_deterministic(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    run(["simulate", "--model", "sir", "--seed", "9", "--n", "10",
         "--count", "4", "--out", str(a)])
    run(["simulate", "--model", "sir", "--seed", "9", "--n", "10",
         "--count", "4", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_simulate_fixed_theta(tmp_path):
    out = tmp_path / "fixed.ndjson"
    run(["simulate", "--model", "sir", "--seed", "1", "--n", "10",
         "--count", "3", "--theta", '{"r0": 2.0, "inv_gamma": 1.5}',
         "--out", str(out)])
    eps = simulators.read_episodes(str(out))
    assert all(ep.theta == {"r0": 2.0, "inv_gamma": 1.5} for ep in eps)


def test_simulate_household_dataset(tmp_path):
    out = tmp_path / "hh.ndjson"
    run(["simulate", "--model", "sir-household", "--seed", "2", "--h", "12",
         "--theta", '{"r0": 2.0, "inv_gamma": 1.5}', "--out", str(out)])
    eps = simulators.read_episodes(str(out))
    assert len(eps) == 12
    assert all("household" in ep.meta for ep in eps)


def test_simulate_requires_out(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["simulate", "--model", "sir", "--seed", "0"])
    assert exc.value.code == 2


def test_unknown_model_rejected():
    with pytest.raises(SystemExit):
        run(["train", "--model", "markov", "--data", "x", "--out", "y"])


def test_train_command(tmp_path):
    data = tmp_path / "train.ndjson"
    run(["simulate", "--model", "sir", "--seed", "5", "--n", "10",
         "--count", "60", "--out", str(data)])
    out = tmp_path / "fit"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "arch": {"hidden": 8, "residual_blocks": 1, "kernel_length": 3,
                 "mixture_components": 2},
        "max_epochs": 2, "batch_size": 32,
    }))
    rc = run(["train", "--model", "sir", "--seed", "0", "--config", str(cfg),
              "--data", str(data), "--out", str(out)])
    assert rc == 0
    assert (out / "weights.npz").exists()
    log = (out / "training.csv").read_text().strip().splitlines()
    assert log[0] == "epoch,train_nll,val_nll,seconds"
    assert len(log) == 3


def test_pmmh_command(tmp_path):
    data = tmp_path / "obs.ndjson"
    run(["simulate", "--model", "sir", "--seed", "11", "--n", "10",
         "--count", "1", "--theta", '{"r0": 2.0, "inv_gamma": 1.5}',
         "--out", str(data)])
    out = tmp_path / "pmmh"
    rc = run(["pmmh", "--model", "sir", "--seed", "0", "--data", str(data),
              "--out", str(out), "--steps", "300", "--particles", "50"])
    assert rc == 0
    names, chain = smc.read_chain_csv(str(out / "chain.csv"))
    assert names == ["r0", "inv_gamma", "loglik"]
    assert chain.shape[0] == 300
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["summary"]) == {"r0", "inv_gamma"}


def test_pmmh_rejects_models_without_exact_filter(tmp_path):
    with pytest.raises(SystemExit):
        run(["pmmh", "--model", "predprey", "--data", "x", "--out", "y"])


def test_compare_identical_samples_gives_zero_metrics(tmp_path):
    rng = np.random.default_rng(0)
    samples = np.column_stack([
        rng.uniform(1.0, 3.0, size=400),
        rng.uniform(1.5, 2.5, size=400),
    ])
    archive = tmp_path / "arch"
    archive.mkdir()
    smc.write_chain_csv(str(archive / "posterior.csv"), samples,
                        ("r0", "inv_gamma"))
    chain = tmp_path / "chain.csv"
    smc.write_chain_csv(str(chain), samples, ("r0", "inv_gamma"),
                        logliks=np.zeros(400))
    out = tmp_path / "cmp"
    rc = run(["compare", "--model", "sir", "--snl-archive", str(archive),
              "--pmmh-chain", str(chain), "--out", str(out)])
    assert rc == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert all(abs(v) < 1e-12 for v in metrics["M"].values())
    assert all(abs(v) < 1e-12 for v in metrics["S"].values())
    lines = (out / "samples.csv").read_text().strip().splitlines()
    assert lines[0] == "source,parameter,value"
    assert len(lines) == 1 + 2 * 2 * 400
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "parameter,M,S,mean_snl,sd_snl,mean_pmmh,sd_pmmh,ess_snl,ess_pmmh"


def test_oracle_exits_clean(capsys):
    rc = run(["oracle", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "finite-memory identity" in out


def test_snl_command(tmp_path):
    data = tmp_path / "obs.ndjson"
    run(["simulate", "--model", "sir", "--seed", "21", "--n", "10",
         "--count", "1", "--theta", '{"r0": 2.0, "inv_gamma": 1.5}',
         "--out", str(data)])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "arch": {"hidden": 8, "residual_blocks": 1, "kernel_length": 3,
                 "mixture_components": 2},
        "max_epochs": 2, "batch_size": 32,
        "rounds": 2, "keep_rounds": 1, "prior_draws": 40,
        "sims_per_round": 30, "mcmc_draws": 80, "warmup": 30,
        "context": {"n_pop": 10, "max_days": 80},
    }))
    out = tmp_path / "snl"
    rc = run(["snl", "--model", "sir", "--seed", "0", "--config", str(cfg),
              "--data", str(data), "--out", str(out)])
    assert rc == 0
    assert (out / "posterior.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_simulated"] == 40 + 30
    assert all(s == "ok" for s in summary["round_status"])
