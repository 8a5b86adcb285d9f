"""Acceptance criteria, one or more tests each.

The pass/fail line per criterion is printed in the terminal summary by the
hooks in ``conftest.py``; measured quantities are attached as properties.
"""
import os
import time

import numpy as np
import pytest

from rainbalance.ablation import PreparedData, render_table, run_ablation, run_seeds
from rainbalance.config import RunBlock, SynthConfig
from rainbalance.cpm import kl_divergence
from rainbalance.data import normalize_and_window, synthesize, verify_dual_imbalance
from rainbalance.gradcheck import check_model
from rainbalance.model import RainBalanceModel, fuse
from rainbalance.training import load_checkpoint, predict, save_checkpoint, train
from rainbalance.tsca import cluster_loss, compute_similarity, update_centroids

from conftest import TINY, replace, rng
from test_cpm import kl_oracle
from test_model import fuse_oracle
from test_tsca import centroid_oracle, cluster_loss_oracle, similarity_oracle


# ---------------------------------------------------------------- 1. gradient fidelity

@pytest.mark.criterion(1, "end-to-end finite-difference gradient check")
@pytest.mark.parametrize("backbone", ["recurrent", "linear"])
def test_gradient_fidelity(backbone, record_property):
    cfg = replace(TINY, backbone=backbone)
    assert (cfg.l, cfg.input_dim, cfg.h, cfg.K, cfg.d, cfg.N, cfg.hidden_dim) == (8, 3, 2, 3, 4, 2, 4)
    start = time.perf_counter()
    report = check_model(cfg)
    elapsed = time.perf_counter() - start
    record_property(f"{backbone}_max_rel_err", f"{report.max_error:.2e}")
    record_property(f"{backbone}_seconds", f"{elapsed:.1f}")
    assert set(report.errors) == set(RainBalanceModel(cfg).named_parameters())
    assert report.tol == 1e-4 and report.passed, report.failures()
    assert elapsed < 30.0


# ---------------------------------------------------------------- 2. formula oracles

@pytest.mark.criterion(2, "naive-loop oracles on 100 random instances")
def test_formula_oracles(record_property):
    r = rng(2024)
    worst = {"similarity": 0.0, "cluster_loss": 0.0, "centroids": 0.0, "fuse": 0.0, "kl": 0.0}
    for _ in range(100):
        T, K, d, C = r.integers(2, 9), r.integers(1, 6), r.integers(1, 6), r.integers(1, 5)
        x, sigma = r.standard_normal((T, C)), r.uniform(0.1, 5.0)
        worst["similarity"] = max(worst["similarity"], np.abs(
            compute_similarity(x, sigma) - similarity_oracle(x.tolist(), sigma)).max())

        a, s = r.dirichlet(np.ones(K), size=T), compute_similarity(r.standard_normal((T, 2)))
        worst["cluster_loss"] = max(worst["cluster_loss"],
                                    abs(cluster_loss(a, s).item() - cluster_loss_oracle(a, s)))

        u, h = r.standard_normal((K, d)), r.standard_normal((T, d))
        hard = (r.uniform(size=(T, K)) < 0.5).astype(float)
        wq, wk, wv = (r.standard_normal((d, d)) for _ in range(3))
        worst["centroids"] = max(worst["centroids"], np.abs(
            update_centroids(u, h, hard, wq, wk, wv).data - centroid_oracle(u, h, hard, wq, wk, wv)).max())

        pi_hat = r.dirichlet(np.ones(K), size=T)
        worst["fuse"] = max(worst["fuse"], np.abs(fuse(pi_hat, u).data - fuse_oracle(pi_hat, u)).max())

        mu, lv = r.standard_normal((T, d)), r.uniform(-3, 3, (T, d))
        worst["kl"] = max(worst["kl"], abs(kl_divergence(mu, lv).item() - kl_oracle(mu, lv)))
    for name, err in worst.items():
        record_property(name, f"{err:.1e}")
    assert worst["fuse"] <= 1e-12
    assert all(err <= 1e-10 for err in worst.values()), worst


# ---------------------------------------------------------------- 3. closed forms

@pytest.mark.criterion(3, "closed-form spot values and the weighted-loss identity")
def test_closed_form_spot_values():
    assert kl_divergence(np.array([[1.0]]), np.array([[0.0]])).item() == 0.5
    assert cluster_loss(np.eye(3), np.eye(3)).item() == -3.0


@pytest.mark.criterion(3, "closed-form spot values and the weighted-loss identity")
@pytest.mark.parametrize("variant", ["full", "none"])
def test_loss_identity_every_step(variant, small_splits, small_run, record_property):
    tr, va, _ = small_splits
    cfg = replace(small_run, variant=variant)
    state = train(RainBalanceModel(cfg), tr, va, cfg)
    worst = 0.0
    for rec in state.trace:
        expected = rec["beta"] * (rec["cluster"] + rec["kl"]) + (1 - rec["beta"]) * rec["mse"]
        worst = max(worst, abs(rec["total"] - expected) / max(1.0, abs(expected)))
    record_property(f"{variant}_steps", len(state.trace))
    assert len(state.trace) > 30
    assert worst <= 4 * np.finfo(float).eps


# ---------------------------------------------------------------- 4. distribution invariants

@pytest.mark.criterion(4, "distribution rows sum to one, KL nonnegative, eval deterministic")
@pytest.mark.parametrize("variant", ["full", "no_vae", "no_cluster"])
def test_distribution_invariants_over_training(variant, small_splits, small_run, monkeypatch, record_property):
    tr, va, te = small_splits
    cfg = replace(small_run, variant=variant, rounds=2)
    model = RainBalanceModel(cfg)
    seen = {"calls": 0, "pi": 0.0, "pi_hat": 0.0, "kl": np.inf}
    forward = model.forward

    def watched(*args, **kwargs):
        out = forward(*args, **kwargs)
        seen["calls"] += 1
        seen["pi"] = max(seen["pi"], np.abs(out.pi.data.sum(-1) - 1.0).max())
        seen["pi_hat"] = max(seen["pi_hat"], np.abs(out.pi_hat.data.sum(-1) - 1.0).max())
        seen["kl"] = min(seen["kl"], out.kl.item())
        return out

    monkeypatch.setattr(model, "forward", watched)
    state = train(model, tr, va, cfg)
    record_property(f"{variant}_max_row_dev", f"{max(seen['pi'], seen['pi_hat']):.1e}")
    assert seen["calls"] >= len(state.trace)
    assert seen["pi"] <= 1e-9 and seen["pi_hat"] <= 1e-9
    assert seen["kl"] >= -1e-9
    first = predict(model, te)
    assert predict(model, te).tobytes() == first.tobytes()


# ---------------------------------------------------------------- 5. generator calibration

@pytest.mark.criterion(5, "dual-imbalance generator calibration")
def test_generator_calibration(record_property):
    series = synthesize(SynthConfig())
    assert len(series) == 20000
    rep = verify_dual_imbalance(series, 8.0)
    record_property("p_zero", f"{rep.p_zero:.4f}")
    record_property("extreme_among_wet", f"{rep.extreme_among_wet:.4f}")
    assert abs(rep.p_zero - 0.80) <= 0.05
    assert abs(rep.extreme_among_wet - 0.066) <= 0.03
    assert rep.holds


# ---------------------------------------------------------------- 6. directional improvement

@pytest.mark.criterion(6, "full variant beats the bare backbone on default data")
def test_directional_improvement(record_property):
    start = time.perf_counter()
    series = synthesize(SynthConfig())
    data = PreparedData(*normalize_and_window(series, 24, 4), tp=series.tp)
    workers = min(4, os.cpu_count() or 1)
    seeds = [0, 1, 2]
    verdicts = {}
    for backbone in ("recurrent", "linear"):
        runs = run_seeds(RunBlock(backbone=backbone), data, ["none", "full"], seeds, workers=workers)
        by = {(r.variant, r.seed): r.report for r in runs}
        assert all(rep is not None for rep in by.values())
        med_none = np.median([by["none", s].mse for s in seeds])
        med_full = np.median([by["full", s].mse for s in seeds])
        extreme_wins = sum(by["full", s].extreme_mse < by["none", s].extreme_mse for s in seeds)
        record_property(f"{backbone}_median", f"{med_full:.4f} vs {med_none:.4f}")
        record_property(f"{backbone}_extreme_wins", f"{extreme_wins}/3")
        verdicts[backbone] = med_full <= med_none and extreme_wins >= 2
    elapsed = time.perf_counter() - start
    record_property("seconds", f"{elapsed:.0f} on {workers} core(s)")
    assert any(verdicts.values()), verdicts
    assert elapsed < 600.0


# ---------------------------------------------------------------- 7. ablation structure

@pytest.mark.criterion(7, "four-variant ablation with bare-backbone cross-check")
def test_ablation_structure(small_series, small_splits, record_property):
    cfg = RunBlock(l=12, h=2, K=3, d=6, N=3, hidden_dim=5, epochs=1, batch_size=64, workers=1)
    assert cfg.n_seeds == 3
    result = run_ablation(PreparedData(*small_splits, tp=small_series.tp), cfg)
    assert [(r.variant, r.cluster, r.vae) for r in result.rows] == [
        ("none", False, False), ("no_cluster", False, True), ("no_vae", True, False), ("full", True, True)]
    assert result.seeds == [0, 1, 2]
    for row in result.rows:
        assert [r.seed for r in row.runs] == [0, 1, 2]
        assert row.report.mse == pytest.approx(np.mean([r.report.mse for r in row.runs]), rel=1e-12)
    assert result.bare_crosscheck is True
    assert all(r.uniform_pi is True for r in result.row("no_cluster").runs)
    table = render_table(result).splitlines()
    best = min(result.rows, key=lambda r: r.report.mse).variant
    assert [ln.split()[1] for ln in table[2:6] if ln.startswith("*")] == [best]
    record_property("best", best)


# ---------------------------------------------------------------- 8. reproducibility

@pytest.mark.criterion(8, "bitwise reproducible trace and exact resume")
@pytest.mark.parametrize("backbone", ["recurrent", "linear"])
def test_first_ten_steps_reproduce_bitwise(backbone, small_splits, small_run):
    tr, va, _ = small_splits
    cfg = replace(small_run, backbone=backbone)
    traces = [train(RainBalanceModel(cfg), tr, va, cfg, max_steps=10).trace for _ in range(2)]
    assert len(traces[0]) == 10
    for a, b in zip(*traces):
        assert all(np.float64(a[k]).tobytes() == np.float64(b[k]).tobytes() for k in a)


@pytest.mark.criterion(8, "bitwise reproducible trace and exact resume")
def test_resume_matches_uninterrupted(tmp_path, small_splits, small_run):
    tr, va, te = small_splits
    cfg = replace(small_run, epochs=3)
    whole_model = RainBalanceModel(cfg)
    whole = train(whole_model, tr, va, cfg)
    cut = 23
    first = train(RainBalanceModel(cfg), tr, va, cfg, max_steps=cut)
    save_checkpoint(tmp_path / "ck.json", first, cfg, cfg.seed)
    model = RainBalanceModel(cfg)
    rest = train(model, tr, va, cfg, state=load_checkpoint(tmp_path / "ck.json").state)
    assert rest.trace[0] == whole.trace[cut]
    assert [r["total"] for r in rest.trace] == [r["total"] for r in whole.trace[cut:]]
    assert all(rest.params[k].tobytes() == whole.params[k].tobytes() for k in whole.params)
    assert predict(model, te).tobytes() == predict(whole_model, te).tobytes()
