"""Acceptance criteria, one test per criterion, one printed verdict line each.

The heavy experiments (criteria 6-8) share session-scoped fixtures: the
collapse pair trains the same configuration with the variance weight at 0 and
at 1 from one seed; the ablation runs the three model kinds through the same
5-fold budget. Functional thresholds are asserted; wall-clock is printed for
the budget-bound criteria.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
"""

import dataclasses
import time

import numpy as np
import pytest

from moccnn import data, gradaudit, layers, metrics, models, trainer
from moccnn.data import PatchSample
from moccnn.moe import BatchPrediction, expert_loss, gating_loss, grad_expert_outputs
from moccnn.tensor import max_relative_error, numerical_gradient

# --- experiment configuration (compact nets keep the CPU budgets honest) ----

EXPERT_CFG = models.ExpertNetConfig(conv_channels=(6, 12), strides=(3, 1))
GATE_CFG = models.GatingNetConfig(conv_channels=(12, 24), strides=(3, 1), hidden=32)

TRAIN_SCENES_SEED = 1234
TEST_SCENES_SEED = 5678
CROP_SEED = 99
SIGMA = 4.0
PAIR_SEED = 0

SMALL_EXPERT = models.ExpertNetConfig(input_size=(24, 24), conv_channels=(3, 5))
SMALL_GATE = models.GatingNetConfig(conv_channels=(4, 6), hidden=8)


def report(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def fake_patches(n, seed=0, size=72):
    rng = np.random.default_rng(seed)
    return [PatchSample(patch=rng.random((1, size, size), dtype=np.float32),
                        target=float(rng.uniform(0, 10)), origin=(f"f{i}", 0, 0))
            for i in range(n)]


@pytest.fixture(scope="session")
def modes3_scenes():
    train = data.synth_generate(data.modes3(), 50, seed=TRAIN_SCENES_SEED)
    test = data.synth_generate(data.modes3(), 30, seed=TEST_SCENES_SEED)
    return train, test


@pytest.fixture(scope="session")
def collapse_runs(modes3_scenes):
    """Criterion-6 experiment: seed-paired 30-epoch runs at lambda 0 and 1."""
    train_scenes, test_scenes = modes3_scenes
    patches = data.build_training_patches(train_scenes, 80, SIGMA, seed=CROP_SEED)
    out = {}
    t0 = time.time()
    for lam in (0.0, 1.0):
        cfg = trainer.TrainingConfig(
            batch_size=64, epochs=30, lam=lam, num_experts=4, seed=PAIR_SEED,
            expert_config=EXPERT_CFG, gate_config=GATE_CFG)
        model, logs = trainer.train(cfg, patches)
        out[lam] = (model, logs)
    out["runtime"] = time.time() - t0
    out["test_scenes"] = test_scenes
    return out


class TestCriterion1:
    def test_gradient_oracle_suite(self):
        t0 = time.time()
        results = gradaudit.run_audit(n_seeds=20, full=True)
        dt = time.time() - t0
        failures = [r.name for r in results if not r.ok]
        worst = max(r.max_err for r in results if not r.expected_fail)
        report(1, not failures and dt < 120,
               f"all layer/formula/chain backwards vs central differences, "
               f"{len(results)} checks x 20 seeds, worst={worst:.2e}, {dt:.0f}s (budget 120s)")


class TestCriterion2:
    def test_expert_gradient_identity(self):
        rng = np.random.default_rng(7)
        n, k = 6, 5
        g = rng.dirichlet(np.ones(k), size=n)
        g[0, :] = 0.0
        g[0, 2] = 1.0  # exact zeros in a row
        e = rng.standard_normal((n, k)) * 4
        t = rng.standard_normal(n) * 3
        pred = BatchPrediction.from_outputs(g, e, t)
        analytic = grad_expert_outputs(pred)
        closed_form = (2.0 / n) * g * (pred.y - t)[:, None]
        elementwise = np.array_equal(analytic, closed_form)
        zero_rows = np.all(analytic[g == 0.0] == 0.0)

        def f():
            return expert_loss(BatchPrediction.from_outputs(g, e, t))

        numeric = numerical_gradient(f, {"e": e}, h=1e-2)["e"]
        fd_err = max_relative_error(analytic, numeric, floor=1e-4)
        report(2, elementwise and zero_rows and fd_err < 1e-8,
               f"(2/N) g (y - t) identity exact, zero-gate rows exactly zero, "
               f"FD error {fd_err:.2e} < 1e-8")


class TestCriterion3:
    def test_stop_gradient(self):
        batch = fake_patches(16, seed=3, size=24)
        snap = {}
        for lam in (0.0, 100.0):
            cfg = trainer.TrainingConfig(batch_size=16, epochs=1, lam=lam, num_experts=3,
                                         seed=11, precision="high",
                                         expert_config=SMALL_EXPERT, gate_config=SMALL_GATE)
            model = trainer.build_model(cfg)
            opt = trainer.DualOptimizer(cfg.optimizer)
            trainer.train_step(model, batch, opt, np.random.default_rng(5))
            snap[lam] = model.named_params()
        experts_identical = all(np.array_equal(snap[0.0][k], snap[100.0][k])
                                for k in snap[0.0] if k.startswith("expert"))
        gate_differs = any(not np.array_equal(snap[0.0][k], snap[100.0][k])
                           for k in snap[0.0] if k.startswith("gate"))
        report(3, experts_identical and gate_differs,
               "one step at lambda 0 vs 100: expert params bitwise-identical, "
               "gate params diverge")


class TestCriterion4:
    def test_k1_reduction_50_steps(self):
        t0 = time.time()
        patches = fake_patches(160, seed=4)  # 10 steps/epoch at batch 16
        common = dict(batch_size=16, epochs=5, num_experts=1, seed=21,
                      precision="standard", expert_config=EXPERT_CFG,
                      gate_config=GATE_CFG)
        m_moc, logs_moc = trainer.train(
            trainer.TrainingConfig(lam=0.0, variant="moc", **common), patches)
        m_ord, logs_ord = trainer.train(
            trainer.TrainingConfig(lam=0.0, variant="ordinary", **common), patches)
        steps = 5 * 10
        pa, pb = m_moc.named_params(), m_ord.named_params()
        identical = all(np.array_equal(pa[k], pb[k]) for k in pb)
        losses_match = all(a.expert_loss == b.expert_loss
                           for a, b in zip(logs_moc, logs_ord))
        dt = time.time() - t0
        report(4, identical and losses_match and dt < 60,
               f"K=1 lambda=0 mixture bitwise-identical to single net over {steps} steps, "
               f"{dt:.0f}s (budget 60s)")


class TestCriterion5:
    def test_variance_penalty_values(self):
        checks = []
        for lam in (0.5, 1.0, 3.0):
            uniform = np.full((1, 6), 1.0 / 6.0)
            bd = gating_loss(BatchPrediction.from_outputs(uniform, np.zeros((1, 6)), [0.0]), lam)
            checks.append(abs(bd.penalty) <= 1e-12)
            onehot = np.zeros((1, 10))
            onehot[0, 4] = 1.0
            bd = gating_loss(BatchPrediction.from_outputs(onehot, np.zeros((1, 10)), [0.0]), lam)
            checks.append(abs(bd.penalty - 0.09 * lam) <= 1e-12)
            g = np.array([[0.75, 0.25]])
            bd = gating_loss(BatchPrediction.from_outputs(g, np.zeros((1, 2)), [0.0]), lam)
            checks.append(abs(bd.penalty - 0.0625 * lam) <= 1e-12)
        report(5, all(checks),
               "uniform -> 0, one-hot K=10 -> 0.09*lambda, (0.75,0.25) -> 0.0625*lambda, "
               "all exact to 1e-12")


class TestCriterion6:
    def test_collapse_vs_regularization(self, collapse_runs):
        _, logs0 = collapse_runs[0.0]
        _, logs1 = collapse_runs[1.0]
        max_g0 = float(logs0[-1].mean_gate.max())
        max_g1 = float(logs1[-1].mean_gate.max())
        n_big = int((logs1[-1].mean_gate >= 0.15).sum())
        h0, h1 = logs0[-1].gate_entropy, logs1[-1].gate_entropy
        ok = (max_g0 >= 0.70) and (n_big >= 2) and (h1 > h0)
        report(6, ok,
               f"lambda=0 collapses (max mean gate {max_g0:.3f} >= 0.70); lambda=1 keeps "
               f"{n_big} experts >= 0.15 and entropy {h1:.3f} > {h0:.3f}; "
               f"paired runtime {collapse_runs['runtime']:.0f}s (budget 900s); "
               f"lambda=0 max {max_g0:.3f} > lambda=1 max {max_g1:.3f}")


@pytest.fixture(scope="session")
def ablation_runs(modes3_scenes):
    """Criterion-7 experiment: 5-fold, seed-paired, identical budgets."""
    train_scenes, _ = modes3_scenes
    results = {"runtime": 0.0}
    t0 = time.time()
    for variant, lam in (("moc", 1.0), ("ordinary", 0.0), ("fc_gating", 0.0)):
        cfg = trainer.TrainingConfig(
            batch_size=64, epochs=30, lam=lam, num_experts=4, seed=PAIR_SEED,
            variant=variant, expert_config=EXPERT_CFG, gate_config=GATE_CFG)
        _, aggregate = metrics.crossval(cfg, train_scenes, k=5, seed=PAIR_SEED,
                                        crops_per_scene=40, with_mde=False)
        results[variant] = aggregate
    results["runtime"] = time.time() - t0
    return results


class TestCriterion7:
    def test_ablation_ordering(self, ablation_runs):
        moc = ablation_runs["moc"].mae
        ordinary = ablation_runs["ordinary"].mae
        fc = ablation_runs["fc_gating"].mae
        ok = (moc < ordinary) and (moc <= fc)
        report(7, ok,
               f"aggregate MAE: mixture {moc:.3f} < single-net {ordinary:.3f} and "
               f"mixture {moc:.3f} <= fixed-weights {fc:.3f}; "
               f"runtime {ablation_runs['runtime']:.0f}s (budget 2700s)")


class TestCriterion8:
    def test_specialization_report(self, collapse_runs):
        model, _ = collapse_runs[1.0]
        rows, aggregates = metrics.gating_report(model, collapse_runs["test_scenes"])
        consistencies = {}
        mode_dominants = {}
        for mode in sorted(aggregates):
            mode_rows = [r for r in rows if r.mode == mode]
            doms = [r.dominant for r in mode_rows]
            vals, counts = np.unique(doms, return_counts=True)
            consistencies[mode] = counts.max() / len(doms)
            mode_dominants[mode] = int(vals[np.argmax(counts)])
        distinct = len(set(mode_dominants.values()))
        ok = (len(consistencies) == 3
              and all(c >= 0.70 for c in consistencies.values())
              and distinct >= 2)
        detail = ", ".join(f"{m}: expert {mode_dominants[m]} on {consistencies[m]:.0%}"
                           for m in sorted(consistencies))
        report(8, ok, f"{detail}; {distinct} distinct dominant experts across modes")


class TestCriterion9:
    def test_data_pipeline_conservation(self):
        t0 = time.time()
        scenes = data.synth_generate(data.modes3(), 100, seed=11)
        mass_ok = True
        additivity_ok = True
        for scene in scenes:
            dm = data.render_density(scene, SIGMA)
            n = len(scene.dots)
            if abs(dm.total_mass - n) > max(n, 1) * 1e-3:
                mass_ok = False
            patches = data.grid_partition(scene, dm)
            if abs(sum(p.target for p in patches) - dm.values.sum()) > 1e-9:
                additivity_ok = False
        dt = time.time() - t0
        report(9, mass_ok and additivity_ok and dt < 60,
               f"density mass and patch-target additivity hold on 100 scenes, "
               f"{dt:.0f}s (budget 60s)")


class TestCriterion10:
    def test_metrics_unit_anchor(self):
        rep = metrics.score([10.0, 20.0], [12.0, 16.0])
        anchor = (abs(rep.mae - 3.0) <= 1e-12
                  and abs(rep.msd - np.sqrt(10.0)) <= 1e-12
                  and abs(rep.mse - 10.0) <= 1e-12
                  and abs(rep.mde - 0.2) <= 1e-12)
        rng = np.random.default_rng(10)
        prop = True
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            t = rng.uniform(0.5, 100, n)
            y = t + rng.standard_normal(n) * rng.uniform(0.05, 30)
            r = metrics.score(t, y, with_mde=False)
            if r.msd < r.mae - 1e-12:
                prop = False
                break
        report(10, anchor and prop,
               "t=(10,20), y=(12,16) -> MAE 3, MSD sqrt(10), MSE 10, MDE 0.2 exact; "
               "msd >= mae over 1000 random vectors")


class TestCriterion11:
    def test_determinism_and_persistence(self, tmp_path):
        t0 = time.time()
        patches = fake_patches(160, seed=6, size=24)
        cfg = trainer.TrainingConfig(batch_size=16, epochs=4, lam=1.0, num_experts=2,
                                     seed=17, precision="standard",
                                     expert_config=SMALL_EXPERT, gate_config=SMALL_GATE)
        # byte-identical logs and checkpoints from a fixed (config, seed)
        blobs = []
        for run_dir in ("a", "b"):
            d = tmp_path / run_dir
            d.mkdir()
            model, logs = trainer.train(cfg, patches)
            trainer.write_log(d / "log.csv", logs, 2)
            trainer.save_checkpoint(model, d / "model.ckpt")
            blobs.append(((d / "log.csv").read_bytes(), (d / "model.ckpt").read_bytes()))
        byte_identical = blobs[0] == blobs[1]

        # bitwise checkpoint round-trip
        model, _ = trainer.train(cfg, patches)
        trainer.save_checkpoint(model, tmp_path / "rt.ckpt")
        loaded, _ = trainer.load_checkpoint(tmp_path / "rt.ckpt")
        pa, pb = model.named_params(), loaded.named_params()
        round_trip = all(np.array_equal(pa[k], pb[k]) for k in pa)

        # resume: 2 epochs + 2 epochs == 4 epochs (20 resumed steps >= 10)
        cfg2 = dataclasses.replace(cfg, epochs=2)
        trainer.train(cfg2, patches, state_out=tmp_path / "half.ckpt")
        resumed, _ = trainer.train(cfg, patches, resume_from=tmp_path / "half.ckpt")
        pr = resumed.named_params()
        resume_ok = all(np.array_equal(pa[k], pr[k]) for k in pa)
        dt = time.time() - t0
        report(11, byte_identical and round_trip and resume_ok and dt < 120,
               f"byte-identical reruns, bitwise checkpoint round-trip, resumed training "
               f"matches unbroken over 20 steps, {dt:.0f}s (budget 120s)")
