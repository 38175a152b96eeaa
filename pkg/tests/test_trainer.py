"""Optimizer behavior, dual-loss routing contracts, determinism, persistence."""

import dataclasses

import numpy as np
import pytest

from moccnn import models, trainer
from moccnn.data import PatchSample
from moccnn.errors import (
    BadMagicError,
    ChecksumError,
    ConfigurationError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
)

SMALL_EXPERT = models.ExpertNetConfig(input_size=(24, 24), conv_channels=(3, 5),
                                      kernel_sizes=(5, 5), strides=(1, 1), pool_sizes=(2, 3))
SMALL_GATE = models.GatingNetConfig(conv_channels=(4, 6), kernel_sizes=(5, 5),
                                    strides=(1, 1), pool_sizes=(2, 3), hidden=8,
                                    dropout_rate=0.5)


def small_config(**kw):
    base = dict(batch_size=8, epochs=1, lam=1.0, num_experts=3, seed=0,
                precision="high", variant="moc",
                expert_config=SMALL_EXPERT, gate_config=SMALL_GATE)
    base.update(kw)
    return trainer.TrainingConfig(**base)


def fake_patches(n, seed=0, size=24, target_scale=5.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.random((1, size, size)).astype(np.float32)
        out.append(PatchSample(patch=img, target=float(rng.uniform(0, target_scale)),
                               origin=(f"f{i}", 0, 0)))
    return out


def params_equal(a, b):
    pa, pb = a.named_params(), b.named_params()
    return all(np.array_equal(pa[k], pb[k]) for k in pa)


class TestAdam:
    def test_zero_gradient_fresh_state_no_move(self):
        p = {"w": np.array([1.0, -2.0])}
        state = trainer.AdamState()
        trainer.adam_step(p, {"w": np.zeros(2)}, state, eta=0.1)
        assert np.array_equal(p["w"], [1.0, -2.0])
        assert state.t == 1

    def test_quadratic_convergence(self):
        w = {"w": np.array([1.0])}
        state = trainer.AdamState()
        for _ in range(500):
            trainer.adam_step(w, {"w": 2.0 * w["w"]}, state, eta=0.1)
        assert abs(w["w"][0]) < 1e-3

    @pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
    def test_first_step_magnitude_is_eta(self, scale):
        # bias correction makes the first update ~eta * sign(g) for |g| >> eps
        p = {"w": np.array([0.0])}
        state = trainer.AdamState()
        trainer.adam_step(p, {"w": np.array([scale])}, state, eta=0.01)
        assert abs(abs(p["w"][0]) - 0.01) < 0.01 * 0.01

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            trainer.adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)},
                              trainer.AdamState(), eta=0.1)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p = {"w": np.linspace(-1, 1, 5)}
            state = trainer.AdamState()
            for i in range(10):
                trainer.adam_step(p, {"w": np.sin(p["w"] + i)}, state, eta=0.05)
            runs.append(p["w"].copy())
        assert np.array_equal(runs[0], runs[1])


class TestTrainStep:
    def test_losses_returned_and_finite(self):
        cfg = small_config()
        model = trainer.build_model(cfg)
        opt = trainer.DualOptimizer(cfg.optimizer)
        res = trainer.train_step(model, fake_patches(8), opt, np.random.default_rng(0))
        assert np.isfinite(res.expert_loss)
        assert res.gate_total == pytest.approx(res.gate_mse + res.gate_penalty)

    def test_stop_gradient_contract(self):
        # one step with lambda 0 vs 100: identical experts, different gate
        results = {}
        for lam in (0.0, 100.0):
            cfg = small_config(lam=lam)
            model = trainer.build_model(cfg)
            opt = trainer.DualOptimizer(cfg.optimizer)
            trainer.train_step(model, fake_patches(8, seed=4), opt, np.random.default_rng(7))
            results[lam] = model
        a, b = results[0.0], results[100.0]
        for k in a.named_params():
            if k.startswith("expert"):
                assert np.array_equal(a.named_params()[k], b.named_params()[k]), k
        assert any(not np.array_equal(a.named_params()[k], b.named_params()[k])
                   for k in a.named_params() if k.startswith("gate"))

    def test_eta_gate_does_not_touch_experts(self):
        snaps = {}
        for eta_gate in (1e-3, 1e-1):
            cfg = small_config()
            cfg.optimizer = trainer.OptimizerConfig(eta_gate=eta_gate)
            model = trainer.build_model(cfg)
            opt = trainer.DualOptimizer(cfg.optimizer)
            trainer.train_step(model, fake_patches(8, seed=1), opt, np.random.default_rng(3))
            snaps[eta_gate] = model
        a, b = snaps[1e-3], snaps[1e-1]
        for k in a.named_params():
            if k.startswith("expert"):
                assert np.array_equal(a.named_params()[k], b.named_params()[k])

    def test_eta_expert_does_not_touch_gate(self):
        snaps = {}
        for eta_expert in (1e-3, 1e-1):
            cfg = small_config()
            cfg.optimizer = trainer.OptimizerConfig(eta_expert=eta_expert)
            model = trainer.build_model(cfg)
            opt = trainer.DualOptimizer(cfg.optimizer)
            trainer.train_step(model, fake_patches(8, seed=1), opt, np.random.default_rng(3))
            snaps[eta_expert] = model
        a, b = snaps[1e-3], snaps[1e-1]
        for k in a.named_params():
            if k.startswith("gate"):
                assert np.array_equal(a.named_params()[k], b.named_params()[k])

    def test_empty_batch_rejected(self):
        cfg = small_config()
        model = trainer.build_model(cfg)
        with pytest.raises(ConfigurationError):
            trainer.train_step(model, [], trainer.DualOptimizer(cfg.optimizer),
                               np.random.default_rng(0))


class TestKOneReduction:
    def test_moc_k1_lam0_matches_ordinary_bitwise(self):
        # 50 steps: the K=1 lambda=0 mixture and the single net must coincide
        patches = fake_patches(80, seed=2)
        cfg_moc = small_config(num_experts=1, lam=0.0, epochs=5, seed=21)
        cfg_ord = small_config(variant="ordinary", num_experts=1, lam=0.0, epochs=5, seed=21)
        m_moc, logs_moc = trainer.train(cfg_moc, patches)
        m_ord, logs_ord = trainer.train(cfg_ord, patches)
        assert len(logs_moc) * 10 == 50
        pa, pb = m_moc.named_params(), m_ord.named_params()
        for k in pb:
            assert np.array_equal(pa[k], pb[k]), k
        for la, lb in zip(logs_moc, logs_ord):
            assert la.expert_loss == lb.expert_loss


class TestTrainLoop:
    def test_loss_decreases_on_learnable_data(self):
        # targets are a fixed linear functional of the patch, so it is learnable
        rng = np.random.default_rng(0)
        w_true = rng.random((24, 24)).astype(np.float32)
        patches = []
        for i in range(64):
            img = rng.random((1, 24, 24)).astype(np.float32)
            patches.append(PatchSample(patch=img, target=float((img[0] * w_true).mean() * 20),
                                       origin=(f"p{i}", 0, 0)))
        cfg = small_config(epochs=25, precision="standard", num_experts=2, batch_size=16)
        model, logs = trainer.train(cfg, patches)
        assert logs[-1].expert_loss < logs[0].expert_loss

    def test_determinism_same_config_same_logs(self):
        patches = fake_patches(24, seed=5)
        cfg = small_config(epochs=3, seed=13)
        m1, l1 = trainer.train(cfg, patches)
        m2, l2 = trainer.train(cfg, patches)
        assert params_equal(m1, m2)
        assert [trainer.log_row(a) for a in l1] == [trainer.log_row(b) for b in l2]

    def test_gate_entropy_in_range(self):
        patches = fake_patches(24, seed=6)
        cfg = small_config(epochs=2, num_experts=4)
        _, logs = trainer.train(cfg, patches)
        for entry in logs:
            assert 0.0 <= entry.gate_entropy <= np.log(4) + 1e-12

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            trainer.train(small_config(), [])

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_guard(self):
        patches = fake_patches(16, seed=7, target_scale=1e30)
        cfg = small_config(epochs=60, precision="standard",
                           optimizer=trainer.OptimizerConfig(eta_expert=1e6, eta_gate=1e6))
        with pytest.raises(TrainingDivergedError) as exc_info:
            trainer.train(cfg, patches)
        assert exc_info.value.step is not None

    def test_log_schema_across_variants(self):
        patches = fake_patches(16, seed=8)
        for variant, k in (("moc", 2), ("ordinary", 1), ("fc_gating", 2)):
            cfg = small_config(variant=variant, num_experts=k, lam=0.0 if variant != "moc" else 1.0)
            model, logs = trainer.train(cfg, patches)
            header = trainer.log_header(k if variant != "ordinary" else 1)
            row = trainer.log_row(logs[-1])
            assert header.count(",") == row.count(",")
            assert header.startswith("epoch,expert_loss,gate_mse,gate_penalty,gate_entropy,mean_g_1")


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = small_config(epochs=1)
        model, _ = trainer.train(cfg, fake_patches(16, seed=9))
        path = tmp_path / "m.ckpt"
        trainer.save_checkpoint(model, path)
        loaded, meta = trainer.load_checkpoint(path)
        assert params_equal(model, loaded)
        for k, st in model.named_bn_states().items():
            lst = loaded.named_bn_states()[k]
            assert np.array_equal(st.mean, lst.mean)
            assert np.array_equal(st.var, lst.var)
            assert st.count == lst.count
        assert meta["kind"] == "moc"

    def test_forward_identical_after_round_trip(self, tmp_path):
        cfg = small_config(epochs=1, precision="standard")
        model, _ = trainer.train(cfg, fake_patches(16, seed=10))
        path = tmp_path / "m.ckpt"
        trainer.save_checkpoint(model, path)
        loaded, _ = trainer.load_checkpoint(path)
        x = np.random.default_rng(3).random((4, 1, 24, 24)).astype(np.float32)
        assert np.array_equal(model.predict_batch(x), loaded.predict_batch(x))

    def test_baseline_round_trips(self, tmp_path):
        for variant in ("ordinary", "fc_gating"):
            cfg = small_config(variant=variant, num_experts=2, lam=0.0, epochs=1)
            model, _ = trainer.train(cfg, fake_patches(16, seed=11))
            path = tmp_path / f"{variant}.ckpt"
            trainer.save_checkpoint(model, path)
            loaded, _ = trainer.load_checkpoint(path)
            assert loaded.kind == model.kind
            assert params_equal(model, loaded)

    def test_bad_magic(self, tmp_path):
        cfg = small_config()
        trainer.save_checkpoint(trainer.build_model(cfg), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[:4] = b"NOPE"
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            trainer.load_checkpoint(tmp_path / "bad.ckpt")

    def test_version_mismatch(self, tmp_path):
        cfg = small_config()
        trainer.save_checkpoint(trainer.build_model(cfg), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[4] = 99
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            trainer.load_checkpoint(tmp_path / "v.ckpt")

    def test_truncation(self, tmp_path):
        cfg = small_config()
        trainer.save_checkpoint(trainer.build_model(cfg), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedCheckpointError):
            trainer.load_checkpoint(tmp_path / "t.ckpt")

    def test_checksum_catches_flipped_byte(self, tmp_path):
        cfg = small_config()
        trainer.save_checkpoint(trainer.build_model(cfg), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises((ChecksumError, TruncatedCheckpointError)):
            trainer.load_checkpoint(tmp_path / "c.ckpt")


class TestResume:
    def test_resumed_training_matches_unbroken(self, tmp_path):
        # 2 epochs + resume for 2 more == straight 4 epochs, bitwise;
        # 80 samples / batch 8 = 10 steps per epoch, so 20 resumed steps
        patches = fake_patches(80, seed=12)
        cfg4 = small_config(epochs=4, seed=31, precision="standard")
        straight, logs4 = trainer.train(cfg4, patches)

        cfg2 = dataclasses.replace(cfg4, epochs=2)
        state_path = tmp_path / "state.ckpt"
        trainer.train(cfg2, patches, state_out=state_path)
        resumed, logs_resumed = trainer.train(cfg4, patches, resume_from=state_path)

        assert params_equal(straight, resumed)
        assert [trainer.log_row(r) for r in logs_resumed] == \
               [trainer.log_row(r) for r in logs4[2:]]

    def test_adam_state_round_trips(self, tmp_path):
        patches = fake_patches(16, seed=13)
        cfg = small_config(epochs=1, seed=5)
        model, _ = trainer.train(cfg, patches)
        opt = trainer.DualOptimizer(cfg.optimizer)
        # run one more manual step to have nonzero moments, then persist
        trainer.train_step(model, patches[:8], opt, np.random.default_rng(0))
        trainer.save_training_state(model, opt, 1, cfg, tmp_path / "s.ckpt")
        _, opt2, next_epoch = trainer.load_training_state(tmp_path / "s.ckpt")
        assert next_epoch == 1
        for group, state in opt.states.items():
            st2 = opt2.states[group]
            assert st2.t == state.t
            for name in state.m:
                assert np.array_equal(state.m[name], st2.m[name])
                assert np.array_equal(state.v[name], st2.v[name])


class TestSmokeTraining:
    def test_200_steps_on_synthetic_scenes_reduces_loss(self):
        from moccnn import data

        scenes = data.synth_generate(data.modes3(), 50, seed=77)
        patches = data.build_training_patches(scenes, 8, 4.0, seed=7)  # 400 patches
        expert = models.ExpertNetConfig(conv_channels=(4, 8), strides=(3, 1))
        gate = models.GatingNetConfig(conv_channels=(6, 12), strides=(3, 1), hidden=16)
        # 7 steps/epoch at batch 64 -> 203 steps over 29 epochs
        cfg = trainer.TrainingConfig(batch_size=64, epochs=29, lam=1.0, num_experts=3,
                                     seed=1, precision="standard",
                                     expert_config=expert, gate_config=gate)
        model, logs = trainer.train(cfg, patches)
        assert logs[-1].expert_loss < logs[0].expert_loss
